import numpy as np
import pytest

from trclab.backbones import BackboneConfig, TrainHP, build_backbone, train_backbone
from trclab.data import (CATEGORICAL, NUMERICAL, Column, Dataset, FeatureSchema, SyntheticSpec, Task,
                         fit_apply_preprocessor, generate_synthetic, split_dataset)


def numeric_dataset(X, y, task=Task("regression")):
    X = np.asarray(X, dtype=float)
    schema = FeatureSchema(tuple(Column(f"x{j}", NUMERICAL) for j in range(X.shape[1])))
    return Dataset(schema, X, np.asarray(y), task)


def mixed_schema(d_num=2, cards=(3,)):
    cols = [Column(f"n{j}", NUMERICAL) for j in range(d_num)]
    cols += [Column(f"c{j}", CATEGORICAL, c, tuple(str(k) for k in range(c))) for j, c in enumerate(cards)]
    return FeatureSchema(tuple(cols))


@pytest.fixture(scope="session")
def small_regression():
    ds = generate_synthetic(SyntheticSpec("regression", N=300, d_num=4, d_cat=1, noise_std=0.1, seed=3))
    pre, split = fit_apply_preprocessor(split_dataset(ds, seed=0), "quantile")
    return pre, split


@pytest.fixture(scope="session")
def small_binary():
    ds = generate_synthetic(SyntheticSpec("binary", N=300, d_num=4, d_cat=1, noise_std=0.1, seed=4))
    pre, split = fit_apply_preprocessor(split_dataset(ds, seed=0), "quantile")
    return pre, split


@pytest.fixture()
def trained_backbone(small_regression):
    pre, split = small_regression
    bb = build_backbone(BackboneConfig(width=16, seed=0), split.train.schema, split.train.task)
    train_backbone(bb, split, TrainHP(lr=1e-3, max_epochs=15), pre)
    return bb.freeze(), pre, split


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 12):
        ok, detail = mod.RESULTS.get(n, (False, "not run"))
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")

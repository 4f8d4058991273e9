"""Experiment configuration, multi-seed orchestration and reports."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .backbones import (Backbone, BackboneConfig, TrainHP, TrainLog, build_backbone, evaluate,
                        train_backbone)
from .data import (Dataset, EmpiricalSampler, Preprocessor, Split, SyntheticSpec, Task,
                   fit_apply_preprocessor, generate_synthetic, inject_feature_noise, inject_missing,
                   load_csv, load_schema_file, split_dataset)
from .diagnostics import sve
from .stats import MIN_PAIRS, wilcoxon_signed_rank
from .trc import TrcHP, VARIANT_SWITCHES, corrected_representations, infer_trc, train_trc, variant_hp

BASELINES = ("baseline", "deeper_baseline")
VARIANTS = BASELINES + tuple(VARIANT_SWITCHES)
ABLATION_VARIANTS = ("baseline", "tr_only", "sc_only", "tr_sc", "sc_de", "trc")
DEEPER_EXTRA_LAYERS = 3
WILCOXON_MIN_REPORT = 6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment schema; every field is also a ``--key`` CLI flag."""

    name: str = "experiment"
    out_dir: str = "runs"
    # data source: a CSV (with optional sidecar schema) or the synthetic generator
    csv: str = ""
    schema: str = ""
    label: str = "target"
    task: str = "regression"
    n_classes: int = 2
    syn_n: int = 1000
    syn_d_num: int = 8
    syn_d_cat: int = 2
    syn_cardinality: int = 3
    syn_noise_std: float = 0.1
    feature_noise: float = 0.0
    data_seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    preprocess: str = "quantile"
    missing_ratio: float = 0.0
    # backbone
    arch: str = "mlp"
    depth: int = 2
    width: int = 32
    embed_dim: int = 8
    bb_lr: float = 1e-4
    bb_wd: float = 1e-5
    bb_max_epochs: int = 100
    batch: int = 128
    patience: int = 10
    # corrector
    tau: float = 0.01
    M: int = 3
    eta_low: float = 0.1
    eta_high: float = 0.3
    T: int = 10
    orth_weight: float = 1.0
    mask_means_keep: bool = True
    opt_source: str = "val"
    regen_shifts: bool = False
    trc_lr: float = 1e-4
    trc_wd: float = 1e-5
    trc_max_epochs: int = 100
    # protocol
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = ("baseline", "trc")

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; choose from {list(VARIANTS)}")
        if self.task not in ("regression", "binary", "multiclass"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.preprocess not in ("quantile", "zscore"):
            raise ConfigError(f"unknown preprocessing {self.preprocess!r}")
        if not 0 <= self.feature_noise <= 1 or not 0 <= self.missing_ratio < 1:
            raise ConfigError("noise and missing ratios must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        if not 0 <= self.eta_low <= self.eta_high <= 1:
            raise ConfigError("need 0 <= eta_low <= eta_high <= 1")
        if self.T < 0 or self.M < 0 or self.orth_weight < 0:
            raise ConfigError("T, M and orth_weight must be non-negative")
        for v in self.variants:
            sw = VARIANT_SWITCHES.get(v)
            if sw is None:
                continue
            if sw["use_tr"] and self.M == 0:
                raise ConfigError(f"variant {v!r} needs re-estimation but M=0 disables it")
            if sw["use_sc"] and self.T == 0:
                raise ConfigError(f"variant {v!r} needs space mapping but T=0 disables it")
        BackboneConfig(self.arch, self.depth, self.width, self.embed_dim)
        return self

    # conversions
    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: coerce(known[k].type, v, k) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def task_obj(self) -> Task:
        return Task(self.task, self.n_classes if self.task != "regression" else 1)

    def backbone_cfg(self, seed: int, extra_depth: int = 0) -> BackboneConfig:
        return BackboneConfig(self.arch, self.depth + extra_depth, self.width, self.embed_dim, seed)

    def backbone_hp(self) -> TrainHP:
        return TrainHP(self.bb_lr, self.bb_wd, self.batch, self.patience, self.bb_max_epochs)

    def trc_hp(self, seed: int, variant: str = "trc") -> TrcHP:
        hp = TrcHP(tau=self.tau, M=max(self.M, 1), eta_range=(self.eta_low, self.eta_high), T=max(self.T, 1),
                   orth_weight=self.orth_weight, mask_means_keep=self.mask_means_keep,
                   opt_source=self.opt_source, regen_shifts=self.regen_shifts, lr=self.trc_lr,
                   wd=self.trc_wd, batch=self.batch, patience=self.patience,
                   max_epochs=self.trc_max_epochs, seed=seed)
        return variant_hp(hp, variant)

    def run_dir(self, seed: int) -> Path:
        return Path(self.out_dir) / self.name / f"seed{seed}"


def coerce(tp: Any, value: Any, key: str = "") -> Any:
    """Convert a JSON/CLI value to the declared field type (annotations are strings)."""
    tp = str(tp)
    try:
        if tp.startswith("tuple"):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            inner = tp[tp.index("[") + 1:].split(",")[0].strip(" ]")
            return tuple(coerce(inner, v, key) for v in value)
        if tp == "bool":
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if tp == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for key {key!r} ({tp})") from None


# ----------------------------------------------------------------- pipeline

def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Source dataset, including any configured inherent feature noise."""
    task = cfg.task_obj()
    if cfg.csv:
        kinds = None
        label = cfg.label
        if cfg.schema:
            cols, label = load_schema_file(cfg.schema)
            kinds = {c["name"]: c["kind"] for c in cols}
        ds = load_csv(cfg.csv, label, task, kinds=kinds)
    else:
        ds = generate_synthetic(SyntheticSpec(cfg.task, cfg.syn_n, cfg.syn_d_num, cfg.syn_d_cat,
                                              cfg.syn_noise_std, cfg.data_seed, cfg.n_classes,
                                              cfg.syn_cardinality))
    if cfg.feature_noise > 0:
        rng = np.random.default_rng([cfg.data_seed, 11])
        ds = inject_feature_noise(ds, cfg.feature_noise, EmpiricalSampler.from_dataset(ds), rng)
    return ds


@dataclass
class Prepared:
    raw: Split
    split: Split
    pre: Preprocessor
    sampler: EmpiricalSampler


def prepare(cfg: ExperimentConfig, seed: int, ds: Dataset | None = None,
            train_noise: float = 0.0) -> Prepared:
    """Split, optional missing-cell / train-noise injection, preprocessing."""
    ds = ds if ds is not None else load_dataset(cfg)
    raw = split_dataset(ds, cfg.split, seed)
    if cfg.missing_ratio > 0:
        raw = inject_missing(raw, cfg.missing_ratio, np.random.default_rng([seed, 12]))
    if train_noise > 0:
        noisy = inject_feature_noise(raw.train, train_noise, EmpiricalSampler.from_dataset(raw.train),
                                     np.random.default_rng([seed, 13]))
        raw = Split(noisy, raw.val, raw.test, raw.indices)
    pre, split = fit_apply_preprocessor(raw, cfg.preprocess)
    return Prepared(raw, split, pre, EmpiricalSampler.from_dataset(split.train))


def fit_backbone(cfg: ExperimentConfig, prep: Prepared, seed: int, extra_depth: int = 0,
                 hp: TrainHP | None = None) -> tuple[Backbone, TrainLog]:
    bb = build_backbone(cfg.backbone_cfg(seed, extra_depth), prep.split.train.schema, prep.split.train.task)
    log = train_backbone(bb, prep.split, hp or cfg.backbone_hp(), prep.pre)
    return bb.freeze(), log


# ------------------------------------------------------------------- report

@dataclass
class Report:
    config: dict
    metric_name: str
    higher_is_better: bool
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wilcoxon: dict | None = None

    def summarize(self) -> "Report":
        self.summary = {}
        for v in dict.fromkeys(r["variant"] for r in self.rows):
            vals = np.array([r["metric"] for r in self.rows if r["variant"] == v])
            sves = np.array([r["sve"] for r in self.rows if r["variant"] == v])
            self.summary[v] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                               "median": float(np.median(vals)), "sve_mean": float(np.mean(sves)),
                               "n": int(len(vals))}
        self.wilcoxon = significance(self.rows, self.higher_is_better)
        return self

    def medians(self) -> dict[str, float]:
        return {v: s["median"] for v, s in self.summary.items()}

    def metrics(self, variant: str) -> list[float]:
        return [r["metric"] for r in self.rows if r["variant"] == variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "metric", "sve", "seconds"])
        for r in self.rows:
            w.writerow([r["variant"], r["seed"], repr(r["metric"]), repr(r["sve"]), f"{r['seconds']:.3f}"])
        return buf.getvalue()

    def write(self, directory: str | Path, figures: bool = True) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = {"json": directory / "report.json", "csv": directory / "report.csv"}
        atomic_write(out["json"], self.to_json())
        atomic_write(out["csv"], self.to_csv())
        if figures:
            from .plotting import render_report
            out.update(render_report(self, directory))
        return out


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def significance(rows: list[dict], higher_is_better: bool) -> dict | None:
    """One-sided baseline-vs-trc Wilcoxon over seeds, when enough pairs exist."""
    base = {r["seed"]: r["metric"] for r in rows if r["variant"] == "baseline"}
    trc = {r["seed"]: r["metric"] for r in rows if r["variant"] == "trc"}
    seeds = sorted(set(base) & set(trc))
    if len(seeds) < WILCOXON_MIN_REPORT:
        return None
    # oriented so that a positive difference means the corrector helped
    pairs = [(trc[s], base[s]) if higher_is_better else (base[s], trc[s]) for s in seeds]
    nonzero = sum(a != b for a, b in pairs)
    if nonzero < MIN_PAIRS:
        return {"n_pairs": len(pairs), "usable": nonzero, "p_one_sided": None}
    res = wilcoxon_signed_rank(pairs)
    return {"n_pairs": len(pairs), "usable": res.n, "statistic": res.statistic,
            "p_one_sided": res.p_one_sided, "exact": res.exact}


# -------------------------------------------------------------- experiments

def run_seed(cfg: ExperimentConfig, seed: int, ds: Dataset | None = None, save: bool = False) -> list[dict]:
    prep = prepare(cfg, seed, ds)
    test = prep.split.test
    rows = []
    t0 = time.perf_counter()
    bb, bb_log = fit_backbone(cfg, prep, seed)
    bb_seconds = time.perf_counter() - t0
    if save:
        from .checkpoint import save_backbone
        d = cfg.run_dir(seed)
        d.mkdir(parents=True, exist_ok=True)
        save_backbone(d / "backbone.ckpt", bb, prep.pre)
    logs = {"backbone": bb_log.to_dict()}
    for variant in cfg.variants:
        t0 = time.perf_counter()
        if variant == "baseline":
            metric = evaluate(bb.forward(test.X), test.y, bb.task, prep.pre)
            reps = bb.represent(test.X)
            seconds = bb_seconds
        elif variant == "deeper_baseline":
            deep, log = fit_backbone(cfg, prep, seed, extra_depth=DEEPER_EXTRA_LAYERS)
            metric = evaluate(deep.forward(test.X), test.y, deep.task, prep.pre)
            reps = deep.represent(test.X)
            logs[variant] = log.to_dict()
            seconds = time.perf_counter() - t0
        else:
            before = bb.checksum()
            corr, log, _ = train_trc(bb, prep.split, cfg.trc_hp(seed, variant), prep.pre, prep.sampler)
            if bb.checksum() != before:
                raise RuntimeError("backbone parameters changed during corrector training")
            metric = evaluate(infer_trc(bb, corr, test), test.y, bb.task, prep.pre)
            reps = corrected_representations(bb, corr, test)
            logs[variant] = log.to_dict()
            seconds = time.perf_counter() - t0
            if save and variant == "trc":
                from .checkpoint import save_corrector
                save_corrector(cfg.run_dir(seed) / "trc.ckpt", corr, cfg.trc_hp(seed, variant))
        rows.append({"variant": variant, "seed": seed, "metric": metric, "sve": sve(reps).sve,
                     "seconds": seconds})
    if save:
        atomic_write(cfg.run_dir(seed) / "log.json", json.dumps(logs, indent=2))
    return rows


def run_experiment(cfg: ExperimentConfig, save: bool = False) -> Report:
    cfg.validate()
    ds = load_dataset(cfg)
    report = Report(cfg.to_dict(), "rmse" if ds.task.is_regression else "accuracy", not ds.task.is_regression)
    for seed in cfg.seeds:
        report.rows.extend(run_seed(cfg, seed, ds, save))
    return report.summarize()


def ablate(cfg: ExperimentConfig, save: bool = False) -> Report:
    return run_experiment(replace(cfg, variants=ABLATION_VARIANTS), save)


# ------------------------------------------------------------------ studies

def noise_robustness_study(cfg: ExperimentConfig, ratios, seeds=None) -> list[dict]:
    """Retrain the backbone on feature-noised training rows; score on clean test rows."""
    ratios = list(ratios)
    if any(not 0 <= r <= 1 for r in ratios):
        raise ValueError("ratios must lie in [0, 1]")
    cfg.validate()
    ds = load_dataset(cfg)
    rows = []
    for ratio in ratios:
        for seed in (cfg.seeds if seeds is None else seeds):
            prep = prepare(cfg, seed, ds, train_noise=ratio)
            bb, _ = fit_backbone(cfg, prep, seed)
            test = prep.split.test
            rows.append({"ratio": ratio, "seed": seed,
                         "metric": evaluate(bb.forward(test.X), test.y, bb.task, prep.pre)})
    return rows


def noise_table(rows: list[dict], reduce=np.mean) -> list[dict]:
    """Aggregate study rows to one row per ratio."""
    out = []
    for ratio in dict.fromkeys(r["ratio"] for r in rows):
        vals = [r["metric"] for r in rows if r["ratio"] == ratio]
        out.append({"ratio": ratio, "metric": float(reduce(vals)), "n": len(vals)})
    return out


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def heavy_light_shift_oracle(cfg: ExperimentConfig, seed: int, epochs_heavy: int,
                             epochs_light: int | None = None) -> dict:
    """Distance of light-trained representations to heavy-trained ones, before and after re-estimation.

    Both backbones share the seed (same split and initialisation) and run a
    fixed number of epochs without early stopping. The corrector is trained
    on the light backbone; distances are mean row-wise L2 over the test part.
    """
    epochs_light = epochs_heavy // 2 if epochs_light is None else epochs_light
    if epochs_light >= epochs_heavy:
        raise ValueError("light training must use fewer epochs than heavy training")
    prep = prepare(cfg, seed)
    fixed = lambda n: TrainHP(cfg.bb_lr, cfg.bb_wd, cfg.batch, patience=n + 1, max_epochs=n, restore_best=False)
    heavy, _ = fit_backbone(cfg, prep, seed, hp=fixed(epochs_heavy))
    light, _ = fit_backbone(cfg, prep, seed, hp=fixed(epochs_light))
    corr, _, _ = train_trc(light, prep.split, cfg.trc_hp(seed, "trc"), prep.pre, prep.sampler)
    X = prep.split.test.X
    z_heavy, z_light = heavy.represent(X), light.represent(X)
    z_hat = corr.reestimate(z_light)
    return shift_distances(z_light, z_hat, z_heavy)


def shift_distances(z_light: np.ndarray, z_hat: np.ndarray, z_heavy: np.ndarray) -> dict:
    return {"dist_without": float(np.mean(np.linalg.norm(z_light - z_heavy, axis=1))),
            "dist_with": float(np.mean(np.linalg.norm(z_hat - z_heavy, axis=1)))}

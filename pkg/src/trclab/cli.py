"""Command line entry point.

Subcommands: train-backbone, train-trc, evaluate, diagnose {sve, grad-norms,
noise-study, shift-oracle}, ablate, report. Config keys are read from
``--config`` (JSON) and every key can be overridden with ``--key value``.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .harness import ConfigError, ExperimentConfig, coerce

log = logging.getLogger("trclab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    g = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        g.add_argument(*flags, dest=f"cfg_{f.name}", default=None, metavar=str(f.type).upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trclab", description="Tabular representation correction lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-backbone", help="train and checkpoint a backbone for one seed")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-trc", help="train a corrector on a saved backbone")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default="trc")

    p = sub.add_parser("evaluate", help="score saved backbone / corrector on the test part")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("diagnose", help="representation diagnostics and studies")
    dsub = p.add_subparsers(dest="diagnostic", parser_class=_Parser)
    d = dsub.add_parser("sve", help="singular value entropy of a representation CSV")
    d.add_argument("--reps", required=True, help="CSV of representations (one row per sample)")
    d = dsub.add_parser("grad-norms", help="per-sample gradient norms on the validation part")
    _add_config_flags(d)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--p", type=float, default=1.0)
    d.add_argument("--q", type=float, default=1.0)
    d = dsub.add_parser("noise-study", help="metric vs. training feature-noise ratio")
    _add_config_flags(d)
    d.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5")
    d.add_argument("--plot", default=None, help="write a figure to this path")
    d = dsub.add_parser("shift-oracle", help="heavy/light training shift-estimator check")
    _add_config_flags(d)
    d.add_argument("--seed", type=int, default=None)
    d.add_argument("--epochs-heavy", type=int, default=200)
    d.add_argument("--epochs-light", type=int, default=None)

    p = sub.add_parser("ablate", help="run the component ablation grid and write a report")
    _add_config_flags(p)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("report", help="run the configured variants (or re-render a saved report)")
    _add_config_flags(p)
    p.add_argument("--input", default=None, help="existing report.json to re-render")
    p.add_argument("--no-figures", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    cfg = ExperimentConfig.from_dict(base)
    overrides = {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            overrides[f.name] = coerce(f.type, v, f.name)
    return replace(cfg, **overrides).validate()


def _seed(args, cfg: ExperimentConfig) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_train_backbone(args) -> int:
    from .checkpoint import save_backbone
    from .harness import atomic_write, fit_backbone, prepare
    cfg = resolve_config(args)
    seed = _seed(args, cfg)
    prep = prepare(cfg, seed)
    bb, trlog = fit_backbone(cfg, prep, seed)
    d = cfg.run_dir(seed)
    d.mkdir(parents=True, exist_ok=True)
    save_backbone(d / "backbone.ckpt", bb, prep.pre)
    atomic_write(d / "log.json", json.dumps({"backbone": trlog.to_dict()}, indent=2))
    _print_json({"checkpoint": str(d / "backbone.ckpt"), "best_epoch": trlog.best_epoch,
                 "best_val_metric": trlog.best_metric})
    return 0


def _load_run_backbone(cfg, seed):
    from .checkpoint import load_backbone
    from .harness import prepare
    prep = prepare(cfg, seed)
    bb, _ = load_backbone(cfg.run_dir(seed) / "backbone.ckpt", prep.split.train.schema)
    return prep, bb


def cmd_train_trc(args) -> int:
    from .checkpoint import save_corrector
    from .harness import VARIANT_SWITCHES, atomic_write
    from .trc import train_trc
    cfg = resolve_config(args)
    if args.variant not in VARIANT_SWITCHES:
        raise UsageError(f"unknown corrector variant {args.variant!r}")
    seed = _seed(args, cfg)
    prep, bb = _load_run_backbone(cfg, seed)
    hp = cfg.trc_hp(seed, args.variant)
    corr, trlog, art = train_trc(bb, prep.split, hp, prep.pre, prep.sampler)
    d = cfg.run_dir(seed)
    save_corrector(d / "trc.ckpt", corr, hp)
    logs_path = d / "log.json"
    logs = json.loads(logs_path.read_text()) if logs_path.exists() else {}
    logs[args.variant] = {**trlog.to_dict(), "shift_loss": art.shift_loss}
    atomic_write(logs_path, json.dumps(logs, indent=2))
    _print_json({"checkpoint": str(d / "trc.ckpt"), "best_epoch": trlog.best_epoch,
                 "best_val_metric": trlog.best_metric})
    return 0


def cmd_evaluate(args) -> int:
    from .backbones import evaluate
    from .checkpoint import load_corrector
    from .diagnostics import sve
    from .trc import corrected_representations, infer_trc
    cfg = resolve_config(args)
    seed = _seed(args, cfg)
    prep, bb = _load_run_backbone(cfg, seed)
    test = prep.split.test
    out = {"seed": seed, "baseline": {"metric": evaluate(bb.forward(test.X), test.y, bb.task, prep.pre),
                                      "sve": sve(bb.represent(test.X)).sve}}
    trc_path = cfg.run_dir(seed) / "trc.ckpt"
    if trc_path.exists():
        corr, _ = load_corrector(trc_path, bb)
        out["trc"] = {"metric": evaluate(infer_trc(bb, corr, test), test.y, bb.task, prep.pre),
                      "sve": sve(corrected_representations(bb, corr, test)).sve}
    _print_json(out)
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import per_sample_grad_norms, sve
    from .harness import heavy_light_shift_oracle, noise_robustness_study, rows_to_csv
    if args.diagnostic is None:
        raise UsageError("diagnose needs one of: sve, grad-norms, noise-study, shift-oracle")
    if args.diagnostic == "sve":
        path = Path(args.reps)
        if not path.exists():
            raise UsageError(f"representation file not found: {path}")
        Z = np.loadtxt(path, delimiter=",", ndmin=2)
        _print_json(sve(Z).to_dict())
        return 0
    cfg = resolve_config(args)
    if args.diagnostic == "grad-norms":
        seed = _seed(args, cfg)
        prep, bb = _load_run_backbone(cfg, seed)
        table = per_sample_grad_norms(bb, prep.split.val, args.p, args.q)
        rows = [{"index": i, "norm": n, "rank": r} for i, n, r in table.to_csv_rows()]
        sys.stdout.write(rows_to_csv(rows, ["index", "norm", "rank"]))
        return 0
    if args.diagnostic == "noise-study":
        try:
            ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
        except ValueError:
            raise UsageError(f"bad --ratios {args.ratios!r}") from None
        rows = noise_robustness_study(cfg, ratios)
        sys.stdout.write(rows_to_csv(rows, ["ratio", "seed", "metric"]))
        if args.plot:
            from .plotting import noise_study
            noise_study(rows, args.plot, "rmse" if cfg.task == "regression" else "accuracy")
        return 0
    seed = _seed(args, cfg)
    _print_json(heavy_light_shift_oracle(cfg, seed, args.epochs_heavy, args.epochs_light))
    return 0


def _emit_report(report, cfg, no_figures: bool) -> int:
    paths = report.write(Path(cfg.out_dir) / cfg.name, figures=not no_figures)
    _print_json({"summary": report.summary, "wilcoxon": report.wilcoxon,
                 "files": {k: str(v) for k, v in paths.items()}})
    return 0


def cmd_ablate(args) -> int:
    from .harness import ablate
    cfg = resolve_config(args)
    return _emit_report(ablate(cfg, save=True), cfg, args.no_figures)


def cmd_report(args) -> int:
    from .harness import Report, run_experiment
    if args.input:
        path = Path(args.input)
        if not path.exists():
            raise UsageError(f"report file not found: {path}")
        report = Report.from_dict(json.loads(path.read_text()))
        if not args.no_figures:
            from .plotting import render_report
            paths = render_report(report, path.parent)
            _print_json({k: str(v) for k, v in paths.items()})
        return 0
    cfg = resolve_config(args)
    return _emit_report(run_experiment(cfg, save=True), cfg, args.no_figures)


COMMANDS = {"train-backbone": cmd_train_backbone, "train-trc": cmd_train_trc, "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose, "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

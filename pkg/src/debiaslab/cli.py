"""Command line entry point: generate | train | ablate | report | run."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import ablation as abl
from . import autodiff as ad
from .experiment import ConfigError, evaluate, load_config, run_experiment, write_reports, write_text_atomic
from .model import ModelShapeError, build_model, load_checkpoint, save_checkpoint
from .synth import DatasetFormatError, GeneratorConfig, bias_audit, generate_dataset, read_dataset, write_dataset
from .training import NonFiniteLossError, TrainConfig, fit_probe, train_baseline, train_debias

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

_MODE_ALIASES = {"baseline": "baseline", "full": "full_debias", "full_debias": "full_debias",
                 "partial": "partial_debias", "partial_debias": "partial_debias"}


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int = EXIT_DATA):
        super().__init__(f"{stage}: {message}")
        self.code = code


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _load_data(path, stage: str):
    try:
        return read_dataset(path)
    except (DatasetFormatError, FileNotFoundError, KeyError) as exc:
        raise StageError(stage, f"cannot read dataset {path}: {exc}") from None


def _load_model(path, stage: str):
    try:
        return load_checkpoint(path)
    except (ad.CheckpointFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        raise StageError(stage, f"cannot read checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    try:
        cfg = GeneratorConfig(
            n_patients=args.patients,
            images_per_patient=args.images_per_patient,
            height=args.size,
            width=args.size,
            n_classes=args.classes,
            n_groups=args.groups,
            bias=args.bias,
            amplitude=args.amplitude,
            noise=args.noise,
            seed=args.seed,
        )
    except ValueError as exc:
        raise StageError("generate", str(exc)) from None
    data = generate_dataset(cfg)
    write_dataset(data, args.out)
    audit = bias_audit(data.subset("train"))
    print(f"wrote {len(data)} images of {data.n_patients} patients to {args.out} "
          f"(train-split Cramer's V = {audit.cramers_v:.3f})")
    return 0


def _train_config(args, mode: str) -> TrainConfig:
    values = {}
    if args.config:
        try:
            exp = load_config(args.config)
        except (ConfigError, OSError) as exc:
            raise StageError("train", f"bad config {args.config}: {exc}") from None
        values = vars(exp.train[mode]).copy()
    for flag, key in (("lam", "lam"), ("lr", "lr"), ("momentum", "momentum"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    values["mode"] = mode
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise StageError("train", str(exc), EXIT_USAGE) from None


def _partial_selection(args, baseline, data, out: Path, header):
    """Selection from --selection, --ablation-report, or an inline ablation study."""
    train, val = data.subset("train"), data.subset("validation")
    if not baseline.adversary_fitted:
        fit_probe(baseline, train, val, seed=args.seed or 0)
    if args.selection:
        return abl.FinetuneSelection.from_text(Path(args.selection).read_text())
    if args.ablation_report:
        report = abl.AblationReport.from_csv(Path(args.ablation_report).read_text(), baseline)
    else:
        report = abl.run_ablation_study(baseline, val, args.fraction)
        write_text_atomic(out / "ablation.csv", report.to_csv(header))
    return abl.select_finetune_layers(report, args.k)


def cmd_train(args) -> int:
    mode = _MODE_ALIASES[args.mode]
    config = _train_config(args, mode)
    data = _load_data(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = config.header_lines()
    if args.config:
        header += [line for line in Path(args.config).read_text().splitlines() if line.strip()]
    train, val = data.subset("train"), data.subset("validation")
    h, w = data.images.shape[2:]
    name = {"baseline": "baseline", "full_debias": "full", "partial_debias": "partial"}[mode]

    if mode != "partial_debias":
        if args.baseline_checkpoint or args.ablation_report or args.selection:
            if mode == "full_debias":
                _warn("full mode trains every layer; ablation flags are ignored")
            else:
                raise StageError("train", "baseline mode takes no checkpoint or ablation flags", EXIT_USAGE)
        model = build_model(None, data.n_classes, data.n_groups, seed=config.seed, input_shape=(1, h, w))
        if mode == "baseline":
            log = train_baseline(model, train, val, config)
        else:
            log = train_debias(model, train, val, config)
    else:
        if not args.baseline_checkpoint:
            raise StageError("train", "partial mode needs --baseline-checkpoint", EXIT_USAGE)
        model = _load_model(args.baseline_checkpoint, "train")
        selection = _partial_selection(args, model, data, out, header)
        write_text_atomic(out / "selection.txt", selection.to_text(header))
        log = train_debias(model, train, val, config, selection.selected)
        log.header.append(f"selection_pivot={selection.pivot}")
    log.header = header + [h for h in log.header if h not in header]
    save_checkpoint(model, out / f"{name}.ckpt")
    write_text_atomic(out / f"{name}_log.csv", log.to_csv(timing=not args.no_timing))
    last = log.records[-1]
    print(f"{name}: {len(log.records)} epochs, val target acc {last.val_target_acc:.4f}, "
          f"val adversary acc {last.val_adversary_acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    model = _load_model(args.checkpoint, "ablate")
    data = _load_data(args.data, "ablate")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"checkpoint={args.checkpoint}", f"fraction={args.fraction}", f"k={args.k}"]
    if not model.adversary_fitted:
        acc = fit_probe(model, data.subset("train"), data.subset("validation"),
                        max_epochs=args.probe_epochs, seed=args.seed)
        header.append(f"probe_val_accuracy={acc:.6f}")
        save_checkpoint(model, out / "probe.ckpt")
    report = abl.run_ablation_study(model, data.subset("validation"), args.fraction)
    selection = abl.select_finetune_layers(report, args.k)
    write_text_atomic(out / "ablation.csv", report.to_csv(header))
    write_text_atomic(out / "selection.txt", selection.to_text(header))
    print(f"ablated {len(report.layers)} conv layers; pivot layer {selection.pivot}")
    return 0


def cmd_report(args) -> int:
    data = _load_data(args.data, "report")
    test = data.subset(args.split)
    if len(test) == 0:
        raise StageError("report", f"split {args.split!r} is empty")
    reports = {}
    for name in ("baseline", "partial", "full"):
        model = _load_model(getattr(args, name), "report")
        try:
            reports[name] = evaluate(model, test, args.ref_group)
        except ValueError as exc:
            raise StageError("report", f"{name} checkpoint does not fit the data: {exc}") from None
    header = [f"{name}={getattr(args, name)}" for name in ("baseline", "partial", "full")]
    header += [f"data={args.data}", f"split={args.split}", f"ref_group={args.ref_group}"]
    written = write_reports(reports, args.out, header, description="\n".join(header))
    print("wrote " + ", ".join(sorted(p.name for p in written.values())))
    return 0


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except (ConfigError, OSError) as exc:
        raise StageError("run", f"bad config {args.config}: {exc}") from None
    if args.out:
        config.output_dir = Path(args.out)
    result = run_experiment(config, timing=not args.no_timing)
    for name, rep in result.reports.items():
        print(f"{name:>8}: macro AUC {rep.macro_auc():.4f}, mean |ln disparity| {rep.mean_abs_log_disparity():.4f}")
    print(f"outputs in {config.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debiaslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic biased dataset")
    g.add_argument("--patients", type=int, default=500)
    g.add_argument("--images-per-patient", type=int, default=4)
    g.add_argument("--bias", type=float, default=0.9)
    g.add_argument("--amplitude", type=float, default=0.4)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--size", type=int, default=28)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--groups", type=int, default=2)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a baseline, full or partial debias model")
    t.add_argument("--mode", required=True, choices=sorted(_MODE_ALIASES))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--baseline-checkpoint")
    t.add_argument("--ablation-report")
    t.add_argument("--selection")
    t.add_argument("--fraction", type=float, default=0.10)
    t.add_argument("--k", type=int, default=1)
    t.add_argument("--no-timing", action="store_true", help="write 0 seconds in the log")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="filter-ablation study on a baseline checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--fraction", type=float, default=0.10)
    a.add_argument("--k", type=int, default=1)
    a.add_argument("--probe-epochs", type=int, default=20)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="comparison table, fairness CSVs and disparity SVGs")
    r.add_argument("--baseline", required=True)
    r.add_argument("--partial", required=True)
    r.add_argument("--full", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test", choices=("train", "validation", "test"))
    r.add_argument("--ref-group", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="whole baseline/partial/full experiment from a config file")
    x.add_argument("--config", required=True)
    x.add_argument("--out")
    x.add_argument("--no-timing", action="store_true")
    x.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    precision = os.environ.get("DBLB_PRECISION", "f32")
    if precision not in ("f32", "f64"):
        print(f"error: DBLB_PRECISION must be f32 or f64, got {precision!r}", file=sys.stderr)
        return EXIT_USAGE
    ad.set_precision(precision)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NonFiniteLossError as exc:
        print(f"error: {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetFormatError, ad.CheckpointFormatError, ConfigError, abl.UntrainedProbeError,
            ModelShapeError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

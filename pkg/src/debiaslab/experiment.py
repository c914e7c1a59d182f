"""Baseline / partial / full comparison driven by a sectioned key=value config."""

from __future__ import annotations

import configparser
import csv
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ablation as abl
from .fairness import FairnessReport, PredictionSet, build_reports
from .model import DualHeadModel, build_model, load_checkpoint, save_checkpoint
from .plotting import write_disparity_plots
from .synth import Dataset, GeneratorConfig, bias_audit, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, TrainLog, fit_probe, predict, softmax, train_baseline, train_debias

MODELS = ("baseline", "partial", "full")
METRICS = ("AUC", "Precision", "Recall")
_MODE_SECTIONS = {"baseline": "baseline", "full_debias": "full", "partial_debias": "partial"}

DEFAULT_CONFIG = """\
[experiment]
seed = 1
ref_group = 0
output_dir = results
ablation_fraction = 0.10
k = 1
probe_epochs = 20

[data]
n_patients = 500
images_per_patient = 4
bias = 0.9
amplitude = 0.4
noise = 0.05
seed = 1

[baseline]
epochs = 15

[partial]
epochs = 8

[full]
epochs = 15
"""


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    text: str
    output_dir: Path
    generator: GeneratorConfig | None
    dataset_path: Path | None
    train: dict[str, TrainConfig]
    ref_group: int = 0
    ablation_fraction: float = 0.10
    k: int = 1
    probe_epochs: int = 20
    seed: int = 1

    def header_lines(self) -> list[str]:
        return [line for line in self.text.splitlines() if line.strip()]


def _typed(cls, section: Mapping[str, str], extra: Mapping[str, object], where: str):
    kinds = {f.name: f.type for f in fields(cls)}
    kwargs = dict(extra)
    for key, raw in section.items():
        name = "lam" if key == "lambda" else key
        if name not in kinds:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        kind = str(kinds[name])
        try:
            if "bool" in kind:
                kwargs[name] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif "int" in kind:
                kwargs[name] = int(raw)
            elif "float" in kind and "tuple" not in kind:
                kwargs[name] = float(raw)
            elif "tuple" in kind:
                kwargs[name] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[name] = raw.strip()
        except ValueError as exc:
            raise ConfigError(f"[{where}] {key} = {raw!r}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    seed = int(exp.get("seed", 1))
    out = Path(exp.get("output_dir", "results"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    data = dict(parser["data"]) if parser.has_section("data") else {}
    dataset_path = None
    generator = None
    if "path" in data:
        dataset_path = Path(data.pop("path"))
        if base_dir is not None and not dataset_path.is_absolute():
            dataset_path = base_dir / dataset_path
        if not dataset_path.exists():
            raise ConfigError(f"[data] path {dataset_path} does not exist")
        if data:
            raise ConfigError("[data] give either path or generator settings, not both")
    else:
        renames = {"sigma": "noise", "rho": "bias"}
        data = {renames.get(k, k): v for k, v in data.items()}
        generator = _typed(GeneratorConfig, data, {}, "data")
    train = {}
    for mode, section in _MODE_SECTIONS.items():
        values = dict(parser[section]) if parser.has_section(section) else {}
        values.setdefault("seed", str(seed))
        train[mode] = _typed(TrainConfig, values, {"mode": mode}, section)
    ref_group = int(exp.get("ref_group", 0))
    return ExperimentConfig(
        text=text,
        output_dir=out,
        generator=generator,
        dataset_path=dataset_path,
        train=train,
        ref_group=ref_group,
        ablation_fraction=float(exp.get("ablation_fraction", 0.10)),
        k=int(exp.get("k", 1)),
        probe_epochs=int(exp.get("probe_epochs", 20)),
        seed=seed,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------------------
# evaluation + tables
# ---------------------------------------------------------------------------


def evaluate(model: DualHeadModel, data: Dataset, ref_group: int) -> FairnessReport:
    if model.n_target_classes != data.n_classes or model.n_protected_groups != data.n_groups:
        raise ValueError(
            f"model expects {model.n_target_classes} classes / {model.n_protected_groups} groups, "
            f"data has {data.n_classes} / {data.n_groups}"
        )
    yl, _ = predict(model, data.images)
    preds = PredictionSet(softmax(yl), data.y, data.z, data.patient_id, tuple(range(data.n_groups)))
    return build_reports(preds, ref_group)


@dataclass
class ComparisonTable:
    # values[(class, metric, model)]; None for undefined precision/recall
    values: dict[tuple[int, str, str], float | None] = field(default_factory=dict)
    n_classes: int = 0

    @classmethod
    def from_reports(cls, reports: Mapping[str, FairnessReport]) -> "ComparisonTable":
        table = cls(n_classes=next(iter(reports.values())).n_classes)
        for name, rep in reports.items():
            for c in range(rep.n_classes):
                table.values[(c, "AUC", name)] = rep.auc[c]
                table.values[(c, "Precision", name)] = rep.precision[c]
                table.values[(c, "Recall", name)] = rep.recall[c]
        return table

    def to_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "metric", *MODELS])
        for c in range(self.n_classes):
            for m in METRICS:
                w.writerow([c, m, *(_cell(self.values.get((c, m, name))) for name in MODELS)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'Class':<8}{'Metric':<11}" + "".join(f"{name.capitalize():>10}" for name in MODELS)]
        lines.append("-" * len(lines[0]))
        for c in range(self.n_classes):
            for i, m in enumerate(METRICS):
                label = str(c) if i == 0 else ""
                row = "".join(f"{_cell(self.values.get((c, m, name)), 3):>10}" for name in MODELS)
                lines.append(f"{label:<8}{m:<11}{row}")
        return "\n".join(lines) + "\n"


def _cell(v, digits: int = 6) -> str:
    return "undefined" if v is None else f"{v:.{digits}f}"


def disparity_text(reports: Mapping[str, FairnessReport]) -> str:
    lines = [f"{'Class':<8}{'Group':<7}" + "".join(f"{name.capitalize():>10}" for name in reports)]
    first = next(iter(reports.values()))
    for cell in first.cells:
        row = ""
        for rep in reports.values():
            d = rep.cell(cell.cls, cell.group)
            row += f"{'n/a' if d.disparity is None else f'{d.disparity:.3f}' + ('' if d.fair else '*'):>10}"
        lines.append(f"{cell.cls:<8}{cell.group:<7}{row}")
    lines.append("(* outside the 0.8-1.25 fair band)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_reports(
    reports: Mapping[str, FairnessReport], out_dir, header_lines=(), description: str = ""
) -> dict[str, Path]:
    """comparison.csv, fairness_<model>.csv, report.txt and one SVG per group."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    table = ComparisonTable.from_reports(reports)
    written["comparison"] = out_dir / "comparison.csv"
    write_text_atomic(written["comparison"], table.to_csv(header_lines))
    for name, rep in reports.items():
        written[f"fairness_{name}"] = out_dir / f"fairness_{name}.csv"
        write_text_atomic(written[f"fairness_{name}"], rep.to_csv(header_lines))
    text = "Target-task performance\n\n" + table.to_text() + "\nTPR disparity vs reference group\n\n" + disparity_text(reports)
    written["report"] = out_dir / "report.txt"
    write_text_atomic(written["report"], text)
    for path in write_disparity_plots(reports, out_dir, description):
        written[path.stem] = path
    return written


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    dataset: Dataset
    models: dict[str, DualHeadModel]
    logs: dict[str, TrainLog]
    reports: dict[str, FairnessReport]
    probe_accuracy: float
    ablation: abl.AblationReport
    selection: abl.FinetuneSelection
    outputs: dict[str, Path] = field(default_factory=dict)


def run_experiment(config: ExperimentConfig, write: bool = True, timing: bool = False) -> ExperimentResult:
    """Generate (or load) data, train baseline, ablate, train partial and full, report.

    Partial debiasing fine-tunes a copy of the baseline whose adversarial head
    was fitted as a probe; full debiasing starts from a fresh model built with
    the baseline's seed.
    """
    out = config.output_dir
    header = config.header_lines()
    if config.dataset_path is not None:
        data = read_dataset(config.dataset_path)
    else:
        data = generate_dataset(config.generator)
    if not 0 <= config.ref_group < data.n_groups:
        raise ConfigError(f"ref_group {config.ref_group} outside [0, {data.n_groups})")
    train, val, test = data.subset("train"), data.subset("validation"), data.subset("test")
    h, w = data.images.shape[2:]

    def fresh(mode: str) -> DualHeadModel:
        return build_model(None, data.n_classes, data.n_groups, seed=config.train[mode].seed, input_shape=(1, h, w))

    baseline = fresh("baseline")
    logs = {"baseline": train_baseline(baseline, train, val, config.train["baseline"])}

    probed = baseline.copy()
    probe_acc = fit_probe(probed, train, val, max_epochs=config.probe_epochs, seed=config.seed)
    report = abl.run_ablation_study(probed, val, config.ablation_fraction)
    selection = abl.select_finetune_layers(report, config.k)

    partial = probed.copy()
    logs["partial"] = train_debias(partial, train, val, config.train["partial_debias"], selection.selected)

    full = fresh("full_debias")
    logs["full"] = train_debias(full, train, val, config.train["full_debias"])

    models = {"baseline": baseline, "partial": partial, "full": full}
    reports = {name: evaluate(m, test, config.ref_group) for name, m in models.items()}
    result = ExperimentResult(data, models, logs, reports, probe_acc, report, selection)

    if write:
        out.mkdir(parents=True, exist_ok=True)
        if config.dataset_path is None:
            write_dataset(data, out / "dataset")
        audit = bias_audit(train)
        write_text_atomic(out / "bias_audit.txt", _audit_text(audit))
        for name, m in models.items():
            save_checkpoint(m, out / f"{name}.ckpt")
            write_text_atomic(out / f"{name}_log.csv", logs[name].to_csv(timing=timing))
        save_checkpoint(probed, out / "baseline_probe.ckpt")
        write_text_atomic(out / "ablation.csv", report.to_csv(header))
        write_text_atomic(out / "selection.txt", selection.to_text(header))
        write_text_atomic(out / "probe.txt", f"probe_val_accuracy={probe_acc:.6f}\n")
        result.outputs = write_reports(reports, out, header, description="\n".join(header))
    return result


def _audit_text(audit) -> str:
    rows = ["class,group,count"]
    for c in range(audit.table.shape[0]):
        for g in range(audit.table.shape[1]):
            rows.append(f"{c},{g},{audit.table[c, g]}")
    return "\n".join(rows) + f"\nchi2={audit.chi2:.6f}\ncramers_v={audit.cramers_v:.6f}\n"

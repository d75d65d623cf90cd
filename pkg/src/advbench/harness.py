"""Scenario orchestration: white-box sweeps, transfer sweeps, and report
emission.

A report is a flat list of rows in a fixed 11-column schema. FGSM rows
carry accuracy, PGD rows carry error (100 - accuracy), mirroring how the
two attacks are conventionally tabulated; each row also stores the
target's clean accuracy so either view can be reconstructed. Alongside
the delimited report the emitter writes one figure-series file per
(dataset, attack, mode) and optionally renders each to a PNG.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, fgsm, pgd
from .data import Dataset, read_tensor_batch, write_tensor_batch
from .nn import Module, predict

__all__ = [
    "REPORT_COLUMNS",
    "ReportRow",
    "ScenarioSpec",
    "Report",
    "run_whitebox_fgsm",
    "run_whitebox_pgd",
    "run_transfer",
    "emit_report",
    "read_report_rows",
    "merge_rows",
]

REPORT_COLUMNS = (
    "dataset", "scenario", "attack", "source_model", "target_model",
    "param_name", "param_value", "metric", "value", "clean_value", "seed",
)

EVAL_BATCH = 256


@dataclass
class ReportRow:
    dataset: str
    scenario: str
    attack: str
    source_model: str
    target_model: str
    param_name: str
    param_value: float
    metric: str
    value: float
    clean_value: float
    seed: int

    def accuracy(self) -> float:
        return self.value if self.metric == "accuracy" else 100.0 - self.value

    def error(self) -> float:
        return self.value if self.metric == "error" else 100.0 - self.value

    def as_list(self) -> list:
        return [getattr(self, col) for col in REPORT_COLUMNS]


@dataclass
class ScenarioSpec:
    """One row of the evaluation matrix: who attacks whom, with what."""

    dataset: str
    attack: str
    mode: str
    source_model: str
    target_models: tuple
    sweep: tuple
    attack_config: AttackConfig | None = None
    seed: int = 0

    def validate(self) -> "ScenarioSpec":
        if self.attack not in ("fgsm", "pgd"):
            raise ValueError(f"scenario.attack must be 'fgsm' or 'pgd', got {self.attack!r}")
        if self.mode not in ("whitebox", "transfer"):
            raise ValueError(f"scenario.mode must be 'whitebox' or 'transfer', got {self.mode!r}")
        self.target_models = tuple(self.target_models)
        self.sweep = tuple(self.sweep)
        if not self.sweep:
            raise ValueError("scenario.sweep must not be empty")
        if list(self.sweep) != sorted(set(self.sweep)):
            raise ValueError(f"scenario.sweep must be strictly increasing, got {self.sweep}")
        if self.mode == "whitebox":
            if self.target_models != (self.source_model,):
                raise ValueError(
                    "whitebox scenario targets exactly its source model, "
                    f"got source {self.source_model!r}, targets {self.target_models!r}"
                )
        else:
            if not self.target_models:
                raise ValueError("transfer scenario needs at least one target model")
            if self.source_model in self.target_models:
                raise ValueError(
                    f"transfer source {self.source_model!r} cannot also be a target"
                )
        return self


@dataclass
class Report:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)


def _row_sort_key(row: ReportRow):
    return (row.dataset, row.scenario, row.attack, row.source_model,
            row.target_model, row.param_name, row.param_value, row.metric)


def _accuracy_on(model: Module, images: np.ndarray, labels: np.ndarray,
                 batch_size: int = EVAL_BATCH) -> float:
    """Accuracy as a percentage. Clean references and attacked cells both
    funnel through this exact expression so that an attack at zero budget
    reproduces the clean number bit for bit."""
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        correct += int((predict(model, images[sl]) == labels[sl]).sum())
    return 100.0 * correct / images.shape[0]


def run_whitebox_fgsm(model: Module, model_name: str, test_set: Dataset,
                      epsilons, *, clip=(0.0, 1.0), seed: int = 0) -> list[ReportRow]:
    """Accuracy of ``model`` on its own FGSM examples over an epsilon grid."""
    epsilons = tuple(epsilons)
    if 0 not in epsilons and 0.0 not in epsilons:
        raise ValueError(f"fgsm sweep must include epsilon 0, got {epsilons}")
    if list(epsilons) != sorted(set(epsilons)):
        raise ValueError(f"fgsm sweep must be strictly increasing, got {epsilons}")
    model.eval()
    clean = _accuracy_on(model, test_set.images, test_set.labels)
    rows = []
    for eps in epsilons:
        correct = 0
        for start in range(0, len(test_set), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            images, labels = test_set.images[sl], test_set.labels[sl]
            batch = fgsm(model, images, labels, float(eps), clip, source_model_id=model_name)
            adv = batch.adversarials.astype(images.dtype)
            correct += int((predict(model, adv) == labels).sum())
        acc = 100.0 * correct / len(test_set)
        rows.append(ReportRow(
            test_set.name, "whitebox", "fgsm", model_name, model_name,
            "perturbation", float(eps), "accuracy", acc, clean, seed,
        ))
    return rows


def run_whitebox_pgd(model: Module, model_name: str, test_set: Dataset,
                     iteration_grid, *, epsilon: float = 0.2, alpha: float = 0.01,
                     clip=(0.0, 1.0), seed: int = 0) -> list[ReportRow]:
    """Error of ``model`` on its own PGD examples over an iteration grid."""
    grid = tuple(int(t) for t in iteration_grid)
    if not grid or list(grid) != sorted(set(grid)):
        raise ValueError(f"pgd sweep must be non-empty and strictly increasing, got {grid}")
    model.eval()
    clean = _accuracy_on(model, test_set.images, test_set.labels)
    rows = []
    for steps in grid:
        cfg = AttackConfig(kind="pgd", epsilon=epsilon, alpha=alpha, iterations=steps,
                           clip_min=clip[0], clip_max=clip[1])
        correct = 0
        for start in range(0, len(test_set), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            images, labels = test_set.images[sl], test_set.labels[sl]
            batch = pgd(model, images, labels, cfg, source_model_id=model_name)
            adv = batch.adversarials.astype(images.dtype)
            correct += int((predict(model, adv) == labels).sum())
        acc = 100.0 * correct / len(test_set)
        rows.append(ReportRow(
            test_set.name, "whitebox", "pgd", model_name, model_name,
            "iterations", float(steps), "error", 100.0 - acc, clean, seed,
        ))
    return rows


def run_transfer(source: Module, source_name: str, targets: list[tuple[str, Module]],
                 test_set: Dataset, attack: str, sweep, cache_dir, *,
                 epsilon: float = 0.2, alpha: float = 0.01, clip=(0.0, 1.0),
                 seed: int = 0) -> tuple[list[ReportRow], dict]:
    """Craft adversarial batches on ``source`` and replay the cached bytes
    against the source and every target.

    Returns the rows plus a map of per-sweep-point batch digests, one per
    evaluated model, so callers can verify every model saw identical bytes.
    """
    spec = ScenarioSpec(
        dataset=test_set.name, attack=attack, mode="transfer",
        source_model=source_name, target_models=tuple(name for name, _ in targets),
        sweep=tuple(sweep), seed=seed,
    ).validate()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    scenario = f"transfer:{source_name}"
    everyone = [(source_name, source)] + list(targets)
    for _, model in everyone:
        model.eval()
    clean = {name: _accuracy_on(model, test_set.images, test_set.labels)
             for name, model in everyone}

    param_name = "perturbation" if attack == "fgsm" else "iterations"
    rows = []
    digests: dict[str, dict[str, str]] = {}
    for value in spec.sweep:
        adv_parts, label_parts = [], []
        for start in range(0, len(test_set), EVAL_BATCH):
            sl = slice(start, start + EVAL_BATCH)
            images, labels = test_set.images[sl], test_set.labels[sl]
            if attack == "fgsm":
                batch = fgsm(source, images, labels, float(value), clip,
                             source_model_id=source_name)
            else:
                cfg = AttackConfig(kind="pgd", epsilon=epsilon, alpha=alpha,
                                   iterations=int(value), clip_min=clip[0], clip_max=clip[1])
                batch = pgd(source, images, labels, cfg, source_model_id=source_name)
            adv_parts.append(batch.adversarials.astype(np.float32))
            label_parts.append(labels)
        tag = f"{test_set.name}_{attack}_{source_name}_{param_name}_{value}"
        cache_file = write_tensor_batch(cache_dir / f"{tag}.advt",
                                        np.concatenate(adv_parts),
                                        np.concatenate(label_parts))
        point = f"{param_name}={value}"
        digests[point] = {}
        for name, model in everyone:
            # Each model re-reads the cached bytes; the recorded digests
            # prove they all scored the same batch.
            digests[point][name] = hashlib.sha256(cache_file.read_bytes()).hexdigest()
            adv_images, adv_labels = read_tensor_batch(cache_file)
            acc = _accuracy_on(model, adv_images, adv_labels)
            metric_value = acc if attack == "fgsm" else 100.0 - acc
            rows.append(ReportRow(
                test_set.name, scenario, attack, source_name, name,
                param_name, float(value), "accuracy" if attack == "fgsm" else "error",
                metric_value, clean[name], seed,
            ))
    return rows, digests


def _format_value(v) -> str:
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return repr(v)
    return repr(v) if isinstance(v, float) else str(v)


def _series_groups(rows: list[ReportRow]) -> dict:
    """Pivot rows into {(dataset, attack, mode): (param_name, params, curves)}
    where curves maps a curve label to {param_value: metric_value}."""
    groups: dict[tuple, dict] = {}
    for row in rows:
        mode = "whitebox" if row.scenario == "whitebox" else "transfer"
        key = (row.dataset, row.attack, mode)
        g = groups.setdefault(key, {"param_name": row.param_name, "curves": {}, "params": set()})
        label = row.target_model if mode == "whitebox" \
            else f"{row.source_model}->{row.target_model}"
        g["params"].add(row.param_value)
        g["curves"].setdefault(label, {})[row.param_value] = row.value
    return groups


def emit_report(rows: list[ReportRow], out_dir, *, name: str = "report",
                formats=("csv",), render_figures: bool = False) -> list[Path]:
    """Write the report (csv and/or json) and its figure-series files;
    returns every path written. Output is byte-deterministic for a given
    row set."""
    if not rows:
        raise ValueError("cannot emit an empty report")
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=_row_sort_key)
    written = []

    if "csv" in formats:
        lines = [",".join(REPORT_COLUMNS)]
        lines += [",".join(_format_value(v) for v in row.as_list()) for row in ordered]
        path = out_dir / f"{name}.csv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    if "json" in formats:
        payload = [dict(zip(REPORT_COLUMNS, row.as_list())) for row in ordered]
        path = out_dir / f"{name}.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
        written.append(path)

    for (dataset, attack, mode), g in sorted(_series_groups(ordered).items()):
        params = sorted(g["params"])
        labels = sorted(g["curves"])
        lines = [",".join([g["param_name"]] + labels)]
        for p in params:
            cells = [_format_value(p)]
            for label in labels:
                v = g["curves"][label].get(p)
                cells.append("" if v is None else _format_value(v))
            lines.append(",".join(cells))
        series_path = out_dir / f"{dataset}_{attack}_{mode}.csv"
        series_path.write_text("\n".join(lines) + "\n")
        written.append(series_path)
        if render_figures:
            from .figures import render_series

            written.append(render_series(series_path))
    return written


def read_report_rows(path) -> list[ReportRow]:
    """Parse rows back out of an emitted csv or json report."""
    path = Path(path)
    if path.suffix == ".json":
        records = json.loads(path.read_text())
        return [ReportRow(**{**rec, "param_value": float(rec["param_value"]),
                             "value": float(rec["value"]),
                             "clean_value": float(rec["clean_value"]),
                             "seed": int(rec["seed"])}) for rec in records]
    lines = path.read_text().strip().split("\n")
    if not lines or tuple(lines[0].split(",")) != REPORT_COLUMNS:
        raise ValueError(f"{path}: header does not match the report schema")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append(ReportRow(
            dataset=cells[0], scenario=cells[1], attack=cells[2],
            source_model=cells[3], target_model=cells[4], param_name=cells[5],
            param_value=float(cells[6]), metric=cells[7], value=float(cells[8]),
            clean_value=float(cells[9]), seed=int(cells[10]),
        ))
    return rows


def merge_rows(row_lists) -> list[ReportRow]:
    """Concatenate, deduplicate by (scenario, param, target), and order
    canonically."""
    seen = {}
    for rows in row_lists:
        for row in rows:
            key = (row.dataset, row.scenario, row.attack, row.source_model,
                   row.target_model, row.param_name, row.param_value, row.metric)
            seen.setdefault(key, row)
    return sorted(seen.values(), key=_row_sort_key)

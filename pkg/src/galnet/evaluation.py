"""Accuracy reports, mean attention matrices and heatmap export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from galnet.data import Dataset, write_pgm
from galnet.errors import ConfigError, ContractError
from galnet.model import AttributeModel


@dataclass
class EvalReport:
    attribute_names: list[str]
    per_attribute_acc_f: np.ndarray
    per_attribute_acc_c: np.ndarray | None
    n_samples: int

    @property
    def mean_acc_f(self) -> float:
        return float(np.mean(self.per_attribute_acc_f))

    @property
    def mean_acc_c(self) -> float | None:
        return None if self.per_attribute_acc_c is None else float(np.mean(self.per_attribute_acc_c))

    def format_table(self) -> str:
        """Aligned text table, one attribute per row, averages at the bottom."""
        width = max(len("Attribute"), *(len(n) for n in self.attribute_names))
        has_c = self.per_attribute_acc_c is not None
        header = f"{'Attribute':<{width}}  {'acc_f':>7}" + (f"  {'acc_c':>7}" if has_c else "")
        lines = [header, "-" * len(header)]
        for i, name in enumerate(self.attribute_names):
            row = f"{name:<{width}}  {100 * self.per_attribute_acc_f[i]:7.2f}"
            if has_c:
                row += f"  {100 * self.per_attribute_acc_c[i]:7.2f}"
            lines.append(row)
        lines.append("-" * len(header))
        avg = f"{'Average':<{width}}  {100 * self.mean_acc_f:7.2f}"
        if has_c:
            avg += f"  {100 * self.mean_acc_c:7.2f}"
        lines.append(avg)
        lines.append(f"n_samples = {self.n_samples}")
        return "\n".join(lines)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def evaluate(model: AttributeModel, dataset: Dataset, batch_size: int = 256) -> EvalReport:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if dataset.num_attributes != model.config.num_attributes:
        raise ConfigError(
            f"num_attributes: dataset has {dataset.num_attributes}, model expects {model.config.num_attributes}"
        )
    correct_f = np.zeros(dataset.num_attributes)
    correct_c = None if model.variant == "baseline" else np.zeros(dataset.num_attributes)
    for sl in _batches(len(dataset), batch_size):
        out = model.forward(dataset.images[sl], mode="infer")
        labels = dataset.labels[sl]
        correct_f += (np.argmax(out.logits_f.data, -1) == labels).sum(axis=0)
        if correct_c is not None:
            correct_c += (np.argmax(out.logits_c.data, -1) == labels).sum(axis=0)
    n = len(dataset)
    return EvalReport(
        list(dataset.attribute_names),
        correct_f / n,
        None if correct_c is None else correct_c / n,
        n,
    )


@dataclass
class AffinitySummary:
    mean_attention: np.ndarray  # M x M, row-stochastic
    attribute_names: list[str]


def aggregate_affinity(model: AttributeModel, dataset: Dataset, batch_size: int = 256) -> AffinitySummary:
    """Mean over samples of the attention weights used in the forward pass."""
    if model.variant == "baseline":
        raise ContractError("the baseline variant has no attention to aggregate")
    if len(dataset) == 0:
        raise ContractError("cannot aggregate over an empty dataset")
    total = np.zeros((model.config.num_attributes,) * 2)
    for sl in _batches(len(dataset), batch_size):
        out = model.forward(dataset.images[sl], mode="infer")
        total += out.attention.data.sum(axis=0)
    return AffinitySummary(total / len(dataset), list(dataset.attribute_names))


def planted_pair_contrast(summary: AffinitySummary, pairs) -> tuple[float, float]:
    """Mean off-diagonal weight between attributes that share a planted factor,
    and mean weight between attributes that do not."""
    a = summary.mean_attention
    m = a.shape[0]
    group = _components(m, pairs)
    same = np.equal.outer(group, group)
    off = ~np.eye(m, dtype=bool)
    return float(a[same & off].mean()), float(a[~same].mean())


def _components(m: int, pairs) -> np.ndarray:
    label = list(range(m))
    changed = True
    while changed:
        changed = False
        for i, j in pairs:
            lo = min(label[i], label[j])
            if label[i] != lo or label[j] != lo:
                label[i] = label[j] = lo
                changed = True
    return np.array(label)


def export_heatmap(summary: AffinitySummary, path_csv, path_pgm=None) -> None:
    """CSV: header of names then M rows at 9 significant digits.
    PGM: ASCII graymap, values scaled linearly so the matrix max maps to 255."""
    a = np.asarray(summary.mean_attention)
    try:
        with open(path_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(summary.attribute_names)
            for row in a:
                w.writerow([f"{v:.9g}" for v in row])
        if path_pgm is not None:
            top = a.max()
            px = np.zeros(a.shape, dtype=np.int64) if top <= 0 else np.rint(255 * np.clip(a, 0, None) / top)
            write_pgm(path_pgm, px.astype(np.int64))
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {exc.filename}: {exc.strerror}") from exc


def read_affinity_csv(path) -> AffinitySummary:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names, values = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
    return AffinitySummary(values, names)

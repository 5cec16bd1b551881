"""Result tables in the layout of the published comparison.

Cells the protocol does not report are rendered as "-": validation scores
for ``rebalance`` (its folds are not comparable) and every z2 entry for
``adversarial`` (it has one shared latent).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .evaluate import DISTRIBUTIONS, MetricsReport

DASH = "-"


@dataclass
class Table:
    title: str
    header: list[str]
    rows: list[list[str]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [max(len(r[i]) for r in [self.header, *self.rows]) for i in range(len(self.header))]
        lines = [self.title]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines.append(fmt(self.header))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend(fmt(r) for r in self.rows)
        return "\n".join(lines) + "\n"


def _fmt(v: float, scale: float) -> str:
    return DASH if v is None or np.isnan(v) else f"{v * scale:.1f}"


def hidden_cell(kind: str, distribution: str, target: str) -> bool:
    if kind == "adversarial" and target == "y2":
        return True
    return kind == "rebalance" and distribution == "validation"


def distribution_shift_table(rep: MetricsReport, kinds: dict[str, str], metric: str = "accuracy") -> Table:
    """Methods x {validation, inverted, balanced} x {z1->y1, z2->y2}."""
    header = ["method"] + [f"{sub}->{t}/{d}" for sub, t in (("z1", "y1"), ("z2", "y2")) for d in DISTRIBUTIONS]
    scale = 100.0 if metric == "auroc" else 1.0
    rows = []
    for name in rep.methods:
        kind = kinds.get(name, name)
        row = [name]
        for target in ("y1", "y2"):
            for dist in DISTRIBUTIONS:
                if hidden_cell(kind, dist, target):
                    row.append(DASH)
                else:
                    row.append(_fmt(rep.mean(name, dist, target, metric), scale))
        rows.append(row)
    title = f"Mean {metric} over folds ({'x100' if scale != 1 else 'percent'})"
    return Table(title, header, rows)


def knn_table(rep: MetricsReport, kinds: dict[str, str]) -> Table:
    """kNN accuracy on the balanced split: one row per (method, label), columns z1, z2."""
    header = ["method", "label", "z1", "z2"]
    rows = []
    for name in rep.methods:
        mat = rep.knn_mean(name)
        shared = kinds.get(name, name) == "adversarial"
        for i, label in enumerate(("y1", "y2")):
            rows.append([name, label, _fmt(mat[i, 0], 1.0), DASH if shared else _fmt(mat[i, 1], 1.0)])
    return Table("kNN accuracy on the balanced split (rows: labels, columns: subspaces)", header, rows)


def build_tables(rep: MetricsReport, kinds: dict[str, str], with_auroc: bool = True) -> dict[str, Table]:
    tables = {
        "distribution_shift_accuracy": distribution_shift_table(rep, kinds, "accuracy"),
        "knn_confusion": knn_table(rep, kinds),
    }
    if with_auroc:
        tables["distribution_shift_auroc"] = distribution_shift_table(rep, kinds, "auroc")
    return tables

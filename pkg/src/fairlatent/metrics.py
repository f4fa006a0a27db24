"""Group fairness metrics computed from exact integer counts.

Every rate is formed as a :class:`fractions.Fraction` of two counts and only
the final metric is converted to ``float``, so results do not depend on
summation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "PredictionSet",
    "FairnessReport",
    "eo",
    "dp",
    "wga",
    "accuracy",
    "report",
    "joint_group",
]


class UndefinedMetricError(ValueError):
    """A metric needs a (label, group) cell or group that has no samples."""


def joint_group(s) -> np.ndarray:
    """Collapse binary sensitive attributes ``(n, a)`` into one index ``sum_k s_k 2^k``."""
    s = np.asarray(s)
    if s.ndim == 1:
        return s.astype(np.int64)
    return (s.astype(np.int64) << np.arange(s.shape[1])).sum(axis=1)


@dataclass(frozen=True)
class PredictionSet:
    y_pred: np.ndarray
    y_true: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        yp = np.asarray(self.y_pred, dtype=np.int64).ravel()
        yt = np.asarray(self.y_true, dtype=np.int64).ravel()
        g = joint_group(self.group)
        if not (yp.size == yt.size == g.size):
            raise ValueError("y_pred, y_true and group must have equal length")
        if yp.size == 0:
            raise UndefinedMetricError("empty prediction set")
        object.__setattr__(self, "y_pred", yp)
        object.__setattr__(self, "y_true", yt)
        object.__setattr__(self, "group", g)

    @property
    def labels(self) -> list[int]:
        return sorted(set(self.y_true.tolist()))

    @property
    def groups(self) -> list[int]:
        return sorted(set(self.group.tolist()))


def _recall(p: PredictionSet, label: int, group: int) -> Fraction:
    cell = (p.y_true == label) & (p.group == group)
    total = int(cell.sum())
    if total == 0:
        raise UndefinedMetricError(f"empty cell (y={label}, group={group})")
    return Fraction(int((p.y_pred[cell] == label).sum()), total)


def _pairs(p: PredictionSet):
    groups = p.groups
    if len(groups) < 2:
        raise UndefinedMetricError(f"need at least two groups, found {groups}")
    return combinations(groups, 2)


def _eo_exact(p: PredictionSet, aggregate: str = "mean") -> Fraction:
    labels = p.labels
    worst = Fraction(0)
    for g0, g1 in _pairs(p):
        gap = sum((abs(_recall(p, c, g1) - _recall(p, c, g0)) for c in labels), Fraction(0))
        if aggregate == "mean":
            gap /= len(labels)
        elif aggregate != "sum":
            raise ValueError("aggregate must be 'mean' or 'sum'")
        worst = max(worst, gap)
    return worst


def _dp_exact(p: PredictionSet, positive_label: int = 1) -> Fraction:
    worst = Fraction(0)
    for g0, g1 in _pairs(p):
        rates = []
        for g in (g0, g1):
            members = p.group == g
            rates.append(Fraction(int((p.y_pred[members] == positive_label).sum()), int(members.sum())))
        worst = max(worst, abs(rates[1] - rates[0]))
    return worst


def _cell_accuracies(p: PredictionSet) -> dict[tuple[int, int], Fraction]:
    out = {}
    for c in p.labels:
        for g in p.groups:
            cell = (p.y_true == c) & (p.group == g)
            total = int(cell.sum())
            if total == 0:
                raise UndefinedMetricError(f"empty cell (y={c}, group={g})")
            out[(c, g)] = Fraction(int((p.y_pred[cell] == c).sum()), total)
    return out


def eo(p: PredictionSet, aggregate: str = "mean") -> float:
    """Equalized-odds gap: per-class recall difference between groups, averaged over classes.

    With more than two groups the largest pairwise value is returned.
    ``aggregate="sum"`` sums over classes instead of averaging.
    """
    return float(_eo_exact(p, aggregate))


def dp(p: PredictionSet, positive_label: int = 1) -> float:
    """Demographic-parity gap in the rate of predicting ``positive_label`` (max over group pairs)."""
    return float(_dp_exact(p, positive_label))


def wga(p: PredictionSet) -> float:
    """Worst accuracy over all (label, group) cells."""
    return float(min(_cell_accuracies(p).values()))


def accuracy(p: PredictionSet) -> float:
    return float(Fraction(int((p.y_pred == p.y_true).sum()), p.y_true.size))


@dataclass
class FairnessReport:
    eo: float
    dp: float
    wga: float
    acc: float
    per_group: dict[tuple[int, int], float] = field(default_factory=dict)

    def as_percent(self) -> dict[str, float]:
        return {"eo": 100 * self.eo, "dp": 100 * self.dp, "wga": 100 * self.wga, "acc": 100 * self.acc}

    def to_text(self, prefix: str = "") -> str:
        """One ``key=value`` line per metric, values in percent."""
        lines = [f"{prefix}{k}={v:.6f}" for k, v in self.as_percent().items()]
        for (c, g), v in sorted(self.per_group.items()):
            lines.append(f"{prefix}acc_y{c}_g{g}={100 * v:.6f}")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str, prefix: str = "") -> "FairnessReport":
        vals: dict[str, float] = {}
        per_group = {}
        for line in text.strip().splitlines():
            key, _, value = line.strip().partition("=")
            if prefix and not key.startswith(prefix):
                continue
            key = key[len(prefix):]
            if key.startswith("acc_y"):
                c, g = key[len("acc_y"):].split("_g")
                per_group[(int(c), int(g))] = float(value) / 100
            else:
                vals[key] = float(value) / 100
        return cls(vals["eo"], vals["dp"], vals["wga"], vals["acc"], per_group)


def report(p: PredictionSet, positive_label: int = 1, aggregate: str = "mean") -> FairnessReport:
    cells = _cell_accuracies(p)
    return FairnessReport(
        eo=eo(p, aggregate),
        dp=dp(p, positive_label),
        wga=float(min(cells.values())),
        acc=accuracy(p),
        per_group={k: float(v) for k, v in cells.items()},
    )

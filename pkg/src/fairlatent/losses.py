"""Training objectives for the fair latent space.

Covariance regularisers (decorrelation and variance floor), the bounded
pairwise distance loss, the flow negative log-likelihood, linear-probe
cross-entropy, and the combined objective with ablation switches.

All functions take and return :class:`~fairlatent.autodiff.Tensor` values so
they can be differentiated; numpy arrays are accepted as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "InsufficientBatchError",
    "FairLossConfig",
    "AblationFlags",
    "covariance",
    "diag_loss",
    "eq_loss",
    "bounded_distance",
    "distance_loss",
    "fair_loss",
    "fair_loss_terms",
    "nll_loss",
    "probe_ce",
    "total_loss",
]


class InsufficientBatchError(ValueError):
    """Fewer than two samples in a batch statistic."""


@dataclass
class FairLossConfig:
    lambda_dg: float = 1.0
    lambda_eq: float = 10.0
    lambda_di: float = 1.0
    lambda_cls: float = 1.0
    c: float = 1.0
    eps_eq: float = 1e-4
    eps_d: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_dg, self.lambda_eq, self.lambda_di, self.lambda_cls) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.c <= 0:
            raise ValueError("variance target c must be positive")
        if not 0 < self.eps_eq < 1:
            raise ValueError("eps_eq must lie in (0, 1)")
        if not 0 < self.eps_d < 1:
            raise ValueError("eps_d must lie in (0, 1)")


@dataclass
class AblationFlags:
    """Switches for each term of the objective.

    ``use_decompose`` off means there is no label/sensitive split: the fair
    terms act on the full latent with label-role masks only, and both probes
    read the full latent.
    """

    use_dg: bool = True
    use_eq: bool = True
    use_di: bool = True
    use_g: bool = True
    use_cls: bool = True
    use_decompose: bool = True

    # named rows of the component ablation, cumulative in this order
    PRESETS = ("inn", "dgeq", "di", "full")

    @classmethod
    def preset(cls, name: str) -> "AblationFlags":
        if name == "inn":
            return cls(False, False, False, False, True, False)
        if name == "dgeq":
            return cls(True, True, False, False, True, True)
        if name == "di":
            return cls(True, True, True, False, True, True)
        if name == "full":
            return cls()
        raise ValueError(f"unknown ablation preset {name!r}; expected one of {cls.PRESETS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def covariance(Z) -> Tensor:
    """Population (1/n) covariance of the columns of an ``n x k`` batch."""
    Z = _t(Z)
    if Z.ndim != 2:
        raise ad.DimensionError(f"covariance needs an (n, k) batch, got {Z.shape}")
    n = Z.shape[0]
    if n < 2:
        raise InsufficientBatchError(f"covariance needs n >= 2, got {n}")
    Zc = Z - Z.mean(axis=0, keepdims=True)
    return ad.matmul(Zc.T, Zc) * (1.0 / n)


def diag_loss(C) -> Tensor:
    """Sum of squared off-diagonal entries divided by the width ``k``."""
    C = _t(C)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ad.DimensionError(f"diag_loss needs a square matrix, got {C.shape}")
    k = C.shape[0]
    off = C * (1.0 - np.eye(k, dtype=C.dtype))
    return ad.square(off).sum() * (1.0 / k)


def eq_loss(Z, c: float = 1.0, eps: float = 1e-4) -> Tensor:
    """Mean hinge ``max(0, c - sqrt(var_j + eps))`` over columns."""
    Z = _t(Z)
    n = Z.shape[0]
    if n < 2:
        raise InsufficientBatchError(f"eq_loss needs n >= 2, got {n}")
    Zc = Z - Z.mean(axis=0, keepdims=True)
    var = ad.square(Zc).mean(axis=0)
    return ad.relu(c - ad.sqrt(var + eps)).mean()


def bounded_distance(u, v, eps: float = 1e-4) -> Tensor:
    """``log((|u-v|^2 + 1) / (|u-v|^2 + eps))`` over the last axis."""
    sq = ad.square(_t(u) - _t(v)).sum(axis=-1)
    return ad.log(sq + 1.0) - ad.log(sq + eps)


def _masks(y: np.ndarray, s: np.ndarray, target_role: str) -> tuple[np.ndarray, np.ndarray]:
    same_y = y[:, None] == y[None, :]
    same_s = s[:, None] == s[None, :]
    if target_role == "y":
        keep, split = same_y, same_s
    elif target_role == "s":
        keep, split = same_s, same_y
    else:
        raise ValueError(f"target_role must be 'y' or 's', got {target_role!r}")
    return keep & ~split, split & ~keep


def distance_loss(Z, y, s, eps: float = 1e-4, target_role: str = "y") -> Tensor:
    """Pull together pairs sharing the target but not the other attribute; push apart the converse.

    With ``target_role="y"``: pairs with the same label and different
    sensitive group are drawn together, pairs with the same group and
    different label are pushed apart. An empty mask contributes zero.
    """
    Z = _t(Z)
    n, k = Z.shape
    if n < 2:
        raise InsufficientBatchError(f"distance_loss needs n >= 2, got {n}")
    y = np.asarray(y)
    s = np.asarray(s)
    m_max, m_min = _masks(y, s, target_role)
    loss = Tensor(np.zeros((), dtype=Z.dtype))
    if not (m_max.any() or m_min.any()):
        return loss
    diff = Z.reshape(n, 1, k) - Z.reshape(1, n, k)
    D = bounded_distance(diff, Tensor(np.zeros((), dtype=Z.dtype)), eps)
    if m_max.any():
        loss = loss - (D * m_max.astype(Z.dtype)).sum() * (1.0 / m_max.sum())
    if m_min.any():
        loss = loss + (D * m_min.astype(Z.dtype)).sum() * (1.0 / m_min.sum())
    return loss


def fair_loss_terms(Z, y, s, cfg: FairLossConfig, target_role: str = "y",
                    flags: AblationFlags | None = None) -> dict[str, Tensor]:
    """Unweighted components of the fair loss that are switched on."""
    flags = flags or AblationFlags()
    terms: dict[str, Tensor] = {}
    if flags.use_dg:
        terms["dg"] = diag_loss(covariance(Z))
    if flags.use_eq:
        terms["eq"] = eq_loss(Z, cfg.c, cfg.eps_eq)
    if flags.use_di:
        terms["di"] = distance_loss(Z, y, s, cfg.eps_d, target_role)
    return terms


def fair_loss(Z, y, s, cfg: FairLossConfig, target_role: str = "y",
              flags: AblationFlags | None = None) -> Tensor:
    Z = _t(Z)
    weights = {"dg": cfg.lambda_dg, "eq": cfg.lambda_eq, "di": cfg.lambda_di}
    total = Tensor(np.zeros((), dtype=Z.dtype))
    for name, term in fair_loss_terms(Z, y, s, cfg, target_role, flags).items():
        if weights[name]:
            total = total + term * weights[name]
    return total


def nll_loss(model, e, literal: bool = False) -> Tensor:
    """Mean of ``0.5 |f(e)|^2 - log|det J_f(e)|`` (standard Gaussian base, no constant).

    ``literal=True`` evaluates ``-(|f(e)|^2 + log|det J|)`` averaged instead.
    It is unbounded below and only meant for comparison.
    """
    z, logdet = model.forward(e)
    sq = ad.square(z).sum(axis=1)
    if literal:
        return -(sq + logdet).mean()
    return (sq * 0.5 - logdet).mean()


def probe_ce(weights, bias, Z, targets) -> Tensor:
    """Softmax cross-entropy of the linear probe ``Z W^T + b``."""
    logits = ad.matmul(_t(Z), _t(weights).T) + bias
    return ad.softmax_cross_entropy(logits, targets)


def total_loss(model, probes, e, y, s, cfg: FairLossConfig,
               flags: AblationFlags | None = None) -> tuple[Tensor, dict[str, float]]:
    """Full objective on one batch.

    Args:
        model: a :class:`~fairlatent.flow.FlowModel`.
        probes: ``(label_probe, sensitive_probe)`` with ``weight``/``bias`` tensors.
        e: ``(n, d)`` embeddings.
        y: label indices.
        s: joint sensitive-group indices.

    Returns:
        The scalar loss and a dict of its weighted components.
    """
    flags = flags or AblationFlags()
    y = np.asarray(y)
    s = np.asarray(s)
    label_probe, sens_probe = probes
    part = model.partition

    if flags.use_g:
        z, logdet = model.forward(e)
        nll = (ad.square(z).sum(axis=1) * 0.5 - logdet).mean()
    else:
        z, _ = model.forward(e)
        nll = None

    if flags.use_decompose:
        zy = z[:, part.y_slice]
        zs = z[:, part.s_slice]
        blocks = [(zy, "y"), (zs, "s")]
    else:
        zy = zs = z
        blocks = [(z, "y")]

    total = Tensor(np.zeros((), dtype=z.dtype))
    parts: dict[str, float] = {}
    weights = {"dg": cfg.lambda_dg, "eq": cfg.lambda_eq, "di": cfg.lambda_di}
    for block, role in blocks:
        for name, term in fair_loss_terms(block, y, s, cfg, role, flags).items():
            weighted = term * weights[name]
            total = total + weighted
            parts[f"{name}_{role}"] = weighted.item()
    if nll is not None:
        total = total + nll
        parts["nll"] = nll.item()
    if flags.use_cls and cfg.lambda_cls:
        ce = probe_ce(label_probe.weight, label_probe.bias, zy, y) + probe_ce(
            sens_probe.weight, sens_probe.bias, zs, s
        )
        weighted = ce * cfg.lambda_cls
        total = total + weighted
        parts["cls"] = weighted.item()
    parts["total"] = total.item()
    return total, parts

"""Linear classifiers: the jointly trained latent probes and standalone logistic fits."""

from __future__ import annotations

import numpy as np
import scipy.optimize

from .autodiff import Tensor, matmul

__all__ = ["LinearProbe", "fit_logistic"]


class LinearProbe:
    """Multinomial linear classifier ``logits = x W^T + b`` on a latent block.

    ``block`` is ``"y"``, ``"s"`` or ``"full"`` and records which coordinates
    of the latent vector the probe reads.
    """

    def __init__(self, in_dim: int, n_classes: int, block: str = "full", dtype=np.float64,
                 weight=None, bias=None):
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.block = block
        w = np.zeros((n_classes, in_dim)) if weight is None else weight
        b = np.zeros(n_classes) if bias is None else bias
        self.weight = Tensor(np.array(w, dtype=dtype), requires_grad=True, name="weight")
        self.bias = Tensor(np.array(b, dtype=dtype), requires_grad=True, name="bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.weight.dtype))
        return matmul(x, self.weight.T) + self.bias

    def decision(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        return x @ self.weight.data.T.astype(np.float64) + self.bias.data.astype(np.float64)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.decision(x), axis=1)

    def __call__(self, x) -> np.ndarray:
        return self.predict(x)

    def direction_vector(self, positive: int = 1, negative: int = 0) -> np.ndarray:
        """Weight row of ``positive`` minus that of ``negative`` (binary logit direction)."""
        w = self.weight.data.astype(np.float64)
        return w[positive] - w[negative]


def fit_logistic(X, y, n_classes: int | None = None, l2: float = 1e-4,
                 sample_weight=None, block: str = "full") -> LinearProbe:
    """Weighted multinomial logistic regression by L-BFGS.

    Features are standardised internally and the result is folded back so
    the returned probe acts on raw ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, k = X.shape
    C = int(n_classes if n_classes is not None else y.max() + 1)
    w_s = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    w_s = w_s / w_s.sum()
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    onehot = np.eye(C)[y]

    def objective(theta):
        W = theta[: C * k].reshape(C, k)
        b = theta[C * k:]
        logits = Xs @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits).sum(axis=1))
        loss = np.sum(w_s * (lse - (logits * onehot).sum(axis=1))) + 0.5 * l2 * np.sum(W * W)
        p = np.exp(logits - lse[:, None])
        r = (p - onehot) * w_s[:, None]
        gW = r.T @ Xs + l2 * W
        gb = r.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    res = scipy.optimize.minimize(objective, np.zeros(C * k + C), jac=True, method="L-BFGS-B",
                                  options={"maxiter": 1000, "gtol": 1e-9})
    W = res.x[: C * k].reshape(C, k)
    b = res.x[C * k:]
    return LinearProbe(k, C, block, weight=W / sd, bias=b - (W / sd) @ mu)

"""Glow-style invertible network on flat embedding vectors.

Each block is ``actnorm -> invertible linear (PLU) -> affine coupling``.
Forward maps embeddings ``e`` to latents ``z`` and returns the exact
per-sample log-determinant of the Jacobian; :meth:`FlowModel.inverse` maps
latents back in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "FlowError",
    "UninitializedError",
    "DegenerateDataError",
    "LatentPartition",
    "ActNorm",
    "InvertibleLinear",
    "AffineCoupling",
    "FlowBlock",
    "FlowModel",
]


class FlowError(Exception):
    pass


class UninitializedError(FlowError, RuntimeError):
    """Forward pass requested before data-dependent actnorm initialization."""


class DegenerateDataError(FlowError, ValueError):
    """A batch column has zero variance, so actnorm cannot standardize it."""


@dataclass(frozen=True)
class LatentPartition:
    """Split of the latent vector into a label block and a sensitive block."""

    d_y: int
    d_s: int

    def validate(self, dim: int) -> None:
        if self.d_y < 1 or self.d_s < 1 or self.d_y + self.d_s > dim:
            raise ValueError(f"invalid partition d_y={self.d_y}, d_s={self.d_s} for d={dim}")

    @property
    def y_slice(self) -> slice:
        return slice(0, self.d_y)

    @property
    def s_slice(self) -> slice:
        return slice(self.d_y, self.d_y + self.d_s)

    @classmethod
    def halves(cls, dim: int) -> "LatentPartition":
        return cls(dim // 2, dim - dim // 2)


def _param(value, name: str, dtype) -> Tensor:
    return Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)


class ActNorm:
    """Per-dimension affine map ``y = x * exp(log_scale) + bias``."""

    def __init__(self, dim: int, dtype=np.float64):
        self.dim = dim
        self.log_scale = _param(np.zeros(dim), "log_scale", dtype)
        self.bias = _param(np.zeros(dim), "bias", dtype)
        self.initialized = False

    def params(self) -> dict[str, Tensor]:
        return {"log_scale": self.log_scale, "bias": self.bias}

    def initialize(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] < 2:
            raise DegenerateDataError("actnorm initialization needs at least 2 samples")
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        bad = np.flatnonzero(sd <= 1e-12 * np.maximum(1.0, np.abs(mu)))
        if bad.size:
            raise DegenerateDataError(f"zero-variance input dimension(s) {bad.tolist()}")
        dtype = self.log_scale.dtype
        self.log_scale.data = (-np.log(sd)).astype(dtype)
        self.bias.data = (-mu / sd).astype(dtype)
        self.initialized = True

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise UninitializedError("actnorm used before initialization")
        y = x * ad.exp(self.log_scale) + self.bias
        return y, self.log_scale.sum()

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return (y - self.bias.data) * np.exp(-self.log_scale.data)


class InvertibleLinear:
    """``y = x W^T`` with ``W = P L (U + diag(sign * exp(log_diag)))``.

    ``P`` and ``sign`` are fixed buffers; ``L`` is unit lower triangular and
    ``U`` strictly upper triangular.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None, dtype=np.float64):
        self.dim = dim
        if rng is None:
            perm = np.eye(dim)
            lower = np.zeros((dim, dim))
            upper = np.zeros((dim, dim))
            sign = np.ones(dim)
            log_diag = np.zeros(dim)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            perm, lo, up = scipy.linalg.lu(q)
            lower = np.tril(lo, -1)
            diag = np.diag(up)
            sign = np.sign(diag)
            log_diag = np.log(np.abs(diag))
            upper = np.triu(up, 1)
        self.perm = np.asarray(perm, dtype=dtype)
        self.sign = np.asarray(sign, dtype=dtype)
        self.lower = _param(lower, "lower", dtype)
        self.upper = _param(upper, "upper", dtype)
        self.log_diag = _param(log_diag, "log_diag", dtype)
        self._lmask = np.tril(np.ones((dim, dim), dtype=dtype), -1)
        self._umask = np.triu(np.ones((dim, dim), dtype=dtype), 1)
        self._eye = np.eye(dim, dtype=dtype)

    def params(self) -> dict[str, Tensor]:
        return {"lower": self.lower, "upper": self.upper, "log_diag": self.log_diag}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"perm": self.perm, "sign": self.sign}

    def weight(self) -> Tensor:
        lo = self.lower * self._lmask + self._eye
        diag = ad.exp(self.log_diag) * self.sign
        up = self.upper * self._umask + self._eye * diag.reshape(1, self.dim)
        return ad.matmul(ad.matmul(Tensor(self.perm), lo), up)

    def weight_array(self) -> np.ndarray:
        lo = self.lower.data * self._lmask + self._eye
        up = self.upper.data * self._umask + np.diag(self.sign * np.exp(self.log_diag.data))
        return self.perm @ lo @ up

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return ad.matmul(x, self.weight().T), self.log_diag.sum()

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.weight_array(), y.T).T


class AffineCoupling:
    """Affine coupling: half the coordinates are scaled and shifted by an MLP of the other half.

    The log-scale is ``clamp * tanh(raw)``, so ``|log-scale| <= clamp``.
    ``parity`` selects which half is transformed.
    """

    def __init__(
        self,
        dim: int,
        hidden: int,
        depth: int,
        parity: int,
        clamp: float = 2.0,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        if dim < 2:
            raise ValueError("coupling needs dim >= 2")
        self.dim = dim
        self.clamp = float(clamp)
        self.parity = parity % 2
        k = dim // 2
        if self.parity == 0:
            self.cond = slice(0, k)
            self.trans = slice(k, dim)
        else:
            self.cond = slice(k, dim)
            self.trans = slice(0, k)
        n_cond = self.cond.stop - self.cond.start
        self.n_trans = dim - n_cond
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [n_cond] + [hidden] * depth
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.weights.append(_param(w, f"w{i}", dtype))
            self.biases.append(_param(np.zeros(fan_out), f"b{i}", dtype))
        # zero-initialised output layer: the coupling starts as the identity
        self.weights.append(_param(np.zeros((widths[-1], 2 * self.n_trans)), f"w{depth}", dtype))
        self.biases.append(_param(np.zeros(2 * self.n_trans), f"b{depth}", dtype))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def _scale_shift(self, xc: Tensor) -> tuple[Tensor, Tensor]:
        h = xc
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.tanh(ad.matmul(h, w) + b)
        out = ad.matmul(h, self.weights[-1]) + self.biases[-1]
        m = self.n_trans
        log_s = ad.tanh(out[:, :m]) * self.clamp
        return log_s, out[:, m:]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xc = x[:, self.cond]
        xt = x[:, self.trans]
        log_s, shift = self._scale_shift(xc)
        yt = xt * ad.exp(log_s) + shift
        parts = [xc, yt] if self.parity == 0 else [yt, xc]
        return ad.concat(parts, axis=1), log_s.sum(axis=1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            yc = y[:, self.cond]
            log_s, shift = self._scale_shift(Tensor(yc))
        xt = (y[:, self.trans] - shift.data) * np.exp(-log_s.data)
        x = np.empty_like(y)
        x[:, self.cond] = yc
        x[:, self.trans] = xt
        return x


class FlowBlock:
    def __init__(self, dim, hidden, depth, parity, clamp=2.0, rng=None, dtype=np.float64):
        self.actnorm = ActNorm(dim, dtype)
        self.linear = InvertibleLinear(dim, rng, dtype)
        self.coupling = AffineCoupling(dim, hidden, depth, parity, clamp, rng, dtype)

    def layers(self):
        return (("actnorm", self.actnorm), ("linear", self.linear), ("coupling", self.coupling))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        logdet = None
        for _, layer in self.layers():
            x, ld = layer.forward(x)
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.layers()):
            y = layer.inverse(y)
        return y


class FlowModel:
    """Stack of :class:`FlowBlock` mapping ``R^d -> R^d``.

    Args:
        dim: embedding width ``d``.
        n_blocks: number of blocks (12 at full scale).
        hidden: coupling subnetwork width (512 at full scale).
        depth: number of hidden layers in each coupling subnetwork.
        clamp: bound on the coupling log-scale.
        partition: latent split; defaults to two halves.
        seed: seeds the PLU initialisation (permutations included) and subnet weights.
        identity: build every layer as the identity, actnorm included and
            marked initialized. Useful for checks with known answers.
        dtype: ``np.float64`` or ``np.float32``.
    """

    def __init__(
        self,
        dim: int,
        n_blocks: int = 12,
        hidden: int = 512,
        depth: int = 2,
        clamp: float = 2.0,
        partition: LatentPartition | None = None,
        seed: int = 0,
        identity: bool = False,
        dtype=np.float64,
    ):
        self.dim = dim
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.depth = depth
        self.clamp = clamp
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.partition = partition or LatentPartition.halves(dim)
        self.partition.validate(dim)
        rng = np.random.default_rng(seed)
        self.blocks = [
            FlowBlock(dim, hidden, depth, i, clamp, None if identity else rng, self.dtype)
            for i in range(n_blocks)
        ]
        if identity:
            for b in self.blocks:
                b.actnorm.initialized = True

    # ------------------------------------------------------------ parameters
    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for lname, layer in block.layers():
                for pname, p in layer.params().items():
                    out[f"blocks.{i}.{lname}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            for bname, arr in block.linear.buffers().items():
                out[f"blocks.{i}.linear.{bname}"] = arr
        return out

    @property
    def initialized(self) -> bool:
        return all(b.actnorm.initialized for b in self.blocks)

    def set_initialized(self, flag: bool = True) -> None:
        for b in self.blocks:
            b.actnorm.initialized = flag

    # ------------------------------------------------------------ mapping
    def _as_input(self, e) -> Tensor:
        if isinstance(e, Tensor):
            x = e
        else:
            x = Tensor(np.asarray(e, dtype=self.dtype))
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ad.DimensionError(f"expected (n, {self.dim}) input, got {x.shape}")
        if not np.isfinite(x.data).all():
            raise ad.NonFiniteError("non-finite flow input")
        return x

    def forward(self, e) -> tuple[Tensor, Tensor]:
        """Return ``(z, logdet)``; ``logdet`` has shape ``(n,)``."""
        x = self._as_input(e)
        n = x.shape[0]
        logdet = Tensor(np.zeros(n, dtype=self.dtype))
        for block in self.blocks:
            x, ld = block.forward(x)
            logdet = logdet + ld
        return x, logdet

    def encode(self, e) -> np.ndarray:
        with ad.no_grad():
            z, _ = self.forward(e)
        return z.data

    def inverse(self, z) -> np.ndarray:
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=self.dtype)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ad.DimensionError(f"expected (n, {self.dim}) latents, got {z.shape}")
        for block in reversed(self.blocks):
            z = block.inverse(z)
        return z

    def init_actnorm(self, first_batch) -> None:
        """Data-dependent actnorm initialization, block by block."""
        x = np.asarray(first_batch, dtype=self.dtype)
        if x.ndim != 2 or x.shape[0] < 2:
            raise DegenerateDataError("actnorm initialization needs at least 2 samples")
        with ad.no_grad():
            h = Tensor(x)
            for block in self.blocks:
                block.actnorm.initialize(h.data)
                h, _ = block.forward(h)

    def astype(self, dtype) -> "FlowModel":
        self.dtype = np.dtype(dtype)
        for p in self.parameters().values():
            p.data = p.data.astype(self.dtype)
        for block in self.blocks:
            lin = block.linear
            lin.perm = lin.perm.astype(self.dtype)
            lin.sign = lin.sign.astype(self.dtype)
            lin._lmask = lin._lmask.astype(self.dtype)
            lin._umask = lin._umask.astype(self.dtype)
            lin._eye = lin._eye.astype(self.dtype)
        return self

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "depth": self.depth,
            "clamp": self.clamp,
            "seed": self.seed,
            "d_y": self.partition.d_y,
            "d_s": self.partition.d_s,
            "dtype": self.dtype.name,
        }

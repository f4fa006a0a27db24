"""Joint training of the flow and the two latent probes.

Adam with decoupled weight decay, per-epoch validation metrics, binary
checkpoints, and the component/decomposition ablation grids.

Checkpoint layout (little-endian)::

    b"FLCK"  u32 version
    u64 length, JSON config/state text
    u32 record count, then per record:
        u32 name length, name bytes, u32 rank, u64 dims[rank], payload
        (float32 or float64 according to the stored precision)
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import EmbeddingDataset, batches
from .flow import FlowModel, LatentPartition
from .losses import AblationFlags, FairLossConfig, total_loss
from .metrics import FairnessReport, PredictionSet, report
from .probe import LinearProbe

__all__ = [
    "TrainConfig",
    "AdamState",
    "Adam",
    "adam_step",
    "TrainState",
    "TrainResult",
    "TrainingDiverged",
    "CheckpointFormatError",
    "build_state",
    "train",
    "evaluate",
    "select_epoch",
    "save_checkpoint",
    "load_checkpoint",
    "ablation_grid",
    "CUMULATIVE_ROWS",
    "COMPONENT_ROWS",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FLCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    flow_lr: float = 1e-4
    flow_wd: float = 1e-4
    probe_lr: float = 1e-5
    probe_wd: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: FairLossConfig = field(default_factory=FairLossConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    n_blocks: int = 12
    hidden: int = 512
    depth: int = 2
    clamp: float = 2.0
    d_y: int | None = None
    d_s: int | None = None
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = FairLossConfig(**self.loss)
        if isinstance(self.flags, dict):
            self.flags = AblationFlags(**self.flags)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.flow_lr, self.probe_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")

    @classmethod
    def small(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: 4 blocks of width 64, 30 epochs.

        The probes get a larger step and the classification and distance
        weights sit at the upper end of their usual range, since a desk run
        takes a few thousand optimiser steps rather than hundreds of thousands.
        """
        base = dict(n_blocks=4, hidden=64, depth=2, epochs=30, probe_lr=1e-3,
                    loss=FairLossConfig(lambda_di=3.0, lambda_cls=3.0))
        base.update(overrides)
        return cls(**base)

    def partition(self, dim: int) -> LatentPartition:
        if self.d_y is None and self.d_s is None:
            return LatentPartition.halves(dim)
        d_y = self.d_y if self.d_y is not None else dim - self.d_s
        d_s = self.d_s if self.d_s is not None else dim - d_y
        return LatentPartition(d_y, d_s)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------- optimiser
def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Adam update at step ``t`` (1-based); weight decay shrinks ``param`` first."""
    if wd:
        param = param * (1.0 - lr * wd)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class Adam:
    """Adam over named parameter groups, each with its own learning rate and decay."""

    def __init__(self, groups: list[tuple[dict[str, ad.Tensor], float, float]],
                 beta1=0.9, beta2=0.999, eps=1e-8, state: AdamState | None = None):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = state or AdamState()

    def zero_grad(self) -> None:
        for params, _, _ in self.groups:
            for p in params.values():
                p.grad = None

    def step(self) -> None:
        st = self.state
        st.t += 1
        for params, lr, wd in self.groups:
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = st.m.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    st.v[name] = np.zeros_like(p.data)
                p.data, st.m[name], st.v[name] = adam_step(
                    p.data, g, m, st.v[name], st.t, lr, wd, self.beta1, self.beta2, self.eps
                )


# ---------------------------------------------------------------- state
@dataclass
class TrainState:
    cfg: TrainConfig
    model: FlowModel
    label_probe: LinearProbe
    sens_probe: LinearProbe
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def probes(self) -> tuple[LinearProbe, LinearProbe]:
        return self.label_probe, self.sens_probe

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {f"flow.{k}": v for k, v in self.model.parameters().items()}
        out.update({f"label_probe.{k}": v for k, v in self.label_probe.parameters().items()})
        out.update({f"sens_probe.{k}": v for k, v in self.sens_probe.parameters().items()})
        return out

    def optimizer(self) -> Adam:
        flow = {f"flow.{k}": v for k, v in self.model.parameters().items()}
        probes = {f"label_probe.{k}": v for k, v in self.label_probe.parameters().items()}
        probes.update({f"sens_probe.{k}": v for k, v in self.sens_probe.parameters().items()})
        c = self.cfg
        return Adam([(flow, c.flow_lr, c.flow_wd), (probes, c.probe_lr, c.probe_wd)],
                    c.beta1, c.beta2, c.adam_eps, self.adam)

    def latent_blocks(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inputs of the label and sensitive probes for latents ``z``."""
        if not self.cfg.flags.use_decompose:
            return z, z
        part = self.model.partition
        return z[:, part.y_slice], z[:, part.s_slice]

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the state at the end of the previous epoch."""

    def __init__(self, message: str, last_good: TrainState):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]


def build_state(dataset: EmbeddingDataset, cfg: TrainConfig) -> TrainState:
    dtype = np.dtype(cfg.precision)
    part = cfg.partition(dataset.d)
    model = FlowModel(dataset.d, cfg.n_blocks, cfg.hidden, cfg.depth, cfg.clamp, part,
                      seed=cfg.seed, dtype=dtype)
    if cfg.flags.use_decompose:
        label_in, sens_in, lb, sb = part.d_y, part.d_s, "y", "s"
    else:
        label_in = sens_in = dataset.d
        lb = sb = "full"
    label_probe = LinearProbe(label_in, max(2, dataset.n_labels), lb, dtype)
    sens_probe = LinearProbe(sens_in, dataset.n_groups, sb, dtype)
    return TrainState(cfg, model, label_probe, sens_probe)


def _embeddings(dataset: EmbeddingDataset, idx, dtype) -> np.ndarray:
    return dataset.e[idx].astype(dtype)


def evaluate(state: TrainState, dataset: EmbeddingDataset, split: str = "val") -> dict[str, FairnessReport]:
    """Fairness reports of both probes on one split.

    The label report groups by the joint sensitive index; the sensitive
    report swaps roles and groups by label.
    """
    idx = dataset.indices(split)
    z = state.model.encode(_embeddings(dataset, idx, state.model.dtype))
    zy, zs = state.latent_blocks(z)
    y = dataset.y[idx]
    g = dataset.group[idx]
    return {
        "label": report(PredictionSet(state.label_probe.predict(zy), y, g)),
        "sensitive": report(PredictionSet(state.sens_probe.predict(zs), g, y)),
    }


def _nll_on(state: TrainState, dataset: EmbeddingDataset, split: str) -> float:
    idx = dataset.indices(split)
    with ad.no_grad():
        z, logdet = state.model.forward(_embeddings(dataset, idx, state.model.dtype))
    return float(np.mean(0.5 * np.sum(z.data.astype(np.float64) ** 2, axis=1) - logdet.data))


def train(dataset: EmbeddingDataset, cfg: TrainConfig | None = None, state: TrainState | None = None,
          epochs: int | None = None, baseline_acc: float | None = None) -> TrainResult:
    """Run (or resume) training.

    Args:
        dataset: needs ``train`` and ``val`` rows.
        cfg: configuration; taken from ``state`` when resuming.
        state: resume from this state (e.g. a loaded checkpoint).
        epochs: stop after this many total epochs instead of ``cfg.epochs``.
        baseline_acc: when given, return the epoch chosen by :func:`select_epoch`
            instead of the last one.

    Raises:
        TrainingDiverged: the loss went non-finite.
    """
    if state is None:
        if cfg is None:
            raise ValueError("need a config or a state")
        state = build_state(dataset, cfg)
    cfg = state.cfg
    stop = cfg.epochs if epochs is None else epochs
    train_idx = dataset.indices("train")
    if train_idx.size < 2 or dataset.indices("val").size == 0:
        raise ValueError("dataset needs train and val rows")
    dtype = state.model.dtype
    y_all = dataset.y.astype(np.int64)
    g_all = dataset.group

    if not state.model.initialized:
        first = batches(train_idx, cfg.batch_size, cfg.seed, 0)[0]
        state.model.init_actnorm(_embeddings(dataset, first, dtype))

    opt = state.optimizer()
    last_good = state.copy()
    best: tuple[float, TrainState] | None = None
    for epoch in range(state.epoch, stop):
        sums: dict[str, float] = {}
        n_batches = 0
        for idx in batches(train_idx, cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            try:
                loss, parts = total_loss(state.model, state.probes, _embeddings(dataset, idx, dtype),
                                         y_all[idx], g_all[idx], cfg.loss, cfg.flags)
                if not np.isfinite(loss.data).all():
                    raise ad.NonFiniteError("loss is not finite")
                loss.backward()
            except (ad.NonFiniteError, ad.DomainError) as exc:
                raise TrainingDiverged(f"diverged in epoch {epoch}: {exc}", last_good) from exc
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        state.epoch = epoch + 1
        rep = evaluate(state, dataset, "val")
        row = {"epoch": state.epoch}
        row.update({f"loss_{k}": v / n_batches for k, v in sums.items()})
        row["val_nll"] = _nll_on(state, dataset, "val")
        row.update(rep["label"].as_percent())
        state.history.append(row)
        log.info("epoch %d loss=%.4f EO=%.2f acc=%.2f", state.epoch, row.get("loss_total", 0.0),
                 row["eo"], row["acc"])
        if not all(np.isfinite(p.data).all() for p in state.named_parameters().values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good)
        last_good = state.copy()
        if baseline_acc is not None and row["acc"] >= 100 * baseline_acc - 5.0:
            if best is None or row["eo"] < best[0]:
                best = (row["eo"], last_good)
    if best is not None:
        chosen = best[1]
        chosen.history = list(state.history)
        return TrainResult(chosen, chosen.history)
    return TrainResult(state, state.history)


def select_epoch(history: list[dict], baseline_acc: float, tolerance: float = 5.0) -> int:
    """Epoch with the lowest validation EO among those within ``tolerance`` points of the baseline.

    ``baseline_acc`` is a fraction; history rows hold percentages. Falls back
    to the most accurate epoch when none qualifies.
    """
    ok = [r for r in history if r["acc"] >= 100 * baseline_acc - tolerance]
    if not ok:
        return max(history, key=lambda r: r["acc"])["epoch"]
    return min(ok, key=lambda r: (r["eo"], r["epoch"]))["epoch"]


# ---------------------------------------------------------------- checkpoints
class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


def _records(state: TrainState) -> dict[str, np.ndarray]:
    rec = {k: v.data for k, v in state.named_parameters().items()}
    rec.update({f"buffer.{k}": v for k, v in state.model.buffers().items()})
    for k in sorted(state.adam.m):
        rec[f"adam.m.{k}"] = state.adam.m[k]
        rec[f"adam.v.{k}"] = state.adam.v[k]
    return rec


def checkpoint_bytes(state: TrainState) -> bytes:
    dtype = np.dtype(state.cfg.precision).newbyteorder("<")
    meta = {
        "train_config": state.cfg.to_dict(),
        "flow": state.model.config(),
        "actnorm_initialized": state.model.initialized,
        "label_probe": [state.label_probe.in_dim, state.label_probe.n_classes, state.label_probe.block],
        "sens_probe": [state.sens_probe.in_dim, state.sens_probe.n_classes, state.sens_probe.block],
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "history": state.history,
    }
    text = json.dumps(meta, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(text)), text]
    recs = _records(state)
    out.append(struct.pack("<I", len(recs)))
    for name, arr in recs.items():
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(out)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointFormatError("truncated checkpoint", self.off)
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def state_from_bytes(buf: bytes) -> TrainState:
    r = _Reader(buf)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 4)
    (length,) = r.unpack("<Q")
    start = r.off
    try:
        meta = json.loads(r.take(length).decode())
        cfg = TrainConfig.from_dict(meta["train_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad config text: {exc}", start) from None
    dtype = np.dtype(cfg.precision).newbyteorder("<")
    (count,) = r.unpack("<I")
    recs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        recs[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims).astype(cfg.precision)
    if r.off != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint", r.off)

    f = meta["flow"]
    model = FlowModel(f["dim"], f["n_blocks"], f["hidden"], f["depth"], f["clamp"],
                      LatentPartition(f["d_y"], f["d_s"]), seed=f["seed"], dtype=f["dtype"])
    lp = LinearProbe(*meta["label_probe"], dtype=cfg.precision)
    sp = LinearProbe(*meta["sens_probe"], dtype=cfg.precision)
    state = TrainState(cfg, model, lp, sp, epoch=meta["epoch"], history=meta["history"])
    try:
        for name, p in state.named_parameters().items():
            p.data = recs.pop(name)
        for i, block in enumerate(model.blocks):
            block.linear.perm = recs.pop(f"buffer.blocks.{i}.linear.perm")
            block.linear.sign = recs.pop(f"buffer.blocks.{i}.linear.sign")
    except KeyError as exc:
        raise CheckpointFormatError(f"missing tensor {exc}") from None
    model.set_initialized(meta["actnorm_initialized"])
    adam = AdamState(t=meta["adam_t"])
    for name in list(recs):
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = recs.pop(name)
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = recs.pop(name)
    if recs:
        raise CheckpointFormatError(f"unexpected tensors {sorted(recs)}")
    state.adam = adam
    return state


def load_checkpoint(path) -> TrainState:
    return state_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- ablations
# (name, De, L_dg, L_eq, L_di, L_g)
# each row adds one term to the one above
CUMULATIVE_ROWS = [
    ("+INN", False, False, False, False, False),
    ("+L_dg,eq", True, True, True, False, False),
    ("+L_di", True, True, True, True, False),
    ("+L_g", True, True, True, True, True),
]
# decomposition and fair-loss parts switched independently, L_g off
COMPONENT_ROWS = [
    ("-/-/-/-", False, False, False, False, False),
    ("-/dg/-/-", False, True, False, False, False),
    ("De/-/-/-", True, False, False, False, False),
    ("De/dg/-/-", True, True, False, False, False),
    ("De/dg/eq/-", True, True, True, False, False),
    ("De/-/-/di", True, False, False, True, False),
    ("De/dg/-/di", True, True, False, True, False),
    ("De/dg/eq/di", True, True, True, True, False),
]


def ablation_grid(dataset: EmbeddingDataset, base_cfg: TrainConfig, grid: str = "cumulative",
                  seeds=None, split: str = "test") -> list[dict]:
    """Train one model per grid row (and seed) and report the label probe on ``split``."""
    rows = {"cumulative": CUMULATIVE_ROWS, "component": COMPONENT_ROWS}[grid]
    seeds = [base_cfg.seed] if seeds is None else list(seeds)
    out = []
    for name, de, dg, eq, di, g in rows:
        for seed in seeds:
            cfg = copy.deepcopy(base_cfg)
            cfg.seed = seed
            cfg.flags = AblationFlags(use_dg=dg, use_eq=eq, use_di=di, use_g=g,
                                      use_cls=base_cfg.flags.use_cls, use_decompose=de)
            result = train(dataset, cfg)
            rep = evaluate(result.state, dataset, split)["label"]
            out.append({"row": name, "seed": seed, "flags": cfg.flags.to_dict(), "report": rep,
                        "state": result.state})
    return out

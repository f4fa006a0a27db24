"""Command-line entry point: ``fairlatent {synth,train,eval,counterfact,diag}``.

Exit codes: 0 success, 1 numeric failure (divergence or failed check),
2 usage or configuration error, 3 malformed input file.
"""

from __future__ import annotations

import os

# BLAS threads must be capped before numpy loads; one thread keeps runs bit-reproducible.
_THREADS = os.environ.get("FAIRLATENT_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .counterfactual import (
    DEFAULT_ALPHAS,
    attribute_judge,
    direction_from_probe,
    generative_shift_ratio,
    misclassification_vs_shift,
    to_csv,
    trajectory,
)
from .data import ConfigError, FormatError, SynthConfig, generate_synthetic, load_dataset, read_csv, save_dataset
from .diagnostics import (
    i_nce,
    ib_estimate,
    jensen_gap,
    norm_concentration,
    random_psd,
    thm2_monotonicity,
)
from .losses import AblationFlags, FairLossConfig, total_loss
from .trainer import (
    CheckpointFormatError,
    TrainConfig,
    TrainingDiverged,
    build_state,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("fairlatent")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3
CHECKS = ("gradcheck", "jensen", "nce", "ib", "norm")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------- run config
_SECTIONS = {"synth", "train", "partition", "outputs"}


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def load_run_config(path) -> dict:
    """Parse a JSON run config and reject keys the library does not know."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys("top level", raw, _SECTIONS)
    _check_keys("synth", raw.get("synth", {}), [f.name for f in fields(SynthConfig)])
    tr = raw.get("train", {})
    _check_keys("train", tr, [f.name for f in fields(TrainConfig)])
    _check_keys("train.loss", tr.get("loss", {}), [f.name for f in fields(FairLossConfig)])
    _check_keys("train.flags", tr.get("flags", {}), [f.name for f in fields(AblationFlags)])
    _check_keys("partition", raw.get("partition", {}), ["d_y", "d_s"])
    _check_keys("outputs", raw.get("outputs", {}), ["dir"])
    return raw


def _write_config(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _load_data(path: str):
    if path is None:
        raise UsageError("--data is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return read_csv(p) if p.suffix.lower() == ".csv" else load_dataset(p)


def _load_ckpt(path: str):
    if path is None:
        raise UsageError("--ckpt is required")
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return load_checkpoint(path)


def _alphas(text: str | None) -> list[float]:
    if text is None:
        return list(DEFAULT_ALPHAS)
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"bad --alpha-grid {text!r}") from None


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    base = load_run_config(args.config).get("synth", {}) if args.config else {}
    cfg = SynthConfig(**base)
    for name in ("n", "d", "rho", "sigma", "seed", "label_signal", "attr_signal", "attr_count", "map_seed"):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _write_config(out.with_name(out.name + ".config.json"), {"synth": asdict(cfg)})
    print(f"n={ds.n}")
    print(f"d={ds.d}")
    for k in range(ds.attr_count):
        r = np.corrcoef(ds.y.astype(float), ds.s[:, k].astype(float))[0, 1]
        print(f"corr_y_s{k}={r:.4f}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    raw = load_run_config(args.config) if args.config else {}
    tr = dict(raw.get("train", {}))
    tr.update(raw.get("partition", {}))
    base = TrainConfig.small if args.profile == "small" else TrainConfig
    cfg = base(**tr)
    if args.ablation:
        cfg.flags = AblationFlags.preset(args.ablation)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    for name in ("d_y", "d_s"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.__post_init__()
    return cfg


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    cfg = _train_config(args)
    cfg.partition(ds.d).validate(ds.d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.json", {"train": cfg.to_dict(), "data": str(args.data)})
    status = EXIT_OK
    try:
        state = train(ds, cfg).state
    except TrainingDiverged as exc:
        log.error("%s", exc)
        state = exc.last_good
        status = EXIT_NUMERIC
    save_checkpoint(state, out / "checkpoint.flck")
    if state.history:
        header = sorted({k for row in state.history for k in row}, key=lambda k: (k != "epoch", k))
        rows = [[row.get(k, float("nan")) for k in header] for row in state.history]
        (out / "log.csv").write_text(to_csv(header, [[float(v) if k != "epoch" else int(v)
                                                      for k, v in zip(header, r)] for r in rows]))
        last = state.history[-1]
        print(" ".join(f"{k}={last[k]:.4f}" for k in ("eo", "dp", "wga", "acc")))
    return status


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    state = _load_ckpt(args.ckpt)
    if ds.d != state.model.dim:
        raise ConfigError(f"dataset width {ds.d} does not match checkpoint width {state.model.dim}")
    reps = evaluate(state, ds, args.split)
    text = reps["label"].to_text("label.") + "\n" + reps["sensitive"].to_text("sensitive.") + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_counterfact(args) -> int:
    ds = _load_data(args.data)
    state = _load_ckpt(args.ckpt)
    model = state.model
    alphas = _alphas(args.alpha_grid)
    probe = state.label_probe if args.dir == "label" else state.sens_probe
    direction = direction_from_probe(probe, model.dim, model.partition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "config.json", {"counterfact": {k: v for k, v in vars(args).items() if k != "func"}})
    idx = ds.indices(args.split)
    e = ds.e[idx].astype(np.float64)
    if args.mode == "trajectory":
        sel = idx[: args.n_points]
        tr = trajectory(model, ds.e[sel].astype(np.float64), direction, alphas, state.probes)
        tr.export(out / "trajectory.fle", out / "trajectory.csv", ds.y[sel], ds.s[sel])
        sys.stdout.write((out / "trajectory.csv").read_text())
        return EXIT_OK
    judge = attribute_judge(ds, args.attr)
    if args.mode == "figure4-left":
        rows = misclassification_vs_shift(model, e, ds.s[idx, args.attr], direction, judge, alphas)
        text = to_csv(["alpha", "misclassification"], rows)
        (out / "figure4_left.csv").write_text(text)
        sys.stdout.write(text)
        return EXIT_OK
    rows, (slope, intercept, se) = generative_shift_ratio(model, direction, alphas, args.n_samples, judge,
                                                          seed=args.seed)
    text = to_csv(["alpha", "proportion"], rows)
    fit = to_csv(["slope", "intercept", "se"], [(slope, intercept, se)])
    (out / "figure4_right.csv").write_text(text)
    (out / "figure4_right_fit.csv").write_text(fit)
    sys.stdout.write(text)
    print(f"slope={slope:.6g} se={se:.6g}")
    return EXIT_OK


def _gradcheck(args) -> tuple[float, float, bool]:
    if args.ckpt:
        state = _load_ckpt(args.ckpt)
        state = copy.deepcopy(state)
        state.cfg.precision = "float64"
        state.model.astype(np.float64)
        for p in state.named_parameters().values():
            p.data = p.data.astype(np.float64)
    else:
        ds0 = _load_data(args.data) if args.data else generate_synthetic(SynthConfig(n=64, d=8))
        cfg = TrainConfig(n_blocks=2, hidden=16, d_y=ds0.d // 2, d_s=ds0.d - ds0.d // 2, seed=args.seed)
        state = build_state(ds0, cfg)
    ds = _load_data(args.data) if args.data else generate_synthetic(SynthConfig(n=64, d=state.model.dim))
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(ds.n, size=min(8, ds.n), replace=False)
    e = ds.e[idx].astype(np.float64)
    if not state.model.initialized:
        state.model.init_actnorm(ds.e[rng.choice(ds.n, size=min(64, ds.n), replace=False)].astype(np.float64))
    # lift the zero-initialised pieces so every term has a nonzero gradient path
    for p in state.named_parameters().values():
        if not np.any(p.data):
            p.data = 0.05 * rng.standard_normal(p.data.shape)
    params = state.named_parameters()
    err = ad.grad_check_params(
        lambda: total_loss(state.model, state.probes, e, ds.y[idx], ds.group[idx], state.cfg.loss, state.cfg.flags)[0],
        params,
    )
    return err, 1e-4, err < 1e-4


def _jensen(args) -> tuple[float, float, bool]:
    rng = np.random.default_rng(args.seed)
    worst = min(jensen_gap(random_psd(int(rng.integers(2, 9)), rng))[2] for _ in range(1000))
    return worst, 0.0, worst >= 0


def _nce(args) -> tuple[float, float, bool]:
    rows = thm2_monotonicity(1.0, K=32)
    vals = [r[2] for r in rows]
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    rng = np.random.default_rng(args.seed)
    excess = max(i_nce(*rng.standard_normal((2, 32, 8)) * 3) - math.log(32) for _ in range(200))
    excess = max(excess, max(v - math.log(32) for v in vals))
    return excess, 0.0, decreasing and excess <= 1e-12


def _latent_y(args):
    state = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    idx = ds.indices(args.split)
    z = state.model.encode(ds.e[idx].astype(state.model.dtype)).astype(np.float64)
    return state, ds, idx, state.latent_blocks(z)[0]


def _ib(args) -> tuple[float, float, bool]:
    _, ds, idx, zy = _latent_y(args)
    val = ib_estimate(zy, ds.y[idx], args.lam)
    return val, 0.0, bool(np.isfinite(val)) and val < 0


def _norm(args) -> tuple[float, float, bool]:
    state, _, _, zy = _latent_y(args)
    _, _, dev = norm_concentration(zy, state.cfg.loss.c)
    return dev, 0.2, dev < 0.2


def cmd_diag(args) -> int:
    fn = {"gradcheck": _gradcheck, "jensen": _jensen, "nce": _nce, "ib": _ib, "norm": _norm}[args.check]
    value, threshold, ok = fn(args)
    print(f"{args.check} {'PASS' if ok else 'FAIL'} value={value:.6g} threshold={threshold:.6g}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairlatent", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic biased embedding dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-signal", dest="label_signal", type=float)
    p.add_argument("--attr-signal", dest="attr_signal", type=float)
    p.add_argument("--attrs", dest="attr_count", type=int)
    p.add_argument("--map-seed", dest="map_seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train flow and probes")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=AblationFlags.PRESETS)
    p.add_argument("--profile", choices=("small", "full"), default="small")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--d-y", dest="d_y", type=int)
    p.add_argument("--d-s", dest="d_s", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fairness report of both probes")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("counterfact", help="latent shifts along probe directions")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--dir", choices=("label", "sensitive"), default="label")
    p.add_argument("--alpha-grid", dest="alpha_grid")
    p.add_argument("--mode", choices=("trajectory", "figure4-left", "figure4-right"), default="trajectory")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=1000)
    p.add_argument("--n-points", dest="n_points", type=int, default=8)
    p.add_argument("--attr", type=int, default=0, help="sensitive attribute judged by figure4 modes")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterfact)

    p = sub.add_parser("diag", help="numerical checks")
    p.add_argument("--check", choices=CHECKS, required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fairlatent: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointFormatError) as exc:
        print(f"fairlatent: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"fairlatent: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ad.NonFiniteError, FloatingPointError) as exc:
        print(f"fairlatent: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

import math

import numpy as np
import pytest

from fairlatent import autodiff as ad
from fairlatent.autodiff import Tensor, grad_check
from fairlatent.flow import FlowModel, LatentPartition
from fairlatent.losses import (
    AblationFlags,
    FairLossConfig,
    InsufficientBatchError,
    bounded_distance,
    covariance,
    diag_loss,
    distance_loss,
    eq_loss,
    fair_loss,
    nll_loss,
    probe_ce,
    total_loss,
)
from fairlatent.probe import LinearProbe

from .conftest import perturb

LOG_1E4 = math.log(1e4)


def test_covariance_examples():
    np.testing.assert_array_equal(covariance(np.ones((2, 3))).data, np.zeros((3, 3)))
    np.testing.assert_array_equal(covariance(np.array([[1.0, 1.0], [-1.0, -1.0]])).data, np.ones((2, 2)))
    np.testing.assert_array_equal(covariance(np.array([[2.0], [4.0]])).data, [[1.0]])


def test_covariance_matches_numpy_population():
    Z = np.random.default_rng(0).standard_normal((40, 5))
    np.testing.assert_allclose(covariance(Z).data, np.cov(Z.T, bias=True), atol=1e-13)


def test_covariance_needs_two_rows():
    with pytest.raises(InsufficientBatchError):
        covariance(np.ones((1, 3)))


def test_diag_loss_examples():
    assert diag_loss(np.diag([1.0, 2.0, 3.0])).item() == 0.0
    assert diag_loss(np.array([[1.0, 0.5], [0.5, 1.0]])).item() == 0.25
    assert diag_loss(np.array([[3.0]])).item() == 0.0


def test_eq_loss_examples():
    Z = np.array([[1.0, -1.0], [-1.0, 1.0]])  # unit variance per column
    assert eq_loss(Z, 1.0, 1e-4).item() == 0.0
    const = np.column_stack([np.full(4, 2.0)])
    assert eq_loss(const, 1.0, 1e-4).item() == pytest.approx(0.99, abs=1e-15)
    half = np.array([[0.5], [-0.5]])  # variance 0.25
    assert eq_loss(half, 1.0, 1e-4).item() == pytest.approx(1 - math.sqrt(0.2501), abs=1e-15)


def test_bounded_distance_examples():
    u = Tensor(np.zeros(3))
    assert bounded_distance(u, u, 1e-4).item() == pytest.approx(LOG_1E4, abs=1e-12)
    far = Tensor(np.array([1e4, 0.0]))
    assert 0 < bounded_distance(far, Tensor(np.zeros(2)), 1e-4).item() < 1e-7
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 10, 4))
    np.testing.assert_allclose(bounded_distance(a, b, 1.0).data, 0.0, atol=1e-15)


def test_distance_loss_empty_masks():
    Z = np.random.default_rng(2).standard_normal((4, 3))
    assert distance_loss(Z, np.zeros(4), np.zeros(4)).item() == 0.0


def test_distance_loss_pull_and_push():
    Z = np.zeros((2, 2))
    assert distance_loss(Z, [1, 1], [0, 1], 1e-4).item() == pytest.approx(-LOG_1E4, abs=1e-12)
    assert distance_loss(Z, [0, 1], [1, 1], 1e-4).item() == pytest.approx(LOG_1E4, abs=1e-12)


def test_distance_loss_role_swap():
    Z = np.random.default_rng(3).standard_normal((6, 2))
    y = np.array([0, 0, 1, 1, 0, 1])
    s = np.array([0, 1, 0, 1, 1, 1])
    a = distance_loss(Z, y, s, target_role="s").item()
    b = distance_loss(Z, s, y, target_role="y").item()
    assert a == b


def _pair_oracle(Z, y, s, eps):
    """Loop-based reference for the distance loss."""
    pull, push = [], []
    for i in range(len(Z)):
        for j in range(len(Z)):
            d2 = float(np.sum((Z[i] - Z[j]) ** 2))
            D = math.log((d2 + 1) / (d2 + eps))
            if y[i] == y[j] and s[i] != s[j]:
                pull.append(D)
            elif s[i] == s[j] and y[i] != y[j]:
                push.append(D)
    return (np.mean(push) if push else 0.0) - (np.mean(pull) if pull else 0.0)


def test_fair_loss_is_sum_of_components():
    Z = np.array([[0.3, -1.0, 2.0], [1.5, 0.2, -0.4], [-0.7, 0.9, 0.1], [0.0, -0.3, 1.1]])
    y = np.array([0, 0, 1, 1])
    s = np.array([0, 1, 0, 1])
    cfg = FairLossConfig(lambda_dg=1, lambda_eq=10, lambda_di=1)
    C = np.cov(Z.T, bias=True)
    dg = np.sum((C - np.diag(np.diag(C))) ** 2) / 3
    eq = np.mean(np.maximum(0, 1 - np.sqrt(np.diag(C) + 1e-4)))
    di = _pair_oracle(Z, y, s, 1e-4)
    assert fair_loss(Z, y, s, cfg).item() == pytest.approx(dg + 10 * eq + di, abs=1e-12)


def test_fair_loss_zero_weights():
    Z = np.random.default_rng(4).standard_normal((5, 2))
    cfg = FairLossConfig(0, 0, 0)
    assert fair_loss(Z, np.arange(5) % 2, np.arange(5) // 3, cfg).item() == 0.0


def test_nll_examples():
    m = FlowModel(2, 1, 4, identity=True)
    assert nll_loss(m, np.zeros((1, 2))).item() == 0.0
    assert nll_loss(m, np.ones((1, 2))).item() == 1.0
    m.blocks[0].actnorm.log_scale.data = np.array([math.log(2.0), 0.0])
    assert nll_loss(m, np.array([[1.0, 0.0]])).item() == pytest.approx(2 - math.log(2), abs=1e-15)


def test_nll_literal_flag_differs():
    m = FlowModel(2, 1, 4, identity=True)
    e = np.ones((1, 2))
    assert nll_loss(m, e, literal=True).item() == -2.0


def test_probe_ce_examples():
    Z = np.random.default_rng(5).standard_normal((4, 3))
    assert probe_ce(np.zeros((2, 3)), np.zeros(2), Z, [0, 1, 0, 1]).item() == pytest.approx(math.log(2))
    W = np.array([[0.0], [40.0]])
    b = np.array([0.0, -20.0])
    Zs = np.array([[0.0], [1.0]])  # logit margins -20 and +20
    assert probe_ce(W, b, Zs, [0, 1]).item() < 1e-8


def _setup(seed, width=2):
    rng = np.random.default_rng(seed)
    model = FlowModel(4, 2, 8, partition=LatentPartition(2, 2), seed=seed)
    perturb(model, rng, 0.2)
    probes = [
        LinearProbe(width, 2, block, weight=rng.standard_normal((2, width)) * 0.3, bias=rng.standard_normal(2) * 0.1)
        for block in ("y", "s")
    ]
    e = rng.standard_normal((8, 4))
    y = np.array([0, 1] * 4)
    s = np.array([0, 0, 1, 1] * 2)
    return model, tuple(probes), e, y, s


def test_total_loss_only_nll_on_identity_zero_batch():
    model = FlowModel(4, 2, 8, partition=LatentPartition(2, 2), identity=True)
    flags = AblationFlags(False, False, False, True, False, True)
    lp, sp = LinearProbe(2, 2, "y"), LinearProbe(2, 2, "s")
    loss, parts = total_loss(model, (lp, sp), np.zeros((4, 4)), [0, 1, 0, 1], [0, 0, 1, 1], FairLossConfig(), flags)
    assert loss.item() == 0.0 and set(parts) == {"nll", "total"}


def test_total_loss_parts_sum():
    model, probes, e, y, s = _setup(0)
    loss, parts = total_loss(model, probes, e, y, s, FairLossConfig())
    assert loss.item() == pytest.approx(sum(v for k, v in parts.items() if k != "total"), abs=1e-12)
    assert {"dg_y", "eq_y", "di_y", "dg_s", "eq_s", "di_s", "nll", "cls"} <= set(parts)


def test_total_loss_gradient_wrt_all_parameters():
    model, probes, e, y, s = _setup(1)
    params = dict(model.parameters())
    for i, p in enumerate(probes):
        params.update({f"p{i}.{k}": v for k, v in p.parameters().items()})
    err = ad.grad_check_params(lambda: total_loss(model, probes, e, y, s, FairLossConfig())[0], params)
    assert err < 1e-4


def test_inn_preset_has_no_fair_terms():
    model, probes, e, y, s = _setup(2, width=4)
    _, parts = total_loss(model, probes, e, y, s, FairLossConfig(), AblationFlags.preset("inn"))
    assert set(parts) == {"cls", "total"}


def test_unknown_preset():
    with pytest.raises(ValueError):
        AblationFlags.preset("nope")


@pytest.mark.parametrize("bad", [dict(lambda_dg=-1), dict(c=0), dict(eps_eq=0), dict(eps_d=1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        FairLossConfig(**bad)


@pytest.mark.parametrize("which", ["dg", "eq", "di"])
def test_component_gradients(which):
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 6)
    s = rng.integers(0, 2, 6)
    fn = {
        "dg": lambda Z: diag_loss(covariance(Z)),
        "eq": lambda Z: eq_loss(Z, 2.0, 1e-4),
        "di": lambda Z: distance_loss(Z, y, s, 1e-4),
    }[which]
    assert grad_check(fn, rng.standard_normal((6, 3))) < 1e-6

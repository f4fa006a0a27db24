import math

import numpy as np
import pytest

from fairlatent.counterfactual import (
    DegenerateProbeError,
    Direction,
    direction_from_probe,
    generative_shift_ratio,
    linfit,
    misclassification_vs_shift,
    shift,
    trajectory,
)
from fairlatent.data import load_dataset
from fairlatent.flow import FlowModel, LatentPartition
from fairlatent.probe import LinearProbe


def test_direction_normalises():
    d = direction_from_probe([3.0, 4.0])
    np.testing.assert_allclose(d.vector, [0.6, 0.8], rtol=0, atol=1e-15)


def test_unit_direction_unchanged():
    v = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(direction_from_probe(v).vector, v)


def test_zero_direction_rejected():
    with pytest.raises(DegenerateProbeError):
        direction_from_probe([0.0, 0.0])


def test_block_probe_embeds_in_full_coordinates():
    probe = LinearProbe(2, 2, "y", weight=np.array([[0.0, 0.0], [3.0, 4.0]]))
    d = direction_from_probe(probe, dim=4, partition=LatentPartition(2, 2))
    np.testing.assert_allclose(d.vector, [0.6, 0.8, 0.0, 0.0], atol=1e-15)
    assert d.block == "y"


def test_shift_examples():
    z = np.random.default_rng(0).standard_normal((3, 4))
    d = Direction(np.eye(4)[0])
    np.testing.assert_array_equal(shift(z, d, 0.0), z)
    np.testing.assert_array_equal(shift(np.zeros(4), d, 3.0), [3.0, 0, 0, 0])
    out = shift(z, Direction(np.array([0, 0, 0.6, 0.8])), 2.0)
    np.testing.assert_array_equal(out[:, :2], z[:, :2])


def _flow():
    from .conftest import perturb

    return perturb(FlowModel(4, 3, 16, partition=LatentPartition(2, 2), seed=3), np.random.default_rng(4), 0.1)


def test_alpha_zero_trajectory_is_round_trip():
    m = _flow()
    e = np.random.default_rng(5).standard_normal((6, 4))
    tr = trajectory(m, e, Direction(np.eye(4)[1]), alphas=[0.0])
    assert len(tr.points) == 1
    assert np.max(np.abs(tr.points[0].e - e)) < 1e-10


def test_trajectory_finite_over_wide_range():
    m = _flow()
    e = np.random.default_rng(6).standard_normal((10, 4))
    tr = trajectory(m, e, Direction(np.eye(4)[0]), alphas=np.linspace(-6, 6, 13))
    assert np.isfinite(tr.embeddings()).all()


def test_trajectory_scores_move_with_label_probe():
    m = _flow()
    part = m.partition
    lp = LinearProbe(2, 2, "y", weight=np.array([[0.0, 0.0], [1.0, 0.0]]))
    sp = LinearProbe(2, 2, "s", weight=np.array([[0.0, 0.0], [0.0, 1.0]]))
    d = direction_from_probe(lp, dim=4, partition=part)
    e = np.random.default_rng(7).standard_normal((2, 4))
    tr = trajectory(m, e, d, alphas=[-1.0, 0.0, 1.0], probes=(lp, sp))
    rows = tr.table()
    lab = {(a, i): ls for a, i, ls, _ in rows}
    sen = {(a, i): ss for a, i, _, ss in rows}
    assert lab[(1.0, 0)] - lab[(0.0, 0)] == pytest.approx(1.0, abs=1e-12)
    # the sensitive block is untouched by a label-block shift
    assert sen[(1.0, 0)] == pytest.approx(sen[(-1.0, 0)], abs=1e-12)


def test_export_writes_dataset_and_table(tmp_path):
    m = _flow()
    e = np.random.default_rng(8).standard_normal((3, 4))
    tr = trajectory(m, e, Direction(np.eye(4)[0]), alphas=[-1.0, 1.0])
    tr.export(tmp_path / "cf.fle", tmp_path / "cf.csv")
    ds = load_dataset(tmp_path / "cf.fle")
    assert ds.n == 6 and (ds.split == 2).all()
    lines = (tmp_path / "cf.csv").read_text().splitlines()
    assert lines[0] == "alpha,sample,label_score,sensitive_score" and len(lines) == 7


def test_misclassification_with_perfect_judge():
    m = FlowModel(2, 1, 4, identity=True)
    e = np.array([[-1.0, 0.0], [1.0, 0.0], [-2.0, 0.0], [2.0, 0.0]])
    s = np.array([0, 1, 0, 1])
    rows = misclassification_vs_shift(m, e, s, Direction(np.array([1.0, 0.0])),
                                      lambda x: (x[:, 0] > 0).astype(int), alphas=[0.0, 1.5, 3.0])
    assert rows == [(0.0, 0.0), (1.5, 0.25), (3.0, 0.5)]


def test_generative_shift_orthogonal_direction_has_flat_slope():
    m = FlowModel(4, 1, 4, identity=True)
    judge = lambda x: (x[:, 0] > 0).astype(int)
    rows, (slope, _, se) = generative_shift_ratio(m, Direction(np.eye(4)[3]), np.arange(-3, 4.0), 1000, judge, seed=1)
    assert abs(slope) < 2 * se
    assert all(0.4 < p < 0.6 for _, p in rows)


def test_generative_shift_aligned_direction_has_slope():
    m = FlowModel(4, 1, 4, identity=True)
    judge = lambda x: (x[:, 0] > 0).astype(int)
    rows, (slope, _, _) = generative_shift_ratio(m, Direction(np.eye(4)[0]), [-1.0, 0.0, 1.0], 4000, judge, seed=2)
    # proportion = Phi(alpha); slope across [-1, 1] is (Phi(1) - Phi(-1)) / 2 in points
    expected = 100 * math.erf(1 / math.sqrt(2)) / 2
    assert slope == pytest.approx(expected, abs=3.0)


def test_linfit_examples():
    slope, intercept, _ = linfit([(0, 0), (1, 2), (2, 4)])
    assert (slope, intercept) == pytest.approx((2.0, 0.0), abs=1e-12)
    assert linfit([(0, 5), (1, 5), (3, 5)])[0] == 0.0
    assert math.isnan(linfit([(0, 0), (1, 1)])[2])
    with pytest.raises(ValueError):
        linfit([(1, 1)])


def test_linfit_matches_numpy_polyfit():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(30)
    y = 1.7 * x - 0.4 + rng.standard_normal(30) * 0.1
    slope, intercept, _ = linfit(np.column_stack([x, y]))
    np.testing.assert_allclose([slope, intercept], np.polyfit(x, y, 1), rtol=1e-12)

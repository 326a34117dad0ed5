import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvaeh import hypernet_gauss as hg
from cvaeh import prob
from cvaeh.evalbench import metrics as m

T = 20


def _line(dx, dy=0.0):
    t = np.arange(1, T + 1)[:, None] * np.array([dx, dy])
    return t.astype(np.float64)


def test_minmsd_single_offset_sample():
    gt = np.zeros((T, 2))
    s = gt + np.array([1.0, 0.0])
    assert m.minmsd(s[None], gt) == pytest.approx(1.0)


def test_minmsd_picks_best_of_two():
    gt = np.zeros((T, 2))
    s = np.stack([gt + [3.0, 0.0], gt + [0.0, 0.5]])
    assert m.minmsd(s, gt) == pytest.approx(0.25)


def test_ade_and_fde_hand_computed():
    gt = _line(1.0)
    s = gt.copy()
    s[-1] += [3.0, 4.0]
    assert m.min_fde(s[None], gt) == pytest.approx(5.0)
    assert m.min_ade(s[None], gt) == pytest.approx(5.0 / T)


def test_minmsd_zero_iff_exact_sample_present():
    gt = _line(0.7, -0.2)
    s = np.stack([gt + 0.1, gt, gt - 2.0])
    assert m.minmsd(s, gt) == 0.0
    assert m.minmsd(s[[0, 2]], gt) > 0.0


def test_shape_mismatch_and_empty_raise():
    with pytest.raises(m.MetricError):
        m.minmsd(np.zeros((3, 19, 2)), np.zeros((20, 2)))
    with pytest.raises(m.MetricError):
        m.minmsd(np.zeros((0, 20, 2)), np.zeros((20, 2)))
    with pytest.raises(m.MetricError):
        m.nested_minmsd(np.zeros((3, 20, 2)), np.zeros((20, 2)), [1, 12])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (12, T, 2), elements=st.floats(-50, 50)),
       arrays(np.float64, (T, 2), elements=st.floats(-50, 50)))
def test_nested_minmsd_non_increasing(samples, gt):
    ks = [1, 2, 4, 8, 12]
    vals = m.nested_minmsd(samples, gt, ks)
    seq = [vals[k] for k in ks]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    assert all(v >= 0 for v in seq)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, T, 2), elements=st.floats(-20, 20)), st.integers(0, 4))
def test_minmsd_zero_when_gt_among_samples(samples, j):
    assert m.minmsd(samples, samples[j]) == 0.0


def test_aggregate_per_agent_slots():
    rep = m.aggregate_minmsd(1, [1.0, 3.0, 5.0], [0, 0, 2])
    assert rep.per_agent[0] == 2.0 and rep.per_agent[2] == 5.0
    assert np.isnan(rep.per_agent[1])
    assert rep.mean == 3.0


# -- coverage ------------------------------------------------------------------

def _to(end):
    return np.linspace([0.0, 0.0], end, T)


def test_coverage_all_three_modes():
    center = np.array([10.0, 0.0])
    samples = np.stack([_to([30.0, 0.0]), _to([10.0, 15.0]), _to([10.0, -15.0])])
    rep = m.mode_coverage(samples, center, ("straight", "left", "right"))
    assert rep.coverage == 1.0


def test_coverage_only_straight():
    center = np.array([10.0, 0.0])
    samples = np.stack([_to([30.0, 1.0])] * 10)
    rep = m.mode_coverage(samples, center, ("straight", "left", "right"))
    assert rep.coverage == pytest.approx(1 / 3)
    assert rep.hit == ("straight",)


def test_generator_modes_follow_probabilities():
    assert m.generator_modes("four-way", (0.4, 0.3, 0.3, 0.0)) == ("straight", "left", "right")
    assert m.generator_modes("four-way", (0.3, 0.3, 0.2, 0.2)) == ("straight", "left", "right", "yield")
    with pytest.raises(m.MetricError):
        m.generator_modes("cruise")


# -- mode counting ------------------------------------------------------------------

@pytest.mark.parametrize("cond,expected", [(0.0, 4), (1.0, 25), (2.0, 100)])
def test_mode_count_on_ground_truth_samples(cond, expected):
    target = hg.gaussian1_targets()[cond]
    x = prob.gmm_sample(target, np.random.default_rng(0), 10_000)
    assert m.count_modes(prob.histogram_density(x)) == expected


@pytest.mark.parametrize("expected", [4, 25, 100])
def test_mode_count_on_exact_cell_masses(expected):
    cond = {4: 0.0, 25: 1.0, 100: 2.0}[expected]
    grid = prob.gmm_cell_masses(hg.gaussian1_targets()[cond])
    assert m.count_modes(grid) == expected


def test_single_gaussian_has_one_mode():
    x = np.random.default_rng(1).normal(size=(10_000, 2))
    assert m.count_modes(prob.histogram_density(x)) == 1


def test_final_displacement():
    s = np.stack([_to([3.0, 4.0]), _to([0.0, 0.0])])
    np.testing.assert_allclose(m.final_displacement(s), [5.0, 0.0])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radioslam.core import NodeId, Pose2, compose
from radioslam.pdr import (
    DegenerateWindow,
    PdrConfig,
    StepDetectorState,
    autocorrelation,
    count_steps,
    dead_reckon,
    odometry_edges,
)

RATE = 50.0


def gait(seconds: float, freq: float = 2.0, rate: float = RATE, t0: float = 0.0, amp: float = 2.0, offset: float = 9.81):
    n = int(round(seconds * rate))
    t = t0 + np.arange(n) / rate
    return list(zip(t.tolist(), (offset + amp * np.sin(2 * np.pi * freq * (t - t0))).tolist()))


def final_count(samples, cfg=None):
    out = count_steps(samples, cfg or PdrConfig())
    return out[-1][1] if out else 0


# --- autocorrelation


def test_sine_autocorrelation_at_period_and_half_period():
    # 1 Hz at 50 Hz: period 50 samples
    a = np.sin(2 * np.pi * np.arange(400) / 50.0)
    assert autocorrelation(a, 0, 50) >= 0.99
    assert autocorrelation(a, 7, 25) <= -0.99


def test_white_noise_autocorrelation_is_small():
    a = np.random.default_rng(1234).standard_normal(1000)
    for tau in (100, 250, 500):
        assert abs(autocorrelation(a, 0, tau)) < 0.2


def test_constant_window_is_degenerate():
    with pytest.raises(DegenerateWindow):
        autocorrelation(np.full(200, 9.81), 0, 50)


def test_window_must_fit():
    with pytest.raises(ValueError):
        autocorrelation(np.zeros(10), 0, 6)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60))
def test_autocorrelation_symmetric_in_windows(seed, tau):
    a = np.random.default_rng(seed).standard_normal(2 * tau)
    swapped = np.concatenate([a[tau:], a[:tau]])
    r = autocorrelation(a, 0, tau)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(autocorrelation(swapped, 0, tau), abs=1e-12)


# --- step counting


def test_two_hz_gait_counts_sixty_steps():
    assert abs(final_count(gait(30.0)) - 60) <= 2


def test_constant_signal_counts_nothing():
    samples = [(k / RATE, 9.81) for k in range(1500)]
    assert final_count(samples) == 0


def test_walk_stand_walk():
    walk1 = gait(10.0)
    stand = [(10.0 + k / RATE, 9.81) for k in range(500)]
    walk2 = gait(10.0, t0=20.0)
    assert abs(final_count(walk1 + stand + walk2) - 40) <= 3


def test_noisy_gait_is_still_counted():
    rng = np.random.default_rng(7)
    samples = [(t, a + 0.2 * rng.standard_normal()) for t, a in gait(30.0)]
    assert abs(final_count(samples) - 60) <= 2


def test_short_input_yields_no_counts():
    assert count_steps(gait(1.0), PdrConfig()) == []
    assert count_steps([], PdrConfig()) == []


@settings(max_examples=20, deadline=None)
@given(st.floats(1.6, 2.4), st.integers(0, 2**31 - 1))
def test_cumulative_count_is_monotone(freq, seed):
    rng = np.random.default_rng(seed)
    samples = [(t, a + 0.3 * rng.standard_normal()) for t, a in gait(8.0, freq)]
    counts = [c for _, c in count_steps(samples, PdrConfig())]
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_locked_lag_stays_in_window():
    st_ = StepDetectorState(window=(40, 100), sample_rate=50.0, tau_opt=45)
    lags = st_.search_range(10)
    assert min(lags) >= 40 and max(lags) <= 100
    assert 45 in lags


def test_config_validation():
    with pytest.raises(ValueError):
        PdrConfig(step_length=0.0)
    with pytest.raises(ValueError):
        PdrConfig(tau_window=(1, 10))
    with pytest.raises(ValueError):
        PdrConfig(tau_window=(40, 40))


# --- dead reckoning


def test_straight_line():
    out = dead_reckon([(1.0, 10)], [(0.0, 0.0)], PdrConfig(step_length=0.7))
    p = out[-1][1]
    assert (p.x, p.y, p.theta) == pytest.approx((7.0, 0.0, 0.0))


def test_right_angle():
    out = dead_reckon([(1.0, 10), (2.0, 20)], [(0.0, 0.0), (1.0, math.pi / 2)], PdrConfig())
    p = out[-1][1]
    assert (p.x, p.y, p.theta) == pytest.approx((7.0, 7.0, math.pi / 2))


def test_compass_zero_order_hold():
    # the reading at 1.5 s is not used for the event at 1.4 s
    out = dead_reckon([(1.4, 1), (2.0, 2)], [(0.0, 0.0), (1.5, 1.0)], PdrConfig())
    assert out[1][1].theta == 0.0
    assert out[2][1].theta == 1.0


def test_decreasing_counter_rejected():
    with pytest.raises(ValueError):
        dead_reckon([(1.0, 5), (2.0, 3)], [(0.0, 0.0)], PdrConfig())


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_dead_reckon_matches_summation_oracle(seed, n):
    rng = np.random.default_rng(seed)
    cfg = PdrConfig(step_length=0.7)
    headings = rng.uniform(-math.pi, math.pi, n)
    incs = rng.integers(0, 4, n)
    compass = [(float(k), float(h)) for k, h in enumerate(headings)]
    steps = [(float(k + 1), int(c)) for k, c in enumerate(np.cumsum(incs))]
    out = dead_reckon(steps, compass, cfg)
    x = sum(0.7 * int(incs[k]) * math.cos(headings[k]) for k in range(n))
    y = sum(0.7 * int(incs[k]) * math.sin(headings[k]) for k in range(n))
    p = out[-1][1]
    assert len(out) == len(steps) + 1
    assert (p.x, p.y) == pytest.approx((x, y), abs=1e-9)
    path = sum(math.hypot(b.x - a.x, b.y - a.y) for (_, a), (_, b) in zip(out, out[1:]))
    assert path == pytest.approx(0.7 * int(incs.sum()), abs=1e-9)


# --- odometry edges


def test_odometry_edge_examples():
    (ids, z), = odometry_edges([Pose2(0, 0, 0), Pose2(1, 0, 0)])
    assert ids == (NodeId(0, 0), NodeId(0, 1))
    assert (z.dx, z.dy, z.dtheta) == (1.0, 0.0, 0.0)
    (_, z), = odometry_edges([Pose2(0, 0, math.pi / 2), Pose2(0, 1, math.pi / 2)])
    assert (z.dx, z.dy, z.dtheta) == pytest.approx((1.0, 0.0, 0.0), abs=1e-15)


def test_odometry_edges_need_two_poses():
    with pytest.raises(ValueError):
        odometry_edges([Pose2(0, 0, 0)])


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_composing_edges_reproduces_last_pose(seed):
    rng = np.random.default_rng(seed)
    th = np.cumsum(rng.normal(0, 0.3, 100))
    step = rng.uniform(0, 1.5, 100)
    xy = np.cumsum(np.column_stack([step * np.cos(th), step * np.sin(th)]), axis=0)
    ps = [Pose2(float(x), float(y), float(t)) for (x, y), t in zip(xy, th)]
    acc = None
    for _, z in odometry_edges(ps, user=3):
        acc = z if acc is None else compose(acc, z)
    end = ps[0].oplus(acc)
    assert (end.x, end.y) == pytest.approx((ps[-1].x, ps[-1].y), abs=1e-9)
    assert abs(math.remainder(end.theta - ps[-1].theta, 2 * math.pi)) < 1e-9

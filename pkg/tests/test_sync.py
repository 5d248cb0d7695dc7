import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sononlab.errors import AnalysisError, StepSizeError
from sononlab.sync import (
    OscillatorNetwork,
    SweepConfig,
    detect_clusters,
    geometric_effect,
    kernel_values,
    lock_threshold,
    network_potential,
    order_parameter,
    run_trials,
    simulate_network,
    square_positions,
    step_network,
    tetrahedron_positions,
    tetrahedron_run,
    trial_state,
    triangle_positions,
    triangle_sweep,
)

PAIR = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])


def pair_net(dw, phases=(0.0, 0.0), K=1.0, kernel="inverse_r"):
    return OscillatorNetwork(PAIR, [-dw / 2, dw / 2], list(phases), K, kernel)


def phase_gap(net):
    return math.remainder(net.phases[1] - net.phases[0], 2 * math.pi)


# --- network -----------------------------------------------------------------------

def test_network_validation():
    with pytest.raises(ValueError):
        OscillatorNetwork([[0, 0, 0]], [0.0], [0.0])
    with pytest.raises(ValueError):
        OscillatorNetwork([[0, 0, 0], [0, 0, 0]], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        OscillatorNetwork(PAIR, [0, 0], [0, 0], coupling_strength=-1.0)
    with pytest.raises(ValueError):
        OscillatorNetwork(PAIR, [0, 0], [0, 0], kernel="gaussian")
    with pytest.raises(ValueError):
        OscillatorNetwork(PAIR, [0, 0], [0, 0], kernel="table")


def test_phases_are_wrapped():
    net = OscillatorNetwork(PAIR, [0, 0], [-0.5, 7.0])
    assert np.all((net.phases >= 0) & (net.phases < 2 * math.pi))
    assert net.phases[0] == pytest.approx(2 * math.pi - 0.5)


def test_kernels():
    r = np.array([0.5, 1.0, 2.0])
    assert np.allclose(kernel_values("inverse_r", r), [2.0, 1.0, 0.5])
    assert np.allclose(kernel_values("uniform", r), 1.0)
    assert np.allclose(kernel_values("signed", r, k_r=2.0), np.sin(2 * r) / r)
    table = [[0.0, 3.0], [1.0, 1.0], [3.0, 0.0]]
    assert np.allclose(kernel_values("table", [0.5, 2.0, 9.0], table=table), [2.0, 0.5, 0.0])
    net = OscillatorNetwork(PAIR, [0, 0], [0, 0], 3.0, "table", table)
    assert net.coupling[0, 1] == pytest.approx(3.0 * 0.5)


def test_signed_kernel_can_repel():
    # sin(k r) < 0 at k r = 4: the pair settles in anti-phase
    net = OscillatorNetwork([[0, 0, 0], [4.0, 0, 0]], [0, 0], [0.0, 0.3], 1.0, "signed")
    assert net.coupling[0, 1] < 0
    final, _ = simulate_network(net, 200.0)
    assert abs(abs(phase_gap(final)) - math.pi) < 1e-6


# --- step_network -------------------------------------------------------------------

def test_identical_frequencies_close_gap_monotonically():
    net = pair_net(0.0, (0.0, 0.1))
    gaps = [phase_gap(net)]
    for _ in range(400):
        net = step_network(net, 0.05)
        gaps.append(phase_gap(net))
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 1e-9


def test_uncoupled_advance_is_exact():
    freqs = np.array([0.3, -1.2, 2.0])
    pos = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
    net = OscillatorNetwork(pos, freqs, [0.1, 6.2, 3.0], coupling_strength=0.0)
    out = step_network(net, 0.04)
    expected = np.mod(np.array([0.1, 6.2, 3.0]) + freqs * 0.04, 2 * math.pi)
    assert np.allclose(out.phases, expected, atol=1e-14, rtol=0)
    assert out.time == pytest.approx(0.04)


@pytest.mark.parametrize("ratio, locks", [(1.9, True), (2.1, False)])
def test_two_oscillator_threshold_both_sides(ratio, locks):
    k_e = 1.0 / 2.0
    net = pair_net(ratio * k_e)
    final, hist = simulate_network(net, 400.0)
    gap = np.unwrap(hist.phases[:, 1] - hist.phases[:, 0])
    if locks:
        assert gap[-1] == pytest.approx(math.asin(ratio / 2.0), abs=1e-8)
    else:
        assert gap.max() > 2 * math.pi


def test_step_guard():
    net = pair_net(0.0, K=10.0)
    with pytest.raises(StepSizeError):
        step_network(OscillatorNetwork(PAIR, [5.0, 0.0], [0, 0]), 0.05)
    with pytest.raises(ValueError):
        step_network(net, 0.0)


def test_lock_threshold_bisection():
    for K, r, kernel in ((1.0, 2.0, "inverse_r"), (0.3, 1.0, "uniform"), (2.0, 0.5, "inverse_r")):
        k_e = K * float(kernel_values(kernel, r))
        found = lock_threshold(K, r, kernel)
        assert found / (2 * k_e) == pytest.approx(1.0, abs=0.01)


# --- order_parameter ------------------------------------------------------------------

def test_order_parameter_examples():
    assert order_parameter([1.3] * 5)[0] == pytest.approx(1.0, abs=1e-15)
    for n in (2, 3, 7, 16):
        assert order_parameter(2 * math.pi * np.arange(n) / n)[0] < 1e-12
    r, psi = order_parameter([0.0, math.pi / 2])
    assert r == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert psi == pytest.approx(math.pi / 4)
    with pytest.raises(ValueError):
        order_parameter([])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_order_parameter_bounds(phases):
    r, psi = order_parameter(phases)
    assert 0.0 <= r <= 1.0
    assert 0.0 <= psi < 2 * math.pi + 1e-12
    spread = np.ptp(np.exp(1j * np.asarray(phases)))
    if r > 1 - 1e-15:
        assert spread < 1e-6
    if spread > 1e-4:
        assert r < 1 - 1e-9


def test_order_parameter_batched():
    batch = np.array([[0.0, 0.0], [0.0, math.pi]])
    r, _ = order_parameter(batch)
    assert np.allclose(r, [1.0, 0.0])


# --- detect_clusters -------------------------------------------------------------------

def triple(freqs, K, positions=None, seed=0):
    pos = positions if positions is not None else triangle_positions(60.0)
    phases = np.random.default_rng(seed).uniform(0, 2 * math.pi, 3)
    return OscillatorNetwork(pos, freqs, phases, K)


def test_full_lock_single_cluster():
    net = triple([0.2, 0.2, 0.2], 5.0)
    _, hist = simulate_network(net, 30.0)
    report = detect_clusters(hist, window=4.0, transient=20.0)
    assert report.cluster_count == 1 and report.locked
    assert report.cluster_members == ((0, 1, 2),)
    assert report.order_parameter_trace[-1, 1] == pytest.approx(1.0, abs=1e-9)


def test_uncoupled_distinct_frequencies():
    net = triple([0.0, 0.5, 1.1], 0.0)
    _, hist = simulate_network(net, 20.0)
    report = detect_clusters(hist, window=10.0)
    assert report.cluster_count == 3 and not report.locked
    assert report.cluster_members == ((0,), (1,), (2,))
    assert np.all((report.order_parameter_trace[:, 1] >= 0)
                  & (report.order_parameter_trace[:, 1] <= 1))


def test_two_clusters_from_distance():
    # near pair: threshold 2 K / 0.1 = 20; far oscillator against the locked pair:
    # d phi/dt = (w3 - mean) - 3 K / 10 sin(phi), so it locks only if |w3 - mean| <= 0.3
    pos = [[0, 0, 0], [0.1, 0, 0], [10.05, 0, 0]]
    freqs = [-0.5, 0.5, 2.0]
    assert abs(freqs[1] - freqs[0]) < 2 * 1.0 / 0.1
    assert abs(freqs[2] - np.mean(freqs[:2])) > 3 * 1.0 / 10.0
    net = triple(freqs, 1.0, pos)
    _, hist = simulate_network(net, 150.0)
    report = detect_clusters(hist, window=20.0, transient=100.0)
    assert report.cluster_count == 2
    assert report.cluster_members == ((0, 1), (2,))
    # below the far threshold the same geometry fully locks
    net = triple([-0.5, 0.5, 0.2], 1.0, pos)
    _, hist = simulate_network(net, 150.0)
    assert detect_clusters(hist, window=20.0, transient=100.0).cluster_count == 1


def test_insufficient_history():
    _, hist = simulate_network(triple([0, 0, 0], 1.0), 10.0)
    with pytest.raises(AnalysisError):
        detect_clusters(hist, window=5.0, transient=8.0)


@given(st.integers(0, 10_000))
def test_partition_covers_all_indices(seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(5, 3))
    net = OscillatorNetwork(pos, rng.normal(0, 1, 5), rng.uniform(0, 6, 5), 0.5)
    _, hist = simulate_network(net, 20.0)
    report = detect_clusters(hist, window=10.0)
    flat = sorted(i for group in report.cluster_members for i in group)
    assert flat == list(range(5))
    assert report.cluster_count == len(report.cluster_members)


# --- invariants -----------------------------------------------------------------------

def test_rigid_motion_bitwise_invariance():
    pos = np.array([[0.25, 0.5, -1.0], [1.5, -0.75, 0.125], [-0.5, 1.25, 2.0], [2.5, 0.0, 0.5]])
    phases, freqs = trial_state(3, 0, 4, 0.3)
    base = OscillatorNetwork(pos, freqs, phases, 1.0)
    # axis permutation with reflections and a dyadic translation are exact in floating point
    moved = pos[:, [2, 0, 1]] * np.array([-1.0, 1.0, -1.0]) + np.array([4.0, -2.0, 0.5])
    other = OscillatorNetwork(moved, freqs, phases, 1.0)
    _, h1 = simulate_network(base, 20.0)
    _, h2 = simulate_network(other, 20.0)
    assert h1.phases.tobytes() == h2.phases.tobytes()


def test_general_rotation_invariance():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(4, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    phases, freqs = trial_state(5, 0, 4, 0.3)
    _, h1 = simulate_network(OscillatorNetwork(pos, freqs, phases, 1.0), 20.0)
    _, h2 = simulate_network(OscillatorNetwork(pos @ q.T + 3.3, freqs, phases, 1.0), 20.0)
    d = np.abs(np.angle(np.exp(1j * (h1.phases - h2.phases))))
    assert d.max() < 1e-10


@pytest.mark.parametrize("n, K, seed", [(2, 1.0, 0), (3, 0.5, 1), (5, 2.0, 2), (8, 0.2, 3)])
def test_uniform_identical_full_lock(n, K, seed):
    rng = np.random.default_rng(seed)
    net = OscillatorNetwork(rng.normal(size=(n, 3)), np.full(n, 0.7),
                            rng.uniform(0, 2 * math.pi, n), K, "uniform")
    final, _ = simulate_network(net, 50.0 / K, record_every=10**9)
    assert order_parameter(final.phases)[0] > 1 - 1e-6


@given(st.integers(0, 10_000))
def test_potential_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    net = OscillatorNetwork(rng.normal(size=(n, 3)), np.full(n, 0.4),
                            rng.uniform(0, 2 * math.pi, n), float(rng.uniform(0.1, 2)))
    _, hist = simulate_network(net, 10.0)
    v = np.array([network_potential(net, p) for p in hist.phases])
    assert np.all(np.diff(v) <= 1e-10 * max(1.0, np.abs(v).max()))


# --- geometry and sweeps ---------------------------------------------------------------

@pytest.mark.parametrize("angle", [60.0, 90.0, 120.0, 150.0, 180.0])
def test_triangle_geometry(angle):
    pts = triangle_positions(angle, perimeter=3.0)
    a, b, c = pts
    sides = [np.linalg.norm(a - b), np.linalg.norm(a - c), np.linalg.norm(b - c)]
    assert sum(sides) == pytest.approx(3.0)
    u, v = b - a, c - a
    apex = math.degrees(math.acos(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1, 1)))
    assert apex == pytest.approx(angle, abs=1e-6)
    assert np.allclose(pts.mean(axis=0), 0.0)


def test_triangle_angle_range():
    with pytest.raises(ValueError):
        triangle_positions(200.0)
    with pytest.raises(ValueError):
        triangle_sweep(SweepConfig(), [45.0], 2)


def test_solids_have_equal_mean_distance():
    tet = OscillatorNetwork(tetrahedron_positions(1.7), np.zeros(4), np.zeros(4))
    sq = OscillatorNetwork(square_positions(1.7), np.zeros(4), np.zeros(4))
    assert np.allclose(tet.distances[np.triu_indices(4, 1)], 1.7)
    assert sq.mean_distance == pytest.approx(1.7)
    assert np.ptp(sq.positions[:, 2]) == 0.0


def test_equilateral_without_jitter_always_locks():
    res = triangle_sweep(SweepConfig(jitter=0.0), [60.0], trials=50, seed=1)
    assert np.all(res.cluster_counts[60.0] == 1)


def test_collinear_uncoupled_control():
    cfg = SweepConfig(coupling_strength=0.0, jitter=1.0, window=500.0, transient=0.0)
    res = triangle_sweep(cfg, [180.0], trials=40, seed=0)
    assert np.all(res.cluster_counts[180.0] == 3)


def test_zero_coupling_needs_explicit_timing():
    with pytest.raises(ValueError):
        triangle_sweep(SweepConfig(coupling_strength=0.0, jitter=1.0), [180.0], 2)


def test_sweep_tables_and_verdict():
    res = triangle_sweep(SweepConfig(), [90.0, 180.0], trials=30, seed=4)
    rows = res.rows()
    assert len(rows) == 60 and rows[0][:2] == (90.0, 0)
    summary = res.summary()
    for row in summary:
        assert 0 <= row["mean_r"] <= 1
        assert sum(row[f"p_{k}_clusters"] for k in (1, 2, 3)) == pytest.approx(1.0)
    effect = geometric_effect(res, 90.0, 180.0)
    assert effect["detected"] == (abs(effect["difference"]) > 2 * effect["pooled_se"])
    assert effect["verdict"] in ("geometric effect detected", "no geometric effect detected")
    assert res.metadata["normalization"] == "constant perimeter"


def test_sweep_deterministic_and_matches_single_run():
    cfg = SweepConfig(jitter=0.3)
    a = triangle_sweep(cfg, [120.0], trials=8, seed=9)
    b = triangle_sweep(cfg, [120.0], trials=8, seed=9)
    assert a.final_r[120.0].tobytes() == b.final_r[120.0].tobytes()
    # trial 3 integrated on its own reaches the same phases
    pos = triangle_positions(120.0)
    phases, freqs = trial_state(9, 3, 3, 0.3)
    r_batch, counts, meta = run_trials(pos, cfg, 8, 9)
    net = OscillatorNetwork(pos, freqs, phases, 1.0)
    _, hist = simulate_network(net, meta["transient"] + meta["window"], dt=meta["dt"])
    report = detect_clusters(hist, meta["window"], transient=meta["transient"])
    assert report.cluster_count == counts[3]


def test_tetrahedron_examples():
    res = tetrahedron_run(1.0, jitter=0.0, trials=20, seed=0)
    assert np.all(res.cluster_counts["tetrahedron"] == 1)
    cfg = SweepConfig(coupling_strength=0.0, jitter=1.0, window=500.0, transient=0.0)
    flat = tetrahedron_run(1.0, cfg, trials=20, seed=0)
    assert np.all(flat.cluster_counts["square"] == 4)
    effect = geometric_effect(tetrahedron_run(1.0, trials=40, seed=2), "tetrahedron", "square")
    assert math.isfinite(effect["difference"]) and effect["pooled_se"] >= 0

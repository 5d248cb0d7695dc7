"""Phase-oscillator networks with distance-dependent coupling.

Dynamics are the Kuramoto law with a spatial kernel::

    d theta_i / dt = omega_i + sum_{j != i} K kernel(r_ij) sin(theta_j - theta_i)

``kernel`` is ``1/r`` by default, following the ``1/r`` envelope of the far
field carrier. Oscillator phase standing in for qubit coherence is a modelling
hypothesis; "coherent" here means frequency locked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import AnalysisError, StepSizeError

__all__ = [
    "KERNELS",
    "OscillatorNetwork",
    "CoherenceReport",
    "PhaseHistory",
    "SweepConfig",
    "SweepResult",
    "kernel_values",
    "network_derivative",
    "network_potential",
    "step_network",
    "simulate_network",
    "order_parameter",
    "detect_clusters",
    "lock_threshold",
    "triangle_positions",
    "tetrahedron_positions",
    "square_positions",
    "run_trials",
    "triangle_sweep",
    "tetrahedron_run",
    "geometric_effect",
]

TWO_PI = 2.0 * math.pi
KERNELS = ("inverse_r", "uniform", "signed", "table")
STEP_GUARD = 0.1
# automatic steps use half the guard so the first stage never trips it
AUTO_STEP_FRACTION = 0.05
LOCK_TOL = 0.1
WINDOW_UNITS = 20.0
TRANSIENT_UNITS = 100.0
JITTER_FRACTION = 0.05
DEFAULT_TRIALS = 200


def kernel_values(kind: str, r, k_r: float = 1.0, table=None):
    """Dimensionless coupling profile at separation ``r``.

    ``signed`` is ``sin(k_r r) / r``, the far-field carrier itself, so
    couplings can be repulsive. ``table`` interpolates linearly in a
    two-column array of ``(r, value)`` rows and holds the end values outside.
    """
    r = np.asarray(r, dtype=float)
    if kind == "inverse_r":
        return 1.0 / r
    if kind == "uniform":
        return np.ones_like(r)
    if kind == "signed":
        return np.sin(k_r * r) / r
    if kind == "table":
        tab = _check_table(table)
        return np.interp(r, tab[:, 0], tab[:, 1])
    raise ValueError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


def _check_table(table) -> np.ndarray:
    if table is None:
        raise ValueError("kernel 'table' needs kernel_table rows (r, value)")
    tab = np.asarray(table, dtype=float)
    if tab.ndim != 2 or tab.shape[1] != 2 or len(tab) < 2:
        raise ValueError("kernel_table must have at least two (r, value) rows")
    if not np.all(np.isfinite(tab)) or np.any(np.diff(tab[:, 0]) <= 0):
        raise ValueError("kernel_table r column must be finite and strictly increasing")
    return tab


def _distances(positions: np.ndarray) -> np.ndarray:
    d = positions[:, None, :] - positions[None, :, :]
    # sorting the squared components makes r_ij independent of axis order
    return np.sqrt(np.sort(d * d, axis=-1).sum(axis=-1))


@dataclass(frozen=True, eq=False)
class OscillatorNetwork:
    positions: np.ndarray
    natural_freqs: np.ndarray
    phases: np.ndarray
    coupling_strength: float = 1.0
    kernel: str = "inverse_r"
    kernel_table: np.ndarray | None = None
    k_r: float = 1.0
    time: float = 0.0
    coupling: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must be an (N, 3) array")
        n = len(pos)
        if n < 2:
            raise ValueError("a network needs at least two oscillators")
        freqs = np.array(self.natural_freqs, dtype=float).reshape(-1)
        phases = np.array(self.phases, dtype=float).reshape(-1)
        if freqs.shape != (n,) or phases.shape != (n,):
            raise ValueError("natural_freqs and phases need one entry per oscillator")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(freqs))
                and np.all(np.isfinite(phases))):
            raise ValueError("network state must be finite")
        K = float(self.coupling_strength)
        if not (math.isfinite(K) and K >= 0):
            raise ValueError("coupling_strength must be >= 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        r = _distances(pos)
        off = ~np.eye(n, dtype=bool)
        if np.any(r[off] <= 0):
            raise ValueError("oscillator positions must be pairwise distinct")
        table = None if self.kernel_table is None else _check_table(self.kernel_table)
        coupling = np.zeros((n, n))
        coupling[off] = K * kernel_values(self.kernel, r[off], self.k_r, table)
        for name, value in (("positions", pos), ("natural_freqs", freqs),
                            ("phases", np.mod(phases, TWO_PI)), ("kernel_table", table),
                            ("coupling_strength", K), ("coupling", coupling)):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def size(self) -> int:
        return len(self.positions)

    @property
    def distances(self) -> np.ndarray:
        return _distances(self.positions)

    @property
    def mean_distance(self) -> float:
        r = self.distances
        return float(r[np.triu_indices(self.size, 1)].mean())

    def with_state(self, phases, time) -> OscillatorNetwork:
        net = object.__new__(OscillatorNetwork)
        for name in ("positions", "natural_freqs", "coupling_strength", "kernel",
                     "kernel_table", "k_r", "coupling"):
            object.__setattr__(net, name, getattr(self, name))
        wrapped = np.mod(np.asarray(phases, dtype=float), TWO_PI)
        wrapped.setflags(write=False)
        object.__setattr__(net, "phases", wrapped)
        object.__setattr__(net, "time", float(time))
        return net


def _rates(theta: np.ndarray, omega: np.ndarray, coupling: np.ndarray) -> np.ndarray:
    # sum_j K_ij sin(theta_j - theta_i) = Im(conj(z_i) (K z)_i)
    z = np.exp(1j * theta)
    return omega + np.imag(np.conj(z) * (z @ coupling.T))


def network_derivative(net: OscillatorNetwork) -> np.ndarray:
    return _rates(net.phases, net.natural_freqs, net.coupling)


def network_potential(net: OscillatorNetwork, phases=None) -> float:
    """``-sum_{i<j} K_ij cos(theta_j - theta_i)``; non-increasing when all omega agree."""
    theta = net.phases if phases is None else np.asarray(phases, dtype=float)
    diff = theta[None, :] - theta[:, None]
    return float(-0.5 * np.sum(net.coupling * np.cos(diff)))


def _rk4(theta, omega, coupling, dt):
    k1 = _rates(theta, omega, coupling)
    rate = float(np.max(np.abs(k1)))
    if dt * rate >= STEP_GUARD:
        raise StepSizeError(
            f"dt * max|dtheta/dt| = {dt * rate:.3g} rad exceeds the {STEP_GUARD} rad guard"
        )
    k2 = _rates(theta + 0.5 * dt * k1, omega, coupling)
    k3 = _rates(theta + 0.5 * dt * k2, omega, coupling)
    k4 = _rates(theta + dt * k3, omega, coupling)
    return theta + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_network(net: OscillatorNetwork, dt: float) -> OscillatorNetwork:
    """One RK4 step; raises StepSizeError unless ``dt * max|dtheta/dt| < 0.1``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    theta = _rk4(net.phases, net.natural_freqs, net.coupling, dt)
    return net.with_state(theta, net.time + dt)


def auto_step(coupling: np.ndarray, omega: np.ndarray) -> float:
    """Step size guaranteeing the guard for any phases."""
    bound = float(np.max(np.abs(omega) + np.abs(coupling).sum(axis=-1)))
    return AUTO_STEP_FRACTION / bound if bound > 0 else 1.0


@dataclass(frozen=True)
class PhaseHistory:
    times: np.ndarray
    phases: np.ndarray  # (len(times), N), wrapped to [0, 2 pi)


def simulate_network(net: OscillatorNetwork, duration: float, dt: float | None = None,
                     record_every: int = 1) -> tuple[OscillatorNetwork, PhaseHistory]:
    """Integrate for ``duration`` and return the final network and its history."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if dt is None:
        dt = auto_step(net.coupling, net.natural_freqs)
    steps = int(math.ceil(duration / dt - 1e-9)) if duration > 0 else 0
    if steps:
        dt = duration / steps
    theta = net.phases.copy()
    times, history = [net.time], [theta.copy()]
    for s in range(1, steps + 1):
        theta = np.mod(_rk4(theta, net.natural_freqs, net.coupling, dt), TWO_PI)
        if s % record_every == 0 or s == steps:
            times.append(net.time + s * dt)
            history.append(theta.copy())
    final = net.with_state(theta, net.time + steps * dt)
    return final, PhaseHistory(np.array(times), np.array(history))


def order_parameter(phases) -> tuple[float, float]:
    """Kuramoto ``(r, psi)`` with ``r exp(i psi) = mean exp(i theta)``.

    Works along the last axis, so a batch of phase vectors gives arrays.
    """
    theta = np.asarray(phases, dtype=float)
    if theta.shape[-1] < 1:
        raise ValueError("order_parameter needs at least one phase")
    z = np.exp(1j * theta).mean(axis=-1)
    r = np.minimum(np.abs(z), 1.0)
    psi = np.mod(np.angle(z), TWO_PI)
    if np.ndim(r) == 0:
        return float(r), float(psi)
    return r, psi


@dataclass(frozen=True)
class CoherenceReport:
    order_parameter_trace: np.ndarray  # rows (t, r, psi)
    cluster_count: int
    cluster_members: tuple[tuple[int, ...], ...]
    locked: bool


def _wrap(x):
    return np.mod(x + math.pi, TWO_PI) - math.pi


def _partition(spread: np.ndarray, tol: float) -> tuple[tuple[int, ...], ...]:
    n = len(spread)
    adjacency = csr_matrix(spread < tol)
    count, labels = connected_components(adjacency, directed=False)
    groups = [tuple(int(i) for i in np.flatnonzero(labels == c)) for c in range(count)]
    return tuple(sorted(groups))


def detect_clusters(history: PhaseHistory, window: float, tol: float = LOCK_TOL,
                    transient: float = 0.0) -> CoherenceReport:
    """Frequency-locked clusters over the last ``window`` of ``history``.

    Oscillators ``i, j`` share a cluster when the unwrapped phase difference
    ``theta_j - theta_i`` moves by less than ``tol`` over the window; clusters
    are the transitive closure of that relation. Samples must be dense enough
    that no pair difference jumps by more than pi between records.
    """
    times = np.asarray(history.times, dtype=float)
    phases = np.asarray(history.phases, dtype=float)
    if window <= 0 or tol <= 0:
        raise ValueError("window and tol must be positive")
    start = times[0] + transient
    if len(times) < 2 or times[-1] - start < window * (1 - 1e-12):
        raise AnalysisError(
            f"history covers {times[-1] - start:.4g} time units after the transient; "
            f"window needs {window:.4g}"
        )
    sel = times >= times[-1] - window * (1 + 1e-12)
    theta = phases[sel]
    diff = theta[:, None, :] - theta[:, :, None]
    unwrapped = np.unwrap(diff, axis=0)
    spread = unwrapped.max(axis=0) - unwrapped.min(axis=0)
    members = _partition(spread, tol)
    r, psi = order_parameter(phases)
    trace = np.column_stack([times, r, psi])
    return CoherenceReport(trace, len(members), members, len(members) == 1)


def lock_threshold(coupling_strength: float, separation: float, kernel: str = "inverse_r",
                   k_r: float = 1.0, kernel_table=None, rel_tol: float = 1e-3,
                   horizon: float | None = None) -> float:
    """Frequency mismatch at which two oscillators stop locking, by bisection.

    Each probe integrates the pair from equal phases with ``omega = -/+ dw/2``
    and calls it unlocked once the phase difference passes pi. Near the
    boundary slips take ``~ pi / (2 k_e sqrt(eps))``, so the default horizon
    of ``400 / k_e`` resolves ``eps`` well below ``rel_tol``.
    """
    k_e = coupling_strength * float(kernel_values(kernel, separation, k_r, kernel_table))
    if not k_e > 0:
        raise ValueError("effective coupling must be positive to lock")
    horizon = 400.0 / k_e if horizon is None else horizon
    positions = np.array([[0.0, 0.0, 0.0], [separation, 0.0, 0.0]])
    probe = OscillatorNetwork(positions, [0.0, 0.0], [0.0, 0.0], coupling_strength,
                              kernel, kernel_table, k_r)

    def locks(dw: float) -> bool:
        omega = np.array([-0.5 * dw, 0.5 * dw])
        dt = auto_step(probe.coupling, omega)
        theta = np.zeros(2)
        for _ in range(int(math.ceil(horizon / dt))):
            theta = _rk4(theta, omega, probe.coupling, dt)
            if abs(theta[1] - theta[0]) > math.pi:
                return False
        return True

    lo, hi = 0.0, 4.0 * k_e
    while hi - lo > rel_tol * 2.0 * k_e:
        mid = 0.5 * (lo + hi)
        if locks(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --- geometry ---------------------------------------------------------------------

def triangle_positions(apex_deg: float, perimeter: float = 3.0) -> np.ndarray:
    """Isosceles triangle with apex angle ``apex_deg`` at fixed perimeter.

    For apex angles in [60, 180] the apex is the largest angle; 180 is the
    collinear limit with the apex midway between the other two.
    """
    if not 60.0 <= apex_deg <= 180.0:
        raise ValueError(f"apex angle must be in [60, 180] degrees, got {apex_deg}")
    if not perimeter > 0:
        raise ValueError("perimeter must be positive")
    half = math.radians(apex_deg) / 2.0
    leg = perimeter / (2.0 + 2.0 * math.sin(half))
    pts = np.array([
        [0.0, 0.0, 0.0],
        [leg * math.sin(half), leg * math.cos(half), 0.0],
        [-leg * math.sin(half), leg * math.cos(half), 0.0],
    ])
    return pts - pts.mean(axis=0)


def tetrahedron_positions(edge: float) -> np.ndarray:
    if not edge > 0:
        raise ValueError("edge must be positive")
    pts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    return pts * edge / (2.0 * math.sqrt(2.0))


def square_positions(mean_distance: float) -> np.ndarray:
    """Planar square whose six pairwise distances average ``mean_distance``."""
    if not mean_distance > 0:
        raise ValueError("mean_distance must be positive")
    side = 6.0 * mean_distance / (4.0 + 2.0 * math.sqrt(2.0))
    h = side / 2.0
    return np.array([[h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]])


# --- ensembles ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    coupling_strength: float = 1.0
    perimeter: float = 3.0
    kernel: str = "inverse_r"
    k_r: float = 1.0
    kernel_table: tuple | None = None
    jitter: float | None = None
    base_freq: float = 0.0
    tol: float = LOCK_TOL
    window: float | None = None
    transient: float | None = None
    dt: float | None = None

    def __post_init__(self):
        if not self.coupling_strength >= 0:
            raise ValueError("coupling_strength must be >= 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        for name in ("window", "dt"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.transient is not None and self.transient < 0:
            raise ValueError("transient must be >= 0")

    def timing(self) -> tuple[float, float]:
        """``(transient, window)``: defaults ``100/K`` and ``20/K``."""
        K = self.coupling_strength
        if K == 0 and (self.window is None or self.transient is None):
            raise ValueError("window and transient must be given explicitly when K = 0")
        window = self.window if self.window is not None else WINDOW_UNITS / K
        transient = self.transient if self.transient is not None else TRANSIENT_UNITS / K
        return transient, window

    def jitter_for(self, mean_distance: float) -> float:
        if self.jitter is not None:
            return self.jitter
        return JITTER_FRACTION * self.coupling_strength / mean_distance


def trial_state(seed: int, trial: int, n: int, jitter: float, base_freq: float = 0.0):
    """Initial phases and natural frequencies of one trial, from stream ``(seed, trial)``."""
    rng = np.random.default_rng([seed, trial])
    phases = rng.uniform(0.0, TWO_PI, n)
    freqs = base_freq + jitter * rng.standard_normal(n)
    return phases, freqs


def run_trials(positions: np.ndarray, config: SweepConfig, trials: int, seed: int):
    """Integrate ``trials`` independent copies of one geometry in lock-step.

    Returns ``(final_r, cluster_count, metadata)`` where ``final_r`` is the
    order parameter averaged over the analysis window. Pair spreads are
    accumulated on the fly so no history is stored.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    template = OscillatorNetwork(positions, np.zeros(len(positions)), np.zeros(len(positions)),
                                 config.coupling_strength, config.kernel,
                                 config.kernel_table, config.k_r)
    n = template.size
    jitter = config.jitter_for(template.mean_distance)
    transient, window = config.timing()
    init = [trial_state(seed, t, n, jitter, config.base_freq) for t in range(trials)]
    theta = np.array([p for p, _ in init])
    omega = np.array([f for _, f in init])
    coupling = template.coupling
    dt = config.dt if config.dt is not None else auto_step(coupling, omega)
    n_window = max(int(math.ceil(window / dt - 1e-9)), 1)
    n_transient = int(math.ceil(transient / dt - 1e-9))
    dt_w, dt_t = window / n_window, (transient / n_transient if n_transient else 0.0)

    for _ in range(n_transient):
        theta = np.mod(_rk4(theta, omega, coupling, dt_t), TWO_PI)

    def pair_diff(th):
        return th[:, None, :] - th[:, :, None]

    last = pair_diff(theta)
    unwrapped = last.copy()
    lo, hi = unwrapped.copy(), unwrapped.copy()
    r_sum = 0.5 * order_parameter(theta)[0]
    for s in range(n_window):
        theta = np.mod(_rk4(theta, omega, coupling, dt_w), TWO_PI)
        current = pair_diff(theta)
        unwrapped = unwrapped + _wrap(current - last)
        last = current
        np.minimum(lo, unwrapped, out=lo)
        np.maximum(hi, unwrapped, out=hi)
        r = order_parameter(theta)[0]
        r_sum = r_sum + (r if s < n_window - 1 else 0.5 * r)
    final_r = r_sum / n_window  # trapezoid mean over the window
    spread = hi - lo
    counts = np.array([len(_partition(spread[b], config.tol)) for b in range(trials)])
    meta = {
        "n_oscillators": n,
        "coupling_strength": config.coupling_strength,
        "kernel": config.kernel,
        "jitter": jitter,
        "mean_distance": template.mean_distance,
        "transient": transient,
        "window": window,
        "dt": dt_w,
        "tol": config.tol,
    }
    return final_r, counts, meta


@dataclass
class SweepResult:
    labels: list
    final_r: dict  # label -> (trials,) array
    cluster_counts: dict  # label -> (trials,) int array
    n_oscillators: int
    seed: int
    metadata: dict

    def rows(self) -> list[tuple]:
        out = []
        for label in self.labels:
            for trial, (r, c) in enumerate(zip(self.final_r[label], self.cluster_counts[label])):
                out.append((label, trial, float(r), int(c)))
        return out

    def summary(self) -> list[dict]:
        out = []
        for label in self.labels:
            r = self.final_r[label]
            counts = self.cluster_counts[label]
            row = {
                "label": label,
                "mean_r": float(r.mean()),
                "std_r": float(r.std(ddof=1)) if len(r) > 1 else 0.0,
            }
            for k in range(1, self.n_oscillators + 1):
                row[f"p_{k}_clusters"] = float(np.mean(counts == k))
            out.append(row)
        return out


def triangle_sweep(config: SweepConfig, angles: Sequence[float],
                   trials: int = DEFAULT_TRIALS, seed: int = 0) -> SweepResult:
    """Cluster statistics of three oscillators versus the largest triangle angle.

    Perimeter is held fixed across angles. Trial ``i`` uses the same stream
    at every angle, so angle-to-angle differences are paired comparisons.
    """
    angles = [float(a) for a in angles]
    if not angles:
        raise ValueError("angles must not be empty")
    for a in angles:
        if not 60.0 <= a <= 180.0:
            raise ValueError(f"angles must lie in [60, 180] degrees, got {a}")
    final_r, counts, meta = {}, {}, {}
    for a in angles:
        final_r[a], counts[a], meta = run_trials(
            triangle_positions(a, config.perimeter), config, trials, seed)
    meta.pop("mean_distance", None)
    meta.update(normalization="constant perimeter", perimeter=config.perimeter,
                trials=trials, final_r="order parameter averaged over the analysis window")
    return SweepResult(angles, final_r, counts, 3, seed, meta)


def tetrahedron_run(edge: float, config: SweepConfig | None = None, jitter: float | None = None,
                    trials: int = DEFAULT_TRIALS, seed: int = 0) -> SweepResult:
    """Regular tetrahedron versus a coplanar square with the same mean pairwise distance."""
    config = config or SweepConfig()
    if jitter is not None:
        config = SweepConfig(**{**config.__dict__, "jitter": jitter})
    geometries = {"tetrahedron": tetrahedron_positions(edge), "square": square_positions(edge)}
    final_r, counts, meta = {}, {}, {}
    for label, pos in geometries.items():
        final_r[label], counts[label], meta = run_trials(pos, config, trials, seed)
    meta.update(edge=edge, trials=trials,
                normalization="equal mean pairwise distance",
                final_r="order parameter averaged over the analysis window")
    return SweepResult(list(geometries), final_r, counts, 4, seed, meta)


def geometric_effect(result: SweepResult, first, second) -> dict:
    """Difference of mean order parameter between two geometries.

    The effect counts as detected when ``|difference| > 2`` pooled standard
    errors; otherwise the verdict is "no geometric effect detected".
    """
    a, b = result.final_r[first], result.final_r[second]
    diff = float(a.mean() - b.mean())
    se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    detected = abs(diff) > 2.0 * se
    return {
        "first": first,
        "second": second,
        "difference": diff,
        "pooled_se": se,
        "detected": bool(detected),
        "verdict": "geometric effect detected" if detected else "no geometric effect detected",
    }

"""de Broglie-Bohm trajectories driven by a split-step Schrodinger solver.

Particles move with the guidance velocity ``v = (hbar/m) Im(grad psi / psi)``
through a wavefunction sampled on a uniform periodic grid. Grids are
periodic with ``x_j = lo + j h`` and ``h = (hi - lo) / N``; the spectral
propagator wraps around, so open-domain scenarios switch on a cosine-taper
absorbing layer and report the probability it removes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import kstest

from .errors import (
    EnsembleQualityError,
    NodeProximityError,
    PropagationError,
    TrajectoryAbortError,
)

NODE_EPS = 1e-12
MAX_HALVINGS = 10
ABSORB_FRACTION = 0.10
NORM_DRIFT_LIMIT = 1e-6
ABORT_LIMIT = 0.01

SCENARIO_KINDS = ("plane_wave", "gaussian_free", "double_slit", "barrier")


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class WavefunctionGrid:
    """Complex ``psi`` on a uniform 1D or 2D periodic grid at one instant."""

    extents: tuple[tuple[float, float], ...]
    values: np.ndarray
    mass: float = 1.0
    hbar: float = 1.0
    time: float = 0.0
    absorbed: tuple[float, float] = (0.0, 0.0)
    _grad: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        extents = tuple((float(lo), float(hi)) for lo, hi in self.extents)
        object.__setattr__(self, "extents", extents)
        if values.ndim not in (1, 2) or values.ndim != len(extents):
            raise ValueError("grid must be 1D or 2D with one extent per axis")
        if min(values.shape) < 64:
            raise ValueError("at least 64 samples per axis are required")
        if any(hi <= lo for lo, hi in extents):
            raise ValueError("extents must satisfy lo < hi")
        norm = self.norm()
        if not (math.isfinite(norm) and norm > 0):
            raise ValueError("wavefunction norm must be finite and positive")
        if self.mass <= 0 or self.hbar <= 0:
            raise ValueError("mass and hbar must be positive")

    @property
    def dims(self) -> int:
        return self.values.ndim

    @property
    def samples(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extents, self.samples))

    def axis(self, i: int = 0) -> np.ndarray:
        lo, _ = self.extents[i]
        return lo + self.spacing[i] * np.arange(self.samples[i])

    def mesh(self) -> tuple[np.ndarray, ...]:
        return np.meshgrid(*(self.axis(i) for i in range(self.dims)), indexing="ij")

    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return float(math.sqrt(np.sum(np.abs(self.values) ** 2) * math.prod(self.spacing)))

    def gradient(self) -> tuple[np.ndarray, ...]:
        """Periodic second-order central differences, one array per axis."""
        if not self._grad:
            psi = self.values
            self._grad.extend(
                (np.roll(psi, -1, axis=a) - np.roll(psi, 1, axis=a)) / (2.0 * h)
                for a, h in enumerate(self.spacing)
            )
        return tuple(self._grad)

    def with_values(self, values, time=None, absorbed=None) -> "WavefunctionGrid":
        return WavefunctionGrid(
            self.extents, values, self.mass, self.hbar,
            self.time if time is None else time,
            self.absorbed if absorbed is None else absorbed,
        )

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        inside = np.ones(len(x), dtype=bool)
        for a, (lo, hi) in enumerate(self.extents):
            inside &= (x[:, a] >= lo) & (x[:, a] < hi)
        return inside


def _interpolate(grid: WavefunctionGrid, x: np.ndarray, arrays):
    """(Bi)linear interpolation of each array in ``arrays`` at points ``x`` (n, d)."""
    idx, wts = [], []
    for a, (lo, _) in enumerate(grid.extents):
        u = (x[:, a] - lo) / grid.spacing[a]
        i0 = np.floor(u)
        w = u - i0
        i0 = i0.astype(np.int64) % grid.samples[a]
        idx.append((i0, (i0 + 1) % grid.samples[a]))
        wts.append(w)
    out = []
    for arr in arrays:
        if grid.dims == 1:
            (i0, i1), w = idx[0], wts[0]
            out.append((1.0 - w) * arr[i0] + w * arr[i1])
        else:
            (i0, i1), (j0, j1) = idx
            wx, wy = wts
            out.append((1 - wx) * (1 - wy) * arr[i0, j0] + wx * (1 - wy) * arr[i1, j0]
                       + (1 - wx) * wy * arr[i0, j1] + wx * wy * arr[i1, j1])
    return out


def velocity_field(grid: WavefunctionGrid, x,
                   periodic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised guidance velocity at points ``x`` of shape (n, d).

    Returns ``(v, bad)`` where ``bad`` marks points at a node or, unless
    ``periodic``, outside the grid; ``v`` is zero there.
    """
    x = np.asarray(x, dtype=float).reshape(-1, grid.dims)
    inside = np.ones(len(x), dtype=bool) if periodic else grid.contains(x)
    psi, *grads = _interpolate(grid, x, (grid.values, *grid.gradient()))
    threshold = NODE_EPS * float(np.max(np.abs(grid.values)))
    bad = ~inside | (np.abs(psi) <= threshold)
    safe = np.where(bad, 1.0, psi)
    scale = grid.hbar / grid.mass
    v = np.stack([scale * np.imag(g / safe) for g in grads], axis=-1)
    v[bad] = 0.0
    return v, bad


def guidance_velocity(grid: WavefunctionGrid, x) -> np.ndarray:
    """``(hbar/m) Im(grad psi / psi)`` at one position ``x`` (length ``dims``)."""
    x = np.asarray(x, dtype=float).reshape(1, grid.dims)
    if not grid.contains(x)[0]:
        raise ValueError(f"position {x[0]} outside grid extents {grid.extents}")
    v, bad = velocity_field(grid, x)
    if bad[0]:
        raise NodeProximityError(f"|psi| below node threshold at {x[0]}")
    return v[0]


# --------------------------------------------------------------------------
# propagation


def absorbing_mask(grid: WavefunctionGrid, fraction: float = ABSORB_FRACTION,
                   power: float = 0.125) -> np.ndarray:
    """Per-step damping factor: ``cos(pi s / 2)^power`` across the outer layer,
    ``s`` running from 0 at the inner edge to 1 at the boundary."""
    mask = np.ones(grid.samples)
    for a in range(grid.dims):
        n = grid.samples[a]
        width = max(1, int(round(fraction * n)))
        s = np.zeros(n)
        ramp = (np.arange(width, 0, -1) - 0.5) / width
        s[:width] = ramp
        s[n - width:] = ramp[::-1]
        profile = np.cos(0.5 * np.pi * s) ** power
        shape = [1] * grid.dims
        shape[a] = n
        mask = mask * profile.reshape(shape)
    return mask


def _sample_potential(potential, grid: WavefunctionGrid) -> np.ndarray:
    if potential is None:
        return np.zeros(grid.samples)
    if callable(potential):
        v = np.asarray(potential(*grid.mesh()), dtype=float)
        return np.broadcast_to(v, grid.samples).copy()
    v = np.asarray(potential, dtype=float)
    if v.shape != grid.samples:
        raise ValueError("potential array shape does not match the grid")
    return v


class SplitStepPropagator:
    """Strang-split spectral propagator: half potential, full kinetic, half potential.

    The free part is exact on the grid, so free-packet evolution carries only
    round-off error.
    """

    def __init__(self, template: WavefunctionGrid, potential=None, dt: float = 0.01,
                 absorb: bool = False):
        if not (dt > 0 and math.isfinite(dt)):
            raise ValueError("dt must be positive")
        self.template = template
        self.dt = float(dt)
        self.V = _sample_potential(potential, template)
        if not np.all(np.isfinite(self.V)):
            raise ValueError("potential must be bounded")
        ks = np.meshgrid(*(2.0 * np.pi * np.fft.fftfreq(n, d=h)
                           for n, h in zip(template.samples, template.spacing)), indexing="ij")
        self.k2 = sum(k * k for k in ks)
        self.mask = absorbing_mask(template) if absorb else None
        if self.mask is not None:
            self._low = template.mesh()[0] < 0.5 * sum(template.extents[0])
        self._factors = self._make_factors(self.dt)

    def _make_factors(self, tau: float):
        hbar, m = self.template.hbar, self.template.mass
        half_v = np.exp(-0.5j * tau * self.V / hbar)
        kinetic = np.exp(-0.5j * tau * hbar * self.k2 / m)
        return half_v, kinetic

    def _apply(self, psi: np.ndarray, factors) -> np.ndarray:
        half_v, kinetic = factors
        psi = half_v * psi
        psi = np.fft.ifftn(kinetic * np.fft.fftn(psi))
        return half_v * psi

    def _absorb(self, grid: WavefunctionGrid, psi: np.ndarray):
        if self.mask is None:
            return psi, grid.absorbed
        damped = psi * self.mask
        lost = (np.abs(psi) ** 2 - np.abs(damped) ** 2) * math.prod(grid.spacing)
        low = float(np.sum(lost[self._low]))
        high = float(np.sum(lost[~self._low]))
        return damped, (grid.absorbed[0] + low, grid.absorbed[1] + high)

    def step(self, grid: WavefunctionGrid) -> WavefunctionGrid:
        psi = self._apply(grid.values, self._factors)
        psi, absorbed = self._absorb(grid, psi)
        return grid.with_values(psi, grid.time + self.dt, absorbed)

    def advance(self, grid: WavefunctionGrid, tau: float) -> WavefunctionGrid:
        """One split step of arbitrary length ``tau`` (no absorption)."""
        if tau == 0:
            return grid
        psi = self._apply(grid.values, self._make_factors(tau))
        return grid.with_values(psi, grid.time + tau)


def _check_norm(initial: WavefunctionGrid, current: WavefunctionGrid):
    n0 = initial.norm() ** 2 + sum(initial.absorbed)
    n1 = current.norm() ** 2 + sum(current.absorbed)
    if not math.isfinite(n1) or abs(n1 - n0) > NORM_DRIFT_LIMIT * n0:
        raise PropagationError(
            f"norm drift {abs(n1 - n0):.3e} at t={current.time:.6g} exceeds {NORM_DRIFT_LIMIT}"
        )


def propagate(grid: WavefunctionGrid, potential=None, dt: float = 0.01, steps: int = 1,
              absorb: bool = False) -> list[WavefunctionGrid]:
    """Snapshots ``[psi(t0), psi(t0 + dt), ..., psi(t0 + steps dt)]``.

    ``potential`` is ``None``, an array on the grid, or a callable of the mesh
    coordinates.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    prop = SplitStepPropagator(grid, potential, dt, absorb)
    out = [grid]
    for _ in range(steps):
        out.append(prop.step(out[-1]))
        _check_norm(grid, out[-1])
    return out


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    exited: bool = False
    aborted: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions must have equal length")

    @property
    def final(self) -> np.ndarray:
        return self.positions[-1]


def default_velocity_cap(grid: WavefunctionGrid) -> float:
    """Largest group velocity the grid can represent, ``hbar pi / (m h)``."""
    return grid.hbar * math.pi / (grid.mass * min(grid.spacing))


def _stage(provider, t, x, v_cap, why, periodic):
    grid = provider(t)
    if not periodic and not grid.contains(x)[0]:
        why.add("outside")
        return None
    v, bad = velocity_field(grid, x, periodic)
    if bad[0]:
        why.add("node")
        return None
    if float(np.max(np.abs(v))) > v_cap:
        why.add("cap")
        return None
    return v[0]


def _rk4_once(provider, t, x, dt, v_cap, why, periodic):
    k1 = _stage(provider, t, x, v_cap, why, periodic)
    if k1 is None:
        return None
    k2 = _stage(provider, t + 0.5 * dt, x + 0.5 * dt * k1, v_cap, why, periodic)
    if k2 is None:
        return None
    k3 = _stage(provider, t + 0.5 * dt, x + 0.5 * dt * k2, v_cap, why, periodic)
    if k3 is None:
        return None
    k4 = _stage(provider, t + dt, x + dt * k3, v_cap, why, periodic)
    if k4 is None:
        return None
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_split(provider, t, x, dt, v_cap, depth, path, why, periodic=False):
    """Advance by ``dt``, bisecting the step on failure. Appends accepted
    sub-steps to ``path``; returns the new position or ``None`` at the floor.
    Failure reasons accumulate in the set ``why``."""
    x_new = _rk4_once(provider, t, x, dt, v_cap, why, periodic)
    if x_new is not None:
        path.append((t + dt, x_new))
        return x_new
    if depth >= MAX_HALVINGS or "outside" in why:
        return None
    half = 0.5 * dt
    x_mid = _rk4_split(provider, t, x, half, v_cap, depth + 1, path, why, periodic)
    if x_mid is None:
        return None
    return _rk4_split(provider, t + half, x_mid, half, v_cap, depth + 1, path, why, periodic)


def integrate_trajectory(psi_provider: Callable[[float], WavefunctionGrid], x0, t_span,
                         dt: float, v_cap: float | None = None,
                         periodic: bool = False) -> Trajectory:
    """Classical RK4 integration of ``dx/dt = v(x, t)``.

    A step whose stages hit a node or exceed ``v_cap`` is bisected, down to
    ``dt / 2**10``; below that the integration aborts with the partial path
    attached to the raised :class:`TrajectoryAbortError`. A stage that leaves
    the grid ends the path with ``exited=True``; with ``periodic`` the grid
    is a torus and positions are left unwrapped.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t0, t1 = (float(v) for v in t_span)
    first = psi_provider(t0)
    x = np.asarray(x0, dtype=float).reshape(first.dims)
    if not first.contains(x)[0]:
        raise ValueError("x0 outside grid extents")
    cap = default_velocity_cap(first) if v_cap is None else v_cap
    n_steps = int(math.ceil((t1 - t0) / dt - 1e-9))
    path = [(t0, x)]
    for i in range(n_steps):
        t = t0 + i * dt
        step = min(dt, t1 - t)
        why = set()
        x_new = _rk4_split(psi_provider, t, x, step, cap, 0, path, why, periodic)
        if x_new is None:
            if "outside" in why:
                return _as_trajectory(path, exited=True)
            raise TrajectoryAbortError(
                f"step underflow near a node at t={path[-1][0]:.6g}",
                trajectory=_as_trajectory(path, aborted=True),
            )
        x = x_new
    return _as_trajectory(path)


def _as_trajectory(path, exited=False, aborted=False) -> Trajectory:
    times = np.array([p[0] for p in path])
    positions = np.array([p[1] for p in path])
    return Trajectory(times, positions, exited=exited, aborted=aborted)


class StepProvider:
    """``psi(t)`` inside one base step ``[t0, t0 + dt]``.

    Exact snapshots at the start, midpoint and end; any other time is reached
    by one split step of the appropriate length from the start snapshot.
    """

    def __init__(self, prop: SplitStepPropagator, start, mid, end):
        self.prop = prop
        self.snapshots = {start.time: start, mid.time: mid, end.time: end}
        self.start = start

    def __call__(self, t: float) -> WavefunctionGrid:
        for ts, g in self.snapshots.items():
            if abs(ts - t) <= 1e-12 * max(1.0, abs(t)):
                return g
        g = self.prop.advance(self.start, t - self.start.time)
        self.snapshots[t] = g
        return g


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    """Kind plus kind-specific parameters; ``None`` means "use the kind default"."""

    kind: str
    wavenumber: float | None = None
    energy: float | None = None
    width: float | None = None
    center: float | None = None
    slit_separation: float | None = None
    barrier_height: float | None = None
    barrier_width: float | None = None
    extent: tuple[float, float] | None = None
    samples: int | None = None
    t_final: float | None = None
    dt: float | None = None
    mass: float = 1.0
    hbar: float = 1.0
    absorb: bool | None = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        for name in ("width", "slit_separation", "barrier_width", "t_final", "dt", "mass", "hbar"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("barrier_height", "energy"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    def resolved(self) -> "ScenarioSpec":
        d = dict(_DEFAULTS[self.kind])
        given = {k: v for k, v in self.__dict__.items() if v is not None}
        d.update(given)
        if self.kind == "double_slit" and self.slit_separation is None:
            d["slit_separation"] = 6.0 * d["width"]
        if self.kind == "barrier":
            if self.energy is not None:
                d["wavenumber"] = math.sqrt(2.0 * d["mass"] * self.energy) / d["hbar"]
            d["energy"] = (d["hbar"] * d["wavenumber"]) ** 2 / (2.0 * d["mass"])
        if self.kind == "plane_wave":
            lo, hi = d["extent"]
            j = round(d["wavenumber"] * (hi - lo) / (2.0 * math.pi))
            d["wavenumber"] = 2.0 * math.pi * j / (hi - lo)
        return ScenarioSpec(**d)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if v is not None}
        if "extent" in out:
            out["extent"] = list(out["extent"])
        return out


_DEFAULTS = {
    "plane_wave": dict(wavenumber=2.0, extent=(-20.0, 20.0), samples=65536, t_final=5.0,
                       dt=0.05, absorb=False),
    "gaussian_free": dict(wavenumber=1.0, width=1.0, center=-5.0, extent=(-40.0, 40.0),
                          samples=8192, t_final=10.0, dt=0.05, absorb=True),
    "double_slit": dict(wavenumber=0.0, width=1.0, center=0.0, extent=(-60.0, 60.0),
                        samples=4096, t_final=10.0, dt=0.05, absorb=True),
    # E = V0 / 2 and kappa a = 1 at these values
    "barrier": dict(wavenumber=2.0, width=10.0, center=-60.0, barrier_height=4.0,
                    barrier_width=0.5, extent=(-150.0, 150.0), samples=12288, t_final=60.0,
                    dt=0.02, absorb=True),
}


def gaussian_packet(x, center, width, k0):
    """``exp(-(x-c)^2 / (4 width^2) + i k0 x)``; ``width`` is the std of ``|psi|^2``."""
    return np.exp(-((x - center) ** 2) / (4.0 * width**2) + 1j * k0 * x)


def initial_state(spec: ScenarioSpec) -> WavefunctionGrid:
    s = spec.resolved()
    lo, hi = s.extent
    x = lo + (hi - lo) / s.samples * np.arange(s.samples)
    if s.kind == "plane_wave":
        psi = np.exp(1j * s.wavenumber * x)
    elif s.kind == "double_slit":
        half = 0.5 * s.slit_separation
        psi = (gaussian_packet(x, s.center - half, s.width, s.wavenumber)
               + gaussian_packet(x, s.center + half, s.width, s.wavenumber))
    else:
        psi = gaussian_packet(x, s.center, s.width, s.wavenumber)
    grid = WavefunctionGrid(((lo, hi),), psi, s.mass, s.hbar)
    return grid.with_values(psi / grid.norm())


def scenario_potential(spec: ScenarioSpec):
    """Potential array on the scenario grid, or ``None`` for free motion.

    The rectangular barrier is cell-averaged: each sample carries the
    fraction of its cell covered by the barrier, so the discrete barrier has
    the requested area even when the edges fall between nodes.
    """
    s = spec.resolved()
    if s.kind != "barrier":
        return None
    lo, hi = s.extent
    h = (hi - lo) / s.samples
    x = lo + h * np.arange(s.samples)
    half = 0.5 * s.barrier_width
    covered = np.clip(np.minimum(x + 0.5 * h, half) - np.maximum(x - 0.5 * h, -half), 0.0, h)
    return s.barrier_height * covered / h


# --------------------------------------------------------------------------
# ensembles


def cell_cdf(grid: WavefunctionGrid):
    """Piecewise-linear CDF of ``|psi|^2`` treating each sample as a cell of
    width ``h`` centred on its node. Returns ``(edges, cdf)``."""
    if grid.dims != 1:
        raise ValueError("cell_cdf is defined for 1D grids")
    h = grid.spacing[0]
    edges = np.append(grid.axis(0) - 0.5 * h, grid.axis(0)[-1] + 0.5 * h)
    mass = grid.density()
    cdf = np.concatenate([[0.0], np.cumsum(mass)])
    return edges, cdf / cdf[-1]


def sample_initial_positions(grid: WavefunctionGrid, n: int, seed: int) -> np.ndarray:
    """Inverse-CDF samples of ``|psi|^2``; draw ``i`` uses the stream ``(seed, i)``."""
    edges, cdf = cell_cdf(grid)
    u = np.array([np.random.default_rng([seed, i]).random() for i in range(n)])
    x = np.interp(u, cdf, edges)
    lo, hi = grid.extents[0]
    return np.clip(x, lo, np.nextafter(hi, lo))


def ks_distance(samples, grid: WavefunctionGrid) -> float:
    """Kolmogorov-Smirnov distance between ``samples`` and ``|psi|^2`` on ``grid``."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return float("nan")
    edges, cdf = cell_cdf(grid)
    return float(kstest(samples, lambda v: np.interp(v, edges, cdf)).statistic)


@dataclass
class EnsembleResult:
    scenario: ScenarioSpec
    seed: int
    dt: float
    record_times: np.ndarray
    paths: np.ndarray              # (n_records, n_traj)
    final_positions: np.ndarray
    final_grid: WavefunctionGrid
    aborted: np.ndarray
    exited: np.ndarray
    ks_trace: list = field(default_factory=list)   # (t, ks) at record times
    bin_edges: np.ndarray | None = None
    counts: np.ndarray | None = None
    psi2: np.ndarray | None = None

    @property
    def n_traj(self) -> int:
        return len(self.final_positions)

    @property
    def abort_count(self) -> int:
        return int(self.aborted.sum())

    @property
    def ks(self) -> float:
        return self.ks_trace[-1][1]


def _histogram(result: EnsembleResult, bins: int):
    grid = result.final_grid
    lo, hi = grid.extents[0]
    ok = ~result.aborted
    x = result.final_positions[ok]
    if not result.scenario.absorb:
        x = lo + np.mod(x - lo, hi - lo)
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    cell_edges, cdf = cell_cdf(grid)
    expected = np.diff(np.interp(edges, cell_edges, cdf))
    return edges, counts, expected


def _rk4_vectorised(provider, t, X, dt, cap, periodic):
    """One RK4 step for all positions; returns new positions and a failure mask."""
    def vel(time, pos):
        v, bad = velocity_field(provider(time), pos, periodic)
        bad |= np.max(np.abs(v), axis=1) > cap
        return v, bad

    k1, b1 = vel(t, X)
    k2, b2 = vel(t + 0.5 * dt, X + 0.5 * dt * k1)
    k3, b3 = vel(t + 0.5 * dt, X + 0.5 * dt * k2)
    k4, b4 = vel(t + dt, X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), b1 | b2 | b3 | b4


def run_ensemble(scenario: ScenarioSpec, n_traj: int, seed: int, *, record_every: int = 1,
                 bins: int = 100, ks_every: int | None = None,
                 check_quality: bool = True) -> EnsembleResult:
    """Propagate ``psi`` and a ``|psi|^2``-distributed trajectory ensemble together.

    Trajectories advance with vectorised RK4; any whose stages fail (node,
    velocity cap, grid exit) are redone one at a time with step bisection
    against exact intermediate snapshots.
    """
    if n_traj < 100:
        raise ValueError("n_traj must be at least 100")
    spec = scenario.resolved()
    grid0 = initial_state(spec)
    dt = spec.dt
    n_steps = int(round(spec.t_final / dt))
    prop = SplitStepPropagator(grid0, scenario_potential(spec), 0.5 * dt, spec.absorb)
    cap = default_velocity_cap(grid0)
    periodic = not spec.absorb
    lo, hi = grid0.extents[0]

    def folded(values):
        return lo + np.mod(values - lo, hi - lo) if periodic else values

    X = sample_initial_positions(grid0, n_traj, seed)[:, None]
    aborted = np.zeros(n_traj, dtype=bool)
    exited = np.zeros(n_traj, dtype=bool)
    records_t = [0.0]
    records = [X[:, 0].copy()]
    ks_trace = [(0.0, ks_distance(X[:, 0], grid0))]

    psi = grid0
    for step in range(n_steps):
        mid = prop.step(psi)
        end = prop.step(mid)
        _check_norm(grid0, end)
        provider = StepProvider(prop, psi, mid, end)
        live = ~(aborted | exited)
        X_new, fail = _rk4_vectorised(provider, psi.time, X[live], dt, cap, periodic)
        live_idx = np.flatnonzero(live)
        X[live_idx[~fail]] = X_new[~fail]
        for i in live_idx[fail]:
            path, why = [], set()
            x_new = _rk4_split(provider, psi.time, X[i], dt, cap, 0, path, why, periodic)
            if x_new is None:
                if "outside" in why:
                    exited[i] = True
                else:
                    aborted[i] = True
                if path:
                    X[i] = path[-1][1]
            else:
                X[i] = x_new
        psi = end
        t_now = (step + 1) * dt
        if (step + 1) % record_every == 0 or step + 1 == n_steps:
            records_t.append(t_now)
            records.append(X[:, 0].copy())
        if ks_every and (step + 1) % ks_every == 0 and step + 1 != n_steps:
            ok = ~(aborted | exited)
            ks_trace.append((t_now, ks_distance(folded(X[ok, 0]), psi)))

    ok = ~(aborted | exited)
    ks_trace.append((n_steps * dt, ks_distance(folded(X[ok, 0]), psi)))
    result = EnsembleResult(spec, seed, dt, np.array(records_t), np.array(records),
                            X[:, 0].copy(), psi, aborted, exited, ks_trace)
    result.bin_edges, result.counts, result.psi2 = _histogram(result, bins)
    if check_quality and aborted.sum() > ABORT_LIMIT * n_traj:
        raise EnsembleQualityError(
            f"{int(aborted.sum())} of {n_traj} trajectories aborted (limit {ABORT_LIMIT:.0%})"
        )
    return result


# --------------------------------------------------------------------------
# tunnelling


def barrier_transmission_analytic(energy: float, height: float, width: float,
                                  mass: float = 1.0, hbar: float = 1.0) -> float:
    """Plane-wave transmission through a rectangular barrier."""
    if energy <= 0:
        return 0.0
    if height == 0:
        return 1.0
    if math.isclose(energy, height, rel_tol=1e-12):
        return 1.0 / (1.0 + mass * height * width**2 / (2.0 * hbar**2))
    if energy < height:
        kappa = math.sqrt(2.0 * mass * (height - energy)) / hbar
        return 1.0 / (1.0 + height**2 * math.sinh(kappa * width) ** 2
                      / (4.0 * energy * (height - energy)))
    q = math.sqrt(2.0 * mass * (energy - height)) / hbar
    return 1.0 / (1.0 + height**2 * math.sin(q * width) ** 2
                  / (4.0 * energy * (energy - height)))


def momentum_averaged_transmission(spec: ScenarioSpec) -> float:
    """Plane-wave transmission averaged over the initial packet's momentum density."""
    s = spec.resolved()
    grid = initial_state(s)
    phi2 = np.abs(np.fft.fft(grid.values)) ** 2
    k = 2.0 * np.pi * np.fft.fftfreq(grid.samples[0], d=grid.spacing[0])
    weights = phi2 / phi2.sum()
    right = k > 0
    energies = (s.hbar * k[right]) ** 2 / (2.0 * s.mass)
    t = np.array([barrier_transmission_analytic(e, s.barrier_height, s.barrier_width,
                                                s.mass, s.hbar) for e in energies])
    return float(np.sum(weights[right] * t))


@dataclass
class TransmissionResult:
    trajectory: float
    wave: float
    mc_stderr: float
    analytic_plane_wave: float
    analytic_packet: float
    n_traj: int
    abort_count: int
    ensemble: EnsembleResult

    @property
    def agree(self) -> bool:
        return abs(self.trajectory - self.wave) <= 3.0 * max(self.mc_stderr, 1.0 / self.n_traj)


def tunneling_transmission(scenario: ScenarioSpec, n_traj: int, seed: int,
                           **kwargs) -> TransmissionResult:
    """Fraction of trajectories beyond the barrier at ``t_final`` and the
    matching wave-based probability (absorbed far-side probability included)."""
    spec = scenario.resolved()
    if spec.kind != "barrier":
        raise ValueError("tunneling_transmission needs a barrier scenario")
    lo, hi = spec.extent
    half = 0.5 * spec.barrier_width
    if not (lo + ABSORB_FRACTION * (hi - lo) < -half and half < hi - ABSORB_FRACTION * (hi - lo)):
        raise ValueError("barrier must sit inside the grid interior")
    if spec.barrier_height > 0 and spec.energy >= spec.barrier_height:
        raise ValueError("packet mean energy must lie below the barrier height")
    ens = run_ensemble(spec, n_traj, seed, **kwargs)
    ok = ~ens.aborted
    p_traj = float(np.mean(ens.final_positions[ok] > half))
    grid = ens.final_grid
    x = grid.axis(0)
    beyond = float(np.sum(grid.density()[x > half]) * grid.spacing[0]) + grid.absorbed[1]
    total = grid.norm() ** 2 + sum(grid.absorbed)
    p_wave = beyond / total
    n = int(ok.sum())
    se = math.sqrt(max(p_wave * (1.0 - p_wave), 0.0) / n)
    mono = barrier_transmission_analytic(spec.energy, spec.barrier_height, spec.barrier_width,
                                         spec.mass, spec.hbar)
    return TransmissionResult(p_traj, p_wave, se, mono, momentum_averaged_transmission(spec),
                              n, ens.abort_count, ens)


def free_crossing_fraction(spec: ScenarioSpec, t: float, threshold: float) -> float:
    """Probability that a free Gaussian packet lies beyond ``threshold`` at ``t``."""
    s = spec.resolved()
    width_t = s.width * math.sqrt(1.0 + (s.hbar * t / (2.0 * s.mass * s.width**2)) ** 2)
    mean = s.center + s.hbar * s.wavenumber * t / s.mass
    return 0.5 * math.erfc((threshold - mean) / (math.sqrt(2.0) * width_t))

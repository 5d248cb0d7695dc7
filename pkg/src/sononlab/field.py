"""Sonon carrier-wave fields.

A sonon of quantum numbers (m, n) is evaluated as a ring integral over the
source circle of radius ``R_o`` lying in the z = 0 plane::

    xi_mn(p, t) = A exp(-i omega0 t) * R_mn(p)
    R_mn(p)     = int_0^{2pi} exp(-i (m theta' - n phi)) j_m(k_r sigma) k_r R_o dphi

with ``sigma = |p - q(phi)|`` and ``q(phi) = R_o (cos phi, sin phi, 0)``.
``theta'`` is the poloidal angle of ``p`` in its cross-section plane,
``atan2(p_z, rho_p - R_o)``.

Units: c = 1 and lengths are in units of 1/k_r unless the caller passes
other values explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import jv, spherical_jn, spherical_yn

from .errors import SingularGeometryError

__all__ = [
    "SononMode",
    "FieldPoint",
    "spherical_bessel",
    "ring_integral",
    "sonon_field",
    "chi_far_field",
    "far_field_amplitude",
    "outgoing_envelope",
    "far_field_deviation",
    "field_scan",
    "wave_residual",
    "kg_dispersion_residual",
]

DEFAULT_QUAD_NODES = 512
MIN_QUAD_NODES = 8

# Below these arguments the closed forms lose digits to cancellation
# (error ~ eps * (2m+1)!! (2m-1)!! / x^(2m+1)), so the power series is used.
SERIES_SWITCH = (1e-3, 0.25, 0.75, 1.5)
_SERIES_TERMS = 24


@dataclass(frozen=True)
class SononMode:
    m: int = 1
    n: int = 1
    k_r: float = 1.0
    R_o: float = 1.0
    omega0: float = 1.0
    A: complex = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or int(self.n) != self.n:
            raise ValueError("m and n must be integers")
        if self.m < 0 or self.n < 0:
            raise ValueError("m and n must be non-negative")
        if self.m == 0 and self.n == 0:
            raise ValueError("(m, n) = (0, 0) is not a sonon mode")
        if self.m > 3:
            raise ValueError("only m <= 3 is supported")
        for name in ("k_r", "R_o", "omega0"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")

    @property
    def chiral(self) -> bool:
        return self.n != 0


@dataclass(frozen=True)
class FieldPoint:
    position: tuple[float, float, float]
    time: float = 0.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3:
            raise ValueError("position must be a 3-vector")
        if not all(math.isfinite(v) for v in pos) or not math.isfinite(self.time):
            raise ValueError("field point coordinates must be finite")
        object.__setattr__(self, "position", pos)


def _double_factorial(k: int) -> int:
    return math.prod(range(k, 0, -2)) if k > 0 else 1


def _series(m: int, x: np.ndarray) -> np.ndarray:
    # j_m(x) = x^m / (2m+1)!! * sum_k (-x^2/2)^k / (k! (2m+3)(2m+5)...(2m+2k+1))
    u = -0.5 * x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, _SERIES_TERMS):
        term = term * u / (k * (2 * m + 2 * k + 1))
        total = total + term
    return x**m / _double_factorial(2 * m + 1) * total


def _closed_form(m: int, x: np.ndarray) -> np.ndarray:
    s, c = np.sin(x), np.cos(x)
    if m == 0:
        return s / x
    if m == 1:
        return s / x**2 - c / x
    if m == 2:
        return (3.0 / x**2 - 1.0) * s / x - 3.0 * c / x**2
    return (15.0 / x**3 - 6.0 / x) * s / x - (15.0 / x**2 - 1.0) * c / x


def spherical_bessel(m: int, x):
    """Spherical Bessel function of the first kind ``j_m(x)`` for m in 0..3.

    Accepts scalars or arrays; scalars in, float out.
    """
    if m not in (0, 1, 2, 3):
        raise ValueError(f"spherical_bessel supports m in 0..3, got {m!r}")
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or not np.all(np.isfinite(xa)):
        raise ValueError("spherical_bessel requires finite x >= 0")
    small = xa < SERIES_SWITCH[m]
    out = np.empty_like(xa)
    if np.any(small):
        out[small] = _series(m, xa[small])
    if np.any(~small):
        out[~small] = _closed_form(m, xa[~small])
    if np.ndim(x) == 0:
        return float(out)
    return out


def _geometry(mode: SononMode, position: Sequence[float], quad_nodes: int):
    px, py, pz = (float(v) for v in position)
    rho = math.hypot(px, py)
    if math.hypot(rho - mode.R_o, pz) <= 1e-12 * mode.R_o:
        raise SingularGeometryError(
            f"point {tuple(position)} lies on the source ring (R_o={mode.R_o})"
        )
    phi = 2.0 * np.pi * np.arange(quad_nodes) / quad_nodes
    dx = px - mode.R_o * np.cos(phi)
    dy = py - mode.R_o * np.sin(phi)
    sigma = np.sqrt(dx * dx + dy * dy + pz * pz)
    theta_p = math.atan2(pz, rho - mode.R_o)
    return phi, sigma, theta_p


def ring_integral(mode: SononMode, position: Sequence[float],
                  quad_nodes: int = DEFAULT_QUAD_NODES) -> complex:
    """Time-independent factor ``R_mn(p)`` by the periodic trapezoid rule."""
    if quad_nodes < MIN_QUAD_NODES:
        raise ValueError(f"quad_nodes must be >= {MIN_QUAD_NODES}")
    phi, sigma, theta_p = _geometry(mode, position, quad_nodes)
    radial = spherical_bessel(mode.m, mode.k_r * sigma)
    integrand = np.exp(1j * mode.n * phi) * radial
    weight = 2.0 * np.pi / quad_nodes * mode.k_r * mode.R_o
    return complex(np.exp(-1j * mode.m * theta_p) * weight * integrand.sum())


def sonon_field(mode: SononMode, p: FieldPoint,
                quad_nodes: int = DEFAULT_QUAD_NODES) -> complex:
    """Complex sonon field ``xi_mn`` at ``p``."""
    base = mode.A * ring_integral(mode, p.position, quad_nodes)
    return base * complex(np.exp(-1j * mode.omega0 * p.time))


def chi_far_field(r: float, k_r: float):
    """Far-field carrier ``sin(k_r r) / r``."""
    ra = np.asarray(r, dtype=float)
    if np.any(ra <= 0):
        raise ValueError("chi_far_field requires r > 0")
    out = np.sin(k_r * ra) / ra
    return float(out) if np.ndim(r) == 0 else out


def far_field_amplitude(mode: SononMode, polar_angle: float) -> float:
    """Asymptotic value of ``r |R_mn|`` envelope along a ray at ``polar_angle``.

    Expanding ``sigma ~ r - R_o sin(Theta) cos(phi - phi_p)`` in the ring
    integral and applying the Jacobi-Anger identity gives
    ``|R_mn| -> 2 pi R_o |J_n(k_r R_o sin Theta)| |sin(k_r r + delta)| / r``.
    """
    beta = mode.k_r * mode.R_o * math.sin(polar_angle)
    return 2.0 * math.pi * mode.R_o * abs(float(jv(mode.n, beta))) * abs(mode.A)


def _ray_point(r: float, polar_angle: float, azimuth: float):
    s = math.sin(polar_angle)
    return (r * s * math.cos(azimuth), r * s * math.sin(azimuth), r * math.cos(polar_angle))


def outgoing_envelope(mode: SononMode, position: Sequence[float],
                      quad_nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Envelope of ``|xi_mn|`` at ``position``.

    ``j_m`` is the real part of the spherical Hankel function ``h_m``, so the
    ring integral with ``h_m`` in place of ``j_m`` is the analytic signal of
    the field; its modulus carries no carrier oscillation.
    """
    phi, sigma, theta_p = _geometry(mode, position, quad_nodes)
    x = mode.k_r * sigma
    if np.any(x < SERIES_SWITCH[mode.m]):
        raise SingularGeometryError("envelope undefined this close to the ring")
    hankel = spherical_jn(mode.m, x) + 1j * spherical_yn(mode.m, x)
    weight = 2.0 * np.pi / quad_nodes * mode.k_r * mode.R_o
    return float(abs(mode.A) * abs(weight * np.sum(np.exp(1j * mode.n * phi) * hankel)))


def far_field_deviation(mode: SononMode, r: float, polar_angle: float = math.pi / 2,
                        azimuth: float = 0.0,
                        quad_nodes: int = DEFAULT_QUAD_NODES) -> float:
    """Relative deviation of the sonon envelope from the carrier envelope.

    ``sin(k_r r)/r`` has envelope ``1/r``; the sonon envelope tends to
    ``far_field_amplitude / r``. Returns ``|r * envelope / amplitude - 1|``,
    which falls off as ``(R_o / r)^2``.
    """
    amp = far_field_amplitude(mode, polar_angle)
    if amp <= 1e-12 * mode.R_o:
        raise SingularGeometryError("far-field amplitude vanishes along this ray")
    env = outgoing_envelope(mode, _ray_point(r, polar_angle, azimuth), quad_nodes)
    return abs(r * env / amp - 1.0)


def field_scan(mode: SononMode, radii: Sequence[float], polar_angle: float = math.pi / 2,
               azimuth: float = 0.0, time: float = 0.0,
               quad_nodes: int = DEFAULT_QUAD_NODES) -> list[dict]:
    """Rows ``r, re_xi, im_xi, abs_xi, chi_far, rel_dev`` along a ray."""
    rows = []
    for r in radii:
        xi = sonon_field(mode, FieldPoint(_ray_point(r, polar_angle, azimuth), time), quad_nodes)
        rows.append({
            "r": float(r),
            "re_xi": xi.real,
            "im_xi": xi.imag,
            "abs_xi": abs(xi),
            "chi_far": chi_far_field(r, mode.k_r),
            "rel_dev": far_field_deviation(mode, r, polar_angle, azimuth, quad_nodes),
        })
    return rows


def wave_residual(field_sampler: Callable, p: FieldPoint, h: float, c: float = 1.0,
                  wavenumber: float | None = None) -> float:
    """``|f_tt - c^2 lap f|`` at ``p`` by second-order central differences.

    ``field_sampler(x, y, z, t)`` may return real or complex values. The same
    step ``h`` is used in space and time. Pass ``wavenumber`` to enforce the
    resolution guard ``h * k < 0.1``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if wavenumber is not None and h * wavenumber >= 0.1:
        raise ValueError(f"step too coarse: h*k = {h * wavenumber:.3g} >= 0.1")
    x, y, z = p.position
    t = p.time
    f0 = field_sampler(x, y, z, t)
    f_tt = field_sampler(x, y, z, t + h) - 2.0 * f0 + field_sampler(x, y, z, t - h)
    lap = (field_sampler(x + h, y, z, t) + field_sampler(x - h, y, z, t)
           + field_sampler(x, y + h, z, t) + field_sampler(x, y - h, z, t)
           + field_sampler(x, y, z + h, t) + field_sampler(x, y, z - h, t)
           - 6.0 * f0)
    return float(abs((f_tt - c * c * lap) / (h * h)))


def kg_dispersion_residual(omega: float, k: float, c: float, omega0: float) -> float:
    """``omega^2 - c^2 k^2 - omega0^2``; zero on the Klein-Gordon mass shell."""
    if not c > 0:
        raise ValueError("c must be positive")
    return omega * omega - c * c * k * k - omega0 * omega0

"""Bell-test geometry audit and CHSH Monte Carlo for local models.

The audit asks whether a straight-line light-speed signal between the two
detectors could connect the measurement events. Photon arms may be routed
through fibre of length ``D``; what matters here is the detector separation
``d``.

Correlations use the photon-polarisation convention ``E(a, b) = cos 2(a - b)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT
from scipy.constants import h as PLANCK

from .errors import ContractError, EstimatorError

__all__ = [
    "CONVENTION",
    "SPEED_OF_LIGHT",
    "ExperimentGeometry",
    "LocalModelSpec",
    "TrialRecord",
    "TrialSet",
    "CHSHResult",
    "PAIR_LABELS",
    "audit_experiment",
    "list_presets",
    "load_preset",
    "chsh",
    "strategy_s",
    "brute_force_lhv_max",
    "simulate_local_model",
    "shared_phase_outcomes",
    "quantum_correlation",
    "bremermann_limit",
]

CONVENTION = "photon polarisation: E(a, b) = cos 2(a - b)"
MODEL_KINDS = ("deterministic_table", "shared_phase", "quantum_oracle")
PAIR_LABELS = ("a,b", "a,b'", "a',b", "a',b'")
MIN_TRIALS_PER_PAIR = 100
# trials per RNG stream; stream (seed, pair, chunk) covers one chunk
CHUNK = 8192
NO_COMMUNICATION = (
    "nonlocal correlations require the communication channel in this framework"
)


# --- geometry audit ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentGeometry:
    name: str
    source_position: tuple[float, float, float]
    detector_positions: tuple[tuple[float, float, float], tuple[float, float, float]]
    path_lengths: tuple[float, float]
    setting_switch_time: float | None = None
    measurement_window: float | None = None
    notes: str = ""

    def __post_init__(self):
        src = tuple(float(v) for v in self.source_position)
        dets = tuple(tuple(float(v) for v in d) for d in self.detector_positions)
        paths = tuple(float(v) for v in self.path_lengths)
        if len(src) != 3 or len(dets) != 2 or any(len(d) != 3 for d in dets):
            raise ValueError("need a source 3-vector and two detector 3-vectors")
        if len(paths) != 2:
            raise ValueError("need two path lengths")
        if not all(math.isfinite(v) for v in src + dets[0] + dets[1] + paths):
            raise ValueError("geometry must be finite")
        for i, (det, path) in enumerate(zip(dets, paths)):
            straight = math.dist(src, det)
            if path < straight * (1 - 1e-9):
                raise ValueError(
                    f"path_lengths[{i}] = {path} m is shorter than the straight line "
                    f"{straight:.6g} m from source to detector"
                )
        for name in ("setting_switch_time", "measurement_window"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be a non-negative time")
        object.__setattr__(self, "source_position", src)
        object.__setattr__(self, "detector_positions", dets)
        object.__setattr__(self, "path_lengths", paths)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentGeometry:
        known = {"name", "source_xyz_m", "detectors_xyz_m", "path_lengths_m",
                 "switch_time_s", "window_s", "notes"}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown preset keys: {sorted(extra)}")
        return cls(
            name=data["name"],
            source_position=data["source_xyz_m"],
            detector_positions=data["detectors_xyz_m"],
            path_lengths=data["path_lengths_m"],
            setting_switch_time=data.get("switch_time_s"),
            measurement_window=data.get("window_s"),
            notes=data.get("notes", ""),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "source_xyz_m": list(self.source_position),
            "detectors_xyz_m": [list(d) for d in self.detector_positions],
            "path_lengths_m": list(self.path_lengths),
            "switch_time_s": self.setting_switch_time,
            "window_s": self.measurement_window,
            "notes": self.notes,
        }


def list_presets() -> list[str]:
    root = resources.files("sononlab") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ExperimentGeometry:
    """Load a shipped preset by key (e.g. ``"aspect1982"``) or a JSON file path."""
    if name in list_presets():
        text = (resources.files("sononlab") / "presets" / f"{name}.json").read_text()
    else:
        try:
            with open(name) as fh:
                text = fh.read()
        except OSError as exc:
            raise ValueError(
                f"unknown preset {name!r}; shipped presets are {list_presets()}"
            ) from exc
    return ExperimentGeometry.from_dict(json.loads(text))


def _km(metres: float) -> float:
    # rounded to the millimetre for readable output; the *_m fields are exact
    return round(metres / 1e3, 6)


def audit_experiment(geom: ExperimentGeometry, c: float = SPEED_OF_LIGHT) -> dict:
    """Classify whether a straight-line light signal between detectors is excluded.

    Every provided timing window is compared with ``d/c``. The loophole is
    closed only if all windows are shorter than ``d/c``; it is open when
    ``d = 0`` or any window is long enough; with no windows and ``d > 0`` the
    result is indeterminate.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    src = geom.source_position
    d0, d1 = geom.detector_positions
    d = math.dist(d0, d1)
    light_time = d / c
    windows = [(label, value) for label, value in
               (("setting_switch_time", geom.setting_switch_time),
                ("measurement_window", geom.measurement_window)) if value is not None]
    comparisons = [{
        "window": label,
        "value_s": value,
        "d_over_c_s": light_time,
        "light_connects": value >= light_time,
    } for label, value in windows]
    if d == 0:
        classification = "chi_loophole_open"
    elif not windows:
        classification = "indeterminate"
    elif all(not cmp["light_connects"] for cmp in comparisons):
        classification = "chi_loophole_closed"
    else:
        classification = "chi_loophole_open"
    straight = [math.dist(src, d0), math.dist(src, d1)]
    return {
        "name": geom.name,
        "path_lengths_m": list(geom.path_lengths),
        "path_lengths_km": [_km(p) for p in geom.path_lengths],
        "D_total_m": sum(geom.path_lengths),
        "source_detector_distances_m": straight,
        "source_detector_distances_km": [_km(s) for s in straight],
        "d_m": d,
        "d_km": _km(d),
        "d_over_c_s": light_time,
        "D_over_c_s": [p / c for p in geom.path_lengths],
        "switch_time_s": geom.setting_switch_time,
        "window_s": geom.measurement_window,
        "comparisons": comparisons,
        "classification": classification,
        # far-field carrier amplitude falls as 1/d; reported as context, no cutoff
        "chi_amplitude_scaling_per_m": None if d == 0 else 1.0 / d,
        "speed_of_light_m_s": c,
        "notes": geom.notes,
    }


# --- trials and estimator -------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    settings: tuple[float, float]
    outcomes: tuple[int, int]
    hidden_var: float | None = None

    def __post_init__(self):
        if any(o not in (-1, 1) for o in self.outcomes):
            raise ValueError("outcomes must be +1 or -1")


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Column store of trials; ``pair`` indexes ``PAIR_LABELS``."""

    pair: np.ndarray
    a: np.ndarray
    b: np.ndarray
    A: np.ndarray
    B: np.ndarray
    hidden: np.ndarray

    def __post_init__(self):
        n = len(self.pair)
        if any(len(getattr(self, k)) != n for k in ("a", "b", "A", "B", "hidden")):
            raise ValueError("trial columns must have equal length")
        if not (np.all(np.abs(self.A) == 1) and np.all(np.abs(self.B) == 1)):
            raise ValueError("outcomes must be +1 or -1")

    def __len__(self) -> int:
        return len(self.pair)

    def records(self):
        for i in range(len(self)):
            lam = float(self.hidden[i])
            yield TrialRecord((float(self.a[i]), float(self.b[i])),
                              (int(self.A[i]), int(self.B[i])),
                              None if math.isnan(lam) else lam)

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], settings) -> TrialSet:
        a, a2, b, b2 = settings
        lookup = {(a, b): 0, (a, b2): 1, (a2, b): 2, (a2, b2): 3}
        pair = np.array([lookup.get(r.settings, -1) for r in records], dtype=np.int8)
        return cls(
            pair,
            np.array([r.settings[0] for r in records], dtype=float),
            np.array([r.settings[1] for r in records], dtype=float),
            np.array([r.outcomes[0] for r in records], dtype=np.int8),
            np.array([r.outcomes[1] for r in records], dtype=np.int8),
            np.array([np.nan if r.hidden_var is None else r.hidden_var for r in records]),
        )


@dataclass(frozen=True)
class CHSHResult:
    correlations: dict  # label -> (E, stderr, n)
    S: float
    S_err: float
    settings: tuple[float, float, float, float]


def _pair_angles(settings):
    a, a2, b, b2 = (float(s) for s in settings)
    return ((a, b), (a, b2), (a2, b), (a2, b2))


def chsh(trials: TrialSet, settings) -> CHSHResult:
    """CHSH estimate ``S = E(a,b) - E(a,b') + E(a',b) + E(a',b')``.

    Each ``E`` is the mean outcome product over trials at that setting pair,
    with binomial standard error ``sqrt((1 - E^2) / n)``.
    """
    settings = tuple(float(s) for s in settings)
    if len(settings) != 4:
        raise EstimatorError("settings must be (a, a', b, b')")
    corr = {}
    for label, (sa, sb) in zip(PAIR_LABELS, _pair_angles(settings)):
        sel = (trials.a == sa) & (trials.b == sb)
        n = int(sel.sum())
        if n == 0:
            raise EstimatorError(f"no trials at setting pair {label} = ({sa}, {sb})")
        if n < MIN_TRIALS_PER_PAIR:
            raise EstimatorError(
                f"setting pair {label} has {n} trials; need >= {MIN_TRIALS_PER_PAIR}"
            )
        prod = trials.A[sel].astype(np.int64) * trials.B[sel]
        E = float(prod.sum()) / n
        corr[label] = (E, math.sqrt(max(0.0, 1.0 - E * E) / n), n)
    e = [corr[k][0] for k in PAIR_LABELS]
    S = e[0] - e[1] + e[2] + e[3]
    S_err = math.sqrt(sum(corr[k][1] ** 2 for k in PAIR_LABELS))
    return CHSHResult(corr, S, S_err, settings)


def strategy_s(table: Sequence[int]) -> int:
    """CHSH value of the deterministic strategy ``(A(a), A(a'), B(b), B(b'))``."""
    Aa, Aa2, Bb, Bb2 = (int(v) for v in table)
    if any(v not in (-1, 1) for v in (Aa, Aa2, Bb, Bb2)):
        raise ValueError("strategy entries must be +1 or -1")
    return Aa * Bb - Aa * Bb2 + Aa2 * Bb + Aa2 * Bb2


def brute_force_lhv_max(settings=None, tie_alice: bool = False) -> int:
    """Largest ``S`` over all deterministic local strategies.

    The enumeration does not look at the angles: deterministic outcomes are a
    function of the setting label only. ``tie_alice`` restricts to strategies
    with ``A(a) = A(a')``.
    """
    best = None
    for table in itertools.product((1, -1), repeat=4):
        if tie_alice and table[0] != table[1]:
            continue
        s = strategy_s(table)
        best = s if best is None else max(best, s)
    return best


# --- local models ------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalModelSpec:
    kind: str
    table: tuple[int, int, int, int] | None = None
    communication_allowed: bool = False
    convention: str = CONVENTION

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.kind == "deterministic_table":
            if self.table is None or len(self.table) != 4:
                raise ValueError("deterministic_table needs exactly 4 entries")
            if any(int(v) != v or v not in (-1, 1) for v in self.table):
                raise ValueError("deterministic_table entries must be +1 or -1")
            object.__setattr__(self, "table", tuple(int(v) for v in self.table))
        elif self.table is not None:
            raise ValueError(f"{self.kind} takes no strategy table")


def quantum_correlation(a: float, b: float):
    """``cos 2(a - b)``, polarisation correlation of a maximally entangled photon pair."""
    out = np.cos(2.0 * (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    return float(out) if out.ndim == 0 else out


def _sign(x):
    return np.where(x >= 0, 1, -1).astype(np.int8)


def shared_phase_outcomes(a, b, lam):
    """``A = sign cos 2(a - lam)``, ``B = -sign cos 2(b - lam)``; ``sign(0) = +1``."""
    lam = np.asarray(lam, dtype=float)
    return _sign(np.cos(2.0 * (a - lam))), -_sign(np.cos(2.0 * (b - lam)))


def simulate_local_model(model: LocalModelSpec, settings, trials: int, seed: int) -> TrialSet:
    """``trials`` runs at each of the four setting pairs.

    Randomness comes from stream ``(seed, pair, chunk)`` for each block of
    ``CHUNK`` trials, so results depend only on the seed and trial count.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if model.kind == "quantum_oracle" and not model.communication_allowed:
        raise ContractError(NO_COMMUNICATION)
    cols = {k: [] for k in ("pair", "a", "b", "A", "B", "hidden")}
    for p, (sa, sb) in enumerate(_pair_angles(settings)):
        for start in range(0, trials, CHUNK):
            n = min(CHUNK, trials - start)
            rng = np.random.default_rng([seed, p, start // CHUNK])
            lam = np.full(n, np.nan)
            if model.kind == "deterministic_table":
                Aa, Aa2, Bb, Bb2 = model.table
                A = np.full(n, Aa if p in (0, 1) else Aa2, dtype=np.int8)
                B = np.full(n, Bb if p in (0, 2) else Bb2, dtype=np.int8)
            elif model.kind == "shared_phase":
                lam = rng.uniform(0.0, 2.0 * math.pi, n)
                A, B = shared_phase_outcomes(sa, sb, lam)
            else:
                E = quantum_correlation(sa, sb)
                A = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
                same = rng.random(n) < 0.5 * (1.0 + E)
                B = np.where(same, A, -A).astype(np.int8)
            cols["pair"].append(np.full(n, p, dtype=np.int8))
            cols["a"].append(np.full(n, sa))
            cols["b"].append(np.full(n, sb))
            cols["A"].append(A)
            cols["B"].append(B)
            cols["hidden"].append(lam)
    return TrialSet(**{k: np.concatenate(v) for k, v in cols.items()})


def bremermann_limit(mass: float) -> float:
    """Maximum computation rate ``m c^2 / h`` in 1/s for a mass in kg."""
    if not (math.isfinite(mass) and mass > 0):
        raise ValueError("mass must be positive")
    # dividing by the mass quantum h/c^2 makes m = h/c^2 map to exactly 1
    return mass / (PLANCK / SPEED_OF_LIGHT**2)

"""Command-line entry point: ``sononlab <subcommand> [--config FILE] [flags]``.

Exit codes: 0 ok, 2 configuration, 3 runtime or numerical, 4 analysis quality.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import typing
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .bell import (
    CONVENTION,
    PAIR_LABELS,
    LocalModelSpec,
    audit_experiment,
    brute_force_lhv_max,
    chsh,
    load_preset,
    simulate_local_model,
)
from .config import PARAMS, RunConfig, load_config_file, parse_config, parse_flag_value
from .errors import AnalysisError, ConfigError, ContractError, NumericalError
from .field import SononMode, field_scan
from .pilot import ScenarioSpec, run_ensemble, tunneling_transmission
from .sync import SweepConfig, geometric_effect, tetrahedron_run, triangle_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ANALYSIS = 0, 2, 3, 4


class Emitter:
    """Writes data files atomically and remembers their checksums."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def _write(self, rel: str, data: bytes):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return hashlib.sha256(data).hexdigest()

    def csv(self, rel: str, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        self.files[rel] = self._write(rel, buf.getvalue().encode())

    def json(self, rel: str, obj):
        self.files[rel] = self._write(rel, _dumps(obj))

    def manifest(self, obj):
        self._write("manifest.json", _dumps(obj))
        for rel, digest in self.files.items():
            actual = hashlib.sha256((self.root / rel).read_bytes()).hexdigest()
            if actual != digest:
                raise OSError(f"checksum mismatch for {rel} after writing")


def _cell(v):
    if isinstance(v, (bool, str)):
        return v
    if isinstance(v, int) or (hasattr(v, "dtype") and v.dtype.kind in "iu"):
        return int(v)
    return repr(float(v))


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode()


def _configured(key: str, build):
    try:
        return build()
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


# --- subcommands --------------------------------------------------------------------

def run_field_scan(cfg: RunConfig, out: Emitter) -> dict:
    p = cfg.params
    mode = _configured("m", lambda: SononMode(p.m, p.n, p.k_r, p.R_o, p.omega0, p.A))
    rows = field_scan(mode, p.radii, math.radians(p.polar_angle_deg),
                      math.radians(p.azimuth_deg), p.time, p.quad_nodes)
    keys = ["r", "re_xi", "im_xi", "abs_xi", "chi_far", "rel_dev"]
    out.csv("field_scan.csv", keys, ([row[k] for k in keys] for row in rows))
    return {
        "units": {"field_scan.csv": {
            "r": "length (same unit as R_o and 1/k_r)",
            "re_xi": "field amplitude (units of A)",
            "im_xi": "field amplitude (units of A)",
            "abs_xi": "field amplitude (units of A)",
            "chi_far": "sin(k_r r)/r, 1/length",
            "rel_dev": "dimensionless |r envelope / far-field amplitude - 1|",
        }},
        "conventions": {"time_factor": "exp(-i omega0 t)", "c": 1.0},
    }


def run_pilot_wave(cfg: RunConfig, out: Emitter) -> dict:
    p = cfg.params
    keys = ("wavenumber", "energy", "width", "center", "slit_separation", "barrier_height",
            "barrier_width", "extent", "samples", "t_final", "dt", "mass", "hbar", "absorb")
    spec = _configured("scenario", lambda: ScenarioSpec(
        p.scenario, **{k: getattr(p, k) for k in keys}).resolved())
    extras = {}
    if spec.kind == "barrier":
        _configured("energy", lambda: _checked_barrier(spec))
        res = tunneling_transmission(spec, p.trials, cfg.seed,
                                     record_every=p.record_every, bins=p.bins)
        ens = res.ensemble
        extras["transmission"] = {
            "trajectory": res.trajectory,
            "wave": res.wave,
            "mc_stderr": res.mc_stderr,
            "analytic_plane_wave": res.analytic_plane_wave,
            "analytic_packet": res.analytic_packet,
            "agree_within_3_stderr": res.agree,
        }
    else:
        ens = run_ensemble(spec, p.trials, cfg.seed, record_every=p.record_every, bins=p.bins)
    out.csv("trajectories.csv", ["traj_id", "t", "x"],
            ((i, t, x) for i in range(ens.n_traj)
             for t, x in zip(ens.record_times, ens.paths[:, i])))
    centers = 0.5 * (ens.bin_edges[:-1] + ens.bin_edges[1:])
    out.csv("histogram.csv", ["bin_center", "count", "psi2"],
            zip(centers, ens.counts, ens.psi2))
    grid = ens.final_grid
    return {
        "scenario": spec.as_dict(),
        "seed": cfg.seed,
        "dt": ens.dt,
        "grid": {"extent": list(grid.extents[0]), "samples": grid.samples[0],
                 "spacing": grid.spacing[0]},
        "abort_count": ens.abort_count,
        "exit_count": int(ens.exited.sum()),
        "ks_final": ens.ks,
        **extras,
        "units": {
            "trajectories.csv": {"traj_id": "index", "t": "time (hbar = m = 1 units)",
                                 "x": "position; unwrapped on periodic domains"},
            "histogram.csv": {"bin_center": "position", "count": "trajectories in bin",
                              "psi2": "probability of |psi(T)|^2 in the bin"},
        },
    }


def _checked_barrier(spec):
    if spec.barrier_height > 0 and spec.energy >= spec.barrier_height:
        raise ValueError("packet mean energy must lie below the barrier height")
    return spec


def run_kuramoto(cfg: RunConfig, out: Emitter) -> dict:
    p = cfg.params
    sweep_cfg = _configured("kernel", lambda: SweepConfig(
        coupling_strength=p.coupling_strength, perimeter=p.perimeter, kernel=p.kernel,
        k_r=p.k_r, kernel_table=None if p.kernel_table is None else tuple(p.kernel_table),
        jitter=p.jitter, base_freq=p.base_freq, tol=p.tol, window=p.window,
        transient=p.transient, dt=p.dt))
    _configured("window", sweep_cfg.timing)
    if p.mode == "triangle":
        result = triangle_sweep(sweep_cfg, p.angles, p.trials, cfg.seed)
        label = "angle_deg"
    else:
        result = tetrahedron_run(p.edge, sweep_cfg, trials=p.trials, seed=cfg.seed)
        label = "geometry"
    out.csv("sweep.csv", [label, "trial", "final_r", "cluster_count"], result.rows())
    ks = range(1, result.n_oscillators + 1)
    summary = result.summary()
    out.csv("summary.csv", [label, "mean_r", "std_r"] + [f"p_{k}_clusters" for k in ks],
            ([row["label"], row["mean_r"], row["std_r"]] + [row[f"p_{k}_clusters"] for k in ks]
             for row in summary))
    labels = result.labels
    effect = None
    if len(labels) > 1:
        pair = (90.0, 180.0) if {90.0, 180.0} <= set(labels) else (labels[0], labels[-1])
        effect = geometric_effect(result, *pair)
    return {
        "mode": p.mode,
        "sweep": result.metadata,
        "geometric_effect": effect,
        "coherence_mapping": "coherence is modelled as frequency locking (hypothesis)",
        "units": {
            "sweep.csv": {label: "degrees" if label == "angle_deg" else "label",
                          "trial": "index", "final_r": "order parameter, window mean",
                          "cluster_count": "count"},
            "summary.csv": {"mean_r": "order parameter", "std_r": "order parameter",
                            "p_k_clusters": "fraction of trials"},
        },
    }


def run_bell(cfg: RunConfig, out: Emitter) -> dict:
    p = cfg.params
    model = _configured("model", lambda: LocalModelSpec(
        p.model, None if p.table is None else tuple(p.table), p.communication_allowed))
    settings = tuple(math.radians(s) for s in p.settings_deg)
    trials = simulate_local_model(model, settings, p.trials, cfg.seed)
    res = chsh(trials, settings)
    rows = [(k, res.correlations[k][0], res.correlations[k][1]) for k in PAIR_LABELS]
    rows.append(("S", res.S, res.S_err))
    out.csv("chsh.csv", ["setting_pair", "E", "stderr"], rows)
    return {
        "model": p.model,
        "communication_allowed": p.communication_allowed,
        "convention": CONVENTION,
        "seed": cfg.seed,
        "trials": p.trials,
        "settings_deg": list(p.settings_deg),
        "S": res.S,
        "S_err": res.S_err,
        "lhv_bound": brute_force_lhv_max(settings),
        "units": {"chsh.csv": {"setting_pair": "label (row S holds S and S_err)",
                               "E": "dimensionless", "stderr": "binomial standard error"}},
    }


def run_audit(cfg: RunConfig, out: Emitter) -> dict:
    p = cfg.params
    reports = {}
    for name in p.presets:
        geom = _configured("presets", lambda: load_preset(name))
        key = Path(name).stem
        report = audit_experiment(geom, p.c)
        out.json(f"{key}/audit.json", report)
        reports[key] = report["classification"]
    return {
        "classifications": reports,
        "units": {"audit.json": {"*_m": "metres", "*_km": "kilometres (mm rounding)",
                                 "*_s": "seconds"}},
    }


RUNNERS = {
    "field-scan": run_field_scan,
    "pilot-wave": run_pilot_wave,
    "kuramoto": run_kuramoto,
    "bell": run_bell,
    "audit": run_audit,
}


def run(cfg: RunConfig) -> dict:
    """Run one configured experiment; returns the manifest."""
    started = datetime.now(timezone.utc).isoformat()
    out = Emitter(cfg.output_dir)
    details = RUNNERS[cfg.subcommand](cfg, out)
    manifest = {
        "tool": "sononlab",
        "version": __version__,
        "config": cfg.echo(),
        "started_utc": started,
        "finished_utc": datetime.now(timezone.utc).isoformat(),
        "files": {rel: {"sha256": digest} for rel, digest in sorted(out.files.items())},
        **details,
    }
    out.manifest(manifest)
    return manifest


# --- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sononlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, model in PARAMS.items():
        sub = subs.add_parser(name, help=f"run the {name} experiment")
        sub.add_argument("--config", metavar="PATH", help="JSON run config")
        sub.add_argument("--seed", type=int, help="RNG seed (default 0)")
        sub.add_argument("--out", dest="output_dir", metavar="DIR", help="output directory")
        sub.add_argument("--trials", type=int, help="trials / trajectories")
        group = sub.add_argument_group("parameters")
        for key in model.model_fields:
            if key == "trials":
                continue
            group.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE",
                               type=parse_flag_value,
                               help="JSON value or comma list")
    return parser


def _listify(model, args: dict) -> dict:
    # a single flag value for a list-valued key means a one-element list
    for key, info in model.model_fields.items():
        value = args.get(key)
        if value is not None and typing.get_origin(info.annotation) is list \
                and not isinstance(value, list):
            args[key] = [value]
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    subcommand = args.pop("subcommand")
    config_path = args.pop("config")
    args = _listify(PARAMS[subcommand], args)
    try:
        file_values = load_config_file(config_path) if config_path else {}
        cfg = parse_config(subcommand, file_values, args)
        manifest = run(cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AnalysisError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (NumericalError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    files = ", ".join(manifest["files"])
    print(f"wrote {files} and manifest.json to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

"""Named analysis pipelines and their on-disk artifacts.

Each recipe turns a validated configuration into a directory of results:
CSV tables for anything one-dimensional, the binary grid container for
maps, a manifest recording every resolved input, and a summary holding
the headline scalars so scripted checks never have to parse the grids.
The command line is a thin wrapper around `run`; library callers can
invoke the per-recipe functions directly with a LoadedConfig.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, analysis, correlate, gridio, noise, pipeline
from . import tagstream, trajectories
from .config import TWO_PI, ConfigError, LoadedConfig, load
from .model import SystemConfig


@dataclass(frozen=True)
class ExperimentSpec:
    """One requested run: recipe name, config source, output directory."""

    recipe: str
    config: str
    out_dir: str
    overrides: tuple = ()
    workers: int = 1
    seed: int | None = None


REGISTRY: dict = {}


def _recipe(name):
    def mark(fn):
        REGISTRY[name] = fn
        return fn
    return mark


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n")


def _resolved_system(loaded: LoadedConfig) -> SystemConfig:
    """Config system with the backward background amplitude filled in.

    A requested signal-to-background ratio is stored symbolically at load
    time; recipes convert it to a field amplitude here, against the clean
    backward flux of the same system.
    """
    system = loaded.system
    if loaded.background_snr is not None:
        amp = pipeline.backward_background_for_snr(system,
                                                   loaded.background_snr)
        system = dataclasses.replace(
            system, detection=dataclasses.replace(
                system.detection, background_amp_backward=amp))
    return system


def _directions(loaded: LoadedConfig, default=("forward", "backward")):
    direction = loaded.run.get("direction")
    return (direction,) if direction else tuple(default)


def _headline(detail: dict, key: str):
    """Forward value, convolved variant when present, else first available."""
    for direction in ("forward", "backward"):
        if direction in detail:
            for variant in ("irf", "raw"):
                if variant in detail[direction]:
                    return detail[direction][variant][key]
    raise KeyError(key)


def _suite(loaded, spec, order, directions):
    system = _resolved_system(loaded)
    jobs = [(d, order) for d in directions]
    return system, pipeline.correlation_suite(
        system, jobs=jobs, diffusion=loaded.diffusion, workers=spec.workers)


@_recipe("g1")
def _run_g1(loaded, spec, out: Path) -> dict:
    directions = _directions(loaded)
    _, suite = _suite(loaded, spec, 1, directions)
    times = suite["times"]
    detail = {}
    for direction in directions:
        columns = {"t_ns": times}
        for variant, terms in suite["maps"][(direction, 1)].items():
            columns[variant] = terms["g1"]
        gridio.write_columns_csv(out / f"g1_{direction}.csv", columns)
        g1 = columns.get("irf", columns["raw"])
        detail[direction] = {
            "flux": float(np.trapezoid(columns["raw"], times)),
            "peak_ns": float(times[int(np.argmax(g1))]),
        }
    return {"detail": detail}


@_recipe("g2map")
def _run_g2map(loaded, spec, out: Path) -> dict:
    directions = _directions(loaded)
    _, suite = _suite(loaded, spec, 2, directions)
    times = suite["times"]
    detail = {}
    for direction in directions:
        detail[direction] = {}
        for variant, terms in suite["maps"][(direction, 2)].items():
            tag = f"{direction}_{variant}"
            gridio.write_grid(out / f"g2_{tag}.wqgrid", [times, times],
                              terms["g2"])
            taus, num = analysis.tau_project(terms["g2"], times)
            _, den = analysis.tau_project(terms["g1_g1"], times)
            profile = np.divide(num, den, out=np.zeros_like(num),
                                where=den > 0)
            gridio.write_columns_csv(out / f"g2_profile_{tag}.csv",
                                     {"tau_ns": taus, "corr_sum": num,
                                      "ref_sum": den, "g2": profile})
            zero = pipeline.zero_delay_summary(terms, times)
            detail[direction][variant] = {"g2_zero": zero["g2_zero"]}
    return {"g2_zero_delay": _headline(detail, "g2_zero"), "detail": detail}


def _third_order_maps(terms, times):
    """Jacobi projections for a third-order term dictionary.

    Returns the projected correlated, connected and reference maps plus
    the window-normalized zero-delay scalars.
    """
    cube = terms["g1_cube"]
    connected = pipeline.connected_terms(terms)
    j_corr = analysis.jacobi_project(terms["g3"], times)
    j_conn = analysis.jacobi_project(connected, times)
    j_ref = analysis.jacobi_project(cube, times)
    axes = (j_corr.j1, j_corr.j2)
    g3_map, g3_zero, _ = analysis.normalize(j_corr.values, j_ref.values,
                                            axes, analysis.G3_WINDOW_PS)
    g3c_map, g3c_zero, _ = analysis.normalize(j_conn.values, j_ref.values,
                                              axes, analysis.G3_WINDOW_PS)
    return {"j_corr": j_corr, "j_conn": j_conn, "j_ref": j_ref,
            "g3_map": g3_map, "g3c_map": g3c_map,
            "g3_zero": g3_zero, "g3c_zero": g3c_zero}


@_recipe("g3map")
def _run_g3map(loaded, spec, out: Path) -> dict:
    directions = _directions(loaded, default=("forward",))
    _, suite = _suite(loaded, spec, 3, directions)
    times = suite["times"]
    detail = {}
    for direction in directions:
        detail[direction] = {}
        for variant, terms in suite["maps"][(direction, 3)].items():
            tag = f"{direction}_{variant}"
            maps = _third_order_maps(terms, times)
            axes = [maps["j_corr"].j1, maps["j_corr"].j2]
            gridio.write_grid(out / f"g3_jacobi_{tag}.wqgrid", axes,
                              maps["g3_map"])
            gridio.write_csv_grid(out / f"g3_jacobi_{tag}.csv", axes,
                                  maps["g3_map"],
                                  axis_names=["j1_ns", "j2_ns"])
            zero = pipeline.zero_delay_summary(terms, times)
            detail[direction][variant] = {
                "g2_zero": zero["g2_zero"],
                "g3_zero": zero["g3_zero"],
                "g3c_zero": zero["g3c_zero"],
            }
    return {"g3_zero_delay": _headline(detail, "g3_zero"),
            "g3c_zero_delay": _headline(detail, "g3c_zero"),
            "detail": detail}


@_recipe("jacobi")
def _run_jacobi(loaded, spec, out: Path) -> dict:
    directions = _directions(loaded, default=("forward",))
    _, suite = _suite(loaded, spec, 3, directions)
    times = suite["times"]
    detail = {}
    for direction in directions:
        detail[direction] = {}
        for variant, terms in suite["maps"][(direction, 3)].items():
            tag = f"{direction}_{variant}"
            maps = _third_order_maps(terms, times)
            disconnected = maps["j_corr"].values - maps["j_conn"].values
            axes = [maps["j_corr"].j1, maps["j_corr"].j2]
            parts = {"corr": maps["j_corr"].values,
                     "connected": maps["j_conn"].values,
                     "disconnected": disconnected,
                     "reference": maps["j_ref"].values}
            for name, values in parts.items():
                gridio.write_grid(out / f"jacobi_{name}_{tag}.wqgrid",
                                  axes, values)
                gridio.write_csv_grid(out / f"jacobi_{name}_{tag}.csv",
                                      axes, values,
                                      axis_names=["j1_ns", "j2_ns"])
            detail[direction][variant] = {"g3_zero": maps["g3_zero"],
                                          "g3c_zero": maps["g3c_zero"]}
    return {"g3_zero_delay": _headline(detail, "g3_zero"),
            "g3c_zero_delay": _headline(detail, "g3c_zero"),
            "detail": detail}


@_recipe("cumulant")
def _run_cumulant(loaded, spec, out: Path) -> dict:
    directions = _directions(loaded, default=("forward",))
    _, suite = _suite(loaded, spec, 3, directions)
    times = suite["times"]
    detail = {}
    for direction in directions:
        detail[direction] = {}
        for variant, terms in suite["maps"][(direction, 3)].items():
            tag = f"{direction}_{variant}"
            maps = _third_order_maps(terms, times)
            axes = [maps["j_corr"].j1, maps["j_corr"].j2]
            gridio.write_grid(out / f"g3c_jacobi_{tag}.wqgrid", axes,
                              maps["g3c_map"])
            gridio.write_csv_grid(out / f"g3c_jacobi_{tag}.csv", axes,
                                  maps["g3c_map"],
                                  axis_names=["j1_ns", "j2_ns"])
            detail[direction][variant] = {"g3_zero": maps["g3_zero"],
                                          "g3c_zero": maps["g3c_zero"]}
    return {"g3c_zero_delay": _headline(detail, "g3c_zero"),
            "g3_zero_delay": _headline(detail, "g3_zero"),
            "detail": detail}


@_recipe("transmission")
def _run_transmission(loaded, spec, out: Path) -> dict:
    run = loaded.run
    lo = float(run.get("scan_min_ghz", -3.0))
    hi = float(run.get("scan_max_ghz", 3.0))
    n = int(run.get("scan_points", 121))
    scan_ghz = np.linspace(lo, hi, n)
    system = _resolved_system(loaded)
    t = correlate.transmission_scan(system, scan_ghz * TWO_PI,
                                    diffusion=loaded.diffusion)
    gridio.write_columns_csv(out / "transmission.csv",
                             {"detuning_ghz": scan_ghz, "transmission": t})
    i_min = int(np.argmin(t))
    return {"t_min": float(t[i_min]),
            "detuning_at_min_ghz": float(scan_ghz[i_min]),
            "t_far": float(0.5 * (t[0] + t[-1])),
            "scan_points": n}


@_recipe("phase-scan")
def _run_phase_scan(loaded, spec, out: Path) -> dict:
    steps = int(loaded.run.get("phase_steps", 16))
    phi = np.arange(steps + 1) * (np.pi / steps)
    system = _resolved_system(loaded)
    result = analysis.phase_scan(system, phi)
    gridio.write_columns_csv(out / "phase_scan.csv",
                             {"phi_rad": phi, "g2_zero": result["g2_zero"],
                              "g3_zero": result["g3_zero"],
                              "g3c_zero": result["g3c_zero"]})
    g3c = result["g3c_zero"]
    interior = [i for i in range(1, phi.size - 1)
                if g3c[i] >= g3c[i - 1] and g3c[i] >= g3c[i + 1]]
    local_max = max(interior, key=lambda i: g3c[i]) if interior else None
    return {
        "phi_step_rad": float(np.pi / steps),
        "g2_argmin_phi": float(phi[int(np.argmin(result["g2_zero"]))]),
        "g3_argmax_phi": float(phi[int(np.argmax(result["g3_zero"]))]),
        "g3c_argmax_phi": float(phi[int(np.argmax(g3c))]),
        "g3c_local_max_phi": None if local_max is None
        else float(phi[local_max]),
    }


@_recipe("scaling")
def _run_scaling(loaded, spec, out: Path) -> dict:
    system = _resolved_system(loaded)
    m_max = int(loaded.run.get("m_max", 3))
    m_list = list(range(1, min(m_max, system.n_emitters) + 1))
    nodes = weights = None
    if loaded.diffusion is not None:
        nodes, weights = noise.diffusion_nodes(system.emitters,
                                               loaded.diffusion)
    table = analysis.scaling_table(system, m_list, n_max=5,
                                   nodes=nodes, weights=weights)
    orders = table["orders"]
    m_col = np.repeat(m_list, len(orders))
    o_col = np.tile(orders, len(m_list))
    gridio.write_columns_csv(out / "scaling.csv", {
        "m": m_col, "order": o_col,
        "raw": table["raw"].ravel(),
        "normalized": table["normalized"].ravel()})
    return {"m": m_list, "orders": list(orders),
            "argmax_order": list(table["argmax_order"])}


@_recipe("simulate-tags")
def _run_simulate_tags(loaded, spec, out: Path) -> dict:
    system = _resolved_system(loaded)
    run = loaded.run
    n_pulses = int(run.get("n_pulses", 200000))
    chunk = int(run.get("chunk_size", 65536))
    records = trajectories.run_batch(system, None, n_pulses,
                                     seed=system.seed,
                                     workers=spec.workers,
                                     chunk_size=chunk)
    # detection chain gets its own stream so tag noise is decoupled
    # from the trajectory draws
    stream = trajectories.detect(records, system.detection,
                                 seed=system.seed + 1, config=system,
                                 n_pulses=n_pulses)
    name = run.get("tags_file", "tags.btags")
    tagstream.write_tags(stream, out / name, binary=True)
    forward = int(np.sum(stream.records["channel_id"] < 3))
    summary = {"tags_file": name, "n_pulses": n_pulses,
               "n_tags": int(stream.records.size),
               "forward_clicks": forward,
               "backward_clicks": int(stream.records.size) - forward}
    if loaded.diffusion is not None:
        summary["note"] = "diffusion section ignored by simulate-tags"
    return summary


@_recipe("correlate-tags")
def _run_correlate_tags(loaded, spec, out: Path) -> dict:
    run = loaded.run
    name = run.get("tags_file", "tags.btags")
    path = Path(name)
    if not path.is_absolute():
        path = out / name
    if not path.exists():
        raise ConfigError(f"run.tags_file: {path} does not exist")
    stream = tagstream.read_tags(path)
    direction = run.get("direction", "forward")

    g2_hists = {(0, offset): tagstream.hist_g2(stream, pulse_offset=offset,
                                               direction=direction)
                for offset in (0, 1)}
    g3_hists = {offsets: tagstream.hist_g3(stream, pulse_offsets=offsets,
                                           direction=direction)
                for offsets in tagstream.G3_OFFSETS}
    g2 = tagstream.estimate_correlations(g2_hists)
    g3 = tagstream.estimate_correlations(g3_hists)

    gridio.write_columns_csv(out / "g2_profile_tags.csv",
                             {"tau_ns": g2["tau"], "g2": g2["g2_profile"]})
    for label in ("g3_map", "g3c_map"):
        jmap = g3[label]
        stem = label.replace("_map", "_jacobi_tags")
        gridio.write_jacobi_csv(out / f"{stem}.csv", jmap)
        gridio.write_grid(out / f"{stem}.wqgrid", [jmap.j1, jmap.j2],
                          jmap.values)
    if run.get("save_histograms"):
        for (a, b), hist in g2_hists.items():
            gridio.write_grid(out / f"hist_g2_{a}{b}.wqgrid",
                              list(hist.axes), hist.counts.astype(float))
        for offsets, hist in g3_hists.items():
            stem = "".join(str(o) for o in offsets)
            gridio.write_grid(out / f"hist_g3_{stem}.wqgrid",
                              list(hist.axes), hist.counts.astype(float))
    return {"g2_zero_delay": g2["g2_zero"],
            "g3_zero_delay": g3["g3_zero"],
            "g3c_zero_delay": g3["g3c_zero"],
            "n_tags": int(stream.records.size),
            "n_pulses": g2_hists[(0, 0)].meta["n_pulses"]}


@_recipe("calibrate")
def _run_calibrate(loaded, spec, out: Path) -> dict:
    """Drive-power sweep: resonant transmission versus mean photon number.

    Maps the measurable dip depth to the input power scale, the inverse of
    how a power calibration is read off an experimental saturation curve.
    """
    run = loaded.run
    lo = float(run.get("power_min", 1e-3))
    hi = float(run.get("power_max", 1.0))
    n = int(run.get("power_points", 13))
    system = _resolved_system(loaded)
    if system.drive.shape != "cw":
        raise ConfigError("drive.shape: calibrate requires a cw drive")
    n_mean = np.geomspace(lo, hi, n)
    gamma_ref = system.emitters[0].gamma
    t_res = np.empty(n)
    alpha = np.sqrt(n_mean * gamma_ref)
    for i, a in enumerate(alpha):
        cfg = dataclasses.replace(
            system, drive=dataclasses.replace(system.drive, alpha0=float(a)))
        t_res[i] = correlate.transmission_scan(
            cfg, np.zeros(1), diffusion=loaded.diffusion)[0]
    gridio.write_columns_csv(out / "calibration.csv",
                             {"n_mean": n_mean, "alpha0": alpha,
                              "t_resonant": t_res})
    weak = float(t_res[0])
    half = weak + 0.5 * (1.0 - weak)
    above = np.nonzero(t_res >= half)[0]
    return {"weak_limit_t": weak,
            "saturation_n_mean": float(n_mean[above[0]]) if above.size
            else None,
            "power_points": n}


def _manifest(spec, loaded, wall_time: float) -> dict:
    import scipy
    system = loaded.system
    resolved = {
        "emitters": [dataclasses.asdict(e) for e in system.emitters],
        "drive": dataclasses.asdict(system.drive),
        "detection": dataclasses.asdict(system.detection),
        "time_grid": dataclasses.asdict(system.grid),
        "diffusion": None if loaded.diffusion is None
        else dataclasses.asdict(loaded.diffusion),
        "background_snr": loaded.background_snr,
        "seed": system.seed,
        "run": loaded.run,
    }
    return {
        "recipe": spec.recipe,
        "config_source": loaded.source,
        "overrides": list(spec.overrides),
        "workers": spec.workers,
        "wall_time_s": round(wall_time, 3),
        "versions": {"python": sys.version.split()[0],
                     "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "wqed": __version__},
        "config": loaded.raw,
        "resolved": resolved,
    }


def run(spec: ExperimentSpec) -> int:
    """Execute one recipe; returns the process exit status.

    0 on success, 2 for configuration problems (unknown recipe, schema
    violations, missing inputs), 1 for runtime failures such as budget
    exceedance; diagnostics go to stderr.
    """
    try:
        fn = REGISTRY.get(spec.recipe)
        if fn is None:
            known = ", ".join(sorted(REGISTRY))
            raise ConfigError(f"unknown recipe {spec.recipe!r}; "
                              f"known recipes: {known}")
        loaded = load(spec.config, spec.overrides)
        if spec.seed is not None:
            loaded = dataclasses.replace(
                loaded, system=dataclasses.replace(loaded.system,
                                                   seed=spec.seed))
        out = Path(spec.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        summary = fn(loaded, spec, out)
        wall = time.perf_counter() - start
        summary = {"recipe": spec.recipe, **summary}
        _write_json(out / "manifest.json", _manifest(spec, loaded, wall))
        _write_json(out / "summary.json", summary)
        print(f"{spec.recipe}: wrote {out} in {wall:.1f} s")
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

"""Config file loading, unit resolution, and validation.

Config files are YAML mappings with sections ``emitters`` (list), ``drive``,
``detection``, ``time_grid``, ``diffusion``, and a top-level ``seed``.  All
rates are linear frequencies in GHz (the stored value is nu with the angular
rate 2*pi*nu in rad/ns), times are ns, and detector quantities are ps.

::

    seed: 0
    emitters:
      - {gamma: 0.388, beta: 0.95, gamma_d: 0.09, delta: -0.3,
         sigma_sd: 0.30, phi_pi: 0.0}
    drive:
      {n_mean: 0.1, shape: gaussian, sigma_pulse: 3.0, rep_period: 20.0}
    detection:
      {sigma_irf_ps: 83.0, n_channels: 3, bin_width_ps: 32.0,
       background_snr: null}
    time_grid: {t_min: -8.96, t_max: 8.96, dt: 0.128}
    diffusion:
      {scheme: gauss-hermite, mode: within-sample, nodes_per_emitter: 7}

Emitter phases are radians via ``phi`` or multiples of pi via ``phi_pi``
(exactly one).  The drive strength is ``alpha0`` in sqrt(photons/ns) or the
dimensionless ``n_mean``, the mean photon number within the first emitter's
lifetime (alpha0 = sqrt(n_mean * Gamma_1)).  ``detection.background_snr``
requests a backward coherent background at that pulse-integrated
signal-to-background ratio; the amplitude is resolved by the recipes.
Two optional run-control entries: a top-level ``subset`` (list of emitter
indices to keep, e.g. ``subset: [1, 2]``) and a ``run`` section with
recipe options (``n_pulses``, ``chunk_size``, ``direction``,
``tags_file``).  Overrides use dotted paths with list indices, e.g.
``emitters[1].delta=-0.2`` or ``drive.n_mean=0.05``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from . import model, noise
from .model import (DetectionParams, DriveParams, EmitterParams,
                    SystemConfig, TimeGrid)

TWO_PI = 2.0 * math.pi
SHIPPED = ("table_s1", "table_s2", "fig_s11", "fig_s15")

_TOP_KEYS = {"seed", "emitters", "drive", "detection", "time_grid",
             "diffusion", "subset", "run"}
_EMITTER_KEYS = {"gamma", "beta", "gamma_d", "delta", "sigma_sd", "phi",
                 "phi_pi", "fano"}
_DRIVE_KEYS = {"alpha0", "n_mean", "shape", "sigma_pulse", "t_center",
               "rep_period"}
_DETECTION_KEYS = {"sigma_irf_ps", "n_channels", "split_probs",
                   "bin_width_ps", "efficiency", "background_snr"}
_GRID_KEYS = {"t_min", "t_max", "dt"}
_DIFFUSION_KEYS = {"scheme", "mode", "nodes_per_emitter", "n_samples", "seed"}


class ConfigError(ValueError):
    """Config loading or validation failed; the message lists field paths."""


@dataclass
class LoadedConfig:
    """A validated config: resolved system plus run-level settings."""

    system: SystemConfig
    diffusion: noise.DiffusionDescriptor | None
    background_snr: float | None
    run: dict
    raw: dict
    source: str


def find_config(name_or_path) -> Path:
    """Resolve a filesystem path or the stem of a shipped config."""
    path = Path(name_or_path)
    if path.exists():
        return path
    stem = path.name.removesuffix(".cfg")
    if stem in SHIPPED:
        return Path(str(resources.files("wqed") / "configs" / f"{stem}.cfg"))
    raise ConfigError(f"config {str(name_or_path)!r} not found; shipped "
                      f"configs: {', '.join(SHIPPED)}")


def apply_override(raw: dict, item: str) -> None:
    """Apply one dotted-path key=value override in place."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, text = item.split("=", 1)
    tokens: list = []
    for part in key.split("."):
        match = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)((?:\[\d+\])*)", part)
        if match is None:
            if part.isdigit():
                tokens.append(int(part))
                continue
            raise ConfigError(f"override path {key!r} is malformed at "
                              f"{part!r}")
        tokens.append(match.group(1))
        tokens.extend(int(i) for i in re.findall(r"\[(\d+)\]",
                                                 match.group(2)))
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        value = text
    node = raw
    for tok in tokens[:-1]:
        if isinstance(tok, int):
            if not isinstance(node, list) or not 0 <= tok < len(node):
                raise ConfigError(f"override {key!r}: index {tok} out of "
                                  "range")
            node = node[tok]
        else:
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {tok!r} is not a "
                                  "section")
            node = node.setdefault(tok, {})
    last = tokens[-1]
    if isinstance(last, int):
        if not isinstance(node, list) or not 0 <= last < len(node):
            raise ConfigError(f"override {key!r}: index {last} out of range")
        node[last] = value
    else:
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: cannot set a key inside a "
                              "scalar")
        node[last] = value


def _number(section, key, path, errors, default=None):
    value = section.get(key, default)
    if value is None:
        errors.append(f"{path}.{key}: required")
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{path}.{key}: expected a number, got {value!r}")
        return None
    return float(value)


def _unknown_keys(section, allowed, path, errors):
    for key in sorted(set(section) - allowed):
        errors.append(f"{path}.{key}: unknown field")


def _resolve_emitters(entries, errors, resolved):
    emitters = []
    for i, entry in enumerate(entries):
        path = f"emitters[{i}]"
        before = len(errors)
        if not isinstance(entry, dict):
            errors.append(f"{path}: expected a mapping")
            continue
        _unknown_keys(entry, _EMITTER_KEYS, path, errors)
        gamma = _number(entry, "gamma", path, errors)
        beta = _number(entry, "beta", path, errors)
        gamma_d = _number(entry, "gamma_d", path, errors, default=0.0)
        delta = _number(entry, "delta", path, errors, default=0.0)
        sigma_sd = _number(entry, "sigma_sd", path, errors, default=0.0)
        fano = _number(entry, "fano", path, errors, default=0.0)
        if "phi" in entry and "phi_pi" in entry:
            errors.append(f"{path}: give phi or phi_pi, not both")
        if "phi_pi" in entry:
            phi_pi = _number(entry, "phi_pi", path, errors, default=0.0)
            phi = math.pi * phi_pi if phi_pi is not None else None
        else:
            phi = _number(entry, "phi", path, errors, default=0.0)
        if gamma is not None and gamma <= 0:
            errors.append(f"{path}.gamma: rate must be positive, got {gamma}")
        if beta is not None and not 0.0 <= beta <= 1.0:
            errors.append(f"{path}.beta: must lie in [0, 1], got {beta}")
        for name, value in (("gamma_d", gamma_d), ("sigma_sd", sigma_sd),
                            ("fano", fano)):
            if value is not None and value < 0:
                errors.append(f"{path}.{name}: must be nonnegative, "
                              f"got {value}")
        values = (gamma, beta, gamma_d, delta, sigma_sd, phi, fano)
        if any(v is None for v in values) or len(errors) > before:
            continue
        emitters.append(EmitterParams(
            gamma=TWO_PI * gamma, beta=beta, gamma_d=TWO_PI * gamma_d,
            delta=TWO_PI * delta, sigma_sd=TWO_PI * sigma_sd, phi=phi,
            fano=TWO_PI * fano))
        resolved.append(
            f"{path}: gamma = {TWO_PI * gamma:.4f} rad/ns ({gamma} GHz), "
            f"gamma_d = {TWO_PI * gamma_d:.4f} rad/ns, "
            f"delta = {TWO_PI * delta:+.4f} rad/ns, "
            f"sigma_sd = {TWO_PI * sigma_sd:.4f} rad/ns, "
            f"beta = {beta}, phi = {phi / math.pi:.4f} pi")
    return tuple(emitters)


def _resolve_drive(section, emitters, errors, resolved):
    path = "drive"
    before = len(errors)
    _unknown_keys(section, _DRIVE_KEYS, path, errors)
    shape = section.get("shape", "gaussian")
    if shape not in ("gaussian", "cw"):
        errors.append(f"{path}.shape: must be gaussian or cw, got {shape!r}")
    has_alpha = "alpha0" in section
    has_n = "n_mean" in section
    if has_alpha == has_n:
        errors.append(f"{path}: give exactly one of alpha0 or n_mean")
        return None
    if has_alpha:
        alpha0 = _number(section, "alpha0", path, errors)
        note = ""
    else:
        n_mean = _number(section, "n_mean", path, errors)
        if n_mean is None or n_mean < 0:
            if n_mean is not None:
                errors.append(f"{path}.n_mean: must be nonnegative, "
                              f"got {n_mean}")
            return None
        if not emitters:
            return None
        # calibration reference: photon number in the first emitter lifetime
        alpha0 = math.sqrt(n_mean * emitters[0].gamma)
        note = f" (n_mean = {n_mean})"
    sigma_pulse = _number(section, "sigma_pulse", path, errors, default=3.0)
    t_center = _number(section, "t_center", path, errors, default=0.0)
    rep_period = _number(section, "rep_period", path, errors, default=20.0)
    if sigma_pulse is not None and sigma_pulse <= 0:
        errors.append(f"{path}.sigma_pulse: must be positive, "
                      f"got {sigma_pulse}")
    if rep_period is not None and rep_period <= 0:
        errors.append(f"{path}.rep_period: must be positive, "
                      f"got {rep_period}")
    if alpha0 is None or len(errors) > before:
        return None
    drive = DriveParams(alpha0=alpha0, shape=shape, sigma_pulse=sigma_pulse,
                        t_center=t_center, rep_period=rep_period)
    resolved.append(f"{path}: alpha0 = {alpha0:.6f} sqrt(photons/ns)"
                    f"{note}, shape = {shape}")
    return drive


def _resolve_detection(section, errors):
    path = "detection"
    _unknown_keys(section, _DETECTION_KEYS, path, errors)
    snr = section.get("background_snr")
    if snr is not None:
        if isinstance(snr, bool) or not isinstance(snr, (int, float)) \
                or snr <= 0:
            errors.append(f"{path}.background_snr: must be a positive "
                          f"number or null, got {snr!r}")
            snr = None
        else:
            snr = float(snr)
    kwargs = {}
    for key in ("sigma_irf_ps", "bin_width_ps", "efficiency"):
        if key in section:
            value = _number(section, key, path, errors)
            if value is not None:
                kwargs[key] = value
    if "n_channels" in section:
        kwargs["n_channels"] = section["n_channels"]
    if "split_probs" in section:
        kwargs["split_probs"] = tuple(section["split_probs"])
    try:
        detection = DetectionParams(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return None, snr
    if detection.efficiency > 1.0 or detection.efficiency < 0.0:
        errors.append(f"{path}.efficiency: must lie in [0, 1], "
                      f"got {detection.efficiency}")
    return detection, snr


def resolve(raw: dict, source: str = "<config>") \
        -> tuple[LoadedConfig | None, list[str], list[str]]:
    """Validate a raw mapping; returns (loaded_or_None, errors, notes).

    Notes mix warnings (prefixed "warning:") with resolved angular values.
    """
    errors: list[str] = []
    notes: list[str] = []
    resolved: list[str] = []
    if not isinstance(raw, dict):
        return None, ["config root must be a mapping"], notes
    _unknown_keys(raw, _TOP_KEYS, "config", errors)

    entries = raw.get("emitters")
    if not isinstance(entries, list) or not entries:
        errors.append("emitters: need a nonempty list")
        entries = []
    emitters = _resolve_emitters(entries, errors, resolved)

    drive_raw = raw.get("drive")
    if not isinstance(drive_raw, dict):
        errors.append("drive: section required")
        drive = None
    else:
        drive = _resolve_drive(drive_raw, emitters, errors, resolved)

    det_raw = raw.get("detection", {})
    if not isinstance(det_raw, dict):
        errors.append("detection: expected a mapping")
        det_raw = {}
    detection, snr = _resolve_detection(det_raw, errors)

    grid_raw = raw.get("time_grid", {})
    if not isinstance(grid_raw, dict):
        errors.append("time_grid: expected a mapping")
        grid_raw = {}
    _unknown_keys(grid_raw, _GRID_KEYS, "time_grid", errors)
    try:
        grid = TimeGrid(t_min=float(grid_raw.get("t_min", -8.96)),
                        t_max=float(grid_raw.get("t_max", 8.96)),
                        dt=float(grid_raw.get("dt", 0.128)))
    except (TypeError, ValueError) as exc:
        errors.append(f"time_grid: {exc}")
        grid = None

    diff_raw = raw.get("diffusion")
    diffusion = None
    if diff_raw is not None:
        if not isinstance(diff_raw, dict):
            errors.append("diffusion: expected a mapping")
        else:
            _unknown_keys(diff_raw, _DIFFUSION_KEYS, "diffusion", errors)
            try:
                diffusion = noise.DiffusionDescriptor(
                    **{k: diff_raw[k] for k in _DIFFUSION_KEYS
                       if k in diff_raw})
            except (TypeError, ValueError) as exc:
                errors.append(f"diffusion: {exc}")

    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        errors.append(f"seed: expected an integer, got {seed!r}")
        seed = 0

    subset = raw.get("subset")
    if subset is not None:
        ok = (isinstance(subset, list) and subset
              and all(isinstance(i, int) and not isinstance(i, bool)
                      and 0 <= i < len(emitters) for i in subset)
              and len(set(subset)) == len(subset))
        if not ok:
            errors.append("subset: expected distinct emitter indices in "
                          f"0..{max(len(emitters) - 1, 0)}")
            subset = None

    run = raw.get("run", {})
    if not isinstance(run, dict):
        errors.append("run: expected a mapping")
        run = {}
    else:
        for key in ("n_pulses", "chunk_size"):
            if key in run and (isinstance(run[key], bool)
                               or not isinstance(run[key], int)
                               or run[key] < 1):
                errors.append(f"run.{key}: expected a positive integer, "
                              f"got {run[key]!r}")
        if "direction" in run and run["direction"] not in ("forward",
                                                           "backward"):
            errors.append("run.direction: must be forward or backward")

    if errors or drive is None or detection is None or grid is None:
        return None, errors, notes

    try:
        system = SystemConfig(emitters=emitters, drive=drive,
                              detection=detection, grid=grid, seed=seed)
        if subset is not None:
            system = system.subset(tuple(subset))
    except (TypeError, ValueError) as exc:
        return None, [f"config: {exc}"], notes

    rate = model.max_rate(system)
    if grid.dt > 0.5 / rate:
        notes.append(f"warning: time_grid.dt = {grid.dt} ns undersamples "
                     f"the fastest rate {rate:.3f} rad/ns; consider "
                     f"dt <= {0.5 / rate:.4f} ns")
    notes.extend(resolved)
    loaded = LoadedConfig(system=system, diffusion=diffusion,
                          background_snr=snr, run=dict(run), raw=raw,
                          source=source)
    return loaded, errors, notes


def inspect(name_or_path, overrides=()):
    """Load and resolve without raising on validation problems.

    Returns (loaded or None, error list, note list); notes carry warnings
    and the resolved angular-frequency values for reporting.
    """
    path = find_config(name_or_path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        return None, [f"{path}: not valid YAML: {exc}"], []
    try:
        for item in overrides:
            apply_override(raw, item)
    except ConfigError as exc:
        return None, [str(exc)], []
    return resolve(raw, source=str(path))


def load(name_or_path, overrides=()) -> LoadedConfig:
    """Load, override, validate, and resolve a config file."""
    loaded, errors, _ = inspect(name_or_path, overrides)
    if loaded is None:
        detail = "\n  ".join(errors)
        raise ConfigError(f"config validation failed:\n  {detail}")
    return loaded

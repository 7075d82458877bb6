"""Measurement chains gluing propagation, diffusion averaging and analysis.

A correlation suite evaluates the requested (direction, order) maps for every
spectral-diffusion node, applies the detection-resolution convolution to each
factor before any product is formed (what a jittering detector does to each
recorded time independently), and reduces the nodes in fixed order.  Node
results stream through the reduction, so memory holds one node at a time.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import analysis, correlate, evolve, noise
from .model import SystemConfig


def run_tasks(fn, args_list, workers: int = 1) -> list:
    """Map fn over args, serially or on a process pool; order preserved."""
    if workers <= 1:
        return [fn(a) for a in args_list]
    import multiprocessing as mp
    with mp.Pool(workers) as pool:
        return pool.map(fn, args_list)


def iter_tasks(fn, args_list, workers: int = 1):
    """Like run_tasks but yields results as they complete, in input order."""
    if workers <= 1:
        for a in args_list:
            yield fn(a)
        return
    import multiprocessing as mp
    with mp.Pool(workers) as pool:
        yield from pool.imap(fn, args_list)


# Quadrature phases for the scattered-background average; exact for any
# moment of order <= 3 because only e^(i k theta) with |k| <= 3 can appear.
_BACKGROUND_PHASES = (1.0, 1j, -1.0, -1j)


def _reduce_phases(levels_list, mode: str):
    """Collapse the background-phase variants of one diffusion node.

    The scattered-light phase drifts far slower than the pulse spacing, so
    consecutive-pulse references see a common phase: within-sample forms
    every product per phase before averaging, across-samples averages each
    factor.  A single variant passes through untouched.
    """
    if len(levels_list) == 1:
        return levels_list[0]
    w = 1.0 / len(levels_list)
    if mode == "within-sample":
        acc = _TermAccumulator(mode)
        for levels in levels_list:
            acc.add(levels, w)
        return {"terms": acc.finish()}
    return [w * np.sum([levels[i] for levels in levels_list], axis=0)
            for i in range(len(levels_list[0]))]


def _suite_node(args):
    config, jobs, times, offsets, variants, settings, mode = args
    sigma_ns = config.detection.sigma_irf_ps / 1000.0
    spacing = float(times[1] - times[0]) if times.size > 1 else 1.0
    shared_u = evolve.interval_propagators(config, times, offsets, settings) \
        if times.size > 1 else None
    out = {}
    for direction, order in jobs:
        phases = _BACKGROUND_PHASES if (
            direction == "backward"
            and config.detection.background_amp_backward > 0.0
        ) else (1.0,)
        per_phase = []
        for phase in phases:
            op = correlate.output_operator(config, direction,
                                           background_phase=phase)
            per_phase.append(correlate.correlation_levels(
                config, op, order, times=times, offsets=offsets,
                settings=settings, propagators=shared_u))
        node = {}
        if "raw" in variants:
            node["raw"] = _reduce_phases(per_phase, mode)
        if "irf" in variants:
            blurred = [[noise.convolve_irf(g, sigma_ns, spacing)
                        for g in levels] for levels in per_phase]
            node["irf"] = _reduce_phases(blurred, mode)
        out[(direction, order)] = node
    return out


class _TermAccumulator:
    """Weighted reduction of per-node level lists, in either averaging mode."""

    def __init__(self, mode: str):
        if mode not in noise.MODES:
            raise ValueError(f"mode must be one of {noise.MODES}")
        self.mode = mode
        self.acc = None

    def add(self, levels, weight: float) -> None:
        if isinstance(levels, dict):
            # phase-averaged node: products are already formed
            if self.mode != "within-sample":
                raise ValueError(
                    "pre-assembled terms require within-sample averaging")
            terms = levels["terms"]
        elif self.mode == "within-sample":
            g1 = levels[0]
            g2 = levels[1] if len(levels) > 1 else None
            g3 = levels[2] if len(levels) > 2 else None
            if g2 is None:
                terms = {"g1": g1}
            else:
                terms = noise._assemble(g1, g2, g3)
        else:
            if self.acc is None:
                self.acc = [weight * g for g in levels]
            else:
                for slot, g in zip(self.acc, levels):
                    slot += weight * g
            return
        if self.acc is None:
            self.acc = {k: ([weight * p for p in v] if k == "g2_g1"
                            else weight * v) for k, v in terms.items()}
        else:
            for k, v in terms.items():
                if k == "g2_g1":
                    for slot, p in zip(self.acc[k], v):
                        slot += weight * p
                else:
                    self.acc[k] += weight * v

    def finish(self) -> dict:
        if self.acc is None:
            raise ValueError("no diffusion nodes supplied")
        if self.mode == "within-sample":
            out = self.acc
            if "g2_g1" in out:
                out["g2_g1"] = tuple(out["g2_g1"])
            return out
        factors = self.acc + [None] * (3 - len(self.acc))
        if factors[1] is None:
            return {"g1": factors[0]}
        return noise._assemble(factors[0], factors[1], factors[2])


def correlation_suite(
    config: SystemConfig,
    jobs=(("forward", 3),),
    diffusion: noise.DiffusionDescriptor | None = None,
    times: np.ndarray | None = None,
    include_irf: bool = True,
    workers: int = 1,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> dict:
    """Diffusion-averaged correlation terms for each (direction, order) job.

    Returns {"times", "weights", "maps"}; maps[(direction, order)][variant]
    holds the averaged term dictionary for variant "raw" and, when requested
    and the configured jitter is nonzero, "irf" (each factor convolved before
    products).  The averaging mode comes from the diffusion descriptor;
    without one a single zero-offset node is used.  A nonzero backward
    background is additionally averaged over its free optical phase, which
    persists across consecutive pulses just like a diffusion offset.
    """
    grid = config.grid.times() if times is None else np.asarray(times, float)
    if diffusion is None:
        nodes = np.zeros((1, config.n_emitters))
        weights = np.ones(1)
        mode = "within-sample"
    else:
        nodes, weights = noise.diffusion_nodes(config.emitters, diffusion)
        mode = diffusion.mode
    variants = ["raw"]
    if include_irf and config.detection.sigma_irf_ps > 0:
        variants.append("irf")
    jobs = tuple((d, int(n)) for d, n in jobs)

    accs = {job: {v: _TermAccumulator(mode) for v in variants}
            for job in jobs}
    args = [(config, jobs, grid, nodes[i], tuple(variants), settings, mode)
            for i in range(nodes.shape[0])]
    for node_out, weight in zip(iter_tasks(_suite_node, args, workers),
                                weights, strict=True):
        for job in jobs:
            for v in variants:
                accs[job][v].add(node_out[job][v], float(weight))
    maps = {job: {v: accs[job][v].finish() for v in variants} for job in jobs}
    return {"times": grid, "weights": weights, "maps": maps}


def connected_terms(terms: dict) -> np.ndarray:
    """Averaged connected third-order map from an averaged term dictionary."""
    return analysis.connected_component(terms["g3"], terms["g2_g1"],
                                        terms["g1_cube"])


def zero_delay_summary(terms: dict, times: np.ndarray) -> dict:
    """Windowed zero-delay scalars from one averaged term dictionary.

    g2 uses the 256 ps delay window; third-order values use the default
    417 x 362 ps Jacobi window, normalized by the averaged uncorrelated
    reference (same nodes in numerator and denominator).
    """
    out = {}
    if "g2" in terms:
        out["g2_zero"], _ = analysis.zero_delay_g2(terms["g2"],
                                                   terms["g1_g1"], times)
    if "g3" in terms:
        cube = terms["g1_cube"]
        out["g3_zero"], _ = analysis.zero_delay_g3(terms["g3"], cube, times)
        out["g3c_zero"], _ = analysis.zero_delay_g3(connected_terms(terms),
                                                    cube, times)
    return out


def backward_background_for_snr(
    config: SystemConfig,
    snr: float,
    times: np.ndarray | None = None,
) -> float:
    """Background amplitude giving the requested signal-to-background ratio.

    The ratio compares the pulse-integrated emitter flux into the backward
    waveguide (no background) with the integrated background intensity; the
    background follows the drive envelope.
    """
    if snr <= 0:
        raise ValueError("snr must be positive")
    grid = config.grid.times() if times is None else np.asarray(times, float)
    clean = dataclasses.replace(
        config, detection=dataclasses.replace(config.detection,
                                              background_amp_backward=0.0))
    signal = np.trapezoid(correlate.intensity_g1(clean, "backward", grid),
                          grid)
    env = np.array([abs(evolve._envelope_fn(config.drive)(t)) ** 2
                    for t in grid])
    # the background follows the drive shape with peak amplitude b
    shape = np.trapezoid(env, grid) / config.drive.alpha0 ** 2
    return float(np.sqrt(signal / (snr * shape)))

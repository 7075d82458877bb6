"""Output-field correlations from the quantum regression theorem.

The field reaching a detector in either waveguide direction is a displaced
collective operator A(t) = s(t) I + M: s(t) is the coherent amplitude that
bypasses (forward) or backscatters toward (backward) the detector, M the
emitter contribution including the homodyne phase factor -i.

Time-ordered correlation functions on a fixed grid are computed by a single
sweep over interval propagators.  At step k every stored branch (a partially
measured, vectorized operator) is advanced one interval, new branches are
created bottom-up so that equal-time entries reuse the operator already
applied at t_k, and the trace functional records all correlation orders at
once.  The full symmetric arrays are then filled from the ordered sector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evolve, model
from .model import SystemConfig


@dataclass(frozen=True)
class OutputOperator:
    """Displaced detection operator A(t) = envelope(t) * I + matrix."""

    label: str
    matrix: np.ndarray
    envelope: Callable[[float], complex]

    def at(self, t: float) -> np.ndarray:
        d = self.matrix.shape[0]
        return self.envelope(t) * np.eye(d, dtype=complex) + self.matrix


def _collective(config: SystemConfig, label: str) -> np.ndarray:
    for jump in model.jump_operators(config.emitters):
        if jump.label == label:
            return jump.matrix
    # no emitters: the collective mode is empty
    return np.zeros((config.dim, config.dim), dtype=complex)


def output_operator(config: SystemConfig, direction: str,
                    background_phase: complex = 1.0) -> OutputOperator:
    """Detection operator for 'forward' or 'backward'."""
    if direction == "forward":
        return forward_operator(config)
    if direction == "backward":
        return backward_operator(config, background_phase)
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def forward_operator(config: SystemConfig) -> OutputOperator:
    """Transmitted field: drive amplitude plus -i times the forward mode."""
    matrix = -1j * _collective(config, "fwd")
    drive = config.drive

    def envelope(t: float) -> complex:
        return model.drive_envelope(drive, t)

    return OutputOperator("forward", matrix, envelope)


def backward_operator(config: SystemConfig,
                      phase: complex = 1.0) -> OutputOperator:
    """Reflected field with an optional coherent background.

    The background amplitude follows the drive envelope (scaled to a peak of
    `background_amp_backward`), so a pulsed experiment sees a pulsed
    background; under CW drive it is constant.  `phase` multiplies the
    background scalar only: the optical path length from the scatterer to the
    detector is not controlled, so the background phase relative to the
    reflected field is a free parameter that averaging pipelines scan.
    """
    matrix = -1j * _collective(config, "bwd")
    drive = config.drive
    b = config.detection.background_amp_backward

    if b == 0.0:
        envelope = lambda t: 0.0j
    elif drive.shape == "gaussian" and drive.alpha0 > 0:
        scale = phase * b / drive.alpha0

        def envelope(t: float) -> complex:
            return scale * model.drive_envelope(drive, t)

    else:
        envelope = lambda t: complex(phase * b)
    return OutputOperator("backward", matrix, envelope)


def _initial_state(config, rho0, offsets):
    if rho0 is not None:
        return rho0
    if config.drive.shape == "cw":
        return evolve.steady_state(config, offsets=offsets)
    return model.ground_density(config.n_emitters)


def correlation_levels(
    config: SystemConfig,
    operator: OutputOperator,
    order: int,
    times: np.ndarray | None = None,
    rho0: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
    element_budget: int = 20_000_000,
    propagators: np.ndarray | None = None,
) -> list[np.ndarray]:
    """All G^(1..order) on the grid, as real arrays of shape (N,), .., (N,)*order.

    G^(n)(t_1..t_n) = <A^dag(t_1)..A^dag(t_n) A(t_n)..A(t_1)> with the grid
    initial state rho0 (steady state for CW drive, ground state otherwise).
    Memory scales like C(N+order-2, order-1) branch vectors; the budget guard
    rejects grids that would not fit.  Interval propagators for this grid and
    offset vector can be passed in to share them across calls.
    """
    if order < 1:
        raise ValueError("correlation order must be >= 1")
    times = config.grid.times() if times is None else np.asarray(times, float)
    n_t = times.size
    d2 = config.dim ** 2
    top_branches = math.comb(n_t + order - 2, order - 1) if order > 1 else 0
    if top_branches * d2 > element_budget or n_t ** order > element_budget:
        raise ValueError(
            f"order {order} on {n_t} grid points exceeds the element budget; "
            "coarsen the grid or raise element_budget")

    rho = _initial_state(config, rho0, offsets)
    v = evolve.vec(rho.astype(complex))
    if n_t > 1:
        U = propagators if propagators is not None else \
            evolve.interval_propagators(config, times, offsets, settings)
        if U.shape != (n_t - 1, d2, d2):
            raise ValueError(f"propagator stack has shape {U.shape}, "
                             f"expected {(n_t - 1, d2, d2)}")

    S = np.empty((n_t, d2, d2), dtype=complex)
    w = np.empty((n_t, d2), dtype=complex)
    for k, t in enumerate(times):
        a_k = operator.at(float(t))
        S[k] = evolve.sandwich_matrix(a_k)
        w[k] = evolve.trace_covector(a_k)

    out = [np.zeros((n_t,) * n, dtype=float) for n in range(1, order + 1)]
    caps = [math.comb(n_t + l, l + 1) for l in range(order - 1)]
    branches = [np.empty((d2, c), dtype=complex) for c in caps]
    tuples = [np.empty((c, l + 1), dtype=np.intp) for l, c in enumerate(caps)]
    counts = [0] * (order - 1)

    for k in range(n_t):
        if k:
            u_k = U[k - 1]
            v = u_k @ v
            for l in range(order - 1):
                if counts[l]:
                    branches[l][:, :counts[l]] = u_k @ branches[l][:, :counts[l]]
        # new branches, bottom-up so this step's lower levels feed higher ones
        for l in range(order - 1):
            if l == 0:
                branches[0][:, counts[0]] = S[k] @ v
                tuples[0][counts[0], 0] = k
                counts[0] += 1
            else:
                n_new = counts[l - 1]
                lo = counts[l]
                branches[l][:, lo:lo + n_new] = S[k] @ branches[l - 1][:, :n_new]
                tuples[l][lo:lo + n_new, :l] = tuples[l - 1][:n_new]
                tuples[l][lo:lo + n_new, l] = k
                counts[l] += n_new
        out[0][k] = (w[k] @ v).real
        for n in range(2, order + 1):
            cnt = counts[n - 2]
            vals = (w[k] @ branches[n - 2][:, :cnt]).real
            idx = tuples[n - 2][:cnt]
            flat = np.ravel_multi_index(
                tuple(idx.T) + (np.full(cnt, k, dtype=np.intp),), (n_t,) * n)
            out[n - 1].flat[flat] = vals

    for n in range(2, order + 1):
        out[n - 1] = _symmetric_fill(out[n - 1])
    return out


def _symmetric_fill(arr: np.ndarray) -> np.ndarray:
    """Fill the whole array from its ordered sector (i_1 <= .. <= i_n)."""
    coords = np.indices(arr.shape, dtype=np.intp)
    coords.sort(axis=0)
    return arr[tuple(coords)]


def intensity(
    config: SystemConfig,
    operator: OutputOperator,
    times: np.ndarray | None = None,
    rho0: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> np.ndarray:
    """<A^dag A>(t) on the grid."""
    return correlation_levels(config, operator, 1, times, rho0, offsets,
                              settings)[0]


@dataclass(frozen=True)
class CorrelationGrid:
    """An order-n correlation map on the pulse grid, with its pedigree."""

    order: int
    direction: str
    times: np.ndarray
    values: np.ndarray
    metadata: dict


MAX_ORDER = 5


def correlation_gn(
    config: SystemConfig,
    direction: str,
    order: int,
    times: np.ndarray | None = None,
    rho0: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> CorrelationGrid:
    """Unnormalized G^(order) on the grid, wrapped with its axes.

    Orders above 5 are refused: storage and sweep cost grow like the number
    of ordered time tuples, and nothing downstream consumes them.
    """
    if order < 1 or order > MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}, got {order}")
    grid = config.grid.times() if times is None else np.asarray(times, float)
    levels = correlation_levels(config, output_operator(config, direction),
                                order, grid, rho0, offsets, settings)
    meta = {"n_times": grid.size, "offsets": None if offsets is None
            else np.asarray(offsets, dtype=float).tolist()}
    return CorrelationGrid(order, direction, grid, levels[-1], meta)


def correlation_g2(config, direction="forward", **kwargs) -> CorrelationGrid:
    return correlation_gn(config, direction, 2, **kwargs)


def correlation_g3(config, direction="forward", **kwargs) -> CorrelationGrid:
    return correlation_gn(config, direction, 3, **kwargs)


def intensity_g1(
    config: SystemConfig,
    direction: str = "forward",
    times: np.ndarray | None = None,
    rho0: np.ndarray | None = None,
    offsets: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> np.ndarray:
    """<A^dag A>(t) for a named detection direction."""
    grid = config.grid.times() if times is None else np.asarray(times, float)
    return intensity(config, output_operator(config, direction), grid, rho0,
                     offsets, settings)


def pointwise_normalize(
    g_n: np.ndarray,
    g_1: np.ndarray,
    floor_ratio: float = 1e-12,
) -> np.ndarray:
    """g_n divided by the outer product of g_1 along every axis.

    The denominator is floored at floor_ratio times its peak so bins outside
    the pulse stay finite; values there carry no weight.
    """
    denom = np.array(1.0)
    for _ in range(g_n.ndim):
        denom = np.multiply.outer(denom, g_1)
    peak = denom.max()
    if peak <= 0.0:
        return np.zeros_like(g_n)
    return g_n / np.maximum(denom, floor_ratio * peak)


def steady_g2(
    config: SystemConfig,
    operator: OutputOperator,
    taus: np.ndarray,
    offsets: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> tuple[float, np.ndarray]:
    """CW (G1, G2(tau)) from the steady state; taus start at 0, increasing."""
    if config.drive.shape != "cw":
        raise ValueError("steady_g2 requires a cw drive")
    taus = np.asarray(taus, dtype=float)
    if taus[0] != 0.0:
        raise ValueError("tau grid must start at 0")
    rho = evolve.steady_state(config, offsets=offsets)
    a = operator.at(0.0)
    w = evolve.trace_covector(a)
    v = evolve.vec(a @ rho @ a.conj().T)
    g1 = float((w @ evolve.vec(rho)).real)
    g2 = np.empty(taus.size, dtype=float)
    g2[0] = (w @ v).real
    if taus.size > 1:
        U = evolve.interval_propagators(config, taus, offsets, settings)
        for k in range(1, taus.size):
            v = U[k - 1] @ v
            g2[k] = (w @ v).real
    return g1, g2


def transmission_scan(
    config: SystemConfig,
    scan: np.ndarray,
    diffusion=None,
    nodes: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    residual_tol: float = 1e-10,
    chunk: int = 512,
) -> np.ndarray:
    """Coherent transmission |<a_fwd>|^2 / alpha^2 versus laser offset.

    Each scan value shifts every emitter's detuning by the same amount (a
    laser-frequency scan).  Static per-emitter offsets, from a diffusion
    descriptor or given explicitly as `nodes` (n_nodes, m) with `weights`,
    have their transmitted intensities averaged.  Intensity averaging is the
    only mode that makes sense here, so the descriptor's mode field is
    ignored.  CW drive with alpha0 > 0 required.
    """
    if config.drive.shape != "cw":
        raise ValueError("transmission_scan requires a cw drive")
    alpha0 = config.drive.alpha0
    if alpha0 <= 0:
        raise ValueError("transmission_scan requires a nonzero drive")
    scan = np.asarray(scan, dtype=float)
    m = config.n_emitters
    if diffusion is not None:
        if nodes is not None:
            raise ValueError("give either a diffusion descriptor or nodes")
        from . import noise
        nodes, weights = noise.diffusion_nodes(config.emitters, diffusion)
    if nodes is None:
        nodes = np.zeros((1, m))
        weights = np.ones(1)
    nodes = np.asarray(nodes, dtype=float).reshape(-1, m)
    if weights is None:
        weights = np.ones(nodes.shape[0])
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()

    L0, L1 = evolve.generator_parts(config)
    L_cw = L0 + alpha0 * L1
    K = evolve.detuning_generators(config)
    # tr(M rho) as a covector on vec(rho)
    m_row = evolve.vec(_collective(config, "fwd").T * -1j)

    # all (node, scan) offsets in one batch, chunked through the solver
    total = nodes[:, None, :] + scan[None, :, None]          # (n_nodes, n_scan, m)
    flat = total.reshape(-1, m)
    t_flat = np.empty(flat.shape[0], dtype=float)
    for lo in range(0, flat.shape[0], chunk):
        off = flat[lo:lo + chunk]
        stack = L_cw[None] + np.einsum("bj,jxy->bxy", off, K)
        rhos = evolve.steady_state_batch(stack, config.dim,
                                         residual_tol=residual_tol)
        amps = alpha0 + rhos.reshape(off.shape[0], -1) @ m_row
        t_flat[lo:lo + chunk] = np.abs(amps) ** 2 / alpha0 ** 2
    t_nodes = t_flat.reshape(nodes.shape[0], scan.size)
    return weights @ t_nodes

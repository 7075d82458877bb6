"""Jacobi projection, cumulant decomposition, normalization, scan studies.

Three detection times separate into a center-of-mass coordinate (summed
over) and two relative Jacobi coordinates
    j1 = (2 t1 - t2 - t3) / sqrt(6),   j2 = (t2 - t3) / sqrt(2).
On a uniform cubic grid both coordinates live on integer lattices with
pitches dt/sqrt(6) and dt/sqrt(2); binning is done in integer arithmetic
whenever the requested bin is a whole number of pitches, so ties at bin
edges resolve deterministically (half away from zero) and the t2 <-> t3
mirror symmetry of the projected map is exact.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import correlate, evolve, model
from .model import SystemConfig

SQRT6 = math.sqrt(6.0)
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class JacobiMap:
    """G3 projected onto the relative-coordinate plane."""

    j1: np.ndarray          # bin centers, ns
    j2: np.ndarray          # bin centers, ns
    values: np.ndarray      # shape (len(j1), len(j2))
    bin1: float             # ns
    bin2: float             # ns
    meta: dict


@dataclass(frozen=True)
class CumulantSet:
    """Third-order map with its connected/disconnected split."""

    g3: np.ndarray
    connected: np.ndarray
    disconnected: np.ndarray
    normalization: float | None = None
    window: tuple | None = None


def _uniform_spacing(times: np.ndarray) -> float:
    steps = np.diff(times)
    if steps.size == 0:
        raise ValueError("need at least two grid times")
    dt = steps[0]
    if not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ValueError("projection requires a uniform grid")
    return float(dt)


def _lattice_bins(p: np.ndarray, pitch: float, bin_width: float) -> np.ndarray:
    """Bin indices for lattice values p*pitch, ties rounded away from zero."""
    ratio = bin_width / pitch
    q = int(round(ratio))
    if q >= 1 and abs(ratio - q) < 1e-9:
        mag = (2 * np.abs(p) + q) // (2 * q)
        return np.sign(p) * mag
    return np.round(p * (pitch / bin_width)).astype(np.int64)


def jacobi_project(
    g3: np.ndarray,
    times: np.ndarray,
    bin1: float | None = None,
    bin2: float | None = None,
) -> JacobiMap:
    """Project a cubic G3 grid onto (j1, j2), summing the center of mass.

    Default bins are dt*sqrt(6)/2 along j1 and dt*sqrt(2) along j2 (3 and 2
    lattice pitches), centered on zero.  Bin values are sums of the cube
    cells landing in each bin, so total mass is conserved exactly.
    """
    times = np.asarray(times, dtype=float)
    n_t = times.size
    if g3.shape != (n_t,) * 3:
        raise ValueError(f"grid shape {g3.shape} does not match {n_t} times")
    dt = _uniform_spacing(times)
    pitch1, pitch2 = dt / SQRT6, dt / SQRT2
    if bin1 is None:
        bin1 = 3.0 * pitch1
    if bin2 is None:
        bin2 = 2.0 * pitch2

    idx = np.arange(n_t, dtype=np.int64)
    p1 = 2 * idx[:, None, None] - idx[None, :, None] - idx[None, None, :]
    p2 = np.zeros_like(p1) + idx[None, :, None] - idx[None, None, :]
    b1 = _lattice_bins(p1, pitch1, bin1)
    b2 = _lattice_bins(p2, pitch2, bin2)

    lo1, hi1 = int(b1.min()), int(b1.max())
    lo2, hi2 = int(b2.min()), int(b2.max())
    n1, n2 = hi1 - lo1 + 1, hi2 - lo2 + 1
    flat = (b1 - lo1) * n2 + (b2 - lo2)
    sums = np.bincount(flat.ravel(), weights=g3.ravel(), minlength=n1 * n2)
    values = sums.reshape(n1, n2)
    j1 = (np.arange(lo1, hi1 + 1)) * bin1
    j2 = (np.arange(lo2, hi2 + 1)) * bin2
    meta = {"dt": dt, "bin1": float(bin1), "bin2": float(bin2)}
    return JacobiMap(j1, j2, values, float(bin1), float(bin2), meta)


def tau_project(
    g2: np.ndarray,
    times: np.ndarray,
    bin_width: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Project a square G2 grid onto the delay tau = t1 - t2.

    Returns (tau bin centers, summed values); default bin width is the grid
    step, so bins sit exactly on the delay lattice.
    """
    times = np.asarray(times, dtype=float)
    n_t = times.size
    if g2.shape != (n_t, n_t):
        raise ValueError(f"grid shape {g2.shape} does not match {n_t} times")
    dt = _uniform_spacing(times)
    if bin_width is None:
        bin_width = dt
    idx = np.arange(n_t, dtype=np.int64)
    p = idx[:, None] - idx[None, :]
    b = _lattice_bins(p, dt, bin_width)
    lo, hi = int(b.min()), int(b.max())
    sums = np.bincount((b - lo).ravel(), weights=g2.ravel(),
                       minlength=hi - lo + 1)
    taus = np.arange(lo, hi + 1) * bin_width
    return taus, sums


def connected_component(g3, partial_terms, g1_cube) -> np.ndarray:
    """G3_c = G3 - sum of the three G2*G1 pairings + 2 G1*G1*G1."""
    p12, p13, p23 = partial_terms
    for term in (p12, p13, p23, g1_cube):
        if term.shape != g3.shape:
            raise ValueError("cumulant terms must share the G3 axes")
    return g3 - p12 - p13 - p23 + 2.0 * g1_cube


def cumulant_set(g3, partial_terms, g1_cube,
                 normalization=None, window=None) -> CumulantSet:
    connected = connected_component(g3, partial_terms, g1_cube)
    return CumulantSet(g3, connected, g3 - connected, normalization, window)


def set_partitions(items: list):
    """All partitions of a list, as lists of blocks."""
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for partition in set_partitions(rest):
        for i in range(len(partition)):
            yield partition[:i] + [[head] + partition[i]] + partition[i + 1:]
        yield [[head]] + partition


def joint_cumulant(levels: list) -> np.ndarray:
    """Connected n-point function from the maps G^(1..n).

    Set-partition formula: sum over partitions of (-1)^(b-1) (b-1)! times
    the product of G^(|block|) on each block's time axes, with b blocks.
    levels[k-1] holds the order-k map; all maps are permutation symmetric.
    """
    n = len(levels)
    n_t = levels[0].shape[0]
    out = np.zeros((n_t,) * n)
    for partition in set_partitions(list(range(n))):
        b = len(partition)
        term = float((-1) ** (b - 1) * math.factorial(b - 1))
        prod = np.full((1,) * n, term)
        for block in partition:
            axes = sorted(block)
            shape = [1] * n
            for ax in axes:
                shape[ax] = n_t
            prod = prod * levels[len(block) - 1].reshape(shape)
        out = out + prod
    return out


def cumulants_from_moments(moments: list) -> list:
    """Univariate cumulants k_1..k_n from raw moments M_1..M_n, elementwise.

    k_n = M_n - sum_{j=1}^{n-1} C(n-1, j-1) k_j M_{n-j}.
    """
    cumulants = []
    for n in range(1, len(moments) + 1):
        k = np.array(moments[n - 1], dtype=float, copy=True)
        for j in range(1, n):
            k -= math.comb(n - 1, j - 1) * cumulants[j - 1] * moments[n - 1 - j]
        cumulants.append(k)
    return cumulants


def _window_mask(centers: np.ndarray, half_width: float) -> np.ndarray:
    scale = max(abs(half_width), 1.0)
    return np.abs(centers) <= half_width + 1e-9 * scale


def normalize(corr, uncorr, axes, window_ps):
    """Normalize a correlation map by an uncorrelated reference window.

    `axes` holds the bin-center array for each map axis (ns); `window_ps`
    the full window width per axis in ps.  Bins whose centers fall inside
    the half-width stay in the window (the snap to whole bins is recorded in
    the returned metadata).  Returns (normalized map, zero-delay scalar,
    meta); the map is the raw map divided by the window mean of the
    reference, the scalar the window mean of the normalized map.
    """
    corr = np.asarray(corr, dtype=float)
    uncorr = np.asarray(uncorr, dtype=float)
    if corr.shape != uncorr.shape:
        raise ValueError("correlated and uncorrelated maps must share axes")
    if len(axes) != corr.ndim or len(window_ps) != corr.ndim:
        raise ValueError("need one axis and one window width per dimension")
    masks = []
    snapped = []
    for centers, width in zip(axes, window_ps):
        mask = _window_mask(np.asarray(centers), 0.5 * width / 1000.0)
        if not mask.any():
            raise ValueError("window selects no bins")
        masks.append(mask)
        snapped.append(int(mask.sum()))
    region = np.ix_(*masks)
    denom = float(uncorr[region].mean())
    if denom <= 0.0:
        raise ValueError("uncorrelated window mean is not positive")
    normalized = corr / denom
    zero_delay = float(normalized[region].mean())
    meta = {"window_ps": tuple(window_ps), "bins_per_axis": tuple(snapped)}
    return normalized, zero_delay, meta


G3_WINDOW_PS = (417.0, 362.0)
G2_WINDOW_PS = (256.0,)


def zero_delay_g2(g2, g1, times, window_ps=G2_WINDOW_PS):
    """Windowed zero-delay g2 from raw G2 and G1 grids (or averaged terms)."""
    g1_g1 = np.multiply.outer(g1, g1) if np.ndim(g1) == 1 else g1
    taus, num = tau_project(g2, times)
    _, den = tau_project(g1_g1, times)
    _, value, meta = normalize(num, den, (taus,), window_ps)
    return value, meta


def zero_delay_g3(g3, reference, times, window_ps=G3_WINDOW_PS):
    """Windowed zero-delay value of a third-order map against a reference.

    `reference` is the uncorrelated cube (for g3) or the same cube under a
    connected-component numerator (for g3_c).
    """
    num = jacobi_project(g3, times)
    den = jacobi_project(reference, times)
    _, value, meta = normalize(num.values, den.values, (num.j1, num.j2),
                               window_ps)
    return value, meta


def scaling_table(
    config: SystemConfig,
    m_list,
    n_max: int = 5,
    times: np.ndarray | None = None,
    nodes: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> dict:
    """Pulse-integrated connected cumulants versus emitter number.

    For each m (a prefix of the config's emitters) the equal-time moments
    M_k(t) = <a^dag^k a^k>(t) of the forward field are propagated over the
    pulse, converted to cumulants, and integrated:
        gbar_c^(n) = integral k_n(t) dt / integral M_1(t)^n dt.
    Diffusion nodes, when given, are averaged within-sample (products per
    node).  Each order-n row is then normalized to its maximum across m;
    'argmax_order' gives, per m, the order with the largest normalized value.
    """
    m_list = list(m_list)
    if n_max < 2 or n_max > 5:
        raise ValueError("n_max must be in 2..5")
    if max(m_list) > config.n_emitters or max(m_list) > 5:
        raise ValueError("m exceeds the configured emitters (or 5)")
    orders = list(range(2, n_max + 1))
    raw = np.zeros((len(m_list), len(orders)))
    for row, m in enumerate(m_list):
        sub = config.subset(range(m))
        grid = sub.grid.times() if times is None else np.asarray(times, float)
        dt = _uniform_spacing(grid)
        if nodes is None:
            node_arr = np.zeros((1, m))
            node_w = np.ones(1)
        else:
            node_arr = np.asarray(nodes, dtype=float)[:, :m]
            node_w = np.asarray(weights, dtype=float)
        num = np.zeros((len(orders), grid.size))
        den = np.zeros_like(num)
        for node, w in zip(node_arr, node_w):
            moments = _diagonal_moments(sub, grid, n_max, node, settings)
            kappa = cumulants_from_moments(moments)
            for col, n in enumerate(orders):
                num[col] += w * kappa[n - 1]
                den[col] += w * moments[0] ** n
        for col in range(len(orders)):
            raw[row, col] = np.sum(num[col]) * dt / (np.sum(den[col]) * dt)
    peaks = raw.max(axis=0)
    normalized = raw / peaks[None, :]
    argmax_order = [orders[int(np.argmax(normalized[row]))]
                    for row in range(len(m_list))]
    return {"m": m_list, "orders": orders, "raw": raw,
            "normalized": normalized, "argmax_order": argmax_order}


def _diagonal_moments(config, times, n_max, offsets, settings):
    """Equal-time moments M_k(t) = <a^dag^k a^k>(t), k = 1..n_max."""
    operator = correlate.output_operator(config, "forward")
    states = evolve.states_on_grid(config, model.ground_density(
        config.n_emitters), times, offsets=offsets, settings=settings)
    moments = [np.empty(times.size) for _ in range(n_max)]
    for i, t in enumerate(times):
        a = operator.at(float(t))
        v = evolve.vec(states[i])
        power = a
        for k in range(n_max):
            moments[k][i] = (evolve.trace_covector(power) @ v).real
            power = power @ a
    return moments


def phase_scan(
    config: SystemConfig,
    phi_grid,
    times: np.ndarray | None = None,
    settings: evolve.PropagatorSettings = evolve.PropagatorSettings(),
) -> dict:
    """Zero-delay g2, g3 and connected g3 versus the inter-emitter phase.

    Requires m=2.  For each phase the second emitter's phi is set to the
    first emitter's phi plus the scan value; forward correlations are
    evaluated on the pulse grid without diffusion or jitter, and zero-delay
    values use the standard windows.
    """
    if config.n_emitters != 2:
        raise ValueError("phase_scan requires exactly two emitters")
    phi_grid = np.asarray(phi_grid, dtype=float)
    grid = config.grid.times() if times is None else np.asarray(times, float)
    g2_zero = np.empty(phi_grid.size)
    g3_zero = np.empty(phi_grid.size)
    g3c_zero = np.empty(phi_grid.size)
    for i, phi in enumerate(phi_grid):
        emitters = (config.emitters[0],
                    dataclasses.replace(config.emitters[1],
                                        phi=config.emitters[0].phi + float(phi)))
        cfg = dataclasses.replace(config, emitters=emitters)
        op = correlate.output_operator(cfg, "forward")
        g1, g2, g3 = correlate.correlation_levels(cfg, op, 3, times=grid,
                                                  settings=settings)
        cube = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
        p12 = g2[:, :, None] * g1[None, None, :]
        p13 = g2[:, None, :] * g1[None, :, None]
        p23 = g1[:, None, None] * g2[None, :, :]
        g3c = connected_component(g3, (p12, p13, p23), cube)
        g2_zero[i], _ = zero_delay_g2(g2, g1, grid)
        g3_zero[i], _ = zero_delay_g3(g3, cube, grid)
        g3c_zero[i], _ = zero_delay_g3(g3c, cube, grid)
    return {"phi": phi_grid, "g2_zero": g2_zero, "g3_zero": g3_zero,
            "g3c_zero": g3c_zero}

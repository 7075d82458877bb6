"""Spectral-diffusion ensembles, detector-response convolution, rebinning.

Slow spectral diffusion is modeled as a static Gaussian detuning offset per
emitter, resampled on a timescale much longer than a few pulse periods.  Two
averaging schemes matter downstream and differ for any finite spread:
within-sample forms every product of correlation factors node by node before
averaging (what consecutive-pulse measurements do), across-samples averages
each factor first and multiplies afterwards.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

SCHEMES = ("gauss-hermite", "monte-carlo")
MODES = ("within-sample", "across-samples")


@dataclass(frozen=True)
class DiffusionDescriptor:
    """How to sample static detuning offsets and how to average over them."""

    scheme: str = "gauss-hermite"
    mode: str = "within-sample"
    nodes_per_emitter: int = 7
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.nodes_per_emitter < 1:
            raise ValueError("nodes_per_emitter must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def diffusion_nodes(emitters, scheme: DiffusionDescriptor | None = None):
    """Detuning offset nodes and weights for the emitter ensemble.

    Returns (nodes, weights): nodes has one row per sample and one column per
    emitter (rad/ns), weights sum to 1.  Emitters with sigma_sd = 0 always sit
    at offset 0.  Draws are independent across emitters.
    """
    if scheme is None:
        scheme = DiffusionDescriptor()
    sigmas = np.array([em.sigma_sd for em in emitters], dtype=float)
    m = sigmas.size
    if m == 0 or np.all(sigmas == 0.0):
        return np.zeros((1, m)), np.ones(1)

    if scheme.scheme == "monte-carlo":
        rng = np.random.default_rng(scheme.seed)
        nodes = rng.standard_normal((scheme.n_samples, m)) * sigmas
        weights = np.full(scheme.n_samples, 1.0 / scheme.n_samples)
        return nodes, weights

    points, point_weights = [], []
    for sigma in sigmas:
        if sigma == 0.0:
            points.append(np.zeros(1))
            point_weights.append(np.ones(1))
        else:
            x, w = np.polynomial.hermite.hermgauss(scheme.nodes_per_emitter)
            points.append(math.sqrt(2.0) * sigma * x)
            point_weights.append(w / math.sqrt(math.pi))
    mesh = np.meshgrid(*points, indexing="ij")
    nodes = np.stack([g.ravel() for g in mesh], axis=1)
    wmesh = np.meshgrid(*point_weights, indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wmesh:
        weights = weights * g.ravel()
    return nodes, weights


def _pairings(g1: np.ndarray, g2: np.ndarray):
    """The three G2*G1 products over (t1,t2|t3), (t1,t3|t2), (t2,t3|t1)."""
    return (
        g2[:, :, None] * g1[None, None, :],
        g2[:, None, :] * g1[None, :, None],
        g1[:, None, None] * g2[None, :, :],
    )


def _cube(g1: np.ndarray) -> np.ndarray:
    return g1[:, None, None] * g1[None, :, None] * g1[None, None, :]


def _assemble(g1, g2, g3):
    out = {
        "g1": g1,
        "g2": g2,
        "g1_g1": np.multiply.outer(g1, g1),
    }
    if g3 is not None:
        out["g3"] = g3
        out["g2_g1"] = _pairings(g1, g2)
        out["g1_cube"] = _cube(g1)
    return out


def average_within(results, weights) -> dict:
    """Weighted node average with same-node product pairing.

    `results` is an iterable of per-node dicts holding 'g1', 'g2' and
    optionally 'g3' on one shared grid; every product used downstream
    (normalization denominators, the three G2*G1 cumulant terms, G1 cubes)
    is formed per node first and then averaged.  Streams the nodes, so a
    generator keeps only one node's grids in memory.
    """
    acc = None
    for node, weight in zip(results, weights, strict=True):
        terms = _assemble(node["g1"], node["g2"], node.get("g3"))
        if acc is None:
            acc = {}
            for key, value in terms.items():
                if key == "g2_g1":
                    acc[key] = [weight * p for p in value]
                else:
                    acc[key] = weight * value
        else:
            if ("g3" in terms) != ("g3" in acc):
                raise ValueError("nodes disagree on the presence of g3")
            for key, value in terms.items():
                if key == "g2_g1":
                    for slot, p in zip(acc[key], value):
                        slot += weight * p
                else:
                    acc[key] += weight * value
    if acc is None:
        raise ValueError("no diffusion nodes supplied")
    if "g2_g1" in acc:
        acc["g2_g1"] = tuple(acc["g2_g1"])
    return acc


def average_across(results, weights) -> dict:
    """Average every correlation factor first, then form the products."""
    g1 = g2 = g3 = None
    has_g3 = False
    for node, weight in zip(results, weights, strict=True):
        if g1 is None:
            g1 = weight * node["g1"]
            g2 = weight * node["g2"]
            has_g3 = "g3" in node
            if has_g3:
                g3 = weight * node["g3"]
        else:
            if ("g3" in node) != has_g3:
                raise ValueError("nodes disagree on the presence of g3")
            g1 = g1 + weight * node["g1"]
            g2 = g2 + weight * node["g2"]
            if has_g3:
                g3 = g3 + weight * node["g3"]
    if g1 is None:
        raise ValueError("no diffusion nodes supplied")
    return _assemble(g1, g2, g3)


def convolve_irf(grid, sigma: float, spacing: float, axes=None) -> np.ndarray:
    """Gaussian detection-jitter convolution along each time axis.

    `sigma` and `spacing` share units.  The kernel is truncated at four
    standard deviations and renormalized to unit mass, so the total integral
    is preserved; boundaries are zero-padded.
    """
    out = np.array(grid, dtype=float, copy=True)
    if sigma == 0.0:
        return out
    if sigma < 0.0 or spacing <= 0.0:
        raise ValueError("sigma must be >= 0 and spacing > 0")
    sigma_bins = sigma / spacing
    for axis in range(out.ndim) if axes is None else axes:
        out = gaussian_filter1d(out, sigma_bins, axis=axis,
                                mode="constant", cval=0.0)
    return out


def rebin(grid, factor: int, axes=None) -> np.ndarray:
    """Block-sum rebinning by an integer factor along the given axes.

    Trailing bins that do not fill a block are dropped with a warning; total
    counts over the retained range are preserved exactly.
    """
    if factor < 1:
        raise ValueError("rebin factor must be >= 1")
    out = np.asarray(grid)
    if factor == 1:
        return out.copy()
    for axis in range(out.ndim) if axes is None else axes:
        n = out.shape[axis]
        blocks = n // factor
        if blocks * factor != n:
            warnings.warn(
                f"rebin drops {n - blocks * factor} trailing bins on axis "
                f"{axis}", stacklevel=2)
            out = np.take(out, np.arange(blocks * factor), axis=axis)
        shape = out.shape[:axis] + (blocks, factor) + out.shape[axis + 1:]
        out = out.reshape(shape).sum(axis=axis + 1)
    return out

"""Stochastic wave-function unraveling and the detection chain.

Each excitation pulse is one trajectory: a pure state evolves under the
non-Hermitian drift, its squared norm decays monotonically, and crossing a
uniform threshold triggers a jump.  The forward channel is displaced by the
drive amplitude (and the backward channel by the coherent background when one
is configured), so forward clicks represent the interfered transmitted field
rather than bare emitter emission.  Displacing a channel changes the
unraveling, not the ensemble; the compensating Hamiltonian terms assembled in
`_Kernel` keep the pulse-averaged dynamics equal to the master equation.

Randomness is drawn from one stream per pulse, derived from the batch seed
and the pulse index alone, so results are identical for any chunking or
worker count.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import correlate
from . import evolve
from . import model
from .evolve import PropagatorSettings
from .model import DetectionParams, SystemConfig

# jump-time bisection resolution (ns): tags feed ps-scale histograms
TIME_RESOLUTION = 1e-4

EMISSION_CHANNELS = ("forward", "backward", "loss", "dephase")

# detected tag record: times quantized to integer picoseconds
TAG_DTYPE = np.dtype(
    [("pulse_index", "<i8"), ("channel_id", "<u1"), ("time_ps", "<i8")]
)


@dataclass(frozen=True, slots=True)
class EmissionRecord:
    """One jump: which pulse, which channel, when (ns in the pulse frame)."""

    pulse_index: int
    channel: str
    time: float


@dataclass(eq=False)
class TagStream:
    """Detected clicks: header metadata plus records sorted by
    (pulse_index, time_ps).  Channel ids 0..2 are forward detectors,
    3..5 backward detectors.
    """

    header: dict
    records: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return self.header == other.header and np.array_equal(
            self.records, other.records
        )


class _Kernel:
    """Precomputed drift and jump channels for one (config, offsets) pair.

    Drift is d(psi)/dt = A(t) psi with
        A(t) = A0 - alpha(t) Mf^dag - conj(s_b(t)) Mb
               - (|alpha(t)|^2 + |s_b(t)|^2)/2 * I
    where Mf/Mb are the operator parts of the displaced forward/backward
    channels and A0 = -i H_static - (1/2) sum_c c^dag c.  The alpha-linear
    term is what remains of drive plus displacement compensation: the
    trajectory Hamiltonian is H_static + H_drive/2 minus the analogous
    backward term, so the ensemble master equation is unchanged.

    Dephasing is unraveled with sqrt(2 gamma_d) |e><e| instead of the
    sigma_z form used by the regression code; both generate the identical
    dissipator, but the number-operator form stays silent on the ground
    state, so an undriven system emits no records at all.
    """

    def __init__(self, config: SystemConfig, offsets: np.ndarray | None):
        ems = config.emitters
        m = len(ems)
        d = config.dim
        h_static, _ = model.hamiltonian_parts(ems, offsets)
        fwd = correlate.forward_operator(config)
        bwd = correlate.backward_operator(config)

        # (name, envelope or None, operator part) in fixed draw order
        self.channels: list[tuple[str, object, np.ndarray]] = [
            ("forward", fwd.envelope, fwd.matrix),
            ("backward", bwd.envelope, bwd.matrix),
        ]
        sum_cdc = (
            fwd.matrix.conj().T @ fwd.matrix + bwd.matrix.conj().T @ bwd.matrix
        )
        for op in model.jump_operators(ems):
            if op.label == "loss":
                self.channels.append(("loss", None, op.matrix))
                sum_cdc = sum_cdc + op.matrix.conj().T @ op.matrix
        number = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
        for j, em in enumerate(ems):
            if em.gamma_d > 0.0:
                mat = math.sqrt(2.0 * em.gamma_d) * model.embed_operator(
                    m, j, number
                )
                self.channels.append(("dephase", None, mat))
                sum_cdc = sum_cdc + mat.conj().T @ mat

        self.dim = d
        self.eye = np.eye(d, dtype=complex)
        self.a0 = -1j * h_static - 0.5 * sum_cdc
        self.af = fwd.envelope
        self.ab = bwd.envelope
        self.mf_dag = fwd.matrix.conj().T
        self.mb = bwd.matrix

    def drift(self, t: float) -> np.ndarray:
        a = self.af(t)
        b = self.ab(t)
        out = self.a0 - a * self.mf_dag - np.conj(b) * self.mb
        scal = -0.5 * (abs(a) ** 2 + abs(b) ** 2)
        return out + scal * self.eye

    def apply_channel(self, idx: int, psi: np.ndarray, t: float) -> np.ndarray:
        _, env, mat = self.channels[idx]
        out = mat @ psi
        if env is not None:
            out = out + env(t) * psi
        return out

    def channel_weights(self, psi: np.ndarray, t: float) -> np.ndarray:
        w = np.empty(len(self.channels))
        for i in range(len(self.channels)):
            jp = self.apply_channel(i, psi, t)
            w[i] = float(np.vdot(jp, jp).real)
        return w


def _rk4_step(psi, h, t0, tm, t1):
    """One RK4 step given the three stage matrices, pre-transposed for
    right multiplication; works on (d,) and (batch, d) alike."""
    k1 = psi @ t0
    k2 = (psi + (0.5 * h) * k1) @ tm
    k3 = (psi + (0.5 * h) * k2) @ tm
    k4 = (psi + h * k3) @ t1
    return psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _advance(psi, t_from, t_to, kern, h_cap):
    """Integrate one trajectory from t_from to t_to with steps <= h_cap."""
    span = t_to - t_from
    if span <= 0.0:
        return psi
    n = max(1, math.ceil(span / h_cap - 1e-12))
    h = span / n
    t = t_from
    for _ in range(n):
        a = kern.drift(t).T
        m = kern.drift(t + 0.5 * h).T
        b = kern.drift(t + h).T
        psi = _rk4_step(psi, h, a, m, b)
        t += h
    return psi


def _resolve_jumps(psi, t_lo, t_hi, threshold, rng, kern, h_cap, pulse, out):
    """The norm crossed `threshold` inside [t_lo, t_hi]: bisect the crossing,
    apply a jump, and repeat until the trajectory survives to t_hi.

    Returns (state at t_hi, live threshold).  Appends records to `out`.
    Per-jump draw order: channel choice first, then the next threshold.
    """
    t_cur = t_cur0 = t_lo
    psi_cur = psi
    for _ in range(100000):
        psi_end = _advance(psi_cur, t_cur, t_hi, kern, h_cap)
        n_end = float(np.vdot(psi_end, psi_end).real)
        if n_end > threshold:
            return psi_end, threshold, n_end
        lo, hi = t_cur, t_hi
        psi_lo = psi_cur
        while hi - lo > TIME_RESOLUTION:
            mid = 0.5 * (lo + hi)
            psi_mid = _advance(psi_lo, lo, mid, kern, h_cap)
            if float(np.vdot(psi_mid, psi_mid).real) > threshold:
                lo, psi_lo = mid, psi_mid
            else:
                hi = mid
        t_jump = 0.5 * (lo + hi)
        psi_jump = _advance(psi_lo, lo, t_jump, kern, h_cap)
        w = kern.channel_weights(psi_jump, t_jump)
        total = w.sum()
        if total <= 0.0:
            # norm loss without any open channel: numerically impossible
            raise RuntimeError("jump triggered with zero total channel weight")
        cum = np.cumsum(w) / total
        idx = min(
            int(np.searchsorted(cum, rng.random(), side="right")),
            len(kern.channels) - 1,
        )
        out.append(EmissionRecord(pulse, kern.channels[idx][0], t_jump))
        psi_new = kern.apply_channel(idx, psi_jump, t_jump)
        psi_cur = psi_new / np.linalg.norm(psi_new)
        t_cur = t_jump
        threshold = rng.random()
    raise RuntimeError(
        f"jump cascade did not terminate in [{t_cur0}, {t_hi}]"
    )


def _simulate_chunk(args) -> list[EmissionRecord]:
    """Worker: run the trajectories for one contiguous block of pulses."""
    config, offsets, indices, seed, settings, psi0 = args
    kern = _Kernel(config, offsets)
    grid = config.grid
    t0, t1 = grid.t_min, grid.t_max
    h = settings.step_size(model.max_rate(config, offsets))
    n_steps = max(1, math.ceil((t1 - t0) / h - 1e-12))
    h = (t1 - t0) / n_steps

    nodes = [kern.drift(t0 + k * h).T.copy() for k in range(n_steps + 1)]
    mids = [kern.drift(t0 + (k + 0.5) * h).T.copy() for k in range(n_steps)]

    if psi0 is None:
        psi0 = model.ground_state(len(config.emitters))
    batch = len(indices)
    psi = np.broadcast_to(np.asarray(psi0, dtype=complex), (batch, kern.dim)).copy()
    rngs = [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(p),)))
        for p in indices
    ]
    thresholds = np.array([r.random() for r in rngs])
    norm_prev = np.einsum("bd,bd->b", psi.conj(), psi).real

    records: list[EmissionRecord] = []
    for k in range(n_steps):
        t = t0 + k * h
        psi_new = _rk4_step(psi, h, nodes[k], mids[k], nodes[k + 1])
        n2 = np.einsum("bd,bd->b", psi_new.conj(), psi_new).real
        bad = ~np.isfinite(n2) | (n2 <= 0.0) | (n2 > norm_prev + 1e-9)
        if bad.any():
            raise RuntimeError(
                "trajectory norm underflow or unstable step: the integrator "
                "step is too large for the configured rates; reduce "
                "PropagatorSettings.dt_max or increase rate_safety"
            )
        hit = np.flatnonzero(n2 <= thresholds)
        for i in hit:
            # restart this trajectory from its pre-step state
            psi_i, thr_i, n2_i = _resolve_jumps(
                psi[i],
                t,
                t + h,
                thresholds[i],
                rngs[i],
                kern,
                h,
                int(indices[i]),
                records,
            )
            psi_new[i] = psi_i
            thresholds[i] = thr_i
            n2[i] = n2_i
        psi = psi_new
        norm_prev = n2
    records.sort(key=lambda rec: (rec.pulse_index, rec.time))
    return records


def run_batch(
    config: SystemConfig,
    offsets: np.ndarray | None,
    n_pulses: int,
    seed: int,
    psi0: np.ndarray | None = None,
    settings: PropagatorSettings = PropagatorSettings(),
    workers: int = 1,
    chunk_size: int = 65536,
) -> list[EmissionRecord]:
    """Simulate n_pulses independent pulse trajectories.

    Each pulse starts from the ground state (or `psi0`), evolves over the
    configured time window, and contributes its jumps as EmissionRecords in
    the pulse frame.  The returned list is sorted by (pulse_index, time) and
    is a pure function of (config, offsets, n_pulses, seed, psi0, settings):
    chunking and worker count never change it.
    """
    if n_pulses < 1:
        raise ValueError(f"n_pulses must be >= 1, got {n_pulses}")
    starts = range(0, n_pulses, chunk_size)
    tasks = [
        (
            config,
            offsets,
            np.arange(s, min(s + chunk_size, n_pulses)),
            seed,
            settings,
            psi0,
        )
        for s in starts
    ]
    if workers > 1 and len(tasks) > 1:
        from . import pipeline

        chunks = pipeline.run_tasks(_simulate_chunk, tasks, workers)
    else:
        chunks = [_simulate_chunk(t) for t in tasks]
    out: list[EmissionRecord] = []
    for ch in chunks:
        out.extend(ch)
    return out


def detect(
    records: list[EmissionRecord],
    detection: DetectionParams,
    seed: int,
    config: SystemConfig | None = None,
    n_pulses: int | None = None,
) -> TagStream:
    """Detection chain: waveguide emissions become time tags.

    Forward and backward records are routed to one of n_channels detectors
    with split_probs, thinned by the detector efficiency, jittered by a
    Gaussian of std sigma_irf_ps, and quantized to integer picoseconds.
    Loss and dephase records carry no waveguide photon and are dropped.
    Draw order per detectable record: route, then efficiency, then jitter.
    """
    rng = np.random.default_rng(seed)
    ordered = sorted(records, key=lambda r: (r.pulse_index, r.time))
    pulse = []
    backward = []
    time_ns = []
    for rec in ordered:
        if rec.channel == "forward":
            backward.append(False)
        elif rec.channel == "backward":
            backward.append(True)
        else:
            continue
        pulse.append(rec.pulse_index)
        time_ns.append(rec.time)
    n = len(pulse)
    probs = np.asarray(detection.split_probs, dtype=float)
    edges = np.cumsum(probs)
    det_idx = np.searchsorted(edges, rng.random(n), side="right")
    det_idx = np.minimum(det_idx, detection.n_channels - 1)
    keep = rng.random(n) < detection.efficiency
    jitter = rng.normal(0.0, detection.sigma_irf_ps, n)

    time_ps = np.rint(np.asarray(time_ns) * 1000.0 + jitter).astype(np.int64)
    channel_id = det_idx + 3 * np.asarray(backward, dtype=int)

    out = np.empty(int(keep.sum()), dtype=TAG_DTYPE)
    out["pulse_index"] = np.asarray(pulse, dtype=np.int64)[keep]
    out["channel_id"] = channel_id[keep]
    out["time_ps"] = time_ps[keep]
    out = out[np.lexsort((out["time_ps"], out["pulse_index"]))]

    k = detection.n_channels
    header = {
        "format": "wqtags-1",
        "seed": str(seed),
        "channel_map": f"0-{k - 1}:forward,3-{3 + k - 1}:backward",
    }
    if n_pulses is not None:
        header["n_pulses"] = str(int(n_pulses))
    if config is not None:
        header["config_hash"] = model.config_hash(config)
        header["rep_period_ns"] = repr(config.drive.rep_period)
    return TagStream(header, out)

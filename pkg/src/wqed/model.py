"""System description for m two-level emitters coupled through a 1D waveguide.

Everything internal runs in angular units: rates in rad/ns, times in ns.
Config files take linear GHz (value/2pi); the conversion lives in wqed.config.
The Hilbert space is the m-qubit product space with emitter 0 on the most
significant slot and the local basis ordered (|e>, |g>), so the collective
ground state is the last basis vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import math

import numpy as np

TWO_PI = 2.0 * math.pi

# local 2x2 operators in the (|e>, |g>) basis
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)


@dataclass(frozen=True)
class EmitterParams:
    """One emitter: total decay rate, waveguide coupling fraction, pure
    dephasing rate, laser-emitter detuning, spectral-diffusion width (all
    rad/ns) and the propagation phase at the emitter position (rad).

    `fano` is a recorded linewidth attribute with no dynamical role here.
    """

    gamma: float
    beta: float
    gamma_d: float = 0.0
    delta: float = 0.0
    sigma_sd: float = 0.0
    phi: float = 0.0
    fano: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma_d < 0.0:
            raise ValueError(f"gamma_d must be >= 0, got {self.gamma_d}")
        if self.sigma_sd < 0.0:
            raise ValueError(f"sigma_sd must be >= 0, got {self.sigma_sd}")


@dataclass(frozen=True)
class DriveParams:
    """Classical input field. `alpha0` is the peak amplitude in
    sqrt(photons/ns); `shape` is "gaussian" (amplitude std `sigma_pulse` ns,
    centered at `t_center`) or "cw". `rep_period` is the pulse repetition
    period in ns and only matters for pulsed streams.
    """

    alpha0: float
    shape: str = "gaussian"
    sigma_pulse: float = 3.0
    t_center: float = 0.0
    rep_period: float = 20.0

    def __post_init__(self) -> None:
        if self.shape not in ("gaussian", "cw"):
            raise ValueError(f"drive shape must be 'gaussian' or 'cw', got {self.shape!r}")
        if self.alpha0 < 0.0:
            raise ValueError(f"alpha0 must be >= 0, got {self.alpha0}")
        if self.shape == "gaussian" and not self.sigma_pulse > 0.0:
            raise ValueError(f"sigma_pulse must be positive, got {self.sigma_pulse}")
        if self.rep_period <= 0.0:
            raise ValueError(f"rep_period must be positive, got {self.rep_period}")


@dataclass(frozen=True)
class DetectionParams:
    """Detection chain: per-direction channel count and splitting, detector
    efficiency, Gaussian timing jitter (ps), histogram base bin width (ps),
    and an optional coherent background amplitude in the backward channel
    (sqrt(photons/ns), scattered input light). `dark_rate` is reserved and
    must stay 0.
    """

    sigma_irf_ps: float = 83.0
    n_channels: int = 3
    split_probs: tuple[float, ...] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    bin_width_ps: float = 32.0
    efficiency: float = 1.0
    background_amp_backward: float = 0.0
    dark_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma_irf_ps < 0.0:
            raise ValueError(f"sigma_irf_ps must be >= 0, got {self.sigma_irf_ps}")
        if self.n_channels < 1:
            raise ValueError(f"n_channels must be >= 1, got {self.n_channels}")
        if len(self.split_probs) != self.n_channels:
            raise ValueError(
                f"split_probs has {len(self.split_probs)} entries for "
                f"{self.n_channels} channels"
            )
        if any(p < 0.0 for p in self.split_probs):
            raise ValueError("split_probs must be non-negative")
        if abs(sum(self.split_probs) - 1.0) > 1e-9:
            raise ValueError(f"split_probs must sum to 1, got {sum(self.split_probs)}")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not self.bin_width_ps > 0.0:
            raise ValueError(f"bin_width_ps must be positive, got {self.bin_width_ps}")
        if self.background_amp_backward < 0.0:
            raise ValueError("background_amp_backward must be >= 0")
        if self.dark_rate != 0.0:
            raise ValueError("dark_rate is reserved and must be 0")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform simulation window [t_min, t_max] ns with spacing dt ns.
    (t_max - t_min) must be an integer number of steps.
    """

    t_min: float
    t_max: float
    dt: float

    def __post_init__(self) -> None:
        if not self.t_max > self.t_min:
            raise ValueError(f"t_max must exceed t_min, got [{self.t_min}, {self.t_max}]")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        steps = (self.t_max - self.t_min) / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError(
                f"grid span {self.t_max - self.t_min} ns is not an integer "
                f"multiple of dt={self.dt} ns"
            )

    @property
    def n_points(self) -> int:
        return int(round((self.t_max - self.t_min) / self.dt)) + 1

    def times(self) -> np.ndarray:
        return self.t_min + self.dt * np.arange(self.n_points)


@dataclass(frozen=True)
class SystemConfig:
    """Full system: emitters (possibly none), drive, detection chain, time
    grid and the master seed for every stochastic element.
    """

    emitters: tuple[EmitterParams, ...]
    drive: DriveParams
    detection: DetectionParams = field(default_factory=DetectionParams)
    grid: TimeGrid = TimeGrid(-8.96, 8.96, 0.128)
    seed: int = 0

    @property
    def n_emitters(self) -> int:
        return len(self.emitters)

    @property
    def dim(self) -> int:
        return 2 ** len(self.emitters)

    def subset(self, indices: tuple[int, ...]) -> "SystemConfig":
        """Config with only the selected emitters kept (order preserved)."""
        kept = tuple(self.emitters[i] for i in indices)
        return SystemConfig(kept, self.drive, self.detection, self.grid, self.seed)


def config_hash(config: SystemConfig) -> str:
    """Short stable digest of every resolved parameter.

    Frozen-dataclass reprs round-trip floats exactly, so identical configs
    hash identically across runs and platforms.
    """
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


def embed_operator(m: int, j: int, local: np.ndarray) -> np.ndarray:
    """Embed a 2x2 operator on emitter j into the 2^m product space."""
    if not 0 <= j < m:
        raise ValueError(f"emitter index {j} out of range for m={m}")
    if local.shape != (2, 2):
        raise ValueError(f"local operator must be 2x2, got {local.shape}")
    out = np.eye(2**j, dtype=complex)
    out = np.kron(out, local)
    return np.kron(out, np.eye(2 ** (m - 1 - j), dtype=complex))


def lowering_operators(m: int) -> list[np.ndarray]:
    return [embed_operator(m, j, SIGMA_MINUS) for j in range(m)]


def ground_state(m: int) -> np.ndarray:
    """All emitters in |g>: the last basis vector."""
    psi = np.zeros(2**m, dtype=complex)
    psi[-1] = 1.0
    return psi


def ground_density(m: int) -> np.ndarray:
    psi = ground_state(m)
    return np.outer(psi, psi.conj())


def coupling_matrices(emitters: tuple[EmitterParams, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Waveguide-mediated couplings.

    Returns (J, G): J[j, k] = sqrt(bG_j bG_k)/2 * sin|phi_j - phi_k| is the
    coherent exchange rate and G[j, k] = sqrt(bG_j bG_k) * cos|phi_j - phi_k|
    the dissipative cross rate (G[j, j] = Gamma_j), with bG_j = beta_j*Gamma_j.
    At phase separations that are multiples of pi the coupling is fully
    dissipative (J = 0).
    """
    m = len(emitters)
    bg = np.array([e.beta * e.gamma for e in emitters])
    phi = np.array([e.phi for e in emitters])
    root = np.sqrt(np.outer(bg, bg))
    sep = np.abs(phi[:, None] - phi[None, :])
    J = 0.5 * root * np.sin(sep)
    G = root * np.cos(sep)
    np.fill_diagonal(J, 0.0)
    np.fill_diagonal(G, [e.gamma for e in emitters])
    return J, G


def drive_envelope(drive: DriveParams, t) -> np.ndarray | float:
    """alpha(t) in sqrt(photons/ns); instantaneous flux is alpha(t)^2."""
    if drive.shape == "cw":
        return drive.alpha0 * np.ones_like(np.asarray(t, dtype=float))
    x = (np.asarray(t, dtype=float) - drive.t_center) / drive.sigma_pulse
    return drive.alpha0 * np.exp(-0.5 * x * x)


def rabi_frequency(drive: DriveParams, emitter: EmitterParams) -> float:
    """Peak Rabi frequency Omega = sqrt(2*beta*Gamma)*alpha0 (rad/ns)."""
    return math.sqrt(2.0 * emitter.beta * emitter.gamma) * drive.alpha0


def mean_photon_number(drive: DriveParams, emitter: EmitterParams) -> float:
    """Mean intra-lifetime photon number <n> = Omega^2/(2 beta Gamma^2),
    i.e. alpha0^2/Gamma: input flux integrated over one emitter lifetime.
    """
    omega = rabi_frequency(drive, emitter)
    return omega**2 / (2.0 * emitter.beta * emitter.gamma**2)


def hamiltonian_parts(
    emitters: tuple[EmitterParams, ...],
    offsets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Static Hamiltonian and unit-amplitude drive coupling.

    H(t) = H_static + alpha(t) * H_drive with
    H_static = sum_j -(Delta_j + offset_j) sp_j sm_j
               + sum_{j<k} J_jk (sp_j sm_k + sp_k sm_j)
    H_drive  = sum_j sqrt(beta_j Gamma_j / 2) (e^{i phi_j} sp_j + e^{-i phi_j} sm_j)

    `offsets` are additive detuning shifts (rad/ns), one per emitter — the
    spectral-diffusion hook.
    """
    m = len(emitters)
    dim = 2**m
    if offsets is None:
        offsets = np.zeros(m)
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (m,):
        raise ValueError(f"offsets must have shape ({m},), got {offsets.shape}")

    h_static = np.zeros((dim, dim), dtype=complex)
    h_drive = np.zeros((dim, dim), dtype=complex)
    sms = lowering_operators(m)
    sps = [s.conj().T for s in sms]
    J, _ = coupling_matrices(emitters)
    for j, em in enumerate(emitters):
        h_static -= (em.delta + offsets[j]) * (sps[j] @ sms[j])
        amp = math.sqrt(em.beta * em.gamma / 2.0)
        h_drive += amp * (np.exp(1j * em.phi) * sps[j] + np.exp(-1j * em.phi) * sms[j])
        for k in range(j + 1, m):
            h_static += J[j, k] * (sps[j] @ sms[k] + sps[k] @ sms[j])
    return h_static, h_drive


def hamiltonian(
    emitters: tuple[EmitterParams, ...],
    drive: DriveParams,
    t: float,
    offsets: np.ndarray | None = None,
) -> np.ndarray:
    """Rotating-frame Hamiltonian at time t (rad/ns)."""
    h_static, h_drive = hamiltonian_parts(emitters, offsets)
    return h_static + float(drive_envelope(drive, t)) * h_drive


@dataclass(frozen=True)
class JumpOperator:
    """A collapse channel. `label` is one of "fwd", "bwd", "loss", "deph";
    `emitter` identifies the emitter for the per-emitter channels."""

    label: str
    matrix: np.ndarray
    emitter: int | None = None


def jump_operators(emitters: tuple[EmitterParams, ...]) -> list[JumpOperator]:
    """Collapse channels: collective forward/backward waveguide emission,
    per-emitter non-guided loss, per-emitter pure dephasing.

    c_fwd = sum_j sqrt(beta_j Gamma_j/2) e^{-i phi_j} sm_j
    c_bwd = sum_j sqrt(beta_j Gamma_j/2) e^{+i phi_j} sm_j
    c_loss_j = sqrt((1-beta_j) Gamma_j) sm_j
    c_deph_j = sqrt(gamma_d_j / 2) sz_j

    Summing c^dag c over the fwd/bwd/loss channels reproduces the dissipative
    coupling matrix G[j,k] on sp_j sm_k exactly.
    """
    m = len(emitters)
    dim = 2**m
    sms = lowering_operators(m)
    c_fwd = np.zeros((dim, dim), dtype=complex)
    c_bwd = np.zeros((dim, dim), dtype=complex)
    for j, em in enumerate(emitters):
        amp = math.sqrt(em.beta * em.gamma / 2.0)
        c_fwd += amp * np.exp(-1j * em.phi) * sms[j]
        c_bwd += amp * np.exp(+1j * em.phi) * sms[j]
    ops = [JumpOperator("fwd", c_fwd), JumpOperator("bwd", c_bwd)]
    for j, em in enumerate(emitters):
        rate = (1.0 - em.beta) * em.gamma
        if rate > 0.0:
            ops.append(JumpOperator("loss", math.sqrt(rate) * sms[j], j))
    for j, em in enumerate(emitters):
        if em.gamma_d > 0.0:
            sz = embed_operator(m, j, SIGMA_Z)
            ops.append(JumpOperator("deph", math.sqrt(em.gamma_d / 2.0) * sz, j))
    return ops


def liouvillian_apply(
    h: np.ndarray,
    jumps: list[JumpOperator] | list[np.ndarray],
    rho: np.ndarray,
) -> np.ndarray:
    """d(rho)/dt = -i[H, rho] + sum_c (c rho c^dag - {c^dag c, rho}/2)."""
    out = -1j * (h @ rho - rho @ h)
    for op in jumps:
        c = op.matrix if isinstance(op, JumpOperator) else op
        crc = c @ rho @ c.conj().T
        cdc = c.conj().T @ c
        out += crc - 0.5 * (cdc @ rho + rho @ cdc)
    return out


def max_rate(
    config: SystemConfig,
    offsets: np.ndarray | None = None,
) -> float:
    """Fastest rate in the generator (rad/ns): decay, dephasing, detuning
    including diffusion offsets, exchange coupling and peak Rabi frequency.
    Used for the integrator step-size rule.
    """
    ems = config.emitters
    if not ems:
        return max(1.0, config.drive.alpha0**2)
    if offsets is None:
        offsets = np.zeros(len(ems))
    rates = []
    for j, em in enumerate(ems):
        rates += [em.gamma, em.gamma_d, abs(em.delta + offsets[j])]
        rates.append(rabi_frequency(config.drive, em))
    J, _ = coupling_matrices(ems)
    if len(ems) > 1:
        rates.append(float(np.max(np.abs(J))))
    return max(rates)


def assert_density_operator(rho: np.ndarray, tol: float = 1e-8) -> None:
    """Raise if rho is not a valid density operator (unit trace, Hermitian,
    positive semidefinite within tol)."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density operator must be square, got {rho.shape}")
    if abs(np.trace(rho) - 1.0) > tol:
        raise ValueError(f"trace deviates from 1 by {abs(np.trace(rho) - 1.0):.3e}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density operator is not Hermitian")
    w = np.linalg.eigvalsh(rho)
    if w.min() < -tol:
        raise ValueError(f"negative eigenvalue {w.min():.3e}")

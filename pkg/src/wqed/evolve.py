"""Master-equation propagation.

Density operators are vectorized row-major, so rho.reshape(-1) and the
superoperator matrices here agree with numpy's native memory order. The
generator always splits as L(t) = L0 + alpha(t) * L1 with L1 the unit-drive
part, which keeps time-dependent evaluation to one scalar fused add.

The default integrator is fixed-step classical RK4 with the envelope
evaluated at the Runge-Kutta substage times; the step obeys
dt <= min(dt_max, 1/(20 * fastest rate)). Correlation sweeps reuse the same
stepping through per-interval propagator matrices so that every branch of a
nested regression propagates through identical arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import model
from .model import DriveParams, SystemConfig


class SteadyStateError(RuntimeError):
    """Raised when the Liouvillian has no reliably solvable fixed point."""


@dataclass(frozen=True)
class PropagatorSettings:
    """Integrator knobs. `dt_max` caps the internal step (ns);
    `rate_safety` is the number of steps per fastest-rate period."""

    dt_max: float = 0.05
    rate_safety: float = 20.0

    def step_size(self, fastest_rate: float) -> float:
        if fastest_rate <= 0.0:
            return self.dt_max
        return min(self.dt_max, 1.0 / (self.rate_safety * fastest_rate))


def vec(rho: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rho).reshape(-1)


def unvec(v: np.ndarray, dim: int) -> np.ndarray:
    return v.reshape(dim, dim)


def liouvillian_matrix(h: np.ndarray, jumps) -> np.ndarray:
    """Supermatrix of -i[H, .] + dissipators for row-major vectorization."""
    dim = h.shape[0]
    eye = np.eye(dim, dtype=complex)
    L = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for op in jumps:
        c = op.matrix if isinstance(op, model.JumpOperator) else op
        cdc = c.conj().T @ c
        L += np.kron(c, c.conj())
        L -= 0.5 * (np.kron(cdc, eye) + np.kron(eye, cdc.T))
    return L


def generator_parts(
    config: SystemConfig,
    offsets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(L0, L1) with L(t) = L0 + alpha(t) L1."""
    h_static, h_drive = model.hamiltonian_parts(config.emitters, offsets)
    jumps = model.jump_operators(config.emitters)
    L0 = liouvillian_matrix(h_static, jumps)
    L1 = liouvillian_matrix(h_drive, [])
    return L0, L1


def detuning_generators(config: SystemConfig) -> np.ndarray:
    """Derivative of the generator with respect to each emitter's offset.

    L(offsets) = L(0) + sum_j offsets[j] * K[j], since an offset only adds
    -offset * n_j to the Hamiltonian.  Shape (m, d^2, d^2).
    """
    m, d = config.n_emitters, config.dim
    out = np.empty((m, d * d, d * d), dtype=complex)
    number = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
    for j in range(m):
        n_j = model.embed_operator(m, j, number)
        out[j] = liouvillian_matrix(-n_j, [])
    return out


def sandwich_matrix(a: np.ndarray) -> np.ndarray:
    """Supermatrix of rho -> A rho A^dag."""
    return np.kron(a, a.conj())


def trace_covector(a: np.ndarray) -> np.ndarray:
    """Row vector w with w @ vec(B) = Tr(A B A^dag) = Tr((A^dag A) B)."""
    return vec((a.conj().T @ a).T)


def _rk4_steps(
    v: np.ndarray,
    L0: np.ndarray,
    L1: np.ndarray,
    envelope,
    t_start: float,
    h: float,
    n_steps: int,
) -> np.ndarray:
    """Advance v (vector or matrix of columns) by n_steps RK4 steps of size h."""
    t = t_start
    for _ in range(n_steps):
        a0 = envelope(t)
        am = envelope(t + 0.5 * h)
        a1 = envelope(t + h)
        M0 = L0 + a0 * L1
        Mm = L0 + am * L1
        M1 = L0 + a1 * L1
        k1 = M0 @ v
        k2 = Mm @ (v + (0.5 * h) * k1)
        k3 = Mm @ (v + (0.5 * h) * k2)
        k4 = M1 @ (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    return v


def _envelope_fn(drive: DriveParams):
    if drive.shape == "cw":
        a0 = drive.alpha0
        return lambda t: a0
    inv2s2 = 0.5 / drive.sigma_pulse**2
    a0, tc = drive.alpha0, drive.t_center
    return lambda t: a0 * math.exp(-((t - tc) ** 2) * inv2s2)


def propagate(
    config: SystemConfig,
    rho: np.ndarray,
    t0: float,
    t1: float,
    offsets: np.ndarray | None = None,
    settings: PropagatorSettings = PropagatorSettings(),
) -> np.ndarray:
    """Propagate an operator from t0 to t1 under the full master equation.

    Linear in rho: any matrix (not only density operators) propagates, which
    the regression machinery relies on. t1 >= t0 required.
    """
    if t1 < t0:
        raise ValueError(f"cannot propagate backwards: t0={t0}, t1={t1}")
    if t1 == t0:
        return rho.copy()
    dim = config.dim
    if rho.shape != (dim, dim):
        raise ValueError(f"state has shape {rho.shape}, expected {(dim, dim)}")
    L0, L1 = generator_parts(config, offsets)
    dt = settings.step_size(model.max_rate(config, offsets))
    n = max(1, int(math.ceil((t1 - t0) / dt)))
    h = (t1 - t0) / n
    v = _rk4_steps(vec(rho.astype(complex)), L0, L1, _envelope_fn(config.drive),
                   t0, h, n)
    return unvec(v, dim)


def interval_propagators(
    config: SystemConfig,
    times: np.ndarray,
    offsets: np.ndarray | None = None,
    settings: PropagatorSettings = PropagatorSettings(),
) -> np.ndarray:
    """Propagator matrices U_k over each grid interval [t_k, t_{k+1}].

    Returns an array of shape (len(times)-1, d^2, d^2); a column-batched
    multiply by U_k advances any set of vectorized operators one grid step.
    For CW drive all intervals share one matrix (computed once).
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise ValueError("need at least two grid times")
    widths = np.diff(times)
    if np.any(widths <= 0):
        raise ValueError("grid times must be strictly increasing")
    L0, L1 = generator_parts(config, offsets)
    d2 = config.dim**2
    dt = settings.step_size(model.max_rate(config, offsets))
    env = _envelope_fn(config.drive)
    eye = np.eye(d2, dtype=complex)
    out = np.empty((len(widths), d2, d2), dtype=complex)

    if config.drive.shape == "cw" and np.allclose(widths, widths[0]):
        width = float(widths[0])
        n = max(1, int(math.ceil(width / dt)))
        U = _rk4_steps(eye, L0, L1, env, float(times[0]), width / n, n)
        out[:] = U
        return out

    for k, width in enumerate(widths):
        n = max(1, int(math.ceil(width / dt)))
        out[k] = _rk4_steps(eye, L0, L1, env, float(times[k]), width / n, n)
    return out


def states_on_grid(
    config: SystemConfig,
    rho0: np.ndarray,
    times: np.ndarray,
    offsets: np.ndarray | None = None,
    settings: PropagatorSettings = PropagatorSettings(),
) -> np.ndarray:
    """States at each grid time, stepping one vectorized state directly.

    Returns shape (len(times), d, d) with out[0] = rho0.  Avoids forming
    d^2 x d^2 propagators, so it stays cheap for large emitter numbers when
    only diagonal (single-time) quantities are needed.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ValueError("need at least one grid time")
    if np.any(np.diff(times) <= 0):
        raise ValueError("grid times must be strictly increasing")
    dim = config.dim
    if rho0.shape != (dim, dim):
        raise ValueError(f"state has shape {rho0.shape}, expected {(dim, dim)}")
    L0, L1 = generator_parts(config, offsets)
    dt = settings.step_size(model.max_rate(config, offsets))
    env = _envelope_fn(config.drive)
    out = np.empty((times.size, dim, dim), dtype=complex)
    out[0] = rho0
    v = vec(rho0.astype(complex))
    for k in range(times.size - 1):
        width = float(times[k + 1] - times[k])
        n = max(1, int(math.ceil(width / dt)))
        v = _rk4_steps(v, L0, L1, env, float(times[k]), width / n, n)
        out[k + 1] = unvec(v, dim)
    return out


def expectation(rho: np.ndarray, op: np.ndarray) -> complex:
    """Tr(op @ rho)."""
    return complex(np.trace(op @ rho))


def steady_state(
    config: SystemConfig,
    offsets: np.ndarray | None = None,
    residual_tol: float = 1e-10,
) -> np.ndarray:
    """Steady state of the CW-driven master equation by direct linear solve.

    Vectorizes the generator, replaces the ground-population row with the
    trace constraint and solves; Hermitizes the result. Raises
    SteadyStateError when the generator is singular beyond the trace freedom
    or the residual exceeds `residual_tol`.
    """
    if config.drive.shape != "cw":
        raise ValueError("steady_state requires a cw drive")
    L0, L1 = generator_parts(config, offsets)
    L = L0 + config.drive.alpha0 * L1
    rho = _solve_fixed_point(L, config.dim, residual_tol)
    return rho


def _solve_fixed_point(L: np.ndarray, dim: int, residual_tol: float) -> np.ndarray:
    d2 = dim * dim
    A = L.copy()
    b = np.zeros(d2, dtype=complex)
    # trace row: diagonal entries of rho sit at stride dim+1
    row = d2 - 1
    A[row] = 0.0
    A[row, :: dim + 1] = 1.0
    b[row] = 1.0
    try:
        v = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SteadyStateError(f"generator is singular: {exc}") from exc
    resid = float(np.max(np.abs(L @ v)))
    if not np.isfinite(resid) or resid > residual_tol:
        cond = float(np.linalg.cond(A))
        raise SteadyStateError(
            f"steady-state residual {resid:.2e} exceeds {residual_tol:.0e} "
            f"(condition number {cond:.2e})"
        )
    rho = unvec(v, dim)
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real
    return rho


def steady_state_batch(
    L_stack: np.ndarray,
    dim: int,
    residual_tol: float = 1e-10,
) -> np.ndarray:
    """Steady states for a stack of generators, shape (..., d^2, d^2).

    Uses one stacked LAPACK solve; intended for detuning sweeps and
    Monte-Carlo diffusion ensembles where thousands of fixed points are
    needed. Returns density matrices with shape (..., d, d).
    """
    d2 = dim * dim
    stack_shape = L_stack.shape[:-2]
    A = L_stack.copy().reshape(-1, d2, d2)
    b = np.zeros((A.shape[0], d2), dtype=complex)
    row = d2 - 1
    A[:, row, :] = 0.0
    A[:, row, :: dim + 1] = 1.0
    b[:, row] = 1.0
    try:
        v = np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SteadyStateError(f"singular generator in batch: {exc}") from exc
    resid = np.abs(np.einsum("nij,nj->ni", L_stack.reshape(-1, d2, d2), v)).max()
    if not np.isfinite(resid) or resid > residual_tol:
        raise SteadyStateError(
            f"batched steady-state residual {resid:.2e} exceeds {residual_tol:.0e}"
        )
    rho = v.reshape(*stack_shape, dim, dim)
    rho = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    return rho / tr[..., None, None]

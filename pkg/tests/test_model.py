import math

import numpy as np
import pytest

from wqed import model
from wqed.model import (
    DetectionParams,
    DriveParams,
    EmitterParams,
    SystemConfig,
    TimeGrid,
    TWO_PI,
)


def emitter(gamma_ghz=0.388, beta=0.95, gamma_d_ghz=0.0, delta_ghz=0.0,
            sigma_sd_ghz=0.0, phi=0.0):
    return EmitterParams(
        gamma=TWO_PI * gamma_ghz,
        beta=beta,
        gamma_d=TWO_PI * gamma_d_ghz,
        delta=TWO_PI * delta_ghz,
        sigma_sd=TWO_PI * sigma_sd_ghz,
        phi=phi,
    )


class TestEmbedding:
    def test_identity_m1(self):
        out = model.embed_operator(1, 0, model.IDENTITY_2)
        assert np.array_equal(out, np.eye(2))

    def test_sigma_z_second_slot(self):
        out = model.embed_operator(2, 1, model.SIGMA_Z)
        assert np.array_equal(np.diag(out), np.array([1, -1, 1, -1], dtype=complex))

    def test_product_trace_matches_bruteforce(self):
        # trace of sp_0 sm_0 sp_1 sm_1 on the doubly excited state contributes 1;
        # brute force the 4x4 product as the oracle
        sp0 = model.embed_operator(2, 0, model.SIGMA_PLUS)
        sm0 = model.embed_operator(2, 0, model.SIGMA_MINUS)
        sp1 = model.embed_operator(2, 1, model.SIGMA_PLUS)
        sm1 = model.embed_operator(2, 1, model.SIGMA_MINUS)
        prod = sp0 @ sm0 @ sp1 @ sm1
        brute = np.zeros((4, 4), dtype=complex)
        # build the same object from explicit kron of 2x2 number operators
        n_op = np.array([[1, 0], [0, 0]], dtype=complex)
        brute = np.kron(n_op, n_op)
        assert np.allclose(prod, brute, atol=1e-15)
        assert abs(np.trace(prod) - 1.0) < 1e-15

    def test_ground_state_position(self):
        psi = model.ground_state(3)
        assert psi[-1] == 1.0 and np.count_nonzero(psi) == 1

    def test_bad_index_raises(self):
        with pytest.raises(ValueError):
            model.embed_operator(2, 2, model.SIGMA_Z)


class TestCouplingMatrices:
    def test_fully_dissipative_at_pi(self):
        ems = (emitter(phi=0.0), emitter(phi=math.pi))
        J, G = model.coupling_matrices(ems)
        assert abs(J[0, 1]) < 1e-12
        bg = 0.95 * TWO_PI * 0.388
        assert G[0, 1] == pytest.approx(-bg, rel=1e-12)

    def test_quarter_wave_is_dispersive(self):
        ems = (emitter(phi=0.0), emitter(phi=math.pi / 2))
        J, G = model.coupling_matrices(ems)
        assert abs(G[0, 1]) < 1e-12
        assert J[0, 1] == pytest.approx(0.5 * 0.95 * TWO_PI * 0.388, rel=1e-12)

    def test_measured_pair_values(self):
        # beta1*Gamma1/2pi = 0.369 GHz, beta2*Gamma2/2pi = 0.293 GHz, 0.8 pi
        # apart: closed-form oracle evaluated independently here
        e1 = emitter(gamma_ghz=0.388, beta=0.95, phi=0.0)
        e2 = emitter(gamma_ghz=0.345, beta=0.85, phi=0.8 * math.pi)
        J, G = model.coupling_matrices((e1, e2))
        root = math.sqrt((0.95 * 0.388) * (0.85 * 0.345)) * TWO_PI
        expect_j = 0.5 * root * math.sin(0.8 * math.pi)
        expect_g = root * math.cos(0.8 * math.pi)
        assert J[0, 1] == pytest.approx(expect_j, rel=1e-12)
        assert G[0, 1] == pytest.approx(expect_g, rel=1e-12)
        # and the headline numbers in linear GHz
        assert J[0, 1] / TWO_PI == pytest.approx(0.0966, abs=5e-4)
        assert G[0, 1] / TWO_PI == pytest.approx(-0.266, abs=5e-4)

    def test_diagonal_is_total_decay(self):
        ems = (emitter(), emitter(gamma_ghz=0.345, beta=0.85, phi=1.0))
        _, G = model.coupling_matrices(ems)
        assert G[0, 0] == pytest.approx(TWO_PI * 0.388)
        assert G[1, 1] == pytest.approx(TWO_PI * 0.345)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        ems = tuple(
            emitter(gamma_ghz=0.1 + rng.random(), beta=rng.random(),
                    phi=rng.uniform(0, 8))
            for _ in range(4)
        )
        J, G = model.coupling_matrices(ems)
        assert np.allclose(J, J.T) and np.allclose(G, G.T)


class TestHamiltonian:
    def test_zero_without_drive_or_detuning(self):
        h = model.hamiltonian((emitter(),), DriveParams(0.0), t=0.0)
        assert np.max(np.abs(h)) == 0.0

    def test_detuned_eigenvalues(self):
        # Delta/2pi = 1 GHz puts the excited level at -2pi rad/ns
        h = model.hamiltonian((emitter(delta_ghz=1.0),), DriveParams(0.0), t=0.0)
        vals = np.sort(np.linalg.eigvalsh(h))
        assert vals == pytest.approx([-TWO_PI, 0.0], abs=1e-12)

    def test_single_excitation_block_splitting(self):
        # two resonant emitters, J-coupled: one-excitation eigenvalues are +-J
        ems = (emitter(phi=0.0), emitter(phi=math.pi / 2))
        J, _ = model.coupling_matrices(ems)
        h = model.hamiltonian(ems, DriveParams(0.0), t=0.0)
        # single-excitation subspace: basis indices 1 (|ge>) and 2 (|eg>)
        block = h[1:3, 1:3]
        vals = np.sort(np.linalg.eigvalsh(block))
        assert vals == pytest.approx([-J[0, 1], J[0, 1]], rel=1e-12)

    def test_hermitian_with_drive(self):
        ems = (emitter(delta_ghz=-0.3, phi=0.3), emitter(delta_ghz=0.2, phi=2.1))
        h = model.hamiltonian(ems, DriveParams(0.5), t=0.7)
        assert np.max(np.abs(h - h.conj().T)) < 1e-14

    def test_offsets_shift_detuning(self):
        em = emitter(delta_ghz=0.0)
        h = model.hamiltonian((em,), DriveParams(0.0), t=0.0,
                              offsets=np.array([1.5]))
        assert h[0, 0] == pytest.approx(-1.5)


class TestJumpOperators:
    def test_antisymmetric_collective_mode_at_pi(self):
        ems = (emitter(phi=0.0), emitter(phi=math.pi))
        ops = {op.label: op.matrix for op in model.jump_operators(ems)}
        sm0 = model.embed_operator(2, 0, model.SIGMA_MINUS)
        sm1 = model.embed_operator(2, 1, model.SIGMA_MINUS)
        amp = math.sqrt(0.95 * TWO_PI * 0.388 / 2.0)
        assert np.allclose(ops["fwd"], amp * (sm0 - sm1), atol=1e-9)

    def test_loss_rate(self):
        ems = (emitter(beta=0.85),)
        loss = [op for op in model.jump_operators(ems) if op.label == "loss"]
        assert len(loss) == 1 and loss[0].emitter == 0
        rate = np.max(np.abs(loss[0].matrix)) ** 2
        assert rate == pytest.approx(0.15 * TWO_PI * 0.388, rel=1e-12)

    def test_no_loss_channel_at_unit_beta(self):
        ems = (emitter(beta=1.0),)
        labels = [op.label for op in model.jump_operators(ems)]
        assert "loss" not in labels

    def test_channel_completeness(self):
        # sum of c^dag c over fwd/bwd/loss must equal sum_jk G_jk sp_j sm_k
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = rng.integers(1, 4)
            ems = tuple(
                emitter(gamma_ghz=0.1 + rng.random(), beta=rng.random(),
                        gamma_d_ghz=rng.random() * 0.1, phi=rng.uniform(0, 7))
                for _ in range(m)
            )
            total = np.zeros((2**m, 2**m), dtype=complex)
            for op in model.jump_operators(ems):
                if op.label == "deph":
                    continue
                total += op.matrix.conj().T @ op.matrix
            _, G = model.coupling_matrices(ems)
            sms = model.lowering_operators(int(m))
            expect = np.zeros_like(total)
            for j in range(m):
                for k in range(m):
                    expect += G[j, k] * sms[j].conj().T @ sms[k]
            assert np.max(np.abs(total - expect)) < 1e-12

    def test_dephasing_amplitude(self):
        ems = (emitter(gamma_d_ghz=0.09),)
        deph = [op for op in model.jump_operators(ems) if op.label == "deph"]
        assert len(deph) == 1
        assert deph[0].matrix[0, 0] == pytest.approx(
            math.sqrt(TWO_PI * 0.09 / 2.0), rel=1e-12
        )


class TestLiouvillian:
    def test_maximally_mixed_is_stationary_without_jumps(self):
        rng = np.random.default_rng(11)
        h = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        h = h + h.conj().T
        rho = np.eye(4) / 4.0
        out = model.liouvillian_apply(h, [], rho)
        assert np.max(np.abs(out)) < 1e-14

    def test_excited_state_decay_rate(self):
        ems = (emitter(beta=1.0),)
        rho = np.zeros((2, 2), dtype=complex)
        rho[0, 0] = 1.0  # excited
        h = model.hamiltonian(ems, DriveParams(0.0), t=0.0)
        out = model.liouvillian_apply(h, model.jump_operators(ems), rho)
        assert out[0, 0].real == pytest.approx(-TWO_PI * 0.388, rel=1e-12)
        assert out[1, 1].real == pytest.approx(+TWO_PI * 0.388, rel=1e-12)

    def test_trace_of_derivative_vanishes(self):
        rng = np.random.default_rng(5)
        ems = (emitter(gamma_d_ghz=0.05, delta_ghz=-0.3, phi=0.2),
               emitter(gamma_ghz=0.345, beta=0.85, phi=2.5))
        a = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        rho = a @ a.conj().T
        rho /= np.trace(rho)
        h = model.hamiltonian(ems, DriveParams(0.8), t=0.0)
        out = model.liouvillian_apply(h, model.jump_operators(ems), rho)
        assert abs(np.trace(out)) < 1e-13


class TestDriveAndPhotonNumber:
    def test_cw_envelope_constant(self):
        d = DriveParams(0.4, shape="cw")
        t = np.linspace(-5, 5, 11)
        assert np.allclose(model.drive_envelope(d, t), 0.4)

    def test_gaussian_envelope_peak_and_width(self):
        d = DriveParams(1.0, sigma_pulse=3.0, t_center=0.0)
        assert model.drive_envelope(d, 0.0) == pytest.approx(1.0)
        assert model.drive_envelope(d, 3.0) == pytest.approx(math.exp(-0.5))

    def test_mean_photon_number_from_rabi(self):
        # Omega = Gamma with beta = 0.95 gives <n> = 1/(2 beta) = 0.526
        em = emitter()
        alpha0 = em.gamma / math.sqrt(2.0 * em.beta * em.gamma)
        n = model.mean_photon_number(DriveParams(alpha0), em)
        assert n == pytest.approx(1.0 / (2.0 * 0.95), rel=1e-12)

    def test_mean_photon_number_is_flux_times_lifetime(self):
        em = emitter()
        d = DriveParams(0.5)
        assert model.mean_photon_number(d, em) == pytest.approx(0.25 / em.gamma)

    def test_zero_drive(self):
        assert model.mean_photon_number(DriveParams(0.0), emitter()) == 0.0


class TestValidation:
    def test_beta_range(self):
        with pytest.raises(ValueError):
            EmitterParams(gamma=1.0, beta=1.2)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            EmitterParams(gamma=-1.0, beta=0.5)

    def test_drive_shape(self):
        with pytest.raises(ValueError):
            DriveParams(0.1, shape="square")

    def test_split_probs_must_normalize(self):
        with pytest.raises(ValueError):
            DetectionParams(split_probs=(0.5, 0.2, 0.2))

    def test_split_probs_length(self):
        with pytest.raises(ValueError):
            DetectionParams(n_channels=2, split_probs=(0.5, 0.25, 0.25))

    def test_grid_alignment(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 0.128)

    def test_grid_times(self):
        g = TimeGrid(-1.28, 1.28, 0.128)
        t = g.times()
        assert g.n_points == 21 and t[0] == -1.28 and t[-1] == pytest.approx(1.28)

    def test_dark_rate_reserved(self):
        with pytest.raises(ValueError):
            DetectionParams(dark_rate=0.1)

    def test_subset_keeps_order(self):
        cfg = SystemConfig((emitter(phi=0.0), emitter(phi=1.0), emitter(phi=2.0)),
                           DriveParams(0.1))
        sub = cfg.subset((0, 2))
        assert sub.n_emitters == 2 and sub.emitters[1].phi == 2.0


class TestMaxRate:
    def test_dominated_by_decay(self):
        cfg = SystemConfig((emitter(),), DriveParams(0.01))
        assert model.max_rate(cfg) == pytest.approx(TWO_PI * 0.388)

    def test_includes_diffusion_offset(self):
        cfg = SystemConfig((emitter(),), DriveParams(0.01))
        r = model.max_rate(cfg, offsets=np.array([50.0]))
        assert r == pytest.approx(50.0)

"""Trajectory unraveling and detection-chain tests."""

import numpy as np
import pytest

from wqed import correlate, evolve, model, trajectories
from wqed.evolve import PropagatorSettings
from wqed.model import (
    DetectionParams,
    DriveParams,
    EmitterParams,
    SystemConfig,
    TimeGrid,
)
from wqed.trajectories import EmissionRecord, TagStream, detect, run_batch


def decaying_emitter(gamma=1.0, beta=1.0, **kw):
    return SystemConfig(
        emitters=(EmitterParams(gamma=gamma, beta=beta, **kw),),
        drive=DriveParams(alpha0=0.0, shape="cw"),
        grid=TimeGrid(0.0, 40.0, 0.5),
    )


def point_source(alpha0, background=0.0, t_max=8.0):
    return SystemConfig(
        emitters=(),
        drive=DriveParams(alpha0=alpha0, shape="cw"),
        detection=DetectionParams(background_amp_backward=background),
        grid=TimeGrid(0.0, t_max, 0.5),
    )


EXCITED = np.array([1.0, 0.0], dtype=complex)


class TestRunBatch:
    def test_undriven_ground_state_is_silent(self):
        # dephasing and loss channels present, but nothing to emit
        config = decaying_emitter(gamma=1.3, beta=0.8, gamma_d=0.5)
        records = run_batch(config, None, 50, seed=3)
        assert records == []

    def test_excited_state_emits_exactly_once(self):
        config = decaying_emitter(gamma=1.0, beta=1.0)
        n = 10000
        records = run_batch(config, None, n, seed=11, psi0=EXCITED)
        assert len(records) == n
        counts = np.bincount(
            [r.pulse_index for r in records], minlength=n
        )
        assert counts.min() == counts.max() == 1

        times = np.array([r.time for r in records])
        # mean of Exp(Gamma): 1/Gamma, standard error (1/Gamma)/sqrt(n)
        assert abs(times.mean() - 1.0) < 3.0 / np.sqrt(n)
        assert (times >= 0.0).all() and (times <= 40.0).all()

        channels = {r.channel for r in records}
        assert channels <= {"forward", "backward"}
        n_fwd = sum(r.channel == "forward" for r in records)
        # beta=1 splits emission evenly between the two waveguide directions
        assert abs(n_fwd - 0.5 * n) < 3.0 * np.sqrt(n * 0.25)

    def test_point_source_is_poissonian(self):
        # no emitters: the displaced forward channel is a coherent field
        config = point_source(alpha0=1.0)
        n = 2000
        records = run_batch(config, None, n, seed=5)
        assert all(r.channel == "forward" for r in records)

        counts = np.bincount(
            [r.pulse_index for r in records], minlength=n
        ).astype(float)
        rate = 1.0**2 * (config.grid.t_max - config.grid.t_min)
        assert abs(counts.mean() - rate) < 4.0 * np.sqrt(rate / n)
        fano = counts.var(ddof=1) / counts.mean()
        assert abs(fano - 1.0) < 3.0 * np.sqrt(2.0 / (n - 1))

    def test_backward_background_is_poissonian(self):
        config = point_source(alpha0=0.0, background=0.8, t_max=10.0)
        n = 800
        records = run_batch(config, None, n, seed=9)
        assert all(r.channel == "backward" for r in records)
        mean = 0.8**2 * 10.0 * n
        assert abs(len(records) - mean) < 4.0 * np.sqrt(mean)

    def test_click_rates_match_master_equation(self):
        # generic single emitter: detuned, dephased, lossy, off-phase, with a
        # diffusion offset and a backward background
        config = SystemConfig(
            emitters=(
                EmitterParams(
                    gamma=2.0, beta=0.9, gamma_d=0.25, delta=0.4, phi=0.3
                ),
            ),
            drive=DriveParams(alpha0=np.sqrt(0.4 * 2.0), sigma_pulse=1.0),
            detection=DetectionParams(background_amp_backward=0.3),
            grid=TimeGrid(-4.0, 4.0, 0.25),
        )
        offsets = np.array([0.15])
        n = 4000
        records = run_batch(config, offsets, n, seed=21)

        times = config.grid.times()
        expected = {}
        for direction in ("forward", "backward"):
            g1 = correlate.intensity_g1(config, direction, offsets=offsets)
            expected[direction] = n * np.trapezoid(g1, times)

        # loss and dephase rates follow the excited population
        states = evolve.states_on_grid(
            config, model.ground_density(1), times, offsets=offsets
        )
        pop = states[:, 0, 0].real
        em = config.emitters[0]
        expected["loss"] = n * (1.0 - em.beta) * em.gamma * np.trapezoid(pop, times)
        expected["dephase"] = n * 2.0 * em.gamma_d * np.trapezoid(pop, times)

        for channel, mu in expected.items():
            count = sum(r.channel == channel for r in records)
            assert abs(count - mu) < 3.5 * np.sqrt(mu), (
                f"{channel}: {count} vs {mu:.1f}"
            )

    def test_independent_of_chunking_and_workers(self):
        config = SystemConfig(
            emitters=(EmitterParams(gamma=2.0, beta=0.9, gamma_d=0.2),),
            drive=DriveParams(alpha0=0.8, sigma_pulse=1.0),
            grid=TimeGrid(-3.0, 3.0, 0.25),
        )
        base = run_batch(config, None, 300, seed=42, chunk_size=300)
        assert len(base) > 50
        assert base == run_batch(config, None, 300, seed=42, chunk_size=64)
        assert base == run_batch(
            config, None, 300, seed=42, chunk_size=100, workers=2
        )

    def test_records_sorted(self):
        config = point_source(alpha0=1.0)
        records = run_batch(config, None, 200, seed=1)
        keys = [(r.pulse_index, r.time) for r in records]
        assert keys == sorted(keys)

    def test_unstable_step_raises(self):
        config = decaying_emitter(gamma=30.0)
        config = SystemConfig(
            config.emitters, config.drive, config.detection,
            grid=TimeGrid(0.0, 4.0, 1.0),
        )
        settings = PropagatorSettings(dt_max=1.0, rate_safety=1e-3)
        with pytest.raises(RuntimeError, match="underflow|unstable"):
            run_batch(config, None, 5, seed=0, psi0=EXCITED, settings=settings)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError, match="n_pulses"):
            run_batch(point_source(1.0), None, 0, seed=0)


def forward_records(times_by_pulse):
    return [
        EmissionRecord(p, "forward", t)
        for p, ts in times_by_pulse.items()
        for t in ts
    ]


PASSTHROUGH = DetectionParams(
    sigma_irf_ps=0.0, n_channels=1, split_probs=(1.0,), efficiency=1.0
)


class TestDetect:
    def test_passthrough(self):
        records = [
            EmissionRecord(0, "forward", 1.234),
            EmissionRecord(0, "forward", -0.5),
            EmissionRecord(2, "forward", 3.0),
        ]
        stream = detect(records, PASSTHROUGH, seed=7)
        assert stream.records["pulse_index"].tolist() == [0, 0, 2]
        assert stream.records["channel_id"].tolist() == [0, 0, 0]
        assert stream.records["time_ps"].tolist() == [-500, 1234, 3000]
        assert stream.header["channel_map"] == "0-0:forward,3-3:backward"
        assert stream.header["seed"] == "7"

    def test_three_way_split(self):
        n = 300000
        records = forward_records({0: np.zeros(n)})
        stream = detect(records, DetectionParams(sigma_irf_ps=0.0), seed=2)
        assert stream.records.size == n
        counts = np.bincount(stream.records["channel_id"], minlength=3)
        sigma = np.sqrt(n * (1.0 / 3.0) * (2.0 / 3.0))
        assert (np.abs(counts - n / 3.0) < 3.0 * sigma).all()

    def test_efficiency(self):
        records = forward_records({0: np.zeros(10000)})
        dead = DetectionParams(
            sigma_irf_ps=0.0, n_channels=1, split_probs=(1.0,), efficiency=0.0
        )
        assert detect(records, dead, seed=0).records.size == 0

        half = DetectionParams(
            sigma_irf_ps=0.0, n_channels=1, split_probs=(1.0,), efficiency=0.5
        )
        kept = detect(records, half, seed=0).records.size
        assert abs(kept - 5000) < 3.0 * np.sqrt(10000 * 0.25)

    def test_only_waveguide_channels_are_detected(self):
        records = [
            EmissionRecord(0, "forward", 0.1),
            EmissionRecord(0, "backward", 0.2),
            EmissionRecord(0, "loss", 0.3),
            EmissionRecord(0, "dephase", 0.4),
        ]
        stream = detect(records, DetectionParams(sigma_irf_ps=0.0), seed=4)
        assert stream.records.size == 2
        ids = stream.records["channel_id"]
        assert ids[0] in (0, 1, 2) and ids[1] in (3, 4, 5)
        assert stream.records["time_ps"].tolist() == [100, 200]

    def test_jitter_statistics(self):
        n = 20000
        records = forward_records({i: [5.0] for i in range(n)})
        det = DetectionParams(
            sigma_irf_ps=40.0, n_channels=1, split_probs=(1.0,)
        )
        t = detect(records, det, seed=6).records["time_ps"].astype(float)
        assert t.size == n
        assert abs(t.mean() - 5000.0) < 3.0 * 40.0 / np.sqrt(n)
        assert abs(t.std(ddof=1) - 40.0) < 3.0 * 40.0 / np.sqrt(2.0 * n)

    def test_deterministic_given_seed(self):
        records = forward_records({i: [1.0, 2.0] for i in range(50)})
        det = DetectionParams(sigma_irf_ps=30.0)
        assert detect(records, det, seed=8) == detect(records, det, seed=8)
        assert detect(records, det, seed=8) != detect(records, det, seed=9)

    def test_header_carries_config(self):
        config = point_source(alpha0=1.0)
        stream = detect([], config.detection, seed=0, config=config,
                        n_pulses=123)
        assert stream.header["config_hash"] == model.config_hash(config)
        assert float(stream.header["rep_period_ns"]) == 20.0
        assert stream.header["n_pulses"] == "123"
        assert stream.records.size == 0

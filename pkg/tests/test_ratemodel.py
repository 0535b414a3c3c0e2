import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flcoex import scenario
from flcoex.ratemodel import (
    compute_energy,
    compute_energy_from_time,
    compute_time,
    dl_rate,
    dl_rate_per_rb,
    min_compute_time,
    round_latency,
    ul_rate,
)

RADIO = scenario.RadioConstants(
    num_rbs=10,
    subcarrier_bw=60e3,
    noise_psd=scenario.dbm_to_watt(-174.0),
    bs_power_per_rb=1.0,
    ue_max_power=0.1995,
    carrier_freq=3.5e9,
    tti_len=1e-3,
)
# squared free-space gain at 50 m / 3.5 GHz, computed independently below
H2_EDGE = (299792458.0 / (4 * math.pi * 50.0 * 3.5e9)) ** 2

WORKLOAD = scenario.FlWorkload(
    model_bits=1e8,
    epochs=20,
    cycles_per_sample=1_474_560,
    local_samples=6000,
    f_max=2e9,
    kappa=1e-28,
    energy_weight=0.05,
)


class TestDlRate:
    def test_zero_rbs(self):
        assert dl_rate(0.0, H2_EDGE, RADIO) == 0.0

    def test_single_rb_reference_value(self):
        # independent arithmetic: snr = Pd*h2/(B*N0), rate = B*log2(1+snr)
        snr = 1.0 * H2_EDGE / (60e3 * scenario.dbm_to_watt(-174.0))
        expected = 60e3 * math.log2(1.0 + snr)
        assert snr == pytest.approx(7.78e7, rel=1e-3)
        assert expected == pytest.approx(1.573e6, rel=1e-3)
        assert dl_rate(1.0, H2_EDGE, RADIO) == pytest.approx(expected, rel=1e-12)

    def test_linearity_in_rb_count(self):
        one = dl_rate(1.0, H2_EDGE, RADIO)
        assert dl_rate(10.0, H2_EDGE, RADIO) == pytest.approx(10 * one, rel=1e-12)

    def test_negative_rbs_rejected(self):
        with pytest.raises(ValueError):
            dl_rate(-0.5, H2_EDGE, RADIO)


class TestUlRate:
    def test_zero_rbs_is_zero(self):
        assert ul_rate(0.0, 0.1, H2_EDGE, RADIO) == 0.0

    def test_small_rb_limit_matches_zero(self):
        # continuous extension: K -> 0+ tends to 0
        vals = [ul_rate(10.0**-k, 0.1995, H2_EDGE, RADIO) for k in (3, 6, 9)]
        assert vals[0] > vals[1] > vals[2] > 0
        assert vals[2] < 1e-4 * ul_rate(1.0, 0.1995, H2_EDGE, RADIO)

    def test_reference_value(self):
        # independent arithmetic on the perspective form
        p = 0.1995
        snr = p * H2_EDGE / (1.0 * 60e3 * scenario.dbm_to_watt(-174.0))
        expected = 1.0 * 60e3 * math.log2(1.0 + snr)
        assert expected == pytest.approx(1.433e6, rel=1e-3)
        assert ul_rate(1.0, p, H2_EDGE, RADIO) == pytest.approx(expected, rel=1e-12)

    def test_concavity_in_rb_count(self):
        r1 = ul_rate(1.0, 0.1, H2_EDGE, RADIO)
        r2 = ul_rate(2.0, 0.1, H2_EDGE, RADIO)
        assert r1 < r2 < 2 * r1

    @given(
        k=st.floats(0.01, 20.0),
        p=st.floats(1e-4, 0.1995),
        c=st.floats(0.05, 5.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_positive_homogeneity(self, k, p, c):
        # the perspective form scales: r(cK, cp) == c * r(K, p)
        if c * p > RADIO.ue_max_power:
            c = RADIO.ue_max_power / p
        lhs = ul_rate(c * k, c * p, H2_EDGE, RADIO)
        rhs = c * ul_rate(k, p, H2_EDGE, RADIO)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    @given(k=st.floats(0.01, 10.0), p=st.floats(1e-4, 0.19))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_both_arguments(self, k, p):
        base = ul_rate(k, p, H2_EDGE, RADIO)
        assert ul_rate(k * 1.1, p, H2_EDGE, RADIO) >= base
        assert ul_rate(k, p * 1.05, H2_EDGE, RADIO) >= base

    def test_joint_concavity_midpoints(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            k1, k2 = rng.uniform(0.01, 15.0, 2)
            p1, p2 = rng.uniform(1e-4, 0.1995, 2)
            mid = ul_rate(0.5 * (k1 + k2), 0.5 * (p1 + p2), H2_EDGE, RADIO)
            avg = 0.5 * (ul_rate(k1, p1, H2_EDGE, RADIO) + ul_rate(k2, p2, H2_EDGE, RADIO))
            assert mid >= avg - 1e-9 * max(1.0, abs(avg))

    def test_power_above_cap_rejected(self):
        with pytest.raises(ValueError):
            ul_rate(1.0, 0.3, H2_EDGE, RADIO)


class TestCompute:
    def test_time_reference_value(self):
        # 20 * 1474560 * 6000 / 2e9
        expected = 20 * 1_474_560 * 6000 / 2e9
        assert expected == pytest.approx(88.47, rel=1e-3)
        assert compute_time(WORKLOAD, 2e9) == pytest.approx(expected, rel=1e-12)

    def test_time_at_fmax_is_minimum(self):
        assert compute_time(WORKLOAD, WORKLOAD.f_max) == min_compute_time(WORKLOAD)
        assert compute_time(WORKLOAD, 1e9) > min_compute_time(WORKLOAD)

    def test_energy_reference_value(self):
        expected = 1e-28 * 20 * 1_474_560 * 6000 * (2e9) ** 2
        assert expected == pytest.approx(70.78, rel=1e-3)
        assert compute_energy(WORKLOAD, 2e9) == pytest.approx(expected, rel=1e-12)

    def test_energy_quadratic_scaling(self):
        assert compute_energy(WORKLOAD, 1e9) == pytest.approx(
            compute_energy(WORKLOAD, 2e9) / 4.0, rel=1e-12
        )

    def test_energy_time_consistency(self):
        # E(f) equals kappa*(I*C)^3*Theta^3 / tau(f)^2
        for f in (2e9, 1.3e9, 4e8):
            tau = compute_time(WORKLOAD, f)
            assert compute_energy(WORKLOAD, f) == pytest.approx(
                compute_energy_from_time(WORKLOAD, tau), rel=1e-12
            )

    def test_nonpositive_speed_rejected(self):
        with pytest.raises(ValueError):
            compute_time(WORKLOAD, 0.0)
        with pytest.raises(ValueError):
            compute_energy(WORKLOAD, -1.0)


class TestRoundLatency:
    def test_single_ue(self):
        assert round_latency([1], [2], [3]) == 6

    def test_slowest_ue_wins(self):
        assert round_latency([1, 2], [1, 2], [1, 2]) == 6

    def test_permutation_invariance(self):
        a = round_latency([1, 5, 2], [2, 1, 3], [3, 2, 1])
        b = round_latency([5, 2, 1], [1, 3, 2], [2, 1, 3])
        assert a == b

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            round_latency([1, 2], [1], [1, 2])

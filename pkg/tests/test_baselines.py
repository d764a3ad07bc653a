import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import complex_normal
from ttsbeam.baselines import (
    BaselineConfig,
    ao_slots,
    baseline_random_phase,
    min_power_beamforming,
    optimize_wsr_phases,
    sinr_targets,
    sum_rate_and_gradient,
)
from ttsbeam.channel import (
    ChannelSample,
    SystemDims,
    build_scsi_model,
    cascaded_rows,
    sample_batch,
    sample_channel,
    stack_samples,
)
from ttsbeam.cssca import LongTermConfig, sample_seeds
from ttsbeam.harness.experiments import random_instance
from ttsbeam.wmmse import sinr_from_effective


def test_sinr_targets():
    np.testing.assert_allclose(sinr_targets([0, 1, 3]), [0, 1, 7])
    with pytest.raises(ValueError):
        sinr_targets([-1.0])


def test_single_user_closed_form():
    h = np.array([[1.0 + 1.0j, 2.0, 0.5j]])
    res = min_power_beamforming(h, [0.3], [4.0])
    assert res.power == pytest.approx(4.0 * 0.3 / np.sum(np.abs(h) ** 2), rel=1e-10)


def test_orthogonal_users_decouple():
    h = np.diag([2.0, 0.5]).astype(complex)
    res = min_power_beamforming(h, [1.0, 0.1], [3.0, 1.0])
    assert res.power == pytest.approx(3.0 / 4.0 + 0.1 / 0.25, rel=1e-10)


def test_frozen_power():
    rng = np.random.default_rng(7)
    h = (rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))) / np.sqrt(2)
    res = min_power_beamforming(h, [0.1, 0.2, 0.3], sinr_targets([1, 1, 1]))
    assert float(res.power) == pytest.approx(0.33868979528266757, rel=1e-9)


def _socp_power(h, sigma2, gam):
    K, M = h.shape
    W = cp.Variable((M, K), complex=True)
    cons = []
    for k in range(K):
        # rotate so h_k^H w_k is real; the standard SOC form of the SINR constraint
        s = h[k].conj() @ W
        cons += [cp.imag(s[k]) == 0,
                 cp.norm(cp.hstack([s, np.sqrt(sigma2[k])])) <= np.sqrt(1 + 1 / gam[k]) * cp.real(s[k])]
    prob = cp.Problem(cp.Minimize(cp.sum_squares(W)), cons)
    prob.solve()
    return prob.value


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_matches_conic_solver(seed, K):
    rng = np.random.default_rng(seed)
    h = complex_normal(rng, K, 4)
    sigma2 = rng.uniform(0.1, 1.0, K)
    gam = rng.uniform(0.5, 3.0, K)
    res = min_power_beamforming(h, sigma2, gam)
    assert res.feasible
    assert float(res.power) == pytest.approx(_socp_power(h, sigma2, gam), rel=1e-5)
    assert np.all(sinr_from_effective(h, res.w, sigma2) >= gam * (1 - 1e-6))


def test_infeasible_slot_reports_nan():
    # two users sharing one direction cannot both reach SINR 3
    h = np.array([[1.0, 0.0], [1.0, 0.0]], complex)
    res = min_power_beamforming(h, [0.1, 0.1], [3.0, 3.0])
    assert not res.feasible and np.isnan(res.power)
    np.testing.assert_array_equal(res.w, 0.0)


def test_batched_feasibility_is_per_slot():
    good = np.eye(2, dtype=complex)
    bad = np.array([[1.0, 0.0], [1.0, 0.0]], complex)
    res = min_power_beamforming(np.stack([good, bad]), np.full((2, 2), 0.1), [3.0, 3.0])
    np.testing.assert_array_equal(res.feasible, [True, False])
    assert res.power[0] == pytest.approx(0.6)


def test_sum_rate_gradient_matches_fd():
    rng = np.random.default_rng(4)
    batch = stack_samples([random_instance(rng, 3, 4, 2) for _ in range(3)])
    theta = rng.uniform(0, 2 * np.pi, 4)
    _, grad = sum_rate_and_gradient(theta, batch, 2.0)
    eps = 1e-6
    fd = [(sum_rate_and_gradient(theta + eps * e, batch, 2.0)[0]
           - sum_rate_and_gradient(theta - eps * e, batch, 2.0)[0]) / (2 * eps) for e in np.eye(4)]
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_ao_power_never_increases():
    scsi = build_scsi_model(SystemDims(3, 2, 2, 2), seed=2)
    est = sample_batch(scsi, sample_seeds(0, 99, 0, 20))
    theta0 = np.random.default_rng(0).uniform(0, 2 * np.pi, (20, 4))
    _, res, hist = ao_slots(est, theta0, sinr_targets([2, 2]), rounds=3)
    ok = np.isfinite(hist[0])
    assert np.all(np.diff(hist[:, ok], axis=0) <= 1e-12 * hist[0, ok])
    assert np.all(res.feasible[ok])


def test_random_phase_record():
    scsi = build_scsi_model(SystemDims(3, 2, 2, 2), seed=2)
    rec = baseline_random_phase(scsi, BaselineConfig(R=[1, 1], n_slots=30))
    assert rec.scheme == "random-phase" and rec.n_slots == 30
    assert rec.infeasible_slots == 0
    assert np.all(rec.rates >= 1 - 1e-6)


def test_zero_targets_zero_power():
    h = complex_normal(np.random.default_rng(1), 3, 4)
    res = min_power_beamforming(h, [0.1, 0.2, 0.3], [0.0, 0.0, 0.0])
    assert res.feasible and res.power == 0.0
    np.testing.assert_array_equal(res.w, 0.0)


def test_uplink_downlink_power_duality():
    rng = np.random.default_rng(0)
    h = complex_normal(rng, 3, 4)
    res = min_power_beamforming(h, [0.1, 0.2, 0.3], [1.0, 2.0, 0.5])
    assert res.uplink.sum() == pytest.approx(float(res.power), rel=1e-8)


def _coherence(theta, rows):
    # |sum_n e^{-j theta_n} V_n| / sum_n |V_n|, equal to 1 when every element adds in phase
    return np.linalg.norm(np.einsum("n,nm->m", np.exp(-1j * theta), rows)) / np.linalg.norm(rows, axis=1).sum()


@pytest.fixture(scope="module")
def los_single_user():
    return build_scsi_model(SystemDims(2, 2, 2, 1), beta_AI=1.0, beta_Iu=1.0, seed=0)


def test_sum_rate_phases_align_rank_one_cascade(los_single_user):
    theta, _ = optimize_wsr_phases(los_single_user, LongTermConfig(R=[1], B=4, J=3, T_iters=100), 1.0)
    rows = cascaded_rows(sample_channel(los_single_user, 123))[0]
    assert _coherence(theta, rows) >= 0.99


def test_ao_aligns_single_user_los(los_single_user):
    est = sample_batch(los_single_user, range(5))
    theta, _, _ = ao_slots(est, np.zeros((5, 4)), sinr_targets([1]), rounds=3)
    rows = cascaded_rows(est)[:, 0]
    assert min(_coherence(t, r) for t, r in zip(theta, rows)) >= 0.99


def test_ao_without_irs_equals_plain_beamforming():
    scsi = build_scsi_model(SystemDims(3, 2, 2, 2), seed=2)
    s = sample_batch(scsi, range(6))
    est = ChannelSample(s.G, np.zeros_like(s.h_r), s.h_d, s.noise_vars)
    gam = sinr_targets([1, 1])
    _, res, _ = ao_slots(est, np.zeros((6, 4)), gam)
    plain = min_power_beamforming(est.h_d, est.noise_vars, gam)
    np.testing.assert_allclose(res.power, plain.power, rtol=1e-12)


def test_random_phase_deterministic():
    scsi = build_scsi_model(SystemDims(3, 2, 2, 2), seed=2)
    a = baseline_random_phase(scsi, BaselineConfig(R=[1, 1], n_slots=10, seed=4))
    b = baseline_random_phase(scsi, BaselineConfig(R=[1, 1], n_slots=10, seed=4))
    assert a.power_w == b.power_w
    np.testing.assert_array_equal(a.rates, b.rates)

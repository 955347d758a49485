"""Policy network tests: forward passes, squashing, log-probs, gradients,
and the checkpoint container."""

import math

import numpy as np
import pytest

from _gradcheck import check_gradients
from contactnav import policy as P
from contactnav.config import RunConfig
from contactnav.errors import ChecksumMismatchError, ConfigurationError, ContractViolationError


@pytest.fixture
def arch(cfg):
    return P.arch_from_config(cfg)


def random_obs(arch, rng, batch=1):
    scans = rng.uniform(0.05, 1.0, (batch, arch.history, arch.num_rays))
    state = rng.uniform(-1.0, 1.0, (batch, arch.state_dim))
    return scans, state


class TestForward:
    def test_zero_params_zero_outputs(self, arch, rng):
        params = P.PolicyParams.zeros(arch)
        scans, state = random_obs(arch, rng)
        f = P.forward(params, scans, state)
        assert np.all(f.mean == 0.0)
        assert np.all(f.value == 0.0)
        assert np.all(f.aux == 0.0)

    def test_deterministic(self, arch, rng):
        params = P.init_params(arch, rng)
        scans, state = random_obs(arch, rng, batch=3)
        f1 = P.forward(params, scans, state)
        f2 = P.forward(params, scans, state)
        assert np.array_equal(f1.mean, f2.mean)
        assert np.array_equal(f1.value, f2.value)
        assert np.array_equal(f1.aux, f2.aux)

    def test_shape_mismatch_rejected(self, arch, rng):
        params = P.init_params(arch, rng)
        with pytest.raises(ContractViolationError):
            P.forward(params, np.zeros((1, 2, 64)), np.zeros((1, 14)))
        with pytest.raises(ContractViolationError):
            P.forward(params, np.zeros((1, 4, 64)), np.zeros((1, 9)))

    def test_single_matches_batched(self, arch, rng):
        params = P.init_params(arch, rng)
        for _ in range(5):
            scans, state = random_obs(arch, rng)
            m, ls, v, a = P.forward_single(params, scans[0], state[0])
            f = P.forward(params, scans, state)
            assert np.allclose(m, f.mean[0], atol=1e-12)
            assert abs(v - f.value[0]) < 1e-12
            assert np.allclose(a, f.aux[0], atol=1e-12)
            assert np.array_equal(ls, f.log_std)

    def test_log_std_clamped(self, arch, rng):
        params = P.init_params(arch, rng)
        params.arrays["log_std"][:] = (-9.0, 0.0, 7.0)
        f = P.forward(params, *random_obs(arch, rng))
        assert np.array_equal(f.log_std, [-5.0, 0.0, 1.0])
        assert np.array_equal(f.log_std_mask, [False, True, False])

    def test_aux_reads_conv_feature_only(self, arch, rng):
        # perturbing state features must not change the aux outputs
        params = P.init_params(arch, rng)
        scans, state = random_obs(arch, rng)
        aux1 = P.forward(params, scans, state).aux
        aux2 = P.forward(params, scans, state + rng.normal(0, 0.5, state.shape)).aux
        assert np.array_equal(aux1, aux2)
        # but scan changes do
        aux3 = P.forward(params, np.clip(scans + 0.3, 0, 1), state).aux
        assert not np.array_equal(aux1, aux3)

    def test_batch_consistency(self, arch, rng):
        params = P.init_params(arch, rng)
        scans, state = random_obs(arch, rng, batch=4)
        full = P.forward(params, scans, state)
        for b in range(4):
            one = P.forward(params, scans[b:b + 1], state[b:b + 1])
            assert np.allclose(one.mean[0], full.mean[b], atol=1e-12)
            assert abs(one.value[0] - full.value[b]) < 1e-12


class TestSquash:
    def test_midpoint(self):
        a = P.squash(np.zeros(3), v_max=1.0)
        assert a[0] == pytest.approx(0.5)
        assert a[1] == 0.0 and a[2] == 0.0

    def test_speed_asymptote(self):
        a = P.squash(np.array([40.0, 0.0, 0.0]), v_max=1.0)
        assert a[0] == pytest.approx(1.0, abs=1e-12)
        a = P.squash(np.array([-40.0, 0.0, 0.0]), v_max=1.0)
        assert a[0] == pytest.approx(0.0, abs=1e-12)

    def test_ranges(self, rng):
        pre = rng.normal(0, 4, (500, 3))
        a = P.squash(pre, v_max=1.0)
        assert np.all((a[:, 0] > 0.0) & (a[:, 0] < 1.0))
        assert np.all((a[:, 1] > -math.pi) & (a[:, 1] < math.pi))
        assert np.all((a[:, 2] > -math.pi) & (a[:, 2] < math.pi))

    def test_log_det_matches_numerical_jacobian(self, rng):
        h = 1e-6
        for _ in range(20):
            pre = rng.normal(0, 1.5, 3)
            jac = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                jac[i] = (P.squash(pre + e, 1.0)[i] - P.squash(pre - e, 1.0)[i]) / (2 * h)
            expected = float(np.sum(np.log(np.abs(jac))))
            got = float(P.squash_log_det(pre, 1.0))
            assert got == pytest.approx(expected, rel=1e-6)


class TestLogProb:
    def test_standard_normal_at_mode(self):
        gauss = P.gaussian_log_prob(np.zeros(3), np.zeros(3), np.zeros(3))
        assert gauss == pytest.approx(-1.5 * math.log(2 * math.pi), rel=1e-12)

    def test_doubling_std_drops_density(self):
        mean = np.zeros(3)
        lp1 = P.gaussian_log_prob(mean, np.zeros(3), mean)
        lp2 = P.gaussian_log_prob(mean, np.full(3, math.log(2.0)), mean)
        assert lp1 - lp2 == pytest.approx(3 * math.log(2.0), rel=1e-12)

    def test_density_integrates_to_one(self):
        # quadrature over the squashed action box in action coordinates
        v_max = 1.0
        mean = np.array([0.2, -0.3, 0.5])
        log_std = np.array([-0.3, -0.5, -0.2])
        n = 64
        vs = (np.arange(n) + 0.5) / n * v_max
        ths = (np.arange(n) + 0.5) / n * 2 * math.pi - math.pi
        cell = (v_max / n) * (2 * math.pi / n) ** 2
        V, T1, T2 = np.meshgrid(vs, ths, ths, indexing="ij")
        u = np.stack([
            np.log(V / (v_max - V)),
            np.arctanh(T1 / math.pi),
            np.arctanh(T2 / math.pi),
        ], axis=-1).reshape(-1, 3)
        lp = P.log_prob(mean, log_std, u, v_max)
        integral = float(np.sum(np.exp(lp)) * cell)
        assert integral == pytest.approx(1.0, abs=0.01)

    def test_kernel_matches_numpy_log_prob(self, rng):
        from contactnav import _kernels

        for _ in range(20):
            mean = rng.normal(0, 1, 3)
            log_std = rng.uniform(-2, 0, 3)
            pre = rng.normal(0, 2, 3)
            a = float(P.log_prob(mean, log_std, pre, 1.0))
            b = float(_kernels.log_prob_single(mean, log_std, pre, 1.0))
            assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_sampling_uses_explicit_stream(self, arch):
        params = P.init_params(arch, np.random.default_rng(0))
        mean = np.zeros(3)
        std = np.ones(3)
        s1 = P.sample_pre_squash(mean, std, np.random.default_rng(42))
        s2 = P.sample_pre_squash(mean, std, np.random.default_rng(42))
        assert np.array_equal(s1, s2)


class TestGradients:
    def test_analytic_matches_finite_differences(self, cfg):
        for seed in range(3):
            worst = check_gradients(seed, cfg)
            assert worst < 1e-3, f"seed {seed}: worst relative error {worst:.2e}"


class TestInit:
    def test_orthogonal_hidden_layers(self, arch, rng):
        params = P.init_params(arch, rng)
        w = params.arrays["fc2_w"]
        gram = w.T @ w / 2.0  # gain sqrt(2) squared
        assert np.allclose(gram, np.eye(w.shape[1]), atol=1e-9)

    def test_action_head_small(self, arch, rng):
        params = P.init_params(arch, rng)
        assert np.max(np.abs(params.arrays["mean_w"])) < 0.05
        assert np.all(params.arrays["log_std"] == -0.5)

    def test_flat_round_trip(self, arch, rng):
        params = P.init_params(arch, rng)
        vec = params.flat()
        clone = P.PolicyParams.zeros(arch)
        clone.set_flat(vec)
        for name in params.arrays:
            assert np.array_equal(params.arrays[name], clone.arrays[name])


class TestCheckpoint:
    def test_round_trip(self, arch, rng, tmp_path):
        params = P.init_params(arch, rng)
        path = tmp_path / "test.ckpt"
        P.save_checkpoint(path, params, "iface123", "conf456", env_steps=777,
                          updates=9, optimizer_state=(np.ones(params.count),
                                                      np.full(params.count, 2.0), 5))
        loaded, header, opt = P.load_checkpoint(path)
        assert np.array_equal(loaded.flat(), params.flat())
        assert header["interface_digest"] == "iface123"
        assert header["config_digest"] == "conf456"
        assert header["env_steps"] == 777 and header["updates"] == 9
        m, v, t = opt
        assert np.all(m == 1.0) and np.all(v == 2.0) and t == 5

    def test_no_optimizer_state(self, arch, rng, tmp_path):
        params = P.init_params(arch, rng)
        path = tmp_path / "bare.ckpt"
        P.save_checkpoint(path, params, "i", "c")
        _, header, opt = P.load_checkpoint(path)
        assert opt is None
        assert header["optimizer"]["present"] is False

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ConfigurationError):
            P.load_checkpoint(path)

    def test_params_digest_tracks_values(self, arch, rng):
        params = P.init_params(arch, rng)
        d1 = P.params_digest(params)
        params.arrays["mean_b"][0] += 1e-9
        assert P.params_digest(params) != d1

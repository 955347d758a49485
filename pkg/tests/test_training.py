"""Reward, termination, GAE, PPO update, and rollout collection tests.

GAE is validated against a from-scratch O(T^2) double-sum oracle that walks
the definition directly: A_t = sum_l (gamma*lambda)^l * delta_{t+l},
truncated at the first episode end at or after t.
"""

import math

import numpy as np
import pytest

from conftest import tiny_training_config
from contactnav import policy as P
from contactnav import training
from contactnav.config import RunConfig
from contactnav.errors import ContractViolationError
from contactnav.trainer import EnvRunner, RolloutCollector, build_batch
from contactnav.training import (
    FORCE_VIOLATION,
    SUCCESS,
    TIMEOUT,
    Adam,
    check_termination,
    compute_reward,
    gae,
    normalize_advantages,
    ppo_update,
)


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam):
    """Brute-force double sum; independent of the production recursion."""
    T = len(rewards)
    ext_values = list(values) + [bootstrap]
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        acc = 0.0
        for k in range(t, T):
            not_done = 0.0 if dones[k] else 1.0
            delta = rewards[k] + gamma * ext_values[k + 1] * not_done - values[k]
            acc += coef * delta
            if dones[k]:
                break
            coef *= gamma * lam
        adv[t] = acc
    return adv, adv + np.asarray(values)


class TestComputeReward:
    def _r(self, **kw):
        cfg = RunConfig().training.reward
        defaults = dict(prev_progress=0.0, progress=0.0, max_force_ratio=0.0,
                        action=np.zeros(3), prev_action=np.zeros(3),
                        terminal=None, cfg=cfg, v_max=1.0)
        defaults.update(kw)
        return compute_reward(**defaults)

    def test_pure_progress(self):
        terms = self._r(prev_progress=1.0, progress=1.1)
        assert terms.total == pytest.approx(0.1, abs=1e-12)
        assert terms.progress == pytest.approx(0.1, abs=1e-12)
        assert terms.force == 0.0 and terms.action_rate == 0.0 and terms.terminal == 0.0

    def test_threshold_contact_with_failure(self):
        terms = self._r(max_force_ratio=1.0, terminal=FORCE_VIOLATION)
        assert terms.force == pytest.approx(-0.2)
        assert terms.terminal == -5.0
        assert terms.total == pytest.approx(-5.2)

    def test_idle_step_is_zero(self):
        terms = self._r(action=np.array([0.3, 0.1, 0.1]),
                        prev_action=np.array([0.3, 0.1, 0.1]))
        assert terms.total == 0.0

    def test_no_reward_for_backward_motion(self):
        terms = self._r(prev_progress=2.0, progress=2.0)
        assert terms.progress == 0.0

    def test_action_rate_wraps_angles(self):
        # a jump across the pi boundary is a tiny physical change
        a = np.array([0.5, math.pi - 0.01, 0.0])
        b = np.array([0.5, -math.pi + 0.01, 0.0])
        terms = self._r(action=a, prev_action=b)
        assert abs(terms.action_rate) < 1e-4

    def test_success_bonus(self):
        terms = self._r(prev_progress=4.9, progress=5.0, terminal=SUCCESS)
        assert terms.terminal == 5.0

    def test_decomposition_sums_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            terms = self._r(
                prev_progress=rng.uniform(0, 5), progress=rng.uniform(0, 5),
                max_force_ratio=rng.uniform(0, 1.5),
                action=rng.uniform(-1, 1, 3), prev_action=rng.uniform(-1, 1, 3),
                terminal=rng.choice([None, SUCCESS, FORCE_VIOLATION, TIMEOUT]),
            )
            assert terms.total == terms.progress + terms.force + terms.action_rate + terms.terminal


class TestCheckTermination:
    def _cfg(self):
        return RunConfig().training

    def test_exact_threshold_violates(self):
        kind = check_termination(np.array([0.0, 0.0]), np.array([5.0, 0.0]), 1.0, 5, self._cfg())
        assert kind == FORCE_VIOLATION

    def test_success_radius(self):
        kind = check_termination(np.array([4.51, 0.0]), np.array([5.0, 0.0]), 0.0, 5, self._cfg())
        assert kind == SUCCESS
        kind = check_termination(np.array([4.49, 0.0]), np.array([5.0, 0.0]), 0.0, 5, self._cfg())
        assert kind is None

    def test_timeout(self):
        kind = check_termination(np.array([2.0, 0.0]), np.array([5.0, 0.0]), 0.5, 300, self._cfg())
        assert kind == TIMEOUT

    def test_precedence(self):
        # violation beats success beats timeout
        goal = np.array([0.0, 0.0])
        at_goal = np.array([0.1, 0.0])
        assert check_termination(at_goal, goal, 1.2, 300, self._cfg()) == FORCE_VIOLATION
        assert check_termination(at_goal, goal, 0.9, 300, self._cfg()) == SUCCESS


class TestGae:
    def test_single_step(self):
        adv, ret = gae(np.array([2.0]), np.array([0.5]), np.array([False]),
                       bootstrap_value=1.0, gamma=0.9, lam=0.95)
        assert adv[0] == pytest.approx(2.0 + 0.9 * 1.0 - 0.5, abs=1e-15)
        assert ret[0] == pytest.approx(adv[0] + 0.5, abs=1e-15)

    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(1)
        r = rng.normal(0, 1, 20)
        v = rng.normal(0, 1, 20)
        d = np.zeros(20, dtype=bool)
        adv, _ = gae(r, v, d, 0.3, gamma=0.99, lam=0.0)
        ext = np.concatenate([v[1:], [0.3]])
        td = r + 0.99 * ext - v
        assert np.allclose(adv, td, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            T = int(rng.integers(1, 51))
            r = rng.normal(0, 1, T)
            v = rng.normal(0, 1, T)
            d = rng.random(T) < 0.15
            boot = float(rng.normal())
            adv, ret = gae(r, v, d, boot, gamma=0.99, lam=0.95)
            o_adv, o_ret = gae_oracle(r, v, d, boot, 0.99, 0.95)
            assert np.allclose(adv, o_adv, atol=1e-9), f"trial {trial}"
            assert np.allclose(ret, o_ret, atol=1e-9)

    def test_no_bootstrap_across_done(self):
        # a huge bootstrap value must not leak into a finished episode
        r = np.array([1.0, 1.0, 1.0])
        v = np.zeros(3)
        d = np.array([False, True, False])
        adv1, _ = gae(r, v, d, 0.0, 0.99, 0.95)
        adv2, _ = gae(r, v, d, 1e9, 0.99, 0.95)
        assert adv1[0] == adv2[0]
        assert adv1[1] == adv2[1]
        assert adv1[2] != adv2[2]  # last step legitimately bootstraps
        assert np.all(np.isfinite(adv1))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractViolationError):
            gae(np.zeros(3), np.zeros(4), np.zeros(3, dtype=bool), 0.0, 0.99, 0.95)

    def test_advantage_normalization(self):
        rng = np.random.default_rng(2)
        adv = rng.normal(3.0, 2.5, 4096)
        norm = normalize_advantages(adv)
        assert abs(norm.mean()) < 1e-9
        assert 1.0 - 1e-6 <= norm.std() <= 1.0 + 1e-6


def make_fixed_batch(cfg, rng, n=64):
    """Synthetic but shape-correct batch for update math tests."""
    arch = P.arch_from_config(cfg)
    params = P.init_params(arch, rng)
    scans = rng.uniform(0.05, 1.0, (n, arch.history, arch.num_rays))
    states = rng.uniform(-1, 1, (n, arch.state_dim))
    fwd = P.forward(params, scans, states)
    pre = fwd.mean + fwd.std * rng.standard_normal((n, 3))
    logp = P.log_prob(fwd.mean, fwd.log_std, pre, cfg.dynamics.v_max)
    rewards = rng.normal(0, 1, n)
    dones = np.zeros(n, dtype=bool)
    adv = rng.normal(0, 1, n)
    returns = fwd.value + rng.normal(0, 0.3, n)
    aux = rng.uniform(0, 1, (n, 3))
    batch = training.RolloutBatch(
        scans=scans, states=states, pre_actions=pre, log_probs=logp,
        rewards=rewards, values=fwd.value, dones=dones, aux_targets=aux,
        advantages=adv, returns=returns,
    )
    return params, batch


class TestPpoUpdate:
    def test_identity_ratio_surrogate(self, cfg, rng):
        # fresh batch evaluated at the same params: surrogate = -mean(adv)
        params, batch = make_fixed_batch(cfg, rng)
        adv = normalize_advantages(batch.advantages)
        loss, stats, _ = training.ppo_loss_and_grads(
            params, batch.scans, batch.states, batch.pre_actions,
            batch.log_probs, adv, batch.returns, batch.aux_targets,
            cfg.training, cfg.dynamics.v_max, want_grads=True,
        )
        assert stats["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-9)
        assert stats["clip_fraction"] == 0.0
        assert abs(stats["approx_kl"]) < 1e-12

    def test_clipped_branch_zero_gradient(self, cfg, rng):
        # positive advantage with ratio beyond 1+eps: no gradient through ratio
        params, batch = make_fixed_batch(cfg, rng, n=4)
        old = batch.log_probs - 0.5  # ratio = e^0.5 > 1.2 for every sample
        adv = np.ones(4)
        _, _, g1 = training.ppo_loss_and_grads(
            params, batch.scans, batch.states, batch.pre_actions, old,
            adv, batch.returns, batch.aux_targets, cfg.training,
            cfg.dynamics.v_max,
        )
        # kill other heads' influence: compare against a pure-policy config
        import dataclasses
        pure = dataclasses.replace(cfg.training, value_coef=0.0,
                                   entropy_coef=0.0, aux_coef=0.0)
        _, _, g = training.ppo_loss_and_grads(
            params, batch.scans, batch.states, batch.pre_actions, old,
            adv, batch.returns, batch.aux_targets, pure, cfg.dynamics.v_max,
        )
        assert np.all(g == 0.0)

    def test_loss_decreases_on_fixed_batch(self, cfg, rng):
        params, batch = make_fixed_batch(cfg, rng, n=256)
        t_cfg = tiny_training_config().training
        adam = Adam(params.count, t_cfg.learning_rate)
        upd_rng = np.random.default_rng(0)

        def current_loss():
            adv = normalize_advantages(batch.advantages)
            loss, _, _ = training.ppo_loss_and_grads(
                params, batch.scans, batch.states, batch.pre_actions,
                batch.log_probs, adv, batch.returns, batch.aux_targets,
                t_cfg, cfg.dynamics.v_max, want_grads=True,
            )
            return loss

        before = current_loss()
        ppo_update(params, batch, t_cfg, cfg.dynamics.v_max, adam, upd_rng)
        after = current_loss()
        assert after < before

    def test_nonfinite_loss_aborts(self, cfg, rng):
        params, batch = make_fixed_batch(cfg, rng, n=8)
        batch.rewards[3] = np.nan
        with pytest.raises(ContractViolationError):
            ppo_update(params, batch, cfg.training, cfg.dynamics.v_max,
                       Adam(params.count, 1e-4), np.random.default_rng(0))

    def test_grad_norm_clipping(self):
        g = np.full(100, 10.0)
        clipped, norm = training.clip_grad_norm(g, 0.5)
        assert norm == pytest.approx(100.0)
        assert np.linalg.norm(clipped) == pytest.approx(0.5)


class TestAdam:
    def test_step_direction(self):
        adam = Adam(3, lr=0.1)
        p = np.zeros(3)
        g = np.array([1.0, -2.0, 0.0])
        p2 = adam.step(p, g)
        assert p2[0] < 0 and p2[1] > 0 and p2[2] == 0.0

    def test_state_round_trip(self):
        a = Adam(4, lr=0.01)
        p = np.ones(4)
        for _ in range(5):
            p = a.step(p, np.random.default_rng(1).normal(0, 1, 4))
        b = Adam(4, lr=0.01)
        b.load_state(a.state())
        g = np.full(4, 0.3)
        assert np.array_equal(a.step(p, g), b.step(p, g))


class TestRollouts:
    def test_env_major_layout(self):
        cfg = tiny_training_config()
        arch = P.arch_from_config(cfg)
        params = P.init_params(arch, np.random.default_rng(0))
        horizon = 3

        runner = EnvRunner(cfg, [0, 1])
        data, _ = runner.rollout(params, horizon)
        batch = build_batch(data, cfg.training.gamma, cfg.training.gae_lambda)
        assert len(batch) == 6

        solo0 = EnvRunner(cfg, [0])
        d0, _ = solo0.rollout(params, horizon)
        solo1 = EnvRunner(cfg, [1])
        d1, _ = solo1.rollout(params, horizon)
        assert np.array_equal(batch.states[:3], d0["states"][0])
        assert np.array_equal(batch.states[3:], d1["states"][0])

    def test_worker_count_invariance(self):
        cfg = tiny_training_config()
        arch = P.arch_from_config(cfg)
        params = P.init_params(arch, np.random.default_rng(0))
        with RolloutCollector(cfg, 4, workers=1) as c1:
            data1, ep1 = c1.collect(params, 8)
        with RolloutCollector(cfg, 4, workers=2) as c2:
            data2, ep2 = c2.collect(params, 8)
        for key in data1:
            assert np.array_equal(data1[key], data2[key]), f"{key} differs"
        assert [(e.env_index, e.episode_index) for e in ep1] == \
            [(e.env_index, e.episode_index) for e in ep2]

    def test_zero_density_no_violations(self):
        cfg = tiny_training_config(**{"training.density": 0.0})
        arch = P.arch_from_config(cfg)
        params = P.init_params(arch, np.random.default_rng(3))
        runner = EnvRunner(cfg, [0, 1], density=0.0)
        data, episodes = runner.rollout(params, 64)
        assert all(e.termination != "force_violation" for e in episodes)
        assert np.all(data["ratios"] == 0.0)

    def test_same_seed_rollouts_identical(self):
        cfg = tiny_training_config()
        arch = P.arch_from_config(cfg)
        params = P.init_params(arch, np.random.default_rng(0))
        d1, _ = EnvRunner(cfg, [0, 1]).rollout(params, 10)
        d2, _ = EnvRunner(cfg, [0, 1]).rollout(params, 10)
        for key in d1:
            assert np.array_equal(d1[key], d2[key])

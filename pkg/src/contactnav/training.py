"""Reward shaping, episode termination, GAE, and the PPO update.

The reward has four logged components that sum exactly to the step reward:
path progress (monotone best-projection arc length, so shuttling back and
forth earns nothing), a per-step penalty proportional to the peak
robot-pedestrian force ratio, an action-rate penalty on the normalized
action change (angle deltas wrapped), and a terminal bonus/penalty.
Timeouts are not penalized beyond the missing success bonus: stopping in a
blocked crowd must stay rational.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RewardConfig, TrainingConfig
from .errors import ContractViolationError
from . import policy as policy_mod
from .sensing import wrap_angle

SUCCESS = "success"
FORCE_VIOLATION = "force_violation"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class RewardTerms:
    progress: float
    force: float
    action_rate: float
    terminal: float

    @property
    def total(self) -> float:
        return self.progress + self.force + self.action_rate + self.terminal


def compute_reward(
    prev_progress: float,
    progress: float,
    max_force_ratio: float,
    action: np.ndarray,
    prev_action: np.ndarray,
    terminal: str | None,
    cfg: RewardConfig,
    v_max: float,
) -> RewardTerms:
    """Per-step reward decomposition; see the module docstring."""
    prog = cfg.progress_weight * max(0.0, progress - prev_progress)
    force = -cfg.force_weight * max_force_ratio
    dv = (action[0] - prev_action[0]) / v_max
    dth = wrap_angle(action[1] - prev_action[1]) / math.pi
    dcam = wrap_angle(action[2] - prev_action[2]) / math.pi
    rate = -cfg.action_rate_weight * (dv * dv + dth * dth + dcam * dcam)
    if terminal == SUCCESS:
        term = cfg.success_bonus
    elif terminal == FORCE_VIOLATION:
        term = cfg.failure_penalty
    else:
        term = 0.0
    return RewardTerms(progress=prog, force=force, action_rate=rate, terminal=term)


def check_termination(
    robot_position: np.ndarray,
    goal: np.ndarray,
    max_force_ratio: float,
    t: int,
    cfg: TrainingConfig,
) -> str | None:
    """Termination kind with precedence violation > success > timeout."""
    if max_force_ratio >= 1.0:
        return FORCE_VIOLATION
    if float(np.linalg.norm(robot_position - goal)) <= cfg.success_radius:
        return SUCCESS
    if t >= cfg.max_episode_steps:
        return TIMEOUT
    return None


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation, truncated at episode ends."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape) or rewards.ndim != 1:
        raise ContractViolationError("gae inputs must be equal-length 1D sequences")
    T = rewards.shape[0]
    adv = np.empty(T)
    acc = 0.0
    next_value = bootstrap_value
    for t in range(T - 1, -1, -1):
        not_done = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        acc = delta + gamma * lam * not_done * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


class Adam:
    """First-order adaptive-moment optimizer over a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params_flat: np.ndarray, grad_flat: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad_flat
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad_flat * grad_flat
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params_flat - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> tuple[np.ndarray, np.ndarray, int]:
        return self.m.copy(), self.v.copy(), self.t

    def load_state(self, state: tuple[np.ndarray, np.ndarray, int]) -> None:
        self.m[:] = state[0]
        self.v[:] = state[1]
        self.t = int(state[2])


@dataclass
class RolloutBatch:
    """Flattened env-major transitions from one collection phase."""

    scans: np.ndarray  # (N*T, K, R)
    states: np.ndarray  # (N*T, state_dim)
    pre_actions: np.ndarray  # (N*T, 3) pre-squash samples
    log_probs: np.ndarray  # (N*T,)
    rewards: np.ndarray  # (N*T,)
    values: np.ndarray  # (N*T,)
    dones: np.ndarray  # (N*T,) bool
    aux_targets: np.ndarray  # (N*T, 3)
    advantages: np.ndarray  # (N*T,)
    returns: np.ndarray  # (N*T,)

    def __len__(self) -> int:
        return self.scans.shape[0]


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    aux_loss: float
    total_loss: float
    clip_fraction: float
    approx_kl: float
    grad_norm: float


def ppo_loss_and_grads(
    params: policy_mod.PolicyParams,
    scans: np.ndarray,
    states: np.ndarray,
    pre_actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    aux_targets: np.ndarray,
    cfg: TrainingConfig,
    v_max: float,
    want_grads: bool = True,
):
    """Clipped-surrogate PPO loss with value, entropy, and aux terms.

    Returns (loss, stats dict, flat gradient or None).  The squash
    correction cancels in the ratio (old and new log-probs share the same
    pre-squash sample), but both sides include it so logged log-probs are
    true action densities.
    """
    B = scans.shape[0]
    fwd = policy_mod.forward(params, scans, states, want_cache=want_grads)
    mean, log_std, std = fwd.mean, fwd.log_std, fwd.std

    new_log_probs = policy_mod.log_prob(mean, log_std, pre_actions, v_max)
    log_ratio = new_log_probs - old_log_probs
    ratio = np.exp(log_ratio)
    eps = cfg.clip_epsilon
    clipped_ratio = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surr1 = ratio * advantages
    surr2 = clipped_ratio * advantages
    take_unclipped = surr1 <= surr2
    policy_loss = -np.mean(np.where(take_unclipped, surr1, surr2))

    value_err = fwd.value - returns
    value_loss = np.mean(value_err * value_err)

    ent = policy_mod.entropy(log_std)

    aux_err = fwd.aux - aux_targets
    aux_loss = np.mean(np.sum(aux_err * aux_err, axis=1))

    total = (policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
             + cfg.aux_coef * aux_loss)

    if not want_grads:
        # fast path for finite-difference probing: value only
        return float(total), None, None

    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(ent),
        "aux_loss": float(aux_loss),
        "total_loss": float(total),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
    }

    # d total / d ratio flows only through the unclipped branch
    d_ratio = np.where(take_unclipped, -advantages / B, 0.0)
    d_logp = d_ratio * ratio  # (B,)
    inv_var = 1.0 / (std * std)
    z = pre_actions - mean
    d_mean = d_logp[:, None] * z * inv_var
    # per-dimension log-prob derivative wrt log_std: z^2/sigma^2 - 1
    d_log_std = (d_logp[:, None] * (z * z * inv_var - 1.0)).sum(axis=0)
    d_log_std -= cfg.entropy_coef  # entropy term: dH/dlog_std = 1 per dim
    d_log_std *= fwd.log_std_mask  # clamp gate

    d_value = 2.0 * cfg.value_coef * value_err / B
    d_aux = 2.0 * cfg.aux_coef * aux_err / B

    grads = policy_mod.backward(params, fwd.cache, d_mean, d_value, d_aux)
    grads["log_std"] = d_log_std
    flat = params.flat_from_named(grads)
    return float(total), stats, flat


def ppo_loss_single(
    params: policy_mod.PolicyParams,
    scans: np.ndarray,
    state: np.ndarray,
    pre_action: np.ndarray,
    old_log_prob: float,
    advantage: float,
    ret: float,
    aux_target: np.ndarray,
    cfg: TrainingConfig,
    v_max: float,
) -> float:
    """Loss value for one transition (finite-difference probe path).

    Equals ppo_loss_and_grads on a batch of one up to float roundoff (the
    equivalence is covered by a test); implemented as one compiled call so
    probing every parameter stays fast.
    """
    from . import _kernels

    lo, hi = params.arch.log_std_bounds
    log_std_off = params.offsets["log_std"]
    return float(_kernels.ppo_loss_single_kernel(
        scans, state, params.buffer, params._meta,
        lo, hi, log_std_off,
        pre_action, old_log_prob, advantage, ret, aux_target,
        cfg.clip_epsilon, cfg.value_coef, cfg.entropy_coef, cfg.aux_coef, v_max,
        _loss_scratch_mean, _loss_scratch_aux,
    ))


_loss_scratch_mean = np.zeros(policy_mod.N_ACTIONS)
_loss_scratch_aux = np.zeros(policy_mod.N_AUX)


def clip_grad_norm(flat_grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(flat_grad))
    if max_norm > 0.0 and norm > max_norm:
        flat_grad = flat_grad * (max_norm / norm)
    return flat_grad, norm


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_update(
    params: policy_mod.PolicyParams,
    batch: RolloutBatch,
    cfg: TrainingConfig,
    v_max: float,
    adam: Adam,
    rng: np.random.Generator,
) -> UpdateStats:
    """Runs cfg.epochs of seeded-shuffle minibatch Adam steps in place."""
    if not np.all(np.isfinite(batch.rewards)):
        raise ContractViolationError("non-finite reward in batch")
    adv = normalize_advantages(batch.advantages)
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    agg: dict[str, list[float]] = {}
    flat = params.flat()
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            loss, stats, grad = ppo_loss_and_grads(
                params, batch.scans[idx], batch.states[idx], batch.pre_actions[idx],
                batch.log_probs[idx], adv[idx], batch.returns[idx],
                batch.aux_targets[idx], cfg, v_max,
            )
            if not math.isfinite(loss):
                raise ContractViolationError(
                    f"non-finite PPO loss {loss}; stats {stats}"
                )
            grad, norm = clip_grad_norm(grad, cfg.max_grad_norm)
            flat = adam.step(flat, grad)
            params.set_flat(flat)
            stats["grad_norm"] = norm
            for k, v in stats.items():
                agg.setdefault(k, []).append(v)
    return UpdateStats(
        policy_loss=float(np.mean(agg["policy_loss"])),
        value_loss=float(np.mean(agg["value_loss"])),
        entropy=float(np.mean(agg["entropy"])),
        aux_loss=float(np.mean(agg["aux_loss"])),
        total_loss=float(np.mean(agg["total_loss"])),
        clip_fraction=float(np.mean(agg["clip_fraction"])),
        approx_kl=float(np.mean(agg["approx_kl"])),
        grad_norm=float(np.mean(agg["grad_norm"])),
    )

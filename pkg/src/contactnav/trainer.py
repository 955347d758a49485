"""Vectorized rollout collection and the PPO training loop.

Environments are stepped either in-process or by a pool of persistent
worker processes.  Every environment derives its own random streams and the
policy is evaluated one observation at a time during rollouts, so the
collected batch is bit-identical for any worker count; workers only change
wall-clock time.  Batches are assembled in env-major order.
"""

from __future__ import annotations

import json
import multiprocessing as mp
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import policy as policy_mod
from .config import RunConfig, config_from_dict
from .control import Action
from .env import CorridorEnv
from .errors import SimulationDivergedError
from .training import Adam, RolloutBatch, gae, ppo_update

METRICS_COLUMNS = [
    "update", "env_steps", "policy_loss", "value_loss", "entropy", "aux_loss",
    "total_loss", "clip_fraction", "approx_kl", "grad_norm",
    "episodes", "ep_return_mean", "ep_len_mean", "success_rate",
    "violation_rate", "timeout_rate", "mean_force_ratio",
]


def act_single(
    params: policy_mod.PolicyParams,
    obs,
    v_max: float,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, float, float, Action]:
    """Policy step on one observation (always batch-free, so the result is
    independent of how environments are grouped onto workers)."""
    from . import _kernels

    mean, log_std, value, _aux = policy_mod.forward_single(params, obs.scans, obs.state)
    if rng is not None:
        pre = policy_mod.sample_pre_squash(mean, np.exp(log_std), rng)
    else:
        pre = mean.copy()
    logp = float(_kernels.log_prob_single(mean, log_std, pre, v_max))
    a = policy_mod.squash(pre, v_max)
    action = Action(speed=float(a[0]), motion_heading=float(a[1]), camera_heading=float(a[2]))
    return pre, logp, value, action


@dataclass
class EpisodeRecord:
    env_index: int
    episode_index: int
    length: int
    ret: float
    termination: str
    max_force_ratio: float
    progress: float


class EnvRunner:
    """Steps a set of environments for rollout collection."""

    def __init__(self, cfg: RunConfig, env_indices: list[int], density: float | None = None):
        self.cfg = cfg
        self.envs = [CorridorEnv(cfg, i, density=density) for i in env_indices]
        self.rngs = []
        self.obs = []
        self.ep_return = []
        self.ep_ratio = []
        for env in self.envs:
            env.reset()
            self.rngs.append(env.sampling_rng())
            self.obs.append(env.observe())
            self.ep_return.append(0.0)
            self.ep_ratio.append(0.0)

    def rollout(self, params: policy_mod.PolicyParams, horizon: int):
        cfg = self.cfg
        arch = params.arch
        n = len(self.envs)
        scans = np.empty((n, horizon, arch.history, arch.num_rays))
        states = np.empty((n, horizon, arch.state_dim))
        pres = np.empty((n, horizon, 3))
        logps = np.empty((n, horizon))
        rewards = np.empty((n, horizon))
        values = np.empty((n, horizon))
        dones = np.zeros((n, horizon), dtype=bool)
        auxes = np.empty((n, horizon, 3))
        ratios = np.empty((n, horizon))
        bootstrap = np.empty(n)
        episodes: list[EpisodeRecord] = []
        v_max = cfg.dynamics.v_max

        for i, env in enumerate(self.envs):
            obs = self.obs[i]
            rng = self.rngs[i]
            for t in range(horizon):
                scans[i, t] = obs.scans
                states[i, t] = obs.state
                auxes[i, t] = env.aux_target()
                pre, logp, value, action = act_single(params, obs, v_max, rng)
                try:
                    out = env.step(action)
                except SimulationDivergedError:
                    # framework fault: reset this env, keep filling the batch
                    episodes.append(EpisodeRecord(
                        env.env_index, env.episode_index, env.t, self.ep_return[i],
                        "diverged", self.ep_ratio[i], env.progress,
                    ))
                    env.reset()
                    rng = env.sampling_rng()
                    obs = env.observe()
                    out = None
                if out is None:
                    pres[i, t] = pre
                    logps[i, t] = logp
                    values[i, t] = value
                    rewards[i, t] = 0.0
                    dones[i, t] = True
                    ratios[i, t] = 0.0
                    continue
                pres[i, t] = pre
                logps[i, t] = logp
                values[i, t] = value
                rewards[i, t] = out.reward
                dones[i, t] = out.done
                ratios[i, t] = out.max_force_ratio
                self.ep_return[i] += out.reward
                self.ep_ratio[i] = max(self.ep_ratio[i], out.max_force_ratio)
                if out.done:
                    episodes.append(EpisodeRecord(
                        env.env_index, env.episode_index, env.t, self.ep_return[i],
                        out.termination, self.ep_ratio[i], out.progress,
                    ))
                    self.ep_return[i] = 0.0
                    self.ep_ratio[i] = 0.0
                    env.reset()
                    rng = env.sampling_rng()
                    obs = env.observe()
                else:
                    obs = env.observe()
            self.obs[i] = obs
            self.rngs[i] = rng
            _, _, bootstrap[i], _ = policy_mod.forward_single(params, obs.scans, obs.state)

        return {
            "scans": scans, "states": states, "pres": pres, "logps": logps,
            "rewards": rewards, "values": values, "dones": dones,
            "auxes": auxes, "ratios": ratios, "bootstrap": bootstrap,
        }, episodes


def _worker_main(conn, cfg_dict: dict, env_indices: list[int], density):
    cfg = config_from_dict(cfg_dict)
    arch = policy_mod.arch_from_config(cfg)
    runner = EnvRunner(cfg, env_indices, density=density)
    params = policy_mod.PolicyParams.zeros(arch)
    while True:
        msg = conn.recv()
        if msg[0] == "close":
            conn.close()
            return
        _, flat, horizon = msg
        params.set_flat(flat)
        data, episodes = runner.rollout(params, horizon)
        conn.send((data, episodes))


class RolloutCollector:
    """Runs rollouts in-process (workers=1) or on persistent workers."""

    def __init__(self, cfg: RunConfig, num_envs: int, workers: int = 1,
                 density: float | None = None):
        self.cfg = cfg
        self.num_envs = num_envs
        workers = max(1, min(workers, num_envs))
        self.assignments = [list(rng) for rng in
                            np.array_split(np.arange(num_envs), workers)]
        self.assignments = [[int(i) for i in a] for a in self.assignments if len(a)]
        self._procs = []
        self._conns = []
        if workers == 1:
            self._runner = EnvRunner(cfg, self.assignments[0], density=density)
        else:
            self._runner = None
            ctx = mp.get_context("fork")
            for idx_list in self.assignments:
                parent, child = ctx.Pipe()
                p = ctx.Process(
                    target=_worker_main,
                    args=(child, cfg.to_dict(), idx_list, density),
                    daemon=True,
                )
                p.start()
                child.close()
                self._procs.append(p)
                self._conns.append(parent)

    def collect(self, params: policy_mod.PolicyParams, horizon: int):
        if self._runner is not None:
            chunks = [self._runner.rollout(params, horizon)]
        else:
            flat = params.flat()
            for conn in self._conns:
                conn.send(("rollout", flat, horizon))
            chunks = [conn.recv() for conn in self._conns]
        datas = [c[0] for c in chunks]
        episodes = [e for c in chunks for e in c[1]]
        merged = {
            k: np.concatenate([d[k] for d in datas], axis=0)
            for k in datas[0]
        }
        episodes.sort(key=lambda e: (e.env_index, e.episode_index))
        return merged, episodes

    def close(self) -> None:
        for conn in self._conns:
            try:
                conn.send(("close",))
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for p in self._procs:
            p.join(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def build_batch(data: dict, gamma: float, lam: float) -> RolloutBatch:
    """GAE per environment row, then flatten env-major."""
    n, T = data["rewards"].shape
    adv = np.empty((n, T))
    ret = np.empty((n, T))
    for i in range(n):
        adv[i], ret[i] = gae(
            data["rewards"][i], data["values"][i], data["dones"][i],
            float(data["bootstrap"][i]), gamma, lam,
        )
    arch_k, arch_r = data["scans"].shape[2], data["scans"].shape[3]
    return RolloutBatch(
        scans=data["scans"].reshape(n * T, arch_k, arch_r),
        states=data["states"].reshape(n * T, -1),
        pre_actions=data["pres"].reshape(n * T, 3),
        log_probs=data["logps"].reshape(n * T),
        rewards=data["rewards"].reshape(n * T),
        values=data["values"].reshape(n * T),
        dones=data["dones"].reshape(n * T),
        aux_targets=data["auxes"].reshape(n * T, 3),
        advantages=adv.reshape(n * T),
        returns=ret.reshape(n * T),
    )


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class Trainer:
    """End-to-end PPO training with deterministic metrics and checkpoints."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path, workers: int = 1,
                 resume: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.workers = workers
        self.arch = policy_mod.arch_from_config(cfg)
        self.update_idx = 0
        self.env_steps = 0
        if resume is not None:
            params, header, opt_state = policy_mod.load_checkpoint(resume)
            if header["interface_digest"] != cfg.interface_digest():
                from .errors import ChecksumMismatchError
                raise ChecksumMismatchError(
                    f"checkpoint interface digest {header['interface_digest']} does not "
                    f"match config {cfg.interface_digest()}"
                )
            self.params = params
            self.update_idx = header["updates"]
            self.env_steps = header["env_steps"]
            self.adam = Adam(self.params.count, cfg.training.learning_rate)
            if opt_state is not None:
                self.adam.load_state(opt_state)
        else:
            init_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.master_seed, 2**32])
            )
            self.params = policy_mod.init_params(
                self.arch, init_rng, cfg.policy.log_std_init
            )
            self.adam = Adam(self.params.count, cfg.training.learning_rate)
        self.metrics_path = self.out / "metrics.csv"
        self.episodes_path = self.out / "episodes.jsonl"
        if resume is None or not self.metrics_path.exists():
            self.metrics_path.write_text(",".join(METRICS_COLUMNS) + "\n")
            self.episodes_path.write_text(json.dumps({
                "type": "episode_summaries",
                "config_digest": cfg.config_digest(),
                "interface_digest": cfg.interface_digest(),
            }) + "\n")

    def train(self, total_steps: int | None = None, max_updates: int | None = None,
              log=lambda s: None) -> Path:
        cfg = self.cfg
        t_cfg = cfg.training
        total = t_cfg.total_steps if total_steps is None else total_steps
        steps_per_update = t_cfg.num_envs * t_cfg.horizon
        with RolloutCollector(cfg, t_cfg.num_envs, self.workers,
                              density=t_cfg.density) as collector:
            while self.env_steps < total:
                if max_updates is not None and self.update_idx >= max_updates:
                    break
                data, episodes = collector.collect(self.params, t_cfg.horizon)
                batch = build_batch(data, t_cfg.gamma, t_cfg.gae_lambda)
                # update-phase RNG is seeded per update index for resumability
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.master_seed, 2**32 + 1, self.update_idx])
                )
                stats = ppo_update(self.params, batch, t_cfg, cfg.dynamics.v_max,
                                   self.adam, rng)
                self.update_idx += 1
                self.env_steps += steps_per_update
                self._log_update(stats, data, episodes)
                log(f"update {self.update_idx} steps {self.env_steps} "
                    f"loss {stats.total_loss:.4f} episodes {len(episodes)}")
                if t_cfg.checkpoint_every > 0 and self.update_idx % t_cfg.checkpoint_every == 0:
                    self.save_checkpoint(self.out / f"ckpt_{self.update_idx:06d}.ckpt")
        final = self.out / "final.ckpt"
        self.save_checkpoint(final)
        return final

    def _log_update(self, stats, data, episodes) -> None:
        n_ep = len(episodes)
        if n_ep:
            ret_mean = float(np.mean([e.ret for e in episodes]))
            len_mean = float(np.mean([e.length for e in episodes]))
            succ = float(np.mean([e.termination == "success" for e in episodes]))
            viol = float(np.mean([e.termination == "force_violation" for e in episodes]))
            tout = float(np.mean([e.termination == "timeout" for e in episodes]))
        else:
            ret_mean = len_mean = succ = viol = tout = 0.0
        row = {
            "update": self.update_idx,
            "env_steps": self.env_steps,
            "policy_loss": stats.policy_loss,
            "value_loss": stats.value_loss,
            "entropy": stats.entropy,
            "aux_loss": stats.aux_loss,
            "total_loss": stats.total_loss,
            "clip_fraction": stats.clip_fraction,
            "approx_kl": stats.approx_kl,
            "grad_norm": stats.grad_norm,
            "episodes": n_ep,
            "ep_return_mean": ret_mean,
            "ep_len_mean": len_mean,
            "success_rate": succ,
            "violation_rate": viol,
            "timeout_rate": tout,
            "mean_force_ratio": float(np.mean(data["ratios"])),
        }
        with self.metrics_path.open("a") as fh:
            fh.write(",".join(_fmt(row[c]) for c in METRICS_COLUMNS) + "\n")
        with self.episodes_path.open("a") as fh:
            for e in episodes:
                fh.write(json.dumps({
                    "update": self.update_idx, "env": e.env_index,
                    "episode": e.episode_index, "length": e.length,
                    "return": e.ret, "termination": e.termination,
                    "max_force_ratio": e.max_force_ratio, "progress": e.progress,
                }) + "\n")

    def save_checkpoint(self, path: Path) -> None:
        tmp = path.with_suffix(".tmp")
        policy_mod.save_checkpoint(
            tmp, self.params,
            interface_digest=self.cfg.interface_digest(),
            config_digest=self.cfg.config_digest(),
            env_steps=self.env_steps,
            updates=self.update_idx,
            optimizer_state=self.adam.state(),
        )
        tmp.replace(path)

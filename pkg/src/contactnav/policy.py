"""The local planner network and its checkpoint container.

A small 1D conv stack reads the scan history, is projected to a compact
feature, and is fused with the state vector before a two-layer MLP.  Heads:
three Gaussian action means with state-independent log-stds, a value, and
three auxiliary distance outputs.  The aux head reads only the conv feature
(pre-fusion), so its loss pushes the feature extractor toward recognizing
walls and people.

Forward and backward passes are written directly in numpy (float64).  A
call with a given batch shape always performs the identical sequence of
operations, which keeps rollouts bit-reproducible regardless of how
environments are distributed over workers.  Gradients are validated against
central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigurationError, ContractViolationError

CHECKPOINT_MAGIC = b"CNAVCKPT"
CHECKPOINT_FORMAT = 1

N_ACTIONS = 3
N_AUX = 3


@dataclass(frozen=True)
class Arch:
    """Shape descriptor; embedded in checkpoints."""

    num_rays: int
    history: int
    state_dim: int
    conv: tuple[tuple[int, int, int, int], ...]  # (c_in, c_out, kernel, stride)
    conv_lengths: tuple[int, ...]  # output length after each conv layer
    feature_dim: int
    hidden: tuple[int, int]
    log_std_bounds: tuple[float, float]

    @property
    def flat_conv_dim(self) -> int:
        return self.conv_lengths[-1] * self.conv[-1][1]

    def to_dict(self) -> dict:
        return {
            "num_rays": self.num_rays,
            "history": self.history,
            "state_dim": self.state_dim,
            "conv": [list(c) for c in self.conv],
            "conv_lengths": list(self.conv_lengths),
            "feature_dim": self.feature_dim,
            "hidden": list(self.hidden),
            "log_std_bounds": list(self.log_std_bounds),
        }

    @staticmethod
    def from_dict(d: dict) -> "Arch":
        return Arch(
            num_rays=d["num_rays"],
            history=d["history"],
            state_dim=d["state_dim"],
            conv=tuple(tuple(c) for c in d["conv"]),
            conv_lengths=tuple(d["conv_lengths"]),
            feature_dim=d["feature_dim"],
            hidden=tuple(d["hidden"]),
            log_std_bounds=tuple(d["log_std_bounds"]),
        )


def arch_from_config(cfg: RunConfig) -> Arch:
    p = cfg.policy
    s = cfg.sensing
    if not (len(p.conv_channels) == len(p.conv_kernels) == len(p.conv_strides) == 2):
        raise ConfigurationError("policy conv stack must have exactly two layers")
    if len(p.hidden_dims) != 2:
        raise ConfigurationError("policy backbone must have exactly two hidden layers")
    conv = []
    lengths = []
    c_in = s.history_length
    length = s.num_rays
    for c_out, k, stride in zip(p.conv_channels, p.conv_kernels, p.conv_strides):
        if length < k:
            raise ConfigurationError("conv kernel larger than its input length")
        conv.append((c_in, c_out, k, stride))
        length = (length - k) // stride + 1
        lengths.append(length)
        c_in = c_out
    from .sensing import Observation

    return Arch(
        num_rays=s.num_rays,
        history=s.history_length,
        state_dim=Observation.STATE_DIM,
        conv=tuple(conv),
        conv_lengths=tuple(lengths),
        feature_dim=p.feature_dim,
        hidden=tuple(p.hidden_dims),
        log_std_bounds=tuple(p.log_std_bounds),
    )


def _param_shapes(arch: Arch) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for idx, (c_in, c_out, k, _s) in enumerate(arch.conv):
        shapes.append((f"conv{idx}_w", (c_out, c_in, k)))
        shapes.append((f"conv{idx}_b", (c_out,)))
    shapes.append(("proj_w", (arch.flat_conv_dim, arch.feature_dim)))
    shapes.append(("proj_b", (arch.feature_dim,)))
    h1, h2 = arch.hidden
    shapes.append(("fc1_w", (arch.feature_dim + arch.state_dim, h1)))
    shapes.append(("fc1_b", (h1,)))
    shapes.append(("fc2_w", (h1, h2)))
    shapes.append(("fc2_b", (h2,)))
    shapes.append(("mean_w", (h2, N_ACTIONS)))
    shapes.append(("mean_b", (N_ACTIONS,)))
    shapes.append(("log_std", (N_ACTIONS,)))
    shapes.append(("value_w", (h2, 1)))
    shapes.append(("value_b", (1,)))
    shapes.append(("aux_w", (arch.feature_dim, N_AUX)))
    shapes.append(("aux_b", (N_AUX,)))
    return shapes


class PolicyParams:
    """Parameters stored in one flat float64 buffer with named array views.

    The named views make layer math readable; the flat buffer is what the
    optimizer updates, what checkpoints serialize, and what the compiled
    single-observation forward reads directly.
    """

    def __init__(self, arch: Arch, arrays: dict[str, np.ndarray] | None = None):
        self.arch = arch
        self._shapes = _param_shapes(arch)
        total = sum(int(np.prod(s)) for _, s in self._shapes)
        self.buffer = np.zeros(total)
        self.arrays: dict[str, np.ndarray] = {}
        self.offsets: dict[str, int] = {}
        off = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            self.offsets[name] = off
            self.arrays[name] = self.buffer[off:off + size].reshape(shape)
            off += size
        if arrays is not None:
            expected = {name for name, _ in self._shapes}
            if set(arrays) != expected:
                raise ContractViolationError(
                    "parameter name set does not match architecture")
            for name, value in arrays.items():
                self.arrays[name][...] = value
        self._meta = _kernel_meta(arch, self._shapes)

    def __getstate__(self):
        return {"arch": self.arch, "buffer": self.buffer}

    def __setstate__(self, state):
        self.__init__(state["arch"])
        self.buffer[...] = state["buffer"]

    @property
    def count(self) -> int:
        return self.buffer.size

    def flat(self) -> np.ndarray:
        return self.buffer.copy()

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.buffer.size:
            raise ContractViolationError(
                f"flat vector has {vec.size} values, expected {self.buffer.size}")
        self.buffer[...] = vec

    def copy(self) -> "PolicyParams":
        out = PolicyParams(self.arch)
        out.buffer[...] = self.buffer
        return out

    @staticmethod
    def zeros(arch: Arch) -> "PolicyParams":
        return PolicyParams(arch)

    def grads_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros(s) for n, s in self._shapes}

    def flat_from_named(self, named: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.ascontiguousarray(named[n]).reshape(-1)
                               for n, _ in self._shapes])


def _kernel_meta(arch: Arch, shapes) -> np.ndarray:
    """Offsets and dimensions consumed by the compiled forward kernel."""
    offsets = {}
    off = 0
    for name, shape in shapes:
        offsets[name] = off
        off += int(np.prod(shape))
    meta = [offsets[n] for n in (
        "conv0_w", "conv0_b", "conv1_w", "conv1_b", "proj_w", "proj_b",
        "fc1_w", "fc1_b", "fc2_w", "fc2_b", "mean_w", "mean_b",
        "value_w", "value_b", "aux_w", "aux_b",
    )]
    meta += [
        arch.conv[0][1], arch.conv[0][2], arch.conv[0][3],  # C0, k0, s0
        arch.conv[1][1], arch.conv[1][2], arch.conv[1][3],  # C1, k1, s1
        arch.feature_dim, arch.hidden[0], arch.hidden[1],
        N_ACTIONS, N_AUX,
    ]
    return np.asarray(meta, dtype=np.int64)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def init_params(arch: Arch, rng: np.random.Generator, log_std_init: float = -0.5) -> PolicyParams:
    """Orthogonal-style init; the action head is scaled down so the initial
    policy is near-stationary."""
    arrays: dict[str, np.ndarray] = {}
    gain_hidden = np.sqrt(2.0)
    for idx, (c_in, c_out, k, _s) in enumerate(arch.conv):
        w = _orthogonal(rng, c_out, c_in * k, gain_hidden)
        arrays[f"conv{idx}_w"] = np.ascontiguousarray(w.reshape(c_out, c_in, k))
        arrays[f"conv{idx}_b"] = np.zeros(c_out)
    arrays["proj_w"] = _orthogonal(rng, arch.flat_conv_dim, arch.feature_dim, gain_hidden)
    arrays["proj_b"] = np.zeros(arch.feature_dim)
    h1, h2 = arch.hidden
    arrays["fc1_w"] = _orthogonal(rng, arch.feature_dim + arch.state_dim, h1, gain_hidden)
    arrays["fc1_b"] = np.zeros(h1)
    arrays["fc2_w"] = _orthogonal(rng, h1, h2, gain_hidden)
    arrays["fc2_b"] = np.zeros(h2)
    arrays["mean_w"] = _orthogonal(rng, h2, N_ACTIONS, 0.01)
    arrays["mean_b"] = np.zeros(N_ACTIONS)
    arrays["log_std"] = np.full(N_ACTIONS, log_std_init)
    arrays["value_w"] = _orthogonal(rng, h2, 1, 1.0)
    arrays["value_b"] = np.zeros(1)
    arrays["aux_w"] = _orthogonal(rng, arch.feature_dim, N_AUX, 1.0)
    arrays["aux_b"] = np.zeros(N_AUX)
    return PolicyParams(arch, arrays)


@dataclass
class ForwardResult:
    mean: np.ndarray  # (B, 3)
    log_std: np.ndarray  # (3,) clamped
    std: np.ndarray  # (3,)
    value: np.ndarray  # (B,)
    aux: np.ndarray  # (B, 3)
    log_std_mask: np.ndarray  # (3,) bool, True where the clamp is inactive
    cache: dict | None = None


_WINDOW_INDEX_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _window_indices(arch: Arch) -> tuple[np.ndarray, np.ndarray]:
    key = (arch.conv, arch.conv_lengths)
    hit = _WINDOW_INDEX_CACHE.get(key)
    if hit is None:
        idx = []
        for (c_in, c_out, k, s), L in zip(arch.conv, arch.conv_lengths):
            idx.append(np.arange(L)[:, None] * s + np.arange(k)[None, :])
        hit = tuple(idx)
        _WINDOW_INDEX_CACHE[key] = hit
    return hit


def forward(params: PolicyParams, scans: np.ndarray, state: np.ndarray,
            want_cache: bool = False) -> ForwardResult:
    """Batched forward pass.  scans: (B, K, R); state: (B, state_dim)."""
    arch = params.arch
    a = params.arrays
    if scans.ndim != 3 or scans.shape[1] != arch.history or scans.shape[2] != arch.num_rays:
        raise ContractViolationError(f"scan batch has shape {scans.shape}, "
                                     f"expected (B, {arch.history}, {arch.num_rays})")
    if state.ndim != 2 or state.shape[1] != arch.state_dim:
        raise ContractViolationError(f"state batch has shape {state.shape}, "
                                     f"expected (B, {arch.state_dim})")
    B = scans.shape[0]
    idx0, idx1 = _window_indices(arch)

    # conv0 windows gathered channel-major: (B, L, C_in*k)
    c_in0, c_out0, k0, s0 = arch.conv[0]
    L0 = arch.conv_lengths[0]
    win0 = scans[:, :, idx0]                     # (B, C_in, L0, k0)
    win0 = win0.transpose(0, 2, 1, 3).reshape(B, L0, c_in0 * k0)
    w0 = a["conv0_w"].reshape(c_out0, c_in0 * k0).T
    z0 = win0 @ w0 + a["conv0_b"]
    h0 = np.maximum(z0, 0.0)                     # (B, L0, C0)

    # conv1 windows gathered kernel-major: (B, L1, k1*C0)
    c_in1, c_out1, k1, s1 = arch.conv[1]
    L1 = arch.conv_lengths[1]
    win1 = h0[:, idx1, :].reshape(B, L1, k1 * c_in1)
    w1 = a["conv1_w"].transpose(2, 1, 0).reshape(k1 * c_in1, c_out1)
    z1 = win1 @ w1 + a["conv1_b"]
    h1 = np.maximum(z1, 0.0)                     # (B, L1, C1)

    flat = h1.reshape(B, arch.flat_conv_dim)
    z_proj = flat @ a["proj_w"] + a["proj_b"]
    feat = np.maximum(z_proj, 0.0)               # (B, F) conv feature

    aux = feat @ a["aux_w"] + a["aux_b"]

    fused = np.concatenate([feat, state], axis=1)
    z_fc1 = fused @ a["fc1_w"] + a["fc1_b"]
    g1 = np.maximum(z_fc1, 0.0)
    z_fc2 = g1 @ a["fc2_w"] + a["fc2_b"]
    g2 = np.maximum(z_fc2, 0.0)

    mean = g2 @ a["mean_w"] + a["mean_b"]
    value = (g2 @ a["value_w"] + a["value_b"])[:, 0]
    lo, hi = arch.log_std_bounds
    raw = a["log_std"]
    log_std = np.clip(raw, lo, hi)
    mask = (raw > lo) & (raw < hi)

    cache = None
    if want_cache:
        cache = {
            "win0": win0, "z0": z0, "win1": win1, "z1": z1,
            "flat": flat, "z_proj": z_proj, "feat": feat,
            "fused": fused, "z_fc1": z_fc1, "g1": g1, "z_fc2": z_fc2, "g2": g2,
        }
    return ForwardResult(
        mean=mean, log_std=log_std, std=np.exp(log_std), value=value, aux=aux,
        log_std_mask=mask, cache=cache,
    )


def forward_single(params: PolicyParams, scans: np.ndarray, state: np.ndarray):
    """Batch-free forward for rollouts and finite-difference probing.

    Returns (mean (3,), log_std (3,), value, aux (3,)).  Numerically
    equivalent to forward() with a batch of one (asserted in the tests);
    implemented as a compiled kernel so per-step policy evaluation does not
    dominate rollout time.
    """
    from . import _kernels

    arch = params.arch
    a = params.arrays
    if scans.shape != (arch.history, arch.num_rays) or state.shape != (arch.state_dim,):
        raise ContractViolationError(
            f"forward_single expects shapes ({arch.history}, {arch.num_rays}) and "
            f"({arch.state_dim},); got {scans.shape} and {state.shape}"
        )
    mean = np.empty(N_ACTIONS)
    aux = np.empty(N_AUX)
    value = _kernels.policy_forward_single(
        scans, state, params.buffer, params._meta, mean, aux,
    )
    lo, hi = arch.log_std_bounds
    log_std = np.clip(a["log_std"], lo, hi)
    return mean, log_std, float(value), aux


def backward(params: PolicyParams, cache: dict,
             d_mean: np.ndarray, d_value: np.ndarray, d_aux: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of an objective with the given output sensitivities.

    d_mean: (B, 3); d_value: (B,); d_aux: (B, 3).  The log_std gradient is
    not produced here (it never flows through the network); callers fill it
    in directly.
    """
    arch = params.arch
    a = params.arrays
    g: dict[str, np.ndarray] = {}
    B = d_mean.shape[0]

    g2 = cache["g2"]
    g["mean_w"] = g2.T @ d_mean
    g["mean_b"] = d_mean.sum(axis=0)
    dv = d_value[:, None]
    g["value_w"] = g2.T @ dv
    g["value_b"] = dv.sum(axis=0)
    d_g2 = d_mean @ a["mean_w"].T + dv @ a["value_w"].T
    d_z2 = d_g2 * (cache["z_fc2"] > 0.0)

    g1 = cache["g1"]
    g["fc2_w"] = g1.T @ d_z2
    g["fc2_b"] = d_z2.sum(axis=0)
    d_g1 = d_z2 @ a["fc2_w"].T
    d_z1 = d_g1 * (cache["z_fc1"] > 0.0)

    fused = cache["fused"]
    g["fc1_w"] = fused.T @ d_z1
    g["fc1_b"] = d_z1.sum(axis=0)
    d_fused = d_z1 @ a["fc1_w"].T
    d_feat = d_fused[:, : arch.feature_dim].copy()

    feat = cache["feat"]
    g["aux_w"] = feat.T @ d_aux
    g["aux_b"] = d_aux.sum(axis=0)
    d_feat += d_aux @ a["aux_w"].T

    d_zproj = d_feat * (cache["z_proj"] > 0.0)
    flat = cache["flat"]
    g["proj_w"] = flat.T @ d_zproj
    g["proj_b"] = d_zproj.sum(axis=0)
    d_flat = d_zproj @ a["proj_w"].T

    c_in1, c_out1, k1, s1 = arch.conv[1]
    L1 = arch.conv_lengths[1]
    d_h1 = d_flat.reshape(B, L1, c_out1)
    d_z1c = d_h1 * (cache["z1"] > 0.0)
    win1 = cache["win1"]
    dw1 = np.einsum("blf,blo->fo", win1, d_z1c)
    g["conv1_w"] = dw1.reshape(k1, c_in1, c_out1).transpose(2, 1, 0)
    g["conv1_b"] = d_z1c.sum(axis=(0, 1))
    w1 = a["conv1_w"].transpose(2, 1, 0).reshape(k1 * c_in1, c_out1)
    d_win1 = (d_z1c @ w1.T).reshape(B, L1, k1, c_in1)

    c_in0, c_out0, k0, s0 = arch.conv[0]
    L0 = arch.conv_lengths[0]
    d_h0 = np.zeros((B, L0, c_out0))
    for t in range(k1):
        d_h0[:, t : t + s1 * L1 : s1, :] += d_win1[:, :, t, :]
    d_z0c = d_h0 * (cache["z0"] > 0.0)
    win0 = cache["win0"]
    dw0 = np.einsum("blf,blo->fo", win0, d_z0c)
    g["conv0_w"] = dw0.T.reshape(c_out0, c_in0, k0)
    g["conv0_b"] = d_z0c.sum(axis=(0, 1))

    g["log_std"] = np.zeros(N_ACTIONS)
    return g


# ---------------------------------------------------------------------------
# squashing and log-probabilities


def _softplus(x):
    return np.logaddexp(0.0, x)


def squash(pre: np.ndarray, v_max: float) -> np.ndarray:
    """Map pre-squash samples to (speed, motion heading, camera heading)."""
    pre = np.asarray(pre, dtype=np.float64)
    out = np.empty_like(pre)
    out[..., 0] = v_max / (1.0 + np.exp(-pre[..., 0]))
    out[..., 1] = np.pi * np.tanh(pre[..., 1])
    out[..., 2] = np.pi * np.tanh(pre[..., 2])
    return out


def squash_log_det(pre: np.ndarray, v_max: float) -> np.ndarray:
    """log |det d squash / d pre|, stable for large inputs."""
    pre = np.asarray(pre, dtype=np.float64)
    u0 = pre[..., 0]
    # log( v_max * sigmoid(u) * (1 - sigmoid(u)) )
    term0 = np.log(v_max) - u0 - 2.0 * _softplus(-u0)
    terms = [term0]
    for i in (1, 2):
        u = pre[..., i]
        # log( pi * (1 - tanh(u)^2) )
        terms.append(np.log(np.pi) + 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u)))
    return np.stack(terms, axis=-1).sum(axis=-1)


LOG_2PI = np.log(2.0 * np.pi)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, pre: np.ndarray) -> np.ndarray:
    z = (pre - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * N_ACTIONS * LOG_2PI


def log_prob(mean: np.ndarray, log_std: np.ndarray, pre: np.ndarray, v_max: float) -> np.ndarray:
    """Log density of the squashed action evaluated at pre-squash sample(s)."""
    return gaussian_log_prob(mean, log_std, pre) - squash_log_det(pre, v_max)


def entropy(log_std: np.ndarray) -> float:
    """Entropy of the pre-squash Gaussian (the PPO regularizer)."""
    return float(np.sum(log_std) + 0.5 * N_ACTIONS * (1.0 + LOG_2PI))


def sample_pre_squash(mean: np.ndarray, std: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + std * rng.standard_normal(mean.shape)


def params_digest(params: PolicyParams) -> str:
    """Identifies the exact parameter values (used by episode logs)."""
    import hashlib

    return hashlib.sha256(params.flat().astype("<f8").tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path,
    params: PolicyParams,
    interface_digest: str,
    config_digest: str,
    env_steps: int = 0,
    updates: int = 0,
    optimizer_state: tuple[np.ndarray, np.ndarray, int] | None = None,
) -> None:
    """Self-describing binary container; see README for the exact layout."""
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "arch": params.arch.to_dict(),
        "param_count": params.count,
        "interface_digest": interface_digest,
        "config_digest": config_digest,
        "env_steps": int(env_steps),
        "updates": int(updates),
        "optimizer": {"present": optimizer_state is not None,
                      "t": 0 if optimizer_state is None else int(optimizer_state[2])},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = params.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())
        if optimizer_state is not None:
            m, v, _t = optimizer_state
            fh.write(m.astype("<f8").tobytes())
            fh.write(v.astype("<f8").tobytes())


def load_checkpoint(path: str | Path):
    """Returns (params, header dict, optimizer_state or None)."""
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"unsupported checkpoint format {header.get('format_version')}")
    arch = Arch.from_dict(header["arch"])
    params = PolicyParams.zeros(arch)
    n = header["param_count"]
    if n != params.count:
        raise ConfigurationError("checkpoint parameter count does not match its architecture")
    flat = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    off += n * 8
    params.set_flat(flat)
    opt_state = None
    if header["optimizer"]["present"]:
        m = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += n * 8
        v = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        opt_state = (m, v, header["optimizer"]["t"])
    return params, header, opt_state

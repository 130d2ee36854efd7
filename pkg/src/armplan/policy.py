"""Actor-critic MLP in plain numpy with an analytic PPO-loss gradient.

Checkpoint byte layout::

    8 bytes   magic b"ARMDRL01"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header: spec, shape table, endianness, dtype, metadata
    rest      parameter blocks in shape-table order, C order, little-endian floats
"""

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .env import ACTION_BOUND, Action
from .sensors import OBS_DIM

MAGIC = b"ARMDRL01"
LOG_2PI = math.log(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class Divergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = OBS_DIM
    shared_layers: tuple = (256, 256)
    actor_head: tuple = (64,)
    critic_head: tuple = (64,)
    action_dim: int = 6
    action_bound: float = ACTION_BOUND
    log_std_init: float = math.log(0.5 * ACTION_BOUND)
    activation: str = "tanh"
    obs_norm: str = "default"

    def __post_init__(self):
        for name in ("shared_layers", "actor_head", "critic_head"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.activation != "tanh":
            raise ValueError("only tanh activations are implemented")
        if self.obs_norm not in ("default", "none"):
            raise ValueError(f"unknown obs_norm {self.obs_norm!r}")

    def shapes(self):
        """Ordered (name, shape) table for every parameter block."""
        out = []
        prev = self.input_dim
        for i, w in enumerate(self.shared_layers):
            out += [(f"shared.{i}.W", (prev, w)), (f"shared.{i}.b", (w,))]
            prev = w
        trunk = prev
        for head, widths, n_out in (("actor", self.actor_head, self.action_dim),
                                    ("critic", self.critic_head, 1)):
            prev = trunk
            for i, w in enumerate(widths):
                out += [(f"{head}.{i}.W", (prev, w)), (f"{head}.{i}.b", (w,))]
                prev = w
            out += [(f"{head}.out.W", (prev, n_out)), (f"{head}.out.b", (n_out,))]
        out.append(("log_std", (self.action_dim,)))
        return out

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def obs_normalizer(spec):
    """Fixed affine input map ``(x - shift) * scale``.

    Joint angles and Euler angles are divided by pi, goal offsets and the goal
    distance are expressed in decimetres, ray fractions become ``1 - r`` so an
    empty view reads zero.
    """
    shift = np.zeros(spec.input_dim)
    scale = np.ones(spec.input_dim)
    if spec.obs_norm == "none":
        return shift, scale
    n_joints = spec.input_dim - 7 - 129
    j = n_joints
    scale[:j] = 1 / math.pi
    scale[j:j + 3] = 10.0
    scale[j + 3:j + 6] = 1 / math.pi
    scale[j + 6] = 10.0
    shift[j + 7:] = 1.0
    scale[j + 7:] = -1.0
    return shift, scale


class PolicyParams:
    """Parameter blocks as views into one flat buffer."""

    def __init__(self, spec, flat=None, dtype=np.float32):
        self.spec = spec
        self.table = spec.shapes()
        size = sum(int(np.prod(s)) for _, s in self.table)
        if flat is None:
            flat = np.zeros(size, dtype)
        flat = np.asarray(flat)
        if flat.shape != (size,):
            raise ShapeMismatch(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat
        self.blocks = {}
        start = 0
        for name, shape in self.table:
            n = int(np.prod(shape))
            self.blocks[name] = flat[start:start + n].reshape(shape)
            start += n
        shift, scale = obs_normalizer(spec)
        self.obs_shift = shift.astype(flat.dtype)
        self.obs_scale = scale.astype(flat.dtype)

    def __getitem__(self, name):
        return self.blocks[name]

    @property
    def dtype(self):
        return self.flat.dtype

    def astype(self, dtype):
        return PolicyParams(self.spec, self.flat.astype(dtype), dtype)

    def copy(self):
        return PolicyParams(self.spec, self.flat.copy())

    def zeros_like(self):
        return PolicyParams(self.spec, np.zeros_like(self.flat))

    def all_finite(self):
        return bool(np.all(np.isfinite(self.flat)))


def _orthogonal(rng, shape, gain):
    a = rng.normal(size=(max(shape), min(shape)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[:shape[0], :shape[1]]


def init_params(spec, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    p = PolicyParams(spec, dtype=dtype)
    for name, shape in p.table:
        if name.endswith(".W"):
            gain = 0.01 if name == "actor.out.W" else 1.0
            p[name][...] = _orthogonal(rng, shape, gain)
    p["log_std"][...] = spec.log_std_init
    return p


# --- forward ----------------------------------------------------------------

def _check_obs(params, obs):
    obs = np.asarray(obs)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.shape[-1] != params.spec.input_dim:
        raise ShapeMismatch(f"observation length {obs.shape[-1]} != {params.spec.input_dim}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    return obs


def _forward(params, obs):
    spec = params.spec
    x = (obs.astype(params.dtype) - params.obs_shift) * params.obs_scale
    cache = {"x": x}
    h = x
    for i in range(len(spec.shared_layers)):
        h = np.tanh(h @ params[f"shared.{i}.W"] + params[f"shared.{i}.b"])
        cache[f"shared.{i}"] = h
    trunk = h
    for head, widths in (("actor", spec.actor_head), ("critic", spec.critic_head)):
        h = trunk
        for i in range(len(widths)):
            h = np.tanh(h @ params[f"{head}.{i}.W"] + params[f"{head}.{i}.b"])
            cache[f"{head}.{i}"] = h
        cache[f"{head}.out"] = h @ params[f"{head}.out.W"] + params[f"{head}.out.b"]
    squash = np.tanh(cache["actor.out"])
    cache["squash"] = squash
    means = spec.action_bound * squash
    values = cache["critic.out"][:, 0]
    return means, values, cache


def forward(params, obs_batch):
    """(means (B, 6), values (B,)) for a batch of 142-long observations."""
    obs = _check_obs(params, obs_batch)
    n = len(obs)
    # whole 16-row tiles keep every row on the same BLAS kernel path, so a
    # row's output does not depend on its position or on the batch size
    pad = (-n) % _ROW_TILE
    if pad:
        obs = np.concatenate([obs, np.zeros((pad, obs.shape[1]), obs.dtype)])
    means, values, _ = _forward(params, obs)
    return means[:n], values[:n]


_ROW_TILE = 16


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std must be non-negative")

    def log_prob(self, x):
        return gaussian_log_prob(x, self.mean, np.log(self.std))


def distribution(params, obs):
    means, _ = forward(params, obs)
    return ActionDistribution(means[0].astype(float), np.exp(params["log_std"].astype(float)))


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def sample_action(dist, rng, bound=ACTION_BOUND):
    """Draw one action; log-probability is taken before clamping."""
    raw = dist.mean + dist.std * rng.standard_normal(len(dist.mean))
    std = np.maximum(dist.std, 1e-300)
    logp = float(gaussian_log_prob(raw, dist.mean, np.log(std)))
    return Action.from_array(np.clip(raw, -bound, bound)), logp


def sample_batch(means, log_std, rng):
    """Vectorised sampling for rollouts: (raw samples, log-probs)."""
    raw = means + np.exp(log_std) * rng.standard_normal(means.shape)
    return raw, gaussian_log_prob(raw, means, log_std)


# --- loss and gradient -------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0


@dataclass
class Minibatch:
    obs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def ppo_loss(params, mb, loss_spec=LossSpec()):
    return _loss_and_grad(params, mb, loss_spec, want_grad=False)[0]


def backward(params, mb, loss_spec=LossSpec()):
    """Exact gradient of the PPO loss; returns (grads, stats)."""
    return _loss_and_grad(params, mb, loss_spec, want_grad=True)


def _loss_and_grad(params, mb, ls, want_grad):
    spec = params.spec
    dt = params.dtype
    obs = _check_obs(params, mb.obs)
    means, values, cache = _forward(params, obs)
    B = len(obs)
    log_std = params["log_std"]
    inv_std = np.exp(-log_std)
    z = (mb.actions.astype(dt) - means) * inv_std
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)
    ratio = np.exp(logp - mb.old_log_probs.astype(dt))
    adv = mb.advantages.astype(dt)
    clipped = np.clip(ratio, 1 - ls.clip, 1 + ls.clip)
    unclipped_taken = ratio * adv <= clipped * adv
    surr = np.where(unclipped_taken, ratio * adv, clipped * adv)
    policy_loss = -surr.mean()
    verr = values - mb.returns.astype(dt)
    value_loss = np.mean(verr * verr)
    entropy = float(np.sum(log_std) + 0.5 * spec.action_dim * (1 + LOG_2PI))
    loss = policy_loss + ls.vf_coef * value_loss - ls.ent_coef * entropy
    stats = {"loss": float(loss), "policy_loss": float(policy_loss),
             "value_loss": float(value_loss), "entropy": entropy,
             "clip_fraction": float(np.mean(np.abs(ratio - 1) > ls.clip)),
             "approx_kl": float(np.mean((ratio - 1) - (logp - mb.old_log_probs)))}
    if not math.isfinite(stats["loss"]):
        raise Divergence(f"non-finite loss {stats}")
    if not want_grad:
        return stats["loss"], stats

    grads = params.zeros_like()
    # d loss / d log-prob per sample
    g_logp = np.where(unclipped_taken, adv, 0.0).astype(dt) * ratio * (-1.0 / B)
    g_mean = g_logp[:, None] * z * inv_std
    grads["log_std"][...] = np.sum(g_logp[:, None] * (z * z - 1), axis=0) - ls.ent_coef
    g_pre_actor = g_mean * spec.action_bound * (1 - cache["squash"] ** 2)
    g_value = (2 * ls.vf_coef / B) * verr

    trunk = cache[f"shared.{len(spec.shared_layers) - 1}"] if spec.shared_layers else cache["x"]
    g_trunk = np.zeros_like(trunk)
    for head, widths, g_out in (("actor", spec.actor_head, g_pre_actor),
                                ("critic", spec.critic_head, g_value[:, None])):
        n = len(widths)
        h_in = cache[f"{head}.{n - 1}"] if n else trunk
        grads[f"{head}.out.W"][...] = h_in.T @ g_out
        grads[f"{head}.out.b"][...] = g_out.sum(0)
        g_h = g_out @ params[f"{head}.out.W"].T
        for i in reversed(range(n)):
            h = cache[f"{head}.{i}"]
            g_pre = g_h * (1 - h * h)
            below = cache[f"{head}.{i - 1}"] if i else trunk
            grads[f"{head}.{i}.W"][...] = below.T @ g_pre
            grads[f"{head}.{i}.b"][...] = g_pre.sum(0)
            g_h = g_pre @ params[f"{head}.{i}.W"].T
        g_trunk += g_h
    g_h = g_trunk
    for i in reversed(range(len(spec.shared_layers))):
        h = cache[f"shared.{i}"]
        g_pre = g_h * (1 - h * h)
        below = cache[f"shared.{i - 1}"] if i else cache["x"]
        grads[f"shared.{i}.W"][...] = below.T @ g_pre
        grads[f"shared.{i}.b"][...] = g_pre.sum(0)
        if i:
            g_h = g_pre @ params[f"shared.{i}.W"].T
    if not grads.all_finite():
        raise Divergence("non-finite gradient")
    return grads, stats


# --- checkpoints --------------------------------------------------------------

def checkpoint_bytes(params, metadata=None):
    header = {
        "format": "armplan-policy",
        "version": 1,
        "spec": params.spec.to_json(),
        "shapes": [[name, list(shape)] for name, shape in params.table],
        "endianness": "little",
        "dtype": params.dtype.name,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = params.flat.astype(params.dtype.newbyteorder("<"), copy=False).tobytes()
    return MAGIC + struct.pack("<Q", len(head)) + head + blob


def save_checkpoint(params, path, metadata=None):
    data = checkpoint_bytes(params, metadata)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_checkpoint(data, expected_spec=None):
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptCheckpoint("not an armplan policy checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
        spec = NetworkSpec.from_json(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    if header.get("endianness") != "little":
        raise CorruptCheckpoint("only little-endian checkpoints are supported")
    table = [(name, tuple(shape)) for name, shape in header["shapes"]]
    if table != spec.shapes():
        raise CorruptCheckpoint("shape table does not match the stored network spec")
    if expected_spec is not None and expected_spec != spec:
        raise ShapeMismatch(f"checkpoint spec {spec} differs from expected {expected_spec}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    size = sum(int(np.prod(s)) for _, s in table)
    blob = data[16 + n:]
    if len(blob) != size * dtype.itemsize:
        raise CorruptCheckpoint(f"expected {size * dtype.itemsize} parameter bytes, got {len(blob)}")
    flat = np.frombuffer(blob, dtype=dtype).astype(dtype.newbyteorder("="))
    return PolicyParams(spec, flat), header.get("metadata", {})


def load_checkpoint(path, expected_spec=None, with_metadata=False):
    with open(path, "rb") as fh:
        params, meta = parse_checkpoint(fh.read(), expected_spec)
    return (params, meta) if with_metadata else params

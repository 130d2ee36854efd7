"""Clipped-surrogate PPO with GAE over a pool of sequentially stepped environments."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .env import (
    CurriculumParams, CurriculumState, EnvConfig, ObstacleSchedule, ReachEnv,
    update_target_size,
)
from .policy import (
    Divergence, LossSpec, Minibatch, NetworkSpec, backward, forward, init_params,
    sample_batch, save_checkpoint,
)

log = logging.getLogger(__name__)

CURVE_FIELDS = ["iteration", "env_steps", "mean_reward", "success_rate", "policy_loss",
                "value_loss", "clip_fraction", "episodes", "collision_rate",
                "strict_success_rate", "rho_tilde", "n_obstacles", "grad_norm", "wall_s"]
EPISODE_FIELDS = ["episode", "env_steps", "worker", "outcome", "success", "strict_success",
                  "length", "return", "final_distance", "rho_tilde", "d_th", "n_obstacles"]


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 256
    lr: float = 3e-4
    clip: float = 0.2
    max_episode_steps: int = 1024
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    gae_lambda: float = 0.95
    horizon: int = 2048
    epochs: int = 10
    n_envs: int = 4
    seed: int = 0
    total_steps: int = 2_000_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5
    strict_threshold: float = 0.01
    obstacles_start: int = 0
    obstacles_min: int = 0
    obstacles_max: int = 0
    checkpoint_every: int = 0
    network: NetworkSpec = field(default_factory=NetworkSpec)
    env: EnvConfig = field(default_factory=EnvConfig)
    curriculum: CurriculumParams = field(default_factory=CurriculumParams)

    def __post_init__(self):
        checks = [(0 < self.gamma <= 1, "gamma"), (0 <= self.gae_lambda <= 1, "gae_lambda"),
                  (self.batch_size >= 1, "batch_size"), (self.lr > 0, "lr"),
                  (0 < self.clip < 1, "clip"), (self.horizon >= 1, "horizon"),
                  (self.epochs >= 1, "epochs"), (self.n_envs >= 1, "n_envs"),
                  (self.total_steps >= 0, "total_steps"), (self.max_grad_norm > 0, "max_grad_norm"),
                  (self.obstacles_min <= self.obstacles_start <= self.obstacles_max,
                   "obstacle counts")]
        for ok, name in checks:
            if not ok:
                raise ValueError(f"invalid training setting: {name}")
        if self.env.max_episode_steps != self.max_episode_steps:
            object.__setattr__(self, "env", replace(self.env, max_episode_steps=self.max_episode_steps))

    def to_json(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("network", "env", "curriculum")}
        d["network"] = self.network.to_json()
        d["env"] = self.env.as_dict()
        d["curriculum"] = asdict(self.curriculum)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        net = NetworkSpec.from_json(d.pop("network", {}))
        env = EnvConfig.from_dict(d.pop("env", {}))
        cur = CurriculumParams(**d.pop("curriculum", {}))
        return cls(network=net, env=env, curriculum=cur, **d)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


# --- advantage estimation ---------------------------------------------------

def compute_gae(rewards, values, dones, bootstrap, gamma, lam):
    """GAE over axis 0; ``dones[t]`` marks an episode that ended at step t.

    Returns (advantages, returns) with returns = advantages + values.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    dones = np.asarray(dones, bool)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError("rewards, values and dones must have the same shape")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    next_v = np.asarray(bootstrap, float)
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_v = values[t]
    return adv, adv + values


def clipped_surrogate(ratio, adv, eps):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


# --- optimiser ----------------------------------------------------------------

class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-5, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype)
        self.v = np.zeros(size, dtype)
        self.t = 0

    def step(self, flat, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        flat -= (lr_t * self.m / (np.sqrt(self.v) + self.eps)).astype(flat.dtype)


# --- rollouts -------------------------------------------------------------------

@dataclass
class RolloutSet:
    obs: np.ndarray          # (T, N, 142)
    actions: np.ndarray      # (T, N, 6) pre-clamp samples
    log_probs: np.ndarray    # (T, N)
    rewards: np.ndarray      # (T, N)
    values: np.ndarray       # (T, N)
    dones: np.ndarray        # (T, N)
    outcomes: np.ndarray     # (T, N) outcome tag after each step
    bootstrap: np.ndarray    # (N,) value of the state after the last step
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def __len__(self):
        return self.rewards.size

    def flat(self):
        n = len(self)
        return Minibatch(self.obs.reshape(n, -1), self.actions.reshape(n, -1),
                         self.log_probs.reshape(n), self.advantages.reshape(n),
                         self.returns.reshape(n))


class Worker:
    """One environment plus its episode bookkeeping."""

    def __init__(self, env, index, base_seed):
        self.env = env
        self.index = index
        self.base_seed = base_seed
        self.episode = 0
        self.obs = None
        self.ep_return = 0.0
        self.ep_len = 0

    def reset(self, pool):
        seed = int(np.random.SeedSequence([self.base_seed, self.index, self.episode])
                   .generate_state(1)[0])
        state, obs = self.env.reset(seed=seed, curriculum=pool.curriculum,
                                    n_obstacles=pool.schedule.count)
        self.obs = obs.vector
        self.ep_return = 0.0
        self.ep_len = 0
        self.n_obstacles = pool.schedule.count
        return state


class EnvPool:
    """N environments advanced in lock-step inside one process.

    Holds the shared target-size curriculum and obstacle schedule, both fed
    by every finished episode in worker order.
    """

    def __init__(self, envs, seed, curriculum=None, schedule=None, strict_threshold=0.01,
                 episode_callback=None):
        self.curriculum = curriculum or CurriculumState()
        self.schedule = schedule or ObstacleSchedule(max_count=0)
        self.strict_threshold = strict_threshold
        self.workers = [Worker(e, i, seed) for i, e in enumerate(envs)]
        self.episodes = []
        self.env_steps = 0
        self.episode_callback = episode_callback
        for w in self.workers:
            w.reset(self)

    def _finish(self, w, state, info):
        success = state.outcome == "success"
        rec = {"episode": len(self.episodes), "env_steps": self.env_steps, "worker": w.index,
               "outcome": state.outcome, "success": int(success),
               "strict_success": int(success and info["distance"] <= self.strict_threshold),
               "length": w.ep_len, "return": w.ep_return,
               "final_distance": info["distance"], "rho_tilde": self.curriculum.rho_tilde,
               "d_th": state.d_th, "n_obstacles": w.n_obstacles}
        self.episodes.append(rec)
        if self.episode_callback:
            self.episode_callback(rec)
        self.curriculum = update_target_size(self.curriculum, success)
        self.schedule.record(success)
        w.episode += 1
        w.reset(self)


def collect_rollouts(pool, params, T, rng):
    N = len(pool.workers)
    dim = params.spec.input_dim
    obs = np.zeros((T, N, dim), np.float32)
    actions = np.zeros((T, N, params.spec.action_dim))
    log_probs = np.zeros((T, N))
    rewards = np.zeros((T, N))
    values = np.zeros((T, N))
    dones = np.zeros((T, N), bool)
    outcomes = np.empty((T, N), object)
    log_std = params["log_std"].astype(float)
    bound = params.spec.action_bound
    for t in range(T):
        cur = np.stack([w.obs for w in pool.workers])
        means, v = forward(params, cur)
        raw, logp = sample_batch(means.astype(float), log_std, rng)
        obs[t] = cur
        actions[t] = raw
        log_probs[t] = logp
        values[t] = v
        for i, w in enumerate(pool.workers):
            state, ob, reward, done, info = w.env.step(np.clip(raw[i], -bound, bound))
            pool.env_steps += 1
            w.ep_return += reward.total
            w.ep_len += 1
            rewards[t, i] = reward.total
            dones[t, i] = done
            outcomes[t, i] = state.outcome
            if done:
                pool._finish(w, state, info)
            else:
                w.obs = ob.vector
    _, bootstrap = forward(params, np.stack([w.obs for w in pool.workers]))
    return RolloutSet(obs, actions, log_probs, rewards, values, dones, outcomes,
                      bootstrap.astype(float))


# --- update ---------------------------------------------------------------------

def ppo_update(rollouts, params, config, optimizer, rng):
    """Epochs of shuffled minibatch steps on the clipped loss; updates ``params`` in place."""
    data = rollouts.flat()
    n = len(rollouts)
    ls = LossSpec(config.clip, config.vf_coef, config.ent_coef)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "clip_fraction": 0.0, "grad_norm": 0.0,
            "approx_kl": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            adv = data.advantages[idx]
            if len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            mb = Minibatch(data.obs[idx], data.actions[idx], data.old_log_probs[idx], adv,
                           data.returns[idx])
            grads, stats = backward(params, mb, ls)
            g = grads.flat
            norm = float(np.sqrt(np.dot(g.astype(np.float64), g.astype(np.float64))))
            if not math.isfinite(norm):
                raise Divergence(f"non-finite gradient norm at update {count}")
            if norm > config.max_grad_norm:
                g = g * (config.max_grad_norm / (norm + 1e-6))
            optimizer.step(params.flat, g)
            for k in sums:
                sums[k] += norm if k == "grad_norm" else stats[k]
            count += 1
    if not params.all_finite():
        raise Divergence("parameters became non-finite")
    return params, {k: v / max(count, 1) for k, v in sums.items()}


# --- training loop ------------------------------------------------------------------

def make_env_factory(config):
    def factory(i):
        return ReachEnv(config.env)
    return factory


def train(config, env_factory=None, out_dir=None, params=None, progress=None):
    """Alternate rollouts, GAE and PPO updates until ``total_steps`` env steps.

    Writes ``curve.csv``, ``episodes.csv``, ``config.json`` and ``policy.ckpt``
    into ``out_dir`` when given. Returns (params, curve rows).
    """
    env_factory = env_factory or make_env_factory(config)
    params = params if params is not None else init_params(config.network, seed=config.seed)
    out = Path(out_dir) if out_dir else None
    curve = []
    if config.total_steps < config.n_envs * config.horizon:
        return params, curve
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    ep_file = ep_writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_json(), indent=2))
        ep_file = open(out / "episodes.csv", "w", newline="")
        ep_writer = csv.DictWriter(ep_file, EPISODE_FIELDS)
        ep_writer.writeheader()
    schedule = ObstacleSchedule(count=config.obstacles_start, min_count=config.obstacles_min,
                                max_count=config.obstacles_max)
    pool = EnvPool([env_factory(i) for i in range(config.n_envs)], config.seed,
                   CurriculumState(config.curriculum), schedule, config.strict_threshold,
                   episode_callback=ep_writer.writerow if ep_writer else None)
    opt = Adam(params.flat.size, config.lr, config.adam_beta1, config.adam_beta2,
               config.adam_eps, params.dtype)
    per_iter = config.n_envs * config.horizon
    n_iters = config.total_steps // per_iter
    t0 = time.perf_counter()
    try:
        for it in range(1, n_iters + 1):
            first_ep = len(pool.episodes)
            ro = collect_rollouts(pool, params, config.horizon, rng)
            ro.advantages, ro.returns = compute_gae(ro.rewards, ro.values, ro.dones, ro.bootstrap,
                                                    config.gamma, config.gae_lambda)
            params, metrics = ppo_update(ro, params, config, opt, rng)
            eps = pool.episodes[first_ep:]
            row = {"iteration": it, "env_steps": pool.env_steps,
                   "mean_reward": _mean([e["return"] for e in eps]),
                   "success_rate": _mean([e["success"] for e in eps]),
                   "policy_loss": metrics["policy_loss"], "value_loss": metrics["value_loss"],
                   "clip_fraction": metrics["clip_fraction"], "episodes": len(eps),
                   "collision_rate": _mean([e["outcome"] == "collision" for e in eps]),
                   "strict_success_rate": _mean([e["strict_success"] for e in eps]),
                   "rho_tilde": pool.curriculum.rho_tilde, "n_obstacles": pool.schedule.count,
                   "grad_norm": metrics["grad_norm"],
                   "wall_s": round(time.perf_counter() - t0, 3)}
            curve.append(row)
            if out:
                _write_curve(out / "curve.csv", curve)
                ep_file.flush()
                if config.checkpoint_every and it % config.checkpoint_every == 0:
                    _save(params, out / "policy.ckpt", config, pool)
            if progress:
                progress(row)
            log.debug("iter %d steps %d reward %.3f success %.3f", it, pool.env_steps,
                     row["mean_reward"], row["success_rate"])
    except Divergence as exc:
        if out:
            (out / "divergence.txt").write_text(f"{exc}\niteration {len(curve) + 1}\n")
        raise
    finally:
        if ep_file:
            ep_file.close()
    if out:
        _save(params, out / "policy.ckpt", config, pool)
    return params, curve


def _save(params, path, config, pool):
    meta = {"train_config": config.to_json(), "env_steps": pool.env_steps,
            "episodes": len(pool.episodes), "curriculum": pool.curriculum.as_dict()}
    save_checkpoint(params, path, metadata=meta)


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def _write_curve(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CURVE_FIELDS)
        w.writeheader()
        w.writerows(rows)

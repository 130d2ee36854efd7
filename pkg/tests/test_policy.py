import math

import numpy as np
import pytest
from scipy.stats import norm

from armplan.policy import (
    ActionDistribution, CorruptCheckpoint, LossSpec, Minibatch, NetworkSpec, PolicyParams,
    ShapeMismatch, backward, checkpoint_bytes, forward, gaussian_log_prob, init_params,
    load_checkpoint, obs_normalizer, parse_checkpoint, ppo_loss, sample_action,
    save_checkpoint,
)
from oracles import gaussian_logpdf

SPEC = NetworkSpec()
SMALL = NetworkSpec(shared_layers=(16, 12), actor_head=(8,), critic_head=(7,))


def random_obs(rng, n):
    obs = np.concatenate([rng.uniform(-3, 3, (n, 6)), rng.uniform(-0.5, 0.5, (n, 3)),
                          rng.uniform(-3, 3, (n, 3)), rng.uniform(0, 0.8, (n, 1)),
                          rng.uniform(0, 1, (n, 129))], axis=1)
    return obs


def random_params(spec, seed, dtype=np.float64, scale=0.3):
    rng = np.random.default_rng(seed)
    p = PolicyParams(spec, rng.normal(scale=scale, size=PolicyParams(spec).flat.size).astype(dtype))
    p["log_std"][...] = rng.uniform(-6, -4, spec.action_dim)
    return p


def oracle_forward(p, obs):
    spec = p.spec
    shift, scale = obs_normalizer(spec)
    h = (obs - shift) * scale
    for i in range(len(spec.shared_layers)):
        h = np.tanh(h.dot(p[f"shared.{i}.W"]) + p[f"shared.{i}.b"])
    outs = []
    for head in ("actor", "critic"):
        g = h
        widths = spec.actor_head if head == "actor" else spec.critic_head
        for i in range(len(widths)):
            g = np.tanh(g.dot(p[f"{head}.{i}.W"]) + p[f"{head}.{i}.b"])
        outs.append(g.dot(p[f"{head}.out.W"]) + p[f"{head}.out.b"])
    return spec.action_bound * np.tanh(outs[0]), outs[1][:, 0]


def random_minibatch(p, rng, n=32, spread=0.3):
    obs = random_obs(rng, n)
    means, values = forward(p, obs)
    std = np.exp(p["log_std"])
    actions = means + std * rng.standard_normal(means.shape)
    logp = gaussian_log_prob(actions, means, p["log_std"])
    old = logp + rng.normal(scale=spread, size=n)       # some ratios land outside the clip range
    return Minibatch(obs, actions, old, rng.normal(size=n), values + rng.normal(size=n))


def test_shape_table():
    p = PolicyParams(SPEC)
    names = [n for n, _ in p.table]
    assert names[0] == "shared.0.W" and names[-1] == "log_std"
    assert dict(p.table)["shared.0.W"] == (142, 256)
    assert dict(p.table)["actor.out.W"] == (64, 6)
    assert dict(p.table)["critic.out.W"] == (64, 1)


def test_zero_params_forward():
    p = PolicyParams(SPEC)
    means, values = forward(p, random_obs(np.random.default_rng(0), 4))
    assert np.all(means == 0) and np.all(values == 0)


def test_identical_rows():
    p = init_params(SPEC, seed=1)
    obs = np.repeat(random_obs(np.random.default_rng(1), 1), 5, axis=0)
    means, values = forward(p, obs)
    assert np.all(means == means[0]) and np.all(values == values[0])


def test_forward_matches_oracle():
    rng = np.random.default_rng(2)
    for seed in range(5):
        p = random_params(SPEC, seed)
        obs = random_obs(rng, 16)
        m, v = forward(p, obs)
        mo, vo = oracle_forward(p, obs)
        assert np.abs(m - mo).max() < 1e-9 and np.abs(v - vo).max() < 1e-9


def test_batch_permutation():
    p = init_params(SPEC, seed=3, dtype=np.float64)
    obs = random_obs(np.random.default_rng(3), 20)
    perm = np.random.default_rng(4).permutation(20)
    m, v = forward(p, obs)
    mp, vp = forward(p, obs[perm])
    assert np.array_equal(m[perm], mp) and np.array_equal(v[perm], vp)


def test_means_bounded():
    p = random_params(SPEC, 5, scale=3.0)
    m, _ = forward(p, random_obs(np.random.default_rng(5), 100))
    assert np.all(np.abs(m) <= 0.005)


def test_forward_errors():
    p = init_params(SPEC)
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros((2, 141)))
    bad = np.zeros((1, 142))
    bad[0, 3] = np.nan
    with pytest.raises(ValueError):
        forward(p, bad)


def test_init():
    p = init_params(SPEC, seed=0)
    W = p["shared.1.W"].astype(float)
    assert np.allclose(W.T @ W, np.eye(256), atol=1e-5)
    assert np.allclose(p["log_std"], math.log(0.0025))
    assert np.abs(p["actor.out.W"]).max() < 0.02
    assert p.dtype == np.float32


# --- sampling ---

def test_sample_zero_std():
    d = ActionDistribution(np.array([0.001, -0.009, 0, 0, 0.004, 0.02]), np.zeros(6))
    a, _ = sample_action(d, np.random.default_rng(0))
    assert np.allclose(a.as_array(), np.clip(d.mean, -0.005, 0.005))


def test_sample_log_prob_oracle():
    rng = np.random.default_rng(1)
    d = ActionDistribution(rng.uniform(-0.004, 0.004, 6), rng.uniform(0.001, 0.003, 6))
    for _ in range(50):
        state = rng.bit_generator.state
        a, logp = sample_action(d, rng)
        rng2 = np.random.default_rng()
        rng2.bit_generator.state = state
        raw = d.mean + d.std * rng2.standard_normal(6)
        assert logp == pytest.approx(gaussian_logpdf(raw, d.mean, d.std), rel=1e-12)
        assert np.array_equal(a.as_array(), np.clip(raw, -0.005, 0.005))


def test_sample_deterministic():
    d = ActionDistribution(np.zeros(6), np.full(6, 0.002))
    a = sample_action(d, np.random.default_rng(7))
    b = sample_action(d, np.random.default_rng(7))
    assert a == b


def test_density_box_probability():
    rng = np.random.default_rng(11)
    mean, std = np.array([0.3, -0.2]), np.array([0.5, 1.5])
    lo, hi = mean - np.array([0.7, 2.0]), mean + np.array([0.4, 1.0])
    # Monte-Carlo integral of exp(log_prob) over the box with uniform samples
    u = rng.uniform(lo, hi, (1_000_000, 2))
    vol = np.prod(hi - lo)
    mc = vol * np.mean(np.exp(gaussian_log_prob(u, mean, np.log(std))))
    exact = np.prod(norm.cdf((hi - mean) / std) - norm.cdf((lo - mean) / std))
    assert abs(mc - exact) / exact < 0.01


# --- gradients ---

def fd_check(p, mb, ls, rng, per_block=12, h=1e-6):
    grads, _ = backward(p, mb, ls)
    worst = {}
    for name, shape in p.table:
        block = p[name].reshape(-1)
        gblock = grads[name].reshape(-1)
        idx = rng.choice(block.size, size=min(per_block, block.size), replace=False)
        fd = np.empty(len(idx))
        for j, k in enumerate(idx):
            old = block[k]
            block[k] = old + h
            up = ppo_loss(p, mb, ls)
            block[k] = old - h
            dn = ppo_loss(p, mb, ls)
            block[k] = old
            fd[j] = (up - dn) / (2 * h)
        an = gblock[idx]
        denom = max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12)
        worst[name] = np.linalg.norm(an - fd) / denom
    return worst


@pytest.mark.parametrize("spec", [SMALL, SPEC], ids=["small", "default"])
def test_gradient_finite_differences(spec):
    rng = np.random.default_rng(20)
    ls = LossSpec(clip=0.2, vf_coef=0.5, ent_coef=0.01)
    n_batches = 20 if spec is SMALL else 3
    for b in range(n_batches):
        p = random_params(spec, 100 + b)
        mb = random_minibatch(p, rng)
        worst = fd_check(p, mb, ls, rng)
        bad = {k: v for k, v in worst.items() if v > 1e-4}
        assert not bad, bad


def test_zero_signal_zero_gradient():
    p = random_params(SMALL, 1)
    rng = np.random.default_rng(1)
    mb = random_minibatch(p, rng)
    mb.advantages[:] = 0
    mb.returns = forward(p, mb.obs)[1]
    grads, _ = backward(p, mb, LossSpec(ent_coef=0.0))
    assert np.all(grads.flat == 0)


def test_value_coef_linear():
    p = random_params(SMALL, 2)
    mb = random_minibatch(p, np.random.default_rng(2))
    mb.advantages[:] = 0
    g1, _ = backward(p, mb, LossSpec(vf_coef=0.5))
    g2, _ = backward(p, mb, LossSpec(vf_coef=1.0))
    for name in ("critic.out.W", "critic.0.W", "shared.0.W"):
        assert np.allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=0)


def test_ratio_one_surrogate():
    p = random_params(SMALL, 3)
    mb = random_minibatch(p, np.random.default_rng(3), spread=0.0)
    _, stats = backward(p, mb, LossSpec(vf_coef=0.0))
    assert stats["clip_fraction"] == 0
    assert stats["policy_loss"] == pytest.approx(-mb.advantages.mean(), abs=1e-12)


def test_float32_gradient_close_to_float64():
    p64 = random_params(SMALL, 4)
    mb = random_minibatch(p64, np.random.default_rng(4))
    g64, _ = backward(p64, mb)
    g32, _ = backward(p64.astype(np.float32), mb)
    assert g32.dtype == np.float32
    assert np.linalg.norm(g32.flat - g64.flat) / np.linalg.norm(g64.flat) < 1e-3


# --- checkpoints ---

def test_checkpoint_round_trip(tmp_path):
    p = init_params(SPEC, seed=9)
    path = tmp_path / "a.ckpt"
    save_checkpoint(p, path, metadata={"note": "x"})
    q, meta = load_checkpoint(path, with_metadata=True)
    assert meta == {"note": "x"}
    assert q.spec == p.spec and np.array_equal(q.flat, p.flat) and q.dtype == p.dtype
    save_checkpoint(q, tmp_path / "b.ckpt", metadata={"note": "x"})
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_zero_net_forward(tmp_path):
    p = PolicyParams(SPEC)
    save_checkpoint(p, tmp_path / "z.ckpt")
    q = load_checkpoint(tmp_path / "z.ckpt")
    obs = random_obs(np.random.default_rng(0), 3)
    for a, b in zip(forward(p, obs), forward(q, obs)):
        assert np.array_equal(a, b)


def test_checkpoint_mismatch_and_corrupt(tmp_path):
    p = init_params(SMALL)
    data = checkpoint_bytes(p)
    with pytest.raises(ShapeMismatch):
        parse_checkpoint(data, expected_spec=NetworkSpec(input_dim=100))
    with pytest.raises(CorruptCheckpoint):
        parse_checkpoint(b"XXXXXXXX" + data[8:])
    with pytest.raises(CorruptCheckpoint):
        parse_checkpoint(data[:-4])


def test_checkpoint_float64(tmp_path):
    p = random_params(SMALL, 0)
    save_checkpoint(p, tmp_path / "d.ckpt")
    q = load_checkpoint(tmp_path / "d.ckpt")
    assert q.dtype == np.float64 and np.array_equal(q.flat, p.flat)

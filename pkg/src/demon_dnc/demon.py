"""The memory demon: a squashed-Gaussian policy that adds an encoding to each
controller input, rewarded with per-step mutual information of consecutive
memory snapshots and trained with PPO.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .mine import MineEstimator, Standardizer

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    action_scale: float = 0.1
    hidden: int = 64
    log_std_init: float = float(np.log(0.5))
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    max_grad_norm: float = 10.0

    def validate(self) -> "PpoConfig":
        if not 0.0 < self.clip < 1.0:
            raise ValueError("PPO clip must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be >= 1")
        if self.action_scale <= 0:
            raise ValueError("action_scale must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def state_encode(x: np.ndarray, M: np.ndarray, standardizer: Standardizer | None = None) -> np.ndarray:
    """[x ; flatten(M)] with the memory part optionally standardized.

    Accepts a single (input_dim,), (N, W) pair or batches (B, input_dim), (B, N, W).
    """
    x, M = np.asarray(x), np.asarray(M)
    single = x.ndim == 1
    if single:
        x, M = x[None], M[None]
    if M.ndim != 3 or M.shape[0] != x.shape[0]:
        raise ValueError(f"state_encode: memory shape {M.shape} does not match inputs {x.shape}")
    flat = M.reshape(M.shape[0], -1)
    if standardizer is not None:
        if standardizer.dim != flat.shape[1]:
            raise ValueError("standardizer width does not match N*W")
        flat = standardizer(flat)
    s = np.concatenate([x, flat], axis=1)
    return s[0] if single else s


def _log1m_tanh2(raw: np.ndarray) -> np.ndarray:
    """log(1 - tanh(raw)^2), stable for large |raw|."""
    return 2.0 * (np.log(2.0) - raw - np.logaddexp(0.0, -2.0 * raw))


def squashed_log_prob(raw: np.ndarray, mean: np.ndarray, log_std: np.ndarray, scale: float) -> np.ndarray:
    """Log-density of a = scale * tanh(raw), raw ~ Normal(mean, exp(log_std)), summed over dims."""
    z = (raw - mean) * np.exp(-log_std)
    gauss = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    return (gauss - np.log(scale) - _log1m_tanh2(raw)).sum(-1)


class _MLP:
    def __init__(self, store: dc.ParameterStore, prefix: str, sizes: list, rng: np.random.Generator,
                 out_scale: float = 1.0):
        self.store, self.prefix, self.n = store, prefix, len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = out_scale if i == self.n - 1 else 1.0
            store.add(f"{prefix}{i}/w", rng.normal(0, 1, (a, b)) * scale / np.sqrt(a))
            store.add(f"{prefix}{i}/b", np.zeros(b))

    def __call__(self, x) -> dc.Tensor:
        h = dc.as_tensor(x)
        for i in range(self.n):
            h = dc.linear(h, self.store[f"{self.prefix}{i}/w"], self.store[f"{self.prefix}{i}/b"])
            if i < self.n - 1:
                h = dc.tanh(h)
        return h


class DemonPolicy:
    """Gaussian policy over pre-squash actions with a state-independent log std."""

    def __init__(self, state_dim: int, action_dim: int, cfg: PpoConfig, rng: np.random.Generator,
                 dtype=np.float64):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.cfg = cfg
        self.scale = float(cfg.action_scale)
        self.params = dc.ParameterStore(dtype)
        self.mean_net = _MLP(self.params, "mean", [state_dim, cfg.hidden, action_dim], rng, out_scale=0.01)
        self.params.add("log_std", np.full(action_dim, cfg.log_std_init))

    @property
    def log_std(self) -> dc.Tensor:
        return self.params["log_std"]

    def mean(self, states) -> dc.Tensor:
        return self.mean_net(dc.as_tensor(states, dtype=self.params.dtype))

    def act(self, states: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False):
        """Returns (action, raw, logp). ``deterministic`` gives a = scale * tanh(mean)."""
        with dc.no_grad():
            mu = self.mean(np.asarray(states, dtype=self.params.dtype)).data.astype(np.float64)
        log_std = self.log_std.data.astype(np.float64)
        if deterministic:
            raw = mu
        else:
            raw = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        a = self.scale * np.tanh(raw)
        return a, raw, squashed_log_prob(raw, mu, log_std, self.scale)

    def log_prob(self, states, raw: np.ndarray) -> dc.Tensor:
        """Differentiable log-density of stored raw actions (tanh correction included)."""
        mu = self.mean(states)
        log_std = self.log_std
        inv_std = dc.exp(-log_std)
        z = (dc.constant(raw.astype(self.params.dtype)) - mu) * inv_std
        gauss = dc.square(z) * -0.5 - log_std - 0.5 * LOG_2PI
        correction = np.log(self.scale) + _log1m_tanh2(raw)
        return dc.tsum(gauss, axis=-1) - correction.sum(-1).astype(self.params.dtype)

    def entropy(self) -> dc.Tensor:
        """Entropy of the pre-squash Gaussian (per sample, state independent)."""
        return dc.tsum(self.log_std) + self.action_dim * 0.5 * (1.0 + LOG_2PI)

    def clamp_log_std(self) -> None:
        p = self.log_std
        p.data = np.clip(p.data, self.cfg.log_std_min, self.cfg.log_std_max).astype(p.dtype)


class ValueNetwork:
    def __init__(self, state_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.params = dc.ParameterStore(dtype)
        self.net = _MLP(self.params, "v", [state_dim, hidden, 1], rng)

    def __call__(self, states) -> dc.Tensor:
        out = self.net(dc.as_tensor(states, dtype=self.params.dtype))
        return dc.reshape(out, (-1,))

    def predict(self, states: np.ndarray) -> np.ndarray:
        with dc.no_grad():
            return self(states).data.astype(np.float64)


class RolloutBuffer:
    """Flat list of demon steps; ``done`` marks the last step of an episode."""

    def __init__(self):
        self.states, self.raw, self.logp, self.values, self.dones, self.rewards = [], [], [], [], [], []
        self._frozen = None

    def __len__(self) -> int:
        return len(self.logp)

    def add(self, state, raw, logp: float, value: float, done: bool, reward: float | None = None) -> None:
        if not np.isfinite(logp):
            raise ValueError("non-finite behaviour log-probability")
        self.states.append(np.asarray(state, dtype=np.float64))
        self.raw.append(np.asarray(raw, dtype=np.float64))
        self.logp.append(float(logp))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.rewards.append(reward)
        self._frozen = None

    def set_rewards(self, rewards) -> None:
        rewards = list(map(float, rewards))
        if len(rewards) != len(self):
            raise ValueError(f"{len(rewards)} rewards for {len(self)} steps")
        self.rewards = rewards
        self._frozen = None

    def arrays(self) -> dict:
        """Read-only arrays; behaviour log-probs cannot be mutated downstream."""
        if self._frozen is None:
            if any(r is None for r in self.rewards):
                raise ValueError("rewards missing for some buffered steps")
            out = {
                "states": np.stack(self.states), "raw": np.stack(self.raw),
                "logp": np.array(self.logp), "values": np.array(self.values),
                "dones": np.array(self.dones), "rewards": np.array(self.rewards, dtype=np.float64),
            }
            for arr in out.values():
                arr.flags.writeable = False
            self._frozen = out
        return self._frozen


class RunningMeanStd:
    def __init__(self):
        self.count = 0.0
        self.mean = 0.0
        self.var = 1.0

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        bm, bv, n = x.mean(), x.var(), x.size
        tot = self.count + n
        delta = bm - self.mean
        m2 = self.var * self.count + bv * n + delta * delta * self.count * n / tot
        self.mean += delta * n / tot
        self.var = m2 / tot
        self.count = tot

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8)


def pairwise_scores(est: MineEstimator, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """T(x_i, y_i) and the full matrix T(x_i, y_j).

    The first layer splits into an x-part and a y-part, so all n^2 pairs cost
    one hidden-layer pass each, not a full forward.
    """
    net = est.net
    p = {k: v.data.astype(np.float64) for k, v in net.params.items()}
    act = np.tanh if net.activation == "tanh" else (lambda h: np.maximum(h, 0.0))
    w0 = p["l0/w"]
    ax = x @ w0[:net.x_dim]
    cy = y @ w0[net.x_dim:] + p["l0/b"]
    h = act(ax[:, None, :] + cy[None, :, :])
    for i in range(1, net.n_hidden):
        h = act(h @ p[f"l{i}/w"] + p[f"l{i}/b"])
    t_all = (h @ p["out/w"])[..., 0] + p["out/b"][0]
    return np.diagonal(t_all).copy(), t_all


def reward_from_mi(est: MineEstimator, x: np.ndarray, y: np.ndarray,
                   normalizer: RunningMeanStd | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-step DV contributions T(x_t, y_t) - log mean_{i,j} exp T(x_i, y_j).

    The marginal term averages over every cross pairing in the window, i.e.
    the expectation over uniform shufflings. Returns (raw, standardized);
    the normalizer is updated with the raw rewards before standardizing.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[0] < 2 or x.shape[0] != y.shape[0]:
        raise ValueError("reward window needs at least 2 matched pairs")
    t_joint, t_all = pairwise_scores(est, x, y)
    raw = t_joint - float(dc.logmeanexp(t_all.ravel()))
    if normalizer is None:
        return raw, raw.copy()
    normalizer.update(raw)
    return raw, normalizer.standardize(raw)


def gae(rewards, values, bootstrap_value: float, gamma: float, lam: float, dones=None):
    """Generalized advantage estimates and returns; no bootstrapping past a done step."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in length")
    d = np.zeros(r.shape, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    if d.shape != r.shape:
        raise ValueError("dones must match rewards in length")
    n = r.shape[0]
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if d[t]:
            next_v, running = 0.0, 0.0
        else:
            next_v = v[t + 1] if t + 1 < n else bootstrap_value
        delta = r[t] + gamma * next_v - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def ppo_clip_loss(logp_new, logp_old: np.ndarray, advantages: np.ndarray, eps: float) -> dc.Tensor:
    """-mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)), rho = exp(new - old)."""
    new = dc.as_tensor(logp_new)
    old = np.asarray(logp_old, dtype=np.float64)
    A = np.asarray(advantages, dtype=np.float64)
    rho = np.exp(new.data.astype(np.float64) - old)
    unclipped = rho * A
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * A
    active = unclipped <= clipped
    n = A.size
    out = np.asarray(-np.minimum(unclipped, clipped).mean(), dtype=new.dtype)

    def back(g):
        return ((-g / n) * np.where(active, unclipped, 0.0).astype(new.dtype),)

    return dc.make_node(out, (new,), back)


def ppo_update(policy: DemonPolicy, value_net: ValueNetwork, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO over ``cfg.epochs`` shuffled minibatch passes."""
    if len(buffer) == 0:
        raise ValueError("PPO update on an empty buffer")
    data = buffer.arrays()
    adv, returns = gae(data["rewards"], data["values"], 0.0, cfg.gamma, cfg.lam, data["dones"])
    adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    n = len(buffer)
    mb = min(cfg.minibatch, n)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "ratio": [], "clip_frac": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            states = data["states"][idx]
            logp_new = policy.log_prob(states, data["raw"][idx])
            pl = ppo_clip_loss(logp_new, data["logp"][idx], adv[idx], cfg.clip)
            v = value_net(states)
            vl = dc.mean(dc.square(v - returns[idx].astype(value_net.params.dtype)))
            ent = policy.entropy()
            loss = pl + vl * cfg.value_coef - ent * cfg.entropy_coef
            policy.params.zero_grad()
            value_net.params.zero_grad()
            dc.backward(loss)
            policy.params.clip_grad_norm(cfg.max_grad_norm)
            value_net.params.clip_grad_norm(cfg.max_grad_norm)
            dc.adam_step(policy.params, cfg.lr)
            dc.adam_step(value_net.params, cfg.lr)
            policy.clamp_log_std()
            rho = np.exp(logp_new.data.astype(np.float64) - data["logp"][idx])
            stats["policy_loss"].append(float(pl.data))
            stats["value_loss"].append(float(vl.data))
            stats["entropy"].append(float(ent.data))
            stats["ratio"].append(float(rho.mean()))
            stats["clip_frac"].append(float((np.abs(rho - 1.0) > cfg.clip).mean()))
    return {k: float(np.mean(v)) for k, v in stats.items()}

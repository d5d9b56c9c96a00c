"""Self-check suites shared by the CLI and the acceptance tests."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import diffcore as dc
from .. import dnc
from ..demon import DemonPolicy, PpoConfig, RolloutBuffer, ValueNetwork, ppo_update

GRAD_TOL = 1e-4


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    """(name, forward, leaves) triples over small random float64 operands."""

    def P(*shape, lo=None, name=None):
        a = rng.normal(size=shape) if lo is None else rng.uniform(lo, 1.0, size=shape)
        return dc.Tensor(a, requires_grad=True, name=name)

    def away_from_zero(*shape):
        a = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return dc.Tensor(a, requires_grad=True)

    cases = []
    a, b = P(3, 4), P(3, 4)
    pos = P(3, 4, lo=0.5)
    row = P(4)
    cases += [
        ("add", lambda: a + row, [a, row]),
        ("sub", lambda: a - b, [a, b]),
        ("mul", lambda: a * row, [a, row]),
        ("div", lambda: a / pos, [a, pos]),
        ("neg", lambda: -a, [a]),
        ("sigmoid", lambda: dc.sigmoid(a), [a]),
        ("tanh", lambda: dc.tanh(a), [a]),
        ("exp", lambda: dc.exp(a), [a]),
        ("log", lambda: dc.log(pos), [pos]),
        ("square", lambda: dc.square(a), [a]),
        ("softplus", lambda: dc.softplus(a), [a]),
        ("oneplus", lambda: dc.oneplus(a), [a]),
    ]
    nz = away_from_zero(3, 4)
    cases.append(("relu", lambda: dc.relu(nz), [nz]))
    x3, m3 = P(2, 3, 4), P(2, 4, 5)
    w, bias = P(4, 5), P(5)
    cases += [
        ("matmul", lambda: dc.matmul(x3, m3), [x3, m3]),
        ("linear", lambda: dc.linear(a, w, bias), [a, w, bias]),
        ("tsum", lambda: dc.tsum(x3, axis=1, keepdims=True), [x3]),
        ("mean", lambda: dc.mean(x3, axis=-1), [x3]),
        ("reshape", lambda: dc.reshape(x3, (6, 4)), [x3]),
        ("swapaxes", lambda: dc.swapaxes(x3), [x3]),
        ("getitem", lambda: dc.getitem(a, np.array([0, 2, 0])), [a]),
        ("concat", lambda: dc.concat([a, b], -1), [a, b]),
        ("stack", lambda: dc.stack([a, b], 0), [a, b]),
        ("softmax", lambda: dc.softmax(x3, -1), [x3]),
        ("softmax_rows", lambda: dc.softmax_rows(a), [a]),
        ("log_softmax", lambda: dc.log_softmax(x3, -1), [x3]),
    ]
    M, k = P(2, 5, 3), P(2, 2, 3)
    cases.append(("cosine_rows", lambda: dc.cosine_rows(M, k), [M, k]))
    logits = P(3, 4)
    bits = (rng.random((3, 4)) > 0.5).astype(float)
    wts = rng.random((3, 4))
    ids = rng.integers(0, 4, size=3)
    cases += [
        ("bernoulli_xent", lambda: dc.bernoulli_xent(logits, bits, wts), [logits]),
        ("softmax_xent", lambda: dc.softmax_xent(logits, ids, wts[:, 0]), [logits]),
    ]

    B, N, W, R = 2, 5, 3, 2
    beta, mask = P(B, R, lo=1.0), P(B, R, W, lo=0.0)
    f, wr = P(B, R, lo=0.0), P(B, R, N, lo=0.0)
    u, ww, psi = P(B, N, lo=0.0), P(B, N, lo=0.0), P(B, N, lo=0.0)
    gw, ga, alloc, cw = P(B, 1, lo=0.0), P(B, 1, lo=0.0), P(B, N, lo=0.0), P(B, N, lo=0.0)
    e, v = P(B, W, lo=0.0), P(B, W)
    L, p = P(B, N, N, lo=0.0), P(B, N, lo=0.0)
    cr, modes = P(B, R, N, lo=0.0), P(B, R, 3, lo=0.0)
    sf, sb = P(B, R, lo=1.0), P(B, R, lo=1.0)
    z, c = P(B, 12), P(B, 3)
    cases += [
        ("content_weighting", lambda: dnc.content_weighting(M, k, beta, mask), [M, k, beta, mask]),
        ("retention", lambda: dnc.retention(f, wr), [f, wr]),
        ("usage", lambda: dnc.usage_from_retention(u, ww, psi), [u, ww, psi]),
        ("allocation_weighting", lambda: dnc.allocation_weighting(u), [u]),
        ("write_weighting", lambda: dnc.write_weighting(gw, ga, alloc, cw), [gw, ga, alloc, cw]),
        ("memory_write", lambda: dnc.memory_write(M, ww, e, v, psi, dealloc=True), [M, ww, e, v, psi]),
        ("link_matrix", lambda: dnc.link_matrix(L, p, ww), [L, p, ww]),
        ("precedence", lambda: dnc.precedence(p, ww), [p, ww]),
        ("read_weighting", lambda: dnc.read_weighting(L, wr, cr, modes, (sf, sb)), [L, wr, cr, modes, sf, sb]),
        ("lstm_cell", lambda: dnc.lstm_cell(z, c), [z, c]),
    ]
    return cases


def _weighted(fn: Callable, rng: np.random.Generator) -> Callable:
    """Scalarize ``fn()`` with a fixed random projection."""
    proj = {}

    def loss():
        out = fn()
        if out.ndim == 0:
            return out
        if "w" not in proj:
            proj["w"] = rng.normal(size=out.shape)
        return dc.tsum(out * proj["w"])

    return loss


def full_step_case(seed: int, steps: int = 3):
    """Loss over a few DNC steps with every toggle on; returns (loss_fn, store)."""
    rng = np.random.default_rng(seed)
    cfg = dnc.DncConfig(input_dim=3, output_dim=2, N=4, W=3, R=1, hidden=8,
                        mask=True, dealloc=True, sharpness=True)
    store = dnc.init_parameters(cfg, rng, np.float64)
    # nonzero biases so gates are away from their symmetric starting points
    for name, prm in store.items():
        if name.endswith("/b"):
            prm.data += rng.normal(0, 0.5, prm.data.shape)
    xs = rng.normal(size=(steps, 2, cfg.input_dim))
    proj = rng.normal(size=(steps, 2, cfg.output_dim))

    def loss():
        state = dnc.initial_state(cfg, 2, np.float64)
        total = None
        for t in range(steps):
            state, y, _ = dnc.step(state, xs[t], store, cfg)
            term = dc.tsum(y * proj[t]) + dc.tsum(state.r) + dc.tsum(state.M * 0.1)
            total = term if total is None else total + term
        return total

    return loss, store


def grad_check_suite(seeds=(0, 1, 2), tol: float = GRAD_TOL) -> list[dict]:
    """Finite-difference check of every op and a full DNC step, per seed."""
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, fn, leaves in _cases(rng):
            errs = dc.gradient_check(_weighted(fn, rng), leaves)
            worst = max(errs.values())
            rows.append({"name": name, "seed": seed, "relerr": worst, "tol": tol, "passed": worst <= tol})
        loss, store = full_step_case(seed)
        errs = dc.gradient_check(loss, store)
        worst = max(errs.values())
        rows.append({"name": "dnc.step", "seed": seed, "relerr": worst, "tol": tol, "passed": worst <= tol})
    return rows


def ppo_target_sanity(seed: int = 0, updates: int = 200, batch: int = 128) -> dict:
    """Stateless target environment with reward -||a - c||^2.

    Returns mean reward over the first and last five updates and the relative
    improvement of the latter over the former.
    """
    rng = np.random.default_rng(seed)
    cfg = PpoConfig(action_scale=1.0, lr=3e-3)
    policy = DemonPolicy(4, 2, cfg, rng)
    value = ValueNetwork(4, 16, rng)
    target = np.array([0.5, -0.3])
    states = np.zeros((batch, 4))
    history = []
    for _ in range(updates):
        a, raw, logp = policy.act(states, rng)
        v = value.predict(states)
        r = -((a - target) ** 2).sum(1)
        buf = RolloutBuffer()
        for i in range(batch):
            buf.add(states[i], raw[i], logp[i], v[i], True, r[i])
        ppo_update(policy, value, buf, cfg, rng)
        history.append(float(r.mean()))
    first, last = float(np.mean(history[:5])), float(np.mean(history[-5:]))
    return {"first": first, "last": last, "improvement": (last - first) / abs(first), "history": history}

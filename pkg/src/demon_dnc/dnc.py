"""Differentiable neural computer cell with the mask / de-allocation /
sharpness variants.

All tensors are batch-first: memory ``M`` is ``(B, N, W)``, usage ``(B, N)``,
read weightings ``(B, R, N)``. Each memory operation is a single autodiff node
with an analytic gradient; the unit tests check every one of them against
central finite differences.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, make_node

SHARPEN_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class DncConfig:
    input_dim: int
    output_dim: int
    N: int = 16
    W: int = 16
    R: int = 1
    hidden: int = 64
    depth: int = 1
    mask: bool = False
    dealloc: bool = False
    sharpness: bool = False

    def validate(self) -> "DncConfig":
        for name in ("input_dim", "output_dim", "N", "W", "R", "hidden", "depth"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"DncConfig.{name} must be >= 1, got {getattr(self, name)}")
        return self

    @property
    def variant(self) -> str:
        flags = "".join(c for c, on in (("M", self.mask), ("D", self.dealloc), ("S", self.sharpness)) if on)
        return "DNC" + (f"-{flags}" if flags else "")

    def interface_layout(self) -> list[tuple[str, int]]:
        """Field order of the interface vector; masks and sharpness only when toggled."""
        R, W = self.R, self.W
        layout = [
            ("read_keys", R * W),
            ("read_strengths", R),
            ("write_key", W),
            ("write_strength", 1),
            ("erase", W),
            ("write_vector", W),
            ("free_gates", R),
            ("alloc_gate", 1),
            ("write_gate", 1),
            ("read_modes", 3 * R),
        ]
        if self.mask:
            layout += [("read_masks", R * W), ("write_mask", W)]
        if self.sharpness:
            layout += [("sharp_forward", R), ("sharp_backward", R)]
        return layout

    @property
    def interface_size(self) -> int:
        return sum(n for _, n in self.interface_layout())

    def to_dict(self) -> dict:
        return asdict(self)


# field name -> (nonlinearity, per-sample shape builder)
_FIELD_KIND = {
    "read_keys": "id", "read_strengths": "oneplus", "write_key": "id", "write_strength": "oneplus",
    "erase": "sigmoid", "write_vector": "id", "free_gates": "sigmoid", "alloc_gate": "sigmoid",
    "write_gate": "sigmoid", "read_modes": "softmax3", "read_masks": "sigmoid", "write_mask": "sigmoid",
    "sharp_forward": "oneplus", "sharp_backward": "oneplus",
}


def _field_shape(name: str, cfg: DncConfig) -> tuple:
    R, W = cfg.R, cfg.W
    return {
        "read_keys": (R, W), "read_strengths": (R,), "write_key": (1, W), "write_strength": (1,),
        "erase": (W,), "write_vector": (W,), "free_gates": (R,), "alloc_gate": (1,), "write_gate": (1,),
        "read_modes": (R, 3), "read_masks": (R, W), "write_mask": (1, W),
        "sharp_forward": (R,), "sharp_backward": (R,),
    }[name]


@dataclass
class InterfaceVector:
    read_keys: Tensor          # (B, R, W)
    read_strengths: Tensor     # (B, R)
    write_key: Tensor          # (B, 1, W)
    write_strength: Tensor     # (B, 1)
    erase: Tensor              # (B, W)
    write_vector: Tensor       # (B, W)
    free_gates: Tensor         # (B, R)
    alloc_gate: Tensor         # (B, 1)
    write_gate: Tensor         # (B, 1)
    read_modes: Tensor         # (B, R, 3): backward, content, forward
    read_masks: Optional[Tensor] = None
    write_mask: Optional[Tensor] = None
    sharp_forward: Optional[Tensor] = None
    sharp_backward: Optional[Tensor] = None

    def replace(self, **changes) -> "InterfaceVector":
        return replace(self, **changes)


class _ActivationPlan:
    def __init__(self, cfg: DncConfig):
        sig, op, modes = [], [], []
        pos = 0
        for name, n in cfg.interface_layout():
            kind = _FIELD_KIND[name]
            idx = list(range(pos, pos + n))
            if kind == "sigmoid":
                sig += idx
            elif kind == "oneplus":
                op += idx
            elif kind == "softmax3":
                modes = idx
            pos += n
        self.sigmoid = np.array(sig, dtype=np.intp)
        self.oneplus = np.array(op, dtype=np.intp)
        self.modes = slice(modes[0], modes[-1] + 1)
        self.R = cfg.R


def _interface_activations(xi: Tensor, plan: _ActivationPlan) -> Tensor:
    x = xi.data
    out = x.copy()
    s = dc._sigmoid(x[:, plan.sigmoid])
    out[:, plan.sigmoid] = s
    xo = x[:, plan.oneplus]
    out[:, plan.oneplus] = 1.0 + np.logaddexp(0.0, xo)
    B = x.shape[0]
    pm = dc._softmax_np(x[:, plan.modes].reshape(B, plan.R, 3), -1)
    out[:, plan.modes] = pm.reshape(B, -1)

    def back(g):
        gx = g.copy()
        gx[:, plan.sigmoid] = g[:, plan.sigmoid] * s * (1.0 - s)
        gx[:, plan.oneplus] = g[:, plan.oneplus] * dc._sigmoid(xo)
        gm = g[:, plan.modes].reshape(B, plan.R, 3)
        gx[:, plan.modes] = (pm * (gm - (gm * pm).sum(-1, keepdims=True))).reshape(B, -1)
        return (gx,)

    return make_node(out, (xi,), back)


def _segment(t: Tensor, start: int, stop: int, shape: tuple) -> Tensor:
    B = t.shape[0]
    full_shape, dtype = t.shape, t.dtype

    def back(g):
        full = np.zeros(full_shape, dtype=dtype)
        full[:, start:stop] = g.reshape(B, -1)
        return (full,)

    return make_node(t.data[:, start:stop].reshape((B,) + shape), (t,), back)


def parse_interface(xi, cfg: DncConfig) -> InterfaceVector:
    """Slice and squash a raw interface emission ``(B, X)`` or ``(X,)``.

    Keys and the write vector pass through; strengths and sharpness
    exponents go through oneplus; gates, erase and masks through a sigmoid;
    read modes through a softmax over the three modes.
    """
    xi = dc.as_tensor(xi)
    if xi.ndim == 1:
        xi = dc.reshape(xi, (1, xi.shape[0]))
    if xi.shape[-1] != cfg.interface_size:
        raise ConfigError(f"interface length {xi.shape[-1]} != {cfg.interface_size} required by config")
    act = _interface_activations(xi, _plan_for(cfg))
    fields = {}
    pos = 0
    for name, n in cfg.interface_layout():
        fields[name] = _segment(act, pos, pos + n, _field_shape(name, cfg))
        pos += n
    return InterfaceVector(**fields)


_PLANS: dict = {}


def _plan_for(cfg: DncConfig) -> _ActivationPlan:
    key = (cfg.R, cfg.W, cfg.mask, cfg.sharpness)
    plan = _PLANS.get(key)
    if plan is None:
        plan = _PLANS[key] = _ActivationPlan(cfg)
    return plan


# ---------------------------------------------------------------------------
# addressing


def content_weighting(M, k, beta, mask=None) -> Tensor:
    """softmax_N(beta * cos(M[n] * mask, k * mask)) for H keys at once.

    M: (B, N, W); k: (B, H, W); beta: (B, H); mask: (B, H, W) or None.
    Returns (B, H, N).
    """
    M, k, beta = dc.as_tensor(M), dc.as_tensor(k), dc.as_tensor(beta)
    Md, kd, bd = M.data, k.data, beta.data
    if mask is None:
        md = None
        Mm = Md[:, None]
        km = kd
    else:
        mask = dc.as_tensor(mask)
        md = mask.data
        Mm = Md[:, None] * md[:, :, None, :]
        km = kd * md
    dot = (Mm @ km[..., None])[..., 0]
    nM = np.sqrt((Mm * Mm).sum(-1))
    nk = np.sqrt((km * km).sum(-1))[..., None]
    den = nM * nk + dc.COSINE_EPS
    cos = dot / den
    w = dc._softmax_np(bd[..., None] * cos, -1)

    def back(g):
        gz = w * (g - (g * w).sum(-1, keepdims=True))
        gbeta = (gz * cos).sum(-1)
        gcos = gz * bd[..., None]
        gdot = gcos / den
        gden = -gcos * cos / den
        gnM = gden * nk
        gnk = (gden * nM).sum(-1, keepdims=True)
        unitM = np.divide(Mm, nM[..., None], out=np.zeros(Mm.shape, Md.dtype), where=nM[..., None] > 0)
        unitk = np.divide(km, nk, out=np.zeros_like(km), where=nk > 0)
        gMm = gdot[..., None] * km[:, :, None, :] + gnM[..., None] * unitM
        gkm = (gdot[:, :, None, :] @ Mm)[:, :, 0, :] + gnk * unitk
        if md is None:
            return gMm.sum(1), gkm, gbeta
        gM = (gMm * md[:, :, None, :]).sum(1)
        gmask = (gMm * Md[:, None]).sum(2) + gkm * kd
        return gM, gkm * md, gbeta, gmask

    parents = (M, k, beta) if mask is None else (M, k, beta, mask)
    return make_node(w, parents, back)


def _exclusive_cumprod(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    out = np.ones_like(x)
    np.cumprod(x[..., :-1], axis=-1, out=out[..., 1:])
    return np.moveaxis(out, -1, axis)


def retention(free_gates, w_r_prev) -> Tensor:
    """psi = prod_h (1 - f_h * w_r_prev_h), (B, N)."""
    f, w = dc.as_tensor(free_gates), dc.as_tensor(w_r_prev)
    fd, wd = f.data, w.data
    t = 1.0 - fd[..., None] * wd
    psi = t.prod(axis=1)

    def back(g):
        before = _exclusive_cumprod(t, 1)
        after = _exclusive_cumprod(t[:, ::-1], 1)[:, ::-1]
        gt = g[:, None, :] * before * after
        return -(gt * wd).sum(-1), -gt * fd[..., None]

    return make_node(psi, (f, w), back)


def usage_from_retention(u_prev, w_w_prev, psi) -> Tensor:
    u0, ww, ps = dc.as_tensor(u_prev), dc.as_tensor(w_w_prev), dc.as_tensor(psi)
    ud, wd, pd = u0.data, ww.data, ps.data
    s = ud + wd - ud * wd
    u = s * pd

    def back(g):
        gs = g * pd
        return gs * (1.0 - wd), gs * (1.0 - ud), g * s

    return make_node(u, (u0, ww, ps), back)


def usage_update(u_prev, w_w_prev, w_r_prev, free_gates) -> tuple[Tensor, Tensor]:
    """Returns (usage, retention psi)."""
    psi = retention(free_gates, w_r_prev)
    return usage_from_retention(u_prev, w_w_prev, psi), psi


def allocation_weighting(u) -> Tensor:
    """a[phi_j] = (1 - u[phi_j]) * prod_{l<j} u[phi_l] with phi a stable ascending sort.

    The permutation is held constant in the backward pass.
    """
    u = dc.as_tensor(u)
    ud = u.data
    squeeze = ud.ndim == 1
    if squeeze:
        ud = ud[None]
    order = np.argsort(ud, axis=-1, kind="stable")
    s = np.take_along_axis(ud, order, -1)
    cp = _exclusive_cumprod(s, -1)
    a_sorted = (1.0 - s) * cp
    a = np.empty_like(ud)
    np.put_along_axis(a, order, a_sorted, -1)
    N = ud.shape[-1]

    def back(g):
        g2 = g[None] if squeeze else g
        gas = np.take_along_axis(g2, order, -1)
        k_idx = np.arange(N)
        later = k_idx[None, :] > k_idx[:, None]  # [k, l]: l > k
        X = np.where(later[None], s[:, None, :], 1.0)
        Ex = _exclusive_cumprod(X, -1)
        inner = ((Ex * later[None]) * (gas * (1.0 - s))[:, None, :]).sum(-1)
        gs = cp * (inner - gas)
        gu = np.empty_like(gs)
        np.put_along_axis(gu, order, gs, -1)
        return (gu[0] if squeeze else gu,)

    return make_node(a[0] if squeeze else a, (u,), back)


def write_weighting(write_gate, alloc_gate, a, c_w) -> Tensor:
    """w_w = g_w * (g_a * a + (1 - g_a) * c_w); gates (B, 1), weightings (B, N)."""
    gw, ga, al, cw = (dc.as_tensor(x) for x in (write_gate, alloc_gate, a, c_w))
    gwd, gad, ad, cd = gw.data, ga.data, al.data, cw.data
    mix = gad * ad + (1.0 - gad) * cd

    def back(g):
        gi = g * gwd
        return (
            dc.unbroadcast(g * mix, gwd.shape).reshape(gwd.shape),
            dc.unbroadcast(gi * (ad - cd), gad.shape).reshape(gad.shape),
            gi * gad,
            gi * (1.0 - gad),
        )

    return make_node(gwd * mix, (gw, ga, al, cw), back)


def memory_write(M_prev, w_w, erase, v, psi=None, dealloc: bool = False) -> Tensor:
    """M = M0 * (1 - w_w e^T) + w_w v^T, where M0 = M_prev scaled rowwise by psi
    when de-allocation is on, else M_prev."""
    M, w, e, vv = (dc.as_tensor(x) for x in (M_prev, w_w, erase, v))
    Md, wd, ed, vd = M.data, w.data, e.data, vv.data
    use_psi = dealloc and psi is not None
    if dealloc and psi is None:
        raise ValueError("de-allocation needs the retention vector psi")
    if use_psi:
        ps = dc.as_tensor(psi)
        pd = ps.data
        M0 = Md * pd[..., None]
    else:
        M0 = Md
    we = wd[..., None] * ed[:, None, :]
    out = M0 * (1.0 - we) + wd[..., None] * vd[:, None, :]

    def back(G):
        gM0 = G * (1.0 - we)
        gw = (G * (vd[:, None, :] - M0 * ed[:, None, :])).sum(-1)
        ge = -(G * M0 * wd[..., None]).sum(1)
        gv = (G * wd[..., None]).sum(1)
        if use_psi:
            return gM0 * pd[..., None], gw, ge, gv, (gM0 * Md).sum(-1)
        return gM0, gw, ge, gv

    parents = (M, w, e, vv, ps) if use_psi else (M, w, e, vv)
    return make_node(out, parents, back)


def link_matrix(L_prev, p_prev, w_w) -> Tensor:
    L0, p0, w = dc.as_tensor(L_prev), dc.as_tensor(p_prev), dc.as_tensor(w_w)
    Ld, pd, wd = L0.data, p0.data, w.data
    N = wd.shape[-1]
    off = 1.0 - np.eye(N, dtype=Ld.dtype)
    keep = 1.0 - wd[:, :, None] - wd[:, None, :]
    out = (keep * Ld + wd[:, :, None] * pd[:, None, :]) * off

    def back(G):
        G = G * off
        gL = G * keep
        gw = (G * (pd[:, None, :] - Ld)).sum(-1) - (G * Ld).sum(1)
        gp = (G * wd[:, :, None]).sum(1)
        return gL, gp, gw

    return make_node(out, (L0, p0, w), back)


def precedence(p_prev, w_w) -> Tensor:
    p0, w = dc.as_tensor(p_prev), dc.as_tensor(w_w)
    pd, wd = p0.data, w.data
    keep = 1.0 - wd.sum(-1, keepdims=True)

    def back(g):
        return g * keep, g - (g * pd).sum(-1, keepdims=True)

    return make_node(keep * pd + wd, (p0, w), back)


def link_update(L_prev, p_prev, w_w) -> tuple[Tensor, Tensor]:
    """Returns (L, p). L uses the previous precedence; diag(L) is forced to 0."""
    return link_matrix(L_prev, p_prev, w_w), precedence(p_prev, w_w)


def _sharpen_fwd(x: np.ndarray, s: np.ndarray):
    lx = np.log(np.maximum(x, 0.0) + SHARPEN_EPS)
    y = dc._softmax_np(s[..., None] * lx, -1)
    return y, lx


def _sharpen_bwd(gy, y, lx, s):
    gz = y * (gy - (gy * y).sum(-1, keepdims=True))
    gs = (gz * lx).sum(-1)
    gx = gz * s[..., None] / np.exp(lx)
    return gx, gs


def sharpen(x, s) -> Tensor:
    """normalize((x + eps)^s) along the last axis."""
    x, s = dc.as_tensor(x), dc.as_tensor(s)
    y, lx = _sharpen_fwd(x.data, s.data)

    def back(g):
        return _sharpen_bwd(g, y, lx, s.data)

    return make_node(y, (x, s), back)


def read_weighting(L, w_r_prev, c_r, modes, sharp=None) -> Tensor:
    """w_r = pi_b * b + pi_c * c_r + pi_f * f with f = L w_r_prev, b = L^T w_r_prev.

    ``sharp`` is ``(s_forward, s_backward)``, each (B, R), or None.
    """
    Lt, w0, c, pi = (dc.as_tensor(x) for x in (L, w_r_prev, c_r, modes))
    Ld, wd, cd, pid = Lt.data, w0.data, c.data, pi.data
    f = wd @ np.swapaxes(Ld, -1, -2)
    b = wd @ Ld
    parents = [Lt, w0, c, pi]
    if sharp is not None:
        sf, sb = dc.as_tensor(sharp[0]), dc.as_tensor(sharp[1])
        fs, lf = _sharpen_fwd(f, sf.data)
        bs, lb = _sharpen_fwd(b, sb.data)
        parents += [sf, sb]
    else:
        fs, bs = f, b
    out = pid[..., 0:1] * bs + pid[..., 1:2] * cd + pid[..., 2:3] * fs

    def back(g):
        gpi = np.stack([(g * bs).sum(-1), (g * cd).sum(-1), (g * fs).sum(-1)], axis=-1)
        gc = g * pid[..., 1:2]
        gb = g * pid[..., 0:1]
        gf = g * pid[..., 2:3]
        extra = ()
        if sharp is not None:
            gf, gsf = _sharpen_bwd(gf, fs, lf, sf.data)
            gb, gsb = _sharpen_bwd(gb, bs, lb, sb.data)
            extra = (gsf, gsb)
        gL = np.swapaxes(gf, -1, -2) @ wd + np.swapaxes(wd, -1, -2) @ gb
        gw = gf @ Ld + gb @ np.swapaxes(Ld, -1, -2)
        return (gL, gw, gc, gpi) + extra

    return make_node(out, parents, back)


# ---------------------------------------------------------------------------
# controller


def lstm_cell(gates, c_prev) -> Tensor:
    """Fused LSTM nonlinearity. gates (B, 4H) ordered i, f, g, o.

    Returns the concatenated state (B, 2H) = [h | c].
    """
    z, c0 = dc.as_tensor(gates), dc.as_tensor(c_prev)
    zd, cd = z.data, c0.data
    H = cd.shape[-1]
    sg = dc._sigmoid(zd[:, [*range(0, 2 * H), *range(3 * H, 4 * H)]])
    i, f, o = sg[:, :H], sg[:, H:2 * H], sg[:, 2 * H:]
    gg = np.tanh(zd[:, 2 * H:3 * H])
    c = f * cd + i * gg
    th = np.tanh(c)
    h = o * th

    def back(G):
        gh, gc = G[:, :H], G[:, H:]
        gc = gc + gh * o * (1.0 - th * th)
        gz = np.empty_like(zd)
        gz[:, :H] = gc * gg * i * (1.0 - i)
        gz[:, H:2 * H] = gc * cd * f * (1.0 - f)
        gz[:, 2 * H:3 * H] = gc * i * (1.0 - gg * gg)
        gz[:, 3 * H:] = gh * th * o * (1.0 - o)
        return gz, gc * f

    return make_node(np.concatenate([h, c], -1), (z, c0), back)


# ---------------------------------------------------------------------------
# state and the full cell


@dataclass
class DncState:
    M: Tensor
    u: Tensor
    p: Tensor
    L: Tensor
    w_w: Tensor
    w_r: Tensor
    r: Tensor
    ctrl: list = field(default_factory=list)  # per layer (B, 2H) = [h | c]

    @property
    def batch(self) -> int:
        return self.M.shape[0]


def initial_state(cfg: DncConfig, batch: int, dtype=np.float64) -> DncState:
    z = lambda *s: dc.constant(np.zeros(s, dtype=dtype))  # noqa: E731
    N, W, R = cfg.N, cfg.W, cfg.R
    return DncState(
        M=z(batch, N, W), u=z(batch, N), p=z(batch, N), L=z(batch, N, N),
        w_w=z(batch, N), w_r=z(batch, R, N), r=z(batch, R, W),
        ctrl=[z(batch, 2 * cfg.hidden) for _ in range(cfg.depth)],
    )


def init_parameters(cfg: DncConfig, rng: np.random.Generator, dtype=np.float64) -> dc.ParameterStore:
    cfg.validate()
    store = dc.ParameterStore(dtype)
    H = cfg.hidden
    fan = cfg.input_dim + cfg.R * cfg.W
    for layer in range(cfg.depth):
        rows = fan + H
        w = rng.uniform(-1, 1, (rows, 4 * H)) / np.sqrt(rows)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        store.add(f"lstm{layer}/w", w)
        store.add(f"lstm{layer}/b", b)
        fan = H
    X = cfg.interface_size
    store.add("interface/w", rng.normal(0, 1, (H, X)) / np.sqrt(H))
    store.add("interface/b", np.zeros(X))
    out_in = H + cfg.R * cfg.W
    store.add("output/w", rng.normal(0, 1, (out_in, cfg.output_dim)) / np.sqrt(out_in))
    store.add("output/b", np.zeros(cfg.output_dim))
    return store


def step(state: DncState, x_aug, params: dc.ParameterStore, cfg: DncConfig,
         interface_hook: Callable[[InterfaceVector], InterfaceVector] | None = None):
    """One DNC timestep on input ``x_aug`` (B, input_dim).

    Returns ``(new_state, y, xi)`` where ``xi`` is the raw interface emission.
    """
    x = dc.as_tensor(x_aug)
    B = x.shape[0]
    if x.shape[-1] != cfg.input_dim:
        raise ConfigError(f"input width {x.shape[-1]} != input_dim {cfg.input_dim}")
    R, W, H = cfg.R, cfg.W, cfg.hidden

    layer_in = dc.concat([x, dc.reshape(state.r, (B, R * W))], -1)
    ctrl = []
    for layer, prev in enumerate(state.ctrl):
        h_prev = _segment(prev, 0, H, (H,))
        c_prev = _segment(prev, H, 2 * H, (H,))
        z = dc.linear(dc.concat([layer_in, h_prev], -1), params[f"lstm{layer}/w"], params[f"lstm{layer}/b"])
        st = lstm_cell(z, c_prev)
        ctrl.append(st)
        layer_in = _segment(st, 0, H, (H,))
    h = layer_in

    xi = dc.linear(h, params["interface/w"], params["interface/b"])
    iv = parse_interface(xi, cfg)
    if interface_hook is not None:
        iv = interface_hook(iv)

    u, psi = usage_update(state.u, state.w_w, state.w_r, iv.free_gates)
    a = allocation_weighting(u)
    c_w = content_weighting(state.M, iv.write_key, iv.write_strength, iv.write_mask)
    w_w = write_weighting(iv.write_gate, iv.alloc_gate, a, dc.reshape(c_w, (B, cfg.N)))
    M = memory_write(state.M, w_w, iv.erase, iv.write_vector, psi, dealloc=cfg.dealloc)
    L, p = link_update(state.L, state.p, w_w)
    c_r = content_weighting(M, iv.read_keys, iv.read_strengths, iv.read_masks)
    sharp = (iv.sharp_forward, iv.sharp_backward) if cfg.sharpness else None
    w_r = read_weighting(L, state.w_r, c_r, iv.read_modes, sharp)
    r = dc.matmul(w_r, M)

    y = dc.linear(dc.concat([h, dc.reshape(r, (B, R * W))], -1), params["output/w"], params["output/b"])
    new_state = DncState(M=M, u=u, p=p, L=L, w_w=w_w, w_r=w_r, r=r, ctrl=ctrl)
    return new_state, y, xi


class DNC:
    """Parameters plus configuration; a thin convenience wrapper over :func:`step`."""

    def __init__(self, cfg: DncConfig, rng: np.random.Generator, dtype=np.float64):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(dtype)
        self.params = init_parameters(cfg, rng, dtype)

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def initial_state(self, batch: int) -> DncState:
        return initial_state(self.cfg, batch, self.dtype)

    def step(self, state: DncState, x_aug, interface_hook=None):
        return step(state, x_aug, self.params, self.cfg, interface_hook)


def check_state(state: DncState, tol: float = 1e-9) -> list[str]:
    """List of violated state invariants (empty when all hold)."""
    bad = []
    u, ww, wr, L = state.u.data, state.w_w.data, state.w_r.data, state.L.data
    if u.min() < 0 or u.max() > 1:
        bad.append(f"usage outside [0,1]: [{u.min()}, {u.max()}]")
    if ww.min() < 0 or ww.sum(-1).max() > 1 + tol:
        bad.append("write weighting off the sub-simplex")
    if wr.min() < 0 or wr.sum(-1).max() > 1 + tol:
        bad.append("read weighting off the sub-simplex")
    if np.any(np.diagonal(L, axis1=-2, axis2=-1) != 0):
        bad.append("nonzero link diagonal")
    if L.min() < 0 or L.max() > 1:
        bad.append("link entries outside [0,1]")
    if L.sum(-1).max() > 1 + tol or L.sum(-2).max() > 1 + tol:
        bad.append("link row/column sums exceed 1")
    return bad

"""Gated delta-rule mixer.

Each head keeps an associative state matrix S in R^{d_hk x d_hv}, updated per
timestep by an exponential forget gate followed by a delta-rule write:

    S~_t = exp(g_t) * S_{t-1}              decay, g_t < 0
    v'_t = v_t - S~_t^T k_t                remove what k_t currently retrieves
    S_t  = S~_t + k_t (beta_t * v'_t)^T    write back, beta_t in (0, 1)
    o_t  = S_t^T q_t / sqrt(d_hk)          read

with g_t = -exp(A_log) * softplus(W_a x_t + dt_bias) and
beta_t = sigmoid(W_b x_t). Queries/keys/values come from linear projections
followed by a causal depthwise conv (width 4) and SiLU; q and k are then
L2-normalized per head, which keeps the rank-1 write contractive (the
update along k scales by 1 - beta |k|^2, so unit keys bound it in (0, 1)).
The read is RMS-normalized per head, gated by SiLU(W_g x_t), and projected
back to d.

The chunked path is algebraically identical: within a chunk the per-step
corrections u_t solve a unit-lower-triangular system (the compact WY form of
the rank-1 update sequence), and the state crosses chunk boundaries once per
chunk. All cross-step decay factors exp(b_t - b_s) use log-space cumulative
sums and are <= 1, so the form is stable.

Dimensions follow d_k = floor(0.75 d), d_v = 2 d_k, head dims d_k/H and d_v/H.
"""

from dataclasses import dataclass

import numpy as np

from .checkpoint import TeacherLayer, TransformerConfig
from .numerics import (CONV_WIDTH, causal_conv1d, causal_conv1d_backward,
                       f32_resolution, inverse_softplus, repeat_kv, rmsnorm,
                       rmsnorm_backward, sigmoid, silu, silu_grad, softplus)

CHUNK = 64


@dataclass
class GdnConfig:
    d: int
    n_heads: int
    chunk: int = CHUNK

    def __post_init__(self):
        if self.d_k % self.n_heads != 0:
            raise ValueError(
                f"d_k = floor(0.75*{self.d}) = {self.d_k} not divisible by H = {self.n_heads}")

    @property
    def d_k(self) -> int:
        return int(0.75 * self.d)

    @property
    def d_v(self) -> int:
        return 2 * self.d_k

    @property
    def head_k(self) -> int:
        return self.d_k // self.n_heads

    @property
    def head_v(self) -> int:
        return self.d_v // self.n_heads

    def to_dict(self) -> dict:
        return {"d": self.d, "n_heads": self.n_heads, "chunk": self.chunk}

    @classmethod
    def from_dict(cls, d: dict) -> "GdnConfig":
        return cls(**d)


@dataclass
class GdnBlockWeights:
    w_q: np.ndarray        # (d_k, d)
    w_k: np.ndarray        # (d_k, d)
    w_v: np.ndarray        # (d_v, d)
    w_g: np.ndarray        # (d_v, d)
    w_o: np.ndarray        # (d, d_v)
    w_alpha: np.ndarray    # (H, d)
    w_beta: np.ndarray     # (H, d)
    a_log: np.ndarray      # (H,)
    dt_bias: np.ndarray    # (H,)
    conv_q: np.ndarray     # (d_k, 4)
    conv_k: np.ndarray     # (d_k, 4)
    conv_v: np.ndarray     # (d_v, 4)
    o_norm: np.ndarray     # (head_v,)

    def named_tensors(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in (
            "w_q", "w_k", "w_v", "w_g", "w_o", "w_alpha", "w_beta",
            "a_log", "dt_bias", "conv_q", "conv_k", "conv_v", "o_norm")}


@dataclass
class GdnState:
    s: np.ndarray        # (H, head_k, head_v)
    conv_q: np.ndarray   # (3, d_k) trailing raw projections for conv continuation
    conv_k: np.ndarray   # (3, d_k)
    conv_v: np.ndarray   # (3, d_v)

    @classmethod
    def zeros(cls, cfg: GdnConfig) -> "GdnState":
        return cls(
            s=np.zeros((cfg.n_heads, cfg.head_k, cfg.head_v)),
            conv_q=np.zeros((CONV_WIDTH - 1, cfg.d_k)),
            conv_k=np.zeros((CONV_WIDTH - 1, cfg.d_k)),
            conv_v=np.zeros((CONV_WIDTH - 1, cfg.d_v)),
        )


L2_EPS = 1e-6


def l2norm(x, eps: float = L2_EPS):
    """Normalize the last axis to (near-)unit length: x / (|x| + eps)."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / (n + eps)


def l2norm_backward(x, dy, eps: float = L2_EPS):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    s = 1.0 / (n + eps)
    proj = np.sum(x * dy, axis=-1, keepdims=True)
    return s * dy - x * proj / (np.maximum(n, 1e-30) * (n + eps) ** 2)


# ---------------------------------------------------------------------------
# Recurrence cores (head-batched; q/k: (T,H,dk), v: (T,H,dv), g/beta: (T,H))
# ---------------------------------------------------------------------------

def delta_rule_sequential(q, k, v, g, beta, s0, tape: dict | None = None):
    """Token-by-token gated delta rule; returns (reads (T,H,dv), final state)."""
    T, H, dk = q.shape
    dv = v.shape[-1]
    inv_sqrt = 1.0 / np.sqrt(dk)
    s = s0.copy()
    o = np.empty((T, H, dv))
    decay = np.exp(g)                       # (T, H)
    qcol = q[:, :, :, None]                 # (T, H, dk, 1)
    kcol = k[:, :, :, None]
    taping = tape is not None
    if taping:
        s_tilde_all = np.empty((T, H, dk, dv))
        s_all = np.empty((T, H, dk, dv))
        u_all = np.empty((T, H, dv))
        vdelta_all = np.empty((T, H, dv))
    for t in range(T):
        s = decay[t][:, None, None] * s
        kt = kcol[t]                        # (H, dk, 1)
        r = np.matmul(kt.transpose(0, 2, 1), s)[:, 0]   # S~^T k, (H, dv)
        vdelta = v[t] - r
        u = beta[t][:, None] * vdelta
        if taping:
            s_tilde_all[t] = s
        s = s + kt * u[:, None, :]
        o[t] = np.matmul(qcol[t].transpose(0, 2, 1), s)[:, 0] * inv_sqrt
        if taping:
            s_all[t] = s
            u_all[t] = u
            vdelta_all[t] = vdelta
    if taping:
        tape.update(s_tilde=s_tilde_all, s_all=s_all, u=u_all,
                    vdelta=vdelta_all, s_last=s)
    return o, s


def delta_rule_sequential_backward(q, k, v, g, beta, tape, do, ds_last=None):
    """Adjoint of delta_rule_sequential; returns per-input gradients."""
    T, H, dk = q.shape
    dv_dim = v.shape[-1]
    inv_sqrt = 1.0 / np.sqrt(dk)
    s_tilde_all, s_all, u_all, vdelta = (tape["s_tilde"], tape["s_all"],
                                         tape["u"], tape["vdelta"])

    dq = np.empty_like(q)
    dk_ = np.empty_like(k)
    dv_ = np.empty_like(v)
    dg = np.empty_like(g)
    dbeta = np.empty_like(beta)
    ds = np.zeros((H, dk, dv_dim)) if ds_last is None else ds_last.copy()
    decay_all = np.exp(g)

    for t in range(T - 1, -1, -1):
        kt = k[t][:, :, None]               # (H, dk, 1)
        s_tilde, s_t = s_tilde_all[t], s_all[t]
        # o_t = S_t^T q_t * inv_sqrt
        dot = do[t][:, None, :] * inv_sqrt  # (H, 1, dv)
        dq[t] = np.matmul(s_t, dot.transpose(0, 2, 1))[:, :, 0]
        ds = ds + q[t][:, :, None] * dot
        # S_t = S~ + k u^T
        du = np.matmul(kt.transpose(0, 2, 1), ds)[:, 0]
        # u = beta * (v - r)
        dbeta[t] = np.sum(du * vdelta[t], axis=-1)
        dvd = beta[t][:, None] * du
        dv_[t] = dvd
        # S_t contributes dS to S~ directly; r = S~^T k adds -k dvd^T
        ds_tilde = ds - kt * dvd[:, None, :]
        dk_[t] = (np.matmul(ds, u_all[t][:, :, None])[:, :, 0]
                  - np.matmul(s_tilde, dvd[:, :, None])[:, :, 0])
        # S~ = exp(g) * S_prev
        dg[t] = (ds_tilde * s_tilde).sum(axis=(1, 2))
        ds = decay_all[t][:, None, None] * ds_tilde
    return dq, dk_, dv_, dg, dbeta, ds


def delta_rule_chunked(q, k, v, g, beta, s0, chunk: int, tape: list | None = None):
    """Chunk-parallel equivalent of the sequential rule. Within a chunk the
    per-step corrections solve a unit-lower-triangular system; the state
    crosses chunk boundaries once per chunk."""
    T, H, dk = q.shape
    dv = v.shape[-1]
    inv_sqrt = 1.0 / np.sqrt(dk)
    s = s0.copy()                       # (H, dk, dv)
    o = np.empty((T, H, dv))
    for c0 in range(0, T, chunk):
        c1 = min(c0 + chunk, T)
        C = c1 - c0
        qc = np.ascontiguousarray(q[c0:c1].transpose(1, 0, 2))  # (H, C, dk)
        kc = np.ascontiguousarray(k[c0:c1].transpose(1, 0, 2))
        vc = np.ascontiguousarray(v[c0:c1].transpose(1, 0, 2))  # (H, C, dv)
        bc = beta[c0:c1].T                      # (H, C)
        b = np.cumsum(g[c0:c1].T, axis=1)       # (H, C) log-decay from chunk start

        # Pairwise decay exp(b_t - b_s), zeroed above the diagonal. Mask in
        # log space: upper-triangle differences are positive and may overflow.
        db = b[:, :, None] - b[:, None, :]      # (H, C, C)
        strict = np.tril(np.ones((C, C), dtype=bool), k=-1)
        incl = np.tril(np.ones((C, C), dtype=bool))
        decay_strict = np.exp(np.where(strict, db, -np.inf))
        decay_incl = np.exp(np.where(incl, db, -np.inf))
        eb = np.exp(b)                          # (H, C)
        tail = np.exp(b[:, -1][:, None] - b)    # (H, C) exp(b_C - b_s) <= 1

        kk = np.matmul(kc, kc.transpose(0, 2, 1))
        A = np.eye(C) + bc[:, :, None] * decay_strict * kk
        ks = np.matmul(kc, s)                   # (H, C, dv)
        rhs = bc[:, :, None] * (vc - eb[:, :, None] * ks)
        u = np.linalg.solve(A, rhs)             # (H, C, dv) per-step corrections

        qs = np.matmul(qc, s)
        qk = np.matmul(qc, kc.transpose(0, 2, 1))
        p = decay_incl * qk
        o_c = eb[:, :, None] * qs + np.matmul(p, u)
        o[c0:c1] = (o_c * inv_sqrt).transpose(1, 0, 2)

        if tape is not None:
            tape.append(dict(qc=qc, kc=kc, vc=vc, bc=bc, b=b, eb=eb, tail=tail,
                             strict=strict, incl=incl, decay_strict=decay_strict,
                             decay_incl=decay_incl, kk=kk, qk=qk, A=A, u=u,
                             ks=ks, qs=qs, s_in=s, span=(c0, c1)))
        s = np.exp(b[:, -1])[:, None, None] * s + np.matmul(
            (kc * tail[:, :, None]).transpose(0, 2, 1), u)
    return o, s


def delta_rule_chunked_backward(tape: list, do, ds_last=None):
    """Adjoint of delta_rule_chunked; `do` is the gradient wrt the raw reads
    (pre 1/sqrt scaling applied here, matching the forward)."""
    first = tape[0]
    H, _, dk = first["qc"].shape
    dv_dim = first["u"].shape[-1]
    T = do.shape[0]
    inv_sqrt = 1.0 / np.sqrt(dk)

    dq = np.empty((T, H, dk))
    dk_out = np.empty((T, H, dk))
    dv_out = np.empty((T, H, dv_dim))
    dg = np.empty((T, H))
    ds = np.zeros((H, dk, dv_dim)) if ds_last is None else ds_last.copy()
    dbeta = np.empty((T, H))

    for ch in reversed(tape):
        c0, c1 = ch["span"]
        C = c1 - c0
        qc, kc, vc, bc = ch["qc"], ch["kc"], ch["vc"], ch["bc"]
        eb, tail, u, s_in = ch["eb"], ch["tail"], ch["u"], ch["s_in"]
        do_c = np.ascontiguousarray(do[c0:c1].transpose(1, 0, 2)) * inv_sqrt

        db = np.zeros((H, C))
        # S_out = exp(b_C) S_in + K^T (tail * U)
        ds_in = np.exp(ch["b"][:, -1])[:, None, None] * ds
        db[:, -1] += np.exp(ch["b"][:, -1]) * np.sum(ds * s_in, axis=(1, 2))
        dw = np.matmul(kc, ds)                              # (H, C, dv)
        dkc = np.matmul(tail[:, :, None] * u, ds.transpose(0, 2, 1))
        du = tail[:, :, None] * dw
        dtail = np.sum(dw * u, axis=-1)                     # (H, C)
        db -= dtail * tail
        db[:, -1] += np.sum(dtail * tail, axis=-1)

        # O = eb * (Q S_in) + P U  with P = D_inc * (Q K^T)
        dqc = eb[:, :, None] * np.matmul(do_c, s_in.transpose(0, 2, 1))
        ds_in += np.matmul((eb[:, :, None] * qc).transpose(0, 2, 1), do_c)
        db += eb * np.sum(do_c * ch["qs"], axis=-1)
        dp = np.matmul(do_c, u.transpose(0, 2, 1))          # (H, C, C)
        du += np.matmul((ch["decay_incl"] * ch["qk"]).transpose(0, 2, 1), do_c)
        dqk = dp * ch["decay_incl"]
        dqc += np.matmul(dqk, kc)
        dkc += np.matmul(dqk.transpose(0, 2, 1), qc)
        e_inc = dqk * ch["qk"]                              # dD_inc * D_inc
        db += e_inc.sum(axis=2) - e_inc.sum(axis=1)

        # U = A^{-1} R
        lam = np.linalg.solve(ch["A"].transpose(0, 2, 1), du)
        dA = -np.matmul(lam, u.transpose(0, 2, 1))
        dr = lam

        # R = beta * (V - eb * (K S_in))
        core = vc - eb[:, :, None] * ch["ks"]
        dbeta_c = np.sum(dr * core, axis=-1)
        dv_c = bc[:, :, None] * dr
        m = -(bc * eb)[:, :, None] * dr
        db -= bc * eb * np.sum(dr * ch["ks"], axis=-1)
        dkc += np.matmul(m, s_in.transpose(0, 2, 1))
        ds_in += np.matmul(kc.transpose(0, 2, 1), m)

        # A = I + beta * D_str * (K K^T)
        da_str = dA * ch["decay_strict"]
        dbeta_c += np.sum(da_str * ch["kk"], axis=-1)
        dkk = bc[:, :, None] * da_str
        dkc += np.matmul(dkk + dkk.transpose(0, 2, 1), kc)
        e_str = dkk * ch["kk"]
        db += e_str.sum(axis=2) - e_str.sum(axis=1)

        # b = cumsum(g) within the chunk
        dg_c = np.cumsum(db[:, ::-1], axis=1)[:, ::-1]
        dq[c0:c1] = dqc.transpose(1, 0, 2)
        dk_out[c0:c1] = dkc.transpose(1, 0, 2)
        dv_out[c0:c1] = dv_c.transpose(1, 0, 2)
        dg[c0:c1] = dg_c.T
        dbeta[c0:c1] = dbeta_c.T
        ds = ds_in
    return dq, dk_out, dv_out, dg, dbeta, ds


# ---------------------------------------------------------------------------
# Full mixer layer
# ---------------------------------------------------------------------------

def _project_qkv(w: GdnBlockWeights, cfg: GdnConfig, x, state: GdnState | None,
                 tape: dict | None):
    q0 = x @ w.w_q.T
    k0 = x @ w.w_k.T
    v0 = x @ w.w_v.T
    hq = state.conv_q if state is not None else None
    hk = state.conv_k if state is not None else None
    hv = state.conv_v if state is not None else None
    q1 = causal_conv1d(q0, w.conv_q, hq)
    k1 = causal_conv1d(k0, w.conv_k, hk)
    v1 = causal_conv1d(v0, w.conv_v, hv)
    if tape is not None:
        tape.update(q0=q0, k0=k0, v0=v0, q1=q1, k1=k1, v1=v1)
    return silu(q1), silu(k1), silu(v1), (q0, k0, v0)


def _fold_heads(x, B, T, H, dim):
    """(B, T, H*dim) -> (T, B*H, dim): batch folds into the core's head axis."""
    return np.ascontiguousarray(
        x.reshape(B, T, H, dim).transpose(1, 0, 2, 3)).reshape(T, B * H, dim)


def _unfold_heads(x, B, T, H, dim):
    """(T, B*H, dim) -> (B, T, H, dim)."""
    return x.reshape(T, B, H, dim).transpose(1, 0, 2, 3)


def _gdn_layer_forward(w: GdnBlockWeights, cfg: GdnConfig, x, state, tape,
                       core: str):
    single = x.ndim == 2
    xb = x[None] if single else x
    if not single and state is not None:
        raise ValueError("state continuation requires a single sequence")
    B, T = xb.shape[0], xb.shape[1]
    H, hk, hv = cfg.n_heads, cfg.head_k, cfg.head_v
    fresh = state is None
    q, k, v, (q0, k0, v0) = _project_qkv(w, cfg, xb, state, tape)

    a_pre = xb @ w.w_alpha.T + w.dt_bias
    g = -np.exp(w.a_log) * softplus(a_pre)          # (B, T, H), strictly < 0
    b_pre = xb @ w.w_beta.T
    beta = sigmoid(b_pre)                           # (B, T, H), in (0, 1)

    # Unit-norm keys keep the delta-rule write contractive for any beta.
    q_pre = _fold_heads(q, B, T, H, hk)
    k_pre = _fold_heads(k, B, T, H, hk)
    qh = l2norm(q_pre)
    kh = l2norm(k_pre)
    vh = _fold_heads(v, B, T, H, hv)
    g_core = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(T, B * H)
    beta_core = np.ascontiguousarray(beta.transpose(1, 0, 2)).reshape(T, B * H)
    s0 = np.zeros((B * H, hk, hv)) if fresh else state.s
    if core == "chunked":
        core_tape = [] if tape is not None else None
        o_raw, s_new = delta_rule_chunked(qh, kh, vh, g_core, beta_core, s0,
                                          cfg.chunk, core_tape)
    else:
        core_tape = {} if tape is not None else None
        o_raw, s_new = delta_rule_sequential(qh, kh, vh, g_core, beta_core, s0,
                                             core_tape)

    gate_pre = xb @ w.w_g.T                         # (B, T, d_v)
    o_head = _unfold_heads(o_raw, B, T, H, hv)      # (B, T, H, hv)
    o_n = rmsnorm(o_head, w.o_norm, 1e-6)
    gated = o_n * silu(gate_pre).reshape(B, T, H, hv)
    y = gated.reshape(B, T, cfg.d_v) @ w.w_o.T

    if tape is not None:
        tape.update(x=xb, q=qh, k=kh, v=vh, q_pre=q_pre, k_pre=k_pre,
                    g=g_core, beta=beta_core, a_pre=a_pre, gate_pre=gate_pre,
                    o_head=o_head, o_n=o_n, gated=gated, core=core_tape,
                    batch=B)

    if not single:
        return y, None

    def tail(raw, prev):
        if T >= CONV_WIDTH - 1:
            return raw[0, T - (CONV_WIDTH - 1):].copy()
        return np.concatenate([prev[T:], raw[0]], axis=0)

    prev = state if not fresh else GdnState.zeros(cfg)
    new_state = GdnState(s=s_new, conv_q=tail(q0, prev.conv_q),
                         conv_k=tail(k0, prev.conv_k), conv_v=tail(v0, prev.conv_v))
    return y[0], new_state


def gdn_forward_sequential(w: GdnBlockWeights, cfg: GdnConfig, x,
                           state: GdnState | None = None,
                           tape: dict | None = None):
    """Full mixer over x (T, d), or a batch (B, T, d) of fresh sequences,
    using the token-by-token recurrence; returns (output, carried GdnState).
    Batched calls return state None."""
    return _gdn_layer_forward(w, cfg, x, state, tape, core="sequential")


def gdn_forward_train(w: GdnBlockWeights, cfg: GdnConfig, x, tape: dict):
    """Training-path mixer forward: the chunk-parallel core with a gradient
    tape, for fresh sequences or batches."""
    return _gdn_layer_forward(w, cfg, x, None, tape, core="chunked")


def gdn_forward_chunked(w: GdnBlockWeights, cfg: GdnConfig, x,
                        state: GdnState | None = None, return_state: bool = False):
    """Chunked mixer forward, numerically equivalent to the sequential path."""
    single = x.ndim == 2
    xb = x[None] if single else x
    if not single and state is not None:
        raise ValueError("state continuation requires a single sequence")
    B, T = xb.shape[0], xb.shape[1]
    H, hk, hv = cfg.n_heads, cfg.head_k, cfg.head_v
    q, k, v, (q0, k0, v0) = _project_qkv(w, cfg, xb, state, None)
    a_pre = xb @ w.w_alpha.T + w.dt_bias
    g = -np.exp(w.a_log) * softplus(a_pre)
    beta = sigmoid(xb @ w.w_beta.T)
    s0 = np.zeros((B * H, hk, hv)) if state is None else state.s
    o_raw, s_new = delta_rule_chunked(
        l2norm(_fold_heads(q, B, T, H, hk)), l2norm(_fold_heads(k, B, T, H, hk)),
        _fold_heads(v, B, T, H, hv),
        np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(T, B * H),
        np.ascontiguousarray(beta.transpose(1, 0, 2)).reshape(T, B * H),
        s0, cfg.chunk)
    o_head = _unfold_heads(o_raw, B, T, H, hv)
    gated = rmsnorm(o_head, w.o_norm, 1e-6) * silu(xb @ w.w_g.T).reshape(B, T, H, hv)
    y = gated.reshape(B, T, cfg.d_v) @ w.w_o.T
    if single:
        y = y[0]
    if not return_state:
        return y
    if not single:
        return y, None

    def tail(raw, prev):
        if T >= CONV_WIDTH - 1:
            return raw[0, T - (CONV_WIDTH - 1):].copy()
        return np.concatenate([prev[T:], raw[0]], axis=0)

    prev = state if state is not None else GdnState.zeros(cfg)
    return y, GdnState(s=s_new, conv_q=tail(q0, prev.conv_q),
                       conv_k=tail(k0, prev.conv_k), conv_v=tail(v0, prev.conv_v))


def gdn_backward(w: GdnBlockWeights, cfg: GdnConfig, tape: dict, dy):
    """Reverse-mode pass of gdn_forward_sequential (fresh-state forward)."""
    x = tape["x"]                  # (B, T, d)
    single = dy.ndim == 2
    dyb = dy[None] if single else dy
    B, T = x.shape[0], x.shape[1]
    H, hk, hv = cfg.n_heads, cfg.head_k, cfg.head_v
    x_flat = x.reshape(B * T, -1)
    grads = {}

    dgated = (dyb @ w.w_o).reshape(B, T, H, hv)
    grads["w_o"] = dyb.reshape(B * T, -1).T @ tape["gated"].reshape(B * T, cfg.d_v)

    gate_pre = tape["gate_pre"].reshape(B, T, H, hv)
    do_n = dgated * silu(gate_pre)
    dgate_pre = (dgated * tape["o_n"] * silu_grad(gate_pre)).reshape(B, T, cfg.d_v)
    grads["w_g"] = dgate_pre.reshape(B * T, -1).T @ x_flat
    dx = dgate_pre @ w.w_g

    do_head, grads["o_norm"] = rmsnorm_backward(tape["o_head"], w.o_norm, 1e-6, do_n)
    do_core = np.ascontiguousarray(
        do_head.transpose(1, 0, 2, 3)).reshape(T, B * H, hv)

    q, k, v, g, beta = tape["q"], tape["k"], tape["v"], tape["g"], tape["beta"]
    if isinstance(tape["core"], list):
        dq, dk, dv, dg, dbeta = delta_rule_chunked_backward(
            tape["core"], do_core)[:5]
    else:
        dq, dk, dv, dg, dbeta = delta_rule_sequential_backward(
            q, k, v, g, beta, tape["core"], do_core)[:5]
    dq = l2norm_backward(tape["q_pre"], dq)
    dk = l2norm_backward(tape["k_pre"], dk)

    dg_b = _unfold_heads(dg[:, :, None], B, T, H, 1)[..., 0]      # (B, T, H)
    dbeta_b = _unfold_heads(dbeta[:, :, None], B, T, H, 1)[..., 0]

    # Forget gate g = -exp(a_log) * softplus(a_pre), so dg/da_log = g.
    g_b = _unfold_heads(g[:, :, None], B, T, H, 1)[..., 0]
    grads["a_log"] = np.sum((dg_b * g_b).reshape(B * T, H), axis=0)
    da_pre = dg_b * (-np.exp(w.a_log)) * sigmoid(tape["a_pre"])
    grads["dt_bias"] = np.sum(da_pre.reshape(B * T, H), axis=0)
    grads["w_alpha"] = da_pre.reshape(B * T, H).T @ x_flat
    dx += da_pre @ w.w_alpha

    beta_b = _unfold_heads(beta[:, :, None], B, T, H, 1)[..., 0]
    db_pre = dbeta_b * beta_b * (1.0 - beta_b)
    grads["w_beta"] = db_pre.reshape(B * T, H).T @ x_flat
    dx += db_pre @ w.w_beta

    # Through SiLU and the causal convs back to the raw projections.
    for name, dpost, dim, conv_w, proj_w in (
            ("q", dq, hk, w.conv_q, w.w_q),
            ("k", dk, hk, w.conv_k, w.w_k),
            ("v", dv, hv, w.conv_v, w.w_v)):
        dflat = _unfold_heads(dpost, B, T, H, dim).reshape(B, T, H * dim)
        d1 = dflat * silu_grad(tape[f"{name}1"])
        d0, dconv = causal_conv1d_backward(tape[f"{name}0"], conv_w, d1)
        grads[f"conv_{name}"] = dconv
        grads[f"w_{name}"] = d0.reshape(B * T, -1).T @ x_flat
        dx += d0 @ proj_w
    return (dx[0] if single else dx), grads


# ---------------------------------------------------------------------------
# Initialization from a teacher attention layer, and parameter accounting
# ---------------------------------------------------------------------------

def init_gdn_from_teacher(layer: TeacherLayer, teacher_cfg: TransformerConfig,
                          cfg: GdnConfig, seed: int = 0) -> GdnBlockWeights:
    """Transfer overlapping projection submatrices from the teacher; keep
    mixer-specific parameters (gate, decay, beta, convs) at seeded random."""
    d, d_k, d_v = cfg.d, cfg.d_k, cfg.d_v
    if d != teacher_cfg.d_model:
        raise ValueError("mixer width must match the teacher d_model")
    d_h = teacher_cfg.head_dim
    wk_full = repeat_kv(layer.wk, d_h, teacher_cfg.group)
    wv_full = repeat_kv(layer.wv, d_h, teacher_cfg.group)
    if d_k > layer.wq.shape[0] or d_k > wk_full.shape[0]:
        raise ValueError("teacher projections have fewer rows than d_k")

    rng = np.random.default_rng(seed)

    def normal(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    def uniform(shape, bound):
        return rng.uniform(-bound, bound, size=shape)

    w_q = normal(d_k, d)
    w_k = normal(d_k, d)
    w_v = normal(d_v, d)
    w_o = normal(d, d_v)
    w_q[:d_k] = layer.wq[:d_k]
    w_k[:d_k] = wk_full[:d_k]
    n_copy = min(d, d_v, wv_full.shape[0])
    w_v[:n_copy] = wv_full[:n_copy]
    o_copy = min(d, d_v, layer.wo.shape[1])
    w_o[:, :o_copy] = layer.wo[:, :o_copy]

    # Decay and write-strength projections start near zero so the initial
    # per-head timescales are set by dt_bias (softplus in [1e-3, 1e-1]) and
    # survive long contexts; they sharpen during training.
    H = cfg.n_heads
    return GdnBlockWeights(
        w_q=f32_resolution(w_q), w_k=f32_resolution(w_k), w_v=f32_resolution(w_v),
        w_g=f32_resolution(uniform((d_v, d), 1.0 / np.sqrt(d))),
        w_o=f32_resolution(w_o),
        w_alpha=f32_resolution(uniform((H, d), 0.02 / np.sqrt(d))),
        w_beta=f32_resolution(uniform((H, d), 0.02 / np.sqrt(d))),
        a_log=f32_resolution(np.log(rng.uniform(1.0, 16.0, size=H))),
        dt_bias=f32_resolution(inverse_softplus(rng.uniform(1e-3, 1e-1, size=H))),
        conv_q=f32_resolution(uniform((d_k, CONV_WIDTH), 1.0 / np.sqrt(CONV_WIDTH))),
        conv_k=f32_resolution(uniform((d_k, CONV_WIDTH), 1.0 / np.sqrt(CONV_WIDTH))),
        conv_v=f32_resolution(uniform((d_v, CONV_WIDTH), 1.0 / np.sqrt(CONV_WIDTH))),
        o_norm=np.ones(cfg.head_v),
    )


def gdn_param_count(cfg: GdnConfig) -> int:
    """Exact mixer parameter count (projections, gates, decays, convs, norm)."""
    d, d_k, d_v, H = cfg.d, cfg.d_k, cfg.d_v, cfg.n_heads
    return (2 * d_k * d            # w_q, w_k
            + 3 * d_v * d          # w_v, w_g, w_o
            + 2 * H * d            # w_alpha, w_beta
            + 2 * H                # a_log, dt_bias
            + (2 * d_k + d_v) * CONV_WIDTH
            + cfg.head_v)          # output norm gamma

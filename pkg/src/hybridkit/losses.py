"""Distillation losses with analytic gradients and transient-memory accounting.

Four interchangeable KL paths between student and teacher next-token
distributions (student distribution first):

  kl_naive    both (T, V) log-softmax tensors materialized
  kl_chunked  sequence chunks of C rows, only (C, V) slices live at once
  kl_online   single pass over vocab tiles with running log-sum-exp
              accumulators; no per-token softmax is ever materialized
  kl_hidden   logit-free: takes final hidden states plus LM head weights,
              projects <= C rows at a time and runs the tiled KL inside

plus a chunked cross-entropy that fuses the LM-head projection, and the
intermediate-layer alignment loss over hidden states and mixer outputs.

Each loss reports `peak_elements`: the largest transient working buffer it
allocated, in scalar elements (inputs and returned gradients excluded).
"""

from dataclasses import dataclass

import numpy as np

from .accounting import record_alloc


@dataclass
class LossConfig:
    kl_chunk: int = 4096     # sequence-dimension chunk C
    vocab_tile: int = 128    # vocab-dimension tile B_V for the online pass
    eps: float = 1e-12       # probability floor, used by reference oracles only
    swap_direction: bool = False  # KL(teacher || student) instead of the default

    def __post_init__(self):
        if self.kl_chunk < 1 or self.vocab_tile < 1:
            raise ValueError("kl_chunk and vocab_tile must be >= 1")


@dataclass
class LossValueAndGrad:
    value: float
    grad: np.ndarray | None
    peak_elements: int = 0


def _check_same_shape(z_s, z_t):
    if z_s.shape != z_t.shape:
        raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")


# ---------------------------------------------------------------------------
# Intermediate-layer alignment
# ---------------------------------------------------------------------------

def ild_loss(student_trace, teacher_trace) -> LossValueAndGrad:
    """Sum over layers of Frobenius distances between hidden states and
    between mixer outputs. Value only; per-layer gradients via ild_grads."""
    value, _, _ = _ild_terms(student_trace, teacher_trace)
    return LossValueAndGrad(value=value, grad=None)


def ild_grads(student_trace, teacher_trace):
    """Returns (value, dh_list, da_list): gradients wrt the student's per-layer
    hidden states and mixer outputs."""
    return _ild_terms(student_trace, teacher_trace, want_grads=True)


def _norm_and_grad(delta):
    """Frobenius norm over the trailing (T, d) axes, batch-mean over any
    leading axis; returns (value, d value / d delta)."""
    if delta.ndim == 2:
        n = np.linalg.norm(delta)
        return n, (delta / n if n > 0 else np.zeros_like(delta))
    B = delta.shape[0]
    n = np.sqrt(np.sum(delta * delta, axis=(-2, -1)))           # (B,)
    safe = np.where(n > 0, n, 1.0)
    grad = delta / (B * safe[:, None, None])
    grad[n == 0] = 0.0
    return float(np.mean(n)), grad


def _ild_terms(student_trace, teacher_trace, want_grads: bool = False):
    hs, has_ = student_trace.hidden_states, student_trace.mixer_outputs
    ht, hat = teacher_trace.hidden_states, teacher_trace.mixer_outputs
    if len(hs) != len(ht) or len(has_) != len(hat):
        raise ValueError("student and teacher traces have different layer counts")
    value = 0.0
    dh_list, da_list = [], []
    for s_h, t_h, s_a, t_a in zip(hs, ht, has_, hat):
        if s_h.shape != t_h.shape or s_a.shape != t_a.shape:
            raise ValueError("trace shapes differ between student and teacher")
        n_h, g_h = _norm_and_grad(s_h - t_h)
        n_a, g_a = _norm_and_grad(s_a - t_a)
        value += n_h + n_a
        if want_grads:
            dh_list.append(g_h)
            da_list.append(g_a)
    if want_grads:
        return value, dh_list, da_list
    return value, None, None


# ---------------------------------------------------------------------------
# KL paths
# ---------------------------------------------------------------------------

def _log_softmax_rows(z):
    m = np.max(z, axis=-1, keepdims=True)
    out = z - m
    out -= np.log(np.sum(np.exp(out), axis=-1, keepdims=True))
    return out


def _kl_rows(z_s, z_t, grad_out, scale: float, swap: bool) -> float:
    """KL over each row, writing scale * dKL/dz_s into grad_out. Allocates two
    row-block-sized transients and returns the summed KL.

    Default direction is KL(student || teacher); `swap` computes
    KL(teacher || student), whose student gradient is p_s - p_t."""
    lp_s = _log_softmax_rows(z_s)
    lp_t = _log_softmax_rows(z_t)
    if swap:
        p_t = np.exp(lp_t)
        d = np.sum(p_t * (lp_t - lp_s), axis=-1)
        grad_out[...] = (np.exp(lp_s) - p_t) * scale
    else:
        ell = lp_s - lp_t
        p = np.exp(lp_s)
        d = np.sum(p * ell, axis=-1)
        grad_out[...] = p * (ell - d[:, None]) * scale
    return float(np.sum(d))


def kl_naive(z_s, z_t, cfg: LossConfig | None = None) -> LossValueAndGrad:
    """Token-mean KL with full (T, V) softmax tensors."""
    cfg = cfg or LossConfig()
    _check_same_shape(z_s, z_t)
    T, V = z_s.shape
    record_alloc("kl_naive_softmax", 2 * T * V)
    grad = np.empty_like(z_s)
    total = _kl_rows(z_s, z_t, grad, 1.0 / T, cfg.swap_direction)
    return LossValueAndGrad(total / T, grad, peak_elements=2 * T * V)


def kl_chunked(z_s, z_t, cfg: LossConfig | None = None) -> LossValueAndGrad:
    """Same value/grad as kl_naive, materializing only (C, V) slices."""
    cfg = cfg or LossConfig()
    _check_same_shape(z_s, z_t)
    T, V = z_s.shape
    C = min(cfg.kl_chunk, T)
    grad = np.empty_like(z_s)
    total = 0.0
    peak = 0
    for c0 in range(0, T, C):
        c1 = min(c0 + C, T)
        record_alloc("kl_chunked_softmax", 2 * (c1 - c0) * V)
        peak = max(peak, 2 * (c1 - c0) * V)
        total += _kl_rows(z_s[c0:c1], z_t[c0:c1], grad[c0:c1], 1.0 / T,
                          cfg.swap_direction)
    return LossValueAndGrad(total / T, grad, peak_elements=peak + 2 * T)


def kl_online(z_s, z_t, cfg: LossConfig | None = None) -> LossValueAndGrad:
    """Streaming KL over vocab tiles of width B_V with running-max-rescaled
    accumulators; a second tiled pass produces the gradient."""
    cfg = cfg or LossConfig()
    _check_same_shape(z_s, z_t)
    T, V = z_s.shape
    B = min(cfg.vocab_tile, V)

    swap = cfg.swap_direction
    m_s = np.full(T, -np.inf)
    m_t = np.full(T, -np.inf)
    zacc_s = np.zeros(T)
    zacc_t = np.zeros(T)
    diff_acc = np.zeros(T)  # sum of exp(lead - m_lead) * (lead - other)
    peak = 0
    for b0 in range(0, V, B):
        b1 = min(b0 + B, V)
        ts, tt = z_s[:, b0:b1], z_t[:, b0:b1]
        record_alloc("kl_online_tile", 2 * T * (b1 - b0))
        peak = max(peak, 2 * T * (b1 - b0))
        lead, other = (tt, ts) if swap else (ts, tt)

        m_new = np.maximum(m_s, np.max(ts, axis=-1))
        scale_s = np.exp(m_s - m_new)
        e_s = np.exp(ts - m_new[:, None])
        zacc_s = zacc_s * scale_s + np.sum(e_s, axis=-1)
        if not swap:
            diff_acc = diff_acc * scale_s + np.sum(e_s * (lead - other), axis=-1)
        m_s = m_new

        m_new = np.maximum(m_t, np.max(tt, axis=-1))
        scale_t = np.exp(m_t - m_new)
        e_t = np.exp(tt - m_new[:, None])
        zacc_t = zacc_t * scale_t + np.sum(e_t, axis=-1)
        if swap:
            diff_acc = diff_acc * scale_t + np.sum(e_t * (lead - other), axis=-1)
        m_t = m_new

    lse_s = m_s + np.log(zacc_s)
    lse_t = m_t + np.log(zacc_t)
    if swap:
        d = diff_acc / zacc_t - lse_t + lse_s
    else:
        d = diff_acc / zacc_s - lse_s + lse_t
    value = float(np.mean(d))

    grad = np.empty_like(z_s)
    for b0 in range(0, V, B):
        b1 = min(b0 + B, V)
        p = np.exp(z_s[:, b0:b1] - lse_s[:, None])
        record_alloc("kl_online_tile", 2 * T * (b1 - b0))
        if swap:
            grad[:, b0:b1] = (p - np.exp(z_t[:, b0:b1] - lse_t[:, None])) / T
        else:
            ell = (z_s[:, b0:b1] - z_t[:, b0:b1]) - lse_s[:, None] + lse_t[:, None]
            grad[:, b0:b1] = p * (ell - d[:, None]) / T
    return LossValueAndGrad(value, grad, peak_elements=peak + 5 * T)


def kl_hidden(h_s, w_lm_s, h_t, w_lm_t, cfg: LossConfig | None = None) -> LossValueAndGrad:
    """Logit-free KL from final hidden states and LM-head weights. Works on
    row chunks of <= C tokens and projects one (rows, B_V) logit tile at a
    time, so neither logit matrix is ever materialized, not even per chunk.
    Gradient is wrt h_s."""
    cfg = cfg or LossConfig()
    V_s, d_s = w_lm_s.shape
    V_t, d_t = w_lm_t.shape
    if V_s != V_t:
        raise ValueError(f"LM head vocab sizes differ: {V_s} vs {V_t}")
    if h_s.shape[0] != h_t.shape[0]:
        raise ValueError("student/teacher token counts differ")
    if h_s.shape[1] != d_s or h_t.shape[1] != d_t:
        raise ValueError("hidden widths do not match LM head weights")

    T, V = h_s.shape[0], V_s
    C = min(cfg.kl_chunk, T)
    B = min(cfg.vocab_tile, V)
    swap = cfg.swap_direction
    grad_h = np.zeros_like(h_s)
    total = 0.0
    peak = 0
    for c0 in range(0, T, C):
        c1 = min(c0 + C, T)
        rows = c1 - c0
        hs_c, ht_c = h_s[c0:c1], h_t[c0:c1]

        m_s = np.full(rows, -np.inf)
        m_t = np.full(rows, -np.inf)
        zacc_s = np.zeros(rows)
        zacc_t = np.zeros(rows)
        diff_acc = np.zeros(rows)
        for b0 in range(0, V, B):
            b1 = min(b0 + B, V)
            ts = hs_c @ w_lm_s[b0:b1].T
            tt = ht_c @ w_lm_t[b0:b1].T
            record_alloc("kl_hidden_tile", 2 * rows * (b1 - b0))
            peak = max(peak, 2 * rows * (b1 - b0))
            m_new = np.maximum(m_s, np.max(ts, axis=-1))
            scale_s = np.exp(m_s - m_new)
            e_s = np.exp(ts - m_new[:, None])
            zacc_s = zacc_s * scale_s + np.sum(e_s, axis=-1)
            if not swap:
                diff_acc = diff_acc * scale_s + np.sum(e_s * (ts - tt), axis=-1)
            m_s = m_new
            m_new = np.maximum(m_t, np.max(tt, axis=-1))
            scale_t = np.exp(m_t - m_new)
            e_t = np.exp(tt - m_new[:, None])
            zacc_t = zacc_t * scale_t + np.sum(e_t, axis=-1)
            if swap:
                diff_acc = diff_acc * scale_t + np.sum(e_t * (tt - ts), axis=-1)
            m_t = m_new

        lse_s = m_s + np.log(zacc_s)
        lse_t = m_t + np.log(zacc_t)
        if swap:
            d = diff_acc / zacc_t - lse_t + lse_s
        else:
            d = diff_acc / zacc_s - lse_s + lse_t
        total += float(np.sum(d))

        for b0 in range(0, V, B):
            b1 = min(b0 + B, V)
            ts = hs_c @ w_lm_s[b0:b1].T
            tt = ht_c @ w_lm_t[b0:b1].T
            record_alloc("kl_hidden_tile", 2 * rows * (b1 - b0))
            p = np.exp(ts - lse_s[:, None])
            if swap:
                dz = (p - np.exp(tt - lse_t[:, None])) / T
            else:
                ell = (ts - tt) - lse_s[:, None] + lse_t[:, None]
                dz = p * (ell - d[:, None]) / T
            grad_h[c0:c1] += dz @ w_lm_s[b0:b1]
    return LossValueAndGrad(total / T, grad_h, peak_elements=peak + 5 * C)


def fused_linear_ce(h, w_lm, targets, cfg: LossConfig | None = None) -> LossValueAndGrad:
    """Token-mean cross-entropy fused with the LM-head projection: at most a
    (C, V) logit slice lives at any moment. Gradient is wrt h."""
    cfg = cfg or LossConfig()
    targets = np.asarray(targets, dtype=np.int64)
    T = h.shape[0]
    V = w_lm.shape[0]
    if targets.shape != (T,):
        raise ValueError("targets must be one id per token")
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError(f"target id out of range [0, {V})")

    C = min(cfg.kl_chunk, T)
    grad_h = np.empty_like(h)
    total = 0.0
    peak = 0
    for c0 in range(0, T, C):
        c1 = min(c0 + C, T)
        rows = c1 - c0
        z = h[c0:c1] @ w_lm.T
        record_alloc("fused_ce_logit_slice", rows * V)
        peak = max(peak, rows * V)
        tgt = targets[c0:c1]
        m = np.max(z, axis=-1)
        lse = m + np.log(np.sum(np.exp(z - m[:, None]), axis=-1))
        total += float(np.sum(lse - z[np.arange(rows), tgt]))
        np.subtract(z, lse[:, None], out=z)
        np.exp(z, out=z)                      # z now holds softmax probabilities
        z[np.arange(rows), tgt] -= 1.0
        grad_h[c0:c1] = (z / T) @ w_lm
    return LossValueAndGrad(total / T, grad_h, peak_elements=peak)

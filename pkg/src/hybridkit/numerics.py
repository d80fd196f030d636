"""Dense numeric kernels shared by every block: activations, norms, causal
convolution, truncated SVD, KV-head replication, and rotary embeddings.

All math runs in float64. Weight tensors live on the float32 grid (see
`f32_resolution`) so the on-disk container round-trips bit-exactly.
"""

import numpy as np

Array = np.ndarray


def f32_resolution(x: Array) -> Array:
    """Snap values to the nearest float32, returned as float64."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def check_finite(x: Array, what: str) -> Array:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# Activations (last-axis semantics where an axis matters)
# ---------------------------------------------------------------------------

def sigmoid(x: Array) -> Array:
    return 0.5 * np.tanh(0.5 * x) + 0.5


def silu(x: Array) -> Array:
    return x * sigmoid(x)


def silu_grad(x: Array) -> Array:
    """d silu(x) / dx."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x: Array) -> Array:
    """log(1 + exp(x)), overflow-safe."""
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def inverse_softplus(y: Array) -> Array:
    """x such that softplus(x) == y, for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-30))))


def softmax(x: Array, axis: int = -1) -> Array:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: Array, axis: int = -1) -> Array:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def logsumexp(x: Array, axis: int = -1) -> Array:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


# ---------------------------------------------------------------------------
# RMS normalization
# ---------------------------------------------------------------------------

def rmsnorm(x: Array, gamma: Array, eps: float) -> Array:
    """Per last-axis slice: x / sqrt(mean(x^2) + eps) * gamma."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    gamma = np.asarray(gamma, dtype=np.float64)
    if x.shape[-1] != gamma.shape[-1]:
        raise ValueError(f"gamma length {gamma.shape[-1]} != last axis {x.shape[-1]}")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gamma


def rmsnorm_backward(x: Array, gamma: Array, eps: float, dy: Array):
    """Returns (dx, dgamma) for y = rmsnorm(x, gamma, eps)."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    g = dy * gamma
    dx = inv * g - x * (inv ** 3) * np.sum(g * x, axis=-1, keepdims=True) / d
    dgamma = np.sum((dy * x * inv).reshape(-1, d), axis=0)
    return dx, dgamma


# ---------------------------------------------------------------------------
# Causal depthwise convolution, kernel width 4, zero left padding
# ---------------------------------------------------------------------------

CONV_WIDTH = 4


def causal_conv1d(x: Array, kernel: Array, history: Array | None = None) -> Array:
    """out[..., t, c] = sum_k kernel[c, k] * x[..., t - 3 + k, c]; out-of-range
    timesteps read 0. Leading axes are independent sequences.

    `history` optionally supplies the 3 timesteps preceding x (for
    sequence continuation); shape (3, channels).
    """
    T, c = x.shape[-2], x.shape[-1]
    if kernel.shape != (c, CONV_WIDTH):
        raise ValueError(f"kernel shape {kernel.shape} != ({c}, {CONV_WIDTH})")
    if history is None:
        history = np.zeros(x.shape[:-2] + (CONV_WIDTH - 1, c))
    else:
        history = np.broadcast_to(history, x.shape[:-2] + (CONV_WIDTH - 1, c))
    padded = np.concatenate([history, x], axis=-2)
    out = np.zeros_like(x)
    for k in range(CONV_WIDTH):
        out += kernel[:, k] * padded[..., k : k + T, :]
    return out


def causal_conv1d_backward(x: Array, kernel: Array, dy: Array,
                           history: Array | None = None):
    """Returns (dx, dkernel) for y = causal_conv1d(x, kernel, history)."""
    T, c = x.shape[-2], x.shape[-1]
    if history is None:
        history = np.zeros(x.shape[:-2] + (CONV_WIDTH - 1, c))
    else:
        history = np.broadcast_to(history, x.shape[:-2] + (CONV_WIDTH - 1, c))
    padded = np.concatenate([history, x], axis=-2)
    dpadded = np.zeros_like(padded)
    dkernel = np.zeros_like(kernel)
    for k in range(CONV_WIDTH):
        dpadded[..., k : k + T, :] += kernel[:, k] * dy
        dkernel[:, k] = np.sum(
            (dy * padded[..., k : k + T, :]).reshape(-1, c), axis=0)
    return dpadded[..., CONV_WIDTH - 1 :, :], dkernel


# ---------------------------------------------------------------------------
# KV head replication (grouped-query -> multi-head expansion)
# ---------------------------------------------------------------------------

def repeat_kv(w: Array, head_dim: int, group: int) -> Array:
    """Repeat each head_dim-row block of w `group` consecutive times."""
    if group < 1:
        raise ValueError("group must be >= 1")
    rows, d = w.shape
    if rows % head_dim != 0:
        raise ValueError(f"rows {rows} not divisible by head_dim {head_dim}")
    n_heads = rows // head_dim
    blocks = w.reshape(n_heads, head_dim, d)
    return np.repeat(blocks, group, axis=0).reshape(n_heads * group * head_dim, d)


# ---------------------------------------------------------------------------
# Truncated SVD
# ---------------------------------------------------------------------------

class SvdResult:
    """Top-r factors A ~= U @ diag(sigma) @ V.T with deterministic signs."""

    def __init__(self, u: Array, sigma: Array, v: Array):
        self.u = u
        self.sigma = sigma
        self.v = v


def svd(a: Array, r: int) -> SvdResult:
    """Deterministic truncated SVD; each U column's largest-|entry| is positive."""
    a = np.asarray(a, dtype=np.float64)
    check_finite(a, "svd input")
    m, n = a.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for {m}x{n} matrix")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    u, s, v = u[:, :r], s[:r], vh[:r].T
    # Resolve sign ambiguity: flip columns so the dominant U entry is positive.
    pivot = np.abs(u).argmax(axis=0)
    signs = np.sign(u[pivot, np.arange(r)])
    signs[signs == 0] = 1.0
    return SvdResult(u * signs, s, v * signs)


# ---------------------------------------------------------------------------
# Rotary position embeddings (half-split pairing), with optional
# NTK-by-parts frequency rescaling for context extension
# ---------------------------------------------------------------------------

def rope_inv_freq(dim: int, theta: float) -> Array:
    return 1.0 / (theta ** (np.arange(0, dim, 2, dtype=np.float64) / dim))


def _ramp(low: float, high: float, n: int) -> Array:
    if low == high:
        high += 1e-3
    lin = (np.arange(n, dtype=np.float64) - low) / (high - low)
    return np.clip(lin, 0.0, 1.0)


def yarn_inv_freq(dim: int, theta: float, factor: float, orig_context: int,
                  beta_fast: float = 32.0, beta_slow: float = 1.0) -> Array:
    """NTK-by-parts rescaling: interpolate low frequencies by `factor`,
    keep high frequencies, blend over a ramp between the two regimes."""
    base = rope_inv_freq(dim, theta)
    if factor <= 1.0:
        return base

    def correction_dim(n_rot: float) -> float:
        return dim * np.log(orig_context / (n_rot * 2.0 * np.pi)) / (2.0 * np.log(theta))

    low = max(np.floor(correction_dim(beta_fast)), 0.0)
    high = min(np.ceil(correction_dim(beta_slow)), dim / 2 - 1.0)
    extrapolate_w = 1.0 - _ramp(low, high, dim // 2)
    return base / factor * (1.0 - extrapolate_w) + base * extrapolate_w


def yarn_mscale(factor: float) -> float:
    """Attention temperature applied to the rotary tables when extending context."""
    if factor <= 1.0:
        return 1.0
    return 0.1 * np.log(factor) + 1.0


def rope_tables(inv_freq: Array, positions: Array, mscale: float = 1.0):
    """cos/sin tables of shape (len(positions), dim) for half-split rotation."""
    ang = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    emb = np.concatenate([ang, ang], axis=-1)
    return np.cos(emb) * mscale, np.sin(emb) * mscale


def _rotate_half(x: Array) -> Array:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def apply_rope(x: Array, cos: Array, sin: Array) -> Array:
    """Rotate pairs (i, i + dim/2) of the last axis; tables broadcast over heads."""
    return x * cos + _rotate_half(x) * sin


def apply_rope_backward(dy: Array, cos: Array, sin: Array) -> Array:
    """Adjoint of apply_rope (inverse rotation when mscale == 1)."""
    return dy * cos - _rotate_half(dy) * sin

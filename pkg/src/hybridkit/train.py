"""Two-stage distillation harness, optimizer, gradient audit, and reports.

Stage I trains a pure-block student to match the teacher's per-layer hidden
states and mixer outputs (intermediate-layer alignment). Stage II fine-tunes
an assembled hybrid against the teacher's output distribution through one of
the KL paths; with no teacher it falls back to plain next-token cross-entropy
through the fused projection. Embeddings and the LM head stay frozen.

All runs are deterministic for a fixed seed. Teacher weights are never
touched: the teacher side runs forward-only.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .accounting import track_allocations
from .checkpoint import TeacherCheckpoint
from .hybrid import HybridModel, hybrid_backward, hybrid_forward
from .losses import (LossConfig, fused_linear_ce, ild_grads, kl_chunked,
                     kl_naive, kl_online, kl_hidden)
from .numerics import f32_resolution
from .teacher import teacher_forward

FROZEN = ("embedding", "lm_head")

KL_PATHS = ("naive", "chunked", "online", "hidden")


@dataclass
class TrainConfig:
    stage: int = 1
    context_len: int = 2048
    lr: float = 2e-4
    warmup_ratio: float = 0.01
    schedule: str = "cosine"
    steps: int = 100
    batch: int = 4
    seed: int = 0
    loss_path: str = "naive"
    kl_chunk: int = 4096
    vocab_tile: int = 128
    train_embeddings: bool = False
    grad_clip: float = 1.0   # global-norm clip; <= 0 disables
    swap_kl: bool = False    # distill with KL(teacher || student)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.loss_path not in KL_PATHS:
            raise ValueError(f"loss_path must be one of {KL_PATHS}")

    def loss_cfg(self) -> LossConfig:
        return LossConfig(kl_chunk=self.kl_chunk, vocab_tile=self.vocab_tile,
                          swap_direction=self.swap_kl)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    peak_transient_elements: int = 0

    def step_records(self):
        for i, loss in enumerate(self.losses):
            yield {"step": i, "loss": loss}

    def summary(self) -> dict:
        return {
            "steps": len(self.losses),
            "first_loss": self.losses[0] if self.losses else None,
            "final_loss": self.losses[-1] if self.losses else None,
            "metrics": self.metrics,
            "wall_clock_s": self.wall_clock_s,
            "peak_transient_elements": self.peak_transient_elements,
        }


class Adam:
    """Adam with cosine decay and linear warmup; updates stay on the f32 grid."""

    def __init__(self, params: dict, lr: float, total_steps: int,
                 warmup_ratio: float = 0.01, schedule: str = "cosine",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.total_steps = max(total_steps, 1)
        self.warmup_steps = max(int(round(warmup_ratio * self.total_steps)), 0)
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.schedule == "constant":
            return self.lr
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * progress))

    def step(self, grads: dict) -> None:
        lr_t = self.lr_at(self.t)
        self.t += 1
        norm_sq = sum(float(np.sum(g * g)) for n, g in grads.items()
                      if n in self.params)
        if not np.isfinite(norm_sq):
            return  # skip a blown-up step rather than poisoning the weights
        scale = 1.0
        if self.grad_clip > 0 and norm_sq > self.grad_clip ** 2:
            scale = self.grad_clip / np.sqrt(norm_sq)
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if scale != 1.0:
                g = g * scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / corr1) / (np.sqrt(self.v[name] / corr2) + self.eps)
            p[...] = f32_resolution(p - lr_t * update)


def trainable_params(model: HybridModel, train_embeddings: bool) -> dict:
    params = model.named_tensors()
    if not train_embeddings:
        for name in FROZEN:
            params.pop(name)
    return params


def _teacher_outputs(teacher, tokens, want_logits: bool, want_trace: bool = False):
    if isinstance(teacher, TeacherCheckpoint):
        return teacher_forward(teacher, tokens, want_logits=want_logits,
                               want_trace=want_trace)
    if isinstance(teacher, HybridModel):
        return hybrid_forward(teacher, tokens, want_logits=want_logits,
                              want_trace=want_trace)
    raise TypeError(f"unsupported teacher type {type(teacher)!r}")


def _clip(tokens: np.ndarray, context_len: int) -> np.ndarray:
    return tokens[:context_len] if tokens.size > context_len else tokens


def _draw_batch(data, rng, batch: int) -> list:
    """Sample a batch from a list, or draw fresh examples from a generator
    callable(rng) -> TrainExample."""
    if callable(data):
        return [data(rng) for _ in range(batch)]
    idx = rng.integers(0, len(data), size=batch)
    return [data[i] for i in idx]


def _stack_batch(batch: list, context_len: int):
    """Clip to the context length and the batch's shortest sequence, then
    stack tokens (B, T) and next-token loss masks (B, T-1)."""
    clipped = [_clip(ex.tokens, context_len) for ex in batch]
    T = min(t.size for t in clipped)
    tokens = np.stack([t[:T] for t in clipped])
    masks = np.zeros((len(batch), T - 1), dtype=bool)
    for i, ex in enumerate(batch):
        if ex.loss_mask is None:
            masks[i] = True
        else:
            masks[i] = ex.loss_mask[: T - 1]
    return tokens, masks


def train_stage1_ild(student: HybridModel, teacher, data: list,
                     cfg: TrainConfig) -> TrainReport:
    """Align student per-layer hidden states and mixer outputs to the teacher."""
    n_teacher_layers = (teacher.config.n_layers if hasattr(teacher, "config")
                        else len(teacher.layers))
    if len(student.layers) != n_teacher_layers:
        raise ValueError("student and teacher must have equal layer counts")
    rng = np.random.default_rng(cfg.seed)
    params = trainable_params(student, cfg.train_embeddings)
    opt = Adam(params, cfg.lr, cfg.steps, cfg.warmup_ratio, cfg.schedule,
               grad_clip=cfg.grad_clip)
    report = TrainReport()
    t0 = time.perf_counter()

    with track_allocations() as tracker:
        for _ in range(cfg.steps):
            tokens, _ = _stack_batch(_draw_batch(data, rng, cfg.batch),
                                     cfg.context_len)
            t_trace = _teacher_outputs(teacher, tokens, want_logits=False,
                                       want_trace=True)
            tapes: list = []
            s_trace = hybrid_forward(student, tokens, want_logits=False,
                                     want_trace=True, tapes=tapes)
            value, dh_list, da_list = ild_grads(s_trace, t_trace)
            grads = hybrid_backward(student, tapes, d_final=None,
                                    dh_layers=dh_list, da_layers=da_list)
            report.losses.append(float(value))
            opt.step(grads)
    report.peak_transient_elements = tracker.peak_elements
    report.wall_clock_s = time.perf_counter() - t0
    return report


def _kd_loss_and_dfinal(student: HybridModel, s_trace, teacher, tokens,
                        cfg: TrainConfig):
    """Batch distillation loss (token mean) and the gradient wrt the
    student's normed final hidden state, via the selected path."""
    loss_cfg = cfg.loss_cfg()
    final = s_trace.final_hidden
    lead = final.shape[:-1]
    if cfg.loss_path == "hidden":
        t_out = _teacher_outputs(teacher, tokens, want_logits=False)
        out = kl_hidden(final.reshape(-1, final.shape[-1]), student.lm_head,
                        t_out.final_hidden.reshape(-1, teacher.lm_head.shape[1]),
                        teacher.lm_head, loss_cfg)
        return out.value, out.grad.reshape(final.shape)
    t_out = _teacher_outputs(teacher, tokens, want_logits=True)
    path = {"naive": kl_naive, "chunked": kl_chunked, "online": kl_online}[cfg.loss_path]
    V = student.config.vocab
    out = path(s_trace.logits.reshape(-1, V), t_out.logits.reshape(-1, V), loss_cfg)
    return out.value, (out.grad @ student.lm_head).reshape(lead + (-1,))


def _ce_loss_and_dfinal(student: HybridModel, s_trace, tokens, loss_mask,
                        cfg: TrainConfig):
    """Next-token cross-entropy through the fused projection, restricted to
    `loss_mask` positions; token mean over the scored positions."""
    final = s_trace.final_hidden          # (B, T, d) or (T, d)
    h = final[..., :-1, :][loss_mask]
    targets = tokens[..., 1:][loss_mask]
    if targets.size == 0:
        return 0.0, np.zeros_like(final)
    out = fused_linear_ce(h, student.lm_head, targets, cfg.loss_cfg())
    d_final = np.zeros_like(final)
    d_final[..., :-1, :][loss_mask] = out.grad
    return out.value, d_final


def train_stage2_sft(student: HybridModel, teacher, data: list,
                     cfg: TrainConfig) -> TrainReport:
    """Fine-tune the assembled hybrid end to end: KL against the teacher's
    distribution when a teacher is given, next-token CE otherwise."""
    if teacher is not None:
        t_vocab = (teacher.config.vocab if hasattr(teacher, "config") else None)
        if t_vocab != student.config.vocab:
            raise ValueError("student and teacher vocabularies differ")
    rng = np.random.default_rng(cfg.seed)
    params = trainable_params(student, cfg.train_embeddings)
    opt = Adam(params, cfg.lr, cfg.steps, cfg.warmup_ratio, cfg.schedule,
               grad_clip=cfg.grad_clip)
    report = TrainReport()
    t0 = time.perf_counter()
    want_logits = teacher is not None and cfg.loss_path != "hidden"

    with track_allocations() as tracker:
        for _ in range(cfg.steps):
            tokens, masks = _stack_batch(_draw_batch(data, rng, cfg.batch),
                                         cfg.context_len)
            tapes: list = []
            s_trace = hybrid_forward(student, tokens, want_logits=want_logits,
                                     tapes=tapes)
            if teacher is not None:
                value, d_final = _kd_loss_and_dfinal(student, s_trace, teacher,
                                                     tokens, cfg)
            else:
                value, d_final = _ce_loss_and_dfinal(student, s_trace, tokens,
                                                     masks, cfg)
            grads = hybrid_backward(student, tapes, d_final=d_final)
            report.losses.append(float(value))
            opt.step(grads)
    report.peak_transient_elements = tracker.peak_elements
    report.wall_clock_s = time.perf_counter() - t0
    return report


def argmax_agreement(student: HybridModel, teacher, data: list,
                     context_len: int) -> float:
    """Fraction of positions where student and teacher next-token argmax agree."""
    agree = 0
    total = 0
    for ex in data:
        tokens = _clip(ex.tokens, context_len)
        s = hybrid_forward(student, tokens).logits
        t = _teacher_outputs(teacher, tokens, want_logits=True).logits
        agree += int(np.sum(np.argmax(s, axis=-1) == np.argmax(t, axis=-1)))
        total += tokens.size
    return agree / total


def audit_distillation(student: HybridModel, teacher, example,
                       cfg: TrainConfig, n_probes: int, seed: int = 0) -> float:
    """Gradient-audit residual of the configured training loss on one example."""
    tokens = _clip(example.tokens, cfg.context_len)
    params = trainable_params(student, cfg.train_embeddings)
    want_logits = teacher is not None and cfg.loss_path != "hidden"

    def loss_fn():
        tapes: list = []
        s_trace = hybrid_forward(student, tokens, want_logits=want_logits,
                                 tapes=tapes)
        if teacher is not None:
            value, d_final = _kd_loss_and_dfinal(student, s_trace, teacher,
                                                 tokens, cfg)
        else:
            mask = example.loss_mask
            if mask is not None and tokens.size < example.tokens.size:
                mask = mask[: tokens.size - 1]
            value, d_final = _ce_loss_and_dfinal(student, s_trace, tokens,
                                                 mask, cfg)
        return value, hybrid_backward(student, tapes, d_final=d_final)

    return grad_audit(loss_fn, params, n_probes, seed=seed)


def grad_audit(loss_fn, params: dict, n_params: int, seed: int = 0,
               rel_step: float = 1e-3) -> float:
    """Max relative error between analytic gradients and central finite
    differences over `n_params` randomly probed scalar parameters.

    `loss_fn()` evaluates the loss at the current parameter values and returns
    (value, grads dict); probes perturb parameters in place and restore them.
    """
    if n_params < 1:
        raise ValueError("n_params must be >= 1")
    rng = np.random.default_rng(seed)
    _, grads = loss_fn()
    names = [n for n in sorted(params) if n in grads and params[n].size > 0]
    worst = 0.0
    for _ in range(n_params):
        name = names[rng.integers(0, len(names))]
        arr = params[name]
        flat = rng.integers(0, arr.size)
        idx = np.unravel_index(flat, arr.shape)
        base = arr[idx]
        h = rel_step * max(abs(base), 1e-2)
        arr[idx] = base + h
        up, _ = loss_fn()
        arr[idx] = base - h
        down, _ = loss_fn()
        arr[idx] = base
        fd = (up - down) / (2 * h)
        an = grads[name][idx]
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst

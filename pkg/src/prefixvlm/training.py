"""Staged training: freezing, input noising, AdamW with cosine decay,
gradient accumulation and clipping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX, NOISE_ID, build_batch
from .masks import MaskKind
from .model import Component, assemble_inputs, decoder_forward, encode_image, project, stack_bias

log = logging.getLogger(__name__)

MIN_LR = 1e-8


@dataclass(frozen=True)
class StageConfig:
    stage: int
    mask_kind: MaskKind
    lr_vision: float
    lr_projector: float
    lr_language: float
    noise_rate: float = 0.0
    epochs: int = 1
    global_batch: int = 32
    micro_batch: int = 8
    min_lr: float = MIN_LR
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mask_kind", MaskKind(self.mask_kind))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.stage not in (0, 1, 2, 3):
            raise ValueError(f"stage must be 0..3, got {self.stage}")
        if self.stage == 0:
            if self.mask_kind is not MaskKind.FULL_BIDIRECTIONAL:
                raise ValueError("stage 0 uses the fully bidirectional mask")
            if self.lr_vision != 0 or self.lr_language != 0:
                raise ValueError("stage 0 trains the projector only")
        else:
            if self.mask_kind is not MaskKind.IMAGE_BIDI_TEXT_CAUSAL:
                raise ValueError("stages 1-3 use the image-bidirectional/text-causal mask")
            if self.noise_rate != 0:
                raise ValueError("only stage 0 noises its input")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if min(self.lr_vision, self.lr_projector, self.lr_language) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.global_batch % self.micro_batch:
            raise ValueError("global_batch must be divisible by micro_batch")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")

    @property
    def peak_lrs(self):
        return {Component.VISION: self.lr_vision, Component.PROJECTOR: self.lr_projector,
                Component.LANGUAGE: self.lr_language}

    @property
    def trainable(self):
        return {c for c, lr in self.peak_lrs.items() if lr > 0}

    def to_dict(self):
        d = asdict(self)
        d["mask_kind"] = self.mask_kind.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_FULL_LRS = {
    0: (0.0, 1e-3, 0.0),
    1: (0.0, 1e-3, 0.0),
    2: (5e-6, 2e-3, 2e-5),
    3: (5e-6, 1e-4, 2e-5),
}

# From-scratch weights need far larger encoder/decoder rates than fine-tuning
# pretrained ones; the freezing pattern and projector rates are unchanged.
_DESK_LRS = {
    0: (0.0, 1e-3, 0.0),
    1: (0.0, 1e-3, 0.0),
    2: (3e-3, 3e-3, 3e-3),
    3: (3e-3, 1e-4, 3e-3),
}


def stage_preset(stage, scale="desk", **overrides):
    """Per-stage defaults; ``scale`` is ``"full"`` (batch 128, one epoch) or ``"desk"``."""
    if scale == "full":
        lrs, batch, micro, epochs = _FULL_LRS[stage], 128, 8, 1
    elif scale == "desk":
        lrs, batch, micro, epochs = _DESK_LRS[stage], 32, 8, 100
    else:
        raise ValueError(f"unknown scale {scale!r}")
    cfg = StageConfig(
        stage=stage,
        mask_kind=MaskKind.FULL_BIDIRECTIONAL if stage == 0 else MaskKind.IMAGE_BIDI_TEXT_CAUSAL,
        lr_vision=lrs[0], lr_projector=lrs[1], lr_language=lrs[2],
        noise_rate=0.2 if stage == 0 else 0.0,
        epochs=epochs, global_batch=batch, micro_batch=micro,
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def noise_input(text_ids, noise_rate, seed):
    """Replace ``round(noise_rate * T)`` distinct positions with <noise>.

    Returns ``(noised_ids, labels)``; labels are the untouched originals.
    """
    ids = np.asarray(text_ids, dtype=np.int64)
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError("noise_rate must lie in [0, 1]")
    count = int(math.floor(noise_rate * len(ids) + 0.5))
    noised = ids.copy()
    if count:
        picks = np.random.default_rng(seed).choice(len(ids), size=count, replace=False)
        noised[picks] = NOISE_ID
    return noised, ids.copy()


def _noise_batch(batch, noise_rate):
    text = batch.text_ids.copy()
    for row, (length, seed) in enumerate(zip(batch.lengths, batch.seeds)):
        text[row, :length], _ = noise_input(text[row, :length], noise_rate, int(seed))
    return text


def _loss(batch, params, cfg, kind, text_ids, retain_inputs=False):
    P = project(encode_image(batch.images, params, cfg), params)
    I, layouts = assemble_inputs(P, text_ids, params, cfg, lengths=batch.lengths)
    if retain_inputs:
        I.retain_grad()
    logits = decoder_forward(I, stack_bias(layouts, kind), params, cfg)
    loss = T.cross_entropy(logits, batch.labels, ignore_index=IGNORE_INDEX)
    return (loss, I) if retain_inputs else loss


def forward_stage0(batch, params, cfg, stage_cfg, retain_inputs=False):
    """Encode, project, noise text, embed, concatenate, unmask everything,
    decode and score against the clean next-token labels."""
    if stage_cfg.stage != 0:
        raise ValueError("forward_stage0 needs a stage-0 config")
    text = _noise_batch(batch, stage_cfg.noise_rate)
    return _loss(batch, params, cfg, MaskKind.FULL_BIDIRECTIONAL, text, retain_inputs)


def forward_stage(batch, params, cfg, stage_cfg):
    """Stages 1-3: clean text under the image-bidirectional/text-causal mask."""
    if stage_cfg.stage not in (1, 2, 3):
        raise ValueError("forward_stage needs a stage 1-3 config")
    return _loss(batch, params, cfg, stage_cfg.mask_kind, batch.text_ids)


def stage_loss(batch, params, cfg, stage_cfg):
    if stage_cfg.stage == 0:
        return forward_stage0(batch, params, cfg, stage_cfg)
    return forward_stage(batch, params, cfg, stage_cfg)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class ScheduleState:
    step: int
    total_steps: int
    peak: dict = field(default_factory=dict)
    min_lr: float = MIN_LR


def cosine_lr(state, peak):
    """min_lr + (peak - min_lr) (1 + cos(pi step / total)) / 2; 0 stays 0 (frozen)."""
    if state.total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= state.step <= state.total_steps:
        raise ValueError(f"step {state.step} outside [0, {state.total_steps}]")
    if peak == 0:
        return 0.0
    return state.min_lr + 0.5 * (peak - state.min_lr) * (
        1.0 + math.cos(math.pi * state.step / state.total_steps))


def component_lrs(state):
    return {c: cosine_lr(state, peak) for c, peak in state.peak.items()}


def _trainable(params):
    return [(n, t) for n, t in params.items() if t.requires_grad]


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the scale."""
    grads = [t.grad for _, t in _trainable(params) if t.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(total):
        raise FloatingPointError("non-finite gradient norm")
    if total <= max_norm:
        return 1.0
    scale = max_norm / total
    for _, t in _trainable(params):
        if t.grad is not None:
            t.grad = t.grad * scale
    return scale


class AdamW:
    """Adam with decoupled weight decay; only parameters with a positive rate get state."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, lrs):
        """``lrs`` maps Component to the learning rate for this step."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, t in params.items():
            lr = lrs.get(params.component(name), 0.0)
            if lr == 0.0 or not t.requires_grad:
                continue
            if t.grad is None:
                raise ValueError(f"missing gradient for {name}")
            g = t.grad
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            theta = t.data - lr * self.weight_decay * t.data
            t.data = theta - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, opt, lrs):
    opt.step(params, lrs)


def accumulate_and_step(micro_batches, params, opt, model_cfg, stage_cfg, lrs):
    """Backprop each micro-batch, combine, clip and take one optimizer step.

    Each micro-batch loss is a per-token mean; the micro losses are weighted by
    their supervised-token share, which reduces to a plain average when the
    counts match and makes the result equal to one full-batch step in general.
    Returns ``(loss, clip_scale)``.
    """
    if not micro_batches:
        raise ValueError("no micro-batches")
    widths = {b.images.shape[1:] for b in micro_batches}
    if len(widths) != 1:
        raise ValueError("micro-batches disagree on image shape")
    params.zero_grad()
    counts = [b.num_supervised for b in micro_batches]
    total = sum(counts)
    loss_value = 0.0
    for batch, count in zip(micro_batches, counts):
        loss = stage_loss(batch, params, model_cfg, stage_cfg)
        weight = count / total
        loss_value += weight * loss.item()
        (loss * weight).backward()
    for _, t in _trainable(params):
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    scale = clip_grad_norm(params, stage_cfg.clip_norm)
    opt.step(params, lrs)
    params.zero_grad()
    return loss_value, scale


# ---------------------------------------------------------------------------
# stage driver
# ---------------------------------------------------------------------------

def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def steps_per_epoch(n, stage_cfg):
    return math.ceil(n / stage_cfg.global_batch)


@dataclass
class CurveRow:
    step: int
    lr_vision: float
    lr_projector: float
    lr_language: float
    loss: float


def run_stage(dataset, params, stage_cfg, model_cfg, vocab, seed=0, out_dir=None,
              max_steps=None, callback=None):
    """Train one stage; returns ``(params, curve)`` with ``params`` a fresh copy.

    Runs ``epochs * ceil(N / global_batch)`` steps (or ``max_steps`` if
    smaller) and, when ``out_dir`` is given, writes the checkpoint and the
    loss-curve CSV there.
    """
    if not dataset:
        raise ValueError("empty dataset")
    params = params.copy()
    params.set_trainable(stage_cfg.trainable)
    n = len(dataset)
    total = stage_cfg.epochs * steps_per_epoch(n, stage_cfg)
    if max_steps is not None:
        total = min(total, max_steps)
    opt = AdamW(stage_cfg.betas, stage_cfg.eps, stage_cfg.weight_decay)
    sched = ScheduleState(0, total, stage_cfg.peak_lrs, stage_cfg.min_lr)
    sample_seeds = np.random.default_rng([seed, 7919]).integers(0, 2**31 - 1, size=(total, n))
    curve = []
    step = 0
    for epoch in range(stage_cfg.epochs):
        order = epoch_order(n, seed, epoch)
        for start in range(0, n, stage_cfg.global_batch):
            if step >= total:
                break
            idx = order[start:start + stage_cfg.global_batch]
            micro = []
            for m0 in range(0, len(idx), stage_cfg.micro_batch):
                part = idx[m0:m0 + stage_cfg.micro_batch]
                micro.append(build_batch([dataset[i] for i in part], stage_cfg.stage, vocab,
                                         model_cfg, seeds=sample_seeds[step, part]))
            sched.step = step
            lrs = component_lrs(sched)
            loss, _ = accumulate_and_step(micro, params, opt, model_cfg, stage_cfg, lrs)
            row = CurveRow(step, lrs[Component.VISION], lrs[Component.PROJECTOR],
                           lrs[Component.LANGUAGE], loss)
            curve.append(row)
            if callback is not None:
                callback(row)
            log.debug("stage %d step %d loss %.6f", stage_cfg.stage, step, loss)
            step += 1
    params.set_trainable(set(Component))
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.vlm", params, model_cfg, vocab=vocab,
                        extra={"stage": stage_cfg.stage, "seed": seed})
        write_curve(out / "loss_curve.csv", curve)
    return params, curve


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr_vision", "lr_projector", "lr_language", "loss"])
        for r in curve:
            w.writerow([r.step, repr(r.lr_vision), repr(r.lr_projector), repr(r.lr_language),
                        repr(r.loss)])


def run_pipeline(dataset, model_cfg, vocab, stages=(0, 1, 2), seed=0, steps=None, params=None,
                 scale="desk", overrides=None, out_dir=None):
    """Run several stages back to back from fresh (or given) weights.

    ``steps`` caps each stage; ``overrides`` maps a stage to StageConfig
    field overrides. Returns ``(params, {stage: curve})``.
    """
    from .model import VLMParams

    if params is None:
        params = VLMParams.init(model_cfg, seed)
    curves = {}
    for stage in stages:
        stage_cfg = stage_preset(stage, scale, **(overrides or {}).get(stage, {}))
        sub = None if out_dir is None else Path(out_dir) / f"stage{stage}"
        params, curves[stage] = run_stage(dataset, params, stage_cfg, model_cfg, vocab, seed=seed,
                                          out_dir=sub, max_steps=steps)
    return params, curves

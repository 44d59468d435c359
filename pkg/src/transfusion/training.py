"""Training examples, the joint LM + diffusion objective and the optimization loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import diffusion
from .diffusion import NoiseSchedule
from .model import Batch, ForwardOutput, TransfusionModel, collate, count_flops, count_params
from .seqcore import (DEFAULT_VOCAB, LatentImage, MixedSequence, Patch, Token, Vocabulary,
                      assemble_sequence, encode_text, patchify)

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    lam: float = 5.0
    lr: float = 3e-4
    lr_floor: float = 1.5e-5
    warmup_steps: int = 100
    max_steps: int = 2000
    batch_size: int = 32
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    caption_first_prob: float = 0.8
    caption_dropout_prob: float = 0.1
    noise_limit: int | None = None
    T: int = 1000
    cosine_offset: float = 0.008
    mask_kind: str = "transfusion"
    include_markers: bool = False
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("caption_first_prob", "caption_dropout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_steps < 0 or self.batch_size < 1:
            raise ValueError("max_steps must be >= 0 and batch_size >= 1")
        if self.mask_kind not in ("transfusion", "causal"):
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.noise_limit is not None and not 1 <= self.noise_limit <= self.T:
            raise ValueError(f"noise_limit must lie in [1, {self.T}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class LossBreakdown:
    lm_loss: torch.Tensor
    ddpm_loss: torch.Tensor
    total: torch.Tensor
    tokens_counted: int
    images_counted: int

    def as_floats(self) -> dict:
        return {"lm": float(self.lm_loss.detach()), "ddpm": float(self.ddpm_loss.detach()),
                "total": float(self.total.detach()),
                "tokens": self.tokens_counted, "images": self.images_counted}


@dataclass
class TrainingExample:
    seq: MixedSequence
    lm_mask: np.ndarray
    eps: np.ndarray  # (num_patches, patch_dim), patchified like the input
    t: int
    caption_first: bool
    dropped: bool


def apply_lm_mask(seq: MixedSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> np.ndarray:
    """True at position i when element i is a non-BOI token and element i+1 is a token."""
    els = seq.elements
    out = np.zeros(len(els), dtype=bool)
    for i in range(len(els) - 1):
        cur, nxt = els[i], els[i + 1]
        out[i] = isinstance(cur, Token) and cur.id != vocab.boi and isinstance(nxt, Token)
    return out


def make_training_example(caption: str, image: LatentImage, cfg: TrainConfig,
                          rng: np.random.Generator, sched: NoiseSchedule, patch_window: int,
                          vocab: Vocabulary = DEFAULT_VOCAB) -> TrainingExample:
    caption_first = bool(rng.random() < cfg.caption_first_prob)
    dropped = bool(rng.random() < cfg.caption_dropout_prob)
    limit = cfg.noise_limit if not caption_first else None
    t = diffusion.sample_timestep(rng, sched.T, limit)
    eps = rng.standard_normal(image.data.shape)
    x_t = diffusion.add_noise(image.data, t, eps, sched)
    patches = patchify(x_t, patch_window)
    grid = (image.data.shape[0] // patch_window, image.data.shape[1] // patch_window)
    ids = [] if dropped else encode_text(caption, vocab)
    seq = assemble_sequence(ids, patches, grid, caption_first, vocab)
    return TrainingExample(seq, apply_lm_mask(seq, vocab), np.stack(patchify(eps, patch_window)),
                           t, caption_first, dropped)


@dataclass
class TrainBatch:
    batch: Batch
    targets: torch.Tensor  # (B, L) next-token ids
    lm_mask: torch.Tensor  # (B, L) bool
    eps: torch.Tensor  # (N, patch_dim)

    def to(self, dtype: torch.dtype) -> "TrainBatch":
        return TrainBatch(self.batch.to(dtype), self.targets, self.lm_mask, self.eps.to(dtype))


def next_token_targets(ids: torch.Tensor, pad: int) -> torch.Tensor:
    return torch.cat([ids[:, 1:], torch.full_like(ids[:, :1], pad)], dim=1)


def collate_examples(examples: Sequence[TrainingExample], cfg: TrainConfig | None = None,
                     vocab: Vocabulary = DEFAULT_VOCAB, dtype: torch.dtype = torch.float32) -> TrainBatch:
    mask_kind = cfg.mask_kind if cfg else "transfusion"
    markers = cfg.include_markers if cfg else False
    batch = collate([e.seq for e in examples], [[e.t] * len(e.seq.image_spans) for e in examples],
                    mask_kind, markers, vocab, dtype)
    L = batch.ids.shape[1]
    lm_mask = torch.zeros_like(batch.ids, dtype=torch.bool)
    for b, e in enumerate(examples):
        lm_mask[b, :len(e.lm_mask)] = torch.from_numpy(e.lm_mask)
    eps_rows = [e.eps for e in examples if len(e.seq.image_spans)]
    eps = (torch.from_numpy(np.concatenate(eps_rows)).to(dtype) if eps_rows
           else torch.zeros((0, batch.patches.shape[-1] if batch.patches.ndim == 2 else 0), dtype=dtype))
    return TrainBatch(batch, next_token_targets(batch.ids, vocab.pad), lm_mask, eps)


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL over positions where ``mask`` is set (0 when none are)."""
    if not mask.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[mask], targets[mask])


def ddpm_image_loss(eps_pred: torch.Tensor, eps: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Squared error averaged within each image, then across images."""
    if not batch.images:
        return eps_pred.sum() * 0.0
    per_image = torch.stack([(eps_pred[img.rows] - eps[img.rows]).pow(2).mean() for img in batch.images])
    return per_image.mean()


def transfusion_loss(tb: TrainBatch, out: ForwardOutput, lam: float) -> LossBreakdown:
    lm = lm_loss(out.logits, tb.targets, tb.lm_mask)
    dd = ddpm_image_loss(out.eps_pred, tb.eps, tb.batch)
    return LossBreakdown(lm, dd, lm + lam * dd, int(tb.lm_mask.sum()), len(tb.batch.images))


def baseline_lm_loss(logits: torch.Tensor, ids: torch.Tensor, lengths: torch.Tensor,
                     pad: int = DEFAULT_VOCAB.pad) -> torch.Tensor:
    """Next-token loss over every real position of token-only sequences."""
    pos = torch.arange(ids.shape[1])[None, :]
    mask = pos < (lengths[:, None] - 1)
    return lm_loss(logits, next_token_targets(ids, pad), mask)


# ----------------------------------------------------------------------------
# Optimization


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``lr_floor`` at ``max_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.max_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay = [p for p in model.parameters() if p.ndim >= 2]
    no_decay = [p for p in model.parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)


def _check_finite(loss: torch.Tensor, what: str, step: int):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {what} ({float(loss.detach())}) at step {step}")


def train_step(model: TransfusionModel, opt: torch.optim.Optimizer, tb: TrainBatch,
               cfg: TrainConfig, step: int) -> LossBreakdown:
    for group in opt.param_groups:
        group["lr"] = lr_at(step, cfg)
    model.train()
    out = model(tb.batch)
    losses = transfusion_loss(tb, out, cfg.lam)
    _check_finite(losses.total, "loss", step)
    opt.zero_grad(set_to_none=True)
    losses.total.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    _check_finite(norm, "gradient norm", step)
    opt.step()
    return losses


def baseline_step(model: TransfusionModel, opt: torch.optim.Optimizer, batch: Batch,
                  cfg: TrainConfig, step: int) -> torch.Tensor:
    for group in opt.param_groups:
        group["lr"] = lr_at(step, cfg)
    model.train()
    loss = baseline_lm_loss(model(batch).logits, batch.ids, batch.lengths)
    _check_finite(loss, "loss", step)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    _check_finite(norm, "gradient norm", step)
    opt.step()
    return loss


# ----------------------------------------------------------------------------
# Data streams


class ExampleStream:
    """Endless seeded stream of noised training batches over (caption, latent) pairs."""

    def __init__(self, pairs: Sequence[tuple[str, LatentImage]], cfg: TrainConfig,
                 sched: NoiseSchedule, patch_window: int, vocab: Vocabulary = DEFAULT_VOCAB):
        self.pairs = list(pairs)
        self.cfg, self.sched, self.k, self.vocab = cfg, sched, patch_window, vocab
        self.rng = np.random.default_rng([cfg.seed, 1])

    def examples(self, n: int) -> list[TrainingExample]:
        idx = self.rng.integers(len(self.pairs), size=n)
        return [make_training_example(*self.pairs[i], self.cfg, self.rng, self.sched, self.k, self.vocab)
                for i in idx]

    def __iter__(self):
        while True:
            yield collate_examples(self.examples(self.cfg.batch_size), self.cfg, self.vocab)


def baseline_sequence(caption_ids: Sequence[int], image_ids: Sequence[int], caption_first: bool,
                      vocab: Vocabulary = DEFAULT_VOCAB) -> MixedSequence:
    """Token-only layout ``BOS caption BOI image-ids EOI`` (or image first)."""
    image = [vocab.boi, *image_ids, vocab.eoi]
    ids = [vocab.bos] + (list(caption_ids) + image if caption_first else image + list(caption_ids))
    return MixedSequence([Token(int(i)) for i in ids])


def run_training(model: TransfusionModel, batches: Iterable, cfg: TrainConfig,
                 step_fn: Callable | None = None, metrics_path: Path | None = None,
                 on_checkpoint: Callable[[int], None] | None = None,
                 tokens_per_batch: Callable | None = None) -> list[dict]:
    """Drive ``cfg.max_steps`` optimizer steps, appending JSON lines to ``metrics_path``."""
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    n_params = count_params(model)
    history = []
    flops = 0.0
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        it = iter(batches)
        for step in range(cfg.max_steps):
            item = next(it)
            if step_fn is None:
                losses = train_step(model, opt, item, cfg, step).as_floats()
                tokens = int(item.batch.lengths.sum())
            else:
                losses = step_fn(model, opt, item, cfg, step)
                tokens = int(item.lengths.sum())
            flops += count_flops(n_params, tokens)
            row = {"step": step, **losses, "seq_tokens": tokens, "lr": lr_at(step, cfg), "flops": flops}
            history.append(row)
            if sink and (step % cfg.log_every == 0 or step == cfg.max_steps - 1):
                sink.write(json.dumps(row, sort_keys=True) + "\n")
                sink.flush()
            if step % max(cfg.log_every * 10, 1) == 0:
                log.info("step %d %s", step, {k: round(v, 4) for k, v in losses.items()
                                              if isinstance(v, float)})
            if on_checkpoint and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                on_checkpoint(step + 1)
    finally:
        if sink:
            sink.close()
    return history

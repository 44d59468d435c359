"""Held-out perplexity, text-to-image class accuracy and the side-by-side report."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .codec import raw_latent, raw_pixels
from .data import ToyExample, classify_image, parse_caption
from .diffusion import NoiseSchedule, SamplerControls
from .inference import force_image
from .model import TransfusionModel, collate
from .seqcore import DEFAULT_VOCAB, Vocabulary, assemble_sequence, encode_text
from .training import apply_lm_mask, next_token_targets


@dataclass
class EvalReport:
    perplexity: float
    image_accuracy: float | None
    diffusion_val_loss: float | None
    flops_estimate: float
    runtime_s: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.perplexity < 1.0 - 1e-9:
            raise ValueError("perplexity below 1")

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def caption_nll(model: TransfusionModel, captions: Sequence[str], vocab: Vocabulary = DEFAULT_VOCAB,
                batch_size: int = 64) -> tuple[float, int]:
    """Summed NLL and count over LM-loss positions of text-only caption sequences."""
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(captions), batch_size):
        seqs = [assemble_sequence(encode_text(c, vocab), [], None, True, vocab)
                for c in captions[i:i + batch_size]]
        batch = collate(seqs, vocab=vocab, dtype=next(model.parameters()).dtype)
        mask = torch.zeros_like(batch.ids, dtype=torch.bool)
        for b, s in enumerate(seqs):
            mask[b, :len(s)] = torch.from_numpy(apply_lm_mask(s, vocab))
        logits = model(batch).logits
        targets = next_token_targets(batch.ids, vocab.pad)
        nll = F.cross_entropy(logits[mask].double(), targets[mask], reduction="sum")
        total += float(nll)
        count += int(mask.sum())
    return total, count


def eval_perplexity(model: TransfusionModel, captions: Sequence[str],
                    vocab: Vocabulary = DEFAULT_VOCAB) -> float:
    if not captions:
        raise ValueError("empty validation set")
    total, count = caption_nll(model, captions, vocab)
    return math.exp(total / count)


@torch.no_grad()
def eval_diffusion_loss(model: TransfusionModel, examples: Sequence[ToyExample], sched: NoiseSchedule,
                        seed: int = 0, vocab: Vocabulary = DEFAULT_VOCAB) -> float:
    """Mean per-image noise MSE on caption-first validation pairs, t uniform."""
    from .training import TrainConfig, collate_examples, ddpm_image_loss, make_training_example
    cfg = TrainConfig(caption_first_prob=1.0, caption_dropout_prob=0.0, T=sched.T)
    rng = np.random.default_rng(seed)
    k = model.cfg.patch_window
    exs = [make_training_example(e.caption, raw_latent(e.pixels), cfg, rng, sched, k, vocab)
           for e in examples]
    losses = []
    model.eval()
    for i in range(0, len(exs), 64):
        tb = collate_examples(exs[i:i + 64], cfg, vocab, next(model.parameters()).dtype)
        out = model(tb.batch)
        losses.append(float(ddpm_image_loss(out.eps_pred, tb.eps, tb.batch)) * len(tb.batch.images))
    return sum(losses) / len(exs)


def eval_text_to_image(model: TransfusionModel, prompts: Sequence[str], controls: SamplerControls,
                       sched: NoiseSchedule, grid: tuple[int, int], mask_kind: str = "transfusion",
                       return_images: bool = False):
    """Fraction of prompts whose generated image classifies as the prompted class.

    Prompt ``i`` samples with seed ``controls.seed + i``.
    """
    hits = 0
    images = []
    for i, caption in enumerate(prompts):
        color, shape = parse_caption(caption)
        ctl = dataclasses.replace(controls, seed=controls.seed + i)
        latent = force_image(model, caption, ctl, sched, grid, mask_kind)
        pixels = np.clip(raw_pixels(latent), 0.0, 1.0)
        hits += classify_image(pixels).matches(color, shape)
        if return_images:
            images.append(pixels)
    acc = hits / len(prompts)
    return (acc, images) if return_images else acc


def evaluate(model: TransfusionModel, val: Sequence[ToyExample], sched: NoiseSchedule,
             controls: SamplerControls, tokens_seen: int = 0, num_prompts: int | None = None,
             mask_kind: str = "transfusion", image_size: int = 16) -> EvalReport:
    from .model import count_flops
    start = time.time()
    captions = [e.caption for e in val]
    ppl = eval_perplexity(model, captions)
    dloss = eval_diffusion_loss(model, val, sched)
    k = model.cfg.patch_window
    prompts = captions if num_prompts is None else captions[:num_prompts]
    acc = eval_text_to_image(model, prompts, controls, sched, (image_size // k, image_size // k),
                             mask_kind)
    return EvalReport(ppl, acc, dloss, count_flops(model, tokens_seen), time.time() - start,
                      {"num_prompts": len(prompts), "cfg_weight": controls.cfg_weight,
                       "num_steps": controls.num_steps})

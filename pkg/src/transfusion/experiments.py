"""Small reproducible training runs: batch overfitting, toy text-to-image and ablation smoke runs."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baseline import BaselineConfig, baseline_model_config, fit_tokenizer, tokenize_pairs
from .codec import raw_latent, tokens_from_image, image_from_tokens, vq_quantize
from .cli import evaluate_run, load_run, train_run
from .data import ToyDatasetSpec, make_examples
from .diffusion import SamplerControls, make_cosine_schedule
from .model import ModelConfig, collate, init_params
from .training import (TrainConfig, baseline_lm_loss, baseline_sequence, baseline_step, collate_examples,
                       make_optimizer, make_training_example, train_step, transfusion_loss)


@dataclass
class OverfitResult:
    lm: float
    ddpm: float
    steps: int
    seconds: float
    history: list = field(default_factory=list)


def overfit_examples(n: int = 8, seed: int = 0, T: int = 100, patch_window: int = 2):
    """``n`` examples of distinct classes, image first, with noise and timesteps drawn once.

    With the image first every caption byte is determined by the image that
    precedes it, so the LM loss can approach zero.
    """
    toy = make_examples(ToyDatasetSpec(num_train=16, num_val=0, seed=seed))
    cfg = TrainConfig(T=T, caption_first_prob=0.0, caption_dropout_prob=0.0, seed=seed)
    sched = make_cosine_schedule(T)
    rng = np.random.default_rng(seed)
    return [make_training_example(e.caption, raw_latent(e.pixels), cfg, rng, sched, patch_window)
            for e in toy[:n]], cfg


def overfit_batch(steps: int = 300, lr: float = 1e-3, seed: int = 0, log_every: int = 25,
                  model_cfg: ModelConfig | None = None) -> OverfitResult:
    mcfg = model_cfg or ModelConfig(layers=4, embed_dim=128, heads=4)
    examples, base = overfit_examples(seed=seed, T=100, patch_window=mcfg.patch_window)
    tb = collate_examples(examples, base)
    cfg = TrainConfig(T=100, lr=lr, lr_floor=lr, warmup_steps=10, max_steps=steps, weight_decay=0.0,
                      seed=seed)
    torch.manual_seed(seed)
    model = init_params(mcfg, seed)
    opt = make_optimizer(model, cfg)
    start = time.time()
    history = []
    for step in range(steps):
        parts = train_step(model, opt, tb, cfg, step).as_floats()
        if step % log_every == 0 or step == steps - 1:
            history.append({"step": step, **parts})
    model.eval()
    with torch.no_grad():
        final = transfusion_loss(tb, model(tb.batch), cfg.lam).as_floats()
    return OverfitResult(final["lm"], final["ddpm"], steps, time.time() - start, history)


@dataclass
class BaselineOverfitResult:
    lm: float
    steps: int
    seconds: float
    roundtrip_agreement: float


def baseline_overfit(steps: int = 300, lr: float = 1e-3, seed: int = 0,
                     bcfg: BaselineConfig | None = None) -> BaselineOverfitResult:
    """Same eight examples as :func:`overfit_batch`, images tokenized by a trained VQ codebook."""
    bcfg = bcfg or BaselineConfig(vq_steps=800)
    toy = make_examples(ToyDatasetSpec(num_train=16, num_val=0, seed=seed))[:8]
    latents = np.stack([raw_latent(e.pixels).data for e in toy])
    tok = fit_tokenizer(latents, bcfg, seed)
    pairs = tokenize_pairs([(e.caption, raw_latent(e.pixels)) for e in toy], tok)
    seqs = [baseline_sequence(c, img, caption_first=False) for c, img in pairs]
    batch = collate(seqs, mask_kind="causal")
    mcfg = baseline_model_config(ModelConfig(layers=4, embed_dim=128, heads=4), bcfg)
    cfg = TrainConfig(lr=lr, lr_floor=lr, warmup_steps=10, max_steps=steps, weight_decay=0.0, seed=seed)
    torch.manual_seed(seed)
    model = init_params(mcfg, seed)
    opt = make_optimizer(model, cfg)
    start = time.time()
    for step in range(steps):
        baseline_step(model, opt, batch, cfg, step)
    model.eval()
    with torch.no_grad():
        loss = float(baseline_lm_loss(model(batch).logits, batch.ids, batch.lengths))
    return BaselineOverfitResult(loss, steps, time.time() - start, codebook_agreement(tok, latents))


def codebook_agreement(tok, latents: np.ndarray) -> float:
    """Fraction of windows whose token round-trip equals an exhaustive nearest-code search."""
    agree = total = 0
    book = tok.codebook.detach().double()
    offset = 1000
    for latent in latents:
        ids = tokens_from_image(latent, tok, offset)
        x = torch.from_numpy(latent.astype(np.float32))[None]
        with torch.no_grad():
            enc = tok.encoder(tok.windows(x))[0]
            _, q, _ = vq_quantize(enc, tok.codebook)
        z = enc.double()
        d = ((z[:, None, :] - book[None]) ** 2).sum(-1)
        oracle = d.argmin(-1).tolist()
        back = image_from_tokens(ids, tok, offset, (x.shape[1] // tok.window, x.shape[2] // tok.window))
        with torch.no_grad():
            expect = tok.unwindows(tok.decoder(q)[None], (x.shape[1] // tok.window, x.shape[2] // tok.window))[0]
        exact = np.array_equal(back.data, expect.numpy().astype(np.float64))
        for got, want in zip(ids, oracle):
            agree += int(got - offset == want and exact)
            total += 1
    return agree / total


ABLATIONS = {
    "default": {},
    "mask-causal": {"mask_kind": "causal"},
    "codec-unet": {"codec_kind": "unet"},
    "noise-limit": {"noise_limit": 10},
}


def ablation_smoke(data_dir, out_root, steps: int = 20, seed: int = 0) -> dict[str, dict]:
    """Train and evaluate a tiny run per ablation switch from identical seeds and data.

    Returns, per switch, the logged metric stream and a short evaluation.
    """
    out_root = Path(out_root)
    results = {}
    for name, change in ABLATIONS.items():
        mcfg = ModelConfig(layers=2, embed_dim=32, heads=2,
                           codec_kind=change.get("codec_kind", "linear"), unet_channels=(8, 16))
        tcfg = TrainConfig(max_steps=steps, batch_size=8, warmup_steps=2, T=20, log_every=1, seed=seed,
                           mask_kind=change.get("mask_kind", "transfusion"),
                           noise_limit=change.get("noise_limit"))
        out = train_run(mcfg, tcfg, BaselineConfig(), "transfusion", data_dir, out_root / name)
        stream = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        report = evaluate_run(load_run(out), data_dir, SamplerControls(num_steps=4), num_prompts=4)
        results[name] = {"metrics": stream, "report": report.to_dict()}
    return results

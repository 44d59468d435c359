"""Central finite-difference check of the joint loss gradients.

Every named parameter tensor is a group. For each group a handful of entries
is perturbed (the largest analytic gradients plus a few random picks), and the
relative error ``|g_fd - g_an| / max(|g_fd|, |g_an|)`` is taken over those
entries as vectors. Groups whose sampled gradients are all exactly zero on
both sides report 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import raw_latent
from .data import ToyDatasetSpec, make_examples
from .diffusion import make_cosine_schedule
from .model import ModelConfig, TransfusionModel, init_params
from .training import TrainBatch, TrainConfig, collate_examples, make_training_example, transfusion_loss

LOSSES = ("lm", "ddpm", "total")


@dataclass
class GroupError:
    name: str
    loss: str
    rel_error: float
    entries: int


def small_batch(cfg: ModelConfig, seed: int = 0, n: int = 3, T: int = 50) -> TrainBatch:
    """A few caption/image examples on 8x8 crops of the toy shapes."""
    tcfg = TrainConfig(T=T, caption_dropout_prob=0.0, caption_first_prob=0.5)
    sched = make_cosine_schedule(T)
    rng = np.random.default_rng(seed)
    toy = make_examples(ToyDatasetSpec(num_train=16, num_val=0, seed=seed))[::5][:n]
    examples = []
    for e in toy:
        crop = e.pixels[4:12, 4:12, :cfg.patch_channels]
        examples.append(make_training_example(e.caption[:6], raw_latent(crop), tcfg, rng, sched,
                                              cfg.patch_window))
    return collate_examples(examples, tcfg, dtype=torch.float64)


def _loss_fn(model: TransfusionModel, tb: TrainBatch, which: str, lam: float):
    def f():
        parts = transfusion_loss(tb, model(tb.batch), lam)
        return {"lm": parts.lm_loss, "ddpm": parts.ddpm_loss, "total": parts.total}[which]
    return f


def check_group(param: torch.nn.Parameter, f, h: float, picks: int, rng: np.random.Generator):
    (grad,) = torch.autograd.grad(f(), [param], allow_unused=True, materialize_grads=True)
    flat = grad.reshape(-1)
    n = flat.numel()
    top = torch.topk(flat.abs(), min(picks, n)).indices.tolist()
    rand = rng.choice(n, size=min(picks, n), replace=False).tolist()
    idx = sorted(set(top) | set(rand))
    data = param.data.view(-1)
    fd = np.zeros(len(idx))
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = data[i].item()
            data[i] = orig + h
            up = f().item()
            data[i] = orig - h
            dn = f().item()
            data[i] = orig
            fd[j] = (up - dn) / (2 * h)
    an = flat[idx].detach().numpy()
    scale = max(np.linalg.norm(an), np.linalg.norm(fd))
    err = 0.0 if scale == 0.0 else float(np.linalg.norm(an - fd) / scale)
    return err, len(idx)


def run_gradcheck(codec: str = "linear", losses=LOSSES, seed: int = 0, h: float = 1e-6,
                  picks: int = 4, lam: float = 5.0) -> list[GroupError]:
    cfg = ModelConfig(layers=2, embed_dim=16, heads=2, patch_window=2, patch_channels=3, codec_kind=codec,
                      unet_channels=(4, 8))
    model = init_params(cfg, seed=seed, dtype=torch.float64)
    # push every weight off its init so zero-initialized pieces are exercised too
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed + 1)
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    tb = small_batch(cfg, seed)
    rng = np.random.default_rng(seed)
    out = []
    for which in losses:
        f = _loss_fn(model, tb, which, lam)
        for name, p in model.named_parameters():
            err, k = check_group(p, f, h, picks, rng)
            out.append(GroupError(name, which, err, k))
    return out

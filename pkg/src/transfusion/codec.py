"""Image <-> latent conversion: raw pixels, a tiny VAE and a VQ tokenizer.

The VQ tokenizer turns an image into discrete ids for the token-only
baseline. Image ids live in a reserved range right after the text vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .seqcore import LatentImage

KL_WEIGHT = 1e-6
COMMITMENT_BETA = 0.25


def raw_latent(pixels: np.ndarray) -> LatentImage:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3:
        raise ValueError(f"expected (H, W, C) pixels, got shape {pixels.shape}")
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return LatentImage(2.0 * pixels - 1.0, "raw-pixel")


def raw_pixels(latent: LatentImage | np.ndarray) -> np.ndarray:
    data = latent.data if isinstance(latent, LatentImage) else np.asarray(latent)
    return (data + 1.0) / 2.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels) * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# VAE


class TinyVAE(nn.Module):
    """Two stride-2 convs down to an (H/4, W/4, latent_dim) Gaussian latent."""

    def __init__(self, channels: int = 3, latent_dim: int = 8, hidden: int = 32):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * hidden, 2 * latent_dim, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_dim, 2 * hidden, 1), nn.SiLU(),
            nn.ConvTranspose2d(2 * hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, channels, 4, stride=2, padding=1),
        )


def _nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def vae_encode(images: torch.Tensor, vae: TinyVAE) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, H, W, C) images in [-1, 1] -> mean and logvar, each (N, H/4, W/4, latent_dim)."""
    if images.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) images, got {tuple(images.shape)}")
    stats = _nhwc(vae.encoder(_nchw(images)))
    mean, logvar = stats.chunk(2, dim=-1)
    return mean, logvar


def vae_sample(mean: torch.Tensor, logvar: torch.Tensor,
               generator: torch.Generator | None = None) -> torch.Tensor:
    z = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * z


def vae_decode(latent: torch.Tensor, vae: TinyVAE) -> torch.Tensor:
    return _nhwc(vae.decoder(_nchw(latent)))


def vae_loss(image, recon, mean, logvar) -> dict[str, torch.Tensor]:
    """L1 reconstruction plus a 1e-6 weighted KL to the unit Gaussian.

    KL is summed over latent elements and averaged over the batch.
    """
    l1 = (recon - image).abs().mean()
    kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)
    kl = kl.reshape(kl.shape[0], -1).sum(-1).mean()
    return {"l1": l1, "kl": kl, "total": l1 + KL_WEIGHT * kl}


def train_vae(images: np.ndarray, steps: int = 6000, batch_size: int = 32, lr: float = 5e-3,
              seed: int = 0, latent_dim: int = 8, log=None) -> TinyVAE:
    """Fit a TinyVAE to (N, H, W, C) pixel images in [0, 1]."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    data = torch.from_numpy(2.0 * np.asarray(images, dtype=np.float32) - 1.0)
    vae = TinyVAE(data.shape[-1], latent_dim)
    opt = torch.optim.AdamW(vae.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=lr * 0.05)
    for step in range(steps):
        idx = torch.randint(len(data), (batch_size,), generator=gen)
        x = data[idx]
        mean, logvar = vae_encode(x, vae)
        recon = vae_decode(vae_sample(mean, logvar, gen), vae)
        losses = vae_loss(x, recon, mean, logvar)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        sched.step()
        if log is not None and step % 100 == 0:
            log(step, {k: float(v) for k, v in losses.items()})
    return vae.eval()


# ----------------------------------------------------------------------------
# Vector quantization


@dataclass
class VQCodebook:
    vectors: torch.Tensor  # (K, D)
    beta: float = COMMITMENT_BETA

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("codebook needs at least two vectors")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def nearest_code(z: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row per vector in ``z``; ties go to the lowest index."""
    d = (z[..., None, :] - vectors).pow(2).sum(-1)
    return d.argmin(-1)


def vq_quantize(z: torch.Tensor, codebook: VQCodebook | torch.Tensor, beta: float | None = None):
    """Quantize (..., D) vectors with a straight-through gradient.

    Returns ``(indices, quantized, losses)`` where losses hold the codebook
    term ``|sg(z) - e|^2`` and the commitment term ``beta * |z - sg(e)|^2``,
    each summed over D and averaged over vectors.
    """
    vectors = codebook.vectors if isinstance(codebook, VQCodebook) else codebook
    if beta is None:
        beta = codebook.beta if isinstance(codebook, VQCodebook) else COMMITMENT_BETA
    if vectors.shape[0] == 0:
        raise ValueError("empty codebook")
    if z.shape[-1] != vectors.shape[-1]:
        raise ValueError(f"code dim {vectors.shape[-1]} does not match latent dim {z.shape[-1]}")
    with torch.no_grad():
        idx = nearest_code(z, vectors)
    e = vectors[idx]
    codebook_loss = (z.detach() - e).pow(2).sum(-1).mean()
    commitment = beta * (z - e.detach()).pow(2).sum(-1).mean()
    # forward value is exactly e, backward is the identity onto z
    quantized = e.detach() + (z - z.detach())
    return idx, quantized, {"codebook": codebook_loss, "commitment": commitment}


class VQTokenizer(nn.Module):
    """Per-window encoder -> 8-d code -> nearest codebook entry -> decoder.

    ``window=1`` quantizes every latent pixel separately.
    """

    def __init__(self, channels: int = 3, window: int = 2, code_dim: int = 8,
                 codebook_size: int = 256, hidden: int = 64, beta: float = COMMITMENT_BETA):
        super().__init__()
        self.channels, self.window, self.beta = channels, window, beta
        in_dim = window * window * channels
        self.encoder = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, code_dim))
        self.decoder = nn.Sequential(nn.Linear(code_dim, hidden), nn.SiLU(), nn.Linear(hidden, in_dim))
        self.codebook = nn.Parameter(torch.randn(codebook_size, code_dim))
        self.register_buffer("last_used", torch.zeros(codebook_size, dtype=torch.long))

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    def windows(self, latents: torch.Tensor) -> torch.Tensor:
        """(N, H, W, C) -> (N, num_windows, window*window*C) in raster order."""
        n, h, w, c = latents.shape
        k = self.window
        x = latents.reshape(n, h // k, k, w // k, k, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, (h // k) * (w // k), k * k * c)

    def unwindows(self, vecs: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        n = vecs.shape[0]
        gh, gw = grid
        k, c = self.window, self.channels
        x = vecs.reshape(n, gh, gw, k, k, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(n, gh * k, gw * k, c)

    def forward(self, latents: torch.Tensor):
        z = self.encoder(self.windows(latents))
        idx, q, losses = vq_quantize(z, self.codebook, self.beta)
        grid = (latents.shape[1] // self.window, latents.shape[2] // self.window)
        recon = self.unwindows(self.decoder(q), grid)
        return recon, idx, losses


def train_vq(latents: np.ndarray, tokenizer: VQTokenizer, steps: int = 1000, batch_size: int = 32,
             lr: float = 2e-3, seed: int = 0, reseed_after: int = 1000, log=None) -> VQTokenizer:
    """Train with L1 + codebook + commitment; codes idle for ``reseed_after`` steps are reseeded."""
    gen = torch.Generator().manual_seed(seed)
    data = torch.from_numpy(np.asarray(latents, dtype=np.float32))
    with torch.no_grad():
        z0 = tokenizer.encoder(tokenizer.windows(data[:256])).reshape(-1, tokenizer.codebook.shape[1])
        pick = torch.randint(len(z0), (tokenizer.codebook_size,), generator=gen)
        tokenizer.codebook.copy_(z0[pick])
    opt = torch.optim.AdamW(tokenizer.parameters(), lr=lr, weight_decay=0.0)
    for step in range(1, steps + 1):
        x = data[torch.randint(len(data), (batch_size,), generator=gen)]
        recon, idx, losses = tokenizer(x)
        l1 = (recon - x).abs().mean()
        total = l1 + losses["codebook"] + losses["commitment"]
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            tokenizer.last_used[idx.unique()] = step
            stale = (step - tokenizer.last_used) >= reseed_after
            if stale.any():
                z = tokenizer.encoder(tokenizer.windows(x)).reshape(-1, tokenizer.codebook.shape[1])
                pick = torch.randint(len(z), (int(stale.sum()),), generator=gen)
                tokenizer.codebook[stale] = z[pick]
                tokenizer.last_used[stale] = step
        if log is not None and step % 100 == 0:
            log(step, {"l1": float(l1), "codebook": float(losses["codebook"]),
                       "commitment": float(losses["commitment"])})
    return tokenizer.eval()


def tokens_from_image(latent: LatentImage | np.ndarray, tokenizer: VQTokenizer,
                      offset: int) -> list[int]:
    """Image ids in raster order, shifted into the reserved range starting at ``offset``."""
    data = latent.data if isinstance(latent, LatentImage) else np.asarray(latent)
    x = torch.from_numpy(np.asarray(data, dtype=np.float32))[None]
    with torch.no_grad():
        z = tokenizer.encoder(tokenizer.windows(x))
        idx = nearest_code(z, tokenizer.codebook)[0]
    return [int(i) + offset for i in idx]


def codes_from_tokens(ids, tokenizer: VQTokenizer, offset: int) -> torch.Tensor:
    ids = torch.as_tensor(list(ids), dtype=torch.long)
    local = ids - offset
    if (local < 0).any() or (local >= tokenizer.codebook_size).any():
        bad = ids[(local < 0) | (local >= tokenizer.codebook_size)][0]
        raise ValueError(f"token id {int(bad)} outside the image range "
                         f"[{offset}, {offset + tokenizer.codebook_size})")
    return tokenizer.codebook.detach()[local]


def image_from_tokens(ids, tokenizer: VQTokenizer, offset: int, grid: tuple[int, int]) -> LatentImage:
    codes = codes_from_tokens(ids, tokenizer, offset)
    with torch.no_grad():
        recon = tokenizer.unwindows(tokenizer.decoder(codes)[None], grid)[0]
    return LatentImage(recon.numpy().astype(np.float64), "raw-pixel")


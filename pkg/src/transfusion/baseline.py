"""Token-only baseline: images quantized by a VQ tokenizer and modeled with next-token loss.

Image ids sit after the text vocabulary, so the baseline's vocabulary is
``text_vocab.size + codebook_size``. Sequences use a plain causal mask and the
same caption-first / image-first layouts as the joint model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .codec import VQTokenizer, image_from_tokens, tokens_from_image, train_vq
from .diffusion import SamplerControls
from .model import Batch, ModelConfig, TransfusionModel, collate
from .seqcore import DEFAULT_VOCAB, LatentImage, MixedSequence, Token, Vocabulary, encode_text
from .training import TrainConfig, baseline_sequence


@dataclass
class BaselineConfig:
    codebook_size: int = 256
    code_dim: int = 8
    window: int = 2
    hidden: int = 64
    vq_steps: int = 1500
    vq_lr: float = 2e-3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        return cls(**d)


def baseline_model_config(cfg: ModelConfig, bcfg: BaselineConfig,
                          vocab: Vocabulary = DEFAULT_VOCAB) -> ModelConfig:
    d = cfg.to_dict()
    d.update(vocab_size=vocab.size + bcfg.codebook_size, codec_kind="linear")
    return ModelConfig.from_dict(d)


def fit_tokenizer(latents: np.ndarray, bcfg: BaselineConfig, seed: int = 0, log=None) -> VQTokenizer:
    torch.manual_seed(seed)
    tok = VQTokenizer(latents.shape[-1], bcfg.window, bcfg.code_dim, bcfg.codebook_size, bcfg.hidden)
    return train_vq(latents, tok, steps=bcfg.vq_steps, lr=bcfg.vq_lr, seed=seed, log=log)


class TokenStream:
    """Seeded batches of token-only sequences over pre-tokenized (caption, image ids) pairs."""

    def __init__(self, pairs: Sequence[tuple[list[int], list[int]]], cfg: TrainConfig,
                 vocab: Vocabulary = DEFAULT_VOCAB):
        self.pairs, self.cfg, self.vocab = list(pairs), cfg, vocab
        self.rng = np.random.default_rng([cfg.seed, 2])

    def sequences(self, n: int) -> list[MixedSequence]:
        out = []
        for i in self.rng.integers(len(self.pairs), size=n):
            caption, image = self.pairs[i]
            first = bool(self.rng.random() < self.cfg.caption_first_prob)
            out.append(baseline_sequence(caption, image, first, self.vocab))
        return out

    def __iter__(self):
        while True:
            yield collate(self.sequences(self.cfg.batch_size), mask_kind="causal", vocab=self.vocab)


def tokenize_pairs(pairs: Sequence[tuple[str, LatentImage]], tok: VQTokenizer,
                   vocab: Vocabulary = DEFAULT_VOCAB) -> list[tuple[list[int], list[int]]]:
    return [(encode_text(c, vocab), tokens_from_image(img, tok, vocab.size)) for c, img in pairs]


@torch.no_grad()
def baseline_force_image(model: TransfusionModel, tok: VQTokenizer, caption: str, grid: tuple[int, int],
                         controls: SamplerControls, vocab: Vocabulary = DEFAULT_VOCAB) -> LatentImage:
    """Sample ``grid`` image ids after ``BOS caption BOI``, restricted to the image id range.

    Greedy when ``controls.temperature`` is 0, otherwise plain temperature sampling.
    """
    rng = np.random.default_rng(controls.seed)
    ids = [vocab.bos, *encode_text(caption, vocab), vocab.boi]
    lo, hi = vocab.size, vocab.size + tok.codebook_size
    model.eval()
    for _ in range(grid[0] * grid[1]):
        batch = collate([MixedSequence([Token(i) for i in ids])], mask_kind="causal", vocab=vocab,
                        dtype=next(model.parameters()).dtype)
        logits = model(batch).logits[0, -1, lo:hi].double().numpy()
        if controls.temperature <= 0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / controls.temperature
            p = np.exp(z - z.max())
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        ids.append(lo + nxt)
    return image_from_tokens(ids[-grid[0] * grid[1]:], tok, vocab.size, grid)


def tokenizer_arrays(tok: VQTokenizer) -> dict[str, torch.Tensor]:
    return {f"vq/{k}": v.to(torch.float64) for k, v in tok.state_dict().items()}


def load_tokenizer(arrays: dict, channels: int, bcfg: BaselineConfig) -> VQTokenizer:
    tok = VQTokenizer(channels, bcfg.window, bcfg.code_dim, bcfg.codebook_size, bcfg.hidden)
    state = {k[3:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("vq/")}
    state["last_used"] = state["last_used"].to(torch.long)
    tok.load_state_dict({k: v.to(tok.state_dict()[k].dtype) for k, v in state.items()})
    return tok.eval()

"""Mixed-modal decoding: token sampling that switches to in-place denoising on BOI.

While an image is being generated, its patch block sits at the end of the
sequence and each denoising step overwrites it, so the model only ever sees
the latest noise level. After the last step EOI is appended and token
sampling resumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from . import diffusion
from .diffusion import NoiseSchedule, SamplerControls
from .model import TransfusionModel, collate
from .seqcore import (DEFAULT_VOCAB, ImageSpan, LatentImage, MixedSequence, Patch, Token,
                      Vocabulary, encode_text, unpatchify)


class Mode(Enum):
    LM = "lm"
    DIFFUSION = "diffusion"


@dataclass
class DecodeState:
    mode: Mode
    sequence: MixedSequence
    controls: SamplerControls
    sched: NoiseSchedule
    grid: tuple[int, int]
    rng: np.random.Generator
    ladder: list[int] = field(default_factory=list)
    step_index: int = 0
    # timestep of each finished or in-flight image, in span order
    image_t: list[int] = field(default_factory=list)
    done: bool = False
    mask_kind: str = "transfusion"
    vocab: Vocabulary = DEFAULT_VOCAB

    @property
    def pending(self) -> np.ndarray | None:
        """The in-flight noisy patch block, or None in LM mode."""
        if self.mode is not Mode.DIFFUSION:
            return None
        span = self.sequence.image_spans[-1]
        return np.stack([self.sequence.elements[p].vector for p in span.positions])

    @property
    def current_t(self) -> int | None:
        return self.ladder[self.step_index] if self.mode is Mode.DIFFUSION else None


def new_state(prompt: MixedSequence, controls: SamplerControls, sched: NoiseSchedule,
              grid: tuple[int, int], mask_kind: str = "transfusion",
              vocab: Vocabulary = DEFAULT_VOCAB) -> DecodeState:
    if controls.num_steps > sched.T:
        raise ValueError(f"num_steps {controls.num_steps} exceeds horizon {sched.T}")
    return DecodeState(Mode.LM, prompt.copy(), controls, sched, grid,
                       np.random.default_rng(controls.seed),
                       image_t=[0] * len(prompt.image_spans), mask_kind=mask_kind, vocab=vocab)


@torch.no_grad()
def _forward(model: TransfusionModel, seq: MixedSequence, image_t: list[int], mask_kind: str):
    dtype = next(model.parameters()).dtype
    batch = collate([seq], [image_t], mask_kind, dtype=dtype)
    model.eval()
    return model(batch)


def sample_token(logits: np.ndarray, controls: SamplerControls, rng: np.random.Generator) -> int:
    """Greedy when temperature is 0, otherwise temperature + nucleus sampling."""
    if controls.temperature <= 0:
        return int(np.argmax(logits))
    z = (logits - logits.max()) / controls.temperature
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = order[: int(np.searchsorted(cum, controls.top_p) + 1)]
    p = probs[keep] / probs[keep].sum()
    return int(keep[rng.choice(len(keep), p=p)])


def _open_image(state: DecodeState, patch_dim: int) -> None:
    n = state.grid[0] * state.grid[1]
    seq = state.sequence
    start = len(seq.elements) + 1
    seq.elements.append(Token(state.vocab.boi))
    state.ladder = diffusion.make_inference_timesteps(state.sched.T, state.controls.num_steps)
    state.step_index = 0
    noise = state.rng.standard_normal((n, patch_dim))
    seq.elements += [Patch(v) for v in noise]
    seq.image_spans.append(ImageSpan(start, start + n - 1, *state.grid))
    state.image_t.append(state.ladder[0])
    state.mode = Mode.DIFFUSION


def lm_step(state: DecodeState, model: TransfusionModel) -> DecodeState:
    if state.mode is not Mode.LM:
        raise ValueError("lm_step called outside LM mode")
    out = _forward(model, state.sequence, state.image_t, state.mask_kind)
    logits = out.logits[0, -1].double().numpy().copy()
    # EOI is only ever appended by the sampler itself
    logits[state.vocab.eoi] = -np.inf
    tok = sample_token(logits, state.controls, state.rng)
    if tok in (state.vocab.pad, state.vocab.bos):
        state.done = True
    elif tok == state.vocab.boi:
        _open_image(state, model.cfg.latent_patch_dim)
    else:
        state.sequence.elements.append(Token(tok))
    return state


def strip_text(seq: MixedSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> MixedSequence:
    """Drop every non-special token, keeping BOS, image markers and patches."""
    keep = [i for i, e in enumerate(seq.elements)
            if isinstance(e, Patch) or vocab.is_special(e.id)]
    new_index = {old: new for new, old in enumerate(keep)}
    spans = [ImageSpan(new_index[s.start], new_index[s.end], s.grid_h, s.grid_w) for s in seq.image_spans]
    return MixedSequence([seq.elements[i] for i in keep], spans)


def guided_eps(state: DecodeState, model: TransfusionModel) -> np.ndarray:
    span = state.sequence.image_spans[-1]
    cond = _forward(model, state.sequence, state.image_t, state.mask_kind)
    n = span.num_patches
    eps_cond = cond.eps_pred[-n:].double().numpy()
    w = state.controls.cfg_weight
    if w == 1:
        return eps_cond
    uncond = _forward(model, strip_text(state.sequence, state.vocab), state.image_t, state.mask_kind)
    eps_uncond = uncond.eps_pred[-n:].double().numpy()
    return diffusion.cfg_combine(eps_cond, eps_uncond, w)


def diffusion_step(state: DecodeState, model: TransfusionModel) -> DecodeState:
    if state.mode is not Mode.DIFFUSION:
        raise ValueError("diffusion_step called outside diffusion mode")
    t = state.ladder[state.step_index]
    t_prev = state.ladder[state.step_index + 1] if state.step_index + 1 < len(state.ladder) else 0
    eps = guided_eps(state, model)
    x_t = state.pending
    x_prev = diffusion.denoise_step(x_t, eps, t, state.sched, state.controls.sigma_rule,
                                    state.rng, t_prev=t_prev,
                                    clip_x0=state.controls.clip_x0)
    span = state.sequence.image_spans[-1]
    for row, p in enumerate(span.positions):
        state.sequence.elements[p] = Patch(x_prev[row])
    state.image_t[-1] = t_prev
    state.step_index += 1
    if t_prev == 0:
        state.sequence.elements.append(Token(state.vocab.eoi))
        state.mode = Mode.LM
    return state


def generate(model: TransfusionModel, prompt: MixedSequence, grid: tuple[int, int],
             controls: SamplerControls, max_len: int, sched: NoiseSchedule,
             force_boi: bool = False, mask_kind: str = "transfusion",
             vocab: Vocabulary = DEFAULT_VOCAB, on_step=None) -> MixedSequence:
    """Alternate token sampling and denoising until a stop token or ``max_len``.

    An image that is in flight when ``max_len`` is reached is finished first,
    so the output never contains a truncated span.
    """
    state = new_state(prompt, controls, sched, grid, mask_kind, vocab)
    if force_boi:
        _open_image(state, model.cfg.latent_patch_dim)
    while not state.done:
        if state.mode is Mode.DIFFUSION:
            diffusion_step(state, model)
        elif len(state.sequence) >= max_len:
            break
        else:
            lm_step(state, model)
        if on_step is not None:
            on_step(state)
    return state.sequence


def force_image(model: TransfusionModel, caption: str, controls: SamplerControls,
                sched: NoiseSchedule, grid: tuple[int, int], mask_kind: str = "transfusion",
                vocab: Vocabulary = DEFAULT_VOCAB) -> LatentImage:
    """Text-to-image: prompt ``BOS caption`` with BOI forced, return the latent."""
    prompt = MixedSequence([Token(vocab.bos)] + [Token(i) for i in encode_text(caption, vocab)])
    out = generate(model, prompt, grid, controls, max_len=len(prompt), sched=sched,
                   force_boi=True, mask_kind=mask_kind, vocab=vocab)
    span = out.image_spans[len(prompt.image_spans)]
    patches = np.stack([out.elements[p].vector for p in span.positions])
    k = model.cfg.patch_window
    return unpatchify(patches, grid, k, model.cfg.patch_channels)

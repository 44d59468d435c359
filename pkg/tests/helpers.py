import numpy as np

from transfusion.seqcore import DEFAULT_VOCAB, MixedSequence, Patch, Token, append_image

V = DEFAULT_VOCAB


def random_mixed_sequence(rng, cfg, max_images=2, max_text=5):
    """Grammar-valid sequence with random text runs and images sized for ``cfg``."""
    seq = MixedSequence([Token(V.bos)])
    ts = []
    for _ in range(int(rng.integers(0, max_images + 1))):
        seq.elements += [Token(int(rng.integers(0, 256))) for _ in range(int(rng.integers(0, max_text)))]
        gh, gw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        seq = append_image(seq, rng.standard_normal((gh * gw, cfg.latent_patch_dim)), (gh, gw))
        ts.append(int(rng.integers(0, 1000)))
    seq.elements += [Token(int(rng.integers(0, 256))) for _ in range(int(rng.integers(0, max_text)))]
    return seq, ts


def perturb_element(seq, j, rng):
    out = seq.copy()
    e = out.elements[j]
    if isinstance(e, Patch):
        out.elements[j] = Patch(e.vector + rng.standard_normal(e.vector.shape))
    else:
        out.elements[j] = Token((e.id + 1 + int(rng.integers(0, 200))) % 256)
    return out

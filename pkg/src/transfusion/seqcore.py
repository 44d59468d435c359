"""Mixed-modal sequences: byte tokenizer, patch geometry, layout and attention masks.

A sequence is an ordered list of elements. Each element is either a discrete
``Token`` or a continuous ``Patch`` vector. Runs of patches form images and are
always wrapped as ``BOI patch+ EOI``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not match the patch geometry."""


@dataclass(frozen=True)
class Vocabulary:
    """Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials."""

    num_bytes: int = 256

    @property
    def boi(self) -> int:
        return self.num_bytes

    @property
    def eoi(self) -> int:
        return self.num_bytes + 1

    @property
    def pad(self) -> int:
        return self.num_bytes + 2

    @property
    def bos(self) -> int:
        return self.num_bytes + 3

    @property
    def size(self) -> int:
        return self.num_bytes + 4

    @property
    def special_ids(self) -> dict[str, int]:
        return {"BOI": self.boi, "EOI": self.eoi, "PAD": self.pad, "BOS": self.bos}

    def is_special(self, token_id: int) -> bool:
        return self.num_bytes <= token_id < self.size

    def digest(self) -> str:
        payload = json.dumps({"num_bytes": self.num_bytes, **self.special_ids}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


DEFAULT_VOCAB = Vocabulary()


def encode_text(text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids: Iterable[int], vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Decode byte ids, silently skipping special ids."""
    data = bytes(i for i in ids if 0 <= i < vocab.num_bytes)
    return data.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Token:
    id: int


@dataclass(frozen=True, eq=False)
class Patch:
    vector: np.ndarray

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Patch) and np.array_equal(self.vector, other.vector)


Element = Union[Token, Patch]


@dataclass(frozen=True)
class ImageSpan:
    """Inclusive ``start``/``end`` indices of one patch run and its window grid."""

    start: int
    end: int
    grid_h: int
    grid_w: int

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def positions(self) -> range:
        return range(self.start, self.end + 1)


@dataclass
class MixedSequence:
    elements: list[Element]
    image_spans: list[ImageSpan] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def length(self) -> int:
        return len(self.elements)

    def token_ids(self, fill: int) -> list[int]:
        """Token id per position, ``fill`` at patch positions."""
        return [e.id if isinstance(e, Token) else fill for e in self.elements]

    def is_patch(self) -> np.ndarray:
        return np.array([isinstance(e, Patch) for e in self.elements], dtype=bool)

    def copy(self) -> "MixedSequence":
        return MixedSequence(list(self.elements), list(self.image_spans))


@dataclass
class LatentImage:
    data: np.ndarray
    source: str = "raw-pixel"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


def patchify(image: LatentImage | np.ndarray, k: int) -> list[np.ndarray]:
    """Split an (H, W, C) array into k x k windows scanned row-major.

    Each window is flattened row-major with channels fastest.
    """
    data = image.data if isinstance(image, LatentImage) else np.asarray(image)
    if data.ndim != 3:
        raise ShapeError(f"expected (H, W, C) array, got shape {data.shape}")
    h, w, c = data.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"image {h}x{w} not divisible by patch window {k}")
    gh, gw = h // k, w // k
    windows = data.reshape(gh, k, gw, k, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, k * k * c)
    return list(windows)


def unpatchify(patches: Sequence[np.ndarray] | np.ndarray, grid: tuple[int, int], k: int,
               channels: int, source: str = "raw-pixel") -> LatentImage:
    gh, gw = grid
    arr = np.asarray(patches)
    if arr.ndim != 2 or arr.shape[0] != gh * gw or arr.shape[1] != k * k * channels:
        raise ShapeError(
            f"expected {gh * gw} patches of dim {k * k * channels}, got array of shape {arr.shape}"
        )
    data = arr.reshape(gh, gw, k, k, channels).transpose(0, 2, 1, 3, 4).reshape(gh * k, gw * k, channels)
    return LatentImage(data, source)


def assemble_sequence(caption_ids: Sequence[int], patches: Sequence[np.ndarray],
                      grid: tuple[int, int] | None, caption_first: bool,
                      vocab: Vocabulary = DEFAULT_VOCAB) -> MixedSequence:
    """Lay out one caption/image pair as a single sequence starting with BOS."""
    caption = [Token(int(i)) for i in caption_ids]
    elements: list[Element] = [Token(vocab.bos)]
    spans: list[ImageSpan] = []
    if len(patches) == 0:
        elements += caption
        return MixedSequence(elements, spans)
    if grid is None:
        grid = (1, len(patches))
    if grid[0] * grid[1] != len(patches):
        raise ShapeError(f"grid {grid} does not hold {len(patches)} patches")
    if caption_first:
        elements += caption
    start = len(elements) + 1
    elements.append(Token(vocab.boi))
    elements += [Patch(np.asarray(p)) for p in patches]
    elements.append(Token(vocab.eoi))
    spans.append(ImageSpan(start, start + len(patches) - 1, grid[0], grid[1]))
    if not caption_first:
        elements += caption
    return MixedSequence(elements, spans)


def append_image(seq: MixedSequence, patches: Sequence[np.ndarray], grid: tuple[int, int],
                 vocab: Vocabulary = DEFAULT_VOCAB) -> MixedSequence:
    """Return a copy of ``seq`` with ``BOI patches EOI`` appended."""
    out = seq.copy()
    start = len(out.elements) + 1
    out.elements.append(Token(vocab.boi))
    out.elements += [Patch(np.asarray(p)) for p in patches]
    out.elements.append(Token(vocab.eoi))
    out.image_spans.append(ImageSpan(start, start + len(patches) - 1, *grid))
    return out


def validate_sequence(seq: MixedSequence, vocab: Vocabulary = DEFAULT_VOCAB,
                      allow_open_image: bool = False) -> None:
    """Check the ``BOS (token | BOI patch+ EOI)*`` grammar and span bookkeeping.

    With ``allow_open_image`` a final span may lack its EOI (a decoding prefix).
    Raises ``ValueError`` on the first violation.
    """
    els = seq.elements
    if not els or not isinstance(els[0], Token) or els[0].id != vocab.bos:
        raise ValueError("sequence must start with BOS")
    spans = iter(seq.image_spans)
    i = 1
    while i < len(els):
        e = els[i]
        if isinstance(e, Patch):
            raise ValueError(f"patch outside an image span at {i}")
        if e.id == vocab.boi:
            span = next(spans, None)
            if span is None or span.start != i + 1:
                raise ValueError(f"BOI at {i} has no matching span")
            j = i + 1
            while j < len(els) and isinstance(els[j], Patch):
                j += 1
            if j - 1 != span.end or span.end - span.start + 1 != span.num_patches or j == i + 1:
                raise ValueError(f"span {span} does not match patch run {i + 1}..{j - 1}")
            if j == len(els):
                if allow_open_image:
                    i = j
                    continue
                raise ValueError("image span is not closed by EOI")
            if not isinstance(els[j], Token) or els[j].id != vocab.eoi:
                raise ValueError(f"expected EOI at {j}")
            i = j + 1
            continue
        if e.id in (vocab.eoi, vocab.bos, vocab.pad) or not 0 <= e.id < vocab.size:
            raise ValueError(f"unexpected token {e.id} at {i}")
        i += 1
    if next(spans, None) is not None:
        raise ValueError("more spans than images")


def _patch_owner(seq: MixedSequence, include_markers: bool = False) -> np.ndarray:
    """Image index per position, -1 for positions outside any image block."""
    owner = np.full(len(seq), -1, dtype=np.int64)
    for n, span in enumerate(seq.image_spans):
        lo, hi = span.start, span.end
        if include_markers:
            lo, hi = lo - 1, min(hi + 1, len(seq) - 1)
        owner[lo:hi + 1] = n
    return owner


def build_attention_mask(seq: MixedSequence, include_markers: bool = False) -> np.ndarray:
    """Causal mask plus full visibility among the patches of each image.

    ``visible[i, j]`` is True when position ``i`` may attend to ``j``. With
    ``include_markers`` the BOI/EOI tokens join their image's bidirectional block.
    """
    n = len(seq)
    visible = np.tril(np.ones((n, n), dtype=bool))
    owner = _patch_owner(seq, include_markers)
    same = (owner[:, None] == owner[None, :]) & (owner[:, None] >= 0)
    return visible | same


def causal_only_mask(seq: MixedSequence | int) -> np.ndarray:
    n = seq if isinstance(seq, int) else len(seq)
    return np.tril(np.ones((n, n), dtype=bool))


# Cache format: 4-byte LE header length, JSON header, then float32 LE patch payload.

def serialize_sequence(seq: MixedSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> bytes:
    layout = []
    dims = set()
    payload = io.BytesIO()
    for e in seq.elements:
        if isinstance(e, Token):
            layout.append(int(e.id))
        else:
            layout.append(-1)
            vec = np.asarray(e.vector, dtype="<f4")
            dims.add(vec.size)
            payload.write(vec.tobytes())
    if len(dims) > 1:
        raise ShapeError(f"mixed patch dimensions {sorted(dims)}")
    header = {
        "layout": layout,
        "spans": [[s.start, s.end, s.grid_h, s.grid_w] for s in seq.image_spans],
        "patch_dim": dims.pop() if dims else 0,
        "vocab_hash": vocab.digest(),
    }
    head = json.dumps(header, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + payload.getvalue()


def deserialize_sequence(blob: bytes, vocab: Vocabulary = DEFAULT_VOCAB) -> MixedSequence:
    (hlen,) = struct.unpack_from("<I", blob, 0)
    header = json.loads(blob[4:4 + hlen].decode())
    if header["vocab_hash"] != vocab.digest():
        raise ValueError("sequence was serialized with a different vocabulary")
    dim = header["patch_dim"]
    payload = np.frombuffer(blob, dtype="<f4", offset=4 + hlen)
    elements: list[Element] = []
    cursor = 0
    for code in header["layout"]:
        if code < 0:
            elements.append(Patch(payload[cursor:cursor + dim].astype(np.float32)))
            cursor += dim
        else:
            elements.append(Token(code))
    spans = [ImageSpan(*s) for s in header["spans"]]
    return MixedSequence(elements, spans)

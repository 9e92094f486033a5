"""Vocabulary over coordinate special tokens and the three sample formats."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, Polygon, canonicalize, rotate_start
from .synthdata import CropSample

IMG, BOS, EOS, PAD = "[IMG]", "[BOS]", "[EOS]", "[PAD]"
CONTROL_TOKENS = (IMG, BOS, EOS, PAD)

INSTRUCTION = ("Please extract the regular vector contour of the central building "
               "in the image, start from the left top corner and in clockwise.")


class DecodeError(ValueError):
    """Recoverable decode failure; scored as a failed prediction by callers."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class Vocab:
    """Immutable token table: control, instruction words, x-tokens, y-tokens."""

    def __init__(self, width: int = 128, height: int = 128):
        self.width = width
        self.height = height
        words = []
        for w in INSTRUCTION.split():
            if w not in words:
                words.append(w)
        self._words = tuple(words)
        tokens = list(CONTROL_TOKENS) + words
        self._x_base = len(tokens)
        tokens += [f"[x{i}]" for i in range(width)]
        self._y_base = len(tokens)
        tokens += [f"[y{i}]" for i in range(height)]
        self._tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}
        self.img_id = self._ids[IMG]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.pad_id = self._ids[PAD]

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def x_id(self, v: int) -> int:
        if not 0 <= v < self.width:
            raise GeometryError("coordinate-out-of-range", f"x={v} outside [0, {self.width})")
        return self._x_base + v

    def y_id(self, v: int) -> int:
        if not 0 <= v < self.height:
            raise GeometryError("coordinate-out-of-range", f"y={v} outside [0, {self.height})")
        return self._y_base + v

    def is_x(self, idx: int) -> bool:
        return self._x_base <= idx < self._y_base

    def is_y(self, idx: int) -> bool:
        return self._y_base <= idx < len(self._tokens)

    def x_value(self, idx: int) -> int:
        return idx - self._x_base

    def y_value(self, idx: int) -> int:
        return idx - self._y_base

    def instruction_ids(self) -> list[int]:
        return [self._ids[w] for w in INSTRUCTION.split()]


@dataclass
class TokenSequence:
    ids: list[int]
    loss_mask: list[bool]

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise ValueError("ids and loss_mask must have the same length")


@dataclass
class PreferencePair:
    prompt: TokenSequence
    chosen: TokenSequence
    rejected: TokenSequence
    sample_ref: str


def encode_polygon(vocab: Vocab, p: Polygon) -> list[int]:
    """[xi][yi] per vertex, then the first vertex repeated to close the ring."""
    ids = []
    for x, y in p.vertices:
        ids.append(vocab.x_id(x))
        ids.append(vocab.y_id(y))
    x0, y0 = p.vertices[0]
    ids.append(vocab.x_id(x0))
    ids.append(vocab.y_id(y0))
    return ids


def decode_tokens(vocab: Vocab, ids: list[int]) -> Polygon:
    """Parse arbitrary model output back into a polygon.

    Strips [EOS]/[PAD], requires strict x,y alternation, drops the repeated
    closing vertex and consecutive duplicates. Raises DecodeError with code
    "malformed-alternation" or "too-few-vertices".
    """
    body = [i for i in ids if i not in (vocab.eos_id, vocab.pad_id)]
    if len(body) % 2 != 0:
        raise DecodeError("malformed-alternation", "dangling coordinate token")
    verts = []
    for j in range(0, len(body), 2):
        xi, yi = body[j], body[j + 1]
        if not (vocab.is_x(xi) and vocab.is_y(yi)):
            raise DecodeError("malformed-alternation",
                              f"expected [x][y] at positions {j},{j + 1}")
        verts.append((vocab.x_value(xi), vocab.y_value(yi)))
    if len(verts) >= 2 and verts[-1] == verts[0]:
        verts.pop()
    cleaned = [v for i, v in enumerate(verts) if v != verts[i - 1]]
    if len(cleaned) < 3:
        raise DecodeError("too-few-vertices", f"{len(cleaned)} vertices after cleanup")
    return Polygon(tuple(cleaned))


def format_pretrain(vocab: Vocab, sample: CropSample, rng: np.random.Generator) -> TokenSequence:
    """[IMG] + shuffled-start contour + [EOS]; loss on coordinates and [EOS] only."""
    offset = int(rng.integers(len(sample.gt)))
    coords = encode_polygon(vocab, rotate_start(sample.gt, offset))
    ids = [vocab.img_id] + coords + [vocab.eos_id]
    mask = [False] + [True] * (len(coords) + 1)
    return TokenSequence(ids, mask)


def sft_prompt(vocab: Vocab) -> list[int]:
    return [vocab.img_id, vocab.bos_id] + vocab.instruction_ids()


def format_sft(vocab: Vocab, sample: CropSample) -> TokenSequence:
    """Instruction prompt + canonical contour answer; loss on the answer span only."""
    prompt = sft_prompt(vocab)
    coords = encode_polygon(vocab, sample.gt)
    ids = prompt + coords + [vocab.eos_id]
    mask = [False] * len(prompt) + [True] * (len(coords) + 1)
    return TokenSequence(ids, mask)


def format_dpo(vocab: Vocab, sample: CropSample, rejected: Polygon) -> PreferencePair:
    """Shared SFT prompt with chosen = ground truth, rejected = canonicalized input."""
    prompt_ids = sft_prompt(vocab)
    prompt = TokenSequence(prompt_ids, [False] * len(prompt_ids))
    chosen_ids = encode_polygon(vocab, sample.gt) + [vocab.eos_id]
    rejected_ids = encode_polygon(vocab, canonicalize(rejected)) + [vocab.eos_id]
    return PreferencePair(
        prompt=prompt,
        chosen=TokenSequence(chosen_ids, [True] * len(chosen_ids)),
        rejected=TokenSequence(rejected_ids, [True] * len(rejected_ids)),
        sample_ref=sample.source_id,
    )


_TEXT_TOKEN = re.compile(r"\[[^\]]*\]|[^\[\s]+")


def render_text(vocab: Vocab, ids: list[int]) -> str:
    """Human-readable rendering; bracket tokens join with no separator."""
    out = []
    for i in ids:
        tok = vocab.token_of(i)
        if tok.startswith("["):
            out.append(tok)
        else:
            if out and not out[-1].endswith(" "):
                out.append(" ")
            out.append(tok + " ")
    return "".join(out).strip()


def parse_text(vocab: Vocab, text: str) -> list[int]:
    return [vocab.id_of(tok) for tok in _TEXT_TOKEN.findall(text)]

"""Attention-permission matrices for image/text sequences.

``allow[i, j]`` is True when token ``i`` may attend token ``j``. Pad tokens
attend only themselves and are attended by nobody else.
"""
from __future__ import annotations

import enum
import functools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .tensor import MASK_SENTINEL, Tensor


class SegmentKind(enum.Enum):
    IMAGE = "image"
    TEXT = "text"
    PAD = "pad"


class MaskKind(enum.Enum):
    FULL_BIDIRECTIONAL = "full"
    IMAGE_BIDI_TEXT_CAUSAL = "prefix"
    CAUSAL_BASELINE = "causal"
    INTERLEAVED_A = "interleaved-a"
    INTERLEAVED_B = "interleaved-b"

    @classmethod
    def parse(cls, name):
        key = str(name).strip().lower()
        if key in _KIND_ALIASES:
            return _KIND_ALIASES[key]
        valid = sorted(set(_KIND_ALIASES))
        raise ValueError(f"unknown mask kind {name!r}; expected one of {', '.join(valid)}")

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            return cls.parse(value)
        return None

    @property
    def interleaved(self):
        return self in (MaskKind.INTERLEAVED_A, MaskKind.INTERLEAVED_B)


_KIND_ALIASES = {k.value: k for k in MaskKind}
_KIND_ALIASES.update({
    "stage0": MaskKind.FULL_BIDIRECTIONAL,
    "bidirectional": MaskKind.FULL_BIDIRECTIONAL,
    "stage1": MaskKind.IMAGE_BIDI_TEXT_CAUSAL,
    "stage2": MaskKind.IMAGE_BIDI_TEXT_CAUSAL,
    "stage3": MaskKind.IMAGE_BIDI_TEXT_CAUSAL,
})


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered (kind, length) spans making up one model input sequence."""

    segments: tuple

    def __post_init__(self):
        segs = tuple((SegmentKind(kind), int(n)) for kind, n in self.segments)
        if not segs:
            raise ValueError("empty layout")
        for kind, n in segs:
            if n <= 0:
                raise ValueError(f"segment {kind.value} has non-positive length {n}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def of(cls, *segments):
        return cls(tuple(segments))

    @classmethod
    def parse(cls, text):
        """Parse ``"image:2,text:2"`` style layout strings."""
        segs = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                kind, n = part.split(":")
                segs.append((SegmentKind(kind.strip().lower()), int(n)))
            except ValueError as exc:
                raise ValueError(f"bad layout segment {part!r}") from exc
        return cls(tuple(segs))

    @property
    def total_len(self):
        return sum(n for _, n in self.segments)

    def count(self, kind):
        return sum(n for k, n in self.segments if k is kind)

    def token_kinds(self):
        return [k for k, n in self.segments for _ in range(n)]

    def token_blocks(self):
        return np.repeat(np.arange(len(self.segments)), [n for _, n in self.segments])

    def __str__(self):
        return ",".join(f"{k.value}:{n}" for k, n in self.segments)


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    allow: np.ndarray

    @property
    def size(self):
        return self.allow.shape[0]

    def rows(self):
        """Rows as 0/1 strings, handy for eyeballing small masks."""
        return ["".join("1" if v else "0" for v in row) for row in self.allow]


def _check_layout(layout, kind):
    if not kind.interleaved:
        images = [i for i, (k, _) in enumerate(layout.segments) if k is SegmentKind.IMAGE]
        if len(images) > 1:
            raise ValueError(f"{kind.value} mask takes a single image prefix; "
                             f"layout has {len(images)} image segments")
        if images and images[0] != 0:
            raise ValueError(f"{kind.value} mask needs the image segment first")


def _rule(layout, kind):
    n = layout.total_len
    kinds = layout.token_kinds()
    img = np.array([k is SegmentKind.IMAGE for k in kinds])
    txt = np.array([k is SegmentKind.TEXT for k in kinds])
    pad = ~(img | txt)
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    past = j <= i
    if kind is MaskKind.FULL_BIDIRECTIONAL:
        allow = np.ones((n, n), dtype=bool)
    elif kind is MaskKind.IMAGE_BIDI_TEXT_CAUSAL:
        allow = (img[:, None] & img[None, :]) | (txt[:, None] & (img[None, :] | past))
    elif kind is MaskKind.CAUSAL_BASELINE:
        allow = np.broadcast_to(past, (n, n)).copy()
    elif kind is MaskKind.INTERLEAVED_A:
        allow = img[None, :] | past
    elif kind is MaskKind.INTERLEAVED_B:
        block = layout.token_blocks()
        bi, bj = block[:, None], block[None, :]
        allow = (bj < bi) | ((bj == bi) & (img[None, :] | past))
    else:  # pragma: no cover
        raise ValueError(kind)
    allow = allow & ~pad[:, None] & ~pad[None, :]
    allow[pad, pad] = True
    return allow


@functools.lru_cache(maxsize=256)
def build_mask(layout, kind):
    """Boolean attention permission matrix for ``layout`` under ``kind``.

    Results are cached and read-only, so callers may share them freely.
    """
    kind = MaskKind(kind)
    _check_layout(layout, kind)
    allow = _rule(layout, kind)
    allow.flags.writeable = False
    return MaskMatrix(allow)


@functools.lru_cache(maxsize=256)
def _bias_for(layout, kind):
    return mask_to_bias(build_mask(layout, kind))


def mask_bias(layout, kind):
    """Cached additive bias for (layout, kind)."""
    return _bias_for(layout, MaskKind(kind))


def mask_to_bias(mask):
    bias = np.where(mask.allow, 0.0, MASK_SENTINEL)
    bias.flags.writeable = False
    return Tensor(bias)


def reachability(mask, src):
    """Indices reachable from ``src`` by following allow edges transitively."""
    n = mask.size
    if not 0 <= src < n:
        raise IndexError(f"source {src} outside [0, {n})")
    seen = {src}
    queue = deque([src])
    while queue:
        i = queue.popleft()
        for j in np.nonzero(mask.allow[i])[0]:
            j = int(j)
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return seen


@dataclass(frozen=True)
class MaskViolation:
    i: int
    j: int
    expected: bool
    actual: bool
    detail: str = ""

    def __str__(self):
        if self.detail:
            return self.detail
        return f"allow[{self.i}][{self.j}] is {self.actual}, expected {self.expected}"


def validate_mask(mask, layout, kind):
    """Re-derive the rule and return the first mismatch, or None when consistent."""
    kind = MaskKind(kind)
    allow = np.asarray(mask.allow if isinstance(mask, MaskMatrix) else mask, dtype=bool)
    n = layout.total_len
    if allow.shape != (n, n):
        return MaskViolation(-1, -1, True, False,
                             f"mask shape {allow.shape} does not match layout length {n}")
    try:
        _check_layout(layout, kind)
    except ValueError as exc:
        return MaskViolation(-1, -1, True, False, str(exc))
    expected = _rule(layout, kind)
    bad = np.argwhere(expected != allow)
    if len(bad) == 0:
        return None
    i, j = (int(v) for v in bad[0])
    return MaskViolation(i, j, bool(expected[i, j]), bool(allow[i, j]))

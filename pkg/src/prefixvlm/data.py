"""Tokenization, corpus ingestion, conversation formatting, batching and a
procedural shapes corpus."""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import SegmentKind, SegmentLayout
from .tensor import DEFAULT_IGNORE_INDEX

PAD, BOS, EOS, NOISE, INST, ANS, UNK = "<pad>", "<bos>", "<eos>", "<noise>", "<inst>", "<ans>", "<unk>"
RESERVED = (PAD, BOS, EOS, NOISE, INST, ANS, UNK)
PAD_ID, BOS_ID, EOS_ID, NOISE_ID, INST_ID, ANS_ID, UNK_ID = range(len(RESERVED))

IGNORE_INDEX = DEFAULT_IGNORE_INDEX
IMAGE_SLOT = -1

_WORD = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def split_words(text):
    return _WORD.findall(text.lower())


def normalize(text):
    return " ".join(split_words(text))


class Vocabulary:
    """Word-level vocabulary with fixed reserved ids 0..6."""

    def __init__(self, tokens=RESERVED, max_size=None):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.max_size = max_size
        self.tokens = []
        self.index = {}
        for tok in tokens:
            self._append(tok)

    def _append(self, tok):
        if self.max_size is not None and len(self.tokens) >= self.max_size:
            raise DataError(f"vocabulary overflow: more than {self.max_size} tokens")
        self.index[tok] = len(self.tokens)
        self.tokens.append(tok)

    @classmethod
    def build(cls, texts, max_size=None):
        vocab = cls(max_size=max_size)
        for text in texts:
            for w in split_words(text):
                if w not in vocab.index:
                    vocab._append(w)
        return vocab

    def extend(self, texts):
        for text in texts:
            for w in split_words(text):
                if w not in self.index:
                    self._append(w)
        return self

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, tok):
        return self.index.get(tok, UNK_ID)


def tokenize(text, vocab, grow=False, unknown=None):
    """Words of ``text`` as ids; unseen words map to <unk> unless ``grow``.

    ``unknown`` may be a list that collects words mapped to <unk>.
    """
    ids = []
    for w in split_words(text):
        if w not in vocab.index:
            if grow:
                vocab._append(w)
            elif unknown is not None:
                unknown.append(w)
        ids.append(vocab.id(w))
    return ids


def detokenize(ids, vocab):
    return " ".join(vocab.tokens[i] for i in ids)


# ---------------------------------------------------------------------------
# samples and sequence formats
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    caption: str | None = None
    turns: list = field(default_factory=list)

    def __post_init__(self):
        if self.caption is None and not self.turns:
            raise DataError("sample needs a caption or at least one turn")
        self.turns = [tuple(t) for t in self.turns]


def caption_sequence(caption, vocab, unknown=None):
    """<bos> words <eos>, with every token after <bos> supervised."""
    words = tokenize(caption, vocab, unknown=unknown)
    if not words:
        raise DataError("empty caption")
    ids = [BOS_ID] + words + [EOS_ID]
    return ids, [False] + [True] * (len(ids) - 1)


def format_conversation(turns, vocab, unknown=None):
    """<bos> (<inst> instruction <ans> answer)* <eos>.

    Returns ``(ids, supervised)`` where only answer tokens and the final
    <eos> are supervised.
    """
    if not turns:
        raise DataError("conversation needs at least one turn")
    ids, sup = [BOS_ID], [False]
    for instruction, answer in turns:
        inst = tokenize(instruction, vocab, unknown=unknown)
        ans = tokenize(answer, vocab, unknown=unknown)
        if not inst or not ans:
            raise DataError("empty instruction or answer")
        ids += [INST_ID] + inst + [ANS_ID]
        sup += [False] * (len(inst) + 2)
        ids += ans
        sup += [True] * len(ans)
    ids.append(EOS_ID)
    sup.append(True)
    return ids, sup


def sample_sequence(sample, vocab, stage=None):
    if stage == 3 or (stage is None and sample.turns):
        if not sample.turns:
            raise DataError("stage 3 needs instruction/answer turns")
        return format_conversation(sample.turns, vocab)
    if sample.caption is None:
        raise DataError(f"stage {stage} needs captions")
    return caption_sequence(sample.caption, vocab)


def shift_labels(ids, supervised):
    """Model input (all but the last token) and next-token targets."""
    inputs = list(ids[:-1])
    labels = [tok if sup else IGNORE_INDEX for tok, sup in zip(ids[1:], supervised[1:])]
    return inputs, labels


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _read_token(buf, pos):
    while True:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        return buf[start:pos], pos


def read_ppm(path):
    """Binary PPM (P6, maxval <= 255) to a (3, H, W) float array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PPM is not supported")
    raw = buf[pos + 1:pos + 1 + w * h * 3]
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("expected a (3, H, W) image")
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    raise DataError(f"unsupported image format {path.suffix!r}")


def check_image(image, image_size, where="image"):
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (3, image_size, image_size):
        raise DataError(f"{where}: expected shape (3, {image_size}, {image_size}), got {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise DataError(f"{where}: pixel values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------------
# JSONL corpora
# ---------------------------------------------------------------------------

def load_jsonl(path, image_root=None, image_size=32):
    """Read ``{image, caption}`` or ``{image, turns: [{instruction, answer}]}`` lines.

    Image paths are relative to ``image_root`` (default: the file's directory).
    Images are never resized; a size mismatch is an error.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "image" not in rec:
                raise DataError(f"{where}: record needs an 'image' field")
            if "caption" not in rec and "turns" not in rec:
                raise DataError(f"{where}: record needs 'caption' or 'turns'")
            turns = []
            for turn in rec.get("turns", []):
                try:
                    turns.append((turn["instruction"], turn["answer"]))
                except (KeyError, TypeError):
                    raise DataError(f"{where}: each turn needs 'instruction' and 'answer'") from None
            try:
                image = check_image(read_image(root / rec["image"]), image_size, where)
                samples.append(Sample(image, rec.get("caption"), turns))
            except DataError as exc:
                if str(exc).startswith(where):
                    raise
                raise DataError(f"{where}: {exc}") from None
    return samples


def write_jsonl(samples, out_dir, name="data.jsonl"):
    """Write samples as PPM images plus a JSONL index; returns the index path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    index = out / name
    with open(index, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rel = f"images/{i:05d}.ppm"
            write_ppm(out / rel, s.image)
            rec = {"image": rel}
            if s.caption is not None:
                rec["caption"] = s.caption
            if s.turns:
                rec["turns"] = [{"instruction": a, "answer": b} for a, b in s.turns]
            fh.write(json.dumps(rec) + "\n")
    return index


# ---------------------------------------------------------------------------
# procedural shapes corpus
# ---------------------------------------------------------------------------

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}


@dataclass(frozen=True)
class SyntheticShapesSpec:
    image_size: int = 32
    rows: tuple = ("top", "middle", "bottom")
    cols: tuple = ("left", "center", "right")
    shapes: tuple = ("circle", "square", "triangle")
    colors: tuple = ("red", "green", "blue", "yellow")
    sizes: tuple = ("small", "large")
    radius: tuple = (2, 4)
    template: str = "a {size} {color} {shape} at the {row} {col}"

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def tuples(self):
        return list(itertools.product(self.shapes, self.colors, self.sizes, self.rows, self.cols))

    def caption(self, shape, color, size, row, col):
        return self.template.format(shape=shape, color=color, size=size, row=row, col=col)

    def render(self, shape, color, size, row, col):
        n = self.image_size
        cy = int((self.rows.index(row) + 0.5) * n // len(self.rows))
        cx = int((self.cols.index(col) + 0.5) * n // len(self.cols))
        r = self.radius[self.sizes.index(size)]
        y, x = np.mgrid[0:n, 0:n]
        dy, dx = y - cy, x - cx
        if shape == "circle":
            inside = dy * dy + dx * dx <= r * r
        elif shape == "square":
            inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        elif shape == "triangle":
            inside = (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
        else:
            raise ValueError(f"unknown shape {shape!r}")
        img = np.zeros((3, n, n))
        for c, v in enumerate(COLORS[color]):
            img[c][inside] = v
        return img


def render_synthetic(spec=None, n=32, seed=0):
    """``n`` image/caption samples drawn without replacement from the spec's tuples."""
    spec = spec or SyntheticShapesSpec()
    if n < 1:
        raise ValueError("n must be at least 1")
    combos = spec.tuples()
    rng = np.random.default_rng(seed)
    order = []
    while len(order) < n:
        order.extend(rng.permutation(len(combos)).tolist())
    return [Sample(spec.render(*combos[i]), spec.caption(*combos[i])) for i in order[:n]]


def shuffle_words(samples, seed=0):
    """Same images, each caption's words in a seeded random order."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        words = split_words(s.caption)
        out.append(Sample(s.image, " ".join(words[i] for i in rng.permutation(len(words)))))
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """A padded batch.

    ``input_ids`` and ``labels`` both span the full joint sequence
    (image slots first). ``input_ids`` holds ``IMAGE_SLOT`` at image
    positions; ``labels`` holds ``IGNORE_INDEX`` at image, pad and
    unsupervised positions.
    """

    images: np.ndarray
    input_ids: np.ndarray
    labels: np.ndarray
    layouts: list
    lengths: np.ndarray
    seeds: np.ndarray
    num_patches: int

    @property
    def text_ids(self):
        return self.input_ids[:, self.num_patches:]

    @property
    def text_labels(self):
        return self.labels[:, self.num_patches:]

    @property
    def num_supervised(self):
        return int((self.labels != IGNORE_INDEX).sum())

    def __len__(self):
        return self.images.shape[0]


def build_batch(samples, stage, vocab, cfg, seed=0, seeds=None):
    """Pad ``samples`` to a common text length. Stage-0 noising happens later,
    in training."""
    if not samples:
        raise DataError("empty batch")
    n = cfg.vision.num_patches
    seqs = [shift_labels(*sample_sequence(s, vocab, stage)) for s in samples]
    width = max(len(inp) for inp, _ in seqs)
    if n + width > cfg.decoder.max_positions:
        raise DataError(f"sequence of {n + width} tokens exceeds max_positions "
                        f"{cfg.decoder.max_positions}")
    b = len(samples)
    input_ids = np.full((b, n + width), PAD_ID, dtype=np.int64)
    labels = np.full((b, n + width), IGNORE_INDEX, dtype=np.int64)
    input_ids[:, :n] = IMAGE_SLOT
    layouts, lengths = [], []
    for row, (inp, lab) in enumerate(seqs):
        input_ids[row, n:n + len(inp)] = inp
        labels[row, n:n + len(lab)] = lab
        segs = [(SegmentKind.IMAGE, n), (SegmentKind.TEXT, len(inp))]
        if len(inp) < width:
            segs.append((SegmentKind.PAD, width - len(inp)))
        layouts.append(SegmentLayout(tuple(segs)))
        lengths.append(len(inp))
    if seeds is None:
        seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=b)
    images = np.stack([check_image(s.image, cfg.vision.image_size) for s in samples])
    return Batch(images, input_ids, labels, layouts, np.array(lengths), np.asarray(seeds), n)

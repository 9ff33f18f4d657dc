"""Vision encoder, projector and decoder language model joined into one sequence."""
from __future__ import annotations

import contextlib
import enum
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .masks import MaskKind, SegmentKind, SegmentLayout, build_mask, mask_bias, mask_to_bias
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden % self.heads:
            raise ValueError("vision hidden size must be divisible by heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def intermediate(self):
        return int(round(self.hidden * self.mlp_ratio))


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 64
    intermediate: int = 256
    layers: int = 2
    heads: int = 4
    kv_heads: int = 2
    vocab: int = 512
    max_positions: int = 128

    def __post_init__(self):
        if self.heads % self.kv_heads:
            raise ValueError("heads must be divisible by kv_heads")
        if self.hidden % self.heads:
            raise ValueError("decoder hidden size must be divisible by heads")
        if self.vocab < 8:
            raise ValueError("vocab too small for the reserved tokens")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def group_size(self):
        return self.heads // self.kv_heads


@dataclass(frozen=True)
class VLMConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    ln_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def projector_in(self):
        return self.vision.hidden

    @property
    def projector_out(self):
        return self.decoder.hidden

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(vision=VisionEncoderConfig(**d["vision"]),
                   decoder=DecoderConfig(**d["decoder"]),
                   ln_eps=d.get("ln_eps", 1e-5), init_std=d.get("init_std", 0.02))


PRESETS = {
    "desk": VLMConfig(),
    # Stored for parameter accounting; never instantiated in tests.
    "full": VLMConfig(
        vision=VisionEncoderConfig(image_size=224, patch_size=14, hidden=1152, layers=27,
                                   heads=16, mlp_ratio=4304 / 1152),
        decoder=DecoderConfig(hidden=896, intermediate=4864, layers=24, heads=14, kv_heads=2,
                              vocab=151936, max_positions=32768),
    ),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class Component(enum.Enum):
    VISION = "vision"
    PROJECTOR = "projector"
    LANGUAGE = "language"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _block_shapes(prefix, d, heads, kv_heads, inter):
    kv = kv_heads * (d // heads)
    return [
        (f"{prefix}.ln1.gain", (d,), "ones"), (f"{prefix}.ln1.offset", (d,), "zeros"),
        (f"{prefix}.attn.wq", (d, d), "fan_in"), (f"{prefix}.attn.bq", (d,), "zeros"),
        (f"{prefix}.attn.wk", (d, kv), "fan_in"), (f"{prefix}.attn.bk", (kv,), "zeros"),
        (f"{prefix}.attn.wv", (d, kv), "fan_in"), (f"{prefix}.attn.bv", (kv,), "zeros"),
        (f"{prefix}.attn.wo", (d, d), "fan_in"), (f"{prefix}.attn.bo", (d,), "zeros"),
        (f"{prefix}.ln2.gain", (d,), "ones"), (f"{prefix}.ln2.offset", (d,), "zeros"),
        (f"{prefix}.mlp.w1", (d, inter), "fan_in"), (f"{prefix}.mlp.b1", (inter,), "zeros"),
        (f"{prefix}.mlp.w2", (inter, d), "fan_in"), (f"{prefix}.mlp.b2", (d,), "zeros"),
    ]


def param_shapes(cfg):
    """(name, shape, init) for every leaf, in declaration order.

    Linear layers draw from N(0, 1/fan_in); embeddings and the output head
    draw from N(0, init_std) so the initial next-token distribution is close
    to uniform.
    """
    v, dec = cfg.vision, cfg.decoder
    shapes = [
        ("vision.patch.weight", (v.patch_dim, v.hidden), "fan_in"),
        ("vision.patch.bias", (v.hidden,), "zeros"),
        ("vision.pos", (v.num_patches, v.hidden), "normal"),
    ]
    for i in range(v.layers):
        shapes += _block_shapes(f"vision.blocks.{i}", v.hidden, v.heads, v.heads, v.intermediate)
    shapes += [
        ("vision.ln_post.gain", (v.hidden,), "ones"),
        ("vision.ln_post.offset", (v.hidden,), "zeros"),
        ("projector.w1", (v.hidden, dec.hidden), "fan_in"),
        ("projector.b1", (dec.hidden,), "zeros"),
        ("projector.w2", (dec.hidden, dec.hidden), "fan_in"),
        ("projector.b2", (dec.hidden,), "zeros"),
        ("language.embed", (dec.vocab, dec.hidden), "normal"),
        ("language.pos", (dec.max_positions, dec.hidden), "normal"),
    ]
    for i in range(dec.layers):
        shapes += _block_shapes(f"language.blocks.{i}", dec.hidden, dec.heads, dec.kv_heads,
                                dec.intermediate)
    shapes += [
        ("language.ln_f.gain", (dec.hidden,), "ones"),
        ("language.ln_f.offset", (dec.hidden,), "zeros"),
        ("language.head", (dec.hidden, dec.vocab), "normal"),
    ]
    return shapes


def count_params(cfg):
    """Exact leaf-element counts per component, without allocating anything."""
    counts = {c: 0 for c in Component}
    for name, shape, _ in param_shapes(cfg):
        counts[component_of(name)] += math.prod(shape)
    return counts


def component_of(name):
    return Component(name.split(".", 1)[0])


class VLMParams:
    """Named parameter tree; each leaf carries the component given by its prefix."""

    def __init__(self, tensors):
        self._tensors = OrderedDict(tensors)
        for name in self._tensors:
            component_of(name)

    @classmethod
    def init(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        tensors = OrderedDict()
        for name, shape, how in param_shapes(cfg):
            if how == "normal":
                data = rng.normal(0.0, cfg.init_std, size=shape)
            elif how == "fan_in":
                data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            elif how == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, component=None):
        return [n for n in self._tensors if component is None or component_of(n) is component]

    def component(self, name):
        return component_of(name)

    def num_params(self, component=None):
        return sum(self._tensors[n].data.size for n in self.names(component))

    def copy(self):
        return VLMParams((n, Tensor(t.data, requires_grad=t.requires_grad, name=n))
                         for n, t in self._tensors.items())

    def replace(self, name, tensor):
        """Shallow copy with one leaf swapped out."""
        tensors = OrderedDict(self._tensors)
        if name not in tensors:
            raise KeyError(name)
        tensors[name] = tensor
        return VLMParams(tensors)

    def set_trainable(self, components):
        components = set(components)
        for name, t in self._tensors.items():
            t.requires_grad = component_of(name) in components
            t.grad = None

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def patchify(image, cfg):
    """Split (3, H, W) or (B, 3, H, W) pixels into flattened row-major patches.

    Each patch is flattened channel-major (c, y, x). Returns a float array of
    shape (num_patches, patch_dim) or (B, num_patches, patch_dim).
    """
    v = cfg.vision if isinstance(cfg, VLMConfig) else cfg
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4 or img.shape[1:] != (v.channels, v.image_size, v.image_size):
        raise ValueError(f"expected image shape ({v.channels}, {v.image_size}, {v.image_size}), "
                         f"got {np.asarray(image).shape}")
    b, c, p, g = img.shape[0], v.channels, v.patch_size, v.grid
    patches = img.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    return patches[0] if single else patches


_attention_log = None


@contextlib.contextmanager
def record_attention():
    """Collect ``(prefix, weights)`` from every attention call inside the block.

    Weights are (B, kv_heads, group, T, T) arrays.
    """
    global _attention_log
    saved, _attention_log = _attention_log, []
    try:
        yield _attention_log
    finally:
        _attention_log = saved


def attention(x, params, prefix, heads, kv_heads, bias):
    """Grouped-query self-attention on (B, T, D); ``bias`` is (T, T) or (B, T, T).

    Query head ``h`` reads key/value head ``h // (heads // kv_heads)``.
    """
    b, t, d = x.shape
    hd = d // heads
    g = heads // kv_heads
    q = T.linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = T.linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = T.linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = q.reshape(b, t, kv_heads, g, hd).transpose(0, 2, 3, 1, 4)
    k = k.reshape(b, t, kv_heads, 1, hd).transpose(0, 2, 3, 4, 1)
    v = v.reshape(b, t, kv_heads, 1, hd).transpose(0, 2, 3, 1, 4)
    scores = T.matmul(q, k) * (1.0 / math.sqrt(hd))
    bias_data = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    if bias_data.shape[-2:] != (t, t):
        raise ValueError(f"mask side {bias_data.shape[-1]} does not match sequence length {t}")
    if bias_data.ndim == 3:
        bias_data = bias_data[:, None, None]
    weights = T.softmax_rows(scores, bias_data)
    if _attention_log is not None:
        _attention_log.append((prefix, weights.data))
    ctx = T.matmul(weights, v).transpose(0, 3, 1, 2, 4).reshape(b, t, d)
    return T.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _block(x, params, prefix, heads, kv_heads, bias, eps):
    h = T.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.offset"], eps)
    x = x + attention(h, params, f"{prefix}.attn", heads, kv_heads, bias)
    h = T.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.offset"], eps)
    h = T.gelu(T.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return x + T.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def encoder_mask(cfg):
    layout = SegmentLayout.of((SegmentKind.IMAGE, cfg.vision.num_patches))
    return build_mask(layout, MaskKind.FULL_BIDIRECTIONAL)


def encode_image(image, params, cfg):
    """Pixels to patch embeddings V of shape (num_patches, d_V), batched if given (B, 3, H, W)."""
    patches = patchify(image, cfg)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    v = cfg.vision
    x = T.linear(Tensor(patches), params["vision.patch.weight"], params["vision.patch.bias"])
    x = x + params["vision.pos"]
    bias = mask_to_bias(encoder_mask(cfg))
    for i in range(v.layers):
        x = _block(x, params, f"vision.blocks.{i}", v.heads, v.heads, bias, cfg.ln_eps)
    x = T.layer_norm(x, params["vision.ln_post.gain"], params["vision.ln_post.offset"], cfg.ln_eps)
    return x.reshape(x.shape[1:]) if single else x


def project(V, params):
    """Two-layer GeLU MLP from d_V to d_L, applied row-wise."""
    h = T.gelu(T.linear(V, params["projector.w1"], params["projector.b1"]))
    return T.linear(h, params["projector.w2"], params["projector.b2"])


def assemble_inputs(P, text_ids, params, cfg, lengths=None):
    """Concatenate image tokens and embedded text: I = [p_1..p_n, L_1..L_T].

    Single sample: ``P`` is (n, d_L) and ``text_ids`` is (T,); returns
    ``(I, layout)``. Batched: ``P`` is (B, n, d_L), ``text_ids`` is (B, T)
    and ``lengths`` gives each row's unpadded text length; returns
    ``(I, layouts)``.
    """
    ids = np.asarray(text_ids, dtype=np.int64)
    n = P.shape[-2]
    if ids.shape[-1] < 1:
        raise ValueError("text must contain at least one token")
    total = n + ids.shape[-1]
    if total > cfg.decoder.max_positions:
        raise ValueError(f"sequence of {total} exceeds max_positions {cfg.decoder.max_positions}")
    text = T.take_rows(params["language.embed"], ids)
    if ids.ndim == 1:
        layout = SegmentLayout.of((SegmentKind.IMAGE, n), (SegmentKind.TEXT, ids.shape[0]))
        return T.concat([P, text], axis=0), layout
    if lengths is None:
        lengths = [ids.shape[1]] * ids.shape[0]
    layouts = []
    for length in lengths:
        segs = [(SegmentKind.IMAGE, n), (SegmentKind.TEXT, int(length))]
        if length < ids.shape[1]:
            segs.append((SegmentKind.PAD, ids.shape[1] - int(length)))
        layouts.append(SegmentLayout(tuple(segs)))
    return T.concat([P, text], axis=1), layouts


def stack_bias(layouts, kind):
    """(B, L, L) additive mask for a batch of per-row layouts."""
    return np.stack([mask_bias(layout, kind).data for layout in layouts])


def decoder_forward(I, mask_bias_, params, cfg):
    """Decoder LM over the joint sequence; returns logits (len, N) or (B, len, N)."""
    single = I.ndim == 2
    if single:
        I = I.reshape(1, *I.shape)
    dec = cfg.decoder
    length = I.shape[1]
    bias = mask_bias_.data if isinstance(mask_bias_, Tensor) else np.asarray(mask_bias_)
    if bias.shape[-2:] != (length, length):
        raise ValueError(f"mask is {bias.shape[-2:]} but sequence has {length} tokens")
    if length > dec.max_positions:
        raise ValueError(f"sequence of {length} exceeds max_positions {dec.max_positions}")
    x = I + T.take_rows(params["language.pos"], np.arange(length))
    for i in range(dec.layers):
        x = _block(x, params, f"language.blocks.{i}", dec.heads, dec.kv_heads, bias, cfg.ln_eps)
    x = T.layer_norm(x, params["language.ln_f.gain"], params["language.ln_f.offset"], cfg.ln_eps)
    logits = T.linear(x, params["language.head"])
    return logits.reshape(logits.shape[1:]) if single else logits


def forward_logits(images, text_ids, params, cfg, kind, lengths=None):
    """Full pipeline for a batch: returns (logits (B, L, N), layouts)."""
    P = project(encode_image(images, params, cfg), params)
    I, layouts = assemble_inputs(P, text_ids, params, cfg, lengths=lengths)
    return decoder_forward(I, stack_bias(layouts, kind), params, cfg), layouts


def generate(image, prompt_ids, params, cfg, max_new, mode="greedy", k=None, seed=None,
             eos_id=None):
    """Decode continuation tokens for one image; see :func:`generate_batch`."""
    return generate_batch(np.asarray(image)[None], [prompt_ids], params, cfg, max_new,
                          mode=mode, k=k, seed=seed, eos_id=eos_id)[0]


def generate_batch(images, prompts, params, cfg, max_new, mode="greedy", k=None, seed=None,
                   eos_id=None):
    """Greedy or top-k decoding under the image-bidirectional/text-causal mask.

    All prompts must share one length so the batch advances in lock step; each
    row stops at ``eos_id`` (not included in its output) or after ``max_new``
    tokens. Greedy ties go to the lowest token id. Sequences that would exceed
    ``max_positions`` stop early.
    """
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    if mode not in ("greedy", "topk"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    if mode == "topk" and (k is None or k < 1):
        raise ValueError("top-k decoding needs k >= 1")
    prompts = [list(map(int, p)) for p in prompts]
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("prompts in one batch must share a length")
    n = cfg.vision.num_patches
    if n + len(prompts[0]) > cfg.decoder.max_positions:
        raise ValueError("prompt exceeds max_positions")
    rng = np.random.default_rng(seed)
    seqs = [list(p) for p in prompts]
    outputs = [[] for _ in prompts]
    done = [False] * len(prompts)
    with no_grad():
        P = project(encode_image(images, params, cfg), params)
        for _ in range(max_new):
            if n + len(seqs[0]) > cfg.decoder.max_positions:
                break
            ids = np.array(seqs, dtype=np.int64)
            I, layouts = assemble_inputs(P, ids, params, cfg)
            logits = decoder_forward(I, stack_bias(layouts, MaskKind.IMAGE_BIDI_TEXT_CAUSAL),
                                     params, cfg).data[:, -1]
            for row, z in enumerate(logits):
                if mode == "greedy":
                    tok = int(np.argmax(z))
                else:
                    order = np.argsort(-z, kind="stable")[:k]
                    p = np.exp(z[order] - z[order].max())
                    tok = int(order[rng.choice(len(order), p=p / p.sum())])
                seqs[row].append(tok)
                if done[row]:
                    continue
                if eos_id is not None and tok == eos_id:
                    done[row] = True
                else:
                    outputs[row].append(tok)
            if all(done):
                break
    return outputs

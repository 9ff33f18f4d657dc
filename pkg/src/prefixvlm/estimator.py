"""scikit-learn style facade over the staged captioning pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import BOS_ID, EOS_ID, Sample, Vocabulary, detokenize, split_words
from .metrics import EvalPair, cider
from .model import encode_image, generate_batch, get_preset, project
from .tensor import no_grad
from .training import run_pipeline


def check_images(X, image_size):
    """Validate an image stack of shape (n, 3, H, W) with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (3, image_size, image_size):
        raise ValueError(f"expected images of shape (n, 3, {image_size}, {image_size}), "
                         f"got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must be finite and lie in [0, 1]")
    return X


def check_captions(y, n):
    if isinstance(y, str):
        raise TypeError("captions must be a sequence of strings, not a single string")
    y = [str(c) for c in y]
    if len(y) != n:
        raise ValueError(f"got {n} images but {len(y)} captions")
    empty = [i for i, c in enumerate(y) if not split_words(c)]
    if empty:
        raise ValueError(f"caption {empty[0]} has no words")
    return y


class VLMCaptioner(BaseEstimator):
    """Image captioner trained from scratch through stages 0, 1 and 2.

    ``transform`` returns the projected image tokens, ``predict`` greedy
    captions and ``score`` corpus CIDEr against the given captions.
    """

    def __init__(self, preset="desk", stages=(0, 1, 2), steps_per_stage=100, seed=0,
                 stage_overrides=None, max_new_tokens=16):
        self.preset = preset
        self.stages = stages
        self.steps_per_stage = steps_per_stage
        self.seed = seed
        self.stage_overrides = stage_overrides
        self.max_new_tokens = max_new_tokens

    def fit(self, X, y):
        cfg = get_preset(self.preset)
        X = check_images(X, cfg.vision.image_size)
        y = check_captions(y, len(X))
        vocab = Vocabulary.build(y, max_size=cfg.decoder.vocab)
        samples = [Sample(img, cap) for img, cap in zip(X, y)]
        params, curves = run_pipeline(samples, cfg, vocab, stages=tuple(self.stages),
                                      seed=self.seed, steps=self.steps_per_stage,
                                      overrides=self.stage_overrides)
        self.config_ = cfg
        self.vocab_ = vocab
        self.params_ = params
        self.loss_curves_ = {s: [r.loss for r in c] for s, c in curves.items()}
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.config_.vision.image_size)
        with no_grad():
            P = project(encode_image(X, self.params_, self.config_), self.params_)
        return P.data.copy()

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.config_.vision.image_size)
        out = generate_batch(X, [[BOS_ID]] * len(X), self.params_, self.config_,
                             self.max_new_tokens, eos_id=EOS_ID)
        return [detokenize(ids, self.vocab_) for ids in out]

    def score(self, X, y):
        y = check_captions(y, len(X))
        pairs = [EvalPair(split_words(p) or ["<empty>"], [split_words(r)])
                 for p, r in zip(self.predict(X), y)]
        return cider(pairs)

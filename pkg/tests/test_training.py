import math

import numpy as np
import pytest

from prefixvlm.data import (IGNORE_INDEX, NOISE_ID, Sample, Vocabulary, build_batch,
                            render_synthetic)
from prefixvlm.masks import MaskKind
from prefixvlm.model import PRESETS, Component, VLMParams, forward_logits
from prefixvlm.tensor import Tensor
from prefixvlm.training import (AdamW, ScheduleState, StageConfig, accumulate_and_step,
                                clip_grad_norm, cosine_lr, epoch_order, forward_stage,
                                forward_stage0, noise_input, run_stage, stage_preset)

DESK = PRESETS["desk"]


@pytest.fixture(scope="module")
def corpus():
    samples = render_synthetic(n=16, seed=0)
    vocab = Vocabulary.build([s.caption for s in samples], max_size=DESK.decoder.vocab)
    return samples, vocab


# ---------------------------------------------------------------------------
# configuration

def test_full_stage_learning_rates():
    expected = {0: (0, 1e-3, 0), 1: (0, 1e-3, 0), 2: (5e-6, 2e-3, 2e-5), 3: (5e-6, 1e-4, 2e-5)}
    for stage, lrs in expected.items():
        cfg = stage_preset(stage, "full")
        assert (cfg.lr_vision, cfg.lr_projector, cfg.lr_language) == lrs
        assert (cfg.global_batch, cfg.epochs, cfg.min_lr) == (128, 1, 1e-8)
        assert cfg.betas == (0.9, 0.999) and cfg.weight_decay == 0.01


def test_stage_masks_and_noise():
    assert stage_preset(0).mask_kind is MaskKind.FULL_BIDIRECTIONAL
    assert stage_preset(0).noise_rate == 0.2
    for s in (1, 2, 3):
        assert stage_preset(s).mask_kind is MaskKind.IMAGE_BIDI_TEXT_CAUSAL
        assert stage_preset(s).noise_rate == 0.0
    assert stage_preset(0).trainable == {Component.PROJECTOR}
    assert stage_preset(2).trainable == set(Component)


@pytest.mark.parametrize("bad", [
    dict(stage=0, mask_kind="prefix"),
    dict(stage=0, lr_language=1e-3),
    dict(stage=1, noise_rate=0.2),
    dict(stage=1, mask_kind="full"),
    dict(stage=2, global_batch=30, micro_batch=8),
    dict(stage=4),
    dict(stage=2, lr_vision=-1.0),
])
def test_stage_config_invariants(bad):
    base = stage_preset(bad["stage"] if bad["stage"] in (0, 1, 2, 3) else 2).to_dict()
    base.update(bad)
    with pytest.raises(ValueError):
        StageConfig.from_dict(base)


def test_stage_config_round_trip():
    cfg = stage_preset(3)
    assert StageConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# noising

def test_noise_input_counts():
    ids = np.arange(10, 20)
    noised, labels = noise_input(ids, 0.2, seed=0)
    assert (noised == NOISE_ID).sum() == 2
    np.testing.assert_array_equal(labels, ids)
    assert np.array_equal(noise_input(ids, 0.0, seed=0)[0], ids)
    noised, labels = noise_input(ids, 1.0, seed=0)
    assert np.all(noised == NOISE_ID) and np.array_equal(labels, ids)
    # round half up: 0.1 * 5 = 0.5 -> 1
    assert (noise_input(np.arange(10, 15), 0.1, seed=0)[0] == NOISE_ID).sum() == 1
    assert np.array_equal(noise_input(ids, 0.3, seed=4)[0], noise_input(ids, 0.3, seed=4)[0])
    with pytest.raises(ValueError):
        noise_input(ids, 1.5, seed=0)


def test_stage0_noises_text_only_and_keeps_labels(corpus):
    samples, vocab = corpus
    batch = build_batch(samples[:4], 0, vocab, DESK, seed=1)
    params = VLMParams.init(DESK, 0)
    loss, I = forward_stage0(batch, params, DESK, stage_preset(0), retain_inputs=True)
    loss.backward()
    n = DESK.vision.num_patches
    for row in range(4):
        length = batch.lengths[row]
        noised, _ = noise_input(batch.text_ids[row, :length], 0.2, int(batch.seeds[row]))
        picks = np.nonzero(noised == NOISE_ID)[0]
        assert len(picks) == round(0.2 * length)
        # the identity shortcut is closed: noised rows still receive gradient
        for j in picks:
            assert np.abs(I.grad[row, n + j]).max() > 0


def test_stage0_initial_loss_near_uniform(corpus):
    samples, vocab = corpus
    batch = build_batch(samples, 0, vocab, DESK)
    loss = forward_stage0(batch, VLMParams.init(DESK, 0), DESK, stage_preset(0)).item()
    assert abs(loss / math.log(512) - 1) < 0.1


def test_forward_stage_rejects_stage0_config(corpus):
    samples, vocab = corpus
    batch = build_batch(samples[:2], 1, vocab, DESK)
    with pytest.raises(ValueError):
        forward_stage(batch, VLMParams.init(DESK, 0), DESK, stage_preset(0))
    with pytest.raises(ValueError):
        forward_stage0(batch, VLMParams.init(DESK, 0), DESK, stage_preset(1))


def test_stage3_loss_covers_answers_only():
    turns = [[("what shape is it?", "a red circle")],
             [("what color?", "blue"), ("where?", "top left")]]
    vocab = Vocabulary.build([t for conv in turns for pair in conv for t in pair])
    samples = [Sample(np.full((3, 32, 32), 0.5), turns=t) for t in turns]
    batch = build_batch(samples, 3, vocab, DESK)
    params = VLMParams.init(DESK, 2)
    loss = forward_stage(batch, params, DESK, stage_preset(3)).item()
    logits, _ = forward_logits(batch.images, batch.text_ids, params, DESK,
                               MaskKind.IMAGE_BIDI_TEXT_CAUSAL, lengths=batch.lengths)
    z = logits.data.reshape(-1, 512)
    y = batch.labels.reshape(-1)
    keep = np.nonzero(y != IGNORE_INDEX)[0]
    answer_words = {vocab.id(w) for w in ("a", "red", "circle", "blue", "top", "left")} | {2}
    assert set(y[keep].tolist()) <= answer_words
    lse = np.log(np.exp(z[keep] - z[keep].max(1, keepdims=True)).sum(1)) + z[keep].max(1)
    manual = float(np.mean(lse - z[keep, y[keep]]))
    assert abs(loss - manual) < 1e-12
    assert len(keep) == 3 + 1 + 1 + 2 + 1


# ---------------------------------------------------------------------------
# schedule, clipping, optimizer

def test_cosine_endpoints():
    s = ScheduleState(0, 100, min_lr=1e-8)
    assert cosine_lr(s, 1e-3) == 1e-3
    s.step = 100
    assert cosine_lr(s, 1e-3) == 1e-8
    s.step = 50
    assert abs(cosine_lr(s, 1e-3) - (1e-3 + 1e-8) / 2) < 1e-18
    s.step = 101
    with pytest.raises(ValueError):
        cosine_lr(s, 1e-3)


def test_cosine_monotone_and_frozen_zero():
    values = [cosine_lr(ScheduleState(k, 37), 2e-3) for k in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(cosine_lr(ScheduleState(k, 37), 0.0) == 0.0 for k in range(38))


def _params_with_grads(*grads):
    tensors = {}
    for i, g in enumerate(grads):
        t = Tensor(np.zeros_like(g), requires_grad=True)
        t.grad = np.asarray(g, dtype=float)
        tensors[f"projector.p{i}"] = t
    return VLMParams(tensors)


def test_clip_examples():
    p = _params_with_grads(np.array([6.0, 0.0]), np.array([8.0]))
    assert clip_grad_norm(p, 1.0) == 0.1
    norm = math.sqrt(sum(float((t.grad ** 2).sum()) for _, t in p.items()))
    assert abs(norm - 1.0) < 1e-9
    p = _params_with_grads(np.array([0.3, 0.4]))
    assert clip_grad_norm(p, 1.0) == 1.0
    np.testing.assert_array_equal(p["projector.p0"].grad, [0.3, 0.4])
    p = _params_with_grads(np.array([np.inf]))
    with pytest.raises(FloatingPointError):
        clip_grad_norm(p, 1.0)


def test_adamw_hand_example():
    t = Tensor([1.0], requires_grad=True)
    t.grad = np.array([1.0])
    p = VLMParams({"projector.w": t})
    AdamW().step(p, {Component.PROJECTOR: 0.1})
    # 1 - 0.1*0.01*1 - 0.1 * 1/(1 + 1e-8), evaluated to 20 digits by hand
    assert abs(p["projector.w"].data[0] - 0.89900000099999999) < 1e-12


def test_adamw_zero_grad_no_decay_and_frozen():
    t = Tensor([0.7, -2.0], requires_grad=True)
    t.grad = np.zeros(2)
    frozen = Tensor([3.0], requires_grad=True)
    frozen.grad = np.array([5.0])
    p = VLMParams({"projector.w": t, "language.w": frozen})
    opt = AdamW(weight_decay=0.0)
    opt.step(p, {Component.PROJECTOR: 0.1, Component.LANGUAGE: 0.0})
    np.testing.assert_array_equal(p["projector.w"].data, [0.7, -2.0])
    assert p["language.w"].data[0] == 3.0
    assert "language.w" not in opt.m


def test_adamw_missing_grad():
    p = VLMParams({"projector.w": Tensor([1.0], requires_grad=True)})
    with pytest.raises(ValueError):
        AdamW().step(p, {Component.PROJECTOR: 0.1})


# ---------------------------------------------------------------------------
# accumulation

def _one_step(micro, stage_cfg, seed=0):
    params = VLMParams.init(DESK, seed)
    params.set_trainable(stage_cfg.trainable)
    lrs = {c: stage_cfg.peak_lrs[c] for c in Component}
    loss, _ = accumulate_and_step(micro, params, AdamW(), DESK, stage_cfg, lrs)
    return params, loss


def test_single_micro_batch_is_plain_step(corpus):
    samples, vocab = corpus
    batch = build_batch(samples[:4], 2, vocab, DESK)
    cfg = stage_preset(2)
    a, loss = _one_step([batch], cfg)
    b = VLMParams.init(DESK, 0)
    ref = forward_stage(batch, b, DESK, cfg)
    assert loss == ref.item()
    ref.backward()
    scale = clip_grad_norm(b, cfg.clip_norm)
    AdamW().step(b, cfg.peak_lrs)
    assert scale < 1.0
    for name, t in a.items():
        assert np.array_equal(t.data, b[name].data)


def test_accumulated_loss_is_mean_of_micro_losses(corpus):
    samples, vocab = corpus
    cfg = stage_preset(1)
    micro = [build_batch(samples[i:i + 4], 1, vocab, DESK) for i in (0, 4)]
    params = VLMParams.init(DESK, 0)
    losses = [forward_stage(b, params, DESK, cfg).item() for b in micro]
    _, loss = _one_step(micro, cfg)
    assert abs(loss - np.mean(losses)) < 1e-12


def test_accumulation_handles_unequal_token_counts():
    turns = [[("q?", "a b c d e")], [("q?", "a")], [("q r?", "b c")], [("q?", "d e a")]]
    vocab = Vocabulary.build([t for conv in turns for pair in conv for t in pair])
    samples = [Sample(np.full((3, 32, 32), 0.1 * i), turns=t) for i, t in enumerate(turns)]
    cfg = stage_preset(3)
    whole, _ = _one_step([build_batch(samples, 3, vocab, DESK, seeds=range(4))], cfg)
    parts, _ = _one_step([build_batch(samples[:2], 3, vocab, DESK, seeds=[0, 1]),
                          build_batch(samples[2:], 3, vocab, DESK, seeds=[2, 3])], cfg)
    for name, t in whole.items():
        np.testing.assert_allclose(parts[name].data, t.data, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# stage driver

def test_epoch_order_is_pure():
    assert np.array_equal(epoch_order(10, 3, 1), epoch_order(10, 3, 1))
    assert not np.array_equal(epoch_order(10, 3, 1), epoch_order(10, 3, 2))


def test_run_stage_curve_and_files(tmp_path, corpus):
    samples, vocab = corpus
    cfg = stage_preset(1, global_batch=8, micro_batch=4, epochs=2)
    init = VLMParams.init(DESK, 0)
    params, curve = run_stage(samples, init, cfg, DESK, vocab, seed=0, out_dir=tmp_path)
    assert len(curve) == 2 * 2
    assert [r.step for r in curve] == [0, 1, 2, 3]
    assert curve[0].lr_projector == 1e-3 and curve[0].lr_vision == 0.0
    assert (tmp_path / "checkpoint.vlm").exists()
    lines = (tmp_path / "loss_curve.csv").read_text().splitlines()
    assert lines[0] == "step,lr_vision,lr_projector,lr_language,loss"
    assert len(lines) == 5
    for name, t in params.items():
        changed = not np.array_equal(t.data, init[name].data)
        assert changed == name.startswith("projector"), name


def test_run_stage_max_steps_and_empty(corpus):
    samples, vocab = corpus
    cfg = stage_preset(1, global_batch=8, micro_batch=8, epochs=10)
    _, curve = run_stage(samples, VLMParams.init(DESK, 0), cfg, DESK, vocab, max_steps=3)
    assert len(curve) == 3
    assert curve[-1].lr_projector > 1e-8
    with pytest.raises(ValueError):
        run_stage([], VLMParams.init(DESK, 0), cfg, DESK, vocab)


def test_stage0_loss_decreases_on_small_corpus(corpus):
    samples, vocab = corpus
    cfg = stage_preset(0, global_batch=16, micro_batch=8, epochs=50)
    _, curve = run_stage(samples, VLMParams.init(DESK, 0), cfg, DESK, vocab, seed=0)
    assert len(curve) == 50
    assert np.mean([r.loss for r in curve[-10:]]) < np.mean([r.loss for r in curve[:10]])

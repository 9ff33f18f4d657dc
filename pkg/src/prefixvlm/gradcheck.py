"""Whole-model gradient verification against central finite differences."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Sample, Vocabulary, build_batch, render_synthetic
from .model import Component, VLMParams
from .training import forward_stage, stage_preset
from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    leaf_errors: dict
    threshold: float
    elapsed: float
    checks: int
    worst_by_component: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.leaf_errors.values())

    @property
    def passed(self):
        return self.max_error <= self.threshold

    def lines(self):
        out = [f"max relative error {self.max_error:.3e} (threshold {self.threshold:.0e}) "
               f"over {len(self.leaf_errors)} leaves, {self.checks} probes, {self.elapsed:.1f}s"]
        for comp, (name, err) in self.worst_by_component.items():
            out.append(f"  worst {comp.value:<9} {name:<40} {err:.3e}")
        out.append("PASS" if self.passed else "FAIL")
        return out


def _probe_batch(cfg, seed):
    samples = render_synthetic(n=2, seed=seed)
    # a shorter second caption puts pad positions into the batch
    samples[1] = Sample(samples[1].image, "a red circle")
    vocab = Vocabulary.build([s.caption for s in samples], max_size=cfg.decoder.vocab)
    return build_batch(samples, 2, vocab, cfg, seed=seed)


def model_gradcheck(cfg, seed=0, h=1e-5, atol=1e-6, threshold=1e-3, elements_per_leaf=8,
                    directions=2):
    """Compare every leaf's analytic gradient with central differences.

    Each leaf is probed at its largest-gradient element, at seeded random
    elements, and along seeded random dense directions (which cover every
    element at once). The error of one probe is
    ``|analytic - central| / (|central| + atol)``.
    """
    start = time.perf_counter()
    params = VLMParams.init(cfg, seed)
    batch = _probe_batch(cfg, seed)
    stage_cfg = stage_preset(2)

    def loss_of(p):
        return forward_stage(batch, p, cfg, stage_cfg)

    loss = loss_of(params)
    loss.backward()
    grads = {n: t.grad.copy() for n, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed + 1)
    errors = {}
    checks = 0
    with no_grad():
        for name, leaf in params.items():
            g = grads[name]
            base = leaf.data
            probes = []
            picks = {int(np.argmax(np.abs(g)))}
            picks.update(rng.choice(base.size, size=min(elements_per_leaf, base.size),
                                    replace=False).tolist())
            for i in sorted(picks):
                d = np.zeros(base.size)
                d[i] = 1.0
                probes.append(d.reshape(base.shape))
            for _ in range(directions):
                d = rng.normal(size=base.shape)
                probes.append(d / np.linalg.norm(d))
            worst = 0.0
            for d in probes:
                up = loss_of(params.replace(name, Tensor(base + h * d))).item()
                down = loss_of(params.replace(name, Tensor(base - h * d))).item()
                central = (up - down) / (2 * h)
                analytic = float((g * d).sum())
                worst = max(worst, abs(analytic - central) / (abs(central) + atol))
                checks += 1
            errors[name] = worst
    report = GradcheckReport(errors, threshold, time.perf_counter() - start, checks)
    for comp in Component:
        names = params.names(comp)
        name = max(names, key=errors.get)
        report.worst_by_component[comp] = (name, errors[name])
    return report


def run_with_fault(cfg, seed=0, **kw):
    """Gradient check with a deliberately wrong GeLU derivative."""
    T.set_gradient_fault(True)
    try:
        return model_gradcheck(cfg, seed, **kw)
    finally:
        T.set_gradient_fault(False)

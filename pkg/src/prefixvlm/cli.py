"""Command line entry point: ``prefixvlm <command> ...``.

Exit codes: 0 success, 1 contract error (bad data, config mismatch, failed
check), 2 usage error. Diagnostics go to stderr, data to stdout or files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import (ANS_ID, BOS_ID, EOS_ID, INST_ID, DataError, SyntheticShapesSpec, Vocabulary,
                   check_image, detokenize, load_jsonl, read_image, render_synthetic,
                   shuffle_words, split_words, tokenize, write_jsonl)
from .masks import MaskKind, SegmentLayout, build_mask
from .metrics import EvalPair, MetricError, bleu, cider, corpus_mean_ce, rouge_l
from .model import VLMConfig, VLMParams, generate, get_preset
from .training import run_stage, stage_preset

log = logging.getLogger("prefixvlm")

OUT_ENV = "PREFIXVLM_OUT"
METRICS = ("bleu", "bleu1", "bleu2", "bleu3", "bleu4", "rouge", "cider")


class CommandError(Exception):
    """A command could not meet its contract; exit status 1."""


def default_out(name):
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _existing(text):
    if not Path(text).exists():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return Path(text)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _publish(tmp, out):
    """Move a finished temp dir into place; files replace same-named ones."""
    out = Path(out)
    if not out.exists():
        os.replace(tmp, out)
        return
    for item in Path(tmp).iterdir():
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        os.replace(item, target)
    shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            conf = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(conf, dict):
        raise CommandError(f"{path}: top level must be an object")
    unknown = set(conf) - {"model", "scale", "stage", "data"}
    if unknown:
        raise CommandError(f"{path}: unknown keys {sorted(unknown)}")
    return conf


def _model_config(conf):
    model = conf.get("model", "desk")
    try:
        if isinstance(model, str):
            return get_preset(model)
        return VLMConfig.from_dict(model)
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"bad model config: {exc}") from None


def _corpus_texts(samples):
    for s in samples:
        if s.caption is not None:
            yield s.caption
        for inst, ans in s.turns:
            yield inst
            yield ans


def cmd_train(args):
    conf = _read_config(args.config)
    cfg = _model_config(conf)
    overrides = dict(conf.get("stage", {}))
    try:
        stage_cfg = stage_preset(args.stage, conf.get("scale", "desk"), **overrides)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"bad stage config: {exc}") from None
    image_root = conf.get("data", {}).get("image_root")
    dataset = load_jsonl(args.data, image_root=image_root, image_size=cfg.vision.image_size)
    if not dataset:
        raise CommandError(f"{args.data}: no samples")
    texts = list(_corpus_texts(dataset))
    if args.resume is not None:
        params, _, vocab, _ = load_checkpoint(args.resume, expect_config=cfg)
        vocab = vocab or Vocabulary(max_size=cfg.decoder.vocab)
        vocab.extend(texts)
    else:
        vocab = Vocabulary.build(texts, max_size=cfg.decoder.vocab)
        params = VLMParams.init(cfg, args.seed)

    out = Path(args.out) if args.out else default_out(f"stage{args.stage}")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.")
    try:
        params, curve = run_stage(dataset, params, stage_cfg, cfg, vocab, seed=args.seed,
                                  out_dir=tmp, max_steps=args.steps)
        manifest = {
            "command": "train",
            "stage": args.stage,
            "seed": args.seed,
            "data": str(args.data),
            "resume": str(args.resume) if args.resume else None,
            "model": cfg.to_dict(),
            "stage_config": stage_cfg.to_dict(),
            "steps": len(curve),
            "vocab_size": len(vocab),
            "final_loss": curve[-1].loss,
        }
        with open(Path(tmp) / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        _publish(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"stage {args.stage}: {len(curve)} steps, loss {curve[0].loss:.4f} -> "
          f"{curve[-1].loss:.4f}, wrote {out}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args):
    params, cfg, vocab, _ = load_checkpoint(args.ckpt)
    if vocab is None:
        raise CommandError(f"{args.ckpt}: checkpoint carries no vocabulary")
    image = check_image(read_image(args.image), cfg.vision.image_size, str(args.image))
    unknown = []
    words = tokenize(args.prompt, vocab, unknown=unknown)
    if unknown:
        log.warning("prompt words not in vocabulary, mapped to <unk>: %s",
                    " ".join(sorted(set(unknown))))
    prompt = [BOS_ID] + ([INST_ID] + words + [ANS_ID] if args.instruction else words)
    if args.instruction and not words:
        raise CommandError("--instruction needs a nonempty --prompt")
    mode = "greedy" if args.topk is None else "topk"
    out = generate(image, prompt, params, cfg, args.max_new, mode=mode, k=args.topk,
                   seed=args.seed, eos_id=EOS_ID)
    print(detokenize(out, vocab))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_records(path, key):
    recs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                recs[str(rec["image_id"])] = rec[key]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise CommandError(f"{path}:{lineno}: expected a JSON object with "
                                   f"'image_id' and '{key}'") from None
    return recs


def parse_metrics(text):
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown metric {', '.join(bad) or '(none)'}; valid names: {', '.join(METRICS)}")
    return names


def evaluate(pred, refs, metrics):
    missing = sorted(set(pred) - set(refs))
    if missing:
        raise CommandError(f"no references for image_id {missing[0]}")
    ids = sorted(pred)
    pairs = [EvalPair(split_words(pred[i]), [split_words(r) for r in refs[i]]) for i in ids]
    rows = []
    for m in metrics:
        if m == "bleu":
            rows += [(f"bleu{n}", bleu(pairs, n)) for n in range(1, 5)]
        elif m.startswith("bleu"):
            rows.append((m, bleu(pairs, int(m[-1]))))
        elif m == "rouge":
            rows.append(("rouge_l", rouge_l(pairs)))
        else:
            rows.append(("cider", cider(pairs)))
    return rows


def cmd_eval(args):
    pred = _read_records(args.pred, "caption")
    refs = _read_records(args.refs, "captions")
    rows = evaluate(pred, refs, args.metrics)
    out = Path(args.out) if args.out else default_out("metrics.csv")
    _write_csv(out, ["metric", "value"], [(m, repr(v)) for m, v in rows])
    width = max(len(m) for m, _ in rows)
    for m, v in rows:
        print(f"{m:<{width}}  {v:.4f}")


# ---------------------------------------------------------------------------
# mask-dump, gradcheck, compare-loss, synth
# ---------------------------------------------------------------------------

def cmd_mask_dump(args):
    layout = SegmentLayout.parse(args.layout)
    mask = build_mask(layout, args.kind)
    header = [f"j{j}" for j in range(layout.total_len)]
    rows = mask.allow.astype(int).tolist()
    if args.out:
        _write_csv(args.out, header, rows)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)


def cmd_gradcheck(args):
    from .gradcheck import model_gradcheck, run_with_fault

    cfg = get_preset(args.preset)
    check = run_with_fault if args.inject_fault else model_gradcheck
    report = check(cfg, seed=args.seed)
    print("\n".join(report.lines()))
    if not report.passed:
        raise CommandError(f"gradient check failed: max relative error "
                           f"{report.max_error:.3e} above {report.threshold:.0e}")


def cmd_compare_loss(args):
    params, cfg, vocab, _ = load_checkpoint(args.ckpt)
    if vocab is None:
        raise CommandError(f"{args.ckpt}: checkpoint carries no vocabulary")
    size = cfg.vision.image_size
    a = load_jsonl(args.corpus_a, image_size=size)
    b = load_jsonl(args.corpus_b, image_size=size)
    for name, corpus in (("corpus-a", a), ("corpus-b", b)):
        if not corpus:
            raise CommandError(f"{name} is empty")
    ce_a = corpus_mean_ce(a, params, cfg, vocab)
    ce_b = corpus_mean_ce(b, params, cfg, vocab)
    rows = [("corpus_a", repr(ce_a)), ("corpus_b", repr(ce_b)), ("difference", repr(ce_b - ce_a))]
    out = Path(args.out) if args.out else default_out("compare_loss.csv")
    _write_csv(out, ["quantity", "mean_ce"], rows)
    print(f"corpus_a    {ce_a:.6f}\ncorpus_b    {ce_b:.6f}\ndifference  {ce_b - ce_a:.6f}")


def cmd_synth(args):
    spec = SyntheticShapesSpec()
    if args.spec:
        with open(args.spec) as fh:
            spec = SyntheticShapesSpec.from_dict(json.load(fh))
    samples = render_synthetic(spec, n=args.n, seed=args.seed)
    if args.shuffle_words:
        samples = shuffle_words(samples, seed=args.seed)
    out = Path(args.out) if args.out else default_out("synthetic")
    index = write_jsonl(samples, out)
    print(index)


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="prefixvlm", allow_abbrev=False,
                                description="Staged vision-language training at desk scale.")
    p.add_argument("--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training stage", allow_abbrev=False)
    t.add_argument("--stage", type=int, choices=(0, 1, 2, 3), required=True)
    t.add_argument("--config", type=_existing, help="JSON run config")
    t.add_argument("--data", type=_existing, required=True, help="JSONL corpus")
    t.add_argument("--out", help=f"output dir (default ${OUT_ENV}/stageN)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", type=_existing, help="checkpoint to continue from")
    t.add_argument("--steps", type=_positive_int, help="cap on optimizer steps")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="caption or answer for one image", allow_abbrev=False)
    g.add_argument("--ckpt", type=_existing, required=True)
    g.add_argument("--image", type=_existing, required=True)
    g.add_argument("--prompt", default="")
    g.add_argument("--instruction", action="store_true",
                   help="wrap the prompt in the instruction template")
    g.add_argument("--max-new", type=_positive_int, default=16)
    g.add_argument("--topk", type=_positive_int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="caption metrics", allow_abbrev=False)
    e.add_argument("--pred", type=_existing, required=True)
    e.add_argument("--refs", type=_existing, required=True)
    e.add_argument("--metrics", type=parse_metrics, default=parse_metrics("bleu,rouge,cider"))
    e.add_argument("--out", help="CSV path")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mask-dump", help="write an attention mask as 0/1 CSV", allow_abbrev=False)
    m.add_argument("--layout", required=True, help='e.g. "image:2,text:2"')
    m.add_argument("--kind", required=True, help=", ".join(k.value for k in MaskKind))
    m.add_argument("--out", help="CSV path (default stdout)")
    m.set_defaults(func=cmd_mask_dump)

    c = sub.add_parser("gradcheck", help="whole-model finite-difference check", allow_abbrev=False)
    c.add_argument("--preset", choices=("desk",), default="desk")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", action="store_true",
                   help="use a wrong GeLU derivative (negative control)")
    c.set_defaults(func=cmd_gradcheck)

    l = sub.add_parser("compare-loss", help="mean CE of two corpora under one model",
                       allow_abbrev=False)
    l.add_argument("--ckpt", type=_existing, required=True)
    l.add_argument("--corpus-a", type=_existing, required=True)
    l.add_argument("--corpus-b", type=_existing, required=True)
    l.add_argument("--out", help="CSV path")
    l.set_defaults(func=cmd_compare_loss)

    s = sub.add_parser("synth", help="write a synthetic shapes corpus", allow_abbrev=False)
    s.add_argument("--n", type=_positive_int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", type=_existing, help="JSON shapes spec")
    s.add_argument("--shuffle-words", action="store_true")
    s.add_argument("--out", help="output dir")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CommandError, CheckpointError, DataError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

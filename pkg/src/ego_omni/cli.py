"""Command line entry point: ``ego-omni <command> [--config C] [--seed S] [--out DIR]``.

Exit codes: 0 success, 2 validation error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import synth
from .bench.bundle import MotionBundle, from_sequence, load_bundle, save_bundle
from .bench.config import load_config
from .bench.evaluate import Models, evaluate
from .bench.metrics import mpjpe
from .codec import PartVQVAE, train_codec
from .fusion import FusionModel, FusionSample, fuse, make_fusion_samples, select_codes, train_fusion
from .imusim import mask_from_labels
from .kinematics import Skeleton, rotmat_to_6d, sixd_to_rotmat
from .narrator import (
    NarratorModel,
    TokenVocab,
    describe,
    feedback_track,
    finetune_multimodal,
    make_instructions,
    pretrain_motion,
    save_corpus,
    warmup_language,
)
from .providers import make_provider
from .reprs import recover_positions
from .tracker import track

log = logging.getLogger("ego_omni")

EXIT_OK, EXIT_INVALID, EXIT_MISSING = 0, 2, 3
DEFAULT_FILES = {"data": ".", "codec": "codec.egoc", "fusion": "fusion.egoc", "narrator": "narrator.egoc"}


def _seed(args) -> int | None:
    env = os.environ.get("EGO_OMNI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"EGO_OMNI_SEED must be an integer, got {env!r}") from None
    return args.seed


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _artifact(args, name: str) -> Path:
    """Explicit --<name> flag, else the conventional file under --out."""
    given = getattr(args, name, None)
    if given is not None:
        return Path(given)
    return Path(args.out) / DEFAULT_FILES[name]


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# data on disk -----------------------------------------------------------------

def _write_split(out: Path, split: str, dataset, skeleton, cfg, seed: int):
    d = out / split
    records = []
    for k, (s, fs) in enumerate(zip(dataset, make_fusion_samples(dataset, skeleton, cfg.data.noise, seed))):
        xyz, heading = fs.initial_root
        b = from_sequence(s.seq, imu_accel=fs.accel, imu_rot6d=rotmat_to_6d(fs.rot), imu_active=np.ones(5, dtype=bool),
                          repr=fs.repr, meta={"label": s.label, "description": s.description, "question": s.question,
                                              "image_id": s.image_id,
                                              "initial_root": [[float(v) for v in xyz], float(heading)]})
        path = d / f"clip_{k:04d}.egob"
        save_bundle(path, b, skeleton)
        records.append({"motion_bundle_path": str(path.relative_to(out)), "image_id": s.image_id,
                        "question": s.question, "answer": s.description, "class_label": s.label})
    save_corpus(out / f"corpus_{split}.jsonl", records)


def _sample_from_bundle(b: MotionBundle) -> FusionSample:
    if b.imu_accel is None or b.repr is None:
        raise ValueError("bundle lacks IMU streams or representation")
    rot = sixd_to_rotmat(b.imu_rot6d.astype(np.float64))
    root = b.meta.get("initial_root")
    return FusionSample(b.repr.astype(np.float64), b.imu_accel.astype(np.float64), rot,
                        b.meta.get("image_id", ""), b.meta.get("description", ""), b.meta.get("label", ""),
                        None if root is None else (np.array(root[0]), float(root[1])), b.meta.get("question", ""))


def _load_split(data: Path, split: str) -> list[FusionSample]:
    files = sorted((data / split).glob("clip_*.egob"))
    if not files:
        raise FileNotFoundError(f"no clips under {data / split}")
    return [_sample_from_bundle(load_bundle(f)) for f in files]


def _vocab(samples) -> TokenVocab:
    return TokenVocab.build([s.text for s in samples] + list(synth.QUESTIONS))


# commands -----------------------------------------------------------------------

def cmd_synth_data(args, cfg):
    out = _out(args)
    sk = Skeleton()
    n_train = args.n_train or cfg.data.n_train
    n_test = args.n_test or cfg.data.n_test
    train = synth.synth_dataset(n_train, seed=cfg.seed, T=cfg.data.T, fps=cfg.data.fps)
    test = synth.synth_dataset(n_test, seed=cfg.seed + 10_000, T=cfg.data.T, fps=cfg.data.fps)
    _write_split(out, "train", train, sk, cfg, cfg.seed)
    _write_split(out, "test", test, sk, cfg, cfg.seed + 1_000_000)
    print(f"wrote {n_train} train and {n_test} test clips to {out}")


def cmd_train_vqvae(args, cfg):
    samples = _load_split(_need(_artifact(args, "data"), "data directory"), "train")
    model, hist = train_codec(np.stack([s.repr for s in samples]), cfg.codec)
    final = hist.epoch_losses[-1] if hist.epoch_losses else hist.initial
    path = model.save(_out(args) / "codec.egoc", {"seed": cfg.seed, "final_loss": final})
    print(f"codec saved to {path}")


def cmd_train_encoder(args, cfg):
    samples = _load_split(_need(_artifact(args, "data"), "data directory"), "train")
    codec = PartVQVAE.load(_need(_artifact(args, "codec"), "codec checkpoint"))
    fcfg = replace(cfg.fusion, n_code=codec.cfg.n_code)
    model, _ = train_fusion(samples, codec, make_provider(args.provider), fcfg)
    path = model.save(_out(args) / "fusion.egoc", {"seed": cfg.seed})
    print(f"fusion encoder saved to {path}")


def _load_models(args, narrator: bool | str = False):
    codec = PartVQVAE.load(_need(_artifact(args, "codec"), "codec checkpoint"))
    fusion = FusionModel.load(_need(_artifact(args, "fusion"), "fusion checkpoint"))
    model = vocab = None
    if narrator:
        path = Path(narrator) if isinstance(narrator, str) else _artifact(args, "narrator")
        model, vocab = NarratorModel.load(_need(path, "narrator checkpoint"))
    return Models(codec, fusion, model, vocab, make_provider(args.provider))


def cmd_pretrain_narrator(args, cfg):
    import torch

    samples = _load_split(_need(_artifact(args, "data"), "data directory"), "train")
    m = _load_models(args)
    vocab = _vocab(samples)
    torch.manual_seed(cfg.seed)
    model = NarratorModel(len(vocab), replace(cfg.narrator, n_code=m.codec.cfg.n_code))
    corpus_ft = make_instructions(samples, m.fusion, m.codec, m.provider, seed=cfg.seed + 2)
    corpus_pre = make_instructions(samples, m.fusion, m.codec, m.provider, recipes=("AR",), seed=cfg.seed + 1)
    warmup_language(corpus_ft, model, vocab)
    pretrain_motion(corpus_pre, model, vocab)
    path = model.save(_out(args) / "narrator_pretrained.egoc", vocab, {"stage": "pretrain", "seed": cfg.seed})
    print(f"pre-trained narrator saved to {path}")


def cmd_finetune_narrator(args, cfg):
    samples = _load_split(_need(_artifact(args, "data"), "data directory"), "train")
    pre = args.narrator or str(Path(args.out) / "narrator_pretrained.egoc")
    m = _load_models(args, narrator=pre)
    corpus = make_instructions(samples, m.fusion, m.codec, m.provider, seed=cfg.seed + 2)
    finetune_multimodal(corpus, m.narrator, m.vocab)
    path = m.narrator.save(_out(args) / "narrator.egoc", m.vocab, {"stage": "finetune", "seed": cfg.seed})
    print(f"fine-tuned narrator saved to {path}")


def _clip_input(args, m: Models):
    if args.bundle is None:
        raise ValueError("--bundle is required")
    s = _sample_from_bundle(load_bundle(_need(args.bundle, "motion bundle")))
    inp = s.input(mask_from_labels(args.setup), m.provider, image=args.image, text=getattr(args, "text", False))
    return s, inp


def cmd_track(args, cfg):
    m = _load_models(args)
    s, inp = _clip_input(args, m)
    init = select_codes(fuse(inp, m.fusion), m.codec.books.detach(), "argmax").features
    ecfg = cfg.energy if args.max_iters is None else replace(cfg.energy, max_iters=args.max_iters)
    res = track(init, inp.imu, m.codec.frozen_decoder(), Skeleton(), ecfg, initial_root=s.initial_root)
    out = _out(args)
    gt = recover_positions(s.repr, Skeleton(), s.initial_root)
    rot6 = np.zeros(res.positions.shape[:2] + (6,))
    rot6[..., 0], rot6[..., 4] = 1.0, 1.0  # positions-only result: identity rotations
    save_bundle(out / "track.egob", MotionBundle(res.positions, rot6, 30.0, repr=res.motion.data,
                                                 meta={"setup": args.setup, "mpjpe_mm": mpjpe(res.positions, gt)}))
    (out / "energy_trace.json").write_text(json.dumps({
        "energy_trace": res.energy_trace, "L_a": res.term_values[0], "L_r": res.term_values[1],
        "iterations": res.iterations, "converged": res.converged, "warning": res.warning,
        "mpjpe_mm": mpjpe(res.positions, gt)}, indent=1) + "\n")
    print(f"tracked {args.setup}: MPJPE {mpjpe(res.positions, gt):.2f} mm after {res.iterations} iterations")


def cmd_describe(args, cfg):
    m = _load_models(args, narrator=True)
    _, inp = _clip_input(args, m)
    text = describe(inp.imu, inp.image_feature, m.fusion, m.codec, m.narrator, m.vocab, args.decoding, cfg.seed)
    (_out(args) / "description.txt").write_text(text + "\n")
    print(text)


def cmd_eval(args, cfg):
    test = _load_split(_need(_artifact(args, "data"), "data directory"), "test")
    combos = cfg.eval.combos
    has_narrator = args.narrator is not None or _artifact(args, "narrator").exists()
    if not has_narrator and any("gentext" in c for c in combos):
        log.warning("no narrator checkpoint; skipping generated-text combinations")
        combos = tuple(c for c in combos if "gentext" not in c)
    m = _load_models(args, narrator=has_narrator)
    opts = replace(cfg.eval, combos=combos, svg=cfg.eval.svg or args.svg)
    report = evaluate(m, test, opts, cfg.energy, seed=cfg.seed)
    for p in report.write(_out(args), svg=opts.svg):
        print(f"wrote {p}")


def cmd_feedback_eval(args, cfg):
    test = _load_split(_need(_artifact(args, "data"), "data directory"), "test")
    m = _load_models(args, narrator=True)
    active = mask_from_labels(args.setup)
    ecfg = replace(cfg.energy, max_iters=cfg.eval.max_iters)
    rows = []
    sk = Skeleton()
    for s in test[: args.clips]:
        inp = s.input(active, m.provider, image=args.image)
        fb = feedback_track(inp.imu, inp.image_feature, m.fusion, m.codec, m.narrator, m.vocab, m.provider, ecfg,
                            s.initial_root)
        gt = recover_positions(s.repr, sk, s.initial_root)
        rows.append({"label": s.label, "generated": fb.text, "reference": s.text,
                     "mpjpe_with_generated_text": mpjpe(fb.with_text.positions, gt),
                     "mpjpe_without_text": mpjpe(fb.without_text.positions, gt)})
    summary = {k: float(np.mean([r[k] for r in rows])) for k in ("mpjpe_with_generated_text", "mpjpe_without_text")}
    (_out(args) / "feedback.json").write_text(json.dumps({"setup": args.setup, "clips": rows, "mean": summary},
                                                         indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-vqvae": cmd_train_vqvae,
    "train-encoder": cmd_train_encoder,
    "pretrain-narrator": cmd_pretrain_narrator,
    "finetune-narrator": cmd_finetune_narrator,
    "track": cmd_track,
    "describe": cmd_describe,
    "eval": cmd_eval,
    "feedback-eval": cmd_feedback_eval,
}


def _global_flags(parser, suppress: bool):
    # subcommands repeat the global flags so they may follow the command name;
    # their defaults are suppressed so they never overwrite a value given earlier
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON config (profile desk|paper plus section overrides)")
    parser.add_argument("--seed", type=int, default=d(None))
    parser.add_argument("--out", default=d("runs/default"), help="output directory; also the default artifact location")
    parser.add_argument("--provider", default=d("stub"), help="stub, file:<path> or an http(s) URL")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="ego-omni", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, *extra):
        sp = sub.add_parser(name, parents=[common])
        for fn in extra:
            fn(sp)
        return sp

    def data(sp):
        sp.add_argument("--data", help="directory written by synth-data (default: --out)")

    def models(sp):
        sp.add_argument("--codec", help="default: <out>/codec.egoc")
        sp.add_argument("--fusion", help="default: <out>/fusion.egoc")

    def narrator(sp):
        sp.add_argument("--narrator", help="default: <out>/narrator.egoc")

    def clip(sp):
        sp.add_argument("--bundle", help="motion bundle with IMU streams")
        sp.add_argument("--setup", default="LW+RW+H", help="IMU labels joined by '+'")
        sp.add_argument("--image", action="store_true", help="add the clip's image feature")

    sd = add("synth-data")
    sd.add_argument("--n-train", type=int, default=None)
    sd.add_argument("--n-test", type=int, default=None)
    add("train-vqvae", data)
    add("train-encoder", data, models)
    add("pretrain-narrator", data, models)
    add("finetune-narrator", data, models, narrator)
    tr = add("track", models, clip)
    tr.add_argument("--text", action="store_true", help="add the clip's reference description")
    tr.add_argument("--max-iters", type=int, default=None)
    ds = add("describe", models, narrator, clip)
    ds.add_argument("--decoding", choices=("greedy", "top-k"), default="greedy")
    ev = add("eval", data, models, narrator)
    ev.add_argument("--svg", action="store_true")
    fb = add("feedback-eval", data, models, narrator)
    fb.add_argument("--setup", default="LW+RW+H")
    fb.add_argument("--image", action="store_true")
    fb.add_argument("--clips", type=int, default=6)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _seed(args))
        COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        print(f"error: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

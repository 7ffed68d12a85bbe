"""Command-line entry point: ``lip2speech {gen-data,train-asr,train,synthesize,evaluate}``.

Exit codes: 0 success, 1 internal failure, 2 usage or input error.
"""
import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import dsp
from .asr import AsrNotConverged, load_asr, pretrain_asr, save_asr
from .checkpoint import CheckpointError
from .config import load_config
from .container import ContainerError
from .evaluation import evaluate_corpus, vocode_aligned
from .model import ConfigError
from .train import Trainer, load_lip2speech

log = logging.getLogger("lip2speech")

CORPUS_OUTPUTS = ("manifest.jsonl", "vocab.json", "corpus.json", "config.json", "video", "wav")


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, ConfigError, data_mod.DataError, CheckpointError, ContainerError, OSError)


# ---------------------------------------------------------------- helpers

def _load_corpus(cfg):
    root = Path(cfg.data.root)
    if not (root / "manifest.jsonl").exists():
        raise UsageError(f"no corpus at {root} (run gen-data first)")
    return data_mod.Corpus(root, cfg.dsp.mel_config())


def _split(corpus, cfg, which):
    train_idx, val_idx = corpus.split(cfg.data.val_fraction, cfg.seed)
    if which == "train":
        return train_idx
    if which == "val":
        if not val_idx:
            raise UsageError("validation split is empty (data.val_fraction is 0)")
        return val_idx
    return list(range(len(corpus)))


def asr_dir(cfg):
    return cfg.out_path / "asr"


def train_dir(cfg):
    return cfg.out_path / "train"


def latest_checkpoint(directory):
    ckpts = sorted(Path(directory).glob("ckpt_epoch*.l2s"))
    if not ckpts:
        raise UsageError(f"no training checkpoints in {directory}")
    return ckpts[-1]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed, args.profile)
    out = Path(args.out_dir) if args.out_dir else Path(cfg.data.root)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} is not empty (use --force to regenerate)")
        for name in CORPUS_OUTPUTS:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    cfg.data.root = str(out)
    corpus_cfg = cfg.data.corpus_config(cfg.seed, cfg.dsp.sample_rate)
    data_mod.make_synthetic_corpus(out, corpus_cfg)
    cfg.archive(out)
    records = data_mod.read_manifest(out / "manifest.jsonl")
    vocab = data_mod.Vocabulary.load(out / "vocab.json")
    print(f"manifest: {out / 'manifest.jsonl'}")
    print(f"utterances {len(records)} speakers {len({r['speaker_id'] for r in records})} "
          f"vocab {len(vocab)} tokens_per_utt {corpus_cfg.tokens_per_utt}")
    return 0


def cmd_train_asr(args):
    cfg = load_config(args.config, args.seed, args.profile)
    corpus = _load_corpus(cfg)
    cfg = cfg.with_vocab_size(len(corpus.vocab))
    out = asr_dir(cfg)
    paths = {"feedback": out / "feedback.asr", "evaluation": out / "evaluation.asr"}
    if any(p.exists() for p in paths.values()) and not args.force:
        raise UsageError(f"ASR checkpoints already exist in {out} (use --force to retrain)")
    out.mkdir(parents=True, exist_ok=True)
    cfg.archive(out)
    indices = _split(corpus, cfg, "train")
    seeds = {"feedback": cfg.seed, "evaluation": cfg.seed + cfg.asr.evaluation_seed_offset}
    reports = {}
    for role, seed in seeds.items():
        model, report = pretrain_asr(corpus, cfg.asr.model, cfg.asr.train, seed=seed, role=role,
                                     indices=indices)
        save_asr(paths[role], model, corpus.vocab, {"seed": seed})
        reports[role] = {"seed": seed, "epochs": report["epochs"], "train_wer": report["wer"]}
        print(f"{role}: {paths[role]} epochs {report['epochs']} train WER% {100 * report['wer']:.2f}")
    (out / "report.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.seed, args.profile)
    corpus = _load_corpus(cfg)
    cfg = cfg.with_vocab_size(len(corpus.vocab))
    fb_path = asr_dir(cfg) / "feedback.asr"
    if not fb_path.exists():
        raise UsageError(f"feedback ASR checkpoint missing: {fb_path} (run train-asr first)")
    feedback = load_asr(fb_path, expected_role="feedback", vocab=corpus.vocab)
    out = train_dir(cfg)
    if args.resume is None and (out / "metrics.csv").exists() and not args.force:
        raise UsageError(f"{out} already holds a run (use --resume or --force)")
    if args.resume is not None and not Path(args.resume).exists():
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    if args.max_epochs is not None:
        cfg.train.max_epochs = args.max_epochs
    trainer = Trainer(corpus, feedback, cfg.model, cfg.train, cfg.objective,
                      indices=_split(corpus, cfg, "train"), out_dir=out)
    if args.resume is not None:
        trainer.restore(args.resume)
    elif out.exists():
        for p in out.glob("ckpt_epoch*.l2s"):
            p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    cfg.archive(out)
    metrics = trainer.fit(max_steps=args.max_steps)
    print(f"metrics: {metrics}")
    print(f"checkpoint: {trainer.checkpoint_path(trainer.epoch)} (step {trainer.step})")
    return 0


def cmd_synthesize(args):
    model, meta = load_lip2speech(args.checkpoint)
    if args.vocab is not None:
        vocab = data_mod.Vocabulary.load(args.vocab)
        if vocab.hash() != meta["vocab_hash"]:
            raise CheckpointError(f"{args.checkpoint}: vocabulary hash does not match {args.vocab}")
    if not Path(args.ref).exists():
        raise UsageError(f"speaker reference not found: {args.ref}")
    mel_cfg = model.mel_cfg
    frames = data_mod.load_video_frames(args.video)
    clip = data_mod.preprocess_video(frames, target=model.cfg.image_size)
    video = torch.from_numpy(clip.frames[..., 0][None])
    wave = dsp.read_wav(args.ref)
    if wave.sample_rate != mel_cfg.stft.sample_rate:
        raise UsageError(f"speaker reference sample rate {wave.sample_rate} != {mel_cfg.stft.sample_rate}")
    rng = np.random.default_rng(args.seed)
    ref = data_mod.sample_speaker_reference(wave.samples, model.cfg.ref_seconds, rng, wave.sample_rate)
    with torch.no_grad():
        res = model(video, torch.tensor([video.shape[1]]), torch.from_numpy(ref[None].astype(np.float32)))
    mel = res["mel"][0].numpy().astype(np.float64)
    n = len(mel) * mel_cfg.stft.hop_length
    out = vocode_aligned(mel, mel_cfg, n, args.gl_iters, args.seed)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    dsp.write_wav(args.out, dsp.Waveform(out, mel_cfg.stft.sample_rate))
    print(f"wrote {args.out} ({n / mel_cfg.stft.sample_rate:.3f} s, {len(mel)} mel frames)")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config, args.seed, args.profile)
    corpus = _load_corpus(cfg)
    cfg = cfg.with_vocab_size(len(corpus.vocab))
    asr_path = Path(args.asr) if args.asr else asr_dir(cfg) / "evaluation.asr"
    if not asr_path.exists():
        raise UsageError(f"evaluation ASR checkpoint missing: {asr_path}")
    eval_asr = load_asr(asr_path, expected_role="evaluation", vocab=corpus.vocab)
    model = None
    if not args.ground_truth:
        ckpt = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(train_dir(cfg))
        model, _ = load_lip2speech(ckpt, corpus.vocab)
    split = args.split or cfg.eval.split
    indices = _split(corpus, cfg, split)
    report = evaluate_corpus(model, eval_asr, corpus, indices, gl_iters=cfg.eval.gl_iters,
                             seed=cfg.seed, ground_truth=args.ground_truth, vocode=cfg.eval.vocode,
                             pesq_command=cfg.eval.pesq_command)
    out = Path(args.out_dir) if args.out_dir else cfg.out_path / "eval"
    stem = f"report_{split}" + ("_ground_truth" if args.ground_truth else "")
    csv_path, json_path = report.write(out, stem)
    cfg.archive(out)
    print(f"report: {csv_path} {json_path}")
    print(report.summary_line())
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="lip2speech", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--profile", choices=["toy", "full"], help="defaults profile (overrides config)")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        return p

    p = common(sub.add_parser("gen-data", help="generate the synthetic glyph/tone corpus"))
    p.add_argument("out_dir", nargs="?", help="corpus directory (default: data.root)")
    p.add_argument("--force", action="store_true", help="regenerate into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-asr", help="pretrain feedback and evaluation recognizers"))
    p.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    p.set_defaults(func=cmd_train_asr)

    p = common(sub.add_parser("train", help="train the lip-to-speech model"))
    p.add_argument("--resume", type=Path, help="continue from a training checkpoint")
    p.add_argument("--force", action="store_true", help="start over in a used output directory")
    p.add_argument("--max-steps", type=int, help="stop after this many optimisation steps")
    p.add_argument("--max-epochs", type=int, help="override train.max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="speech from a lip video and a speaker reference")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--video", type=Path, required=True, help="PNG frame directory or .npy array")
    p.add_argument("--ref", type=Path, required=True, help="speaker reference WAV")
    p.add_argument("--out", type=Path, required=True, help="output WAV")
    p.add_argument("--vocab", type=Path, help="vocab.json to check against the checkpoint")
    p.add_argument("--gl-iters", type=int, default=60)
    p.add_argument("--seed", type=int, default=0, help="reference crop and Griffin-Lim phase seed")
    p.set_defaults(func=cmd_synthesize)

    p = common(sub.add_parser("evaluate", help="score synthesized speech (STOI, ESTOI, WER)"))
    p.add_argument("--checkpoint", type=Path, help="training checkpoint (default: latest)")
    p.add_argument("--asr", type=Path, help="evaluation recognizer (default: <out_dir>/asr/evaluation.asr)")
    p.add_argument("--split", choices=["train", "val", "all"])
    p.add_argument("--ground-truth", action="store_true", help="score reference mels instead")
    p.add_argument("--out-dir", type=Path)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AsrNotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Corpus-level evaluation: synthesize, vocode, score STOI/ESTOI and WER."""
import csv
import json
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import dsp
from .asr import RoleMismatchError, decode_greedy
from .metrics import estoi, stoi, wer

REPORT_COLUMNS = ["id", "stoi", "estoi", "pesq", "wer_errors", "ref_words"]


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    transcripts: dict = field(default_factory=dict)

    @property
    def mean_stoi(self):
        vals = [r["stoi"] for r in self.rows if r["stoi"] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_estoi(self):
        vals = [r["estoi"] for r in self.rows if r["estoi"] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def wer(self):
        words = sum(r["ref_words"] for r in self.rows)
        return sum(r["wer_errors"] for r in self.rows) / words if words else None

    def aggregates(self):
        return {"stoi": self.mean_stoi, "estoi": self.mean_estoi, "wer": self.wer,
                "n_utterances": len(self.rows)}

    def summary_line(self):
        fmt = lambda v: "nan" if v is None else f"{v:.4f}"  # noqa: E731
        wer_pct = "nan" if self.wer is None else f"{100 * self.wer:.2f}"
        return f"STOI {fmt(self.mean_stoi)} ESTOI {fmt(self.mean_estoi)} WER% {wer_pct}"

    def to_dict(self):
        return {"columns": REPORT_COLUMNS, "rows": self.rows, "aggregates": self.aggregates(),
                "transcripts": self.transcripts}

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if row[k] is None else row[k]) for k in REPORT_COLUMNS})
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return out / f"{stem}.csv", out / f"{stem}.json"


def vocode_aligned(mel, mel_cfg, n_samples, n_iters=60, seed=0):
    """Griffin-Lim waveform for an aligned-framing mel, trimmed or padded to ``n_samples``."""
    wave = dsp.vocode(mel, mel_cfg, n_iters=n_iters, seed=seed)
    pad = (mel_cfg.stft.win_length - mel_cfg.stft.hop_length) // 2
    wave = wave[pad:pad + n_samples]
    if len(wave) < n_samples:
        wave = np.pad(wave, (0, n_samples - len(wave)))
    return wave


@torch.no_grad()
def predict_mels(model, corpus, indices, seed=0, batch_size=8):
    """Full-length (unwindowed) predicted mels, one (r*T, K) array per utterance."""
    model.eval()
    out = []
    for s in range(0, len(indices), batch_size):
        idx = indices[s:s + batch_size]
        samples = [
            data_mod.make_sample(corpus, i, model.cfg.ref_seconds,
                                 np.random.default_rng(data_mod.sample_seed(seed, 0, i)))
            for i in idx
        ]
        batch = data_mod.collate(samples)
        res = model(batch.video, batch.video_lengths, batch.ref)
        for b in range(len(idx)):
            n = int(batch.mel_lengths[b])
            out.append(res["mel"][b, :n].numpy().astype(np.float64))
    return out


def run_pesq_adapter(command, ref, deg, sample_rate):
    """Score with an external PESQ tool; ``command`` has ``{ref}``, ``{deg}`` and ``{fs}`` fields.

    The last number printed on stdout is taken as the score.
    """
    with tempfile.TemporaryDirectory() as tmp:
        rp, dp = Path(tmp) / "ref.wav", Path(tmp) / "deg.wav"
        dsp.write_wav(rp, dsp.Waveform(ref, sample_rate))
        dsp.write_wav(dp, dsp.Waveform(deg, sample_rate))
        argv = [a.format(ref=rp, deg=dp, fs=sample_rate) for a in shlex.split(command)]
        res = subprocess.run(argv, capture_output=True, text=True, check=True)
    nums = re.findall(r"[-+]?\d*\.\d+|[-+]?\d+", res.stdout)
    return float(nums[-1]) if nums else None


def evaluate_corpus(model, eval_asr, corpus, indices=None, gl_iters=60, seed=0,
                    ground_truth=False, vocode=True, pesq_command=None):
    """Score synthesized speech for ``indices`` of ``corpus``.

    ``ground_truth=True`` bypasses the model and scores the reference mels,
    giving the recognizer's own error floor. ``vocode=False`` skips
    Griffin-Lim and leaves STOI/ESTOI empty.
    """
    if eval_asr.role != "evaluation":
        raise RoleMismatchError(
            f"evaluation requires the evaluation-role recognizer, got {eval_asr.role!r}"
        )
    indices = list(range(len(corpus))) if indices is None else list(indices)
    if ground_truth:
        mels = [corpus[i].mel.astype(np.float64) for i in indices]
    else:
        mels = predict_mels(model, corpus, indices, seed=seed)
    report = MetricReport()
    mel_cfg = corpus.mel_cfg
    for i, mel in zip(indices, mels):
        u = corpus[i]
        hyp = decode_greedy(torch.as_tensor(mel, dtype=torch.float32)[None], eval_asr, corpus.vocab)[0]
        errors, n_words = wer(u.text, hyp)
        s = e = p = None
        if vocode:
            n = len(u.mel) * mel_cfg.stft.hop_length
            ref = u.wave[:n].astype(np.float64)
            deg = vocode_aligned(mel, mel_cfg, len(ref), gl_iters, seed)
            s = stoi(ref, deg, mel_cfg.stft.sample_rate)
            e = estoi(ref, deg, mel_cfg.stft.sample_rate)
            if pesq_command:
                p = run_pesq_adapter(pesq_command, ref, deg, mel_cfg.stft.sample_rate)
        report.rows.append({"id": u.id, "stoi": s, "estoi": e, "pesq": p,
                            "wer_errors": errors, "ref_words": n_words})
        report.transcripts[u.id] = {"ref": u.text, "hyp": hyp}
    return report

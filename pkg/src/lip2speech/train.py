"""Training loop: windowed synthesis, gated multi-task loss, checkpoints and resumption."""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import dsp
from .checkpoint import CheckpointError, check_vocab, load_state_arrays, read_checkpoint, save_checkpoint
from .conformer import lengths_to_mask
from .model import Lip2Speech, ModelConfig
from .objective import (
    ObjectiveConfig,
    ScheduleState,
    asr_content_loss,
    ctc_loss,
    reconstruction_loss,
    total_loss,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "l_ctc", "l_asr", "l_rec", "l_tot", "lambda_asr_eff", "grad_norm"]


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    max_epochs: int = 10
    seed: int = 0
    mel_window: int = 200
    grad_clip: float = 5.0
    augment: bool = True
    erase_prob: float = 0.5
    erase_max_frac: float = 0.5
    time_mask_frac: float = 0.1
    self_reference: bool = True
    save_every: int = 1  # epochs between checkpoints; the last epoch is always saved

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.save_every < 1:
            raise ValueError("save_every must be >= 1")


def _seed_int(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint32)[0])


def select_mel_window(feats, mel, window, r, rng):
    """Random aligned crop: ``window // r`` feature frames and the matching ``window`` mel frames.

    Utterances with fewer than ``window`` mel frames are returned whole.
    Returns ``(feats_sub, mel_sub, t0)``.
    """
    if window % r:
        raise ValueError(f"mel window {window} not divisible by r={r}")
    T = feats.shape[0]
    if mel.shape[0] != r * T:
        raise ValueError(f"mel length {mel.shape[0]} != r * T = {r * T}")
    if mel.shape[0] < window:
        return feats, mel, 0
    tw = window // r
    t0 = int(rng.integers(0, T - tw + 1))
    return feats[t0:t0 + tw], mel[r * t0:r * t0 + window], t0


def select_windows(feats, mel, lengths, window, r, rng):
    """Batched :func:`select_mel_window`; returns padded feats, mels and frame lengths."""
    subs_f, subs_m = [], []
    for b in range(feats.shape[0]):
        T = int(lengths[b])
        f, m, _ = select_mel_window(feats[b, :T], mel[b, :r * T], window, r, rng)
        subs_f.append(f)
        subs_m.append(m)
    sub_len = torch.tensor([len(f) for f in subs_f], dtype=torch.long)
    Tw = int(sub_len.max())
    F = feats.new_zeros(feats.shape[0], Tw, feats.shape[2])
    Y = mel.new_zeros(mel.shape[0], r * Tw, mel.shape[2])
    for b, (f, m) in enumerate(zip(subs_f, subs_m)):
        F[b, :len(f)] = f
        Y[b, :len(m)] = m
    return F, Y, sub_len


class Trainer:
    """Owns the Lip2Speech model, its optimizer and the loss schedule."""

    def __init__(self, corpus, asr_model, model_cfg, train_cfg=TrainConfig(), objective=ObjectiveConfig(),
                 indices=None, out_dir=None):
        if asr_model is None:
            raise ValueError("a pretrained feedback ASR model is required")
        if asr_model.role != "feedback":
            raise ValueError(f"training needs the feedback recognizer, got role {asr_model.role!r}")
        self.corpus = corpus
        self.asr = asr_model.freeze()
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.objective = objective
        self.weights = objective.weights()
        self.indices = list(range(len(corpus))) if indices is None else list(indices)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(train_cfg.seed)
        self.model = Lip2Speech(model_cfg, corpus.mel_cfg)
        self.opt = torch.optim.AdamW(
            self.model.parameters(), lr=train_cfg.learning_rate,
            betas=(train_cfg.beta1, train_cfg.beta2), weight_decay=train_cfg.weight_decay,
            foreach=False,
        )
        self.schedule = objective.schedule()
        self.step = 0
        self.epoch = 0

    # ------------------------------------------------------------------ steps

    def make_batch(self, indices, epoch, augment=True):
        aug = None
        if augment and self.cfg.augment:
            aug = {"erase_prob": self.cfg.erase_prob, "erase_max_frac": self.cfg.erase_max_frac,
                   "time_mask_frac": self.cfg.time_mask_frac}
        samples = []
        for i in indices:
            rng = np.random.default_rng(data_mod.sample_seed(self.cfg.seed, epoch, i))
            samples.append(data_mod.make_sample(self.corpus, i, self.model_cfg.ref_seconds, rng, aug,
                                                self.cfg.self_reference))
        return data_mod.collate(samples)

    def compute_losses(self, batch, window_rng):
        """Forward pass and the three losses. CTC sees the whole utterance, synthesis a window."""
        w = self.weights
        lam_asr = self.schedule.effective_lambda_asr(w)
        model = self.model
        feats = model.encode(batch.video, batch.video_lengths)
        with torch.set_grad_enabled(torch.is_grad_enabled() and w.lambda_ctc > 0):
            log_probs = model.ctc_log_probs(feats)
            l_ctc = ctc_loss(log_probs, batch.tokens, batch.video_lengths, batch.token_lengths)
        f_sub, y_sub, sub_len = select_windows(feats, batch.mel, batch.video_lengths,
                                               self.cfg.mel_window, batch.r, window_rng)
        spk = model.speaker_embedding(batch.ref)
        y_hat = model.synthesize(f_sub, spk, sub_len)
        mel_len = sub_len * batch.r
        l_rec = reconstruction_loss(y_hat, y_sub, lengths_to_mask(mel_len, y_sub.shape[1]))
        with torch.no_grad():
            z, z_len = self.asr.features(y_sub, mel_len)
        with torch.set_grad_enabled(torch.is_grad_enabled() and lam_asr > 0):
            z_hat, _ = self.asr.features(y_hat, mel_len)
            l_asr = asr_content_loss(z, z_hat, lengths_to_mask(z_len, z.shape[1]))
        return total_loss(l_ctc, l_asr, l_rec, w, self.schedule)

    def train_step(self, batch, epoch):
        """One optimisation step; returns ``(LossBundle, grad_norm)``."""
        self.model.train()
        torch.manual_seed(_seed_int(self.cfg.seed, 7, self.step))
        window_rng = np.random.default_rng([self.cfg.seed, epoch, self.step, 11])
        bundle = self.compute_losses(batch, window_rng)
        values = bundle.as_floats()
        if not all(np.isfinite(v) for v in values.values()):
            if self.out_dir is not None:
                dump = {"step": self.step, "epoch": epoch, "ids": batch.ids, "losses": values}
                (self.out_dir / "nonfinite_batch.json").write_text(json.dumps(dump, indent=1))
            raise NonFiniteLossError(f"non-finite loss at step {self.step} on batch {batch.ids}: {values}")
        self.opt.zero_grad(set_to_none=True)
        bundle.l_tot.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip))
        self.opt.step()
        self.step += 1
        self.schedule.update(values["l_rec"], self.step)
        return bundle, grad_norm

    def epoch_batches(self, epoch):
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.indices))
        ids = [self.indices[i] for i in order]
        bs = self.cfg.batch_size
        return [ids[s:s + bs] for s in range(0, len(ids), bs)]

    # ------------------------------------------------------------------ loop

    def fit(self, max_steps=None):
        """Run epochs up to ``max_epochs``, checkpointing every ``save_every`` epochs
        and at the end. Returns the metrics path."""
        if self.out_dir is None:
            raise ValueError("fit() needs an output directory")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        metrics = self.out_dir / "metrics.csv"
        self._prepare_metrics(metrics)
        if self.epoch == 0 and self.step == 0:
            self.save(self.checkpoint_path(0))
        for epoch in range(self.epoch, self.cfg.max_epochs):
            self.schedule.start_epoch(epoch, self.step)
            rows = []
            for idx in self.epoch_batches(epoch):
                if max_steps is not None and self.step >= max_steps:
                    break
                batch = self.make_batch(idx, epoch)
                bundle, gnorm = self.train_step(batch, epoch)
                v = bundle.as_floats()
                rows.append([self.step - 1, epoch, v["l_ctc"], v["l_asr"], v["l_rec"], v["l_tot"],
                             float(bundle.lambda_asr_eff), gnorm])
            self._append_metrics(metrics, rows)
            self.epoch = epoch + 1
            done = self.epoch == self.cfg.max_epochs or (max_steps is not None and self.step >= max_steps)
            if done or self.epoch % self.cfg.save_every == 0:
                self.save(self.checkpoint_path(self.epoch))
            if rows:
                log.info("epoch %d step %d l_rec %.4f l_ctc %.4f l_asr %.4f", self.epoch, self.step,
                         rows[-1][4], rows[-1][2], rows[-1][3])
            if done:
                break
        return metrics

    def metrics_header(self):
        o = self.objective
        return (f"# lambda_ctc={o.lambda_ctc:g} lambda_asr={o.lambda_asr:g} lambda_rec={o.lambda_rec:g} "
                f"gate_threshold={o.gate_threshold!r} fallback_epoch={o.fallback_epoch} ema_decay={o.ema_decay!r} "
                f"seed={self.cfg.seed} lr={self.cfg.learning_rate:g} batch_size={self.cfg.batch_size}\n")

    def _prepare_metrics(self, path):
        header = self.metrics_header() + ",".join(METRIC_COLUMNS) + "\n"
        if self.step == 0 or not path.exists():
            path.write_text(header)
            return
        # resuming: keep only rows logged before the checkpoint
        kept = [row for row in read_metrics(path) if int(row["step"]) < self.step]
        buf = io.StringIO()
        buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        for row in kept:
            w.writerow([row[c] for c in METRIC_COLUMNS])
        path.write_text(buf.getvalue())

    @staticmethod
    def _append_metrics(path, rows):
        with open(path, "a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            for row in rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in row])

    # ------------------------------------------------------------------ checkpoints

    def checkpoint_path(self, epoch):
        return self.out_dir / f"ckpt_epoch{epoch:04d}.l2s"

    def save(self, path):
        vocab = self.corpus.vocab
        extra = {}
        opt_state = self.opt.state_dict()
        for idx, st in opt_state["state"].items():
            for k, v in st.items():
                extra[f"opt/{idx}/{k}"] = v.detach().cpu().numpy()
        groups = []
        for g in opt_state["param_groups"]:
            g = dict(g)
            g["betas"] = list(g["betas"])
            groups.append(g)
        meta = {
            "kind": "lip2speech",
            "model_config": self.model_cfg.to_dict(),
            "mel_config": mel_config_to_dict(self.corpus.mel_cfg),
            "vocab": vocab.to_dict(),
            "vocab_hash": vocab.hash(),
            "train_config": asdict(self.cfg),
            "objective_config": asdict(self.objective),
            "step": self.step,
            "epoch": self.epoch,
            "schedule": self.schedule.to_dict(),
            "param_groups": groups,
        }
        return save_checkpoint(path, self.model, meta, extra)

    def restore(self, path):
        tensors, meta = read_checkpoint(path, "lip2speech")
        check_vocab(meta, self.corpus.vocab, path)
        if ModelConfig.from_dict(meta["model_config"]) != self.model_cfg:
            raise CheckpointError(f"{path}: model config differs from the current run")
        load_state_arrays(self.model, tensors)
        state = {}
        for name, arr in tensors.items():
            if name.startswith("opt/"):
                _, idx, key = name.split("/")
                t = torch.from_numpy(arr.copy())
                state.setdefault(int(idx), {})[key] = t
        groups = []
        for g in meta["param_groups"]:
            g = dict(g)
            g["betas"] = tuple(g["betas"])
            groups.append(g)
        self.opt.load_state_dict({"state": state, "param_groups": groups})
        self.step = meta["step"]
        self.epoch = meta["epoch"]
        self.schedule = ScheduleState.from_dict(meta["schedule"])
        return meta


def mel_config_to_dict(cfg):
    d = asdict(cfg)
    return d


def mel_config_from_dict(d):
    d = dict(d)
    return dsp.MelConfig(stft=dsp.StftConfig(**d.pop("stft")), **d)


def read_metrics(path):
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_metrics_header(path):
    """The ``key=value`` settings recorded on the first line of a metrics log."""
    with open(path) as f:
        first = f.readline()
    if not first.startswith("#"):
        raise ValueError(f"{path}: no settings header")
    return dict(item.split("=", 1) for item in first[1:].split())


def load_lip2speech(path, vocab=None):
    """Model (eval mode) and metadata from a training checkpoint."""
    tensors, meta = read_checkpoint(path, "lip2speech")
    check_vocab(meta, vocab, path)
    model = Lip2Speech(ModelConfig.from_dict(meta["model_config"]), mel_config_from_dict(meta["mel_config"]))
    load_state_arrays(model, tensors)
    model.eval()
    return model, meta

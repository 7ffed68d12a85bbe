"""Frozen conformer-CTC recognizer used for content supervision and for WER evaluation."""
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import data as data_mod
from .checkpoint import CheckpointError, check_vocab, load_state_arrays, read_checkpoint, save_checkpoint
from .conformer import Conformer, lengths_to_mask
from .metrics import wer
from .objective import ctc_loss

log = logging.getLogger(__name__)

ROLES = ("feedback", "evaluation")


class AsrNotConverged(RuntimeError):
    pass


class RoleMismatchError(CheckpointError):
    pass


@dataclass
class AsrConfig:
    vocab_size: int = 14
    n_mels: int = 80
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    conv_kernel: int = 7
    ff_mult: int = 4
    dropout: float = 0.1

    @classmethod
    def full_scale(cls, vocab_size):
        return cls(vocab_size=vocab_size, d_model=256, layers=6, heads=4, conv_kernel=31)


@dataclass
class AsrTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    min_epochs: int = 10
    target_wer: float = 0.05
    mel_noise: float = 0.5
    weight_decay: float = 0.01


def output_length(n):
    """Frames after the stride-2 stem (kernel 3, padding 1)."""
    return (n - 1) // 2 + 1


class AsrModel(nn.Module):
    """Stride-2 conv stem, conformer blocks, linear CTC classifier."""

    def __init__(self, cfg, role="feedback"):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        self.cfg = cfg
        self.role = role
        self.frozen = False
        self.in_norm = nn.LayerNorm(cfg.n_mels)
        self.stem = nn.Conv1d(cfg.n_mels, cfg.d_model, 3, stride=2, padding=1)
        self.encoder = Conformer(cfg.d_model, cfg.d_model, cfg.layers, cfg.heads,
                                 cfg.conv_kernel, cfg.ff_mult, cfg.dropout)
        self.classifier = nn.Linear(cfg.d_model, cfg.vocab_size)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def train(self, mode=True):
        # a frozen recognizer never leaves eval mode
        return super().train(mode and not self.frozen)

    def features(self, mel, lengths=None):
        """Pre-classifier representations, ``(B, S', D_asr)`` and ``S'`` lengths."""
        if mel.shape[-1] != self.cfg.n_mels:
            raise ValueError(f"mel has {mel.shape[-1]} channels, recognizer expects {self.cfg.n_mels}")
        B, S, _ = mel.shape
        if lengths is None:
            lengths = torch.full((B,), S, dtype=torch.long)
        x = self.in_norm(mel) * lengths_to_mask(lengths, S)[..., None]
        x = torch.nn.functional.silu(self.stem(x.transpose(1, 2))).transpose(1, 2)
        out_len = output_length(lengths)
        return self.encoder(x, out_len), out_len

    def forward(self, mel, lengths=None):
        z, out_len = self.features(mel, lengths)
        return torch.log_softmax(self.classifier(z), dim=-1), out_len


def asr_features(mel, model, lengths=None):
    return model.features(mel, lengths)


def greedy_collapse(ids, blank=0):
    """CTC best-path rule: merge repeats, then drop blanks."""
    out = []
    prev = None
    for i in ids:
        i = int(i)
        if i != prev and i != blank:
            out.append(i)
        prev = i
    return out


@torch.no_grad()
def decode_greedy(mel, model, vocab, lengths=None):
    """Greedy CTC transcripts for a (B, S, K) batch of mels."""
    was_training = model.training
    model.eval()
    log_probs, out_len = model(mel, lengths)
    model.train(was_training)
    best = log_probs.argmax(-1)
    return [vocab.decode(greedy_collapse(best[b, : int(out_len[b])].tolist(), vocab.blank_id))
            for b in range(best.shape[0])]


def asr_decode_greedy(mel, model, vocab):
    """Transcript of a single (S, K) mel."""
    return decode_greedy(torch.as_tensor(mel, dtype=torch.float32)[None], model, vocab)[0]


def _mel_batch(corpus, indices):
    mels = [corpus[i].mel for i in indices]
    S = max(len(m) for m in mels)
    out = np.zeros((len(mels), S, mels[0].shape[1]), dtype=np.float32)
    for j, m in enumerate(mels):
        out[j, :len(m)] = m
    toks = [corpus[i].tokens for i in indices]
    L = max(len(t) for t in toks)
    tok = np.zeros((len(toks), L), dtype=np.int64)
    for j, t in enumerate(toks):
        tok[j, :len(t)] = t
    return (torch.from_numpy(out), torch.tensor([len(m) for m in mels]),
            torch.from_numpy(tok), torch.tensor([len(t) for t in toks]))


def corpus_wer(model, corpus, indices, batch_size=32):
    errors = words = 0
    for s in range(0, len(indices), batch_size):
        idx = indices[s:s + batch_size]
        mel, mlen, _, _ = _mel_batch(corpus, idx)
        for i, hyp in zip(idx, decode_greedy(mel, model, corpus.vocab, mlen)):
            e, n = wer(corpus[i].text, hyp)
            errors += e
            words += n
    return errors / max(words, 1)


def pretrain_asr(corpus, cfg, train_cfg=AsrTrainConfig(), seed=0, role="feedback", indices=None):
    """Train a recognizer on ground-truth mels with CTC, then freeze it.

    Stops at the first epoch (after ``min_epochs``) whose training-set WER
    is at or below ``target_wer``; raises :class:`AsrNotConverged` otherwise.
    Returns ``(model, report)``.
    """
    indices = list(range(len(corpus))) if indices is None else list(indices)
    torch.manual_seed(seed)
    model = AsrModel(cfg, role)
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.learning_rate,
                            weight_decay=train_cfg.weight_decay, foreach=False)
    history = []
    for epoch in range(train_cfg.max_epochs):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        order = [indices[i] for i in rng.permutation(len(indices))]
        torch.manual_seed(seed * 100003 + epoch)
        total = 0.0
        for s in range(0, len(order), train_cfg.batch_size):
            mel, mlen, tok, tlen = _mel_batch(corpus, order[s:s + train_cfg.batch_size])
            if train_cfg.mel_noise > 0:
                mel = mel + train_cfg.mel_noise * torch.randn_like(mel)
            log_probs, out_len = model(mel, mlen)
            loss = ctc_loss(log_probs, tok, out_len, tlen)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            opt.step()
            total += float(loss.detach()) * len(mel)
        train_wer = corpus_wer(model, corpus, indices)
        history.append({"epoch": epoch + 1, "loss": total / len(order), "wer": train_wer})
        log.info("asr[%s] epoch %d loss %.4f wer %.4f", role, epoch + 1, total / len(order), train_wer)
        if epoch + 1 >= train_cfg.min_epochs and train_wer <= train_cfg.target_wer:
            model.freeze()
            return model, {"converged": True, "epochs": epoch + 1, "wer": train_wer, "history": history}
    raise AsrNotConverged(
        f"asr pretraining did not converge: training WER {history[-1]['wer']:.3f} > "
        f"{train_cfg.target_wer} after {train_cfg.max_epochs} epochs"
    )


def save_asr(path, model, vocab, extra_meta=None):
    meta = {"kind": "asr", "role": model.role, "config": asdict(model.cfg), "vocab_hash": vocab.hash(),
            "vocab": vocab.to_dict()}
    meta.update(extra_meta or {})
    return save_checkpoint(path, model, meta)


def load_asr(path, expected_role=None, vocab=None):
    """Load a frozen recognizer, checking role tag and vocabulary."""
    tensors, meta = read_checkpoint(path, "asr")
    if expected_role is not None and meta["role"] != expected_role:
        raise RoleMismatchError(
            f"{path}: checkpoint role is {meta['role']!r}, expected {expected_role!r}"
        )
    check_vocab(meta, vocab, path)
    model = AsrModel(AsrConfig(**meta["config"]), meta["role"])
    load_state_arrays(model, tensors)
    return model.freeze()


def load_vocab_from(meta):
    return data_mod.Vocabulary.from_dict(meta["vocab"])

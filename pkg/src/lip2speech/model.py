"""The Lip2Speech network: visual front-end, conformer, CTC head, speaker encoder, synthesizer."""
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import dsp
from .conformer import Conformer, lengths_to_mask


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 14
    n_mels: int = 80
    r: int = 4
    image_size: int = 112
    stem_channels: int = 8
    stage_channels: tuple = (16, 32)
    blocks_per_stage: int = 1
    d_model: int = 64
    conformer_layers: int = 2
    heads: int = 2
    conv_kernel: int = 7
    ff_mult: int = 4
    dropout: float = 0.1
    synth_channels: tuple = (256, 128, 320)
    synth_kernel: int = 7
    speaker_channels: tuple = (128, 256, 64)
    speaker_kernel: int = 7
    ref_seconds: float = 0.5
    mel_init: float = -6.0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.synth_channels = tuple(self.synth_channels)
        self.speaker_channels = tuple(self.speaker_channels)
        self.validate()

    @property
    def speaker_dim(self):
        return self.speaker_channels[-1]

    @property
    def total_stride(self):
        # stem stride 2, max-pool stride 2, every stage after the first halves again
        return 4 * 2 ** max(len(self.stage_channels) - 1, 0)

    def validate(self):
        widths = [self.vocab_size, self.n_mels, self.r, self.stem_channels, self.d_model,
                  self.conformer_layers, self.heads, *self.stage_channels,
                  *self.synth_channels, *self.speaker_channels]
        if any(w < 1 for w in widths):
            raise ConfigError("all widths must be >= 1")
        if len(self.synth_channels) < 1 or self.synth_channels[-1] != self.n_mels * self.r:
            raise ConfigError(
                f"synthesizer final width {self.synth_channels[-1]} != n_mels * r = {self.n_mels * self.r}"
            )
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.image_size < self.total_stride:
            raise ConfigError(
                f"image size {self.image_size} too small for front-end stride {self.total_stride}"
            )
        if self.ref_seconds <= 0:
            raise ConfigError("ref_seconds must be positive")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def full_scale_config(vocab_size, **overrides):
    """Widths used for LRS2/LRS3-sized training."""
    d = dict(
        vocab_size=vocab_size, stem_channels=64, stage_channels=(64, 128, 256, 512),
        blocks_per_stage=2, d_model=256, conformer_layers=12, heads=8, conv_kernel=31,
        synth_channels=(256, 128, 320), speaker_channels=(128, 256, 256),
    )
    d.update(overrides)
    return ModelConfig(**d)


def _norm(c):
    return nn.GroupNorm(4 if c % 4 == 0 else 1, c)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        y = torch.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        s = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(y + s)


class VisualFrontend(nn.Module):
    """3D-convolution stem followed by per-frame 2D residual stages.

    The temporal axis is never strided, so T input frames give T feature
    vectors. All normalisation is per frame.
    """

    def __init__(self, cfg):
        super().__init__()
        c0 = cfg.stem_channels
        self.stem = nn.Conv3d(1, c0, (5, 7, 7), stride=(1, 2, 2), padding=(2, 3, 3), bias=False)
        self.stem_norm = _norm(c0)
        self.pool = nn.MaxPool2d(3, 2, 1)
        layers = []
        cin = c0
        for i, c in enumerate(cfg.stage_channels):
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(cin, c, stride))
                cin = c
        self.stages = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, video):
        """(B, T, H, W) in [0, 1] -> (B, T, out_dim)."""
        B, T, H, W = video.shape
        x = self.stem(video[:, None])                      # (B, C, T, H', W')
        C, Hs, Ws = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(1, 2).reshape(B * T, C, Hs, Ws)
        x = self.pool(torch.relu(self.stem_norm(x)))
        x = self.stages(x)
        return x.mean(dim=(2, 3)).reshape(B, T, -1)


class SpeakerEncoder(nn.Module):
    """Three 1D convolutions over the reference log-mel, mean-pooled over time."""

    def __init__(self, cfg, mel_cfg):
        super().__init__()
        self.mel_cfg = mel_cfg
        self.n_samples = int(round(cfg.ref_seconds * mel_cfg.stft.sample_rate))
        self.norm = nn.LayerNorm(cfg.n_mels)
        layers = []
        cin = cfg.n_mels
        for i, c in enumerate(cfg.speaker_channels):
            layers.append(nn.Conv1d(cin, c, cfg.speaker_kernel, padding=cfg.speaker_kernel // 2))
            if i < len(cfg.speaker_channels) - 1:
                layers.append(nn.ReLU())
            cin = c
        self.net = nn.Sequential(*layers)

    def reference_mel(self, ref):
        ref = ref.detach().cpu().numpy()
        if ref.ndim != 2 or ref.shape[1] != self.n_samples:
            raise ValueError(
                f"speaker reference must have {self.n_samples} samples, got shape {tuple(ref.shape)}"
            )
        mels = np.stack([dsp.mel_spectrogram(r, self.mel_cfg) for r in ref])
        return torch.as_tensor(mels, dtype=self.norm.weight.dtype)

    def forward(self, ref):
        """(B, n_samples) waveform -> (B, E)."""
        x = self.norm(self.reference_mel(ref)).transpose(1, 2)
        return self.net(x).mean(dim=2)


class Synthesizer(nn.Module):
    """1D conv stack whose K*r-wide output is unfolded into r mel frames per video frame."""

    def __init__(self, cfg):
        super().__init__()
        self.r, self.n_mels = cfg.r, cfg.n_mels
        cin = cfg.d_model + cfg.speaker_dim
        self.convs = nn.ModuleList()
        for c in cfg.synth_channels:
            self.convs.append(nn.Conv1d(cin, c, cfg.synth_kernel, padding=cfg.synth_kernel // 2))
            cin = c
        nn.init.constant_(self.convs[-1].bias, cfg.mel_init)

    def forward(self, feats, spk, lengths):
        """(B, T, D), (B, E), (B,) -> (B, r*T, K)."""
        B, T, _ = feats.shape
        mask = lengths_to_mask(lengths, T)[:, None, :].to(feats.dtype)
        x = torch.cat([feats, spk[:, None, :].expand(B, T, spk.shape[-1])], dim=2)
        x = x.transpose(1, 2) * mask
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
            x = x * mask
        return x.transpose(1, 2).reshape(B, T * self.r, self.n_mels)


class Lip2Speech(nn.Module):
    def __init__(self, cfg, mel_cfg=None):
        super().__init__()
        self.cfg = cfg
        self.mel_cfg = mel_cfg or dsp.MelConfig(n_mels=cfg.n_mels)
        if self.mel_cfg.n_mels != cfg.n_mels:
            raise ConfigError("mel config and model disagree on n_mels")
        self.frontend = VisualFrontend(cfg)
        self.encoder = Conformer(self.frontend.out_dim, cfg.d_model, cfg.conformer_layers,
                                 cfg.heads, cfg.conv_kernel, cfg.ff_mult, cfg.dropout)
        self.ctc_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.speaker_encoder = SpeakerEncoder(cfg, self.mel_cfg)
        self.synthesizer = Synthesizer(cfg)

    def encode(self, video, lengths):
        """Encoded visual features F = conformer(frontend(video)), (B, T, D).

        Frames past each length are zeroed first so padding cannot leak
        through the temporal kernel of the stem.
        """
        mask = lengths_to_mask(lengths, video.shape[1]).to(video.dtype)
        return self.encoder(self.frontend(video * mask[:, :, None, None]), lengths)

    def ctc_log_probs(self, feats):
        return torch.log_softmax(self.ctc_head(feats), dim=-1)

    def speaker_embedding(self, ref):
        return self.speaker_encoder(ref)

    def synthesize(self, feats, spk, lengths):
        return self.synthesizer(feats, spk, lengths)

    def forward(self, video, lengths, ref):
        feats = self.encode(video, lengths)
        spk = self.speaker_embedding(ref)
        return {
            "features": feats,
            "log_probs": self.ctc_log_probs(feats),
            "speaker": spk,
            "mel": self.synthesize(feats, spk, lengths),
        }


def ctc_head(feats, weight, bias):
    """Frame posteriors ``softmax(F @ W + b)``; ``weight`` is (D, N)."""
    return torch.softmax(feats @ weight + bias, dim=-1)

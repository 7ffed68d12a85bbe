"""Corpus representation, video preprocessing, augmentation, tokenization and batching."""
import json
import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as nnf
from PIL import Image

from . import dsp

IMAGE_SIZE = 112
GLYPHS = "abcdefghijklmnopqrstuvwxyz"
FRAMES_PER_TOKEN = 4
TOKEN_SECONDS = 0.16


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------- tokenizer


class Vocabulary:
    """Dense id <-> unit map with the CTC blank fixed at id 0.

    In ``char`` mode every character is a unit and the space character is
    always present (appended with zero count when the corpus has none), so
    ``{"ab", "ba"}`` gives ``<blank>, a, b, " "``. In ``word`` mode units are
    whitespace-separated words.
    """

    BLANK = "<blank>"
    blank_id = 0

    def __init__(self, units, mode="char"):
        if mode not in ("char", "word"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        self.units = [self.BLANK] + list(units)
        self._index = {u: i for i, u in enumerate(self.units)}
        if len(self._index) != len(self.units):
            raise ValueError("duplicate vocabulary units")

    def __len__(self):
        return len(self.units)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()

    def _split(self, text):
        return list(text) if self.mode == "char" else text.split()

    def encode(self, text):
        ids = []
        for unit in self._split(text):
            try:
                ids.append(self._index[unit])
            except KeyError:
                raise DataError(f"out-of-vocabulary unit {unit!r}") from None
            if ids[-1] == self.blank_id:
                raise DataError("text contains the blank symbol")
        return ids

    def decode(self, ids):
        units = [self.units[i] for i in ids if i != self.blank_id]
        return "".join(units) if self.mode == "char" else " ".join(units)

    def to_dict(self):
        return {"mode": self.mode, "units": self.units[1:]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["units"], d["mode"])

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_tokenizer(texts, mode="char", vocab_size=None):
    """Deterministic vocabulary ordered by descending frequency, then unit."""
    texts = list(texts)
    if not texts:
        raise DataError("empty corpus")
    if mode == "char":
        counts = Counter(ch for t in texts for ch in t)
        counts.setdefault(" ", 0)
    elif mode == "word":
        counts = Counter(w for t in texts for w in t.split())
        if vocab_size is not None and vocab_size < len(counts):
            raise DataError(f"vocab_size {vocab_size} < {len(counts)} distinct words")
    else:
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    units = sorted(counts, key=lambda u: (-counts[u], u))
    return Vocabulary(units, mode)


# --------------------------------------------------------------------------- video


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    fps: float = 25.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise DataError(f"expected (T, H, W, C) frames with T >= 1, got {self.frames.shape}")

    @property
    def T(self):
        return self.frames.shape[0]


def preprocess_video(frames, target=IMAGE_SIZE, fps=25.0):
    """Centre-crop to square, bilinear-resize to ``target``, convert to luma in [0, 1].

    Accepts (T, H, W) or (T, H, W, C) arrays; integer inputs are scaled by
    their dtype maximum, floats are assumed to already lie in [0, 1].
    """
    x = np.asarray(frames)
    if x.size == 0 or x.shape[0] == 0:
        raise DataError("empty frame list")
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise DataError(f"bad frame array shape {x.shape}")
    if np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float32) / np.iinfo(x.dtype).max
    else:
        x = x.astype(np.float32)
    c = x.shape[-1]
    if c >= 3:
        x = x[..., 0:1] * 0.299 + x[..., 1:2] * 0.587 + x[..., 2:3] * 0.114
    else:
        x = x[..., 0:1]
    h, w = x.shape[1:3]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    x = x[:, top:top + side, left:left + side]
    if side != target:
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        t = nnf.interpolate(t, size=(target, target), mode="bilinear", align_corners=False)
        x = t.numpy().transpose(0, 2, 3, 1)
    return VideoClip(np.clip(x, 0.0, 1.0).astype(np.float32), fps)


def apply_erase(clip, rect):
    """Zero the rectangle ``(top, left, height, width)`` in every frame."""
    top, left, h, w = rect
    frames = clip.frames.copy()
    frames[:, top:top + h, left:left + w, :] = 0.0
    return VideoClip(frames, clip.fps)


def random_erase(clip, rng, p=1.0, max_frac=0.5):
    """Erase one random rectangle, at the same place in all frames.

    Returns ``(clip, rect)`` with ``rect = (top, left, height, width)`` or
    ``None`` when the probability gate skipped the augmentation.
    """
    if rng.random() >= p:
        return clip, None
    H, W = clip.frames.shape[1:3]
    h = int(rng.integers(0, int(max_frac * H) + 1))
    w = int(rng.integers(0, int(max_frac * W) + 1))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    rect = (top, left, h, w)
    return apply_erase(clip, rect), rect


def apply_time_mask(clip, start, length):
    frames = clip.frames.copy()
    frames[start:start + length] = 0.0
    return VideoClip(frames, clip.fps)


def time_mask(clip, rng, max_frac=0.1):
    """Zero one contiguous span of frames; returns ``(clip, (start, length))``."""
    T = clip.T
    length = int(rng.integers(0, int(max_frac * T) + 1))
    start = int(rng.integers(0, T - length + 1))
    return apply_time_mask(clip, start, length), (start, length)


# --------------------------------------------------------------------------- synthetic corpus


def glyph_image(index, size=IMAGE_SIZE):
    """Deterministic mouth-like image for glyph ``index`` (uint8, size x size).

    Each glyph is an ellipse with its own width/height pair, drawn dark
    inside a lighter lip ring on a skin-toned background.
    """
    a = 12 + 12 * (index % 4)
    b = 4 + 10 * ((index // 4) % 3) + 2 * (index // 12)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2, size / 2
    r_outer = ((xx - cx) / (a + 5)) ** 2 + ((yy - cy) / (b + 5)) ** 2
    r_inner = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
    img = np.full((size, size), 0.6)
    img[r_outer <= 1] = 0.35
    img[r_inner <= 1] = 0.1
    return np.round(img * 255).astype(np.uint8)


def token_frequencies(n_glyphs, lo=400.0, hi=3000.0):
    """Tone frequency per glyph, evenly spaced on the mel scale in [lo, hi] Hz."""
    if n_glyphs == 1:
        return np.array([lo])
    return dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(lo), dsp.hz_to_mel(hi), n_glyphs))


def speaker_fundamental(speaker_index, n_speakers, base=120.0, spread=200.0):
    if n_speakers == 1:
        return base
    return base + spread * speaker_index / (n_speakers - 1)


def synth_waveform(tokens, speaker_index, n_speakers, n_glyphs, sample_rate=16000):
    """Tone sequence for ``tokens``: one 160 ms tone per token plus a speaker hum."""
    freqs = token_frequencies(n_glyphs)
    n_tok = int(round(TOKEN_SECONDS * sample_rate))
    t = np.arange(n_tok) / sample_rate
    fade = int(0.005 * sample_rate)
    env = np.ones(n_tok)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    env[:fade] = ramp
    env[-fade:] = ramp[::-1]
    tones = [0.5 * env * np.sin(2 * np.pi * freqs[k] * t) for k in tokens]
    x = np.concatenate(tones)
    tt = np.arange(len(x)) / sample_rate
    x += 0.2 * np.sin(2 * np.pi * speaker_fundamental(speaker_index, n_speakers) * tt)
    return x


@dataclass
class CorpusConfig:
    n_glyphs: int = 12
    n_speakers: int = 2
    n_utterances: int = 200
    tokens_per_utt: int = 5
    fps: float = 25.0
    sample_rate: int = 16000
    seed: int = 0


def make_synthetic_corpus(out_dir, cfg=CorpusConfig()):
    """Write a deterministic glyph/tone corpus to ``out_dir``.

    Produces ``manifest.jsonl``, ``vocab.json``, ``wav/<id>.wav`` and
    ``video/<id>/NNNN.png``. Returns the manifest path.
    """
    if cfg.n_speakers < 1:
        raise DataError("n_speakers must be >= 1")
    if not 1 <= cfg.n_glyphs <= len(GLYPHS):
        raise DataError(f"n_glyphs must be in [1, {len(GLYPHS)}]")
    if cfg.tokens_per_utt < 1:
        raise DataError("tokens_per_utt must be >= 1")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "video").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    glyphs = [glyph_image(k) for k in range(cfg.n_glyphs)]
    frames_per_token = int(round(TOKEN_SECONDS * cfg.fps))
    records = []
    for i in range(cfg.n_utterances):
        spk = i % cfg.n_speakers
        tokens = rng.integers(0, cfg.n_glyphs, size=cfg.tokens_per_utt)
        uid = f"utt{i:05d}"
        vdir = out / "video" / uid
        vdir.mkdir(exist_ok=True)
        for j, k in enumerate(np.repeat(tokens, frames_per_token)):
            Image.fromarray(glyphs[k]).save(vdir / f"{j:04d}.png", optimize=False)
        wave = synth_waveform(tokens, spk, cfg.n_speakers, cfg.n_glyphs, cfg.sample_rate)
        dsp.write_wav(out / "wav" / f"{uid}.wav", dsp.Waveform(wave, cfg.sample_rate))
        records.append({
            "id": uid,
            "speaker_id": f"spk{spk:02d}",
            "video_path": f"video/{uid}",
            "wav_path": f"wav/{uid}.wav",
            "text": " ".join(GLYPHS[k] for k in tokens),
            "fps": cfg.fps,
        })
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    build_tokenizer([r["text"] for r in records], "char").save(out / "vocab.json")
    (out / "corpus.json").write_text(json.dumps(cfg.__dict__, sort_keys=True, indent=1) + "\n")
    return manifest


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_video_frames(path):
    """Load a PNG-frame directory or a ``.npy`` array as raw uint8 frames."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DataError(f"{path}: no PNG frames")
        return np.stack([np.asarray(Image.open(p)) for p in files])
    if path.suffix == ".npy":
        return np.load(path)
    raise DataError(f"{path}: unsupported video input")


# --------------------------------------------------------------------------- utterances / batching


def mel_frames_per_video_frame(fps, mel_cfg):
    r = mel_cfg.stft.frame_rate / fps
    if abs(r - round(r)) > 1e-9:
        raise DataError(f"mel frame rate {mel_cfg.stft.frame_rate} is not a multiple of fps {fps}")
    return int(round(r))


@dataclass
class Utterance:
    id: str
    speaker_id: str
    frames: np.ndarray  # (T, H, W) uint8
    wave: np.ndarray    # float32 samples
    mel: np.ndarray     # (r*T, K) float32
    tokens: np.ndarray  # (L,) int64
    text: str
    fps: float
    r: int


def align(frames, mel, r):
    """Trim video and mel so that ``len(mel) == r * len(frames)``."""
    T = min(len(frames), len(mel) // r)
    if T < 1:
        raise DataError("utterance shorter than one aligned video frame")
    return frames[:T], mel[:r * T]


class Corpus:
    """An on-disk corpus loaded fully into memory."""

    def __init__(self, root, mel_cfg=dsp.MelConfig(), vocab=None):
        self.root = Path(root)
        self.mel_cfg = mel_cfg
        self.vocab = vocab if vocab is not None else Vocabulary.load(self.root / "vocab.json")
        self.records = read_manifest(self.root / "manifest.jsonl")
        self.utterances = [self._load(rec) for rec in self.records]
        self.by_speaker = {}
        for i, u in enumerate(self.utterances):
            self.by_speaker.setdefault(u.speaker_id, []).append(i)

    def _load(self, rec):
        raw = load_video_frames(self.root / rec["video_path"])
        clip = preprocess_video(raw, fps=rec["fps"])
        frames = np.round(clip.frames[..., 0] * 255).astype(np.uint8)
        wav = dsp.read_wav(self.root / rec["wav_path"])
        if wav.sample_rate != self.mel_cfg.stft.sample_rate:
            raise DataError(f"{rec['id']}: sample rate {wav.sample_rate} != {self.mel_cfg.stft.sample_rate}")
        mel = dsp.mel_spectrogram(wav.samples, self.mel_cfg, aligned=True).astype(np.float32)
        r = mel_frames_per_video_frame(rec["fps"], self.mel_cfg)
        frames, mel = align(frames, mel, r)
        return Utterance(
            id=rec["id"], speaker_id=rec["speaker_id"], frames=frames,
            wave=wav.samples.astype(np.float32), mel=mel,
            tokens=np.asarray(self.vocab.encode(rec["text"]), dtype=np.int64),
            text=rec["text"], fps=float(rec["fps"]), r=r,
        )

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def split(self, val_fraction=0.1, seed=0):
        """Deterministic (train_indices, val_indices) partition."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_fraction * len(self)))
        return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def sample_speaker_reference(wave, duration_s, rng, sample_rate=16000):
    """Contiguous random crop of exactly ``duration_s * sample_rate`` samples."""
    n = int(round(duration_s * sample_rate))
    wave = np.asarray(wave)
    if len(wave) < n:
        raise DataError(f"audio of {len(wave)} samples shorter than reference length {n}")
    start = int(rng.integers(0, len(wave) - n + 1))
    return wave[start:start + n].copy()


def sample_seed(global_seed, epoch, index):
    """Per-sample seed material; identical across processes and resumes."""
    return np.random.SeedSequence([global_seed, epoch, index])


@dataclass
class Sample:
    id: str
    video: np.ndarray   # (T, H, W) float32 in [0, 1]
    mel: np.ndarray     # (S, K)
    tokens: np.ndarray  # (L,)
    ref: np.ndarray     # reference waveform
    r: int


def make_sample(corpus, index, ref_seconds, rng, augment=None, self_reference=True):
    """Build one training/eval sample; ``augment`` is a dict of augmentation knobs or None."""
    u = corpus[index]
    video = u.frames.astype(np.float32) / 255.0
    if augment:
        clip = VideoClip(video[..., None], u.fps)
        clip, _ = random_erase(clip, rng, p=augment.get("erase_prob", 0.5),
                               max_frac=augment.get("erase_max_frac", 0.5))
        clip, _ = time_mask(clip, rng, max_frac=augment.get("time_mask_frac", 0.1))
        video = clip.frames[..., 0]
    pool = corpus.by_speaker[u.speaker_id]
    if not self_reference and len(pool) > 1:
        pool = [j for j in pool if j != index]
    ref_src = corpus[pool[int(rng.integers(0, len(pool)))]]
    ref = sample_speaker_reference(ref_src.wave, ref_seconds, rng, corpus.mel_cfg.stft.sample_rate)
    return Sample(u.id, video, u.mel, u.tokens, ref.astype(np.float32), u.r)


@dataclass
class Batch:
    ids: list
    video: torch.Tensor          # (B, T, H, W)
    video_lengths: torch.Tensor  # (B,)
    mel: torch.Tensor            # (B, r*T, K)
    mel_lengths: torch.Tensor
    tokens: torch.Tensor         # (B, L)
    token_lengths: torch.Tensor
    ref: torch.Tensor            # (B, n_ref)
    r: int

    def __len__(self):
        return len(self.ids)


def collate(samples):
    """Right-pad samples with zeros into a :class:`Batch` (mel trimmed to r*T)."""
    if not samples:
        raise DataError("empty batch")
    rs = {s.r for s in samples}
    if len(rs) != 1:
        raise DataError(f"inconsistent mel/video frame ratios in batch: {sorted(rs)}")
    r = rs.pop()
    videos, mels = [], []
    for s in samples:
        v, m = align(s.video, s.mel, r)
        assert len(m) == r * len(v)
        videos.append(v)
        mels.append(m)
    B = len(samples)
    T = max(len(v) for v in videos)
    L = max(len(s.tokens) for s in samples)
    H, W = videos[0].shape[1:]
    K = mels[0].shape[1]
    video = np.zeros((B, T, H, W), dtype=np.float32)
    mel = np.zeros((B, r * T, K), dtype=np.float32)
    tokens = np.zeros((B, L), dtype=np.int64)
    for i, (v, m, s) in enumerate(zip(videos, mels, samples)):
        video[i, :len(v)] = v
        mel[i, :len(m)] = m
        tokens[i, :len(s.tokens)] = s.tokens
    vlen = torch.tensor([len(v) for v in videos], dtype=torch.long)
    return Batch(
        ids=[s.id for s in samples],
        video=torch.from_numpy(video),
        video_lengths=vlen,
        mel=torch.from_numpy(mel),
        mel_lengths=vlen * r,
        tokens=torch.from_numpy(tokens),
        token_lengths=torch.tensor([len(s.tokens) for s in samples], dtype=torch.long),
        ref=torch.from_numpy(np.stack([s.ref for s in samples]).astype(np.float32)),
        r=r,
    )

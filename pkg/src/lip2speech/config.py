"""Run configuration: one JSON document describing a whole experiment."""
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import dsp
from .asr import AsrConfig, AsrTrainConfig
from .data import CorpusConfig
from .model import ConfigError, ModelConfig, full_scale_config
from .objective import ObjectiveConfig
from .train import TrainConfig

PROFILES = ("toy", "full")


@dataclass
class DataSection:
    root: str = "runs/corpus"
    n_glyphs: int = 12
    n_speakers: int = 2
    n_utterances: int = 200
    tokens_per_utt: int = 5
    fps: float = 25.0
    val_fraction: float = 0.1

    def corpus_config(self, seed, sample_rate):
        return CorpusConfig(n_glyphs=self.n_glyphs, n_speakers=self.n_speakers,
                            n_utterances=self.n_utterances, tokens_per_utt=self.tokens_per_utt,
                            fps=self.fps, sample_rate=sample_rate, seed=seed)


@dataclass
class DspSection:
    sample_rate: int = 16000
    window_ms: float = 40.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def mel_config(self):
        stft = dsp.StftConfig(self.sample_rate, self.window_ms, self.hop_ms)
        return dsp.MelConfig(stft, self.n_mels, self.fmin, self.fmax, self.log_floor)


@dataclass
class AsrSection:
    model: AsrConfig = field(default_factory=AsrConfig)
    train: AsrTrainConfig = field(default_factory=AsrTrainConfig)
    # the evaluation recognizer uses seed + evaluation_seed_offset
    evaluation_seed_offset: int = 1


@dataclass
class EvalSection:
    split: str = "val"
    gl_iters: int = 60
    vocode: bool = True
    pesq_command: str = None


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "toy"
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    dsp: DspSection = field(default_factory=DspSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    asr: AsrSection = field(default_factory=AsrSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=8, learning_rate=1e-3))
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self):
        d = _to_plain(self)
        # train.seed always mirrors the global seed, so it is not a separate knob
        d["train"].pop("seed", None)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def archive(self, directory, name="config.json"):
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @property
    def out_path(self):
        return Path(self.out_dir)

    def with_vocab_size(self, n):
        """Copy with model and recognizer output sizes set to ``n`` classes."""
        d = self.to_dict()
        d["model"]["vocab_size"] = n
        d["asr"]["model"]["vocab_size"] = n
        return config_from_dict(d, base=None)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "dsp"): DspSection,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "asr"): AsrSection,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "objective"): ObjectiveConfig,
    (RunConfig, "eval"): EvalSection,
    (AsrSection, "model"): AsrConfig,
    (AsrSection, "train"): AsrTrainConfig,
}


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def profile_defaults(name):
    """Plain-dict defaults for a named profile."""
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    cfg = RunConfig(profile=name)
    if name == "full":
        cfg.model = full_scale_config(cfg.model.vocab_size)
        cfg.asr.model = AsrConfig.full_scale(cfg.asr.model.vocab_size)
        cfg.train = TrainConfig(batch_size=16)
    return cfg.to_dict()


def config_from_dict(d, base="profile"):
    """Build a RunConfig from a (partial) dict layered over its profile defaults.

    Keys not known to the schema are rejected at any nesting level.
    """
    d = dict(d)
    if base == "profile":
        d = _merge(profile_defaults(d.get("profile", "toy")), d)
    if isinstance(d.get("train"), dict) and "seed" in d["train"]:
        raise ConfigError("config.train: unknown key(s) seed (use the top-level seed)")
    cfg = _build(RunConfig, d, "config")
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}")
    if cfg.eval.split not in ("train", "val", "all"):
        raise ConfigError(f"eval.split must be train, val or all, got {cfg.eval.split!r}")
    if not 0 <= cfg.data.val_fraction < 1:
        raise ConfigError("data.val_fraction must lie in [0, 1)")
    cfg.train.seed = cfg.seed
    if cfg.model.n_mels != cfg.dsp.n_mels or cfg.asr.model.n_mels != cfg.dsp.n_mels:
        raise ConfigError("model, asr and dsp disagree on n_mels")
    return cfg


def load_config(path=None, seed=None, profile=None):
    """Read a JSON config (or profile defaults) and apply command-line overrides."""
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if profile is not None:
        d["profile"] = profile
    if seed is not None:
        d["seed"] = seed
    return config_from_dict(d)


"""Pipeline configuration: sectioned ``key = value`` files with validated defaults.

Defaults mirror the reference experimental setup: 256-sample frames,
12 cepstra, a 64-component UBM, 400-dimensional i-vectors and a 200/40
stacked auto-encoder.
"""

import configparser
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Tuple

from .binio import short_hash
from .errors import ConfigError

SEED_ENV = "IVX_SEED"


@dataclass
class CorpusConfig:
    manifest: str = ""
    synthesize: bool = False
    ubm_speakers: int = 10
    ubm_utts_per_speaker: int = 4
    task_speakers: int = 20
    train_utts_per_speaker: int = 10
    test_utts_per_speaker: int = 5
    duration_s: float = 10.0
    male_ratio: float = 0.5
    n_channels: int = 4
    cross_channel: bool = False
    seed: int = 42


@dataclass
class FrontendConfig:
    frame_len: int = 256
    frame_shift: int = 128
    preemphasis: float = 0.97
    n_mels: int = 26
    n_ceps: int = 12
    vad_threshold_db: float = 30.0
    frames_per_utterance: int = 0


@dataclass
class UbmConfig:
    components: int = 64
    iters: int = 25
    tol: float = 1e-5
    var_floor_factor: float = 1e-3
    seed: int = 0


@dataclass
class TvConfig:
    rank: int = 400
    iters: int = 5
    mstep: str = "ml"
    center: bool = True
    seed: int = 0


@dataclass
class SaeConfig:
    layers: Tuple[int, ...] = (200, 40)
    activation: str = "sigmoid"
    learning_rate: float = 0.01
    epochs: int = 200
    pretrain_epochs: int = 100
    batch_size: int = 32
    standardize: bool = True
    tied: bool = False
    seed: int = 0


@dataclass
class ClassifierConfig:
    kind: str = "mlp"
    hidden_dim: int = 64
    learning_rate: float = 0.1
    epochs: int = 500
    batch_size: int = 32
    weight_decay: float = 0.0
    reg_c: float = 1.0
    svm_epochs: int = 200
    seed: int = 0


@dataclass
class TaskConfig:
    task: str = "multiclass"  # binary: gender detection; multiclass: closed-set speaker ID
    lda_dim: int = 200


@dataclass
class PipelineConfig:
    workdir: str = "ivx-work"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    ubm: UbmConfig = field(default_factory=UbmConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    sae: SaeConfig = field(default_factory=SaeConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    SECTIONS = ("corpus", "frontend", "ubm", "tv", "sae", "classifier", "task")

    def section(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def to_dict(self) -> dict:
        return {name: self.section(name) for name in self.SECTIONS}

    def hash(self) -> str:
        """Content hash of every setting except paths."""
        doc = self.to_dict()
        doc["corpus"].pop("manifest")
        return short_hash(json.dumps(doc, sort_keys=True).encode())

    def validate(self) -> "PipelineConfig":
        fe, ubm, tv, sae, clf, task = self.frontend, self.ubm, self.tv, self.sae, self.classifier, self.task
        _positive(fe, "frame_len", "frame_shift", "n_mels", "n_ceps", "vad_threshold_db")
        _positive(ubm, "components", "iters", "var_floor_factor")
        _positive(tv, "rank")
        _positive(sae, "learning_rate", "batch_size")
        _positive(clf, "hidden_dim", "batch_size", "reg_c")
        if fe.n_ceps >= fe.n_mels:
            raise ConfigError(f"frontend.n_ceps ({fe.n_ceps}) must be smaller than frontend.n_mels ({fe.n_mels})")
        if not 0.0 <= fe.preemphasis < 1.0:
            raise ConfigError("frontend.preemphasis must lie in [0, 1)")
        if tv.rank > ubm.components * fe.n_ceps:
            raise ConfigError(
                f"tv.rank ({tv.rank}) exceeds the supervector size C*D = {ubm.components}*{fe.n_ceps}"
            )
        if tv.mstep not in ("ml", "paper-literal"):
            raise ConfigError(f"tv.mstep must be 'ml' or 'paper-literal', got {tv.mstep!r}")
        dims = [tv.rank] + list(sae.layers)
        if not sae.layers or any(a <= b for a, b in zip(dims, dims[1:])) or min(dims) < 1:
            raise ConfigError(f"sae.layers {list(sae.layers)} must strictly decrease below tv.rank {tv.rank}")
        if sae.activation not in ("sigmoid", "identity"):
            raise ConfigError(f"sae.activation must be sigmoid or identity, got {sae.activation!r}")
        if clf.kind not in ("svm", "mlp"):
            raise ConfigError(f"classifier.kind must be svm or mlp, got {clf.kind!r}")
        if task.task not in ("binary", "multiclass"):
            raise ConfigError(f"task.task must be binary or multiclass, got {task.task!r}")
        for name in ("epochs", "pretrain_epochs"):
            if getattr(sae, name) < 0:
                raise ConfigError(f"sae.{name} must be >= 0")
        if not self.corpus.manifest and not self.corpus.synthesize:
            raise ConfigError("set corpus.manifest or enable corpus.synthesize")
        return self


def _positive(section, *names):
    for name in names:
        value = getattr(section, name)
        if not value > 0:
            raise ConfigError(f"{type(section).__name__}.{name} must be positive, got {value!r}")


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    """Apply ``{"section.key": "text"}`` overrides in place."""
    for dotted, raw in values.items():
        if dotted in ("workdir", "pipeline.workdir"):
            cfg.workdir = raw
            continue
        sec_name, _, key = dotted.partition(".")
        if sec_name not in PipelineConfig.SECTIONS:
            raise ConfigError(f"unknown config section {sec_name!r}")
        sec = getattr(cfg, sec_name)
        if not hasattr(sec, key):
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sec, key, _coerce(str(raw), getattr(sec, key), dotted))
    return cfg


def apply_seed_env(cfg: PipelineConfig) -> PipelineConfig:
    seed = os.environ.get(SEED_ENV)
    if seed is None or seed == "":
        return cfg
    try:
        value = int(seed)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
    for name in PipelineConfig.SECTIONS:
        sec = getattr(cfg, name)
        if hasattr(sec, "seed"):
            sec.seed = value
    return cfg


def load_config(path, overrides: dict = None) -> PipelineConfig:
    # keys above the first section header belong to the [pipeline] section
    parser = configparser.ConfigParser(interpolation=None, strict=False, default_section="__defaults__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_string("[pipeline]\n" + fh.read(), source=str(path))
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for sec in parser.sections():
        for key in parser[sec]:
            values[key if sec == "pipeline" else f"{sec}.{key}"] = parser[sec][key]
    cfg = apply_overrides(PipelineConfig(), values)
    base = os.path.dirname(os.path.abspath(path))
    if cfg.corpus.manifest and not os.path.isabs(cfg.corpus.manifest):
        cfg.corpus.manifest = os.path.join(base, cfg.corpus.manifest)
    if not os.path.isabs(cfg.workdir):
        cfg.workdir = os.path.join(base, cfg.workdir)
    if overrides:
        apply_overrides(cfg, overrides)
    return apply_seed_env(cfg).validate()


def dump_config(cfg: PipelineConfig) -> str:
    lines = [f"workdir = {cfg.workdir}", ""]
    for name in PipelineConfig.SECTIONS:
        lines.append(f"[{name}]")
        for key, value in cfg.section(name).items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

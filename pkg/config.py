"""Configuration: env defaults (.env), experiment config file loading, validation and dumping."""

from __future__ import annotations

import configparser
import io
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from dotenv import load_dotenv

from utils import UsageError, write_text_atomic

log = logging.getLogger(__name__)

# Load .env from the project root (won't override existing env vars)
load_dotenv(Path(__file__).parent / ".env")

# ---------------------------------------------------------------------------
# Paths and env defaults
# ---------------------------------------------------------------------------
ROOT = Path(os.environ.get("SVK_ROOT", str(Path(__file__).parent)))
DEFAULT_WORKDIR = Path(os.environ.get("SVK_WORKDIR", str(ROOT / "work")))
DEFAULT_WORKERS = int(os.environ.get("SVK_WORKERS", "1"))
LOG_LEVEL = os.environ.get("SVK_LOG_LEVEL", "INFO")

RESOLVED_NAME = "config.resolved.ini"

EMBEDDING_KINDS = ("ivector", "xvector")
ENHANCEMENT_PLACEMENTS = ("off", "extract-only", "train+extract")
PLDA_REGIMES = ("clean", "N", "RR", "RR+N")
EXTRACTOR_DATA = ("clean", "replicas", "N", "RR", "RR+N")

# Condition mixes behind each PLDA training regime (multi-condition copies of the clean set).
REGIME_MIXES: dict[str, dict[str, float]] = {
    "clean": {},
    "N": {"noise": 1.0, "music": 1.0, "babble": 1.0},
    "RR": {"reverb": 1.0},
    "RR+N": {"noise": 1.0, "reverb": 1.0, "noise+reverb": 1.0},
}


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class PathsSection:
    corpus: str = ""
    noises: str = ""
    rirs: str = ""
    trials: str = ""
    workdir: str = ""


@dataclass
class FeaturesSection:
    stmvn_window_s: float = 3.0


@dataclass
class EnhancerSection:
    context: int = 15
    bins: int = 129
    hidden_sizes: tuple[int, ...] = (1500, 1500, 1500)
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 20
    dev_fraction: float = 0.1
    snr_min: float = 0.0
    snr_max: float = 10.0
    clean_fraction: float = 0.2
    telephone: bool = True


@dataclass
class EmbeddingSection:
    kind: str = "ivector"
    lda_dim: int = 20
    extractor_data: str = "clean"


@dataclass
class IVectorSection:
    components: int = 64
    rank: int = 50
    ubm_iters: int = 10
    tv_iters: int = 10


@dataclass
class XVectorSection:
    frame_sizes: tuple[int, ...] = (64, 64, 64, 64, 128)
    segment_sizes: tuple[int, ...] = (64, 64)
    chunk_min: int = 200
    chunk_max: int = 400
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    min_frames: int = 500


@dataclass
class PldaSection:
    rank: int = 15
    iters: int = 10


@dataclass
class AugmentSection:
    plda_fraction: float = 0.3
    snr_min: float = 0.0
    snr_max: float = 20.0
    test_snr_db: float = 5.0
    replica_recipe: tuple[str, ...] = ("reverb", "foreground", "music", "babble", "stationary")
    replica_cap: int = 0


@dataclass
class EvaluationSection:
    operating_points: tuple[str, ...] = ("0.001:1:1", "0.01:1:1", "0.005:1:1")
    enroll_sessions: int = 1

    def points(self) -> list[tuple[float, float, float]]:
        out = []
        for item in self.operating_points:
            parts = item.split(":")
            try:
                p, c_miss, c_fa = (float(x) for x in (parts + ["1", "1"])[:3])
            except ValueError:
                raise UsageError(f"[evaluation] operating_points: cannot parse {item!r} as p:c_miss:c_fa") from None
            out.append((p, c_miss, c_fa))
        return out


@dataclass
class ExperimentSection:
    seed: int | None = None
    enhancement: str = "off"
    plda_regime: str = "clean"
    num_speakers: int = 20
    utts_per_speaker: int = 10


SECTIONS = {
    "paths": PathsSection,
    "features": FeaturesSection,
    "enhancer": EnhancerSection,
    "embedding": EmbeddingSection,
    "ivector": IVectorSection,
    "xvector": XVectorSection,
    "plda": PldaSection,
    "augment": AugmentSection,
    "evaluation": EvaluationSection,
    "experiment": ExperimentSection,
}


def _coerce(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int) or (default is None and key == "seed"):
            if raw == "":
                return None if default is None else int(raw)
            value = int(raw, 0)
            if key == "seed" and not 0 <= value < 2**64:
                raise ValueError(raw)
            return value
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        return raw
    except ValueError:
        raise UsageError(f"{where}: invalid value {raw!r}") from None


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    enhancer: EnhancerSection = field(default_factory=EnhancerSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    ivector: IVectorSection = field(default_factory=IVectorSection)
    xvector: XVectorSection = field(default_factory=XVectorSection)
    plda: PldaSection = field(default_factory=PldaSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    source: Path | None = None

    @classmethod
    def from_text(cls, text: str, source: Path | None = None) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=str(source or "<config>"))
        except configparser.Error as e:
            raise UsageError(f"cannot parse config {source or ''}: {e}") from e
        cfg = cls(source=source)
        for name in parser.sections():
            if name not in SECTIONS:
                raise UsageError(f"unknown config section [{name}]; expected one of {', '.join(SECTIONS)}")
            section = getattr(cfg, name)
            known = {f.name: f for f in fields(section)}
            for key, raw in parser.items(name):
                if key not in known:
                    raise UsageError(f"[{name}] unknown key {key!r}")
                setattr(section, key, _coerce(name, key, raw, getattr(section, key)))
        base = source.parent if source else Path.cwd()
        for key in ("corpus", "noises", "rirs", "trials", "workdir"):
            value = getattr(cfg.paths, key)
            if value and not Path(value).is_absolute():
                setattr(cfg.paths, key, str((base / value).resolve()))
        return cfg

    @classmethod
    def load(cls, path: Path | str | None) -> ExperimentConfig:
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), path)

    # -- validation ---------------------------------------------------------

    def validate(self, check_paths: bool = True) -> ExperimentConfig:
        def need(cond: bool, where: str, msg: str) -> None:
            if not cond:
                raise UsageError(f"{where}: {msg}")

        need(self.embedding.kind in EMBEDDING_KINDS, "[embedding] kind", f"must be one of {EMBEDDING_KINDS}")
        need(self.experiment.enhancement in ENHANCEMENT_PLACEMENTS, "[experiment] enhancement",
             f"must be one of {ENHANCEMENT_PLACEMENTS}")
        need(self.experiment.plda_regime in PLDA_REGIMES, "[experiment] plda_regime", f"must be one of {PLDA_REGIMES}")
        need(self.experiment.num_speakers >= 4, "[experiment] num_speakers", "must be at least 4")
        need(self.experiment.utts_per_speaker >= 2, "[experiment] utts_per_speaker", "must be at least 2")
        need(self.features.stmvn_window_s > 0, "[features] stmvn_window_s", "must be positive")
        need(self.enhancer.context >= 0, "[enhancer] context", "must be >= 0")
        need(bool(self.enhancer.hidden_sizes) and min(self.enhancer.hidden_sizes) > 0,
             "[enhancer] hidden_sizes", "must list positive sizes")
        need(self.enhancer.learning_rate >= 0, "[enhancer] learning_rate", "must be >= 0")
        need(self.enhancer.batch_size > 0 and self.enhancer.epochs > 0, "[enhancer] batch_size/epochs", "must be positive")
        need(0.0 <= self.enhancer.clean_fraction <= 1.0, "[enhancer] clean_fraction", "must lie in [0, 1]")
        need(self.enhancer.snr_min <= self.enhancer.snr_max, "[enhancer] snr_min", "must not exceed snr_max")
        need(self.embedding.lda_dim > 0, "[embedding] lda_dim", "must be positive")
        need(self.embedding.extractor_data in EXTRACTOR_DATA, "[embedding] extractor_data",
             f"must be one of {EXTRACTOR_DATA}")
        need(self.ivector.components > 0 and self.ivector.rank > 0, "[ivector] components/rank", "must be positive")
        need(self.ivector.ubm_iters > 0 and self.ivector.tv_iters > 0, "[ivector] ubm_iters/tv_iters", "must be positive")
        need(len(self.xvector.frame_sizes) == 5, "[xvector] frame_sizes", "needs 5 layer sizes")
        need(len(self.xvector.segment_sizes) == 2, "[xvector] segment_sizes", "needs 2 layer sizes")
        need(0 < self.xvector.chunk_min <= self.xvector.chunk_max, "[xvector] chunk_min", "must be in (0, chunk_max]")
        need(self.plda.rank >= 0 and self.plda.iters > 0, "[plda] rank/iters", "rank >= 0, iters > 0")
        need(0.0 <= self.augment.plda_fraction <= 1.0, "[augment] plda_fraction", "must lie in [0, 1]")
        need(self.augment.snr_min <= self.augment.snr_max, "[augment] snr_min", "must not exceed snr_max")
        need(self.evaluation.enroll_sessions >= 1, "[evaluation] enroll_sessions", "must be >= 1")
        need(self.evaluation.enroll_sessions < self.experiment.utts_per_speaker, "[evaluation] enroll_sessions",
             "must leave at least one test utterance per speaker")
        for p, c_miss, c_fa in self.evaluation.points():
            need(0 < p < 1 and c_miss > 0 and c_fa > 0, "[evaluation] operating_points",
                 f"need 0 < p_target < 1 and positive costs, got {p}:{c_miss}:{c_fa}")
        if check_paths:
            for key in ("corpus", "noises", "rirs", "trials"):
                value = getattr(self.paths, key)
                need(not value or Path(value).exists(), f"[paths] {key}", f"path does not exist: {value}")
        return self

    def require_seed(self) -> int:
        if self.experiment.seed is None:
            raise UsageError("[experiment] seed is required (set it in the config or pass --seed)")
        return self.experiment.seed

    def workdir(self) -> Path:
        return Path(self.paths.workdir) if self.paths.workdir else DEFAULT_WORKDIR

    # -- output -------------------------------------------------------------

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _render(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def dump(self, workdir: Path | str | None = None) -> Path:
        """Write every resolved value to ``<workdir>/config.resolved.ini``."""
        target = Path(workdir) if workdir is not None else self.workdir()
        return write_text_atomic(target / RESOLVED_NAME, self.to_text())

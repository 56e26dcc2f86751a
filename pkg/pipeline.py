"""Stage functions: corpus and banks, features, enhancer, extractors, PLDA back-end, trials, scoring.

Each stage reads and writes artifacts under one work directory so run.py
subcommands can be chained across processes:

    <workdir>/corpus/corpus.tsv         synthetic corpus (when [paths] corpus is unset)
    <workdir>/banks/{noises,rirs}/      synthetic noise and RIR banks
    <workdir>/augment/<name>/           materialized corrupted copies + manifest.tsv
    <workdir>/features/<variant>-<fp>/  SVKF1 feature cache
    <workdir>/models/*.svkm             SVKM1 model containers
    <workdir>/embeddings/*.svke         raw (pre-LDA) embeddings
    <workdir>/trials/, scores/, report/
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from audio import FeatureMatrix, Waveform, append_deltas, energy_vad, mfcc, read_wav, stmvn, write_wav
from augment import (
    CorpusManifest, ManifestEntry, NoiseBank, RoomModel, SpecDrawer, augment_utterance,
    build_multicondition_manifest, build_replica_manifest, load_noise_bank, load_rooms, materialize,
    synth_corpus, synth_noise_bank, synth_rooms,
)
from config import REGIME_MIXES, ExperimentConfig
from enhancer import AEConfig, AEModel, TrainPair, enhance_utterance, init_model, make_training_pairs
from enhancer import load_model as load_enhancer
from enhancer import save_model as save_enhancer
from enhancer import train as train_ae
from ivector import (
    GmmUbm, IVectorExtractor, LdaProjection, accumulate_stats, extract_ivector, load_lda, load_tv,
    project_and_norm, save_lda, save_tv, save_ubm, train_lda, train_tv, train_ubm,
)
from metrics import ConditionResult, OperatingPoint, emit_report, evaluate_condition
from plda import PldaModel, ScoreSet, Trial, TrialList, load_plda, save_plda, score_trials, train_plda
from store import load_features, save_embeddings, save_features
from utils import DataError, derive_seed, parallel_map, rng_for, write_text_atomic
from xvector import (
    DEFAULT_CONTEXTS, XVectorConfig, XVectorHyper, XVectorModel, extract_xvector, init_xvector,
    load_xvector, save_xvector, train_xvector,
)

log = logging.getLogger(__name__)

MODEL_FILES = {
    "enhancer": "enhancer.svkm",
    "ubm": "ubm.svkm",
    "tv": "tv.svkm",
    "xvector": "xvector.svkm",
    "lda": "lda.svkm",
    "plda": "plda.svkm",
}
ENHANCER_CONDITIONS = ("noise", "reverb", "noise+reverb")
STAMP_NAME = "params.json"


@dataclass(frozen=True)
class Workspace:
    root: Path

    def model(self, name: str) -> Path:
        return self.root / "models" / MODEL_FILES[name]

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def banks_dir(self) -> Path:
        return self.root / "banks"

    @property
    def features_dir(self) -> Path:
        return self.root / "features"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def augment_dir(self, name: str) -> Path:
        return self.root / "augment" / name

    def embeddings(self, name: str) -> Path:
        return self.root / "embeddings" / f"{name}.svke"

    def trials(self, name: str) -> Path:
        return self.root / "trials" / f"{name}.trials"

    def scores(self, name: str) -> Path:
        return self.root / "scores" / f"{name}.scores"


def operating_points(cfg: ExperimentConfig) -> list[OperatingPoint]:
    return [OperatingPoint(*p) for p in cfg.evaluation.points()]


def ae_config(cfg: ExperimentConfig) -> AEConfig:
    return AEConfig(cfg.enhancer.context, cfg.enhancer.bins, tuple(cfg.enhancer.hidden_sizes))


# ---------------------------------------------------------------------------
# Corpus and banks
# ---------------------------------------------------------------------------

def _stamp_matches(directory: Path, params: dict) -> bool:
    stamp = directory / STAMP_NAME
    if not stamp.exists():
        return False
    try:
        return json.loads(stamp.read_text(encoding="utf-8")) == params
    except ValueError:
        return False


def _write_stamp(directory: Path, params: dict) -> Path:
    return write_text_atomic(directory / STAMP_NAME, json.dumps(params, sort_keys=True) + "\n")


def synthesize_corpus(out_dir: Path, num_speakers: int, utts_per_speaker: int, seed: int) -> CorpusManifest:
    """Synthetic corpus plus a stamp of the parameters that generated it."""
    manifest = synth_corpus(num_speakers, utts_per_speaker, seed, out_dir)
    _write_stamp(Path(out_dir), {"seed": seed, "num_speakers": num_speakers, "utts_per_speaker": utts_per_speaker})
    return manifest


def synthesize_banks(ws: Workspace, seed: int) -> tuple[NoiseBank, dict[str, RoomModel]]:
    noises = synth_noise_bank(ws.banks_dir / "noises", derive_seed(seed, "noise-bank"))
    _write_stamp(ws.banks_dir / "noises", {"seed": seed})
    rooms = synth_rooms(ws.banks_dir / "rirs", derive_seed(seed, "room-bank"))
    _write_stamp(ws.banks_dir / "rirs", {"seed": seed})
    return noises, rooms


def corpus_manifest(cfg: ExperimentConfig, ws: Workspace, seed: int) -> CorpusManifest:
    """The [paths] corpus, else the work directory's synthetic corpus, regenerated when its parameters change."""
    if cfg.paths.corpus:
        return CorpusManifest.load(cfg.paths.corpus)
    n, u = cfg.experiment.num_speakers, cfg.experiment.utts_per_speaker
    listing = ws.corpus_dir / "corpus.tsv"
    if listing.exists():
        if _stamp_matches(ws.corpus_dir, {"seed": seed, "num_speakers": n, "utts_per_speaker": u}):
            return CorpusManifest.load(listing)
        log.info("Synthetic corpus in %s was made with other parameters; regenerating", ws.corpus_dir)
    return synthesize_corpus(ws.corpus_dir, n, u, seed)


def load_banks(cfg: ExperimentConfig, ws: Workspace, seed: int) -> tuple[NoiseBank, dict[str, RoomModel]]:
    """Banks from [paths], else the work directory's synthetic banks for this seed (created on demand)."""
    noises = rooms = None
    if cfg.paths.noises:
        noises = load_noise_bank(cfg.paths.noises)
    elif _stamp_matches(ws.banks_dir / "noises", {"seed": seed}):
        noises = load_noise_bank(ws.banks_dir / "noises" / "noises.lst")
    if cfg.paths.rirs:
        rooms = load_rooms(cfg.paths.rirs)
    elif _stamp_matches(ws.banks_dir / "rirs", {"seed": seed}):
        rooms = load_rooms(ws.banks_dir / "rirs" / "rirs.lst")
    if noises is None or rooms is None:
        synth_noises, synth_room_bank = synthesize_banks(ws, seed)
        noises = noises or synth_noises
        rooms = rooms or synth_room_bank
    return noises, rooms


def merge_manifests(*manifests: CorpusManifest) -> CorpusManifest:
    """Union of manifests with different roots; entry paths become absolute."""
    entries = [
        replace(e, path=str(m.resolve(e).resolve()))
        for m in manifests
        for e in m.entries
    ]
    return CorpusManifest(entries, Path("/"))


def split_speakers(manifest: CorpusManifest, seed: int) -> tuple[CorpusManifest, CorpusManifest]:
    """Seeded speaker-disjoint split into a training half and an evaluation half."""
    speakers = manifest.speakers()
    if len(speakers) < 4:
        raise DataError(f"need at least 4 speakers to split train/eval, got {len(speakers)}")
    order = rng_for(seed, "speaker-split").permutation(len(speakers))
    eval_speakers = {speakers[i] for i in order[: len(speakers) // 2]}
    train = manifest.subset(lambda e: e.speaker_id not in eval_speakers)
    evaluation = manifest.subset(lambda e: e.speaker_id in eval_speakers)
    log.info("Speaker split: %d train, %d eval", len(speakers) - len(eval_speakers), len(eval_speakers))
    return train, evaluation


def augment_manifest(
    clean: CorpusManifest,
    out_dir: Path,
    cfg: ExperimentConfig,
    seed: int,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    regime: str = "RR+N",
    split: str = "train",
    replicas: bool = False,
    workers: int = 1,
    min_frames: int | None = None,
) -> CorpusManifest:
    """Build a multi-condition (or replica) manifest, render it and write ``manifest.tsv``.

    Replica manifests drop sources shorter than ``min_frames`` (default: the x-vector minimum).
    """
    drawer = SpecDrawer(noises, rooms, split, (cfg.augment.snr_min, cfg.augment.snr_max))
    if replicas:
        cap = cfg.augment.replica_cap or len(clean) * len(cfg.augment.replica_recipe)
        spec_manifest = build_replica_manifest(
            clean, cfg.augment.replica_recipe, cap, derive_seed(seed, "replicas"), drawer,
            min_frames=cfg.xvector.min_frames if min_frames is None else min_frames,
        )
    else:
        if regime not in REGIME_MIXES or regime == "clean":
            raise DataError(f"augmentation regime must be one of N, RR, RR+N, got {regime!r}")
        spec_manifest = build_multicondition_manifest(
            clean, cfg.augment.plda_fraction, REGIME_MIXES[regime], derive_seed(seed, "plda", regime), drawer
        )
    rendered = materialize(spec_manifest, out_dir, noises, rooms, workers)
    rendered.save(out_dir / "manifest.tsv")
    return rendered


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def utterance_features(
    wave: Waveform, kind: str, stmvn_window_s: float = 3.0, enhancer: AEModel | None = None
) -> FeatureMatrix:
    """VAD on the input audio, optional enhancement, MFCC front-end, STMVN, then active frames only."""
    mask = energy_vad(wave)
    if enhancer is not None:
        wave = enhance_utterance(enhancer, wave)
    if kind == "ivector":
        feats = append_deltas(mfcc(wave, "ivec"))
    elif kind == "xvector":
        feats = mfcc(wave, "xvec")
    else:
        raise DataError(f"unknown embedding kind {kind!r}")
    return stmvn(feats, stmvn_window_s).select(mask)


def _file_tag(path: Path) -> str:
    return f"{zlib.crc32(path.read_bytes()):08x}"


def _feature_dir(ws: Workspace, manifest: CorpusManifest, kind: str, window: float, enhancer_tag: str) -> Path:
    lines = [kind, repr(float(window)), enhancer_tag]
    for e in sorted(manifest.entries, key=lambda e: e.utt_id):
        path = manifest.resolve(e)
        lines.append(f"{e.utt_id}\t{path.resolve()}\t{_file_tag(path)}")
    fingerprint = zlib.crc32("\n".join(lines).encode("utf-8"))
    return ws.features_dir / f"{kind}-{enhancer_tag}-{fingerprint:08x}"


def compute_features(
    manifest: CorpusManifest,
    cfg: ExperimentConfig,
    ws: Workspace,
    enhancer: AEModel | None = None,
    enhancer_path: Path | None = None,
    workers: int = 1,
) -> dict[str, FeatureMatrix]:
    """Features per utterance id, cached as SVKF1 files keyed by manifest and enhancer."""
    kind = cfg.embedding.kind
    window = cfg.features.stmvn_window_s
    pending = [e.utt_id for e in manifest.entries if e.spec is not None]
    if pending:
        raise DataError(f"manifest has unrendered augmentation specs (e.g. {pending[0]}); materialize it first")
    enhancer_tag = "raw" if enhancer is None else (_file_tag(enhancer_path) if enhancer_path else "enh")
    cache = _feature_dir(ws, manifest, kind, window, enhancer_tag)
    shift = 10.0

    def _one(e: ManifestEntry) -> FeatureMatrix:
        path = cache / f"{e.utt_id}.svkf"
        if path.exists():
            return load_features(path, shift, kind)
        feats = utterance_features(read_wav(manifest.resolve(e)), kind, window, enhancer)
        save_features(feats, path)
        return feats

    entries = sorted(manifest.entries, key=lambda e: e.utt_id)
    feats = parallel_map(_one, entries, workers)
    log.info("Features ready for %d utterances (%s)", len(entries), cache.name)
    return {e.utt_id: f for e, f in zip(entries, feats)}


# ---------------------------------------------------------------------------
# Enhancer
# ---------------------------------------------------------------------------

def enhancer_training_pairs(
    train: CorpusManifest,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    cfg: ExperimentConfig,
    seed: int,
    workers: int = 1,
) -> list[TrainPair]:
    """Corrupted/clean pairs plus a clean_fraction share of clean/clean pairs."""
    ec = cfg.enhancer
    drawer = SpecDrawer(noises, rooms, "train", (ec.snr_min, ec.snr_max), apply_telephone=ec.telephone)
    rng = rng_for(seed, "enhancer-pairs")
    entries = sorted(train.entries, key=lambda e: e.utt_id)
    n_clean = math.floor(ec.clean_fraction * len(entries) + 1e-9)
    keep_clean = set(rng.choice(len(entries), size=n_clean, replace=False).tolist())
    specs = []
    for i in range(len(entries)):
        if i in keep_clean:
            specs.append(None)
        else:
            specs.append(drawer.draw(ENHANCER_CONDITIONS[int(rng.integers(len(ENHANCER_CONDITIONS)))], rng))
    ae_cfg = ae_config(cfg)

    def _pair(item) -> TrainPair:
        entry, spec = item
        clean = read_wav(train.resolve(entry))
        noisy = clean if spec is None else augment_utterance(clean, spec, noises, rooms)
        return make_training_pairs(noisy, clean, ae_cfg)

    return parallel_map(_pair, list(zip(entries, specs)), workers)


def train_enhancer_stage(
    train: CorpusManifest,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    cfg: ExperimentConfig,
    seed: int,
    ws: Workspace,
    workers: int = 1,
) -> tuple[AEModel, list[dict]]:
    pairs = enhancer_training_pairs(train, noises, rooms, cfg, seed, workers)
    ec = cfg.enhancer
    model, history = train_ae(
        init_model(ae_config(cfg), derive_seed(seed, "ae-init")),
        pairs,
        learning_rate=ec.learning_rate,
        momentum=ec.momentum,
        batch_size=ec.batch_size,
        epochs=ec.epochs,
        dev_fraction=ec.dev_fraction,
        seed=derive_seed(seed, "ae-train"),
    )
    save_enhancer(model, ws.model("enhancer"))
    return model, history


def enhance_manifest(
    manifest: CorpusManifest, model: AEModel, out_dir: Path, workers: int = 1
) -> CorpusManifest:
    """Write enhanced copies of every utterance to ``out_dir/wav`` with a new manifest."""
    def _one(e: ManifestEntry) -> ManifestEntry:
        rel = f"wav/{e.utt_id}.wav"
        write_wav(enhance_utterance(model, read_wav(manifest.resolve(e))), out_dir / rel)
        return replace(e, path=rel, spec=None)

    entries = parallel_map(_one, sorted(manifest.entries, key=lambda e: e.utt_id), workers)
    enhanced = CorpusManifest(entries, out_dir)
    enhanced.save(out_dir / "manifest.tsv")
    return enhanced


# ---------------------------------------------------------------------------
# Embedding extractors
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingExtractor:
    kind: str
    ivector: IVectorExtractor | None = None
    xvector: XVectorModel | None = None

    def __call__(self, f: FeatureMatrix) -> np.ndarray:
        if self.kind == "ivector":
            return extract_ivector(self.ivector, accumulate_stats(self.ivector.ubm, f))
        if f.num_frames == 0:
            raise DataError("utterance has no active frames for x-vector extraction")
        need = self.xvector.config.min_frames
        if f.num_frames < need:
            f = FeatureMatrix(np.pad(f.rows, ((0, need - f.num_frames), (0, 0)), mode="wrap"),
                              f.frame_shift_ms, f.descriptor)
        return extract_xvector(self.xvector, f)


def _ordered(features: Mapping[str, FeatureMatrix]) -> list[FeatureMatrix]:
    return [features[u] for u in sorted(features)]


def train_ubm_stage(features: Mapping[str, FeatureMatrix], cfg: ExperimentConfig, seed: int, ws: Workspace) -> GmmUbm:
    ubm = train_ubm(_ordered(features), cfg.ivector.components, cfg.ivector.ubm_iters, derive_seed(seed, "ubm"))
    save_ubm(ubm, ws.model("ubm"))
    return ubm


def train_ivector_stage(
    features: Mapping[str, FeatureMatrix], ubm: GmmUbm, cfg: ExperimentConfig, seed: int, ws: Workspace,
    workers: int = 1,
) -> IVectorExtractor:
    stats = parallel_map(lambda f: accumulate_stats(ubm, f), _ordered(features), workers)
    ext = train_tv(stats, ubm, cfg.ivector.rank, cfg.ivector.tv_iters, derive_seed(seed, "tv"))
    save_tv(ext, ws.model("tv"))
    return ext


def train_xvector_stage(
    features: Mapping[str, FeatureMatrix], labels: Mapping[str, str], cfg: ExperimentConfig, seed: int,
    ws: Workspace,
) -> XVectorModel:
    xc = cfg.xvector
    usable = {u: f for u, f in features.items() if f.num_frames >= xc.min_frames}
    per_speaker = Counter(labels[u] for u in usable)
    thin = {s for s, n in per_speaker.items() if n < 2}
    if thin:
        log.warning("Dropping %d speakers with fewer than 2 usable utterances from x-vector training", len(thin))
        usable = {u: f for u, f in usable.items() if labels[u] not in thin}
    num_speakers = len({labels[u] for u in usable})
    if num_speakers < 3:
        raise DataError(f"x-vector training needs >= 3 speakers with 2+ utterances of {xc.min_frames}+ frames")
    model_cfg = XVectorConfig(
        input_dim=next(iter(usable.values())).dim,
        num_speakers=num_speakers,
        frame_sizes=tuple(xc.frame_sizes),
        contexts=DEFAULT_CONTEXTS,
        segment_sizes=tuple(xc.segment_sizes),
    )
    hyper = XVectorHyper(
        chunk_range=(xc.chunk_min, xc.chunk_max),
        batch_size=xc.batch_size,
        epochs=xc.epochs,
        learning_rate=xc.learning_rate,
        momentum=xc.momentum,
        min_frames=xc.min_frames,
    )
    model, _ = train_xvector(
        init_xvector(model_cfg, derive_seed(seed, "xvector-init")), usable, labels, hyper, derive_seed(seed, "xvector")
    )
    save_xvector(model, ws.model("xvector"))
    return model


def train_extractor_stage(
    features: Mapping[str, FeatureMatrix], labels: Mapping[str, str], cfg: ExperimentConfig, seed: int,
    ws: Workspace, workers: int = 1,
) -> EmbeddingExtractor:
    if cfg.embedding.kind == "ivector":
        ubm = train_ubm_stage(features, cfg, seed, ws)
        return EmbeddingExtractor("ivector", ivector=train_ivector_stage(features, ubm, cfg, seed, ws, workers))
    return EmbeddingExtractor("xvector", xvector=train_xvector_stage(features, labels, cfg, seed, ws))


def extractor_training_manifest(
    train: CorpusManifest,
    cfg: ExperimentConfig,
    seed: int,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    ws: Workspace,
    workers: int = 1,
) -> CorpusManifest:
    """Extractor training data per ``[embedding] extractor_data``: clean, replicas or a multi-condition regime."""
    source = cfg.embedding.extractor_data
    if source != "replicas":
        return multicondition_manifest(train, source, cfg, seed, noises, rooms, ws, workers)
    min_frames = cfg.xvector.min_frames if cfg.embedding.kind == "xvector" else 0
    pooled = augment_manifest(
        train, ws.augment_dir("extractor-replicas"), cfg, seed, noises, rooms,
        replicas=True, workers=workers, min_frames=min_frames,
    )
    if not len(pooled):
        raise DataError("replica manifest for extractor training is empty; lower [xvector] min_frames")
    return pooled


def load_extractor(cfg: ExperimentConfig, ws: Workspace) -> EmbeddingExtractor:
    if cfg.embedding.kind == "ivector":
        return EmbeddingExtractor("ivector", ivector=load_tv(ws.model("tv")))
    return EmbeddingExtractor("xvector", xvector=load_xvector(ws.model("xvector")))


def extraction_enhancer(cfg: ExperimentConfig, ws: Workspace) -> tuple[AEModel | None, Path | None]:
    if cfg.experiment.enhancement == "off":
        return None, None
    return load_enhancer(ws.model("enhancer")), ws.model("enhancer")


def training_enhancer(cfg: ExperimentConfig, ws: Workspace) -> tuple[AEModel | None, Path | None]:
    if cfg.experiment.enhancement != "train+extract":
        return None, None
    return load_enhancer(ws.model("enhancer")), ws.model("enhancer")


def extract_embeddings(
    manifest: CorpusManifest,
    extractor: EmbeddingExtractor,
    cfg: ExperimentConfig,
    ws: Workspace,
    enhancer: AEModel | None = None,
    enhancer_path: Path | None = None,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    features = compute_features(manifest, cfg, ws, enhancer, enhancer_path, workers)
    ids = sorted(features)
    vectors = parallel_map(lambda u: extractor(features[u]), ids, workers)
    return dict(zip(ids, vectors))


# ---------------------------------------------------------------------------
# Back-end
# ---------------------------------------------------------------------------

def train_backend(
    raw: Mapping[str, np.ndarray], labels: Mapping[str, str], cfg: ExperimentConfig, ws: Workspace
) -> tuple[LdaProjection, PldaModel]:
    """LDA + length norm, then PLDA, on raw embeddings; both models are saved."""
    ids = sorted(raw)
    missing = [u for u in ids if u not in labels]
    if missing:
        raise DataError(f"no speaker label for embedding id(s): {', '.join(missing[:5])}")
    x = np.stack([raw[u] for u in ids])
    y = [labels[u] for u in ids]
    num_speakers = len(set(y))
    lda_dim = min(cfg.embedding.lda_dim, num_speakers - 1, x.shape[1])
    if lda_dim < cfg.embedding.lda_dim:
        log.warning("LDA dim reduced from %d to %d (speakers=%d, input dim=%d)",
                    cfg.embedding.lda_dim, lda_dim, num_speakers, x.shape[1])
    lda = train_lda(x, y, lda_dim)
    z = np.stack([project_and_norm(lda, v) for v in x])
    plda = train_plda(z, y, min(cfg.plda.rank, lda_dim, num_speakers), cfg.plda.iters)
    save_lda(lda, ws.model("lda"))
    save_plda(plda, ws.model("plda"))
    return lda, plda


def apply_backend(lda: LdaProjection, raw: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {u: project_and_norm(lda, v) for u, v in raw.items()}


def multicondition_manifest(
    train: CorpusManifest,
    regime: str,
    cfg: ExperimentConfig,
    seed: int,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    ws: Workspace,
    workers: int = 1,
) -> CorpusManifest:
    """The training set itself for ``clean``, else the training set pooled with rendered copies for ``regime``."""
    if regime == "clean":
        return train
    out_dir = ws.augment_dir(f"multi-{regime.replace('+', '_')}")
    return augment_manifest(train, out_dir, cfg, seed, noises, rooms, regime=regime, workers=workers)


def plda_training_manifest(
    train: CorpusManifest,
    cfg: ExperimentConfig,
    seed: int,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    ws: Workspace,
    workers: int = 1,
) -> CorpusManifest:
    return multicondition_manifest(train, cfg.experiment.plda_regime, cfg, seed, noises, rooms, ws, workers)


def score_stage(
    plda: PldaModel, lda: LdaProjection, raw: Mapping[str, np.ndarray], trials: TrialList, workers: int = 1
) -> ScoreSet:
    return score_trials(plda, apply_backend(lda, raw), trials, workers)


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class EvalProtocol:
    manifest: CorpusManifest
    trials: dict[str, TrialList] = field(default_factory=dict)


def build_trials(enroll: Mapping[str, list[str]], tests: Mapping[str, str]) -> TrialList:
    """Every enrollment model against every test utterance; ``tests`` maps test id to speaker."""
    trials = []
    for speaker in sorted(enroll):
        model_id = ",".join(enroll[speaker])
        for test_id in sorted(tests):
            trials.append(Trial(model_id, test_id, "target" if tests[test_id] == speaker else "nontarget"))
    return TrialList(trials)


def eval_protocol(
    evaluation: CorpusManifest,
    cfg: ExperimentConfig,
    seed: int,
    noises: NoiseBank,
    rooms: Mapping[str, RoomModel],
    ws: Workspace,
    workers: int = 1,
) -> EvalProtocol:
    """Clean enrollment; clean and corrupted (dev noises + dev rooms at test SNR) test conditions."""
    k = cfg.evaluation.enroll_sessions
    enroll: dict[str, list[str]] = {}
    clean_tests: dict[str, str] = {}
    test_entries = []
    for speaker in evaluation.speakers():
        utts = sorted((e for e in evaluation.entries if e.speaker_id == speaker), key=lambda e: e.utt_id)
        if len(utts) <= k:
            raise DataError(f"speaker {speaker} has {len(utts)} utterances; need more than {k} enrollment sessions")
        enroll[speaker] = [e.utt_id for e in utts[:k]]
        for e in utts[k:]:
            clean_tests[e.utt_id] = speaker
            test_entries.append(e)

    snr = cfg.augment.test_snr_db
    drawer = SpecDrawer(noises, rooms, "dev", (snr, snr))
    rng = rng_for(seed, "eval-corruption")
    corrupted = CorpusManifest(
        [
            ManifestEntry(f"{e.utt_id}-corrupt", e.path, e.speaker_id, "noise+reverb", drawer.draw("noise+reverb", rng))
            for e in test_entries
        ],
        evaluation.root,
    )
    out_dir = ws.augment_dir("eval-corrupt")
    rendered = materialize(corrupted, out_dir, noises, rooms, workers)
    rendered.save(out_dir / "manifest.tsv")

    corrupt_tests = {f"{u}-corrupt": s for u, s in clean_tests.items()}
    protocol = EvalProtocol(
        merge_manifests(evaluation, rendered),
        {"clean": build_trials(enroll, clean_tests), "corrupt": build_trials(enroll, corrupt_tests)},
    )
    for name, trials in protocol.trials.items():
        trials.save(ws.trials(name))
    return protocol


# ---------------------------------------------------------------------------
# One experiment cell
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    results: list[ConditionResult]
    artifacts: list[Path]


def run_experiment(cfg: ExperimentConfig, ws: Workspace, workers: int = 1) -> ExperimentResult:
    """Train and evaluate one (embedding, enhancement placement, PLDA regime) cell end to end."""
    seed = cfg.require_seed()
    cfg.dump(ws.root)
    corpus = corpus_manifest(cfg, ws, seed)
    noises, rooms = load_banks(cfg, ws, seed)
    train, evaluation = split_speakers(corpus, seed)
    placement = cfg.experiment.enhancement
    log.info("Experiment: %s, enhancement=%s, extractor data=%s, PLDA regime=%s, seed=%d",
             cfg.embedding.kind, placement, cfg.embedding.extractor_data, cfg.experiment.plda_regime, seed)

    if placement != "off":
        train_enhancer_stage(train, noises, rooms, cfg, seed, ws, workers)
    train_enh, train_enh_path = training_enhancer(cfg, ws)
    extract_enh, extract_enh_path = extraction_enhancer(cfg, ws)

    extractor_set = extractor_training_manifest(train, cfg, seed, noises, rooms, ws, workers)
    train_features = compute_features(extractor_set, cfg, ws, train_enh, train_enh_path, workers)
    extractor = train_extractor_stage(train_features, labels_from(extractor_set), cfg, seed, ws, workers)

    if cfg.embedding.extractor_data == cfg.experiment.plda_regime:
        plda_set = extractor_set
    else:
        plda_set = plda_training_manifest(train, cfg, seed, noises, rooms, ws, workers)
    plda_labels = labels_from(plda_set)
    plda_raw = extract_embeddings(plda_set, extractor, cfg, ws, extract_enh, extract_enh_path, workers)
    save_embeddings(ws.embeddings("plda-train"), plda_raw)
    lda, plda = train_backend(plda_raw, plda_labels, cfg, ws)

    protocol = eval_protocol(evaluation, cfg, seed, noises, rooms, ws, workers)
    eval_raw = extract_embeddings(protocol.manifest, extractor, cfg, ws, extract_enh, extract_enh_path, workers)
    save_embeddings(ws.embeddings("eval"), eval_raw)

    ops = operating_points(cfg)
    results = []
    artifacts = [ws.embeddings("plda-train"), ws.embeddings("eval")]
    for name, trials in protocol.trials.items():
        scores = score_stage(plda, lda, eval_raw, trials, workers)
        artifacts.append(scores.save(ws.scores(name)))
        results.append(evaluate_condition(name, scores, ops))
    artifacts.extend(emit_report(results, ws.report_dir, ops))
    artifacts.extend(p for p in (ws.model(n) for n in MODEL_FILES) if p.exists())
    return ExperimentResult(results, artifacts)


def load_scoring_models(ws: Workspace) -> tuple[LdaProjection, PldaModel]:
    return load_lda(ws.model("lda")), load_plda(ws.model("plda"))


def labels_from(manifest: CorpusManifest) -> dict[str, str]:
    return {e.utt_id: e.speaker_id for e in manifest.entries}

"""Corruption pipeline (reverb, A-weighted VAD-frame SNR mixing, telephone channel),
corpus manifests, noise/RIR banks and the synthetic corpus generator."""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy import signal

from audio import (
    FrameMask, Waveform, a_weight, active_sample_mask, energy_vad, fir_convolve,
    frame_count, read_wav, telephone_filter, write_wav,
)
from utils import DataError, derive_seed, parallel_map, rng_for, write_text_atomic

log = logging.getLogger(__name__)

SNR_CAP_DB = 100.0
PEAK_CEILING = 1.0 - 1.0 / 32768.0
CONDITIONS = ("clean", "noise", "reverb", "noise+reverb", "music", "babble")
SPLITS = ("train", "dev")
NOISE_CATEGORIES = ("stationary", "music", "babble", "foreground")


# ---------------------------------------------------------------------------
# Banks
# ---------------------------------------------------------------------------

@dataclass
class RoomModel:
    room_id: str
    rirs: list[np.ndarray]
    sample_rate: int
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.rirs) < 2:
            raise DataError(f"room {self.room_id!r} needs at least 2 RIRs, has {len(self.rirs)}")
        for i, h in enumerate(self.rirs):
            if np.asarray(h).size == 0:
                raise DataError(f"room {self.room_id!r}: RIR {i} is empty")


@dataclass
class NoiseBank:
    noises: dict[str, Waveform]
    partition: dict[str, str]
    categories: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for noise_id in self.noises:
            split = self.partition.get(noise_id)
            if split not in SPLITS:
                raise DataError(f"noise {noise_id!r} must be tagged train or dev, got {split!r}")

    def ids(self, split: str | None = None, category: str | None = None) -> list[str]:
        return sorted(
            n for n in self.noises
            if (split is None or self.partition[n] == split)
            and (category is None or self.categories.get(n, "stationary") == category)
        )

    def get(self, noise_id: str) -> Waveform:
        try:
            return self.noises[noise_id]
        except KeyError:
            raise DataError(f"unknown noise id {noise_id!r}") from None

    def compose(self, noise_id: str, length: int, seed: int) -> Waveform:
        """Fit one noise (or the sum of a '+'-joined babble group) to ``length`` samples."""
        parts = noise_id.split("+")
        if len(parts) == 1:
            return fit_noise(self.get(noise_id), length, seed)
        total = np.zeros(length)
        rate = None
        for i, part in enumerate(parts):
            fitted = fit_noise(self.get(part), length, derive_seed(seed, i))
            rate = fitted.sample_rate
            total += fitted.samples
        return Waveform(total, rate)


# ---------------------------------------------------------------------------
# AugmentSpec and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    snr_db: float | None = None
    noise_id: str | None = None
    room_id: str | None = None
    rir_index_speech: int | None = None
    rir_index_noise: int | None = None
    apply_telephone: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_id is not None and self.snr_db is None:
            raise DataError(f"noise {self.noise_id!r} given without an SNR")
        if self.room_id is not None:
            if self.rir_index_speech is None or self.rir_index_noise is None:
                raise DataError(f"room {self.room_id!r} needs both RIR indices")
            if self.rir_index_speech == self.rir_index_noise:
                raise DataError(f"room {self.room_id!r}: speech and noise RIR indices must differ")
        if not 0 <= int(self.seed) < 2**64:
            raise DataError(f"seed must be an unsigned 64-bit value, got {self.seed}")

    def encode(self) -> str:
        parts = []
        if self.snr_db is not None:
            parts.append(f"snr={float(self.snr_db)!r}")
        if self.noise_id is not None:
            parts.append(f"noise={self.noise_id}")
        if self.room_id is not None:
            parts.append(f"room={self.room_id}")
            parts.append(f"rir={self.rir_index_speech},{self.rir_index_noise}")
        parts.append(f"tel={int(self.apply_telephone)}")
        parts.append(f"seed={int(self.seed)}")
        return ";".join(parts)

    @classmethod
    def decode(cls, text: str) -> AugmentSpec:
        fields: dict = {}
        for item in filter(None, text.strip().split(";")):
            key, sep, value = item.partition("=")
            if not sep:
                raise DataError(f"malformed augment spec item {item!r} in {text!r}")
            if key == "snr":
                fields["snr_db"] = float(value)
            elif key == "noise":
                fields["noise_id"] = value
            elif key == "room":
                fields["room_id"] = value
            elif key == "rir":
                i, _, j = value.partition(",")
                fields["rir_index_speech"], fields["rir_index_noise"] = int(i), int(j)
            elif key == "tel":
                fields["apply_telephone"] = value == "1"
            elif key == "seed":
                fields["seed"] = int(value)
            else:
                raise DataError(f"unknown augment spec key {key!r} in {text!r}")
        return cls(**fields)


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    speaker_id: str
    condition: str = "clean"
    spec: AugmentSpec | None = None

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise DataError(f"{self.utt_id}: unknown condition tag {self.condition!r}")


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        dupes = [u for u, n in Counter(e.utt_id for e in self.entries).items() if n > 1]
        if dupes:
            raise DataError(f"duplicate utterance ids in manifest: {', '.join(sorted(dupes)[:5])}")
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utt_id: e for e in self.entries}

    def subset(self, keep) -> CorpusManifest:
        return CorpusManifest([e for e in self.entries if keep(e)], self.root)

    @classmethod
    def load(cls, path: Path | str) -> CorpusManifest:
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        entries = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (4, 5):
                raise DataError(f"{path}:{lineno}: expected 4 or 5 tab-separated columns, got {len(cols)}")
            spec = AugmentSpec.decode(cols[4]) if len(cols) == 5 and cols[4] else None
            entries.append(ManifestEntry(cols[0], cols[1], cols[2], cols[3], spec))
        return cls(entries, path.parent)

    def save(self, path: Path | str) -> Path:
        """Write entries sorted by utt_id with paths relative to the manifest file."""
        path = Path(path)
        lines = []
        for e in sorted(self.entries, key=lambda e: e.utt_id):
            rel = os.path.relpath(os.path.abspath(self.resolve(e)), os.path.abspath(path.parent))
            cols = [e.utt_id, rel, e.speaker_id, e.condition]
            if e.spec is not None:
                cols.append(e.spec.encode())
            lines.append("\t".join(cols))
        return write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# SNR calibration and mixing
# ---------------------------------------------------------------------------

def fit_noise(noise: Waveform, length: int, seed: int = 0) -> Waveform:
    """Crop (longer noise) or circularly tile (shorter noise) to ``length`` samples."""
    rng = np.random.default_rng(seed)
    n = len(noise)
    if n >= length:
        offset = int(rng.integers(0, n - length + 1))
        return noise.with_samples(noise.samples[offset : offset + length])
    offset = int(rng.integers(0, n))
    return noise.with_samples(noise.samples[(offset + np.arange(length)) % n])


def _check_rates(*waves: Waveform) -> None:
    rates = {w.sample_rate for w in waves}
    if len(rates) > 1:
        raise DataError(f"mixed sample rates {sorted(rates)}; resampling is not supported")


def _weighted_energies(speech: Waveform, noise: Waveform, mask: FrameMask) -> tuple[float, float]:
    active = active_sample_mask(mask, len(speech), speech.sample_rate)
    if not active.any():
        raise DataError("VAD mask has no active frames; SNR is undefined")
    es = float(np.mean(a_weight(speech).samples[active] ** 2))
    en = float(np.mean(a_weight(noise).samples[active] ** 2))
    return es, en


def measure_snr(speech: Waveform, noise: Waveform, mask: FrameMask) -> float:
    """A-weighted SNR in dB over the mask's active sample ranges."""
    _check_rates(speech, noise)
    es, en = _weighted_energies(speech, noise.with_samples(noise.samples[: len(speech)]), mask)
    return 10.0 * math.log10(es / en)


def snr_gain(speech: Waveform, noise: Waveform, mask: FrameMask, snr_db: float, seed: int = 0) -> float:
    """Noise gain giving ``snr_db`` between A-weighted speech and noise on active frames."""
    _check_rates(speech, noise)
    fitted = fit_noise(noise, len(speech), seed)
    es, en = _weighted_energies(speech, fitted, mask)
    if en <= 0.0:
        raise DataError("noise has zero energy on the active frames")
    snr = min(float(snr_db), SNR_CAP_DB)
    return math.sqrt(es / (en * 10.0 ** (snr / 10.0)))


def mix_at_snr(speech: Waveform, noise: Waveform, mask: FrameMask, snr_db: float, seed: int = 0) -> Waveform:
    fitted = fit_noise(noise, len(speech), seed)
    gain = snr_gain(speech, fitted, mask, snr_db)
    out = speech.samples + gain * fitted.samples
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out * (PEAK_CEILING / peak)
    return speech.with_samples(out)


def augment_utterance(
    speech: Waveform,
    spec: AugmentSpec,
    noises: NoiseBank | None = None,
    rooms: Mapping[str, RoomModel] | None = None,
) -> Waveform:
    """Reverberate, mix at SNR and optionally telephone-filter one utterance.

    Steps whose fields are unset are skipped. The VAD mask always comes from
    the dry input speech.
    """
    mask = energy_vad(speech)
    out = speech
    room = None
    if spec.room_id is not None:
        room = (rooms or {}).get(spec.room_id)
        if room is None:
            raise DataError(f"unknown room id {spec.room_id!r}")
        if room.sample_rate != speech.sample_rate:
            raise DataError(f"room {room.room_id!r} is {room.sample_rate} Hz, speech is {speech.sample_rate} Hz")
        for idx in (spec.rir_index_speech, spec.rir_index_noise):
            if not 0 <= idx < len(room.rirs):
                raise DataError(f"room {room.room_id!r} has no RIR index {idx}")
        out = fir_convolve(out, room.rirs[spec.rir_index_speech])

    if spec.noise_id is not None:
        if noises is None:
            raise DataError(f"noise {spec.noise_id!r} requested but no noise bank loaded")
        noise = noises.compose(spec.noise_id, len(speech), spec.seed)
        _check_rates(speech, noise)
        if room is not None:
            noise = fir_convolve(noise, room.rirs[spec.rir_index_noise])
        out = mix_at_snr(out, noise, mask, spec.snr_db, seed=spec.seed)

    if spec.apply_telephone:
        out = telephone_filter(out)
    return out


# ---------------------------------------------------------------------------
# Drawing specs for training-set variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicaKind:
    name: str
    condition: str
    category: str | None = None
    snr_range: tuple[float, float] | None = None
    noise_count: tuple[int, int] = (1, 1)
    reverb: bool = False


REPLICA_KINDS = {
    "reverb": ReplicaKind("reverb", "reverb", reverb=True),
    "foreground": ReplicaKind("foreground", "noise", "foreground", (0.0, 15.0)),
    "music": ReplicaKind("music", "music", "music", (5.0, 15.0)),
    "babble": ReplicaKind("babble", "babble", "babble", (13.0, 20.0), noise_count=(3, 7)),
    "stationary": ReplicaKind("stationary", "noise", "stationary", (0.0, 20.0)),
}


@dataclass
class SpecDrawer:
    """Draws AugmentSpecs from the noises and rooms of one bank split."""

    noises: NoiseBank | None
    rooms: Mapping[str, RoomModel]
    split: str = "train"
    snr_range: tuple[float, float] = (0.0, 20.0)
    apply_telephone: bool = False

    def _noise_pool(self, category: str | None) -> list[str]:
        if self.noises is None:
            raise DataError("noise conditions requested but no noise bank loaded")
        pool = self.noises.ids(self.split, category)
        if not pool and category is not None:
            log.warning("No %s noises in the %s split, drawing from all categories", category, self.split)
            pool = self.noises.ids(self.split)
        if not pool:
            raise DataError(f"noise bank has no {self.split} noises")
        return pool

    def _room_fields(self, rng: np.random.Generator) -> dict:
        room_ids = sorted(r for r, room in self.rooms.items() if room.split == self.split)
        if not room_ids:
            raise DataError(f"room bank has no {self.split} rooms")
        room = self.rooms[room_ids[int(rng.integers(len(room_ids)))]]
        i, j = rng.choice(len(room.rirs), size=2, replace=False)
        return {"room_id": room.room_id, "rir_index_speech": int(i), "rir_index_noise": int(j)}

    def draw_kind(self, kind: ReplicaKind, rng: np.random.Generator) -> AugmentSpec:
        fields: dict = {"apply_telephone": self.apply_telephone}
        if kind.reverb:
            fields.update(self._room_fields(rng))
        if kind.snr_range is not None:
            pool = self._noise_pool(kind.category)
            lo, hi = kind.noise_count
            count = min(int(rng.integers(lo, hi + 1)), len(pool))
            picks = rng.choice(len(pool), size=count, replace=False)
            fields["noise_id"] = "+".join(pool[int(p)] for p in sorted(picks))
            fields["snr_db"] = float(rng.uniform(*kind.snr_range))
        fields["seed"] = int(rng.integers(0, 2**63))
        return AugmentSpec(**fields)

    def draw(self, condition: str, rng: np.random.Generator) -> AugmentSpec:
        kinds = {
            "noise": ReplicaKind("noise", "noise", None, self.snr_range),
            "reverb": ReplicaKind("reverb", "reverb", reverb=True),
            "noise+reverb": ReplicaKind("noise+reverb", "noise+reverb", None, self.snr_range, reverb=True),
            "music": REPLICA_KINDS["music"],
            "babble": REPLICA_KINDS["babble"],
        }
        if condition not in kinds:
            raise DataError(f"cannot draw a corruption for condition {condition!r}")
        return self.draw_kind(kinds[condition], rng)


def build_multicondition_manifest(
    clean: CorpusManifest,
    fraction: float,
    condition_mix: Mapping[str, float],
    seed: int,
    drawer: SpecDrawer,
) -> CorpusManifest:
    """Clean entries plus floor(fraction*N) corrupted copies drawn without replacement."""
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction must lie in [0, 1], got {fraction}")
    n_add = math.floor(fraction * len(clean) + 1e-9)
    entries = list(clean.entries)
    if n_add == 0:
        return CorpusManifest(entries, clean.root)
    tags = sorted(condition_mix)
    weights = np.array([condition_mix[t] for t in tags], dtype=np.float64)
    if not tags or weights.sum() <= 0 or np.any(weights < 0):
        raise DataError(f"condition mix must have non-negative weights with a positive sum: {dict(condition_mix)}")
    probs = weights / weights.sum()
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(clean), size=n_add, replace=False))
    for idx in picks:
        src = clean.entries[int(idx)]
        tag = tags[int(rng.choice(len(tags), p=probs))]
        spec = drawer.draw(tag, rng)
        utt_id = f"{src.utt_id}-{tag.replace('+', '_')}"
        entries.append(ManifestEntry(utt_id, src.path, src.speaker_id, tag, spec))
    log.info("Multi-condition manifest: %d clean + %d corrupted (%s)", len(clean), n_add, ",".join(tags))
    return CorpusManifest(entries, clean.root)


def utterance_frames(path: Path | str) -> int:
    """Number of 25 ms / 10 ms frames in a WAV file, read from its header."""
    info = sf.info(str(path))
    win = int(round(0.025 * info.samplerate))
    hop = int(round(0.010 * info.samplerate))
    return frame_count(info.frames, win, hop)


def build_replica_manifest(
    clean: CorpusManifest,
    recipe: Sequence[str],
    cap: int,
    seed: int,
    drawer: SpecDrawer,
    frame_counts: Mapping[str, int] | None = None,
    min_utts: int = 6,
    min_frames: int = 500,
) -> CorpusManifest:
    """One replica per kind per utterance, a seeded subset of ``cap``, pooled with clean data."""
    if not recipe:
        raise DataError("replica recipe is empty")
    try:
        kinds = [REPLICA_KINDS[name] for name in recipe]
    except KeyError as e:
        raise DataError(f"unknown replica kind {e.args[0]!r}; choose from {sorted(REPLICA_KINDS)}") from None

    candidates = [(src, kind) for src in clean.entries for kind in kinds]
    rng = np.random.default_rng(seed)
    take = min(max(int(cap), 0), len(candidates))
    chosen = np.sort(rng.choice(len(candidates), size=take, replace=False))
    pooled = list(clean.entries)
    source_of = {e.utt_id: e.utt_id for e in clean.entries}
    for idx in chosen:
        src, kind = candidates[int(idx)]
        spec = drawer.draw_kind(kind, rng)
        utt_id = f"{src.utt_id}-{kind.name}"
        pooled.append(ManifestEntry(utt_id, src.path, src.speaker_id, kind.condition, spec))
        source_of[utt_id] = src.utt_id

    if frame_counts is None:
        frame_counts = {e.utt_id: utterance_frames(clean.resolve(e)) for e in clean.entries}
    long_enough = [e for e in pooled if frame_counts[source_of[e.utt_id]] >= min_frames]
    per_speaker = Counter(e.speaker_id for e in long_enough)
    dropped = sorted(s for s, n in per_speaker.items() if n < min_utts)
    if dropped:
        log.info("Dropping %d speakers with fewer than %d usable utterances", len(dropped), min_utts)
    kept = [e for e in long_enough if per_speaker[e.speaker_id] >= min_utts]
    log.info("Replica manifest: %d clean, %d replicas, %d entries kept", len(clean), take, len(kept))
    return CorpusManifest(kept, clean.root)


# ---------------------------------------------------------------------------
# Materialization
# ---------------------------------------------------------------------------

def materialize(
    manifest: CorpusManifest,
    out_dir: Path | str,
    noises: NoiseBank | None = None,
    rooms: Mapping[str, RoomModel] | None = None,
    workers: int = 1,
) -> CorpusManifest:
    """Render every entry that carries a spec to ``out_dir/wav``; return the resolved manifest."""
    out_dir = Path(out_dir)
    for e in manifest.entries:
        if not manifest.resolve(e).exists():
            raise DataError(f"{e.utt_id}: audio file missing: {manifest.resolve(e)}")

    def _render(e: ManifestEntry) -> ManifestEntry:
        src = os.path.abspath(manifest.resolve(e))
        if e.spec is None:
            return replace(e, path=os.path.relpath(src, os.path.abspath(out_dir)))
        rel = f"wav/{e.utt_id}.wav"
        write_wav(augment_utterance(read_wav(src), e.spec, noises, rooms), out_dir / rel)
        return replace(e, path=rel, spec=None)

    rendered = parallel_map(_render, manifest.entries, workers)
    return CorpusManifest(sorted(rendered, key=lambda e: e.utt_id), out_dir)


# ---------------------------------------------------------------------------
# Bank listings
# ---------------------------------------------------------------------------

def load_noise_bank(listing: Path | str) -> NoiseBank:
    """Read a noise listing: ``<id> <filename> <train|dev> [category]`` per line."""
    listing = Path(listing)
    if not listing.exists():
        raise DataError(f"noise listing not found: {listing}")
    noises, partition, categories = {}, {}, {}
    for lineno, line in enumerate(listing.read_text(encoding="utf-8").splitlines(), 1):
        cols = line.split()
        if not cols or cols[0].startswith("#"):
            continue
        if len(cols) not in (3, 4):
            raise DataError(f"{listing}:{lineno}: expected '<id> <file> <split> [category]'")
        noise_id, filename, split = cols[:3]
        noises[noise_id] = read_wav(listing.parent / filename)
        partition[noise_id] = split
        categories[noise_id] = cols[3] if len(cols) == 4 else "stationary"
    return NoiseBank(noises, partition, categories)


def load_rooms(listing: Path | str) -> dict[str, RoomModel]:
    """Read an RIR listing: ``<room_id> <filename> <train|dev>``; order gives RIR indices."""
    listing = Path(listing)
    if not listing.exists():
        raise DataError(f"RIR listing not found: {listing}")
    rirs: dict[str, list[np.ndarray]] = {}
    rates: dict[str, int] = {}
    splits: dict[str, str] = {}
    for lineno, line in enumerate(listing.read_text(encoding="utf-8").splitlines(), 1):
        cols = line.split()
        if not cols or cols[0].startswith("#"):
            continue
        if len(cols) != 3:
            raise DataError(f"{listing}:{lineno}: expected '<room_id> <file> <split>'")
        room_id, filename, split = cols
        w = read_wav(listing.parent / filename)
        if rates.setdefault(room_id, w.sample_rate) != w.sample_rate:
            raise DataError(f"{listing}:{lineno}: room {room_id!r} mixes sample rates")
        if splits.setdefault(room_id, split) != split:
            raise DataError(f"{listing}:{lineno}: room {room_id!r} listed in both splits")
        rirs.setdefault(room_id, []).append(w.samples)
    return {r: RoomModel(r, rirs[r], rates[r], splits[r]) for r in sorted(rirs)}


# ---------------------------------------------------------------------------
# Synthetic corpus, noises and rooms
# ---------------------------------------------------------------------------

SYNTH_RATE = 8000


def _resonator_cascade(x: np.ndarray, centers: Sequence[float], bandwidths: Sequence[float]) -> np.ndarray:
    for fc, bw in zip(centers, bandwidths):
        r = math.exp(-math.pi * bw / SYNTH_RATE)
        theta = 2.0 * math.pi * fc / SYNTH_RATE
        x = signal.lfilter([1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r], x)
    return x


def _voiced_segments(rng: np.random.Generator, n: int) -> np.ndarray:
    """Syllable-like on/off amplitude envelope with raised-cosine ramps."""
    env = np.zeros(n)
    pos = int(rng.uniform(0.15, 0.4) * SYNTH_RATE)
    tail = int(rng.uniform(0.15, 0.4) * SYNTH_RATE)
    ramp = int(0.02 * SYNTH_RATE)
    while pos < n - tail:
        length = min(int(rng.uniform(0.15, 0.4) * SYNTH_RATE), n - tail - pos)
        if length > 2 * ramp:
            seg = np.ones(length) * rng.uniform(0.6, 1.0)
            edge = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, ramp))
            seg[:ramp] *= edge
            seg[-ramp:] *= edge[::-1]
            env[pos : pos + length] = seg
        pos += length + int(rng.uniform(0.05, 0.3) * SYNTH_RATE)
    return env


def _talker(rng: np.random.Generator, n: int, f0: float, centers, bandwidths) -> np.ndarray:
    t = np.arange(n) / SYNTH_RATE
    contour = f0 * (1.0 + 0.06 * np.sin(2 * math.pi * rng.uniform(0.4, 1.2) * t + rng.uniform(0, 2 * math.pi)))
    phase = np.cumsum(contour / SYNTH_RATE)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = pulses + 0.03 * rng.standard_normal(n)
    voiced = _resonator_cascade(excitation, centers, bandwidths)
    return voiced * _voiced_segments(rng, n)


def _speaker_params(seed: int, index: int) -> tuple[float, np.ndarray, np.ndarray]:
    rng = rng_for(seed, "speaker", index)
    centers = np.sort(rng.uniform(300.0, 3200.0, 3))
    bandwidths = rng.uniform(60.0, 160.0, 3)
    f0 = float(rng.uniform(85.0, 230.0))
    return f0, centers, bandwidths


def _normalize_peak(x: np.ndarray, peak: float = 0.5) -> np.ndarray:
    m = np.max(np.abs(x))
    return x * (peak / m) if m > 0 else x


def synth_corpus(num_speakers: int, utts_per_speaker: int, seed: int, out_dir: Path | str) -> CorpusManifest:
    """Write a deterministic corpus of resonator 'talkers' as 8 kHz WAVs plus corpus.tsv."""
    if num_speakers <= 0 or utts_per_speaker <= 0:
        raise DataError(f"speaker and utterance counts must be positive, got {num_speakers}x{utts_per_speaker}")
    out_dir = Path(out_dir)
    entries = []
    for s in range(num_speakers):
        f0, centers, bandwidths = _speaker_params(seed, s)
        speaker_id = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            rng = rng_for(seed, "utt", s, u)
            n = int(rng.uniform(3.0, 8.0) * SYNTH_RATE)
            jitter = 1.0 + rng.uniform(-0.03, 0.03, 3)
            x = _talker(rng, n, f0 * (1.0 + rng.uniform(-0.05, 0.05)), centers * jitter, bandwidths)
            x = _normalize_peak(x) + 1e-4 * rng.standard_normal(n)
            utt_id = f"{speaker_id}-utt{u:03d}"
            rel = f"wav/{speaker_id}/{utt_id}.wav"
            write_wav(Waveform(x, SYNTH_RATE), out_dir / rel)
            entries.append(ManifestEntry(utt_id, rel, speaker_id, "clean"))
    manifest = CorpusManifest(entries, out_dir)
    manifest.save(out_dir / "corpus.tsv")
    log.info("Synthesized %d speakers x %d utterances into %s", num_speakers, utts_per_speaker, out_dir)
    return manifest


def _synth_noise(category: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if category == "stationary":
        white = rng.standard_normal(n)
        lo, hi = sorted(rng.uniform(100.0, 3800.0, 2))
        if hi - lo < 200.0:
            hi = min(lo + 400.0, 3900.0)
        sos = signal.butter(2, [lo, hi], btype="bandpass", fs=SYNTH_RATE, output="sos")
        return signal.sosfilt(sos, white)
    if category == "music":
        out = np.zeros(n)
        pos = 0
        while pos < n:
            length = min(int(rng.uniform(0.2, 0.6) * SYNTH_RATE), n - pos)
            f = 110.0 * 2 ** (int(rng.integers(0, 36)) / 12.0)
            t = np.arange(length) / SYNTH_RATE
            note = sum(np.sin(2 * math.pi * f * k * t) / k for k in range(1, 5) if f * k < SYNTH_RATE / 2)
            out[pos : pos + length] = note * np.exp(-3.0 * t)
            pos += length
        return out
    if category == "babble":
        out = np.zeros(n)
        for _ in range(4):
            centers = np.sort(rng.uniform(300.0, 3200.0, 3))
            out += _normalize_peak(_talker(rng, n, float(rng.uniform(85.0, 230.0)), centers, rng.uniform(60.0, 160.0, 3)))
        return out
    if category == "foreground":
        bursts = rng.standard_normal(n) * (rng.random(n // 800 + 1) < 0.4).repeat(800)[:n]
        return signal.lfilter([1.0], [1.0, -0.9], bursts)
    raise DataError(f"unknown noise category {category!r}")


def synth_noise_bank(
    out_dir: Path | str, seed: int, per_category: int = 4, duration_s: float = 20.0, babble_noises: int = 8
) -> NoiseBank:
    """Write synthetic noises and ``noises.lst``; the last noise of each category is dev.

    Babble gets ``babble_noises`` entries so the train split can supply a full group of talkers.
    """
    out_dir = Path(out_dir)
    lines = []
    for category in NOISE_CATEGORIES:
        count = babble_noises if category == "babble" else per_category
        for i in range(count):
            rng = rng_for(seed, "noise", category, i)
            x = _normalize_peak(_synth_noise(category, rng, int(duration_s * SYNTH_RATE)))
            noise_id = f"{category}{i:02d}"
            split = "dev" if i == count - 1 and count > 1 else "train"
            write_wav(Waveform(x, SYNTH_RATE), out_dir / f"{noise_id}.wav")
            lines.append(f"{noise_id} {noise_id}.wav {split} {category}")
    write_text_atomic(out_dir / "noises.lst", "\n".join(lines) + "\n")
    return load_noise_bank(out_dir / "noises.lst")


def synth_rooms(out_dir: Path | str, seed: int, num_rooms: int = 6, rirs_per_room: int = 3) -> dict[str, RoomModel]:
    """Write exponentially decaying noise RIRs and ``rirs.lst``; a third of the rooms are dev."""
    out_dir = Path(out_dir)
    n_dev = max(1, num_rooms // 3) if num_rooms > 1 else 0
    lines = []
    for r in range(num_rooms):
        rng = rng_for(seed, "room", r)
        rt60 = float(rng.uniform(0.2, 0.8))
        room_id = f"room{r:02d}"
        split = "dev" if r >= num_rooms - n_dev else "train"
        for k in range(rirs_per_room):
            length = int(rt60 * SYNTH_RATE)
            delay = int(rng.integers(5, 40))
            t = np.arange(length) / SYNTH_RATE
            h = rng.standard_normal(length) * np.exp(-6.908 * t / rt60) * rng.uniform(0.2, 0.5)
            h[:delay] = 0.0
            h[delay] = 1.0
            name = f"{room_id}_{k}.wav"
            write_wav(Waveform(h / np.max(np.abs(h)), SYNTH_RATE), out_dir / name)
            lines.append(f"{room_id} {name} {split}")
    write_text_atomic(out_dir / "rirs.lst", "\n".join(lines) + "\n")
    return load_rooms(out_dir / "rirs.lst")

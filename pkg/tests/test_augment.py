"""Tests for augment.py: specs, SNR mixing, manifests, spec drawing and materialization."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from audio import Waveform, energy_vad, fir_convolve, read_wav, write_wav
from augment import (
    REPLICA_KINDS, SNR_CAP_DB, AugmentSpec, CorpusManifest, ManifestEntry, NoiseBank, RoomModel, SpecDrawer,
    augment_utterance, build_multicondition_manifest, build_replica_manifest, fit_noise, load_noise_bank,
    load_rooms, materialize, measure_snr, mix_at_snr, snr_gain, synth_corpus, synth_noise_bank, synth_rooms,
)
from utils import DataError

SR = 8000


def speech_like(seconds: float = 2.0, seed: int = 0) -> Waveform:
    """Tone bursts separated by silence."""
    n = int(seconds * SR)
    t = np.arange(n) / SR
    env = ((t % 0.5) < 0.3).astype(float)
    rng = np.random.default_rng(seed)
    return Waveform(0.1 * env * np.sin(2 * np.pi * (300 + 50 * rng.random()) * t), SR)


def white(n: int, seed: int = 1, amp: float = 0.01) -> Waveform:
    return Waveform(amp * np.random.default_rng(seed).standard_normal(n), SR)


@pytest.fixture
def noises():
    return NoiseBank(
        {"hum": white(3000, 1), "music0": white(SR, 2), "babble0": white(SR, 3), "babble1": white(SR, 4),
         "devnoise": white(SR, 5)},
        {"hum": "train", "music0": "train", "babble0": "train", "babble1": "train", "devnoise": "dev"},
        {"hum": "stationary", "music0": "music", "babble0": "babble", "babble1": "babble", "devnoise": "stationary"},
    )


@pytest.fixture
def rooms():
    delta = np.zeros(40)
    delta[0] = 1.0
    decay = np.exp(-np.arange(400) / 80.0) * np.random.default_rng(9).standard_normal(400)
    return {
        "roomA": RoomModel("roomA", [delta, decay, decay[::-1].copy()], SR, "train"),
        "roomB": RoomModel("roomB", [decay, delta], SR, "dev"),
    }


@pytest.fixture
def corpus(tmp_path):
    entries = []
    for s in range(3):
        for u in range(4):
            utt = f"spk{s}-u{u}"
            write_wav(speech_like(1.0, seed=10 * s + u), tmp_path / "wav" / f"{utt}.wav")
            entries.append(ManifestEntry(utt, f"wav/{utt}.wav", f"spk{s}"))
    return CorpusManifest(entries, tmp_path)


# ---------------------------------------------------------------------------
# AugmentSpec
# ---------------------------------------------------------------------------

class TestAugmentSpec:
    def test_noise_needs_snr(self):
        with pytest.raises(DataError, match="SNR"):
            AugmentSpec(noise_id="hum")

    def test_room_needs_distinct_indices(self):
        with pytest.raises(DataError, match="differ"):
            AugmentSpec(room_id="roomA", rir_index_speech=1, rir_index_noise=1)

    def test_room_needs_both_indices(self):
        with pytest.raises(DataError):
            AugmentSpec(room_id="roomA", rir_index_speech=0)

    def test_seed_range(self):
        with pytest.raises(DataError):
            AugmentSpec(seed=-1)
        with pytest.raises(DataError):
            AugmentSpec(seed=2**64)

    def test_encoding(self):
        spec = AugmentSpec(5.0, "hum", "roomA", 0, 2, True, 42)
        assert spec.encode() == "snr=5.0;noise=hum;room=roomA;rir=0,2;tel=1;seed=42"
        assert AugmentSpec.decode(spec.encode()) == spec

    def test_decode_rejects_unknown_key(self):
        with pytest.raises(DataError, match="unknown"):
            AugmentSpec.decode("snr=5;gain=3")

    def test_decode_rejects_malformed(self):
        with pytest.raises(DataError, match="malformed"):
            AugmentSpec.decode("snr")


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

class TestFitNoise:
    def test_crop(self):
        noise = Waveform(np.arange(100, dtype=float), SR)
        fitted = fit_noise(noise, 30, seed=3)
        assert len(fitted) == 30
        np.testing.assert_array_equal(np.diff(fitted.samples), 1.0)

    def test_tile(self):
        noise = Waveform(np.arange(10, dtype=float), SR)
        fitted = fit_noise(noise, 25, seed=1)
        assert len(fitted) == 25
        np.testing.assert_array_equal(fitted.samples[10:20], fitted.samples[:10])

    def test_deterministic(self):
        noise = white(1000)
        np.testing.assert_array_equal(fit_noise(noise, 300, 5).samples, fit_noise(noise, 300, 5).samples)


class TestSnrMixing:
    @pytest.mark.parametrize("snr", [0.0, 5.0, 17.5])
    def test_hits_target_snr(self, snr):
        speech = speech_like()
        noise = white(3000)
        mask = energy_vad(speech)
        mixed = mix_at_snr(speech, noise, mask, snr, seed=4)
        added = speech.with_samples(mixed.samples - speech.samples)
        assert measure_snr(speech, added, mask) == pytest.approx(snr, abs=1e-6)

    def test_snr_cap(self):
        speech = speech_like()
        noise = white(SR)
        mask = energy_vad(speech)
        assert snr_gain(speech, noise, mask, 250.0) == pytest.approx(snr_gain(speech, noise, mask, SNR_CAP_DB))

    def test_no_active_frames(self):
        speech = Waveform(np.zeros(SR), SR)
        with pytest.raises(DataError, match="active"):
            snr_gain(speech, white(SR), energy_vad(speech), 5.0)

    def test_zero_noise(self):
        speech = speech_like()
        with pytest.raises(DataError, match="zero energy"):
            snr_gain(speech, Waveform(np.zeros(SR), SR), energy_vad(speech), 5.0)

    def test_mixed_rates(self):
        speech = speech_like()
        with pytest.raises(DataError, match="sample rates"):
            snr_gain(speech, Waveform(np.ones(100), 16000), energy_vad(speech), 5.0)

    def test_peak_limited(self):
        speech = speech_like()
        loud = Waveform(0.9 * np.sign(np.random.default_rng(0).standard_normal(SR)), SR)
        mixed = mix_at_snr(speech, loud, energy_vad(speech), -20.0)
        assert np.max(np.abs(mixed.samples)) < 1.0

    def test_random_specs_measured_against_reverberated_signals(self, tmp_path):
        bank = synth_noise_bank(tmp_path / "n", 5, per_category=2, duration_s=2.0)
        room_bank = synth_rooms(tmp_path / "r", 6, num_rooms=4, rirs_per_room=3)
        train_rooms = sorted(r for r, m in room_bank.items() if m.split == "train")
        singles = bank.ids("train", "stationary") + bank.ids("train", "music")
        babble = bank.ids("train", "babble")
        rng = np.random.default_rng(2024)
        for i in range(100):
            speech = speech_like(1.5, seed=i)
            if rng.random() < 0.5:
                picks = rng.choice(len(babble), size=int(rng.integers(3, 8)), replace=False)
                noise_id = "+".join(babble[int(p)] for p in sorted(picks))
            else:
                noise_id = singles[int(rng.integers(len(singles)))]
            room = train_rooms[int(rng.integers(len(train_rooms)))] if rng.random() < 0.8 else None
            i_s, i_n = (int(x) for x in rng.choice(3, size=2, replace=False))
            spec = AugmentSpec(
                snr_db=float(rng.uniform(-5.0, 20.0)), noise_id=noise_id, room_id=room,
                rir_index_speech=i_s if room else None, rir_index_noise=i_n if room else None,
                seed=int(rng.integers(0, 2**63)),
            )
            out = augment_utterance(speech, spec, bank, room_bank).samples

            wet, noise = speech, bank.compose(noise_id, len(speech), spec.seed)
            if room:
                wet = fir_convolve(speech, room_bank[room].rirs[i_s])
                noise = fir_convolve(noise, room_bank[room].rirs[i_n])
            # out = c * (wet + g * noise), c < 1 only when the mix was peak-limited
            (a, b), *_ = np.linalg.lstsq(np.stack([wet.samples, noise.samples], axis=1), out, rcond=None)
            got = measure_snr(wet.with_samples(a * wet.samples), noise.with_samples(b * noise.samples),
                              energy_vad(speech))
            assert got == pytest.approx(spec.snr_db, abs=0.1), spec.encode()


class TestAugmentUtterance:
    def test_empty_spec_is_identity(self):
        speech = speech_like()
        np.testing.assert_array_equal(augment_utterance(speech, AugmentSpec()).samples, speech.samples)

    def test_delta_rir_is_identity(self, rooms):
        speech = speech_like()
        spec = AugmentSpec(room_id="roomA", rir_index_speech=0, rir_index_noise=1)
        np.testing.assert_allclose(augment_utterance(speech, spec, rooms=rooms).samples, speech.samples, atol=1e-12)

    def test_deterministic(self, noises, rooms):
        speech = speech_like()
        spec = AugmentSpec(5.0, "hum", "roomA", 1, 2, True, 11)
        a = augment_utterance(speech, spec, noises, rooms)
        b = augment_utterance(speech, spec, noises, rooms)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == len(speech)

    def test_babble_group(self, noises):
        speech = speech_like()
        out = augment_utterance(speech, AugmentSpec(15.0, "babble0+babble1", seed=2), noises)
        assert not np.allclose(out.samples, speech.samples)

    def test_unknown_room(self, rooms):
        spec = AugmentSpec(room_id="nowhere", rir_index_speech=0, rir_index_noise=1)
        with pytest.raises(DataError, match="unknown room"):
            augment_utterance(speech_like(), spec, rooms=rooms)

    def test_rir_index_out_of_range(self, rooms):
        spec = AugmentSpec(room_id="roomB", rir_index_speech=0, rir_index_noise=5)
        with pytest.raises(DataError, match="RIR index"):
            augment_utterance(speech_like(), spec, rooms=rooms)

    def test_unknown_noise(self, noises):
        with pytest.raises(DataError, match="unknown noise"):
            augment_utterance(speech_like(), AugmentSpec(5.0, "nope"), noises)

    def test_noise_without_bank(self):
        with pytest.raises(DataError, match="no noise bank"):
            augment_utterance(speech_like(), AugmentSpec(5.0, "hum"))


# ---------------------------------------------------------------------------
# Banks and manifests
# ---------------------------------------------------------------------------

class TestBanks:
    def test_room_needs_two_rirs(self):
        with pytest.raises(DataError, match="at least 2"):
            RoomModel("r", [np.ones(3)], SR)

    def test_noise_split_required(self):
        with pytest.raises(DataError, match="train or dev"):
            NoiseBank({"a": white(10)}, {"a": "test"})

    def test_ids_filter(self, noises):
        assert noises.ids("train", "babble") == ["babble0", "babble1"]
        assert noises.ids("dev") == ["devnoise"]

    def test_listing_roundtrip(self, tmp_path):
        write_wav(white(SR), tmp_path / "n.wav")
        (tmp_path / "noises.lst").write_text("# comment\nn1 n.wav train music\nn2 n.wav dev\n")
        bank = load_noise_bank(tmp_path / "noises.lst")
        assert bank.partition == {"n1": "train", "n2": "dev"}
        assert bank.categories["n2"] == "stationary"

    def test_listing_bad_line(self, tmp_path):
        (tmp_path / "noises.lst").write_text("n1 n.wav\n")
        with pytest.raises(DataError, match="expected"):
            load_noise_bank(tmp_path / "noises.lst")

    def test_room_listing(self, tmp_path):
        for k in range(2):
            write_wav(white(200, k, 0.5), tmp_path / f"r{k}.wav")
        (tmp_path / "rirs.lst").write_text("roomX r0.wav dev\nroomX r1.wav dev\n")
        rooms = load_rooms(tmp_path / "rirs.lst")
        assert list(rooms) == ["roomX"]
        assert rooms["roomX"].split == "dev"
        assert len(rooms["roomX"].rirs) == 2

    def test_room_listing_split_conflict(self, tmp_path):
        for k in range(2):
            write_wav(white(200, k, 0.5), tmp_path / f"r{k}.wav")
        (tmp_path / "rirs.lst").write_text("roomX r0.wav dev\nroomX r1.wav train\n")
        with pytest.raises(DataError, match="both splits"):
            load_rooms(tmp_path / "rirs.lst")


class TestManifest:
    def test_duplicate_ids(self):
        e = ManifestEntry("u1", "a.wav", "s1")
        with pytest.raises(DataError, match="duplicate"):
            CorpusManifest([e, e])

    def test_unknown_condition(self):
        with pytest.raises(DataError, match="condition"):
            ManifestEntry("u1", "a.wav", "s1", "underwater")

    def test_save_sorted_and_relative(self, tmp_path):
        m = CorpusManifest(
            [ManifestEntry("b", "wav/b.wav", "s1"), ManifestEntry("a", "wav/a.wav", "s2", "noise",
                                                                  AugmentSpec(3.0, "hum", seed=1))],
            tmp_path / "data",
        )
        path = m.save(tmp_path / "lists" / "m.tsv")
        lines = path.read_text().splitlines()
        assert lines[0].split("\t")[:4] == ["a", "../data/wav/a.wav", "s2", "noise"]
        assert lines[1] == "b\t../data/wav/b.wav\ts1\tclean"
        back = CorpusManifest.load(path)
        assert back.resolve(back.by_id()["a"]).resolve() == (tmp_path / "data" / "wav" / "a.wav").resolve()
        assert back.by_id()["a"].spec == AugmentSpec(3.0, "hum", seed=1)

    def test_load_bad_columns(self, tmp_path):
        (tmp_path / "m.tsv").write_text("u1\ta.wav\n")
        with pytest.raises(DataError, match="columns"):
            CorpusManifest.load(tmp_path / "m.tsv")

    def test_speakers(self, corpus):
        assert corpus.speakers() == ["spk0", "spk1", "spk2"]


# ---------------------------------------------------------------------------
# Spec drawing
# ---------------------------------------------------------------------------

class TestSpecDrawer:
    def test_noise_reverb_uses_split(self, noises, rooms):
        drawer = SpecDrawer(noises, rooms, "dev", (5.0, 5.0))
        spec = drawer.draw("noise+reverb", np.random.default_rng(0))
        assert spec.room_id == "roomB"
        assert spec.noise_id == "devnoise"
        assert spec.snr_db == 5.0
        assert spec.rir_index_speech != spec.rir_index_noise

    def test_reverb_has_no_noise(self, noises, rooms):
        spec = SpecDrawer(noises, rooms).draw("reverb", np.random.default_rng(1))
        assert spec.noise_id is None
        assert spec.room_id == "roomA"

    def test_snr_within_range(self, noises, rooms):
        drawer = SpecDrawer(noises, rooms, "train", (2.0, 4.0))
        rng = np.random.default_rng(2)
        for _ in range(20):
            assert 2.0 <= drawer.draw("noise", rng).snr_db <= 4.0

    def test_babble_joins_several_noises(self, noises, rooms):
        spec = SpecDrawer(noises, rooms).draw("babble", np.random.default_rng(3))
        assert spec.noise_id == "babble0+babble1"
        assert 13.0 <= spec.snr_db <= 20.0

    def test_missing_category_falls_back(self, noises, rooms, caplog):
        drawer = SpecDrawer(noises, rooms, "dev")
        with caplog.at_level(logging.WARNING, logger="augment"):
            spec = drawer.draw("music", np.random.default_rng(4))
        assert spec.noise_id == "devnoise"
        assert "No music noises" in caplog.text

    def test_unknown_condition(self, noises, rooms):
        with pytest.raises(DataError):
            SpecDrawer(noises, rooms).draw("clean", np.random.default_rng(0))

    def test_no_rooms_in_split(self, noises):
        with pytest.raises(DataError, match="no dev rooms"):
            SpecDrawer(noises, {}, "dev").draw("reverb", np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Manifest builders
# ---------------------------------------------------------------------------

class TestMulticondition:
    def test_adds_floor_fraction(self, corpus, noises, rooms):
        drawer = SpecDrawer(noises, rooms)
        m = build_multicondition_manifest(corpus, 0.3, {"noise": 1.0, "reverb": 1.0}, 7, drawer)
        added = [e for e in m.entries if e.spec is not None]
        assert len(m) == 12 + 3
        assert len(added) == 3
        for e in added:
            assert e.condition in ("noise", "reverb")
            assert e.utt_id == f"{e.utt_id.rsplit('-', 1)[0]}-{e.condition}"

    def test_noise_reverb_id_suffix(self, corpus, noises, rooms):
        m = build_multicondition_manifest(corpus, 0.5, {"noise+reverb": 1.0}, 1, SpecDrawer(noises, rooms))
        assert all(e.utt_id.endswith("-noise_reverb") for e in m.entries if e.spec is not None)

    def test_deterministic(self, corpus, noises, rooms):
        mix = {"noise": 1.0, "reverb": 1.0, "noise+reverb": 1.0}
        a = build_multicondition_manifest(corpus, 0.5, mix, 3, SpecDrawer(noises, rooms))
        b = build_multicondition_manifest(corpus, 0.5, mix, 3, SpecDrawer(noises, rooms))
        assert a.entries == b.entries

    def test_zero_fraction(self, corpus, noises, rooms):
        assert len(build_multicondition_manifest(corpus, 0.0, {"noise": 1.0}, 0, SpecDrawer(noises, rooms))) == 12

    def test_bad_fraction(self, corpus, noises, rooms):
        with pytest.raises(DataError):
            build_multicondition_manifest(corpus, 1.5, {"noise": 1.0}, 0, SpecDrawer(noises, rooms))


class TestReplicaManifest:
    def test_cap_and_naming(self, corpus, noises, rooms):
        counts = {e.utt_id: 600 for e in corpus.entries}
        m = build_replica_manifest(corpus, ["reverb", "babble"], 5, 1, SpecDrawer(noises, rooms), counts, min_utts=1)
        replicas = [e for e in m.entries if e.spec is not None]
        assert len(replicas) == 5
        assert all(e.utt_id.rsplit("-", 1)[1] in ("reverb", "babble") for e in replicas)

    def test_short_utterances_dropped(self, corpus, noises, rooms):
        counts = {e.utt_id: (100 if e.speaker_id == "spk0" else 600) for e in corpus.entries}
        m = build_replica_manifest(corpus, ["reverb"], 12, 2, SpecDrawer(noises, rooms), counts, min_utts=1)
        assert "spk0" not in m.speakers()
        assert len(m) == 16

    def test_thin_speakers_dropped(self, corpus, noises, rooms):
        counts = {e.utt_id: 600 for e in corpus.entries}
        m = build_replica_manifest(corpus, ["reverb"], 0, 2, SpecDrawer(noises, rooms), counts, min_utts=6)
        assert len(m) == 0

    def test_unknown_kind(self, corpus, noises, rooms):
        with pytest.raises(DataError, match="unknown replica kind"):
            build_replica_manifest(corpus, ["thunder"], 3, 0, SpecDrawer(noises, rooms), {})


class TestMaterialize:
    def test_renders_specs(self, corpus, noises, rooms, tmp_path):
        m = build_multicondition_manifest(corpus, 0.25, {"noise+reverb": 1.0}, 5, SpecDrawer(noises, rooms))
        out = materialize(m, tmp_path / "out", noises, rooms, workers=2)
        assert len(out) == 15
        assert all(e.spec is None for e in out.entries)
        assert [e.utt_id for e in out.entries] == sorted(e.utt_id for e in out.entries)
        for e in out.entries:
            wave = read_wav(out.resolve(e))
            assert wave.sample_rate == SR
            if e.condition != "clean":
                assert e.path == f"wav/{e.utt_id}.wav"

    def test_missing_audio(self, tmp_path):
        m = CorpusManifest([ManifestEntry("u", "missing.wav", "s")], tmp_path)
        with pytest.raises(DataError, match="missing"):
            materialize(m, tmp_path / "out")


class TestSynthetic:
    def test_corpus_layout(self, tmp_path):
        m = synth_corpus(2, 2, 5, tmp_path)
        assert [e.utt_id for e in m.entries] == ["spk000-utt000", "spk000-utt001", "spk001-utt000", "spk001-utt001"]
        assert (tmp_path / "corpus.tsv").exists()
        w = read_wav(m.resolve(m.entries[0]))
        assert w.sample_rate == SR
        assert 3.0 <= w.duration <= 8.0
        assert energy_vad(w).num_active > 0

    def test_corpus_deterministic(self, tmp_path):
        a = synth_corpus(1, 1, 9, tmp_path / "a")
        b = synth_corpus(1, 1, 9, tmp_path / "b")
        assert a.resolve(a.entries[0]).read_bytes() == b.resolve(b.entries[0]).read_bytes()

    def test_banks(self, tmp_path):
        bank = synth_noise_bank(tmp_path / "n", 3, per_category=2, duration_s=1.0)
        assert len(bank.ids()) == 3 * 2 + 8
        assert len(bank.ids("dev")) == 4
        assert len(bank.ids("train", "babble")) == 7
        rooms = synth_rooms(tmp_path / "r", 3, num_rooms=3, rirs_per_room=2)
        assert sorted(r.split for r in rooms.values()) == ["dev", "train", "train"]

    def test_babble_bank_fills_largest_talker_group(self, tmp_path):
        bank = synth_noise_bank(tmp_path / "n", 3, per_category=2, duration_s=0.5)
        drawer = SpecDrawer(bank, {}, "train")
        rng = np.random.default_rng(8)
        counts = {len(drawer.draw_kind(REPLICA_KINDS["babble"], rng).noise_id.split("+")) for _ in range(200)}
        assert counts == {3, 4, 5, 6, 7}

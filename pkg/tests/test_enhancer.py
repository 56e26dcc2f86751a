"""Tests for enhancer.py: context stacking, AE arithmetic, training loop, inference, persistence."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from audio import Waveform, energy_vad, log_magnitude, read_wav, stft
from augment import mix_at_snr, synth_corpus, synth_noise_bank
from enhancer import (
    AEConfig, TrainPair, context_index, enhance_log_magnitude, enhance_utterance, forward, init_model, load_model,
    loss_and_gradients, make_training_pairs, resynthesize, save_model, split_dev, stack_context, stft_config_for,
    train,
)
from store import save_container
from utils import DataError

SR = 8000
TINY = AEConfig(context=1, bins=3, hidden_sizes=(4,))


def random_pairs(n_utts: int, frames: int, bins: int, seed: int = 0) -> list[TrainPair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_utts):
        clean = rng.standard_normal((frames, bins))
        mean, std = clean.mean(axis=0), clean.std(axis=0)
        pairs.append(TrainPair((clean - mean) / std, clean, mean, std))
    return pairs


def voice(seconds: float = 0.5, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * SR)) / SR
    return Waveform(0.3 * np.sin(2 * np.pi * 440 * t) + 0.01 * rng.standard_normal(t.size), SR)


class TestConfig:
    def test_input_dim(self):
        assert AEConfig().input_dim == 31 * 129

    def test_rejects_bad_sizes(self):
        with pytest.raises(DataError):
            AEConfig(hidden_sizes=())
        with pytest.raises(DataError):
            AEConfig(context=-1)

    def test_stft_config_for_8k(self):
        scfg = stft_config_for(AEConfig(), SR)
        assert (scfg.window_length, scfg.hop, scfg.fft_size, scfg.bins) == (200, 80, 256, 129)


class TestContext:
    def test_edges_replicated(self):
        idx = context_index(4, 2)
        np.testing.assert_array_equal(idx[0], [0, 0, 0, 1, 2])
        np.testing.assert_array_equal(idx[3], [1, 2, 3, 3, 3])

    def test_stack_layout(self):
        rows = np.arange(8, dtype=float).reshape(4, 2)
        stacked = stack_context(rows, 1)
        assert stacked.shape == (4, 6)
        np.testing.assert_array_equal(stacked[1], [0, 1, 2, 3, 4, 5])

    def test_zero_context(self):
        rows = np.arange(6, dtype=float).reshape(3, 2)
        np.testing.assert_array_equal(stack_context(rows, 0), rows)


class TestModelArithmetic:
    def test_init_deterministic(self):
        a, b = init_model(TINY, 5), init_model(TINY, 5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_init_glorot_and_zero_bias(self):
        m = init_model(TINY, 1)
        for layer in m.layers:
            fan_out, fan_in = layer.weight.shape
            assert float(layer.weight.abs().max()) <= math.sqrt(6.0 / (fan_in + fan_out))
            assert float(layer.bias.abs().max()) == 0.0
            assert layer.weight.dtype == torch.float64

    def test_forward_shape(self):
        out = forward(init_model(TINY), np.zeros((5, TINY.input_dim)))
        assert out.shape == (5, 3)

    def test_forward_rejects_wrong_width(self):
        with pytest.raises(DataError):
            forward(init_model(TINY), np.zeros((5, 4)))

    def test_zero_loss_on_exact_output(self):
        m = init_model(TINY)
        target = np.array([[0.5, -1.0, 2.0]])
        with torch.no_grad():
            m.layers[-1].weight.zero_()
            m.layers[-1].bias.copy_(torch.from_numpy(target[0]))
        loss, grads = loss_and_gradients(m, np.ones((1, TINY.input_dim)), target)
        assert loss == pytest.approx(0.0)
        np.testing.assert_allclose(grads["layers.1.bias"], 0.0)

    @pytest.mark.parametrize("cfg", [
        AEConfig(context=0, bins=2, hidden_sizes=(3,)),
        AEConfig(context=0, bins=4, hidden_sizes=(5, 2)),
        AEConfig(context=0, bins=3, hidden_sizes=(7, 1, 3)),
        AEConfig(context=1, bins=2, hidden_sizes=(4,)),
        AEConfig(context=1, bins=3, hidden_sizes=(2,)),
        AEConfig(context=1, bins=3, hidden_sizes=(3, 5)),
        AEConfig(context=1, bins=4, hidden_sizes=(6, 2, 4)),
        AEConfig(context=2, bins=2, hidden_sizes=(5,)),
        AEConfig(context=2, bins=3, hidden_sizes=(4, 4)),
        AEConfig(context=2, bins=4, hidden_sizes=(3, 6, 2)),
    ], ids=lambda c: f"c{c.context}-b{c.bins}-h{'x'.join(map(str, c.hidden_sizes))}")
    def test_gradients_match_finite_differences(self, cfg):
        m = init_model(cfg, 3)
        rng = np.random.default_rng(cfg.input_dim)
        with torch.no_grad():
            for layer in m.layers:
                layer.bias.copy_(torch.from_numpy(rng.normal(0.0, 0.3, layer.bias.shape)))
        x = rng.standard_normal((7, cfg.input_dim))
        y = rng.standard_normal((7, cfg.bins))
        _, grads = loss_and_gradients(m, x, y)

        def loss() -> float:
            return float(np.mean((forward(m, x) - y) ** 2))

        eps = 1e-5
        for name, p in m.named_parameters():
            flat = p.data.view(-1)
            numeric = np.zeros(flat.numel())
            for k in range(flat.numel()):
                flat[k] += eps
                up = loss()
                flat[k] -= 2 * eps
                down = loss()
                flat[k] += eps
                numeric[k] = (up - down) / (2 * eps)
            np.testing.assert_allclose(grads[name].reshape(-1), numeric, rtol=1e-4, atol=1e-9, err_msg=name)
        assert set(grads) == {name for name, _ in m.named_parameters()}

    def test_target_shape_checked(self):
        with pytest.raises(DataError, match="targets"):
            loss_and_gradients(init_model(TINY), np.zeros((2, TINY.input_dim)), np.zeros((2, 4)))


class TestTrainingPairs:
    def test_identical_audio(self):
        w = voice()
        pair = make_training_pairs(w, w)
        assert pair.noisy.shape == (48, 129)
        np.testing.assert_allclose(pair.noisy, pair.targets(), atol=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(DataError, match="length"):
            make_training_pairs(voice(0.5), voice(0.4))

    def test_rate_mismatch(self):
        with pytest.raises(DataError, match="rate"):
            make_training_pairs(voice(), Waveform(voice().samples, 16000))


class TestSplitDev:
    def test_single_utterance(self):
        assert split_dev(1, 0.1, 0) == ([0], [0])

    def test_at_least_one_each(self):
        tr, dev = split_dev(3, 0.01, 0)
        assert len(dev) == 1 and len(tr) == 2
        tr, dev = split_dev(3, 0.99, 0)
        assert len(dev) == 2 and len(tr) == 1

    def test_partition(self):
        tr, dev = split_dev(20, 0.25, 4)
        assert sorted(tr + dev) == list(range(20))
        assert len(dev) == 5


class TestTrain:
    def test_history_length(self):
        _, history = train(init_model(TINY), random_pairs(4, 20, 3), batch_size=8, epochs=3)
        assert [h["epoch"] for h in history] == [0, 1, 2, 3]

    def test_zero_learning_rate_keeps_weights(self):
        m = init_model(TINY, 2)
        trained, history = train(m, random_pairs(3, 10, 3), learning_rate=0.0, batch_size=4, epochs=2)
        for pa, pb in zip(m.parameters(), trained.parameters()):
            assert torch.equal(pa, pb)
        assert history[-1]["dev_loss"] == pytest.approx(history[0]["dev_loss"])

    def test_input_model_untouched(self):
        m = init_model(TINY, 2)
        before = [p.clone() for p in m.parameters()]
        train(m, random_pairs(3, 10, 3), learning_rate=0.1, batch_size=4, epochs=1)
        for pa, pb in zip(before, m.parameters()):
            assert torch.equal(pa, pb)

    def test_deterministic(self):
        pairs = random_pairs(4, 15, 3, seed=1)
        a, ha = train(init_model(TINY, 7), pairs, batch_size=5, epochs=2, seed=11)
        b, hb = train(init_model(TINY, 7), pairs, batch_size=5, epochs=2, seed=11)
        assert ha == hb
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_learns_identity(self):
        cfg = AEConfig(context=0, bins=4, hidden_sizes=(16,))
        _, history = train(
            init_model(cfg, 0), random_pairs(10, 40, 4, seed=2),
            learning_rate=0.05, momentum=0.9, batch_size=32, epochs=30, dev_fraction=0.2, seed=1,
        )
        assert history[-1]["dev_loss"] < 0.5 * history[0]["dev_loss"]

    def test_out_stats_from_dev_clean(self):
        pairs = random_pairs(1, 30, 3, seed=3)
        trained, _ = train(init_model(TINY), pairs, batch_size=8, epochs=1)
        np.testing.assert_allclose(trained.out_mean.numpy(), pairs[0].clean.mean(axis=0))
        np.testing.assert_allclose(trained.out_std.numpy(), np.sqrt(pairs[0].clean.var(axis=0) + 1e-8))

    def test_rejects_bad_hyperparameters(self):
        pairs = random_pairs(2, 5, 3)
        with pytest.raises(DataError):
            train(init_model(TINY), pairs, batch_size=0)
        with pytest.raises(DataError):
            train(init_model(TINY), pairs, epochs=0)
        with pytest.raises(DataError):
            train(init_model(TINY), pairs, learning_rate=-1.0)

    def test_rejects_empty(self):
        with pytest.raises(DataError, match="empty"):
            train(init_model(TINY), [])

    def test_rejects_wrong_bins(self):
        with pytest.raises(DataError, match="bins"):
            train(init_model(TINY), random_pairs(2, 5, 4))


class TestInference:
    def test_resynthesis_with_original_magnitudes(self):
        w = voice()
        spec = stft(w, stft_config_for(AEConfig(), SR))
        back = resynthesize(spec, log_magnitude(spec).rows, len(w))
        assert len(back) == len(w)
        np.testing.assert_allclose(back.samples[200:3700], w.samples[200:3700], atol=1e-8)

    def test_resynthesis_shape_check(self):
        spec = stft(voice(), stft_config_for(AEConfig(), SR))
        with pytest.raises(DataError):
            resynthesize(spec, np.zeros((3, 3)))

    def test_enhance_keeps_length(self):
        m = init_model(AEConfig(context=1, bins=129, hidden_sizes=(8,)), 0)
        w = voice(0.3)
        out = enhance_utterance(m, w)
        assert len(out) == len(w)
        assert out.sample_rate == SR

    def test_enhance_too_short(self):
        m = init_model(AEConfig(context=1, bins=129, hidden_sizes=(8,)), 0)
        with pytest.raises(DataError, match="too short"):
            enhance_utterance(m, Waveform(np.ones(50), SR))


class TestPersistence:
    def test_save_load_same_outputs(self, tmp_path):
        trained, _ = train(init_model(TINY, 4), random_pairs(3, 10, 3), batch_size=4, epochs=1)
        back = load_model(save_model(trained, tmp_path / "ae.svkm"))
        x = np.random.default_rng(0).standard_normal((4, TINY.input_dim))
        np.testing.assert_array_equal(forward(back, x), forward(trained, x))
        np.testing.assert_array_equal(back.out_std.numpy(), trained.out_std.numpy())
        assert back.train_meta["epochs"] == 1

    def test_wrong_container(self, tmp_path):
        path = save_container(tmp_path / "x.svkm", "PLDA", {}, {})
        with pytest.raises(DataError, match="expected a AE model"):
            load_model(path)


# ---------------------------------------------------------------------------
# Enhancement quality
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestEnhancementQuality:
    def noisy_clean(self, corpus, bank, seed: int) -> list[tuple[Waveform, Waveform]]:
        rng = np.random.default_rng(seed)
        stationary = bank.ids("train", "stationary")
        pairs = []
        for e in corpus.entries:
            clean = read_wav(corpus.resolve(e))
            noise = bank.get(stationary[int(rng.integers(len(stationary)))])
            noisy = mix_at_snr(clean, noise, energy_vad(clean), float(rng.uniform(0.0, 10.0)),
                               seed=int(rng.integers(0, 2**63)))
            pairs.append((noisy, clean))
        return pairs

    def test_held_out_log_spectral_error_drops(self, tmp_path):
        cfg = AEConfig(context=2, bins=129, hidden_sizes=(256, 256))
        bank = synth_noise_bank(tmp_path / "noises", 31, per_category=4, duration_s=10.0)
        train_set = self.noisy_clean(synth_corpus(6, 4, 32, tmp_path / "train"), bank, 33)
        held_out = self.noisy_clean(synth_corpus(3, 3, 34, tmp_path / "held-out"), bank, 35)

        pairs = [make_training_pairs(noisy, clean, cfg) for noisy, clean in train_set]
        model, _ = train(init_model(cfg, 36), pairs, learning_rate=0.01, momentum=0.9, batch_size=128,
                         epochs=20, seed=37)

        scfg = stft_config_for(cfg, SR)
        before, after = [], []
        for noisy, clean in held_out:
            target = log_magnitude(stft(clean, scfg)).rows
            before.append(np.mean((log_magnitude(stft(noisy, scfg)).rows - target) ** 2))
            after.append(np.mean((enhance_log_magnitude(model, noisy)[1] - target) ** 2))
        assert np.mean(after) <= 0.7 * np.mean(before)

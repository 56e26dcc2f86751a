"""Denoising autoencoder on context-stacked log-magnitude spectra.

Inputs are normalized with each noisy utterance's own statistics. Training
targets are normalized with the clean utterance's statistics; at inference
the model's global out_mean/out_std (estimated on the dev split) map
predictions back to log-magnitudes, which are recombined with the noisy
phase.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from audio import (
    LOG_FLOOR, VAR_FLOOR, ComplexSpectrogram, StftConfig, Waveform, istft, log_magnitude, stft,
)
from store import load_container, save_container
from utils import DataError, NumericError, rng_for

log = logging.getLogger(__name__)

MODEL_TAG = "AE"
PLATEAU_THRESHOLD = 1e-4


@dataclass(frozen=True)
class AEConfig:
    context: int = 15
    bins: int = 129
    hidden_sizes: tuple[int, ...] = (1500, 1500, 1500)

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.context < 0 or self.bins <= 0:
            raise DataError(f"AE context must be >= 0 and bins > 0, got {self.context}/{self.bins}")
        if not self.hidden_sizes or min(self.hidden_sizes) <= 0:
            raise DataError(f"AE hidden_sizes must be a non-empty list of positive sizes, got {self.hidden_sizes}")

    @property
    def input_dim(self) -> int:
        return (2 * self.context + 1) * self.bins


class AEModel(nn.Module):
    """tanh hidden layers, linear output; predictions live in the normalized target domain."""

    def __init__(self, config: AEConfig):
        super().__init__()
        self.config = config
        sizes = [config.input_dim, *config.hidden_sizes, config.bins]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.register_buffer("out_mean", torch.zeros(config.bins, dtype=torch.float64))
        self.register_buffer("out_std", torch.ones(config.bins, dtype=torch.float64))
        self.train_meta: dict = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


@dataclass(frozen=True, eq=False)
class TrainPair:
    """One utterance: normalized noisy rows and raw clean rows, frame-aligned (T x bins)."""

    noisy: np.ndarray
    clean: np.ndarray
    clean_mean: np.ndarray
    clean_std: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.noisy.shape[0]

    def targets(self) -> np.ndarray:
        return (self.clean - self.clean_mean) / self.clean_std


TrainPairSet = list[TrainPair]


# ---------------------------------------------------------------------------
# Framing helpers
# ---------------------------------------------------------------------------

def stft_config_for(cfg: AEConfig, sample_rate: int) -> StftConfig:
    """25 ms / 10 ms Hamming analysis with an FFT size giving ``cfg.bins`` bins."""
    return StftConfig(
        window_length=int(round(0.025 * sample_rate)),
        hop=int(round(0.010 * sample_rate)),
        fft_size=2 * (cfg.bins - 1),
        window_shape="hamming",
    )


def utterance_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return rows.mean(axis=0), np.sqrt(rows.var(axis=0) + VAR_FLOOR)


def context_index(num_frames: int, context: int) -> np.ndarray:
    """(T, 2c+1) frame indices, offsets -c..c, edges replicated."""
    offsets = np.arange(-context, context + 1)
    return np.clip(np.arange(num_frames)[:, None] + offsets[None, :], 0, num_frames - 1)


def stack_context(rows: np.ndarray, context: int) -> np.ndarray:
    idx = context_index(rows.shape[0], context)
    return rows[idx].reshape(rows.shape[0], -1)


def _log_spectrum(w: Waveform, cfg: AEConfig) -> tuple[ComplexSpectrogram, np.ndarray]:
    spec = stft(w, stft_config_for(cfg, w.sample_rate))
    return spec, log_magnitude(spec).rows


# ---------------------------------------------------------------------------
# Model construction and arithmetic
# ---------------------------------------------------------------------------

def make_training_pairs(noisy: Waveform, clean: Waveform, cfg: AEConfig = AEConfig()) -> TrainPair:
    if len(noisy) != len(clean):
        raise DataError(f"noisy/clean length mismatch: {len(noisy)} vs {len(clean)} samples")
    if noisy.sample_rate != clean.sample_rate:
        raise DataError(f"noisy/clean sample rate mismatch: {noisy.sample_rate} vs {clean.sample_rate}")
    _, noisy_rows = _log_spectrum(noisy, cfg)
    _, clean_rows = _log_spectrum(clean, cfg)
    if noisy_rows.shape[0] < 1:
        raise DataError("utterance is shorter than one analysis frame")
    mean, std = utterance_stats(noisy_rows)
    clean_mean, clean_std = utterance_stats(clean_rows)
    return TrainPair((noisy_rows - mean) / std, clean_rows, clean_mean, clean_std)


def init_model(cfg: AEConfig = AEConfig(), seed: int = 0) -> AEModel:
    model = AEModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in model.layers:
            fan_out, fan_in = layer.weight.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.zero_()
    model.train_meta = {"seed": int(seed)}
    return model


def forward(m: AEModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != m.config.input_dim:
        raise DataError(f"AE input needs {m.config.input_dim} columns, got shape {batch.shape}")
    with torch.no_grad():
        return m(torch.from_numpy(batch)).numpy()


def loss_and_gradients(m: AEModel, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MSE over rows and bins, with gradients keyed by parameter name."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != m.config.input_dim:
        raise DataError(f"AE input needs {m.config.input_dim} columns, got shape {inputs.shape}")
    if targets.shape != (inputs.shape[0], m.config.bins):
        raise DataError(f"AE targets need shape {(inputs.shape[0], m.config.bins)}, got {targets.shape}")
    m.zero_grad(set_to_none=True)
    loss = nn.functional.mse_loss(m(torch.from_numpy(inputs)), torch.from_numpy(targets))
    loss.backward()
    grads = {name: p.grad.detach().numpy().copy() for name, p in m.named_parameters()}
    m.zero_grad(set_to_none=True)
    return float(loss.item()), grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _FramePool:
    """Concatenated utterances; batches gather their context windows lazily."""

    def __init__(self, pairs: TrainPairSet, context: int):
        self.inputs = np.concatenate([p.noisy for p in pairs])
        self.targets = np.concatenate([p.targets() for p in pairs])
        self.clean = np.concatenate([p.clean for p in pairs])
        lengths = np.array([p.num_frames for p in pairs])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.start = np.repeat(starts, lengths)
        self.length = np.repeat(lengths, lengths)
        self.local = np.arange(len(self.start)) - self.start
        self.offsets = np.arange(-context, context + 1)

    def __len__(self) -> int:
        return len(self.start)

    def batch(self, frames: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        local = np.clip(self.local[frames, None] + self.offsets[None, :], 0, self.length[frames, None] - 1)
        x = self.inputs[self.start[frames, None] + local].reshape(len(frames), -1)
        return torch.from_numpy(x), torch.from_numpy(self.targets[frames])


def _mean_loss(m: AEModel, pool: _FramePool, batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for lo in range(0, len(pool), batch_size):
            x, y = pool.batch(np.arange(lo, min(lo + batch_size, len(pool))))
            total += float(nn.functional.mse_loss(m(x), y, reduction="sum"))
    return total / (len(pool) * m.config.bins)


def split_dev(num_utts: int, dev_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Per-utterance train/dev split; a single utterance serves as both."""
    if num_utts == 1:
        return [0], [0]
    order = rng_for(seed, "ae-dev-split").permutation(num_utts)
    n_dev = min(max(1, int(round(dev_fraction * num_utts))), num_utts - 1)
    return sorted(order[n_dev:].tolist()), sorted(order[:n_dev].tolist())


def train(
    m: AEModel,
    data: TrainPairSet,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 256,
    epochs: int = 20,
    dev_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[AEModel, list[dict]]:
    """Minibatch SGD with momentum and plateau halving; returns a trained copy and the loss history.

    history[0] holds the losses of the untrained model.
    """
    if not data:
        raise DataError("enhancer training set is empty")
    if learning_rate < 0 or batch_size <= 0 or epochs <= 0 or not 0 <= momentum < 1:
        raise DataError(
            f"invalid AE hyperparameters: lr={learning_rate} momentum={momentum} "
            f"batch_size={batch_size} epochs={epochs}"
        )
    for p in data:
        if p.noisy.shape != p.clean.shape or p.noisy.shape[1] != m.config.bins:
            raise DataError(f"training pair shape {p.noisy.shape}/{p.clean.shape} does not fit {m.config.bins} bins")

    model = copy.deepcopy(m)
    train_idx, dev_idx = split_dev(len(data), dev_fraction, seed)
    train_pool = _FramePool([data[i] for i in train_idx], model.config.context)
    dev_pool = _FramePool([data[i] for i in dev_idx], model.config.context)
    log.info(
        "Training AE on %d frames (%d utts), dev %d frames (%d utts)",
        len(train_pool), len(train_idx), len(dev_pool), len(dev_idx),
    )

    opt = torch.optim.SGD(model.parameters(), lr=learning_rate, momentum=momentum)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=0.5, patience=0, threshold=PLATEAU_THRESHOLD, threshold_mode="rel"
    )
    history = [{
        "epoch": 0,
        "train_loss": _mean_loss(model, train_pool, batch_size),
        "dev_loss": _mean_loss(model, dev_pool, batch_size),
        "lr": learning_rate,
    }]
    for epoch in range(1, epochs + 1):
        order = rng_for(seed, "ae-epoch", epoch).permutation(len(train_pool))
        running, seen = 0.0, 0
        for lo in range(0, len(order), batch_size):
            frames = order[lo : lo + batch_size]
            x, y = train_pool.batch(frames)
            opt.zero_grad(set_to_none=True)
            loss = nn.functional.mse_loss(model(x), y)
            if not torch.isfinite(loss):
                raise NumericError(f"AE loss diverged at epoch {epoch}; lower the learning rate")
            loss.backward()
            opt.step()
            running += float(loss) * len(frames)
            seen += len(frames)
        dev_loss = _mean_loss(model, dev_pool, batch_size)
        history.append({
            "epoch": epoch,
            "train_loss": running / seen,
            "dev_loss": dev_loss,
            "lr": opt.param_groups[0]["lr"],
        })
        log.info("AE epoch %d: train %.5f dev %.5f lr %g", epoch, running / seen, dev_loss, opt.param_groups[0]["lr"])
        sched.step(dev_loss)

    mean, std = utterance_stats(dev_pool.clean)
    with torch.no_grad():
        model.out_mean.copy_(torch.from_numpy(mean))
        model.out_std.copy_(torch.from_numpy(std))
    model.train_meta = {
        "seed": int(seed),
        "epochs": epochs,
        "final_train_loss": history[-1]["train_loss"],
        "final_dev_loss": history[-1]["dev_loss"],
    }
    log.info("AE training done: dev loss %.5f -> %.5f", history[0]["dev_loss"], history[-1]["dev_loss"])
    return model, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def resynthesize(spec: ComplexSpectrogram, logmag: np.ndarray, length: int | None = None) -> Waveform:
    """Combine log-magnitudes with the phase of ``spec`` and overlap-add back to samples."""
    if logmag.shape != spec.frames.shape:
        raise DataError(f"log-magnitude shape {logmag.shape} does not match spectrogram {spec.frames.shape}")
    magnitude = np.maximum(np.exp(logmag) - LOG_FLOOR, 0.0)
    frames = magnitude * np.exp(1j * np.angle(spec.frames))
    out = istft(ComplexSpectrogram(frames, spec.config, spec.sample_rate)).samples
    if length is not None:
        out = out[:length] if out.size >= length else np.pad(out, (0, length - out.size))
    return Waveform(out, spec.sample_rate)


def enhance_log_magnitude(m: AEModel, w: Waveform) -> tuple[ComplexSpectrogram, np.ndarray]:
    """Noisy spectrogram of ``w`` and the network's (T, bins) clean log-magnitude estimate."""
    cfg = m.config
    scfg = stft_config_for(cfg, w.sample_rate)
    if len(w) < scfg.window_length:
        raise DataError(f"utterance of {len(w)} samples is too short to enhance")
    spec, rows = _log_spectrum(w, cfg)
    mean, std = utterance_stats(rows)
    predicted = forward(m, stack_context((rows - mean) / std, cfg.context))
    return spec, predicted * m.out_std.numpy() + m.out_mean.numpy()


def enhance_utterance(m: AEModel, w: Waveform) -> Waveform:
    spec, logmag = enhance_log_magnitude(m, w)
    return resynthesize(spec, logmag, len(w))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(m: AEModel, path: Path | str) -> Path:
    meta = {
        "context": m.config.context,
        "bins": m.config.bins,
        "hidden_sizes": list(m.config.hidden_sizes),
        "train_meta": m.train_meta,
    }
    arrays: dict[str, np.ndarray] = {}
    for i, layer in enumerate(m.layers):
        arrays[f"w{i}"] = layer.weight.detach().numpy()
        arrays[f"b{i}"] = layer.bias.detach().numpy()
    arrays["out_mean"] = m.out_mean.numpy()
    arrays["out_std"] = m.out_std.numpy()
    return save_container(path, MODEL_TAG, meta, arrays)


def load_model(path: Path | str) -> AEModel:
    _, meta, arrays = load_container(path, MODEL_TAG)
    cfg = AEConfig(meta["context"], meta["bins"], tuple(meta["hidden_sizes"]))
    model = AEModel(cfg)
    with torch.no_grad():
        try:
            for i, layer in enumerate(model.layers):
                layer.weight.copy_(torch.from_numpy(arrays[f"w{i}"]))
                layer.bias.copy_(torch.from_numpy(arrays[f"b{i}"]))
            model.out_mean.copy_(torch.from_numpy(arrays["out_mean"]))
            model.out_std.copy_(torch.from_numpy(arrays["out_std"]))
        except (KeyError, RuntimeError) as e:
            raise DataError(f"{path}: AE container does not match its config: {e}") from e
    if np.any(arrays["out_std"] <= 0):
        raise DataError(f"{path}: AE out_std must be positive")
    model.train_meta = meta.get("train_meta", {})
    return model

"""TDNN x-vector network with mean+std statistics pooling, trained with cross entropy."""

from __future__ import annotations

import copy
import logging
import math
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from audio import FeatureMatrix
from store import load_container, save_container
from utils import DataError, NumericError, rng_for

log = logging.getLogger(__name__)

MODEL_TAG = "XVEC"
POOL_EPSILON = 1e-10
MIN_TRAIN_FRAMES = 500

DEFAULT_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


@dataclass(frozen=True)
class XVectorConfig:
    input_dim: int = 23
    num_speakers: int = 2
    frame_sizes: tuple[int, ...] = (64, 64, 64, 64, 128)
    contexts: tuple[tuple[int, ...], ...] = DEFAULT_CONTEXTS
    segment_sizes: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_sizes", tuple(int(s) for s in self.frame_sizes))
        object.__setattr__(self, "contexts", tuple(tuple(int(o) for o in c) for c in self.contexts))
        object.__setattr__(self, "segment_sizes", tuple(int(s) for s in self.segment_sizes))
        if len(self.frame_sizes) != len(self.contexts) or not self.frame_sizes:
            raise DataError(f"{len(self.frame_sizes)} frame layer sizes but {len(self.contexts)} contexts")
        if any(not c for c in self.contexts):
            raise DataError("every TDNN layer needs at least one context offset")
        if len(self.segment_sizes) != 2:
            raise DataError(f"x-vector needs two segment layers, got {self.segment_sizes}")
        if min(self.frame_sizes + self.segment_sizes) <= 0 or self.input_dim <= 0 or self.num_speakers < 2:
            raise DataError("x-vector sizes must be positive and num_speakers >= 2")

    @property
    def min_frames(self) -> int:
        return 1 + sum(max(c) - min(c) for c in self.contexts)

    @property
    def embedding_dim(self) -> int:
        return self.segment_sizes[0]


class TdnnLayer(nn.Module):
    """Affine map over spliced frames at fixed offsets; edges replicate the first/last frame."""

    def __init__(self, in_dim: int, out_dim: int, offsets: tuple[int, ...]):
        super().__init__()
        self.register_buffer("offsets", torch.tensor(offsets, dtype=torch.long), persistent=False)
        self.linear = nn.Linear(in_dim * len(offsets), out_dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, frames, _ = x.shape
        idx = (torch.arange(frames)[:, None] + self.offsets[None, :]).clamp(0, frames - 1)
        spliced = x[:, idx, :].reshape(batch, frames, -1)
        return torch.relu(self.linear(spliced))


def stats_pool(h: torch.Tensor) -> torch.Tensor:
    """Concatenate per-dimension mean and sqrt(var + eps) over the frame axis (dim -2)."""
    mean = h.mean(dim=-2)
    var = ((h - mean.unsqueeze(-2)) ** 2).mean(dim=-2)
    return torch.cat([mean, torch.sqrt(var + POOL_EPSILON)], dim=-1)


class XVectorModel(nn.Module):
    def __init__(self, config: XVectorConfig):
        super().__init__()
        self.config = config
        dims = [config.input_dim, *config.frame_sizes]
        self.frame_layers = nn.ModuleList(
            TdnnLayer(a, b, c) for a, b, c in zip(dims[:-1], dims[1:], config.contexts)
        )
        s1, s2 = config.segment_sizes
        self.segment1 = nn.Linear(2 * config.frame_sizes[-1], s1, dtype=torch.float64)
        self.segment2 = nn.Linear(s1, s2, dtype=torch.float64)
        self.output = nn.Linear(s2, config.num_speakers, dtype=torch.float64)
        self.speakers: list[str] = []
        self.train_meta: dict = {}

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(batch, frames, dim) -> (embeddings, class log-probabilities)."""
        for layer in self.frame_layers:
            x = layer(x)
        embedding = self.segment1(stats_pool(x))
        hidden = torch.relu(self.segment2(torch.relu(embedding)))
        return embedding, torch.log_softmax(self.output(hidden), dim=-1)


def init_xvector(cfg: XVectorConfig, seed: int = 0) -> XVectorModel:
    model = XVectorModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                fan_out, fan_in = module.weight.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
    return model


def _check_frames(m: XVectorModel, rows: np.ndarray) -> None:
    if rows.ndim < 2 or rows.shape[-1] != m.config.input_dim:
        raise DataError(f"x-vector input needs {m.config.input_dim} columns, got shape {rows.shape}")
    if rows.shape[-2] < m.config.min_frames:
        raise DataError(f"x-vector needs at least {m.config.min_frames} frames, got {rows.shape[-2]}")


def xvector_forward(m: XVectorModel, f: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    _check_frames(m, f.rows)
    with torch.no_grad():
        emb, logp = m(torch.from_numpy(f.rows)[None])
    return emb[0].numpy(), logp[0].numpy()


def extract_xvector(m: XVectorModel, f: FeatureMatrix) -> np.ndarray:
    return xvector_forward(m, f)[0]


def xvector_loss_and_gradients(
    m: XVectorModel, chunks: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross entropy over a (batch, frames, dim) array of equal-length chunks."""
    chunks = np.asarray(chunks, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_frames(m, chunks)
    if chunks.ndim != 3 or labels.shape != (chunks.shape[0],):
        raise DataError(f"need (batch, frames, dim) chunks with one label each, got {chunks.shape}/{labels.shape}")
    if labels.min() < 0 or labels.max() >= m.config.num_speakers:
        raise DataError(f"labels must lie in [0, {m.config.num_speakers}), got range {labels.min()}..{labels.max()}")
    m.zero_grad(set_to_none=True)
    _, logp = m(torch.from_numpy(chunks))
    loss = nn.functional.nll_loss(logp, torch.from_numpy(labels))
    loss.backward()
    grads = {name: p.grad.detach().numpy().copy() for name, p in m.named_parameters()}
    m.zero_grad(set_to_none=True)
    return float(loss.item()), grads


@dataclass
class XVectorHyper:
    chunk_range: tuple[int, int] = (200, 400)
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    chunks_per_utt: int = 1
    min_frames: int = MIN_TRAIN_FRAMES

    def __post_init__(self) -> None:
        lo, hi = self.chunk_range
        if not 0 < lo <= hi or self.batch_size <= 0 or self.epochs <= 0 or self.chunks_per_utt <= 0:
            raise DataError(f"invalid x-vector hyperparameters: {self}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise DataError(f"invalid x-vector optimizer settings: lr={self.learning_rate} momentum={self.momentum}")


def train_xvector(
    m: XVectorModel,
    features: Mapping[str, FeatureMatrix],
    speakers: Mapping[str, str],
    hyper: XVectorHyper = XVectorHyper(),
    seed: int = 0,
) -> tuple[XVectorModel, list[dict]]:
    """Chunked cross-entropy training; ``speakers`` maps utterance id to speaker id."""
    usable = sorted(u for u, f in features.items() if f.num_frames >= hyper.min_frames)
    excluded = len(features) - len(usable)
    if excluded:
        log.info("Excluding %d utterances shorter than %d frames", excluded, hyper.min_frames)
    per_speaker = Counter(speakers[u] for u in usable)
    if len(per_speaker) < 3 or min(per_speaker.values()) < 2:
        raise DataError(
            f"x-vector training needs >= 3 speakers with >= 2 utterances each, got {dict(per_speaker)}"
        )
    speaker_list = sorted(per_speaker)
    if m.config.num_speakers != len(speaker_list):
        raise DataError(f"model has {m.config.num_speakers} outputs but data has {len(speaker_list)} speakers")
    label_of = {s: i for i, s in enumerate(speaker_list)}
    lo, hi = hyper.chunk_range
    hi = min(hi, min(features[u].num_frames for u in usable))
    lo = min(lo, hi)
    if lo < m.config.min_frames:
        raise DataError(f"chunk length {lo} is below the network's context of {m.config.min_frames} frames")

    model = copy.deepcopy(m)
    model.speakers = speaker_list
    opt = torch.optim.SGD(model.parameters(), lr=hyper.learning_rate, momentum=hyper.momentum)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=0.5, patience=0, threshold=1e-4, threshold_mode="rel"
    )
    examples = np.repeat(np.arange(len(usable)), hyper.chunks_per_utt)
    history = []
    for epoch in range(1, hyper.epochs + 1):
        rng = rng_for(seed, "xvector-epoch", epoch)
        order = examples[rng.permutation(len(examples))]
        total, correct = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            length = int(rng.integers(lo, hi + 1))
            chunks = np.empty((len(batch), length, model.config.input_dim))
            for i, u in enumerate(batch):
                rows = features[usable[u]].rows
                offset = int(rng.integers(0, rows.shape[0] - length + 1))
                chunks[i] = rows[offset : offset + length]
            labels = torch.tensor([label_of[speakers[usable[u]]] for u in batch], dtype=torch.long)
            opt.zero_grad(set_to_none=True)
            _, logp = model(torch.from_numpy(chunks))
            loss = nn.functional.nll_loss(logp, labels)
            if not torch.isfinite(loss):
                raise NumericError(f"x-vector loss diverged at epoch {epoch}; lower the learning rate")
            loss.backward()
            opt.step()
            total += float(loss) * len(batch)
            correct += int((logp.argmax(dim=1) == labels).sum())
        mean_loss = total / len(order)
        history.append({
            "epoch": epoch,
            "loss": mean_loss,
            "accuracy": correct / len(order),
            "lr": opt.param_groups[0]["lr"],
        })
        log.info("x-vector epoch %d: loss %.4f acc %.3f", epoch, mean_loss, correct / len(order))
        sched.step(mean_loss)
    model.train_meta = {"seed": int(seed), "epochs": hyper.epochs, "final_loss": history[-1]["loss"],
                        "final_accuracy": history[-1]["accuracy"]}
    log.info("x-vector training done: %d speakers, final accuracy %.3f", len(speaker_list), history[-1]["accuracy"])
    return model, history


def save_xvector(m: XVectorModel, path: Path | str) -> Path:
    cfg = m.config
    meta = {
        "input_dim": cfg.input_dim,
        "num_speakers": cfg.num_speakers,
        "frame_sizes": list(cfg.frame_sizes),
        "contexts": [list(c) for c in cfg.contexts],
        "segment_sizes": list(cfg.segment_sizes),
        "speakers": m.speakers,
        "train_meta": m.train_meta,
    }
    arrays = {name: p.detach().numpy() for name, p in m.named_parameters()}
    return save_container(path, MODEL_TAG, meta, arrays)


def load_xvector(path: Path | str) -> XVectorModel:
    _, meta, arrays = load_container(path, MODEL_TAG)
    cfg = XVectorConfig(
        meta["input_dim"], meta["num_speakers"], tuple(meta["frame_sizes"]),
        tuple(tuple(c) for c in meta["contexts"]), tuple(meta["segment_sizes"]),
    )
    model = XVectorModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays or arrays[name].shape != tuple(p.shape):
                raise DataError(f"{path}: parameter {name} missing or misshapen")
            p.copy_(torch.from_numpy(arrays[name]))
    model.speakers = list(meta.get("speakers", []))
    model.train_meta = meta.get("train_meta", {})
    return model

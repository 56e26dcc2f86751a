"""GMM-UBM, Baum-Welch statistics, total-variability i-vectors, LDA and length normalization."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from audio import FeatureMatrix, FrameMask
from store import load_container, save_container
from utils import DataError, NumericError, rng_for

log = logging.getLogger(__name__)

VARIANCE_FLOOR_FACTOR = 0.01
TV_RIDGE = 1e-8
LDA_RIDGE = 1e-8
MIN_NORM = 1e-12
E_STEP_CHUNK = 4096
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# UBM
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GmmUbm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.weights.size:
            raise DataError(
                f"UBM shapes disagree: weights {self.weights.shape}, means {self.means.shape}, "
                f"variances {self.variances.shape}"
            )
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataError("UBM weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise DataError("UBM variances must be positive")

    @property
    def num_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_gaussians(self, x: np.ndarray) -> np.ndarray:
        """(T, K) weighted log densities ``log w_k + log N(x_t; mu_k, diag var_k)``."""
        inv = 1.0 / self.variances
        const = (
            np.log(self.weights)
            - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))
            - 0.5 * (self.means**2 * inv).sum(axis=1)
        )
        return const[None, :] + x @ (self.means * inv).T - 0.5 * (x**2) @ inv.T

    def posteriors(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Responsibilities (T, K) and per-frame log-likelihoods (T,)."""
        lg = self.log_gaussians(x)
        ll = logsumexp(lg, axis=1)
        return np.exp(lg - ll[:, None]), ll


def _stack_features(features: Sequence[FeatureMatrix]) -> np.ndarray:
    if not features:
        raise DataError("no feature matrices given")
    dims = {f.dim for f in features}
    if len(dims) != 1:
        raise DataError(f"feature matrices disagree on dimension: {sorted(dims)}")
    return np.concatenate([f.rows for f in features])


def _e_step(ubm: GmmUbm, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    k, d = ubm.means.shape
    n, f, s, total = np.zeros(k), np.zeros((k, d)), np.zeros((k, d)), 0.0
    for lo in range(0, len(x), E_STEP_CHUNK):
        chunk = x[lo : lo + E_STEP_CHUNK]
        gamma, ll = ubm.posteriors(chunk)
        n += gamma.sum(axis=0)
        f += gamma.T @ chunk
        s += gamma.T @ chunk**2
        total += float(ll.sum())
    return n, f, s, total


def train_ubm(features: Sequence[FeatureMatrix], num_components: int = 64, iters: int = 10, seed: int = 0) -> GmmUbm:
    """k-means++ initialization, then diagonal-covariance EM with variance flooring."""
    x = _stack_features(features)
    k = int(num_components)
    if k <= 0 or iters <= 0:
        raise DataError(f"UBM needs positive component and iteration counts, got {k}/{iters}")
    if len(x) < 10 * k:
        raise DataError(f"UBM with {k} components needs at least {10 * k} frames, got {len(x)}")
    floor = VARIANCE_FLOOR_FACTOR * x.var(axis=0)
    floor = np.maximum(floor, 1e-12)

    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=20, random_state=int(seed) % 2**32)
    labels = km.fit_predict(x)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    means = km.cluster_centers_.astype(np.float64)
    variances = np.empty_like(means)
    for c in range(k):
        members = x[labels == c]
        variances[c] = members.var(axis=0) if len(members) > 1 else x.var(axis=0)
    counts = np.maximum(counts, 1.0)
    ubm = GmmUbm(counts / counts.sum(), means, np.maximum(variances, floor))

    history = []
    for it in range(iters):
        n, f, s, total = _e_step(ubm, x)
        history.append(total)
        occ = np.maximum(n, 1e-10)
        means = f / occ[:, None]
        variances = np.maximum(s / occ[:, None] - means**2, floor)
        weights = occ / occ.sum()
        ubm = GmmUbm(weights, means, variances)
        log.info("UBM iter %d: avg log-likelihood %.4f", it + 1, total / len(x))
    history.append(_e_step(ubm, x)[3])
    ubm.log_likelihoods = history
    log.info("Trained %d-component UBM on %d frames (avg LL %.4f)", k, len(x), history[-1] / len(x))
    return ubm


# ---------------------------------------------------------------------------
# Sufficient statistics
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SuffStats:
    n: np.ndarray
    f: np.ndarray

    def centered(self, ubm: GmmUbm) -> np.ndarray:
        return self.f - self.n[:, None] * ubm.means


def accumulate_stats(ubm: GmmUbm, f: FeatureMatrix, mask: FrameMask | None = None) -> SuffStats:
    if f.dim != ubm.dim:
        raise DataError(f"feature dim {f.dim} does not match UBM dim {ubm.dim}")
    x = f.select(mask).rows if mask is not None else f.rows
    if len(x) == 0:
        return SuffStats(np.zeros(ubm.num_components), np.zeros((ubm.num_components, ubm.dim)))
    n, first, _, _ = _e_step(ubm, x)
    return SuffStats(n, first)


# ---------------------------------------------------------------------------
# Total variability
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class IVectorExtractor:
    t_matrix: np.ndarray
    ubm: GmmUbm
    objectives: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        kd = self.ubm.num_components * self.ubm.dim
        if self.t_matrix.ndim != 2 or self.t_matrix.shape[0] != kd:
            raise DataError(f"T matrix needs {kd} rows, got shape {self.t_matrix.shape}")
        if self.rank > kd:
            raise DataError(f"i-vector dim {self.rank} exceeds K*D = {kd}")

    @property
    def rank(self) -> int:
        return self.t_matrix.shape[1]

    def _blocks(self) -> np.ndarray:
        return self.t_matrix.reshape(self.ubm.num_components, self.ubm.dim, self.rank)

    def gram(self) -> np.ndarray:
        """Per-component ``T_k^T Sigma_k^-1 T_k``, shape (K, R, R)."""
        t = self._blocks()
        return np.einsum("kdr,kd,kds->krs", t, 1.0 / self.ubm.variances, t)

    def posterior(self, s: SuffStats, gram: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posterior mean, covariance and the linear term ``b = T^T Sigma^-1 f``."""
        k, d = self.ubm.means.shape
        if s.n.shape != (k,) or s.f.shape != (k, d):
            raise DataError(f"stats shapes {s.n.shape}/{s.f.shape} do not match UBM ({k}, {d})")
        gram = self.gram() if gram is None else gram
        precision = np.eye(self.rank) + np.einsum("k,krs->rs", s.n, gram)
        b = self.t_matrix.T @ (s.centered(self.ubm) / self.ubm.variances).reshape(-1)
        try:
            cho = linalg.cho_factor(precision)
        except linalg.LinAlgError as e:
            raise NumericError(f"i-vector posterior precision is not positive definite: {e}") from e
        cov = linalg.cho_solve(cho, np.eye(self.rank))
        return cov @ b, cov, b


def extract_ivector(ext: IVectorExtractor, s: SuffStats) -> np.ndarray:
    return ext.posterior(s)[0]


def train_tv(
    stats: Sequence[SuffStats],
    ubm: GmmUbm,
    rank: int = 50,
    iters: int = 10,
    seed: int = 0,
) -> IVectorExtractor:
    """EM for the total-variability matrix; records the marginal objective per iteration."""
    if len(stats) < rank:
        raise DataError(f"T-matrix rank {rank} needs at least {rank} utterances, got {len(stats)}")
    if iters <= 0:
        raise DataError(f"TV iterations must be positive, got {iters}")
    k, d = ubm.means.shape
    rng = rng_for(seed, "tv-init")
    scale = np.sqrt(ubm.variances).reshape(-1, 1)
    ext = IVectorExtractor(0.5 * rng.standard_normal((k * d, rank)) * scale, ubm)

    objectives = []
    for it in range(iters):
        gram = ext.gram()
        acc_c = np.zeros((k * d, rank))
        acc_a = np.zeros((k, rank, rank))
        objective = 0.0
        for s in stats:
            mean, cov, b = ext.posterior(s, gram)
            second = cov + np.outer(mean, mean)
            acc_c += np.outer(s.centered(ubm).reshape(-1), mean)
            acc_a += s.n[:, None, None] * second[None, :, :]
            _, logdet = np.linalg.slogdet(np.eye(rank) + np.einsum("k,krs->rs", s.n, gram))
            objective += 0.5 * float(b @ mean) - 0.5 * logdet
        objectives.append(objective)
        blocks = acc_c.reshape(k, d, rank)
        new_t = np.empty_like(blocks)
        for c in range(k):
            try:
                cho = linalg.cho_factor(acc_a[c] + TV_RIDGE * np.eye(rank))
            except linalg.LinAlgError as e:
                raise NumericError(f"TV accumulator for component {c} is singular: {e}") from e
            new_t[c] = linalg.cho_solve(cho, blocks[c].T).T
        ext = IVectorExtractor(new_t.reshape(k * d, rank), ubm)
        log.info("TV iter %d: objective %.4f", it + 1, objective)

    gram = ext.gram()
    final = 0.0
    for s in stats:
        mean, _, b = ext.posterior(s, gram)
        _, logdet = np.linalg.slogdet(np.eye(rank) + np.einsum("k,krs->rs", s.n, gram))
        final += 0.5 * float(b @ mean) - 0.5 * logdet
    objectives.append(final)
    ext.objectives = objectives
    log.info("Trained rank-%d T matrix on %d utterances", rank, len(stats))
    return ext


# ---------------------------------------------------------------------------
# LDA and length normalization
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LdaProjection:
    matrix: np.ndarray
    global_mean: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[1]


def train_lda(vectors: np.ndarray, labels: Sequence[str], out_dim: int) -> LdaProjection:
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise DataError(f"{len(x)} vectors but {len(labels)} labels")
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DataError("LDA needs at least 2 speakers")
    if not 0 < out_dim <= min(x.shape[1], len(classes) - 1):
        raise DataError(
            f"LDA output dim {out_dim} must lie in [1, min(dim={x.shape[1]}, speakers-1={len(classes) - 1})]"
        )
    mu = x.mean(axis=0)
    dim = x.shape[1]
    sw = np.zeros((dim, dim))
    sb = np.zeros((dim, dim))
    for c in classes:
        members = x[labels == c]
        mc = members.mean(axis=0)
        centered = members - mc
        sw += centered.T @ centered
        sb += len(members) * np.outer(mc - mu, mc - mu)
    sw /= len(x)
    sb /= len(x)
    ridge = LDA_RIDGE * (np.trace(sw) / dim if np.trace(sw) > 0 else 1.0)
    _, vecs = linalg.eigh(sb, sw + ridge * np.eye(dim))
    matrix = vecs[:, ::-1][:, :out_dim]
    signs = np.sign(matrix[np.argmax(np.abs(matrix), axis=0), np.arange(out_dim)])
    signs[signs == 0] = 1.0
    return LdaProjection(matrix * signs, mu)


def length_norm(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm < MIN_NORM:
        raise NumericError(f"cannot length-normalize a vector of norm {norm:.3g}")
    return v / norm


def project_and_norm(p: LdaProjection, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != p.global_mean.shape:
        raise DataError(f"vector dim {v.shape} does not match LDA input dim {p.global_mean.shape}")
    return length_norm(p.matrix.T @ (v - p.global_mean))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _ubm_arrays(ubm: GmmUbm) -> dict[str, np.ndarray]:
    return {"weights": ubm.weights, "means": ubm.means, "variances": ubm.variances}


def save_ubm(ubm: GmmUbm, path: Path | str) -> Path:
    return save_container(path, "UBM", {"log_likelihoods": ubm.log_likelihoods}, _ubm_arrays(ubm))


def load_ubm(path: Path | str) -> GmmUbm:
    _, meta, a = load_container(path, "UBM")
    return GmmUbm(a["weights"], a["means"], a["variances"], meta.get("log_likelihoods", []))


def save_tv(ext: IVectorExtractor, path: Path | str) -> Path:
    arrays = {"t_matrix": ext.t_matrix, **_ubm_arrays(ext.ubm)}
    return save_container(path, "TV", {"rank": ext.rank, "objectives": ext.objectives}, arrays)


def load_tv(path: Path | str) -> IVectorExtractor:
    _, meta, a = load_container(path, "TV")
    ubm = GmmUbm(a["weights"], a["means"], a["variances"])
    return IVectorExtractor(a["t_matrix"], ubm, meta.get("objectives", []))


def save_lda(p: LdaProjection, path: Path | str) -> Path:
    return save_container(path, "LDA", {"out_dim": p.out_dim}, {"matrix": p.matrix, "global_mean": p.global_mean})


def load_lda(path: Path | str) -> LdaProjection:
    _, _, a = load_container(path, "LDA")
    return LdaProjection(a["matrix"], a["global_mean"])

"""Simplified PLDA (speaker subspace + full residual covariance), trial lists and score files."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import linalg

from ivector import length_norm
from store import load_container, save_container
from utils import DataError, NumericError, parallel_map, write_text_atomic

log = logging.getLogger(__name__)

SIGMA_RIDGE = 1e-8
KEYS = ("target", "nontarget", "unknown")
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _LlrTerms:
    quad: np.ndarray
    cross: np.ndarray
    const: float


@dataclass(eq=False)
class PldaModel:
    mu: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        e = self.mu.size
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.v.ndim == 1:
            self.v = self.v.reshape(e, 1)
        if self.v.ndim != 2 or self.v.shape[0] != e:
            raise DataError(f"PLDA speaker matrix must have {e} rows, got shape {self.v.shape}")
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != (e, e):
            raise DataError(f"PLDA sigma must be {e}x{e}, got {self.sigma.shape}")
        if self.v.shape[1] > e:
            raise DataError(f"PLDA speaker rank {self.v.shape[1]} exceeds dim {e}")

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def rank(self) -> int:
        return self.v.shape[1]

    @cached_property
    def _terms(self) -> _LlrTerms:
        between = self.v @ self.v.T
        total = between + self.sigma
        try:
            total_cho = linalg.cho_factor(total)
            t_inv = linalg.cho_solve(total_cho, np.eye(self.dim))
            cond = total - between @ t_inv @ between
            cond_cho = linalg.cho_factor(cond)
        except linalg.LinAlgError as e:
            raise NumericError(f"PLDA covariances are not positive definite: {e}") from e
        cond_inv = linalg.cho_solve(cond_cho, np.eye(self.dim))
        cross = t_inv @ between @ cond_inv
        logdet_total = 2.0 * np.log(np.diag(total_cho[0])).sum()
        logdet_cond = 2.0 * np.log(np.diag(cond_cho[0])).sum()
        return _LlrTerms(t_inv - cond_inv, 0.5 * (cross + cross.T), 0.5 * (logdet_total - logdet_cond))


def plda_llr(m: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    """log p(enroll, test | same speaker) - log p(enroll) p(test)."""
    enroll = np.asarray(enroll, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if enroll.shape != (m.dim,) or test.shape != (m.dim,):
        raise DataError(f"PLDA expects {m.dim}-dim vectors, got {enroll.shape} and {test.shape}")
    t = m._terms
    e = enroll - m.mu
    x = test - m.mu
    return float(0.5 * e @ t.quad @ e + 0.5 * x @ t.quad @ x + e @ t.cross @ x + t.const)


def _group(vectors: np.ndarray, labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    speakers = sorted(set(labels.tolist()))
    counts = np.array([(labels == s).sum() for s in speakers], dtype=np.float64)
    sums = np.stack([vectors[labels == s].sum(axis=0) for s in speakers])
    return counts, sums


def _marginal_ll(y: np.ndarray, counts: np.ndarray, sums: np.ndarray, v: np.ndarray, sigma: np.ndarray) -> float:
    """Exact log p(Y) with the speaker factors integrated out."""
    e, q = v.shape
    cho = linalg.cho_factor(sigma)
    logdet_sigma = 2.0 * np.log(np.diag(cho[0])).sum()
    quad = float(np.sum(y * linalg.cho_solve(cho, y.T).T))
    total = -0.5 * (len(y) * (e * LOG_2PI + logdet_sigma) + quad)
    if q == 0:
        return total
    sv = linalg.cho_solve(cho, v)
    vsv = v.T @ sv
    for n, s in zip(counts, sums):
        precision = np.eye(q) + n * vsv
        b = sv.T @ s
        p_cho = linalg.cho_factor(precision)
        total += 0.5 * float(b @ linalg.cho_solve(p_cho, b)) - np.log(np.diag(p_cho[0])).sum()
    return total


def _ridge(sigma: np.ndarray) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    return sigma + SIGMA_RIDGE * np.trace(sigma) / sigma.shape[0] * np.eye(sigma.shape[0])


def train_plda(vectors: np.ndarray, labels: Sequence[str], rank: int, iters: int = 10) -> PldaModel:
    """EM for y = mu + V h + e, h ~ N(0, I), e ~ N(0, Sigma)."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if len(labels) != len(x):
        raise DataError(f"{len(x)} vectors but {len(labels)} labels")
    dim = x.shape[1]
    num_speakers = len(set(labels))
    if num_speakers < 2:
        raise DataError("PLDA needs at least 2 speakers")
    if rank < 0 or rank > dim or rank > num_speakers:
        raise DataError(f"PLDA rank {rank} must not exceed dim {dim} or speaker count {num_speakers}")
    if iters <= 0:
        raise DataError(f"PLDA iterations must be positive, got {iters}")

    mu = x.mean(axis=0)
    y = x - mu
    counts, sums = _group(y, labels)
    scatter = y.T @ y
    spk_means = sums / counts[:, None]
    between = (spk_means * counts[:, None]).T @ spk_means / len(y)
    within = (scatter - (spk_means * counts[:, None]).T @ spk_means) / len(y)
    if rank:
        vals, vecs = linalg.eigh(between)
        vals, vecs = vals[::-1][:rank], vecs[:, ::-1][:, :rank]
        v = vecs * np.sqrt(np.maximum(vals, 1e-12))
    else:
        v = np.zeros((dim, 0))
    sigma = _ridge(within if rank else scatter / len(y))

    history = []
    for it in range(iters):
        history.append(_marginal_ll(y, counts, sums, v, sigma))
        if rank == 0:
            sigma = _ridge(scatter / len(y))
            continue
        sv = linalg.solve(sigma, v, assume_a="pos")
        vsv = v.T @ sv
        acc_r = np.zeros((dim, rank))
        acc_a = np.zeros((rank, rank))
        for n, s in zip(counts, sums):
            cov = linalg.inv(np.eye(rank) + n * vsv)
            mean = cov @ (sv.T @ s)
            acc_r += np.outer(s, mean)
            acc_a += n * (cov + np.outer(mean, mean))
        try:
            v = linalg.solve(acc_a, acc_r.T, assume_a="pos").T
        except linalg.LinAlgError as e:
            raise NumericError(f"PLDA speaker accumulator is singular: {e}") from e
        sigma = _ridge((scatter - v @ acc_r.T) / len(y))
        log.info("PLDA iter %d: log-likelihood %.4f", it + 1, history[-1])
    history.append(_marginal_ll(y, counts, sums, v, sigma))
    log.info("Trained PLDA (dim %d, rank %d) on %d vectors from %d speakers", dim, rank, len(y), num_speakers)
    return PldaModel(mu, v, sigma, history)


def save_plda(m: PldaModel, path: Path | str) -> Path:
    return save_container(
        path, "PLDA", {"rank": m.rank, "log_likelihoods": m.log_likelihoods},
        {"mu": m.mu, "v": m.v, "sigma": m.sigma},
    )


def load_plda(path: Path | str) -> PldaModel:
    _, meta, a = load_container(path, "PLDA")
    return PldaModel(a["mu"], a["v"].reshape(a["mu"].size, int(meta["rank"])), a["sigma"], meta.get("log_likelihoods", []))


# ---------------------------------------------------------------------------
# Trials and scores
# ---------------------------------------------------------------------------

class Trial(NamedTuple):
    enroll: str
    test: str
    key: str = "unknown"

    @property
    def enroll_ids(self) -> list[str]:
        return self.enroll.split(",")


@dataclass
class TrialList:
    trials: list[Trial]

    def __len__(self) -> int:
        return len(self.trials)

    @classmethod
    def load(cls, path: Path | str) -> TrialList:
        path = Path(path)
        if not path.exists():
            raise DataError(f"trial list not found: {path}")
        trials = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            cols = line.split()
            if not cols:
                continue
            if len(cols) != 3 or cols[2] not in KEYS:
                raise DataError(f"{path}:{lineno}: expected 'enroll_id test_id target|nontarget|unknown'")
            trials.append(Trial(*cols))
        return cls(trials)

    def save(self, path: Path | str) -> Path:
        return write_text_atomic(path, "".join(f"{t.enroll} {t.test} {t.key}\n" for t in self.trials))


class Score(NamedTuple):
    enroll: str
    test: str
    score: float
    key: str = "unknown"


@dataclass
class ScoreSet:
    scores: list[Score]

    def __len__(self) -> int:
        return len(self.scores)

    def keyed(self) -> tuple[np.ndarray, np.ndarray]:
        """Scores and target flags of the trials whose key is known."""
        known = [s for s in self.scores if s.key != "unknown"]
        return (
            np.array([s.score for s in known], dtype=np.float64),
            np.array([s.key == "target" for s in known], dtype=bool),
        )

    def with_keys(self, trials: TrialList) -> ScoreSet:
        keys = {(t.enroll, t.test): t.key for t in trials.trials}
        return ScoreSet([s._replace(key=keys.get((s.enroll, s.test), "unknown")) for s in self.scores])

    @classmethod
    def load(cls, path: Path | str) -> ScoreSet:
        path = Path(path)
        if not path.exists():
            raise DataError(f"score file not found: {path}")
        scores = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            cols = line.split()
            if not cols:
                continue
            if len(cols) != 3:
                raise DataError(f"{path}:{lineno}: expected 'enroll_id test_id score'")
            try:
                value = float(cols[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: score {cols[2]!r} is not a number") from None
            if not math.isfinite(value):
                raise DataError(f"{path}:{lineno}: score must be finite")
            scores.append(Score(cols[0], cols[1], value))
        return cls(scores)

    def save(self, path: Path | str) -> Path:
        return write_text_atomic(path, "".join(f"{s.enroll} {s.test} {s.score:.6f}\n" for s in self.scores))


def enrollment_vector(archive: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    """Single session as stored; multiple sessions averaged and length-normalized."""
    missing = [i for i in ids if i not in archive]
    if missing:
        raise DataError(f"no embedding for utterance id(s): {', '.join(missing)}")
    if len(ids) == 1:
        return np.asarray(archive[ids[0]], dtype=np.float64)
    return length_norm(np.mean([archive[i] for i in ids], axis=0))


def score_trials(m: PldaModel, archive: Mapping[str, np.ndarray], trials: TrialList, workers: int = 1) -> ScoreSet:
    for t in trials.trials:
        if t.test not in archive:
            raise DataError(f"no embedding for test utterance id {t.test!r}")
    m._terms  # factorize once before fanning out

    def _score(t: Trial) -> Score:
        value = plda_llr(m, enrollment_vector(archive, t.enroll_ids), archive[t.test])
        return Score(t.enroll, t.test, value, t.key)

    scores = parallel_map(_score, trials.trials, workers)
    if not all(math.isfinite(s.score) for s in scores):
        raise NumericError("PLDA produced non-finite scores")
    return ScoreSet(scores)

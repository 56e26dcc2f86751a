#!/usr/bin/env python3
"""Speaker-verification experiment driver.

Usage:
    python run.py synth-corpus --workdir work --seed 7
    python run.py augment --manifest work/corpus/corpus.tsv --out work/augment/rrn --regime RR+N
    python run.py train-enhancer --manifest work/corpus/corpus.tsv --config exp.ini
    python run.py train-ubm --manifest train.tsv && python run.py train-ivector --manifest train.tsv
    python run.py extract --manifest eval.tsv --out work/embeddings/eval.svke
    python run.py train-plda --manifest plda.tsv --embeddings work/embeddings/plda.svke
    python run.py score --trials trials.txt --embeddings work/embeddings/eval.svke
    python run.py evaluate --scores work/scores/trials.scores --trials trials.txt
    python run.py run-experiment --config exp.ini     # one cell of the result grid

Every subcommand prints one ``key=value`` summary line on stdout. Exit codes:
0 success, 1 usage error, 2 data error (and any unexpected failure), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import config
from augment import CorpusManifest
from config import ExperimentConfig
from enhancer import load_model as load_enhancer
from ivector import load_ubm
from metrics import emit_report, evaluate_condition
from pipeline import (
    Workspace, augment_manifest, compute_features, enhance_manifest, extract_embeddings,
    extraction_enhancer, labels_from, load_banks, load_extractor, load_scoring_models, operating_points,
    run_experiment, score_stage, synthesize_banks, synthesize_corpus, train_backend, train_enhancer_stage,
    train_ivector_stage, train_ubm_stage, train_xvector_stage, training_enhancer,
)
from plda import ScoreSet, TrialList
from store import load_embeddings, save_embeddings
from utils import DataError, NumericError, UsageError

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class CommandOutcome:
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)
    duration_s: float = 0.0
    summary: dict[str, str] = field(default_factory=dict)

    def summary_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.summary.items())


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class Context:
    args: argparse.Namespace
    cfg: ExperimentConfig
    ws: Workspace
    workers: int

    def seed(self) -> int:
        return self.cfg.require_seed()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _manifest(ctx: Context) -> CorpusManifest:
    if not ctx.args.manifest:
        raise UsageError("--manifest is required for this subcommand")
    return CorpusManifest.load(ctx.args.manifest)


def cmd_synth_corpus(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    out = Path(ctx.args.out) if ctx.args.out else ctx.ws.corpus_dir
    speakers = ctx.args.speakers or ctx.cfg.experiment.num_speakers
    utts = ctx.args.utts or ctx.cfg.experiment.utts_per_speaker
    manifest = synthesize_corpus(out, speakers, utts, seed)
    artifacts = [out / "corpus.tsv"]
    if not ctx.args.no_banks:
        synthesize_banks(ctx.ws, seed)
        artifacts += [ctx.ws.banks_dir / "noises" / "noises.lst", ctx.ws.banks_dir / "rirs" / "rirs.lst"]
    return CommandOutcome(EXIT_OK, artifacts, summary={
        "speakers": str(speakers), "utterances": str(len(manifest)), "manifest": str(out / "corpus.tsv"),
    })


def cmd_augment(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    clean = _manifest(ctx)
    if not ctx.args.out:
        raise UsageError("--out is required for augment")
    if ctx.args.fraction is not None:
        ctx.cfg.augment.plda_fraction = ctx.args.fraction
        ctx.cfg.validate(check_paths=False)
    noises, rooms = load_banks(ctx.cfg, ctx.ws, seed)
    out = Path(ctx.args.out)
    rendered = augment_manifest(
        clean, out, ctx.cfg, seed, noises, rooms,
        regime=ctx.args.regime, split=ctx.args.split, replicas=ctx.args.replicas, workers=ctx.workers,
    )
    return CommandOutcome(EXIT_OK, [out / "manifest.tsv"], summary={
        "entries": str(len(rendered)), "added": str(len(rendered) - len(clean)) if not ctx.args.replicas
        else str(sum(e.condition != "clean" for e in rendered)),
        "manifest": str(out / "manifest.tsv"),
    })


def cmd_train_enhancer(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    train = _manifest(ctx)
    noises, rooms = load_banks(ctx.cfg, ctx.ws, seed)
    _, history = train_enhancer_stage(train, noises, rooms, ctx.cfg, seed, ctx.ws, ctx.workers)
    return CommandOutcome(EXIT_OK, [ctx.ws.model("enhancer")], summary={
        "model": str(ctx.ws.model("enhancer")),
        "dev_loss_start": f"{history[0]['dev_loss']:.6f}",
        "dev_loss": f"{history[-1]['dev_loss']:.6f}",
    })


def cmd_enhance(ctx: Context) -> CommandOutcome:
    manifest = _manifest(ctx)
    if not ctx.args.out:
        raise UsageError("--out is required for enhance")
    out = Path(ctx.args.out)
    enhanced = enhance_manifest(manifest, load_enhancer(ctx.ws.model("enhancer")), out, ctx.workers)
    return CommandOutcome(EXIT_OK, [out / "manifest.tsv"], summary={
        "utterances": str(len(enhanced)), "manifest": str(out / "manifest.tsv"),
    })


def _training_features(ctx: Context, manifest: CorpusManifest):
    enhancer, enhancer_path = training_enhancer(ctx.cfg, ctx.ws)
    return compute_features(manifest, ctx.cfg, ctx.ws, enhancer, enhancer_path, ctx.workers)


def cmd_train_ubm(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    ctx.cfg.embedding.kind = "ivector"
    ubm = train_ubm_stage(_training_features(ctx, _manifest(ctx)), ctx.cfg, seed, ctx.ws)
    return CommandOutcome(EXIT_OK, [ctx.ws.model("ubm")], summary={
        "model": str(ctx.ws.model("ubm")),
        "components": str(ubm.num_components),
        "loglik": f"{ubm.log_likelihoods[-1]:.3f}",
    })


def cmd_train_ivector(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    ctx.cfg.embedding.kind = "ivector"
    ubm = load_ubm(ctx.ws.model("ubm"))
    ext = train_ivector_stage(_training_features(ctx, _manifest(ctx)), ubm, ctx.cfg, seed, ctx.ws, ctx.workers)
    return CommandOutcome(EXIT_OK, [ctx.ws.model("tv")], summary={
        "model": str(ctx.ws.model("tv")), "rank": str(ext.rank), "objective": f"{ext.objectives[-1]:.3f}",
    })


def cmd_train_xvector(ctx: Context) -> CommandOutcome:
    seed = ctx.seed()
    ctx.cfg.embedding.kind = "xvector"
    manifest = _manifest(ctx)
    model = train_xvector_stage(_training_features(ctx, manifest), labels_from(manifest), ctx.cfg, seed, ctx.ws)
    return CommandOutcome(EXIT_OK, [ctx.ws.model("xvector")], summary={
        "model": str(ctx.ws.model("xvector")),
        "speakers": str(model.config.num_speakers),
        "accuracy": f"{model.train_meta['final_accuracy']:.3f}",
    })


def cmd_extract(ctx: Context) -> CommandOutcome:
    manifest = _manifest(ctx)
    out = Path(ctx.args.out) if ctx.args.out else ctx.ws.embeddings(Path(ctx.args.manifest).stem)
    enhancer, enhancer_path = extraction_enhancer(ctx.cfg, ctx.ws)
    raw = extract_embeddings(manifest, load_extractor(ctx.cfg, ctx.ws), ctx.cfg, ctx.ws, enhancer, enhancer_path,
                             ctx.workers)
    save_embeddings(out, raw)
    dim = len(next(iter(raw.values()))) if raw else 0
    return CommandOutcome(EXIT_OK, [out], summary={"embeddings": str(len(raw)), "dim": str(dim), "archive": str(out)})


def cmd_train_plda(ctx: Context) -> CommandOutcome:
    if not ctx.args.embeddings:
        raise UsageError("--embeddings is required for train-plda")
    labels = labels_from(_manifest(ctx))
    raw = load_embeddings(ctx.args.embeddings)
    lda, plda = train_backend(raw, labels, ctx.cfg, ctx.ws)
    return CommandOutcome(EXIT_OK, [ctx.ws.model("lda"), ctx.ws.model("plda")], summary={
        "lda_dim": str(lda.out_dim), "plda_rank": str(plda.rank), "loglik": f"{plda.log_likelihoods[-1]:.3f}",
    })


def _trials_path(ctx: Context) -> Path:
    path = ctx.args.trials or ctx.cfg.paths.trials
    if not path:
        raise UsageError("--trials is required (or set [paths] trials)")
    return Path(path)


def cmd_score(ctx: Context) -> CommandOutcome:
    if not ctx.args.embeddings:
        raise UsageError("--embeddings is required for score")
    trials_path = _trials_path(ctx)
    trials = TrialList.load(trials_path)
    lda, plda = load_scoring_models(ctx.ws)
    scores = score_stage(plda, lda, load_embeddings(ctx.args.embeddings), trials, ctx.workers)
    out = Path(ctx.args.out) if ctx.args.out else ctx.ws.scores(trials_path.stem)
    scores.save(out)
    return CommandOutcome(EXIT_OK, [out], summary={"trials": str(len(scores)), "scores": str(out)})


def cmd_evaluate(ctx: Context) -> CommandOutcome:
    if not ctx.args.scores:
        raise UsageError("--scores is required for evaluate")
    trials = TrialList.load(_trials_path(ctx))
    scores = ScoreSet.load(ctx.args.scores).with_keys(trials)
    name = ctx.args.name or Path(ctx.args.scores).stem
    ops = operating_points(ctx.cfg)
    result = evaluate_condition(name, scores, ops)
    out = Path(ctx.args.out) if ctx.args.out else ctx.ws.report_dir
    artifacts = emit_report([result], out, ops)
    summary = {"eer": f"{result.eer:.3f}"}
    summary.update({label: f"{value:.4f}" for label, value in result.min_dcf.items()})
    return CommandOutcome(EXIT_OK, artifacts, summary=summary)


def cmd_run_experiment(ctx: Context) -> CommandOutcome:
    result = run_experiment(ctx.cfg, ctx.ws, ctx.workers)
    summary = {}
    for r in result.results:
        summary[f"eer_{r.name}"] = f"{r.eer:.3f}"
        summary.update({f"{label}_{r.name}": f"{value:.4f}" for label, value in r.min_dcf.items()})
    summary["report"] = str(ctx.ws.report_dir)
    return CommandOutcome(EXIT_OK, result.artifacts, summary=summary)


COMMANDS = {
    "synth-corpus": (cmd_synth_corpus, "Generate a synthetic corpus plus noise and RIR banks"),
    "augment": (cmd_augment, "Build and render a multi-condition or replica training manifest"),
    "train-enhancer": (cmd_train_enhancer, "Train the denoising autoencoder on corrupted/clean pairs"),
    "enhance": (cmd_enhance, "Enhance every utterance of a manifest"),
    "train-ubm": (cmd_train_ubm, "Train the GMM-UBM"),
    "train-ivector": (cmd_train_ivector, "Train the total-variability i-vector extractor"),
    "train-xvector": (cmd_train_xvector, "Train the TDNN x-vector network"),
    "extract": (cmd_extract, "Extract raw embeddings for a manifest"),
    "train-plda": (cmd_train_plda, "Train LDA + PLDA on raw embeddings"),
    "score": (cmd_score, "Score a trial list with PLDA"),
    "evaluate": (cmd_evaluate, "EER / minDCF / DET report for a score file"),
    "run-experiment": (cmd_run_experiment, "Run one experiment cell end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="Experiment config (INI)")
    common.add_argument("--workdir", type=str, default=None, help=f"Work directory (default: {config.DEFAULT_WORKDIR})")
    common.add_argument("--seed", type=int, default=None, help="Global seed (overrides [experiment] seed)")
    common.add_argument("--workers", type=int, default=None,
                        help=f"Utterance-level worker pool size (default: {config.DEFAULT_WORKERS})")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = _Parser(description="Robust speaker verification toolkit")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("augment", "train-enhancer", "enhance", "train-ubm", "train-ivector", "train-xvector",
                    "extract", "train-plda"):
            p.add_argument("--manifest", type=str, default=None, help="Input corpus manifest (TSV)")
        if name in ("synth-corpus", "augment", "enhance", "extract", "score", "evaluate"):
            p.add_argument("--out", type=str, default=None, help="Output path")
        if name in ("train-plda", "score"):
            p.add_argument("--embeddings", type=str, default=None, help="Embedding archive (SVKE1)")
        if name in ("score", "evaluate"):
            p.add_argument("--trials", type=str, default=None, help="Trial list")
    sp = sub.choices["synth-corpus"]
    sp.add_argument("--speakers", type=int, default=None, help="Number of speakers")
    sp.add_argument("--utts", type=int, default=None, help="Utterances per speaker")
    sp.add_argument("--no-banks", action="store_true", help="Skip the synthetic noise/RIR banks")
    ap = sub.choices["augment"]
    ap.add_argument("--regime", choices=("N", "RR", "RR+N"), default="RR+N", help="Condition mix")
    ap.add_argument("--fraction", type=float, default=None, help="Share of utterances to corrupt")
    ap.add_argument("--split", choices=("train", "dev"), default="train", help="Bank split to draw from")
    ap.add_argument("--replicas", action="store_true", help="Replica recipe instead of a multi-condition mix")
    ev = sub.choices["evaluate"]
    ev.add_argument("--scores", type=str, default=None, help="Score file")
    ev.add_argument("--name", type=str, default=None, help="Condition name in the report")
    return parser


def _setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    logging.getLogger().setLevel(level)


def _context(args: argparse.Namespace) -> Context:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError(f"--seed must be an unsigned 64-bit value, got {args.seed}")
        cfg.experiment.seed = args.seed
    if args.workdir:
        cfg.paths.workdir = str(Path(args.workdir).resolve())
    cfg.validate()
    workers = args.workers if args.workers is not None else config.DEFAULT_WORKERS
    if workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    return Context(args, cfg, Workspace(cfg.workdir()), workers)


def run(argv: list[str] | None = None) -> CommandOutcome:
    """Parse ``argv``, run one subcommand and print its summary line."""
    started = time.monotonic()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return CommandOutcome(int(e.code or 0))
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a subcommand is required", file=sys.stderr)
        return CommandOutcome(EXIT_USAGE)
    _setup_logging(args.verbose)

    handler = COMMANDS[args.command][0]
    try:
        outcome = handler(_context(args))
    except UsageError as e:
        log.error("%s", e)
        outcome = CommandOutcome(EXIT_USAGE)
    except (DataError, OSError) as e:
        log.error("%s", e)
        outcome = CommandOutcome(EXIT_DATA)
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as e:
        log.error("Numeric failure: %s", e)
        outcome = CommandOutcome(EXIT_NUMERIC)
    except Exception as e:
        log.exception("Unexpected failure in %s: %s", args.command, e)
        outcome = CommandOutcome(EXIT_DATA)
    outcome.duration_s = time.monotonic() - started
    if outcome.exit_code == EXIT_OK:
        print(outcome.summary_line())
        log.info("%s finished in %.1fs", args.command, outcome.duration_s)
    return outcome


def main() -> None:
    sys.exit(run().exit_code)


if __name__ == "__main__":
    main()

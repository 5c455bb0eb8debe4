"""
catvac command line.

    catvac prepare --manifest M --config C --out DIR
    catvac train   --config C --out DIR [--resume CKPT]
    catvac eval    --ckpt CKPT --manifest M --source model kmeans labels --out DIR
    catvac kmeans  --manifest M --k K --restarts R --out DIR
    catvac synth   --out DIR --per-class N
    catvac report  --inputs R1.json R2.json --out DIR
    catvac gumbel  --k 10 --taus 0.01 0.5 1 100
    catvac serve   --ckpt CKPT

Exit codes: 0 success, 1 user error, 2 internal invariant violation.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import ValidationError

from . import __version__
from .config import ConfigError, get_settings, load_run_config
from .errors import InvariantViolation, UserError
from .services import kmeans
from .services.features import FeatureConfig
from .services.gumbel import ClassLogits, temperature_profile
from .services.metrics import Assignment, ClusterReport, aggregate, evaluate, render_table
from .services.trainer import Checkpoint, assign_clusters, embed_dataset, predict_probs, train
from .storage.manifest import ManifestError, load_prepared_settings, load_split, prepare_dataset
from .storage.synthetic import write_synthetic_dataset

logger = logging.getLogger("catvac")

LOCK_FILE = ".catvac.lock"
MAX_SKIPPED_FRACTION = 0.01

FEATURE_PRESETS = {
    "audiomnist": FeatureConfig.audiomnist,
    "urbansound8k": FeatureConfig.urbansound8k,
    "tau2019": FeatureConfig.tau2019,
    "synthetic": FeatureConfig.synthetic,
}


@contextmanager
def run_lock(directory: Path):
    """Exclusive use of an output directory for the duration of one command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UserError(f"{directory} is locked by another catvac command (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _feature_config(value: str) -> FeatureConfig:
    if value in FEATURE_PRESETS:
        return FEATURE_PRESETS[value]()
    try:
        return FeatureConfig.model_validate_json(Path(value).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read feature config {value}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid feature config {value}: {e}") from e


def cmd_prepare(args) -> int:
    config = _feature_config(args.config)
    if args.workers:
        config = config.model_copy(update={"workers": args.workers})
    out = Path(args.out)
    with run_lock(out):
        summary = prepare_dataset(args.manifest, config, out)

    print(f"Prepared {sum(summary.counts.values())} clips, shape {summary.shape[0]} x {summary.shape[1]}")
    for split, count in summary.counts.items():
        print(f"  {split}: {count}")
    if summary.skipped:
        print(f"Skipped {len(summary.skipped)} file(s):")
        for path, reason in summary.skipped:
            print(f"  {path}: {reason}")
    if summary.skipped_fraction > MAX_SKIPPED_FRACTION:
        logger.error(f"{summary.skipped_fraction:.1%} of files skipped (limit {MAX_SKIPPED_FRACTION:.0%})")
        return 1
    return 0


def cmd_train(args) -> int:
    settings = get_settings()
    config = load_run_config(args.config, settings)
    stats, prepared = load_prepared_settings(config.features_dir)
    if prepared.model_copy(update={"workers": 1}) != config.features.model_copy(update={"workers": 1}):
        raise ConfigError(f"features in {config.features_dir} were prepared with different settings")

    index = Path(config.features_dir) / "index.jsonl"
    train_set, _ = load_split(index, "train", config=prepared)
    try:
        val_set, _ = load_split(index, "val", config=prepared)
    except ManifestError:
        logger.info("No validation split; selecting the best checkpoint by training loss")
        val_set = None

    out = Path(args.out or config.output or "runs/latest")
    resume = Checkpoint.load(args.resume) if args.resume else None
    with run_lock(out):
        (out / "config.json").write_text(config.model_dump_json(indent=2, by_alias=True))
        result = train(
            train_set,
            config.train,
            model_config=config.model,
            val_dataset=val_set,
            run_dir=out,
            resume=resume,
            device=args.device or settings.device,
            norm_stats=stats,
            feature_config=prepared,
        )
    if result.logs:
        last = result.logs[-1]
        print(f"Finished epoch {last.epoch}: total loss {last.total:.5f}; checkpoints in {out}")
    return 0


def _eval_split(args, checkpoint: Optional[Checkpoint]):
    stats = checkpoint.norm_stats if checkpoint else None
    config = checkpoint.feature_config if checkpoint else None
    if stats is None:
        try:
            stats, config = load_prepared_settings(Path(args.manifest).parent)
        except UserError:
            pass
    return load_split(args.manifest, args.split, stats=stats, config=config)


def cmd_eval(args) -> int:
    settings = get_settings()
    device = args.device or settings.device
    checkpoint = Checkpoint.load(args.ckpt) if args.ckpt else None
    if checkpoint is None and ("model" in args.source or args.space != "features"):
        raise UserError("--ckpt is required for the model source and for latent or posterior metric spaces")

    tensors, labels = _eval_split(args, checkpoint)
    truth = np.asarray(labels) if all(label is not None for label in labels) else None
    n_classes = int(np.unique(truth).size) if truth is not None else None

    if args.space == "latent":
        points = embed_dataset(tensors, checkpoint, device)
    elif args.space == "posterior":
        points = predict_probs(tensors, checkpoint, device)
    else:
        points = np.stack([t.values.reshape(-1) for t in tensors]).astype(np.float64)

    out = Path(args.out)
    reports: List[ClusterReport] = []
    with run_lock(out):
        for source in args.source:
            if source == "labels":
                if truth is None:
                    raise UserError("labels requested but absent from the manifest")
                ids, n_clusters = truth, n_classes
            elif source == "model":
                ids, n_clusters = np.asarray(assign_clusters(tensors, checkpoint, device)), checkpoint.model_config.K
            else:
                if args.kmeans_model:
                    model = kmeans.KMeansModel.load(args.kmeans_model)
                else:
                    k = args.k or (checkpoint.model_config.K if checkpoint else n_classes)
                    if k is None:
                        raise UserError("--k is required when neither a checkpoint nor labels are available")
                    model = kmeans.fit(points, k, args.restarts, args.seed)
                ids, n_clusters = kmeans.predict(model, points), model.K

            report = evaluate(points, Assignment(ids, truth), n_clusters=n_clusters, method=f"{source} (K={n_clusters})")
            (out / f"{source}.json").write_text(report.model_dump_json(indent=2))
            reports.append(report)

        table = render_table(reports)
        (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_kmeans(args) -> int:
    tensors, _ = _eval_split(args, None)
    points = np.stack([t.values.reshape(-1) for t in tensors]).astype(np.float64)
    out = Path(args.out)
    with run_lock(out):
        model = kmeans.fit(points, args.k, args.restarts, args.seed)
        model.save(out / "kmeans.cvck")
    print(f"K-means K={args.k}: inertia {model.inertia:.6g} after {model.iterations_run} iterations")
    return 0


def cmd_synth(args) -> int:
    manifest = write_synthetic_dataset(args.out, args.per_class, seed=args.seed)
    print(f"Wrote {manifest}")
    return 0


def cmd_report(args) -> int:
    groups: Dict[str, List[ClusterReport]] = {}
    for path in args.inputs:
        try:
            report = ClusterReport.model_validate_json(Path(path).read_text())
        except (OSError, ValidationError) as e:
            raise UserError(f"cannot read report {path}: {e}") from e
        groups.setdefault(report.method, []).append(report)

    rows = [aggregate(reports, method) for method, reports in groups.items()]
    table = render_table(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.json").write_text(json.dumps([row.model_dump() for row in rows], indent=2))
    (out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_gumbel(args) -> int:
    logits = ClassLogits(torch.zeros(args.k, dtype=torch.float64))
    generator = torch.Generator().manual_seed(args.seed)
    for sample in temperature_profile(logits, args.taus, generator):
        values = " ".join(f"{v:.3f}" for v in sample.y.tolist())
        print(f"tau={sample.tau:<8g} argmax={int(sample.y.argmax())}  {values}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    os.environ["CATVAC_CHECKPOINT"] = str(args.ckpt)
    uvicorn.run("catvac.api.index:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catvac", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"catvac {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: CATVAC_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="Extract features into a cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help=f"FeatureConfig JSON or preset: {', '.join(FEATURE_PRESETS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="Extraction processes (default: from config)")
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="Train the categorical VAE")
    p.add_argument("--config", required=True, help="RunConfig JSON")
    p.add_argument("--out", default=None, help="Run directory (default: config output)")
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--device", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Cluster a split and compute metrics")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--manifest", required=True, help="Prepared index or raw manifest")
    p.add_argument("--source", nargs="+", choices=("model", "kmeans", "labels"), default=["model"])
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--space", default="features", choices=("features", "latent", "posterior"))
    p.add_argument("--k", type=int, default=None, help="K-means cluster count")
    p.add_argument("--kmeans-model", default=None, help="Centroids written by `catvac kmeans`")
    p.add_argument("--restarts", type=int, default=kmeans.DEFAULT_RESTARTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--device", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("kmeans", parents=[common], help="Fit the K-means baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=kmeans.DEFAULT_RESTARTS)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_kmeans)

    p = sub.add_parser("synth", parents=[common], help="Write a synthetic band-limited noise dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("report", parents=[common], help="Average reports of independent runs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("gumbel", parents=[common], help="Print Gumbel-Softmax samples across temperatures")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--taus", type=float, nargs="+", default=[0.01, 0.5, 1.0, 100.0])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gumbel)

    p = sub.add_parser("serve", parents=[common], help="Serve cluster assignments over HTTP")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = (args.log_level or get_settings().log_level).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigError(f"unknown log level {level!r}")
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except UserError as e:
        logger.error(str(e))
        return 1
    except InvariantViolation as e:
        logger.error(f"Internal invariant violated: {e}")
        return 2
    except Exception as e:
        logger.exception(f"Unexpected failure: {str(e)}")
        return 2


if __name__ == "__main__":
    sys.exit(main())

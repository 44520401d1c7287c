"""Command-line entry point: ``prvipe <subcommand> [options]``.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 numerical failure. Every run writes ``manifest.json`` to its output
directory with the resolved configuration, its hash, the seed and the
package and library versions.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import config_hash, load_config_file, resolve_train_config, save_config
from .errors import (ConfigError, CorruptCheckpoint, DegenerateCovariance, EmptyIndex, EmptySequence,
                     InsufficientData, NonFiniteActivation, NonFiniteLoss, NoValidNegative, ParseError,
                     SchemaError, SequenceTooShort, VersionMismatch)

log = logging.getLogger("prvipe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (ParseError, SchemaError, VersionMismatch, InsufficientData, EmptyIndex, EmptySequence,
               SequenceTooShort, CorruptCheckpoint, NoValidNegative, FileNotFoundError)
NUMERIC_ERRORS = (NonFiniteLoss, NonFiniteActivation, DegenerateCovariance, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p, dataset=False, checkpoint=False):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    if dataset:
        p.add_argument("--dataset", required=True, help="JSONL dataset")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")


def _train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("pr-vipe", "vipe", "l2-vipe"))
    p.add_argument("--augmentation", choices=("on", "off"))
    p.add_argument("--kappa", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--samples", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prvipe", description="View-invariant probabilistic pose embeddings.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=("poses", "sequences", "ambiguity"), default="poses")
    p.add_argument("--num-poses", type=int, default=500)
    p.add_argument("--held-out", type=int, default=100, help="poses written to test.jsonl instead")
    p.add_argument("--cameras", choices=("chest", "elevated"), default="chest")
    p.add_argument("--noise", type=float, default=0.0, help="2D keypoint noise (normalized units)")

    p = sub.add_parser("train", help="train an embedding model")
    _common(p, dataset=True)
    _train_flags(p)
    p.add_argument("--checkpoint", help="resume from this training checkpoint")

    p = sub.add_parser("eval-retrieval", help="cross-view Hit@k")
    _common(p, dataset=True, checkpoint=True)
    _train_flags(p)
    p.add_argument("--bins", type=int, default=10)

    p = sub.add_parser("eval-ambiguity", help="variance versus 2D neighbour distance")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--camera", help="camera to analyse (default: first)")
    p.add_argument("--neighbors", type=int, default=10)

    p = sub.add_parser("align", help="DTW-align two sequences")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--query", required=True, help="sequence id (optionally id@camera)")
    p.add_argument("--target", required=True, help="sequence id (optionally id@camera)")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("classify", help="nearest-neighbour action classification")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--index", required=True, help="JSONL of labeled index sequences")
    p.add_argument("--samples", type=int)
    p.add_argument("--no-mirror", action="store_true", help="disable chirality handling")

    p = sub.add_parser("pca-export", help="2D PCA of embedding means as CSV")
    _common(p, dataset=True, checkpoint=True)
    p.add_argument("--dims", type=int, default=2)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--mode", choices=("pr-vipe", "vipe", "l2-vipe"), default="pr-vipe")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _train_config(args):
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {key: getattr(args, key, None) for key in ("seed", "steps", "mode", "kappa", "beta", "samples")}
    overrides["augmentation"] = getattr(args, "augmentation", None)
    return resolve_train_config(file_values, overrides)


def _write_manifest(out: Path, args, config=None, outputs=()):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None) if config is None else config.seed,
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config_hash(config),
        "versions": {"prvipe": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _load(args):
    from .data import Dataset, load_dataset

    return Dataset(load_dataset(args.dataset))


def _load_model(path):
    from .model import load_checkpoint

    params, _, _ = load_checkpoint(path)
    return params


def _seq_lookup(sequences, key):
    seq_id, _, cam = key.partition("@")
    found = [s for s in sequences if s.sequence_id == seq_id and (not cam or s.view == cam)]
    if not found:
        raise EmptySequence(f"no sequence {key!r} in dataset")
    return found[0]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out):
    from .data import (AmbiguityConfig, SyntheticConfig, chest_level_cameras, elevated_cameras,
                       generate_ambiguity_set, generate_synthetic_poses, generate_synthetic_sequences,
                       save_dataset, sequences_to_records)

    seed = 0 if args.seed is None else args.seed
    cameras = chest_level_cameras() if args.cameras == "chest" else elevated_cameras()
    outputs = []
    if args.kind == "poses":
        if args.held_out < 0 or args.held_out >= args.num_poses:
            raise ConfigError("--held-out must be in [0, num-poses)")
        cfg = SyntheticConfig(seed=seed, num_poses=args.num_poses, cameras=cameras, noise_sigma=args.noise)
        records = generate_synthetic_poses(cfg)
        cut = args.num_poses - args.held_out
        outputs.append(save_dataset([r for r in records if r.frame_id < cut], out / "train.jsonl"))
        if args.held_out:
            outputs.append(save_dataset([r for r in records if r.frame_id >= cut], out / "test.jsonl"))
    elif args.kind == "sequences":
        cfg = SyntheticConfig(seed=seed, cameras=cameras, noise_sigma=args.noise)
        outputs.append(save_dataset(sequences_to_records(generate_synthetic_sequences(cfg)),
                                    out / "sequences.jsonl"))
    else:
        amb = generate_ambiguity_set(AmbiguityConfig(seed=seed, cameras=cameras))
        outputs.append(save_dataset(amb.records, out / "ambiguity.jsonl"))
    for path in outputs:
        log.info("wrote %s", path)
    return outputs, None


def cmd_train(args, out):
    from .trainer import train_loop

    config = _train_config(args)
    dataset = _load(args)
    save_config(config, out / "config.json")
    _, history = train_loop(dataset, config, out_dir=out, resume_from=args.checkpoint)
    if history:
        last = history[-1]
        log.info("finished step %d: loss %.4f", last["step"] + 1, last["loss_total"])
    return [out / "config.json", out / "metrics.csv", out / "checkpoint.npz", out / "model.npz"], config


def cmd_eval_retrieval(args, out):
    from .retrieval import (confidence_accuracy_bins, evaluate_cross_view, evaluate_keypoint_baseline,
                            write_hits_csv, write_results_csv)

    config = _train_config(args)
    dataset = _load(args)
    params = _load_model(args.checkpoint)
    seed = config.seed if args.seed is not None else None
    kwargs = {"seed": seed} if seed is not None else {}
    report = evaluate_cross_view(dataset, params, kappa=config.kappa, samples=config.samples, **kwargs)
    baseline = evaluate_keypoint_baseline(dataset, kappa=config.kappa)
    outputs = [write_hits_csv(report, out / "hits.csv"), write_results_csv(report.results, out / "results.csv"),
               write_hits_csv(baseline, out / "baseline_hits.csv")]
    bins = confidence_accuracy_bins(report.results, args.bins)
    path = out / "confidence_bins.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count", "accuracy"])
        for lo, hi, n, acc in zip(bins.edges[:-1], bins.edges[1:], bins.counts, bins.accuracy):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(n), "" if n == 0 else repr(float(acc))])
    outputs.append(path)
    print(" ".join(f"Hit@{k}={v:.2f}" for k, v in report.average.items()))
    return outputs, config


def cmd_eval_ambiguity(args, out):
    from .retrieval import ambiguity_variance_report

    dataset = _load(args)
    params = _load_model(args.checkpoint)
    camera = args.camera or dataset.cameras[0]
    idx = dataset.camera_indices(camera)
    if len(idx) == 0:
        raise InsufficientData(f"no records for camera {camera!r}")
    report = ambiguity_variance_report(dataset.pose2d[idx], dataset.pose3d[idx], params, args.neighbors)
    path = out / "ambiguity.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "camera_id", "mean_variance", "neighbor_np_mpjpe_2d"])
        for i, v, d in zip(report.indices, report.mean_variance, report.neighbor_np_mpjpe):
            writer.writerow([int(dataset.frame_ids[idx[i]]), camera, repr(float(v)), repr(float(d))])
    rho = report.spearman()
    print(f"spearman={rho.statistic:.4f} p={rho.pvalue:.3g} n={len(report.indices)}")
    return [path], None


def cmd_align(args, out):
    from .data import load_dataset, records_to_sequences
    from .sequences import SequenceConfig, dtw_align_cost, frame_distance_table

    sequences = records_to_sequences(load_dataset(args.dataset))
    params = _load_model(args.checkpoint)
    config = SequenceConfig(samples=args.samples or 20, seed=args.seed or 0)
    qa, qb = _seq_lookup(sequences, args.query), _seq_lookup(sequences, args.target)
    path_ = dtw_align_cost(frame_distance_table(qa, qb, params, config))
    path = out / "alignment.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_frame", "target_frame", "cost"])
        for (i, j), c in zip(path_.pairs, path_.costs):
            writer.writerow([i, j, repr(float(c))])
    print(f"steps={len(path_)} total={path_.total:.4f} mean={path_.total / len(path_):.4f}")
    return [path], None


def cmd_classify(args, out):
    from .data import load_dataset, records_to_sequences
    from .sequences import SequenceConfig, classify_actions

    queries = records_to_sequences(load_dataset(args.dataset))
    index = records_to_sequences(load_dataset(args.index))
    params = _load_model(args.checkpoint)
    config = SequenceConfig(samples=args.samples or 20, seed=args.seed or 0, mirror=not args.no_mirror)
    labels, _ = classify_actions(queries, index, params, config)
    path = out / "predictions.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence_id", "camera_id", "label", "predicted"])
        for q, pred in zip(queries, labels):
            writer.writerow([q.sequence_id, q.view, q.label, pred])
    known = [(q.label, p) for q, p in zip(queries, labels) if q.label is not None]
    if known:
        print(f"accuracy={100.0 * np.mean([a == b for a, b in known]):.2f}% on {len(known)} sequences")
    return [path], None


def cmd_pca_export(args, out):
    from .model import embed
    from .retrieval import pca_project, write_pca_csv

    dataset = _load(args)
    params = _load_model(args.checkpoint)
    result = pca_project(embed(dataset.pose2d, params).mean, args.dims)
    ids = [f"{f}@{c}" for f, c in zip(dataset.frame_ids, dataset.camera_ids)]
    path = write_pca_csv(result, out / "pca.csv", ids=ids)
    print("explained=" + ",".join(f"{e:.4f}" for e in result.explained))
    return [path], None


def cmd_gradcheck(args, out):
    from .gradcheck import gradcheck

    rows, worst = [], 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        report = gradcheck(seed, args.mode)
        worst = max(worst, report.worst)
        rows.extend((seed, name, err) for name, err in report.max_rel_error.items())
    path = out / "gradcheck.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "parameter", "max_rel_error"])
        for seed, name, err in rows:
            writer.writerow([seed, name, repr(err)])
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if not worst < args.tolerance:
        raise FloatingPointError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")
    return [path], None


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-retrieval": cmd_eval_retrieval,
    "eval-ambiguity": cmd_eval_ambiguity, "align": cmd_align, "classify": cmd_classify,
    "pca-export": cmd_pca_export, "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs, config = COMMANDS[args.command](args, out)
        _write_manifest(out, args, config, outputs)
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())

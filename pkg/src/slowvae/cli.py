"""Command-line entry points tying the pipeline together.

Verbs:

  generate          write a dataset file from a config
  train-repr        unsupervised representation training (one method, one seed)
  train-downstream  frozen-encoder head training on one labeled subset
  evaluate          aggregate a run directory into curves / bias-variance /
                    scatter / summary tables
  run-all           generate -> train both methods x seeds -> downstream grid
                    -> evaluate; idempotent (completed cells are skipped via a
                    digest manifest)

Every stage is deterministic in its config and seeds, so reruns reproduce
identical file digests.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import ballsim, dataio, evaluation, nn, training
from .config import METHODS, config_from_dict, load_config
from .errors import InputError, SlowVaeError

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# Artifact layout


def repr_checkpoint_name(method, seed):
    return os.path.join("repr", f"{method}_seed{seed}.slck")


def head_checkpoint_name(method, seed, exponent):
    return os.path.join("heads", f"{method}_seed{seed}_k{exponent}.slck")


def loss_csv_path(checkpoint_path):
    base, _ = os.path.splitext(os.fspath(checkpoint_path))
    return base + "_losses.csv"


def subset_label(exponent):
    return "1" if exponent == 0 else f"1/{2 ** exponent}"


class Manifest:
    """Digest records for completed artifacts inside one output directory."""

    def __init__(self, base_dir):
        self.base_dir = os.fspath(base_dir)
        self.path = os.path.join(self.base_dir, MANIFEST_NAME)
        self.entries = {}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                self.entries = json.load(fh)

    def is_current(self, rel_path, cache_key):
        entry = self.entries.get(rel_path)
        if entry is None or entry.get("cache_key") != cache_key:
            return False
        full = os.path.join(self.base_dir, rel_path)
        return os.path.exists(full) and dataio.file_digest(full) == entry.get("sha256")

    def record(self, rel_path, cache_key):
        full = os.path.join(self.base_dir, rel_path)
        self.entries[rel_path] = {
            "cache_key": cache_key,
            "sha256": dataio.file_digest(full),
        }

    def digest(self, rel_path):
        return self.entries[rel_path]["sha256"]

    def save(self):
        blob = json.dumps(self.entries, sort_keys=True, indent=1).encode()
        dataio.atomic_write_bytes(self.path, blob)


# ---------------------------------------------------------------------------
# Pipeline stages (importable; the cmd_* wrappers add argparse/exit plumbing)


def generate_dataset_file(config, out_path):
    ds = config.dataset
    dataset = ballsim.generate_dataset(
        n_sequences=ds.n_sequences,
        seq_len=ds.sequence_length,
        arena=(ds.width, ds.height),
        radius=ds.radius,
        speed_range=(ds.speed_min, ds.speed_max),
        seed=ds.seed,
    )
    dataio.write_dataset(dataset, out_path)
    return dataset


def train_repr_to_file(config, dataset, method, seed, out_path):
    train_idx, _ = evaluation.split_sequences(dataset, config.evaluation.test_fraction)
    checkpoint = training.train_representation(
        dataset, config.train_config(method, seed), train_idx
    )
    dataio.write_model_checkpoint(checkpoint, out_path)
    dataio.write_loss_log_csv(checkpoint.loss_log, loss_csv_path(out_path))
    return checkpoint


def train_head_to_file(config, dataset, checkpoint, exponent, seed, out_path, method=None):
    train_idx, _ = evaluation.split_sequences(dataset, config.evaluation.test_fraction)
    pairs = training.build_pairs(dataset, train_idx)
    head_config = config.head_config(seed)
    fraction = training.SUBSET_FRACTIONS[exponent]
    head = training.train_downstream(checkpoint, pairs, fraction, head_config)
    extra = {"subset_exponent": exponent}
    if method is not None:
        extra["method"] = method
    dataio.write_head_checkpoint(head, head_config, out_path, extra=extra)
    return head


def _repr_cell_task(config_dict, dataset_path, method, seed, out_path):
    config = config_from_dict(config_dict)
    dataset = dataio.read_dataset(dataset_path)
    train_repr_to_file(config, dataset, method, seed, out_path)
    return out_path


def _head_cell_task(config_dict, dataset_path, repr_path, method, exponent, seed, out_path):
    config = config_from_dict(config_dict)
    dataset = dataio.read_dataset(dataset_path)
    checkpoint = dataio.read_model_checkpoint(repr_path)
    train_head_to_file(config, dataset, checkpoint, exponent, seed, out_path, method=method)
    return out_path


# ---------------------------------------------------------------------------
# Evaluation over a run directory


def _available_cells(config, run_dir):
    """Scan the run tree; return per-method available (seed, exponent) cells
    and the list of missing artifact names."""
    missing = []
    repr_paths = {}
    head_paths = {}
    for method in METHODS:
        for seed in config.downstream.seeds:
            rel = repr_checkpoint_name(method, seed)
            full = os.path.join(run_dir, rel)
            if os.path.exists(full):
                repr_paths[(method, seed)] = full
            else:
                missing.append(rel)
            for k in config.downstream.subset_exponents:
                rel_h = head_checkpoint_name(method, seed, k)
                full_h = os.path.join(run_dir, rel_h)
                if os.path.exists(full_h):
                    head_paths[(method, seed, k)] = full_h
                elif (method, seed) in repr_paths:
                    missing.append(rel_h)
    return repr_paths, head_paths, missing


def evaluate_tree(config, dataset, run_dir, out_dir):
    """Aggregate all available grid cells under ``run_dir`` into result files.

    Returns (summary dict, missing artifact names). Raises InputError when no
    cell at all can be evaluated.
    """
    repr_paths, head_paths, missing = _available_cells(config, run_dir)
    if not head_paths:
        raise InputError(f"no evaluable (checkpoint, head) cells found under {run_dir}")
    os.makedirs(out_dir, exist_ok=True)

    train_idx, test_idx = evaluation.split_sequences(dataset, config.evaluation.test_fraction)
    test_pairs = training.build_pairs(dataset, test_idx)
    test_labels = np.asarray(test_pairs.labels, dtype=np.float64)
    seeds = list(config.downstream.seeds)
    exponents = list(config.downstream.subset_exponents)

    checkpoints = {}
    mse = {}             # (method, seed, k) -> float
    preds = {}           # (method, k) -> {seed: (N, D)}
    n_examples = {}      # (method, k) -> int
    slowness = {}        # method -> {seed: ratio}
    for (method, seed), repr_path in sorted(repr_paths.items()):
        checkpoint = dataio.read_model_checkpoint(repr_path)
        checkpoints[(method, seed)] = checkpoint
        features = training.pair_features(checkpoint.model, test_pairs)
        slowness.setdefault(method, {})[seed] = evaluation.latent_slowness_ratio(
            checkpoint, dataset, test_idx
        )
        for k in exponents:
            head_path = head_paths.get((method, seed, k))
            if head_path is None:
                continue
            head, _, _ = dataio.read_head_checkpoint(head_path)
            prediction = nn.forward(head.net, features)
            mse[(method, seed, k)] = evaluation.mse_of_predictions(prediction, test_labels)
            preds.setdefault((method, k), {})[seed] = prediction
            n_examples[(method, k)] = head.n_examples

    curves = {}
    for method in METHODS:
        rows = []
        sizes = []
        curve_seeds = None
        for k in reversed(exponents):               # ascending subset size
            cell_seeds = sorted(s for (m, s, kk) in mse if m == method and kk == k)
            if not cell_seeds:
                continue
            if curve_seeds is None:
                curve_seeds = cell_seeds
            if cell_seeds != curve_seeds:
                continue                            # ragged grid; keep comparable cells only
            sizes.append(n_examples[(method, k)])
            rows.append([mse[(method, s, k)] for s in cell_seeds])
        if rows:
            curves[method] = (
                evaluation.SubsetCurve.from_matrix(sizes, np.array(rows)),
                curve_seeds,
                [k for k in reversed(exponents)
                 if sorted(s for (m, s, kk) in mse if m == method and kk == k) == curve_seeds],
            )

    _write_curves_csv(os.path.join(out_dir, "curves.csv"), curves)

    bias_variance_rows = []
    for method in METHODS:
        for k in exponents:
            cell = preds.get((method, k))
            if not cell or len(cell) < 2:
                continue
            stacked = np.stack([cell[s] for s in sorted(cell)])
            entry = evaluation.bias_variance(stacked, test_labels)
            mean_mse = float(np.mean([mse[(method, s, k)] for s in sorted(cell)]))
            bias_variance_rows.append(
                (method, k, n_examples[(method, k)], entry.bias_sq, entry.variance, mean_mse)
            )
    _write_bias_variance_csv(os.path.join(out_dir, "bias_variance.csv"), bias_variance_rows)

    scatter_rows = []
    for method in METHODS:
        seed = next((s for s in seeds if (method, s) in checkpoints), None)
        if seed is None:
            continue
        n_scatter = min(config.evaluation.scatter_samples, dataset.n_frames)
        scatter = evaluation.export_latent_scatter(
            checkpoints[(method, seed)], dataset, n_scatter, seed=dataset.seed
        )
        scatter_rows.append((method, seed, scatter))
    _write_scatter_csv(os.path.join(out_dir, "scatter.csv"), scatter_rows)

    summary = _build_summary(config, curves, slowness, bias_variance_rows, len(test_pairs))
    blob = json.dumps(summary, indent=2, sort_keys=True).encode()
    dataio.atomic_write_bytes(os.path.join(out_dir, "summary.json"), blob)
    return summary, missing


def _method_summary(curve_info, slowness_by_seed):
    curve, curve_seeds, _ = curve_info
    means = curve.means
    sizes = curve.sizes
    best = int(np.argmin(means))
    ratios = [slowness_by_seed[s] for s in sorted(slowness_by_seed)]
    return {
        "loss_at_full": float(means[-1]),
        "n_full": int(sizes[-1]),
        "best_loss": float(means[best]),
        "best_n": int(sizes[best]),
        "seeds": list(curve_seeds),
        "slowness_ratio_mean": float(np.mean(ratios)) if ratios else None,
        "slowness_ratio_per_seed": {str(s): slowness_by_seed[s] for s in sorted(slowness_by_seed)},
    }


def _build_summary(config, curves, slowness, bias_variance_rows, n_test_pairs):
    summary = {
        "example_unit": "consecutive-frame pairs",
        "interpolation": "log-linear on (log n, loss)",
        "n_test_pairs": n_test_pairs,
        "subset_exponents": list(config.downstream.subset_exponents),
        "methods": {},
        "data_efficiency": None,
        "performance_improvement_percent": None,
    }
    for method, info in curves.items():
        summary["methods"][method] = _method_summary(info, slowness.get(method, {}))
    if "svae" in curves and "bvae" in curves:
        curve_s, _, ks_s = curves["svae"]
        curve_b, _, ks_b = curves["bvae"]
        if ks_s == ks_b and len(curve_s.points) == len(curve_b.points):
            result = evaluation.data_efficiency(curve_s, curve_b)
            summary["data_efficiency"] = {
                "reference": "bvae",
                "candidate": "svae",
                "achieved": result.achieved,
                "reference_best_loss": result.reference_best_loss,
                "reference_best_n": result.reference_best_n,
                "candidate_n_needed": result.n_needed,
                "percent_savings": result.percent_savings,
            }
            full_b = curve_b.means[-1]
            full_s = curve_s.means[-1]
            if full_b > 0:
                summary["performance_improvement_percent"] = float(
                    100.0 * (full_b - full_s) / full_b
                )
    return summary


def _write_curves_csv(path, curves):
    lines = []
    header_seeds = None
    for method, (curve, curve_seeds, ks) in sorted(curves.items()):
        if header_seeds is None:
            header_seeds = curve_seeds
            lines.append(
                "method,subset,n_examples,loss_mean,loss_std,"
                + ",".join(f"mse_seed_{s}" for s in curve_seeds)
            )
        for point, k in zip(curve.points, ks):
            per_seed = ",".join(repr(float(v)) for v in point.per_seed)
            lines.append(
                f"{method},{subset_label(k)},{point.n_examples},"
                f"{point.loss_mean!r},{point.loss_std!r},{per_seed}"
            )
    if not lines:
        lines = ["method,subset,n_examples,loss_mean,loss_std"]
    dataio.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _write_bias_variance_csv(path, rows):
    lines = ["method,subset,n_examples,bias_sq,variance,mean_mse"]
    for method, k, n, bias_sq, variance, mean_mse in rows:
        lines.append(
            f"{method},{subset_label(k)},{n},{bias_sq!r},{variance!r},{mean_mse!r}"
        )
    dataio.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _write_scatter_csv(path, scatter_rows):
    lines = ["method,seed,ball_x,ball_y,latent_dim_index,latent_value"]
    for method, seed, scatter in scatter_rows:
        for x, y, d, value in scatter.rows:
            lines.append(f"{method},{seed},{x!r},{y!r},{int(d)},{value!r}")
    dataio.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# run-all orchestration


def run_all(config, out_dir, workers=1, log=print):
    """Run the full grid, skipping any cell whose artifact digest already
    matches its inputs. Returns counters describing what was done."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "repr"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "heads"), exist_ok=True)
    manifest = Manifest(out_dir)
    config_dict = config.to_dict()
    stats = {
        "dataset_generated": 0,
        "dataset_skipped": 0,
        "repr_trained": 0,
        "repr_skipped": 0,
        "heads_trained": 0,
        "heads_skipped": 0,
        "evaluated": 0,
        "evaluation_skipped": 0,
    }

    dataset_rel = "dataset.slds"
    dataset_path = os.path.join(out_dir, dataset_rel)
    dataset_key = dataio.content_key({"kind": "dataset", "dataset": config_dict["dataset"]})
    if manifest.is_current(dataset_rel, dataset_key):
        log(f"[skip] dataset (cached) -> {dataset_rel}")
        stats["dataset_skipped"] += 1
        dataset = dataio.read_dataset(dataset_path)
    else:
        log(f"[generate] dataset -> {dataset_rel}")
        dataset = generate_dataset_file(config, dataset_path)
        manifest.record(dataset_rel, dataset_key)
        manifest.save()
        stats["dataset_generated"] += 1
    dataset_digest = manifest.digest(dataset_rel)

    seeds = list(config.downstream.seeds)
    exponents = list(config.downstream.subset_exponents)

    repr_jobs = []
    for method in METHODS:
        for seed in seeds:
            rel = repr_checkpoint_name(method, seed)
            key = dataio.content_key(
                {
                    "kind": "repr",
                    "train_config": config.train_config(method, seed).to_dict(),
                    "test_fraction": config.evaluation.test_fraction,
                    "dataset_digest": dataset_digest,
                }
            )
            if manifest.is_current(rel, key):
                log(f"[skip] repr {method} seed={seed} (cached)")
                stats["repr_skipped"] += 1
            else:
                repr_jobs.append((method, seed, rel, key))

    def on_repr_done(method, seed, rel, key):
        manifest.record(rel, key)
        manifest.save()
        log(f"[train] repr {method} seed={seed} -> {rel}")

    _run_jobs(
        repr_jobs,
        workers,
        on_repr_done,
        task=_repr_cell_task,
        task_args=lambda method, seed, rel, key: (
            config_dict, dataset_path, method, seed, os.path.join(out_dir, rel)
        ),
    )
    stats["repr_trained"] += len(repr_jobs)

    head_jobs = []
    for method in METHODS:
        for seed in seeds:
            repr_rel = repr_checkpoint_name(method, seed)
            repr_digest = manifest.digest(repr_rel)
            for k in exponents:
                rel = head_checkpoint_name(method, seed, k)
                key = dataio.content_key(
                    {
                        "kind": "head",
                        "head_config": config.head_config(seed).to_dict(),
                        "subset_exponent": k,
                        "test_fraction": config.evaluation.test_fraction,
                        "repr_digest": repr_digest,
                        "dataset_digest": dataset_digest,
                    }
                )
                if manifest.is_current(rel, key):
                    stats["heads_skipped"] += 1
                else:
                    head_jobs.append((method, seed, rel, key, k))
    if stats["heads_skipped"]:
        log(f"[skip] {stats['heads_skipped']} cached downstream cells")

    def on_head_done(method, seed, rel, key, k):
        manifest.record(rel, key)
        manifest.save()
        log(f"[train] head {method} seed={seed} subset={subset_label(k)} -> {rel}")

    _run_jobs(
        head_jobs,
        workers,
        on_head_done,
        task=_head_cell_task,
        task_args=lambda method, seed, rel, key, k: (
            config_dict,
            dataset_path,
            os.path.join(out_dir, repr_checkpoint_name(method, seed)),
            method,
            k,
            seed,
            os.path.join(out_dir, rel),
        ),
    )
    stats["heads_trained"] += len(head_jobs)

    results_dir = os.path.join(out_dir, "results")
    head_digests = {
        head_checkpoint_name(m, s, k): manifest.digest(head_checkpoint_name(m, s, k))
        for m in METHODS
        for s in seeds
        for k in exponents
    }
    eval_key = dataio.content_key(
        {
            "kind": "evaluation",
            "evaluation": config_dict["evaluation"],
            "dataset_digest": dataset_digest,
            "heads": head_digests,
        }
    )
    result_rels = [os.path.join("results", n) for n in
                   ("curves.csv", "bias_variance.csv", "scatter.csv", "summary.json")]
    if all(manifest.is_current(rel, eval_key) for rel in result_rels):
        log("[skip] evaluation (cached)")
        stats["evaluation_skipped"] += 1
    else:
        log("[evaluate] aggregating results")
        evaluate_tree(config, dataset, out_dir, results_dir)
        for rel in result_rels:
            manifest.record(rel, eval_key)
        manifest.save()
        stats["evaluated"] += 1
    return stats


def _run_jobs(jobs, workers, on_done, task, task_args):
    """Run cell jobs inline or in a process pool; record results in order."""
    if not jobs:
        return
    if workers <= 1:
        for job in jobs:
            task(*task_args(*job))
            on_done(*job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [(job, pool.submit(task, *task_args(*job))) for job in jobs]
        for job, future in futures:
            future.result()
            on_done(*job)


# ---------------------------------------------------------------------------
# argparse wiring


def cmd_generate(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = config_from_dict(
            {**config.to_dict(), "dataset": {**config.to_dict()["dataset"], "seed": args.seed}}
        )
    dataset = generate_dataset_file(config, args.out)
    size = os.path.getsize(args.out)
    print(
        f"wrote {args.out}: {dataset.n_sequences} sequences x {dataset.seq_len} frames "
        f"({dataset.frame_shape[1]}x{dataset.frame_shape[0]}), seed={dataset.seed}, "
        f"{size} bytes"
    )
    return 0


def cmd_train_repr(args):
    config = load_config(args.config)
    dataset = dataio.read_dataset(args.dataset)
    checkpoint = train_repr_to_file(config, dataset, args.method, args.seed, args.out)
    final = checkpoint.loss_log[-1]
    print(
        f"wrote {args.out}: {args.method} seed={args.seed} epochs={checkpoint.final_epoch} "
        f"final total loss {final.total:.4f}"
    )
    return 0


def _parse_subset(text):
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        fraction = float(num) / float(den)
    else:
        fraction = float(text)
    return training.subset_fraction_exponent(fraction)


def cmd_train_downstream(args):
    config = load_config(args.config)
    dataset = dataio.read_dataset(args.dataset)
    checkpoint = dataio.read_model_checkpoint(args.checkpoint)
    if checkpoint.model.n_pixels != dataset.n_pixels:
        raise InputError(
            f"checkpoint expects {checkpoint.model.n_pixels} pixels per frame but the "
            f"dataset provides {dataset.n_pixels}"
        )
    exponent = _parse_subset(args.subset)
    head = train_head_to_file(config, dataset, checkpoint, exponent, args.seed, args.out)
    print(
        f"wrote {args.out}: subset={subset_label(exponent)} ({head.n_examples} pairs), "
        f"final training MSE {head.loss_log[-1]:.6f}"
    )
    return 0


def cmd_evaluate(args):
    config = load_config(args.config)
    dataset = dataio.read_dataset(args.dataset)
    summary, missing = evaluate_tree(config, dataset, args.run_dir, args.out)
    for rel in missing:
        print(f"missing: {rel}", file=sys.stderr)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_run_all(args):
    config = load_config(args.config)
    stats = run_all(config, args.out, workers=args.workers)
    print(json.dumps(stats, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slowvae",
        description="Train temporal-similarity regularized VAEs on bouncing-ball "
        "sequences and measure few-shot downstream data efficiency.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-repr", help="representation learning for one method/seed")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_repr)

    p = sub.add_parser("train-downstream", help="train one frozen-encoder head")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset", required=True, help="subset fraction, e.g. 1, 1/2, 1/128")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_downstream)

    p = sub.add_parser("evaluate", help="aggregate a run directory into result tables")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="full pipeline with digest-based caching")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SlowVaeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

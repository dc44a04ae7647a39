"""Distribution metrics against exact tables, chain diagnostics and sweeps."""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .sampler import ChainBatch, SamplerConfig, sample

METRIC_NOTE = "exact TV/KL on an enumerable support stand in for FID/IS/FVD"
SWEEP_AXES = ("nfe", "temperature", "cfg_omega", "gumbel_mode")


def empirical_counts(samples) -> Counter:
    """Count sequences given as an ``(N, L)`` array, or pass a mapping through."""
    if isinstance(samples, dict):
        return Counter({k: v for k, v in samples.items() if v > 0})
    samples = np.atleast_2d(np.asarray(samples))
    uniq, counts = np.unique(samples, axis=0, return_counts=True)
    return Counter(dict(zip(map(tuple, uniq.tolist()), counts.tolist())))


def tv_distance(empirical, exact) -> float:
    """Half the L1 distance between the empirical law and the exact table."""
    counts = empirical_counts(empirical)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("empirical distribution is empty")
    table = exact.as_dict() if hasattr(exact, "as_dict") else dict(exact)
    keys = set(counts) | set(table)
    tv = 0.5 * sum(abs(counts.get(k, 0) / total - table.get(k, 0.0)) for k in sorted(keys))
    return min(max(tv, 0.0), 1.0)


def kl_and_leakage(empirical, exact) -> tuple[float, float]:
    """``KL(empirical || exact)`` over in-support samples, plus out-of-support mass."""
    counts = empirical_counts(empirical)
    total = sum(counts.values())
    table = exact.as_dict() if hasattr(exact, "as_dict") else dict(exact)
    kl, leak = 0.0, 0.0
    for key in sorted(counts):
        q = counts[key] / total
        p = table.get(key, 0.0)
        if p > 0:
            kl += q * math.log(q / p)
        else:
            leak += q
    return max(kl, 0.0), leak


def mask_fraction_curve(chains: ChainBatch, length: int | None = None) -> list[tuple[float, float]]:
    """Mean masked fraction of the chains at every recorded time."""
    if length is None:
        length = chains.final.shape[1]
    means = chains.masked_counts.mean(axis=1) / length
    return [(float(t), float(m)) for t, m in zip(chains.times, means)]


def segmentation_scores(pred, truth, n_classes: int) -> dict:
    """Per-class IoU, mean IoU over classes present in either grid, pixel accuracy."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    ious = {}
    for c in range(n_classes):
        p, g = pred == c, truth == c
        union = int(np.sum(p | g))
        if union == 0:
            continue
        ious[c] = float(np.sum(p & g) / union)
    return {
        "per_class_iou": ious,
        "mean_iou": float(np.mean(list(ious.values()))) if ious else float("nan"),
        "accuracy": float(np.mean(pred == truth)),
    }


def class_mass(samples, dataset, cls: int) -> float:
    """Mean posterior probability of class ``cls`` over the sampled sequences."""
    if dataset.labels is None:
        raise ValueError("class mass needs a dataset with labels")
    per_seq: dict = {}
    for row, p, lab in zip(map(tuple, dataset.support.tolist()), dataset.probs, dataset.labels):
        tot, hit = per_seq.get(row, (0.0, 0.0))
        per_seq[row] = (tot + p, hit + (p if lab == cls else 0.0))
    counts = empirical_counts(samples)
    total = sum(counts.values())
    mass = 0.0
    for key, c in counts.items():
        tot, hit = per_seq.get(key, (0.0, 0.0))
        if tot > 0:
            mass += c * hit / tot
    return mass / total


def config_hash(config: SamplerConfig) -> str:
    blob = json.dumps(sampler_config_dict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sampler_config_dict(config: SamplerConfig) -> dict:
    out = dataclasses.asdict(config)
    out["schedule"] = str(config.schedule)
    return out


def evaluate_samples(samples, dataset, chains: ChainBatch | None = None, cond=None) -> dict:
    metrics = {"tv": tv_distance(samples, dataset)}
    metrics["kl"], metrics["leakage"] = kl_and_leakage(samples, dataset)
    if chains is not None:
        metrics["residual_mask_fraction"] = chains.residual_mask_fraction
        metrics["masked_fraction_curve"] = mask_fraction_curve(chains)
    if cond is not None and dataset.labels is not None:
        metrics["class_mass"] = class_mass(samples, dataset, cond)
    return metrics


def point_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def sweep_points(base: SamplerConfig, grid: dict) -> list[SamplerConfig]:
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ValueError(f"unknown sweep axes {sorted(unknown)}; expected a subset of {SWEEP_AXES}")
    axes = [a for a in SWEEP_AXES if a in grid]
    points = []
    for values in itertools.product(*(grid[a] for a in axes)):
        points.append(dataclasses.replace(base, **dict(zip(axes, values))))
    return points


def _run_point(args) -> dict:
    index, config, predictor, dataset, n, cond, base_seed = args
    config = dataclasses.replace(config, seed=point_seed(base_seed, index))
    report = {
        "index": index,
        "note": METRIC_NOTE,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "kind": config.kind,
        "nfe": config.nfe,
        "omega": config.cfg_omega,
        "temperature": config.temperature,
        "gumbel_mode": config.gumbel_mode,
        "samples": n,
    }
    try:
        chains = sample(predictor, config, n, cond=cond)
        report["metrics"] = evaluate_samples(chains.final, dataset, chains, cond)
    except Exception as exc:  # recorded per point; the sweep goes on
        report["error"] = f"{type(exc).__name__}: {exc}"
    return report


def sweep(grid: dict, predictor, dataset, base: SamplerConfig, n: int, base_seed: int = 0,
          out_path=None, cond=None, jobs: int = 1) -> list[dict]:
    """One report per grid point, appended to ``out_path`` as JSON lines.

    Points already present in ``out_path`` are reused, so an interrupted sweep
    resumes where it stopped. Each point's seed depends only on
    ``(base_seed, index)``.
    """
    points = sweep_points(base, grid)
    done: dict = {}
    if out_path is not None and Path(out_path).exists():
        for line in Path(out_path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                done[rec["index"]] = rec
    todo = [(i, cfg, predictor, dataset, n, cond, base_seed)
            for i, cfg in enumerate(points) if i not in done]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_run_point, todo)
            _collect(results, done, out_path)
    else:
        _collect(map(_run_point, todo), done, out_path)
    return [done[i] for i in range(len(points))]


def _collect(results, done: dict, out_path) -> None:
    for report in results:
        done[report["index"]] = report
        if out_path is not None:
            with open(out_path, "a") as fh:
                fh.write(json.dumps(report, sort_keys=True) + "\n")


def summary_table(reports: list[dict], columns=("index", "kind", "nfe", "temperature", "omega",
                                                "gumbel_mode", "tv", "kl", "leakage",
                                                "residual_mask_fraction", "class_mass")) -> str:
    rows = []
    for rep in reports:
        metrics = rep.get("metrics", {})
        row = []
        for col in columns:
            value = rep.get(col, metrics.get(col, ""))
            if "error" in rep and col == "tv":
                value = "error"
            row.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        rows.append(row)
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines) + "\n"


def write_chain_dump(chains: ChainBatch, path, limit: int | None = None) -> None:
    """JSON lines ``{chain, step, t, tokens, masked_count}`` for recorded chains."""
    if chains.snapshots is None:
        raise ValueError("chain snapshots were not recorded")
    n = chains.snapshots.shape[1] if limit is None else min(limit, chains.snapshots.shape[1])
    with open(path, "w") as fh:
        for j in range(n):
            for step, (t, tokens) in enumerate(zip(chains.times, chains.snapshots[:, j])):
                fh.write(json.dumps({
                    "chain": j, "step": step, "t": float(t),
                    "tokens": tokens.tolist(),
                    "masked_count": int((tokens == chains.mask_id).sum()),
                }) + "\n")

"""Command-line interface: ``di gen-dataset | train | sample | eval | sweep``.

Every command writes into a run directory (``--out``, or a timestamped
directory under ``$DI_RUN_DIR`` / ``./runs``) holding the resolved config and
its outputs. Wall-clock metadata lives only in ``meta.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets
from .config import ConfigError, RunConfig, dump_config, load_config
from .eval import evaluate_samples, segmentation_scores, summary_table, sweep, write_chain_dump
from .loss import train
from .predictor import MaskedTokenNet, OraclePredictor, load_checkpoint, save_checkpoint
from .sampler import conditional_sample, sample
from .schedule import Schedule

log = logging.getLogger("discrete_interpolants")

SAMPLES_TAG = "discrete-interpolants samples v1"
GUMBEL_FLAGS = {"none": "none", "linear": "linear_anneal", "constant": "constant", "warmup": "warmup"}


class CliError(RuntimeError):
    pass


def _run_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("DI_RUN_DIR", "runs"))
        out = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{os.getpid()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _start(args, command: str, overrides: dict) -> tuple[RunConfig, Path]:
    if args.config and not Path(args.config).exists():
        raise CliError(f"config file not found: {args.config}")
    config = load_config(args.config, overrides)
    out = _run_dir(args, command)
    (out / "config.toml").write_text(dump_config(config))
    meta = {"command": command, "argv": sys.argv[1:], "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return config, out


def _load_dataset(path) -> datasets.EnumerableDataset:
    if not path:
        raise CliError("a dataset path is required")
    if not Path(path).exists():
        raise CliError(f"dataset file not found: {path}")
    return datasets.load(path)


def _dataset_for(config: RunConfig, path=None) -> datasets.EnumerableDataset:
    path = path or config.dataset
    if path:
        return _load_dataset(path)
    return datasets.build(config.dataset_spec(), np.random.default_rng(config.seed))


def _predictor(args, config: RunConfig):
    """Oracle over ``--oracle`` data, or a trained checkpoint."""
    if args.oracle:
        data = _load_dataset(args.oracle)
        if data.paired:
            layout = data.layout()
            return OraclePredictor(data.joint(), layout.allowed()), data
        return OraclePredictor(data), data
    if not args.checkpoint:
        raise CliError("sampling needs --checkpoint or --oracle")
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint file not found: {args.checkpoint}")
    data = _load_dataset(args.dataset or config.dataset) if (args.dataset or config.dataset) else None
    return load_checkpoint(args.checkpoint), data


def write_samples(path, tokens: np.ndarray, data_size: int, modality: str, extra: dict | None = None) -> None:
    lines = [f"# {SAMPLES_TAG}", f"L={tokens.shape[1]}", f"K_d={data_size}", f"modality={modality}"]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}={value}")
    lines += [f"count={len(tokens)}", "---"]
    lines += [" ".join(map(str, row)) for row in tokens.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_samples(path) -> tuple[dict, np.ndarray]:
    header, rows, body = {}, [], False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not body:
            if not line or line.startswith("#"):
                continue
            if line == "---":
                body = True
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise CliError(f"{path}:{lineno}: malformed header line {raw!r}")
            header[key] = value
        elif line:
            try:
                rows.append([int(v) for v in line.split()])
            except ValueError as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from exc
    if "L" not in header or len(rows) != int(header.get("count", -1)):
        raise CliError(f"{path}: header and body disagree")
    return header, np.array(rows, dtype=np.int64).reshape(len(rows), int(header["L"]))


def _add_common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory (default: timestamped under $DI_RUN_DIR or ./runs)")
    p.add_argument("--jobs", type=int)


def _add_sampler_flags(p):
    p.add_argument("--oracle", help="sample with the exact posterior of this dataset file")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset file (for conditional sampling and evaluation)")
    p.add_argument("--kind", choices=("etm", "itm", "mgm"))
    p.add_argument("--nfe", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--cfg", type=float, dest="cfg_omega")
    p.add_argument("--cfg-mode", choices=("log", "prob"), dest="cfg_mode")
    p.add_argument("--gumbel", choices=tuple(GUMBEL_FLAGS))
    p.add_argument("--gumbel-temp", type=float, dest="gumbel_temp")
    p.add_argument("--confidence", choices=("logprob", "prob", "random"))
    p.add_argument("--no-argmax-finalize", action="store_true")
    p.add_argument("--schedule")
    p.add_argument("--sample-schedule", dest="sample_schedule")
    p.add_argument("--n", type=int, dest="n_samples")
    p.add_argument("--cond", type=int)
    p.add_argument("--given", choices=("x", "y"))


def _sampler_overrides(args) -> dict:
    out = {k: getattr(args, k, None) for k in (
        "seed", "jobs", "kind", "nfe", "temperature", "top_p", "cfg_omega", "cfg_mode", "gumbel_temp",
        "confidence", "schedule", "sample_schedule", "n_samples", "cond", "given")}
    if getattr(args, "gumbel", None):
        out["gumbel_mode"] = GUMBEL_FLAGS[args.gumbel]
    if getattr(args, "no_argmax_finalize", False):
        out["argmax_finalize"] = False
    return out


def cmd_gen_dataset(args) -> int:
    config, out = _start(args, "gen-dataset", {"seed": args.seed})
    data = datasets.build(config.dataset_spec(), np.random.default_rng(config.seed))
    datasets.save(data, out / "dataset.ds")
    log.info("wrote %d support sequences to %s", len(data), out / "dataset.ds")
    return 0


def cmd_train(args) -> int:
    config, out = _start(args, "train", {"seed": args.seed, "steps": args.steps,
                                         "schedule": args.schedule, "variant": args.variant})
    data = _dataset_for(config, args.dataset)
    rng = np.random.default_rng(config.seed)
    if data.paired:
        layout = data.layout()
        net = MaskedTokenNet(layout.vocab, layout.length, config.variant, config.d, config.hidden,
                             allowed=layout.allowed(), rng=rng)
    else:
        net = MaskedTokenNet(data.vocab, data.length, config.variant, config.d, config.hidden, rng=rng)
    datasets.save(data, out / "dataset.ds")
    with open(out / "train_log.jsonl", "w") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        train(net, data, config.train_config(), Schedule.parse(config.schedule), rng, log=record)
    save_checkpoint(net, out / "checkpoint.ckpt")
    log.info("trained %d steps; checkpoint at %s", config.steps, out / "checkpoint.ckpt")
    return 0


def cmd_sample(args) -> int:
    config, out = _start(args, "sample", _sampler_overrides(args))
    predictor, data = _predictor(args, config)
    sconf = config.sampler_config()
    n = config.n_samples
    record = config.dump_chains > 0
    cond = None if config.cond < 0 else config.cond
    if config.given:
        if data is None or not data.paired:
            raise CliError("--given needs a paired dataset (via --oracle or --dataset)")
        layout = data.layout()
        idx = data.sample(n, np.random.default_rng([config.seed, 1]))
        observed = data.support[idx] if config.given == "x" else data.support_y[idx]
        chains = conditional_sample(predictor, layout, observed, sconf, given=config.given,
                                    record=record, rng=np.random.default_rng(config.seed))
        modality, k_d = "joint", layout.vocab.data_size
    else:
        chains = sample(predictor, sconf, n, cond=cond, record=record,
                        rng=np.random.default_rng(config.seed))
        modality, k_d = "x", predictor.vocab.data_size
    extra = {"given": config.given} if config.given else {}
    if cond is not None:
        extra["cond"] = cond
    write_samples(out / "samples.txt", chains.final, k_d, modality, extra)
    if record:
        write_chain_dump(chains, out / "chains.jsonl", limit=config.dump_chains)
    log.info("wrote %d samples to %s", n, out / "samples.txt")
    return 0


def cmd_eval(args) -> int:
    config, out = _start(args, "eval", {"seed": args.seed})
    header, tokens = read_samples(args.samples)
    data = _load_dataset(args.dataset)
    cond = int(header["cond"]) if "cond" in header else None
    report = {"samples": len(tokens), "modality": header.get("modality", "x"),
              "note": "exact TV/KL on an enumerable support stand in for FID/IS/FVD"}
    if header.get("modality") == "joint":
        layout = data.layout()
        report["metrics"] = evaluate_samples(tokens, data.joint())
        x, y = layout.split(tokens)
        truth = {tuple(a): b for a, b in zip(data.support.tolist(), data.support_y)}
        if header.get("given") == "x" and all(tuple(r) in truth for r in x.tolist()):
            true_y = np.stack([truth[tuple(r)] for r in x.tolist()])
            seg = segmentation_scores(y, true_y, data.vocab_y.data_size)
            seg["per_class_iou"] = {str(k): v for k, v in seg["per_class_iou"].items()}
            report["metrics"].update(seg)
    else:
        report["metrics"] = evaluate_samples(tokens, data, cond=cond)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["metrics"], sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    config, out = _start(args, "sweep", _sampler_overrides(args))
    predictor, data = _predictor(args, config)
    if data is None:
        raise CliError("a sweep needs a dataset (--oracle or --dataset) to score against")
    grid = config.sweep_grid()
    if not grid:
        raise CliError("sweep config sets no sweep_* axes")
    cond = None if config.cond < 0 else config.cond
    reports = sweep(grid, predictor, data, config.sampler_config(), config.n_samples,
                    base_seed=config.seed, out_path=out / "reports.jsonl", cond=cond, jobs=config.jobs)
    table = summary_table(reports)
    (out / "summary.txt").write_text(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="di", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="build an enumerable dataset file")
    _add_common(p, config_required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a predictor and write a checkpoint")
    _add_common(p, config_required=True)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--schedule")
    p.add_argument("--variant", choices=("etm", "itm"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample chains from a checkpoint or an oracle")
    _add_common(p)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a samples file against a dataset")
    _add_common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over nfe / temperature / cfg / gumbel")
    _add_common(p, config_required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

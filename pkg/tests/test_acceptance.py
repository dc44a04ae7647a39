"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary. Runtime bounds are part of the check.
"""
import time

import numpy as np
import pytest
from gradcheck import finite_difference_check, randomized_net

from discrete_interpolants import cli
from discrete_interpolants.datasets import DatasetSpec, build, build_shapes_pair
from discrete_interpolants.eval import segmentation_scores, sweep, tv_distance
from discrete_interpolants.interpolant import VocabSpec, corrupt
from discrete_interpolants.loss import TrainConfig, masked_token_ce, train
from discrete_interpolants.predictor import MaskedTokenNet, OraclePredictor, cfg_logits, softmax
from discrete_interpolants.sampler import SamplerConfig, conditional_sample, sample
from discrete_interpolants.schedule import KINDS, Schedule, kappa, kappa_dot

pytestmark = pytest.mark.slow


def reference_markov():
    """L=6, K_d=4 sticky chain: 4,096 sequences, all enumerated."""
    off = 0.1 / 3
    transition = np.full((4, 4), off) + np.eye(4) * (0.9 - off)
    return build(DatasetSpec(kind="markov", length=6, data_size=4, initial=[0.4, 0.3, 0.2, 0.1],
                             transition=transition.tolist()))


def small_markov():
    return build(DatasetSpec(kind="markov", length=4, data_size=3, initial=[0.5, 0.3, 0.2],
                             transition=[[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]]))


def two_class_table():
    """p(c) = 1/2 and p(x | c) a product of per-token laws that differ by class."""
    q = {0: np.array([0.5, 0.3, 0.2]), 1: np.array([0.2, 0.3, 0.5])}
    entries, labels = [], []
    for c in (0, 1):
        for x in np.ndindex(3, 3, 3):
            entries.append((list(x), 0.5 * float(np.prod(q[c][list(x)]))))
            labels.append(c)
    return build(DatasetSpec(kind="table", length=3, data_size=3, entries=entries, labels=labels))


def shapes():
    return build_shapes_pair(DatasetSpec(kind="shapes_pair", height=4, width=4, rect_min=1, rect_max=2,
                                         n_colors=3, n_classes=2))


def test_criterion_1_schedules(criterion):
    start = time.perf_counter()
    worst_fd, failures = 0.0, []
    for kind in KINDS:
        s = Schedule(kind)
        values = np.array([kappa(s, t) for t in np.linspace(0, 1, 1001)])
        if abs(kappa(s, 0.0)) > 1e-12 or abs(kappa(s, 1.0) - 1) > 1e-12:
            failures.append(f"{kind} endpoints")
        if np.any(np.diff(values) < 0):
            failures.append(f"{kind} monotone")
        for t in np.round(np.arange(0.05, 0.951, 0.05), 10):
            h = 1e-5
            fd = (kappa(s, t + h) - kappa(s, t - h)) / (2 * h)
            worst_fd = max(worst_fd, abs(kappa_dot(s, t) - fd) / abs(fd))
    elapsed = time.perf_counter() - start
    ok = not failures and worst_fd <= 1e-4 and elapsed < 1.0
    criterion("criterion 1 (schedules)", ok,
              f"{len(KINDS)} schedules, worst derivative rel err {worst_fd:.2e}, "
              f"failures {failures or 'none'}, {elapsed:.2f}s")


def test_criterion_2_forward_marginals(criterion):
    start = time.perf_counter()
    n, length = 100_000, 4
    rng = np.random.default_rng(0)
    x1 = rng.integers(0, 4, size=(n, length))
    worst = 0.0
    for kind in KINDS:
        s = Schedule(kind)
        for t in np.round(np.arange(0.1, 0.91, 0.1), 10):
            p = 1 - kappa(s, t)
            freq = corrupt(x1, t, s, rng, VocabSpec(4)).masked.mean(axis=0)
            sigma = np.sqrt(p * (1 - p) / n)
            worst = max(worst, float(np.max(np.abs(freq - p)) / sigma))
    elapsed = time.perf_counter() - start
    criterion("criterion 2 (forward marginals)", worst <= 4.0 and elapsed < 30.0,
              f"worst per-token deviation {worst:.2f} sigma (bound 4), {elapsed:.1f}s")


def test_criterion_3_distribution_recovery(criterion):
    start = time.perf_counter()
    ds = reference_markov()
    itm = sample(OraclePredictor(ds), SamplerConfig(kind="itm", nfe=256, seed=11), 200_000)
    etm = sample(OraclePredictor(ds), SamplerConfig(kind="etm", nfe=256, seed=11), 200_000)
    tv = tv_distance(itm.final, ds)
    same = (np.array_equal(itm.final, etm.final) and np.array_equal(itm.pre_finalize, etm.pre_finalize)
            and np.array_equal(itm.masked_counts, etm.masked_counts))
    elapsed = time.perf_counter() - start
    criterion("criterion 3 (distribution recovery)", tv <= 0.02 and same and elapsed < 300,
              f"oracle ITM TV {tv:.4f} (bound 0.02), ITM/ETM chains identical: {same}, {elapsed:.0f}s")


def test_criterion_4_any_order(criterion):
    start = time.perf_counter()
    ds = reference_markov()
    cfg = SamplerConfig(kind="mgm", nfe=ds.length, schedule="linear", gumbel_mode="none", temperature=1.0,
                        confidence="random", seed=12)
    chains = sample(OraclePredictor(ds), cfg, 200_000)
    tv = tv_distance(chains.final, ds)
    elapsed = time.perf_counter() - start
    criterion("criterion 4 (any-order exactness)", tv <= 0.02 and elapsed < 300,
              f"one token per step, random order, TV {tv:.4f} (bound 0.02), {elapsed:.0f}s")


def test_criterion_5_argmax_churn(criterion):
    start = time.perf_counter()
    ds = reference_markov()
    oracle = OraclePredictor(ds)
    mask = ds.vocab.mask_id
    linear = sample(oracle, SamplerConfig(nfe=4, schedule="linear", seed=13), 1000)
    cosine = sample(oracle, SamplerConfig(nfe=4, schedule="cosine", seed=13), 1000)
    residual = linear.residual_mask_fraction
    post_linear = float(np.mean(linear.final == mask))
    post_cosine = float(np.mean(cosine.final == mask))
    elapsed = time.perf_counter() - start
    ok = residual > 0.05 and post_linear == 0 and post_cosine == 0 and elapsed < 60
    criterion("criterion 5 (argmax churn)", ok,
              f"pre-finalize residual mask fraction {residual:.4f} (needs > 0.05), post-finalize "
              f"{post_linear} (linear) / {post_cosine} (cosine, residual "
              f"{cosine.residual_mask_fraction:.4f}), {elapsed:.1f}s")


def test_criterion_6_gradients(criterion):
    start = time.perf_counter()
    worst, instances = 0.0, 0
    for seed in range(24):
        net, rng = randomized_net(100 + seed, "etm" if seed % 2 else "itm")
        assert net.length <= 6 and net.vocab.data_size <= 5 and net.d <= 16
        worst = max(worst, max(finite_difference_check(net, rng).values()))
        instances += 1
    elapsed = time.perf_counter() - start
    criterion("criterion 6 (gradient correctness)", worst <= 1e-4 and instances >= 20 and elapsed < 60,
              f"{instances} instances, worst per-tensor rel err {worst:.2e} (bound 1e-4), {elapsed:.1f}s")


def test_criterion_7_learning(criterion):
    start = time.perf_counter()
    ds = small_markov()
    linear = Schedule("linear")
    net = MaskedTokenNet(ds.vocab, ds.length, "itm", d=64, hidden=128, rng=np.random.default_rng(0))
    train(net, ds, TrainConfig(steps=20_000, batch_size=128, learning_rate=0.03), linear,
          np.random.default_rng(1))
    chains = sample(net, SamplerConfig(kind="itm", nfe=128, seed=2), 100_000)
    tv = tv_distance(chains.final, ds)

    # ablation: same steps with and without restricting the loss to masked tokens
    table = build(DatasetSpec(kind="table", length=4, data_size=3, entries=[
        ([0, 1, 2, 0], 0.25), ([1, 1, 0, 2], 0.25), ([2, 0, 1, 1], 0.25), ([0, 2, 2, 1], 0.25)]))
    ce = {True: [], False: []}
    for seed in range(5):
        for masking in (True, False):
            model = MaskedTokenNet(table.vocab, 4, "itm", d=64, hidden=128, rng=np.random.default_rng(seed))
            train(model, table, TrainConfig(steps=2000, batch_size=128, learning_rate=0.03, masking_ce=masking),
                  linear, np.random.default_rng(seed + 10))
            ce[masking].append(masked_token_ce(model, table, 50_000, linear, np.random.default_rng(99)))
    with_mask, without = float(np.mean(ce[True])), float(np.mean(ce[False]))
    elapsed = time.perf_counter() - start
    ok = tv <= 0.10 and without > with_mask and elapsed < 900
    criterion("criterion 7 (learning end-to-end)", ok,
              f"trained ITM TV {tv:.4f} (bound 0.10); held-out masked CE {with_mask:.4f} with masking vs "
              f"{without:.4f} without; {elapsed:.0f}s")


def test_criterion_8_joint(criterion):
    start = time.perf_counter()
    ds = shapes()
    layout = ds.layout()
    net = MaskedTokenNet(layout.vocab, layout.length, "itm", d=16, hidden=128, allowed=layout.allowed(),
                         rng=np.random.default_rng(0))
    train(net, ds, TrainConfig(steps=5000, batch_size=64, learning_rate=0.03), Schedule("linear"),
          np.random.default_rng(1))
    chains = conditional_sample(net, layout, ds.support, SamplerConfig(nfe=32, seed=3), given="x", record=True)
    x_snaps, y_pred = layout.split(chains.snapshots)[0], layout.split(chains.final)[1]
    clamped = bool(np.all(x_snaps == ds.support[None]))
    accuracy = segmentation_scores(y_pred, ds.support_y, layout.vocab_y.data_size)["accuracy"]

    oracle = OraclePredictor(ds.joint(), layout.allowed())
    grids = np.unique(ds.support_y, axis=0)
    picks = grids[np.random.default_rng(4).choice(len(grids), size=4, replace=False)]
    worst_tv = 0.0
    for i, y in enumerate(picks):
        rows = np.all(ds.support_y == y, axis=1)
        exact = {}
        for x, p in zip(map(tuple, ds.support[rows].tolist()), ds.probs[rows]):
            exact[x] = exact.get(x, 0.0) + p
        total = sum(exact.values())
        exact = {k: v / total for k, v in exact.items()}
        xs = []
        for chunk in range(10):
            out = conditional_sample(oracle, layout, y, SamplerConfig(nfe=256, seed=100 * i + chunk), n=2500,
                                     given="y", record=True)
            clamped &= bool(np.all(layout.split(out.snapshots)[1] == y))
            xs.append(layout.split(out.final)[0])
        worst_tv = max(worst_tv, tv_distance(np.concatenate(xs), exact))
    elapsed = time.perf_counter() - start
    ok = accuracy >= 0.95 and worst_tv <= 0.03 and clamped and elapsed < 900
    criterion("criterion 8 (joint task)", ok,
              f"label pixel accuracy {accuracy:.4f} (bound 0.95), worst p(x|y) TV {worst_tv:.4f} "
              f"over 4 label grids (bound 0.03), clamping held: {clamped}, {elapsed:.0f}s")


def test_criterion_9_cfg(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    anchor = 0.0
    for _ in range(200):
        cond, uncond = rng.normal(size=(2, 5, 7)) * 3
        for mode in ("log", "prob"):
            anchor = max(anchor,
                         np.abs(softmax(cfg_logits(cond, uncond, 1.0, mode)) - softmax(cond)).max(),
                         np.abs(softmax(cfg_logits(cond, uncond, 0.0, mode)) - softmax(uncond)).max())

    ds = two_class_table()
    grid = {"cfg_omega": [0.0, 1.0, 2.0, 3.0, 4.0]}
    base = SamplerConfig(nfe=64)
    runs = [sweep(grid, OraclePredictor(ds), ds, base, 20_000, base_seed=5, cond=1) for _ in range(2)]
    deterministic = runs[0] == runs[1]
    mass = [float(r["metrics"]["class_mass"]) for r in runs[0]]
    # omega = 0 switches guidance off, so points 0 and 1 both sample the conditional law
    noise = 4 * np.sqrt(2 * 0.25 / 20_000)
    monotone = abs(mass[0] - mass[1]) <= noise and all(b > a for a, b in zip(mass[1:], mass[2:]))
    elapsed = time.perf_counter() - start
    ok = anchor <= 1e-9 and deterministic and monotone and elapsed < 300
    criterion("criterion 9 (guidance)", ok,
              f"anchor error {anchor:.1e} (bound 1e-9), deterministic sweep: {deterministic}, "
              f"class-1 mass by omega {[round(m, 4) for m in mass]}, {elapsed:.0f}s")


def run_all_commands(base, config):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0, argv

    run("gen-dataset", "--config", config, "--out", base / "gen")
    ds = base / "gen" / "dataset.ds"
    run("train", "--config", config, "--dataset", ds, "--out", base / "train")
    run("train", "--config", config, "--dataset", ds, "--variant", "etm", "--out", base / "train_etm")
    run("sample", "--config", config, "--checkpoint", base / "train" / "checkpoint.ckpt", "--out", base / "sample")
    run("sample", "--config", config, "--checkpoint", base / "train_etm" / "checkpoint.ckpt", "--kind", "etm",
        "--out", base / "sample_etm")
    run("sample", "--config", config, "--oracle", ds, "--kind", "mgm", "--nfe", 3, "--gumbel", "linear",
        "--gumbel-temp", 2.0, "--out", base / "sample_mgm")
    run("eval", "--samples", base / "sample" / "samples.txt", "--dataset", ds, "--out", base / "eval")
    run("sweep", "--config", config, "--oracle", ds, "--out", base / "sweep")

    joint = base.parent / "joint.toml"
    run("gen-dataset", "--config", joint, "--out", base / "jgen")
    jds = base / "jgen" / "dataset.ds"
    run("train", "--config", joint, "--dataset", jds, "--out", base / "jtrain")
    run("sample", "--config", joint, "--checkpoint", base / "jtrain" / "checkpoint.ckpt", "--dataset", jds,
        "--given", "x", "--out", base / "jsample")
    run("eval", "--samples", base / "jsample" / "samples.txt", "--dataset", jds, "--out", base / "jeval")


def test_criterion_10_reproducibility(criterion, tmp_path):
    start = time.perf_counter()
    config = tmp_path / "run.toml"
    config.write_text("seed = 4\nlength = 3\ndata_size = 3\nsteps = 200\nbatch_size = 32\nd = 16\nhidden = 32\n"
                      "nfe = 32\nn_samples = 2000\nsweep_nfe = [4, 32]\nsweep_cfg_omega = [0.0, 2.0]\n")
    (tmp_path / "joint.toml").write_text(
        'seed = 4\ndataset_kind = "shapes_pair"\nheight = 3\nwidth = 3\nn_colors = 2\nn_classes = 2\n'
        "steps = 200\nbatch_size = 32\nd = 8\nhidden = 32\nnfe = 16\nn_samples = 200\n")
    for rep in ("a", "b"):
        run_all_commands(tmp_path / rep, config)
    mismatched, compared = [], 0
    for run_dir in sorted((tmp_path / "a").iterdir()):
        for path in sorted(run_dir.iterdir()):
            if path.name == "meta.json":
                continue
            compared += 1
            if path.read_bytes() != (tmp_path / "b" / run_dir.name / path.name).read_bytes():
                mismatched.append(f"{run_dir.name}/{path.name}")
    elapsed = time.perf_counter() - start
    criterion("criterion 10 (reproducibility)", not mismatched,
              f"{compared} output files across 12 commands compared byte for byte, "
              f"mismatches: {mismatched or 'none'}, {elapsed:.0f}s")

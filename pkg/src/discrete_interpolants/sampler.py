"""Reverse-time generation from an unmasking predictor.

Three samplers share the per-step logit pipeline (guidance, then temperature,
then top-p):

* ``etm`` / ``itm``: fixed-step Euler simulation of the unmasking process. A
  masked token is revealed with probability ``min(1, dt * rate(t))`` and then
  drawn from the predicted categorical; revealed tokens are never touched again.
  ``etm`` passes t to the predictor, ``itm`` does not.
* ``mgm``: confidence-ranked decoding that fixes ``ceil(kappa(n / nfe) * L)``
  tokens after step n and re-masks the other candidates.

All samplers run N chains at once; chain state is an ``(N, L)`` integer array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .interpolant import CorruptionState, VocabSpec
from .predictor import NEG, cfg_logits, log_softmax
from .schedule import Schedule, kappa, unmask_rate

KINDS = ("etm", "itm", "mgm")
GUMBEL_MODES = ("none", "linear_anneal", "constant", "warmup")
CONFIDENCE_MODES = ("logprob", "prob", "random")
WARMUP_STEPS = 2


class SamplerConfigError(ValueError):
    pass


@dataclass
class SamplerConfig:
    kind: str = "itm"
    nfe: int = 1000
    schedule: Schedule = field(default_factory=Schedule)
    temperature: float = 1.0
    top_p: float = 1.0
    cfg_omega: float = 0.0
    cfg_mode: str = "log"
    gumbel_mode: str = "none"
    gumbel_temp: float = 0.0
    confidence: str = "logprob"
    argmax_finalize: bool = True
    epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, str):
            self.schedule = Schedule.parse(self.schedule)
        if self.kind not in KINDS:
            raise SamplerConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if int(self.nfe) != self.nfe or self.nfe < 1:
            raise SamplerConfigError(f"nfe must be a positive integer, got {self.nfe!r}")
        if not self.temperature > 0:
            raise SamplerConfigError(f"temperature must be positive, got {self.temperature!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise SamplerConfigError(f"top_p must lie in (0, 1], got {self.top_p!r}")
        if not math.isfinite(self.cfg_omega):
            raise SamplerConfigError("cfg_omega must be finite")
        if self.cfg_mode not in ("log", "prob"):
            raise SamplerConfigError(f"cfg_mode must be 'log' or 'prob', got {self.cfg_mode!r}")
        if self.gumbel_mode not in GUMBEL_MODES:
            raise SamplerConfigError(f"gumbel_mode must be one of {GUMBEL_MODES}, got {self.gumbel_mode!r}")
        if not self.gumbel_temp >= 0:
            raise SamplerConfigError(f"gumbel_temp must be nonnegative, got {self.gumbel_temp!r}")
        if self.confidence not in CONFIDENCE_MODES:
            raise SamplerConfigError(f"confidence must be one of {CONFIDENCE_MODES}, got {self.confidence!r}")
        if not 0.0 < self.epsilon < 0.5:
            raise SamplerConfigError(f"epsilon must lie in (0, 0.5), got {self.epsilon!r}")
        self.nfe = int(self.nfe)

    @property
    def dt(self) -> float:
        return (1.0 - 2.0 * self.epsilon) / self.nfe

    def time_grid(self) -> np.ndarray:
        return self.epsilon + self.dt * np.arange(self.nfe + 1)


def filter_top_p(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest high-probability prefix holding at least ``top_p`` mass.

    Ties in probability are ordered by lower token id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sorted_p, axis=-1) - sorted_p
    keep_sorted = before < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def gumbel_scale(config: SamplerConfig, n: int) -> float:
    """Gumbel noise magnitude at 1-based MGM step ``n``."""
    mode = config.gumbel_mode
    if mode == "none":
        return 0.0
    if mode == "constant":
        return config.gumbel_temp
    if mode == "warmup":
        return config.gumbel_temp if n <= WARMUP_STEPS else 0.0
    return config.gumbel_temp * (1.0 - n / config.nfe)


def _unique_rows(x: np.ndarray, cond: np.ndarray):
    keyed = np.concatenate([x, cond[:, None]], axis=1)
    uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
    return uniq[:, :-1], uniq[:, -1], inverse.reshape(-1)


class _Guide:
    """Evaluates filtered log-probabilities for a set of chains.

    ``clamp`` marks observed positions. The null branch used by guidance masks
    those positions and swaps the condition for the null token.
    """

    def __init__(self, predictor, config: SamplerConfig, vocab: VocabSpec, cond, clamp, n: int):
        self.predictor = predictor
        self.config = config
        self.vocab = vocab
        self.has_cond = cond is not None
        if cond is None:
            self.cond = np.full(n, vocab.null_cond_id, dtype=np.int64)
        else:
            self.cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,)).copy()
        self.clamp = clamp

    @property
    def guided(self) -> bool:
        return self.config.cfg_omega != 0 and (self.has_cond or self.clamp is not None)

    def _raw(self, x: np.ndarray, cond: np.ndarray, t: float) -> np.ndarray:
        t_in = t if self.config.kind == "etm" else None
        ux, ucond, inverse = _unique_rows(x, cond)
        return self.predictor.logits(ux, t_in, ucond)[inverse]

    def logprobs(self, x: np.ndarray, rows: np.ndarray, t: float) -> np.ndarray:
        cfg = self.config
        cond = self.cond[rows]
        logits = self._raw(x, cond, t)
        if self.guided:
            x_null = x.copy()
            if self.clamp is not None:
                x_null[:, self.clamp] = self.vocab.mask_id
            null = np.full_like(cond, self.vocab.null_cond_id)
            logits = cfg_logits(logits, self._raw(x_null, null, t), cfg.cfg_omega, cfg.cfg_mode)
        dead = logits <= NEG / 2
        scaled = np.where(dead, NEG, log_softmax(np.where(dead, NEG, logits)) / cfg.temperature)
        logp = log_softmax(scaled)
        if cfg.top_p < 1.0:
            probs = filter_top_p(np.exp(logp), cfg.top_p)
            with np.errstate(divide="ignore"):
                logp = np.where(probs > 0, np.log(probs), NEG)
        return np.where(dead, NEG, logp)


def _categorical(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from each row of ``exp(logp)``; zero-mass ids are never drawn."""
    probs = np.exp(logp)
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= (u * cdf[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, logp.shape[-1] - 1)


def _step(x: np.ndarray, t: float, dt: float, guide: _Guide, rng: np.random.Generator) -> np.ndarray:
    cfg = guide.config
    mask_id = guide.vocab.mask_id
    h = min(1.0, dt * unmask_rate(cfg.schedule, t))
    masked = x == mask_id
    event = masked & (rng.random(x.shape) < h)
    rows = np.flatnonzero(event.any(axis=1))
    if len(rows) == 0:
        return x
    sub_event = event[rows]
    logp = guide.logprobs(x[rows], rows, t)
    draws = _categorical(logp[sub_event], rng.random(int(sub_event.sum())))
    out = x.copy()
    sub = out[rows]
    sub[sub_event] = draws
    out[rows] = sub
    return out


def step(state: CorruptionState, dt: float, predictor, config: SamplerConfig,
         rng: np.random.Generator, vocab: VocabSpec, cond=None) -> CorruptionState:
    """Advance ``state`` (one chain or a batch) by one Euler step of size ``dt``."""
    if state.t + dt > 1.0 - config.epsilon + 1e-9:
        raise SamplerConfigError(f"step from t={state.t} by dt={dt} passes 1 - epsilon")
    x = np.atleast_2d(state.x_t)
    guide = _Guide(predictor, config, vocab, cond, None, len(x))
    out = _step(x, state.t, dt, guide, rng)
    out = out.reshape(np.shape(state.x_t))
    return CorruptionState(out, state.t + dt, out == vocab.mask_id)


@dataclass
class Chain:
    """Snapshots ``tokens[i]`` at times ``times[i]`` for one chain."""

    times: np.ndarray
    tokens: np.ndarray
    mask_id: int

    @property
    def masked_counts(self) -> np.ndarray:
        return (self.tokens == self.mask_id).sum(axis=-1)

    @property
    def final(self) -> np.ndarray:
        return self.tokens[-1]


@dataclass
class ChainBatch:
    """Outcome of N chains sampled together.

    ``masked_counts[i, j]`` is the mask count of chain j at ``times[i]``;
    ``snapshots`` holds the full ``(T, N, L)`` states only when recorded.
    With argmax finalisation the last time entry is ``1.0``.
    """

    times: np.ndarray
    final: np.ndarray
    pre_finalize: np.ndarray
    masked_counts: np.ndarray
    mask_id: int
    snapshots: np.ndarray | None = None

    def chain(self, i: int) -> Chain:
        if self.snapshots is None:
            raise ValueError("chain snapshots were not recorded; sample with record=True")
        return Chain(self.times, self.snapshots[:, i], self.mask_id)

    @property
    def residual_mask_fraction(self) -> float:
        return float((self.pre_finalize == self.mask_id).mean())


def _initial(n: int, length: int, vocab: VocabSpec, clamp, observed) -> np.ndarray:
    x = np.full((n, length), vocab.mask_id, dtype=np.int64)
    if clamp is not None:
        x[:, clamp] = np.broadcast_to(observed, (n, int(clamp.sum())))
    return x


def _finalize(x: np.ndarray, t: float, guide: _Guide) -> np.ndarray:
    masked = x == guide.vocab.mask_id
    rows = np.flatnonzero(masked.any(axis=1))
    if len(rows) == 0:
        return x
    logp = guide.logprobs(x[rows], rows, t)
    out = x.copy()
    sub = out[rows]
    sub[masked[rows]] = np.argmax(logp, axis=-1)[masked[rows]]
    out[rows] = sub
    return out


def argmax_finalize(x, predictor, config: SamplerConfig, vocab: VocabSpec, cond=None, t=None) -> np.ndarray:
    """Fill every residual mask with the argmax of its filtered scores."""
    x = np.asarray(x, dtype=np.int64)
    batch = np.atleast_2d(x)
    guide = _Guide(predictor, config, vocab, cond, None, len(batch))
    out = _finalize(batch, 1.0 - config.epsilon if t is None else t, guide)
    return out.reshape(x.shape)


def _run_euler(guide: _Guide, x: np.ndarray, rng: np.random.Generator, record: bool) -> ChainBatch:
    cfg = guide.config
    mask_id = guide.vocab.mask_id
    grid = cfg.time_grid()
    counts = [(x == mask_id).sum(axis=1)]
    snaps = [x] if record else None
    for n in range(cfg.nfe):
        x = _step(x, grid[n], cfg.dt, guide, rng)
        counts.append((x == mask_id).sum(axis=1))
        if record:
            snaps.append(x)
    pre = x
    times = list(grid)
    if cfg.argmax_finalize:
        x = _finalize(x, grid[-1], guide)
        times.append(1.0)
        counts.append((x == mask_id).sum(axis=1))
        if record:
            snaps.append(x)
    return ChainBatch(np.array(times), x, pre, np.stack(counts), mask_id,
                      np.stack(snaps) if record else None)


def mgm_counts(config: SamplerConfig, length: int) -> list[int]:
    """Cumulative number of fixed tokens after each of the ``nfe`` steps."""
    counts = []
    for n in range(1, config.nfe + 1):
        if n == config.nfe:
            counts.append(length)
            continue
        # the guard keeps exact products like kappa * L = 2.0000000000000004 at 2
        counts.append(min(length, math.ceil(kappa(config.schedule, n / config.nfe) * length - 1e-9)))
    return counts


def _run_mgm(guide: _Guide, x: np.ndarray, free: np.ndarray, rng: np.random.Generator,
             record: bool) -> ChainBatch:
    cfg = guide.config
    mask_id = guide.vocab.mask_id
    n_free = int(free.sum())
    if cfg.nfe > n_free:
        raise SamplerConfigError(f"mgm needs nfe <= number of generated positions ({cfg.nfe} > {n_free})")
    n_chains, length = x.shape
    counts = [(x == mask_id).sum(axis=1)]
    snaps = [x] if record else None
    times = [0.0]
    done = 0
    all_rows = np.arange(n_chains)
    for n, target in enumerate(mgm_counts(cfg, n_free), start=1):
        t_n = n / cfg.nfe
        u_cat = rng.random(x.shape)
        gumbel = -np.log(-np.log(rng.random(x.shape).clip(1e-300, 1.0 - 1e-16)))
        u_rand = rng.random(x.shape) if cfg.confidence == "random" else None
        n_new = target - done
        if n_new > 0:
            masked = x == mask_id
            logp = guide.logprobs(x, all_rows, min(t_n, 1.0 - cfg.epsilon))
            cand = _categorical(logp, u_cat)
            picked = np.take_along_axis(logp, cand[..., None], axis=-1)[..., 0]
            if cfg.confidence == "logprob":
                conf = picked
            elif cfg.confidence == "prob":
                conf = np.exp(picked)
            else:
                conf = u_rand
            conf = conf + gumbel_scale(cfg, n) * gumbel
            conf = np.where(masked, conf, -np.inf)
            order = np.argsort(-conf, axis=1, kind="stable")[:, :n_new]
            x = x.copy()
            np.put_along_axis(x, order, np.take_along_axis(cand, order, axis=1), axis=1)
            done = target
        counts.append((x == mask_id).sum(axis=1))
        times.append(t_n)
        if record:
            snaps.append(x)
    return ChainBatch(np.array(times), x, x, np.stack(counts), mask_id,
                      np.stack(snaps) if record else None)


def sample(predictor, config: SamplerConfig, n: int, length: int | None = None,
           vocab: VocabSpec | None = None, cond=None, record: bool = False,
           rng: np.random.Generator | None = None) -> ChainBatch:
    """Sample ``n`` chains from scratch with the configured sampler."""
    length = predictor.length if length is None else length
    vocab = predictor.vocab if vocab is None else vocab
    rng = np.random.default_rng(config.seed) if rng is None else rng
    guide = _Guide(predictor, config, vocab, cond, None, n)
    x = _initial(n, length, vocab, None, None)
    if config.kind == "mgm":
        return _run_mgm(guide, x, np.ones(length, dtype=bool), rng, record)
    return _run_euler(guide, x, rng, record)


def sample_chain(predictor, config: SamplerConfig, cond=None, length: int | None = None,
                 vocab: VocabSpec | None = None, rng: np.random.Generator | None = None) -> Chain:
    """One chain with every snapshot recorded."""
    batch = sample(predictor, config, 1, length, vocab, cond=None if cond is None else [cond],
                   record=True, rng=rng)
    return batch.chain(0)


def mgm_sample(predictor, config: SamplerConfig, n: int = 1, cond=None, length: int | None = None,
               vocab: VocabSpec | None = None, record: bool = False,
               rng: np.random.Generator | None = None) -> ChainBatch:
    if config.kind != "mgm":
        raise SamplerConfigError("mgm_sample needs a config with kind='mgm'")
    return sample(predictor, config, n, length, vocab, cond, record, rng)


def conditional_sample(predictor, layout, observed, config: SamplerConfig, n: int | None = None,
                       given: str = "x", record: bool = False,
                       rng: np.random.Generator | None = None) -> ChainBatch:
    """Sample the unknown modality of a joint predictor with the other one clamped.

    ``observed`` is the known modality in its own vocabulary, either one sequence
    shared by all chains or one row per chain. Guidance contrasts against the
    same state with the observed positions masked.
    """
    if given not in ("x", "y"):
        raise ValueError("given must be 'x' or 'y'")
    own_vocab = layout.vocab_x if given == "x" else layout.vocab_y
    observed = np.atleast_2d(np.asarray(observed, dtype=np.int64))
    if np.any(observed == own_vocab.mask_id):
        raise ValueError("the observed modality must not contain mask tokens")
    own_vocab.check_clean(observed)
    n = len(observed) if n is None else n
    clamp = np.zeros(layout.length, dtype=bool)
    if given == "x":
        clamp[: layout.len_x] = True
        filler = np.full((len(observed), layout.len_y), layout.vocab_y.mask_id)
        z_obs = layout.concat(observed, filler)[:, clamp]
    else:
        clamp[layout.len_x:] = True
        filler = np.full((len(observed), layout.len_x), layout.vocab_x.mask_id)
        z_obs = layout.concat(filler, observed)[:, clamp]
    vocab = layout.vocab
    rng = np.random.default_rng(config.seed) if rng is None else rng
    guide = _Guide(predictor, config, vocab, None, clamp, n)
    x = _initial(n, layout.length, vocab, clamp, z_obs)
    if config.kind == "mgm":
        return _run_mgm(guide, x, ~clamp, rng, record)
    return _run_euler(guide, x, rng, record)

"""Unmasking predictors p(x_1 | x_t [, t]).

Two implementations share one calling convention,
``predictor.logits(x_t, t, cond) -> (N, L, K)``:

* :class:`OraclePredictor` enumerates a dataset's support and returns the exact
  Bayes posterior. It never looks at ``t``.
* :class:`MaskedTokenNet` is a small numpy network (embeddings, two tanh dense
  layers, per-position output heads) with a hand-written backward pass. The
  ``etm`` variant embeds t, the ``itm`` variant has no time input at all.

Scores for tokens a position may not emit (mask, null condition, the other
modality's ids) are pinned to ``NEG``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datasets import EnumerableDataset
from .interpolant import VocabSpec
from .loss import masked_ce, masked_ce_grad

NEG = -1e30
TIME_BINS = 64
CHECKPOINT_MAGIC = b"DICKPT\n"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    pass


class InconsistentStateError(ValueError):
    pass


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def default_allowed(vocab: VocabSpec, length: int) -> np.ndarray:
    allowed = np.zeros((length, vocab.size), dtype=bool)
    allowed[:, : vocab.data_size] = True
    return allowed


def _cond_array(cond, n: int, vocab: VocabSpec) -> np.ndarray:
    if cond is None:
        return np.full(n, vocab.null_cond_id, dtype=np.int64)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    return cond


class OraclePredictor:
    """Exact posterior over each masked position given all revealed tokens.

    With class ``labels`` on the dataset, a condition token restricts the
    support to that class; the null condition uses the full support.
    Posteriors are memoised per distinct (state, condition).

    Parallel unmasking can reveal a token combination no support sequence
    contains. ``on_inconsistent="nearest"`` then conditions on the support
    sequences agreeing with the most revealed tokens; ``"raise"`` refuses.
    """

    timestep = False

    def __init__(self, dataset: EnumerableDataset, allowed: np.ndarray | None = None,
                 on_inconsistent: str = "nearest"):
        if on_inconsistent not in ("nearest", "raise"):
            raise ValueError(f"on_inconsistent must be 'nearest' or 'raise', got {on_inconsistent!r}")
        self.on_inconsistent = on_inconsistent
        self.dataset = dataset
        self.vocab = dataset.vocab
        self.length = dataset.length
        self.allowed = default_allowed(self.vocab, self.length) if allowed is None else allowed
        k = self.vocab.size
        onehot = np.zeros((len(dataset), self.length, k))
        np.put_along_axis(onehot, dataset.support[:, :, None], 1.0, axis=2)
        self._onehot = onehot.reshape(len(dataset), -1)
        self._cache: dict = {}

    def _weights(self, cond: int) -> np.ndarray:
        probs = self.dataset.probs
        if cond == self.vocab.null_cond_id or self.dataset.labels is None:
            return probs
        return np.where(self.dataset.labels == cond, probs, 0.0)

    def _compute(self, states: np.ndarray, cond: int) -> np.ndarray:
        support = self.dataset.support
        weights = self._weights(cond)
        out = np.empty((len(states), self.length, self.vocab.size))
        for start in range(0, len(states), 512):
            chunk = states[start: start + 512]
            revealed = chunk != self.vocab.mask_id
            hits = (support[None, :, :] == chunk[:, None, :]) & revealed[:, None, :]
            score = hits.sum(axis=2)
            w = (score == revealed.sum(axis=1)[:, None]) * weights[None, :]
            total = w.sum(axis=1)
            stuck = total <= 0
            if np.any(stuck):
                if self.on_inconsistent == "raise":
                    raise InconsistentStateError(
                        "no support sequence is consistent with revealed tokens "
                        f"{chunk[np.argmax(stuck)].tolist()}"
                    )
                live = np.where(weights[None, :] > 0, score, -1)[stuck]
                w[stuck] = (live == live.max(axis=1, keepdims=True)) * weights[None, :]
                total = w.sum(axis=1)
            post = (w @ self._onehot).reshape(len(chunk), self.length, -1)
            post /= total[:, None, None]
            with np.errstate(divide="ignore"):
                logp = np.log(post)
            out[start: start + len(chunk)] = np.where(
                (post > 0) & self.allowed[None], logp, NEG)
        return out

    def logits(self, x_t, t=None, cond=None) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
        conds = _cond_array(cond, len(x_t), self.vocab)
        out = np.empty((len(x_t), self.length, self.vocab.size))
        for c in np.unique(conds):
            rows = np.flatnonzero(conds == c)
            uniq, inverse = np.unique(x_t[rows], axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            keys = [(int(c), row.tobytes()) for row in uniq]
            missing = [i for i, key in enumerate(keys) if key not in self._cache]
            if missing:
                computed = self._compute(uniq[missing], int(c))
                for i, value in zip(missing, computed):
                    self._cache[keys[i]] = value
            table = np.stack([self._cache[key] for key in keys])
            out[rows] = table[inverse]
        return out


def oracle_posterior(dataset: EnumerableDataset, x_t, cond=None) -> np.ndarray:
    """Exact posterior logits for one state, a ``CorruptionState`` or an ``(L,)`` array."""
    x_t = getattr(x_t, "x_t", x_t)
    return OraclePredictor(dataset, on_inconsistent="raise").logits(np.asarray(x_t)[None], cond=cond)[0]


class MaskedTokenNet:
    """Embeddings -> flatten -> dense/tanh x2 -> per-position output heads.

    The flatten step lets every position's prediction depend on the whole
    sequence, which is all the posterior needs at these sequence lengths.
    """

    def __init__(self, vocab: VocabSpec, length: int, variant: str = "itm", d: int = 64,
                 hidden: int = 128, allowed: np.ndarray | None = None,
                 rng: np.random.Generator | None = None, params: dict | None = None):
        if variant not in ("etm", "itm"):
            raise ContractError(f"variant must be 'etm' or 'itm', got {variant!r}")
        self.vocab = vocab
        self.length = length
        self.variant = variant
        self.d = d
        self.hidden = hidden
        self.allowed = default_allowed(vocab, length) if allowed is None else np.asarray(allowed, bool)
        if self.allowed.shape != (length, vocab.size):
            raise ContractError("allowed table must have shape (L, K)")
        self.params = params if params is not None else self.init_params(rng or np.random.default_rng(0))

    @property
    def timestep(self) -> bool:
        return self.variant == "etm"

    def init_params(self, rng: np.random.Generator) -> dict:
        k, length, d, h = self.vocab.size, self.length, self.d, self.hidden
        params = {
            "tok": rng.uniform(-0.02, 0.02, (k, d)),
            "pos": rng.uniform(-0.02, 0.02, (length, d)),
            "cond": rng.uniform(-0.02, 0.02, (k, d)),
            "w1": rng.normal(0.0, 1.0 / np.sqrt(length * d), (length * d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(h), (h, h)),
            "b2": np.zeros(h),
            # zero output heads start every position at the uniform distribution
            "wo": np.zeros((length, h, k)),
            "bo": np.zeros((length, k)),
        }
        if self.variant == "etm":
            params["time"] = rng.uniform(-0.02, 0.02, (TIME_BINS, d))
        return params

    def _time_bins(self, t, n: int) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return np.clip((t * TIME_BINS).astype(np.int64), 0, TIME_BINS - 1)

    def forward(self, x_t, t=None, cond=None):
        """Return ``(logits, cache)``; ``cache`` feeds :meth:`backward`."""
        p = self.params
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
        n = len(x_t)
        if self.variant == "etm" and t is None:
            raise ContractError("the explicit-timestep model needs t")
        if self.variant == "itm" and t is not None:
            raise ContractError("the implicit-timestep model takes no t")
        conds = _cond_array(cond, n, self.vocab)

        h0 = p["tok"][x_t] + p["pos"][None] + p["cond"][conds][:, None, :]
        bins = None
        if self.variant == "etm":
            bins = self._time_bins(t, n)
            h0 = h0 + p["time"][bins][:, None, :]
        a0 = h0.reshape(n, -1)
        h1 = np.tanh(a0 @ p["w1"] + p["b1"])
        h2 = np.tanh(h1 @ p["w2"] + p["b2"])
        out = np.einsum("nh,lhk->nlk", h2, p["wo"]) + p["bo"][None]
        out = np.where(self.allowed[None], out, NEG)
        return out, (x_t, conds, bins, a0, h1, h2)

    def logits(self, x_t, t=None, cond=None) -> np.ndarray:
        return self.forward(x_t, t, cond)[0]

    def backward(self, cache, dlogits: np.ndarray) -> dict:
        p = self.params
        x_t, conds, bins, a0, h1, h2 = cache
        dout = np.where(self.allowed[None], dlogits, 0.0)
        grads = {
            "bo": dout.sum(axis=0),
            "wo": np.einsum("nh,nlk->lhk", h2, dout),
        }
        dz2 = np.einsum("nlk,lhk->nh", dout, p["wo"]) * (1.0 - h2**2)
        grads["w2"] = h1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["w2"].T) * (1.0 - h1**2)
        grads["w1"] = a0.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dh0 = (dz1 @ p["w1"].T).reshape(len(x_t), self.length, self.d)

        grads["tok"] = np.zeros_like(p["tok"])
        np.add.at(grads["tok"], x_t, dh0)
        grads["pos"] = dh0.sum(axis=0)
        per_seq = dh0.sum(axis=1)
        grads["cond"] = np.zeros_like(p["cond"])
        np.add.at(grads["cond"], conds, per_seq)
        if self.variant == "etm":
            grads["time"] = np.zeros_like(p["time"])
            np.add.at(grads["time"], bins, per_seq)
        return grads

    def loss_and_grad(self, x_t, target, masked, weight, t=None, cond=None, masking_ce: bool = True):
        """Summed masked, weighted cross-entropy over the batch and its gradient."""
        logits, cache = self.forward(x_t, t, cond)
        weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), (len(cache[0]),))
        loss = masked_ce(logits, target, masked, weight, masking_ce).sum()
        dlogits = masked_ce_grad(logits, target, masked, weight, masking_ce)
        return float(loss), self.backward(cache, dlogits)

    def copy(self) -> "MaskedTokenNet":
        return MaskedTokenNet(self.vocab, self.length, self.variant, self.d, self.hidden,
                              self.allowed.copy(), params={k: v.copy() for k, v in self.params.items()})


def backward(net: MaskedTokenNet, x_t, target, masked, weight, t=None, cond=None,
             masking_ce: bool = True) -> dict:
    """Gradient of the masked weighted cross-entropy w.r.t. every parameter."""
    return net.loss_and_grad(x_t, target, masked, weight, t, cond, masking_ce)[1]


def cfg_logits(cond_logits: np.ndarray, uncond_logits: np.ndarray, omega: float,
               mode: str = "log") -> np.ndarray:
    """Classifier-free guidance between conditional and null-conditioned scores.

    ``mode="log"`` extrapolates log-probabilities,
    ``log p = log p_u + omega * (log p_c - log p_u)``. ``mode="prob"`` applies the
    same extrapolation to probabilities, clips negatives and renormalises.
    Tokens the conditional model rules out stay ruled out.
    """
    lc = log_softmax(cond_logits)
    lu = log_softmax(uncond_logits)
    dead = cond_logits <= NEG / 2
    if mode == "log":
        mixed = lu + omega * (lc - lu)
        mixed = np.where(dead, NEG, mixed)
        out = log_softmax(mixed)
    elif mode == "prob":
        pc, pu = np.exp(lc), np.exp(lu)
        mixed = np.clip(pu + omega * (pc - pu), 0.0, None)
        mixed = np.where(dead, 0.0, mixed)
        total = mixed.sum(axis=-1, keepdims=True)
        # every entry clipped away: fall back to the conditional distribution
        mixed = np.where(total > 0, mixed / np.where(total > 0, total, 1.0), pc)
        with np.errstate(divide="ignore"):
            out = np.log(mixed)
    else:
        raise ValueError(f"unknown guidance mode {mode!r}")
    return np.where(dead | ~np.isfinite(out), NEG, out)


def save_checkpoint(net: MaskedTokenNet, path) -> None:
    names = sorted(net.params)
    tensors = [("param/" + name, np.ascontiguousarray(net.params[name], dtype="<f8")) for name in names]
    tensors.append(("allowed", np.ascontiguousarray(net.allowed, dtype="|u1")))
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": net.variant,
        "data_size": net.vocab.data_size,
        "length": net.length,
        "d": net.d,
        "hidden": net.hidden,
        "time_bins": TIME_BINS,
        "tensors": [{"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
                    for name, arr in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in tensors:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> MaskedTokenNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC): end])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    offset = end + 1
    params, allowed = {}, None
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += count * dtype.itemsize
        if entry["name"] == "allowed":
            allowed = arr.astype(bool)
        else:
            params[entry["name"].split("/", 1)[1]] = arr.astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after the declared tensors")
    return MaskedTokenNet(VocabSpec(header["data_size"]), header["length"], header["variant"],
                          header["d"], header["hidden"], allowed=allowed, params=params)

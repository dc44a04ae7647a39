"""Small enumerable datasets with exact probability tables.

Everything distributional in this package (oracle posteriors, TV/KL metrics,
exact conditionals) is computed by direct summation over ``support``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interpolant import JointLayout, VocabSpec

DEFAULT_SUPPORT_CAP = 4096
FORMAT_TAG = "discrete-interpolants dataset v1"


class DatasetError(ValueError):
    pass


@dataclass
class EnumerableDataset:
    support: np.ndarray
    probs: np.ndarray
    vocab: VocabSpec
    kind: str = "table"
    support_y: np.ndarray | None = None
    vocab_y: VocabSpec | None = None
    labels: np.ndarray | None = None
    shape: tuple | None = None
    approximate: bool = False

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.int64))
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.support.shape[0] != self.probs.shape[0]:
            raise DatasetError("support and probs must have the same number of entries")
        if len(self.probs) == 0:
            raise DatasetError("dataset support is empty")
        if np.any(self.probs <= 0):
            raise DatasetError("all probabilities must be positive")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise DatasetError(f"probabilities sum to {total!r}, expected 1")
        self.vocab.check_clean(self.support)
        if self.support_y is not None:
            self.support_y = np.atleast_2d(np.asarray(self.support_y, dtype=np.int64))
            if self.vocab_y is None or len(self.support_y) != len(self.support):
                raise DatasetError("paired support needs vocab_y and one y per x")
            self.vocab_y.check_clean(self.support_y)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.support),):
                raise DatasetError("labels must hold one class id per support entry")
            if self.labels.min() < 0 or self.labels.max() >= self.vocab.data_size:
                raise DatasetError("class labels must be data token ids of the vocabulary")

    @property
    def length(self) -> int:
        return self.support.shape[1]

    @property
    def paired(self) -> bool:
        return self.support_y is not None

    def __len__(self) -> int:
        return len(self.probs)

    def layout(self) -> JointLayout:
        if not self.paired:
            raise DatasetError("dataset has no paired modality")
        return JointLayout(self.vocab, self.vocab_y, self.length, self.support_y.shape[1])

    def joint(self) -> "EnumerableDataset":
        """The paired dataset as a single-sequence dataset over ``x ⊕ y``."""
        layout = self.layout()
        return EnumerableDataset(layout.concat(self.support, self.support_y), self.probs,
                                 layout.vocab, kind="joint")

    def marginal(self, position: int) -> np.ndarray:
        out = np.zeros(self.vocab.data_size)
        np.add.at(out, self.support[:, position], self.probs)
        return out

    def as_dict(self) -> dict:
        """Map each support sequence (as a tuple) to its probability."""
        table: dict = {}
        for row, p in zip(map(tuple, self.support.tolist()), self.probs.tolist()):
            table[row] = table.get(row, 0.0) + p
        return table

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Indices of ``n`` support entries drawn i.i.d. from ``probs``."""
        cdf = np.cumsum(self.probs)
        idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        return np.minimum(idx, len(self.probs) - 1)


@dataclass
class DatasetSpec:
    kind: str = "table"
    length: int = 4
    data_size: int = 3
    # table
    entries: list = field(default_factory=list)
    labels: list | None = None
    # markov
    initial: list | None = None
    transition: list | None = None
    # shapes_pair
    height: int = 4
    width: int = 4
    rect_min: int = 1
    rect_max: int = 2
    n_colors: int = 2
    n_classes: int = 1
    cap: int = DEFAULT_SUPPORT_CAP
    allow_truncate: bool = False


def build(spec: DatasetSpec, rng: np.random.Generator | None = None) -> EnumerableDataset:
    if spec.kind == "table":
        return _build_table(spec)
    if spec.kind == "markov":
        return _build_markov(spec, rng)
    if spec.kind == "shapes_pair":
        return build_shapes_pair(spec)
    raise DatasetError(f"unknown dataset kind {spec.kind!r}")


def _build_table(spec: DatasetSpec) -> EnumerableDataset:
    if not spec.entries:
        raise DatasetError("table dataset needs at least one entry")
    if len(spec.entries) > spec.cap:
        raise DatasetError(f"table has {len(spec.entries)} entries, above the cap {spec.cap}")
    support = np.array([e[0] for e in spec.entries], dtype=np.int64)
    probs = np.array([e[1] for e in spec.entries], dtype=np.float64)
    if support.ndim != 2 or support.shape[1] != spec.length:
        raise DatasetError(f"every table sequence must have length {spec.length}")
    return EnumerableDataset(support, probs, VocabSpec(spec.data_size), kind="table",
                             labels=spec.labels)


def markov_probs(support: np.ndarray, initial: np.ndarray, transition: np.ndarray) -> np.ndarray:
    p = initial[support[:, 0]]
    for i in range(1, support.shape[1]):
        p = p * transition[support[:, i - 1], support[:, i]]
    return p


def _build_markov(spec: DatasetSpec, rng: np.random.Generator | None) -> EnumerableDataset:
    k, length = spec.data_size, spec.length
    initial = np.full(k, 1.0 / k) if spec.initial is None else np.asarray(spec.initial, float)
    transition = (np.full((k, k), 1.0 / k) if spec.transition is None
                  else np.asarray(spec.transition, float))
    if initial.shape != (k,) or transition.shape != (k, k):
        raise DatasetError("markov initial must be (K_d,) and transition (K_d, K_d)")
    if np.any(initial < 0) or np.any(transition < 0):
        raise DatasetError("markov probabilities must be nonnegative")
    if abs(initial.sum() - 1) > 1e-9 or np.any(np.abs(transition.sum(1) - 1) > 1e-9):
        raise DatasetError("markov initial and transition rows must sum to 1")

    approximate = False
    if k**length <= spec.cap:
        support = np.array(list(itertools.product(range(k), repeat=length)), dtype=np.int64)
    else:
        if not spec.allow_truncate:
            raise DatasetError(
                f"markov support has {k}^{length} sequences, above the cap {spec.cap}; "
                "set allow_truncate to sample a truncated support"
            )
        if rng is None:
            raise DatasetError("a truncated markov support needs an rng")
        draws = np.empty((spec.cap * 8, length), dtype=np.int64)
        draws[:, 0] = rng.choice(k, size=len(draws), p=initial)
        for i in range(1, length):
            u = rng.random(len(draws))[:, None]
            draws[:, i] = (u > np.cumsum(transition[draws[:, i - 1]], axis=1)).sum(1)
        support = np.unique(draws, axis=0)[: spec.cap]
        approximate = True

    probs = markov_probs(support, initial, transition)
    keep = probs > 0
    support, probs = support[keep], probs[keep]
    return EnumerableDataset(support, probs / probs.sum(), VocabSpec(k), kind="markov",
                             approximate=approximate)


def shapes_color_class(color: int, n_classes: int) -> int:
    """Foreground class of a rectangle colour (colours are 1-based)."""
    return 1 + (color - 1) % n_classes


def build_shapes_pair(spec: DatasetSpec, rng: np.random.Generator | None = None) -> EnumerableDataset:
    """Paired image/label grids, one coloured rectangle on background 0.

    Image tokens: 0 is background, 1..n_colors are rectangle colours.
    Label tokens: 0 is background, 1..n_classes is the class of the colour.
    """
    h, w = spec.height, spec.width
    if not (1 <= h <= 8 and 1 <= w <= 8):
        raise DatasetError("shapes grids are limited to 8x8")
    if not 1 <= spec.n_colors <= 4:
        raise DatasetError("shapes use 1 to 4 colours")
    if not 1 <= spec.n_classes <= 3:
        raise DatasetError("shapes use 1 to 3 classes")
    if not 1 <= spec.rect_min <= spec.rect_max <= min(h, w):
        raise DatasetError("rectangle size range must satisfy 1 <= rect_min <= rect_max <= grid side")

    images, labels = [], []
    sizes = range(spec.rect_min, spec.rect_max + 1)
    for rh, rw in itertools.product(sizes, sizes):
        for top, left in itertools.product(range(h - rh + 1), range(w - rw + 1)):
            inside = np.zeros((h, w), dtype=bool)
            inside[top: top + rh, left: left + rw] = True
            for color in range(1, spec.n_colors + 1):
                images.append(np.where(inside, color, 0).ravel())
                labels.append(np.where(inside, shapes_color_class(color, spec.n_classes), 0).ravel())
    if len(images) > spec.cap:
        raise DatasetError(f"shapes support has {len(images)} configurations, above the cap {spec.cap}")
    n = len(images)
    return EnumerableDataset(np.array(images), np.full(n, 1.0 / n), VocabSpec(spec.n_colors + 1),
                             kind="shapes_pair", support_y=np.array(labels),
                             vocab_y=VocabSpec(spec.n_classes + 1), shape=(h, w))


def _format_prob(p: float) -> str:
    return f"{p:.17g}"


def save(dataset: EnumerableDataset, path) -> None:
    lines = [f"# {FORMAT_TAG}", f"kind={dataset.kind}"]
    if dataset.shape is not None:
        lines.append(f"shape={dataset.shape[0]}x{dataset.shape[1]}")
    lines += [f"L={dataset.length}", f"K_d={dataset.vocab.data_size}"]
    fields = ["x"]
    if dataset.paired:
        lines += [f"L_y={dataset.support_y.shape[1]}", f"K_y={dataset.vocab_y.data_size}"]
        fields.append("y")
    if dataset.labels is not None:
        fields.append("label")
    fields.append("prob")
    lines += [f"approximate={str(dataset.approximate).lower()}",
              f"count={len(dataset)}", "fields=" + ",".join(fields), "---"]
    for i in range(len(dataset)):
        cols = [" ".join(map(str, dataset.support[i].tolist()))]
        if dataset.paired:
            cols.append(" ".join(map(str, dataset.support_y[i].tolist())))
        if dataset.labels is not None:
            cols.append(str(int(dataset.labels[i])))
        cols.append(_format_prob(float(dataset.probs[i])))
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> EnumerableDataset:
    path = Path(path)
    header: dict = {}
    records = []
    in_body = False
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not in_body:
            if not line or line.startswith("#"):
                continue
            if line == "---":
                in_body = True
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise DatasetError(f"{path}:{lineno}: expected key=value in header, got {raw!r}")
            header[key.strip()] = value.strip()
        elif line:
            records.append((lineno, raw))

    try:
        fields = header["fields"].split(",")
        length, k_d, count = int(header["L"]), int(header["K_d"]), int(header["count"])
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: incomplete or malformed header ({exc})") from exc
    if len(records) != count:
        raise DatasetError(f"{path}: header declares {count} records, found {len(records)}")

    xs, ys, labels, probs = [], [], [], []
    for lineno, raw in records:
        cols = raw.split("\t")
        if len(cols) != len(fields):
            raise DatasetError(f"{path}:{lineno}: expected {len(fields)} tab-separated fields, got {len(cols)}")
        try:
            row = dict(zip(fields, cols))
            x = [int(v) for v in row["x"].split()]
            if len(x) != length:
                raise DatasetError(f"{path}:{lineno}: sequence has length {len(x)}, expected {length}")
            xs.append(x)
            if "y" in row:
                ys.append([int(v) for v in row["y"].split()])
            if "label" in row:
                labels.append(int(row["label"]))
            p = float(row["prob"])
        except ValueError as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if not math.isfinite(p):
            raise DatasetError(f"{path}:{lineno}: probability {row['prob']!r} is not finite")
        probs.append(p)

    shape = None
    if "shape" in header:
        h, _, w = header["shape"].partition("x")
        shape = (int(h), int(w))
    try:
        return EnumerableDataset(
            np.array(xs, dtype=np.int64), np.array(probs), VocabSpec(k_d),
            kind=header.get("kind", "table"),
            support_y=np.array(ys, dtype=np.int64) if ys else None,
            vocab_y=VocabSpec(int(header["K_y"])) if ys else None,
            labels=np.array(labels) if labels else None,
            shape=shape,
            approximate=header.get("approximate", "false") == "true",
        )
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc

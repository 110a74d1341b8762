"""Grids, activity, sparse weight fields and the NFW1 snapshot format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .rng import RngStream

SNAPSHOT_MAGIC = b"NFW1"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")
_RECORD = np.dtype([("post", "<u4"), ("pre", "<u4"), ("w", "<f8")])

INIT_MODES = ("uniform_noise", "polarity_biased", "identity")


@dataclass(frozen=True)
class Sheet:
    """Row-major grid of nodes, each carrying ``features`` units."""

    rows: int
    cols: int
    features: int = 1

    def __post_init__(self):
        for name in ("rows", "cols", "features"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgument(f"sheet {name} must be a positive integer, got {v!r}")

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def n_units(self) -> int:
        return self.n_nodes * self.features

    @property
    def shape(self):
        return (self.rows, self.cols)

    def node_id(self, r: int, c: int) -> int:
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise InvalidArgument(f"node ({r}, {c}) outside {self.rows}x{self.cols} sheet")
        return r * self.cols + c

    def coords(self, node: int):
        if not 0 <= node < self.n_nodes:
            raise InvalidArgument(f"node id {node} outside sheet")
        return divmod(int(node), self.cols)

    def coordinates(self) -> np.ndarray:
        """(n_nodes, 2) float array of (row, col)."""
        r, c = np.divmod(np.arange(self.n_nodes), self.cols)
        return np.stack([r, c], axis=1).astype(np.float64)

    @property
    def extent(self):
        return (self.rows - 1, self.cols - 1)


def new_sheet(rows: int, cols: int, features: int = 1) -> Sheet:
    return Sheet(rows, cols, features)


class ActivityState:
    """Nonnegative activity per (node, feature)."""

    def __init__(self, sheet: Sheet, values):
        values = np.asarray(values, dtype=np.float64).reshape(sheet.n_nodes, sheet.features)
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("activity must be finite")
        if np.any(values < 0):
            raise InvalidArgument("activity must be nonnegative")
        self.sheet = sheet
        self.values = values

    @classmethod
    def zeros(cls, sheet: Sheet) -> "ActivityState":
        return cls(sheet, np.zeros((sheet.n_nodes, sheet.features)))

    def flat(self) -> np.ndarray:
        """Unit-indexed vector, unit id = node * F + feature."""
        return self.values.reshape(-1)

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.sheet.rows, self.sheet.cols, self.sheet.features)

    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.flat() > 0)

    def total(self) -> float:
        return float(self.values.sum())

    def __repr__(self):
        return f"ActivityState({self.sheet}, active={len(self.active_set())})"


class WeightField:
    """Nonnegative connections stored as per-post adjacency slots.

    ``index[i, k]`` is the pre unit feeding post unit ``i`` through slot ``k``
    (-1 marks an empty slot) and ``weight[i, k]`` its strength.  A connection
    exists exactly when its slot is occupied; plasticity only ever changes
    existing connections, pruning removes them.
    """

    def __init__(self, pre: Sheet, post: Sheet, index, weight, lateral: bool = False):
        index = np.asarray(index, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float64)
        if index.shape != weight.shape or index.ndim != 2 or index.shape[0] != post.n_units:
            raise InvalidArgument("index/weight must both be (n_post_units, slots)")
        if lateral and pre != post:
            raise InvalidArgument("a lateral field needs pre == post")
        self.pre = pre
        self.post = post
        self.index = index
        self.weight = np.where(index >= 0, weight, 0.0)
        self.lateral = bool(lateral)
        if lateral and np.any(self.index == np.arange(post.n_units)[:, None]):
            raise InvalidArgument("lateral field may not contain self-connections")

    @classmethod
    def from_dense(cls, pre: Sheet, post: Sheet, dense, lateral: bool = False) -> "WeightField":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (post.n_units, pre.n_units):
            raise InvalidArgument(f"dense shape {dense.shape} does not match sheets")
        if np.any(dense < 0) or not np.all(np.isfinite(dense)):
            raise InvalidArgument("weights must be finite and nonnegative")
        present = dense > 0
        width = max(1, int(present.sum(axis=1).max(initial=0)))
        index = np.full((post.n_units, width), -1, dtype=np.int64)
        weight = np.zeros((post.n_units, width))
        for i in range(post.n_units):
            cols = np.flatnonzero(present[i])
            index[i, : len(cols)] = cols
            weight[i, : len(cols)] = dense[i, cols]
        return cls(pre, post, index, weight, lateral)

    @classmethod
    def from_triples(cls, pre, post, post_ids, pre_ids, weights, lateral=False) -> "WeightField":
        post_ids = np.asarray(post_ids, dtype=np.int64)
        pre_ids = np.asarray(pre_ids, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        order = np.lexsort((pre_ids, post_ids))
        post_ids, pre_ids, weights = post_ids[order], pre_ids[order], weights[order]
        counts = np.bincount(post_ids, minlength=post.n_units)
        width = max(1, int(counts.max(initial=0)))
        index = np.full((post.n_units, width), -1, dtype=np.int64)
        weight = np.zeros((post.n_units, width))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(post_ids)) - starts[post_ids]
        index[post_ids, slot] = pre_ids
        weight[post_ids, slot] = weights
        return cls(pre, post, index, weight, lateral)

    @property
    def n_post(self) -> int:
        return self.post.n_units

    @property
    def n_pre(self) -> int:
        return self.pre.n_units

    @property
    def present(self) -> np.ndarray:
        return self.index >= 0

    def copy(self) -> "WeightField":
        return WeightField(self.pre, self.post, self.index.copy(), self.weight.copy(), self.lateral)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_post, self.n_pre))
        rows, slots = np.nonzero(self.present)
        out[rows, self.index[rows, slots]] = self.weight[rows, slots]
        return out

    def incoming_sums(self) -> np.ndarray:
        return self.weight.sum(axis=1)

    def fan_in(self) -> np.ndarray:
        return self.present.sum(axis=1)

    def drive(self, pre_activity) -> np.ndarray:
        """Post input ``W @ a`` with a fixed per-row summation order."""
        a = np.asarray(pre_activity, dtype=np.float64).reshape(-1)
        gathered = np.where(self.present, a[np.maximum(self.index, 0)], 0.0)
        return (self.weight * gathered).sum(axis=1)

    def triples(self):
        """(post_ids, pre_ids, weights) of nonzero connections, sorted by (post, pre)."""
        rows, slots = np.nonzero(self.present & (self.weight != 0))
        pre_ids = self.index[rows, slots]
        w = self.weight[rows, slots]
        order = np.lexsort((pre_ids, rows))
        return rows[order], pre_ids[order], w[order]

    def compact(self) -> "WeightField":
        """Drop empty slots; rows are re-sorted by pre id."""
        post_ids, pre_ids, w = self.triples()
        keep = self.present.sum()
        if keep != len(w):
            # zero-weight but present connections survive compaction
            rows, slots = np.nonzero(self.present)
            pre_ids = self.index[rows, slots]
            w = self.weight[rows, slots]
            post_ids = rows
        return WeightField.from_triples(self.pre, self.post, post_ids, pre_ids, w, self.lateral)

    def __eq__(self, other):
        if not isinstance(other, WeightField):
            return NotImplemented
        if (self.pre, self.post) != (other.pre, other.post):
            return False
        a, b = self.triples(), other.triples()
        return all(np.array_equal(x, y) for x, y in zip(a, b))

    def __repr__(self):
        return (f"WeightField({self.pre.shape}->{self.post.shape}, F={self.post.features}, "
                f"connections={int(self.present.sum())}, lateral={self.lateral})")


def affine_correspondence(pre: Sheet, post: Sheet) -> np.ndarray:
    """Pre-sheet coordinate matching each post node (corners map to corners)."""
    xy = post.coordinates()
    scale = np.array([
        (pre.rows - 1) / (post.rows - 1) if post.rows > 1 else 0.0,
        (pre.cols - 1) / (post.cols - 1) if post.cols > 1 else 0.0,
    ])
    return xy * scale


def cosine_falloff(d, d_max):
    """1 at distance 0, falling smoothly to 0 at ``d_max``."""
    d = np.clip(np.asarray(d, dtype=np.float64) / d_max, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * d))


def normalize_rows(weight: np.ndarray, s: float) -> np.ndarray:
    sums = weight.sum(axis=1, keepdims=True)
    return weight * (s / sums)


def init_weight_field(pre: Sheet, post: Sheet, mode: str, noise_amplitude: float = 0.0,
                      rng: RngStream | None = None, s: float = 1.0, bias: float = 0.0) -> WeightField:
    """All-to-all (or identity) retina-to-target connectivity.

    ``uniform_noise`` gives ``(1 + noise * u) * s / N_pre`` with ``u`` uniform in
    [-1, 1]; ``polarity_biased`` additionally multiplies by
    ``1 + bias * falloff(distance to the affinely corresponding pre node)``.
    Both are normalized so every post unit receives exactly ``s``.
    """
    if mode not in INIT_MODES:
        raise InvalidArgument(f"unknown init mode {mode!r}")
    if not 0.0 <= noise_amplitude < 1.0:
        raise InvalidArgument("noise_amplitude must lie in [0, 1)")
    if s <= 0:
        raise InvalidArgument("target sum s must be positive")
    if pre.features != 1 or post.features != 1:
        raise InvalidArgument("projection fields connect single-feature sheets")

    if mode == "identity":
        if pre.shape != post.shape:
            raise InvalidArgument(f"identity init needs equal shapes, got {pre.shape} and {post.shape}")
        index = np.arange(post.n_units)[:, None]
        return WeightField(pre, post, index, np.full((post.n_units, 1), float(s)))

    n_pre = pre.n_units
    weight = np.full((post.n_units, n_pre), s / n_pre)
    if noise_amplitude > 0:
        if rng is None:
            raise InvalidArgument("noisy initialization needs an rng")
        u = rng.draw_uniform(post.n_units * n_pre).reshape(post.n_units, n_pre)
        weight *= 1.0 + noise_amplitude * (2.0 * u - 1.0)
    if mode == "polarity_biased" and bias != 0.0:
        target = affine_correspondence(pre, post)
        d = np.linalg.norm(target[:, None, :] - pre.coordinates()[None, :, :], axis=2)
        d_max = math.hypot(pre.rows - 1, pre.cols - 1)
        weight *= 1.0 + bias * cosine_falloff(d, d_max)
    weight = normalize_rows(weight, s)
    index = np.broadcast_to(np.arange(n_pre), weight.shape).copy()
    return WeightField(pre, post, index, weight)


def write_snapshot(field: WeightField, path) -> int:
    """Write NFW1 little-endian snapshot; returns bytes written."""
    if field.pre.features != field.post.features:
        raise InvalidArgument("snapshot format stores a single feature count")
    post_ids, pre_ids, w = field.triples()
    if not np.all(np.isfinite(w)):
        raise FormatError("refusing to write non-finite weights")
    records = np.empty(len(w), dtype=_RECORD)
    records["post"] = post_ids
    records["pre"] = pre_ids
    records["w"] = w
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, field.pre.rows, field.pre.cols,
                          field.post.rows, field.post.cols, field.post.features, len(w))
    data = header + records.tobytes()
    Path(path).write_bytes(data)
    return len(data)


def read_snapshot(path, lateral: bool | None = None) -> WeightField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, pr, pc, qr, qc, f, count = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + count * _RECORD.itemsize
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    try:
        pre, post = Sheet(pr, pc, f), Sheet(qr, qc, f)
    except InvalidArgument as exc:
        raise FormatError(f"{path}: {exc}") from None
    records = np.frombuffer(data, dtype=_RECORD, offset=_HEADER.size, count=count)
    w = records["w"].astype(np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise FormatError(f"{path}: non-finite or negative weight")
    post_ids = records["post"].astype(np.int64)
    pre_ids = records["pre"].astype(np.int64)
    if count and (post_ids.max() >= post.n_units or pre_ids.max() >= pre.n_units):
        raise FormatError(f"{path}: unit id out of range")
    if lateral is None:
        lateral = pre == post and count > 0 and not np.any(post_ids == pre_ids)
    return WeightField.from_triples(pre, post, post_ids, pre_ids, w, lateral)

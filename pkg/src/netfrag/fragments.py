"""Feature units, learned short-range lateral connections and net fragments.

An image activates an exuberant set of (node, feature) units.  Units that
are not supported by lateral connections from other active units are then
silenced by a rising threshold, leaving small self-supporting nets.  Nets
that recur across a corpus become the fragment library.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_fill_holes, convolve
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InvalidArgument
from .substrate import ActivityState, Sheet, WeightField

log = logging.getLogger(__name__)

N_FEATURES = 10
FEATURE_NAMES = ("edge0+", "edge0-", "edge45+", "edge45-", "edge90+", "edge90-",
                 "edge135+", "edge135-", "bright", "dark")
BRIGHT, DARK = 8, 9
DEGENERATE_COVER = 0.9     # interior fraction above which a figure-ground scene has no ground


# --- features ----------------------------------------------------------------

def _make_bank() -> np.ndarray:
    e0 = np.array([[1, 1, 1], [0, 0, 0], [-1, -1, -1]], dtype=np.float64)    # horizontal edge
    e90 = e0.T.copy()                                                          # vertical edge
    e45 = np.array([[1, 1, 0], [1, 0, -1], [0, -1, -1]], dtype=np.float64)    # edge along the anti-diagonal
    e135 = np.array([[0, 1, 1], [-1, 0, 1], [-1, -1, 0]], dtype=np.float64)
    filters = []
    for e in (e0, e45, e90, e135):
        filters += [e, -e]
    filters += [np.ones((3, 3)), -np.ones((3, 3))]
    bank = np.stack(filters)
    bank /= np.sqrt((bank ** 2).sum(axis=(1, 2)))[:, None, None]
    bank.setflags(write=False)
    return bank


@dataclass(frozen=True)
class FeatureBank:
    """Ten fixed 3x3 filters: four edge orientations in two polarities, bright, dark."""

    filters: np.ndarray = field(default_factory=_make_bank, repr=False)

    def __post_init__(self):
        if self.filters.shape != (N_FEATURES, 3, 3):
            raise InvalidArgument("a feature bank holds ten 3x3 filters")
        if not np.allclose((self.filters ** 2).sum(axis=(1, 2)), 1.0, atol=1e-12):
            raise InvalidArgument("filters must have unit L2 norm")

    @property
    def size(self) -> int:
        return self.filters.shape[0]


DEFAULT_BANK = FeatureBank()


def image_patches(image: np.ndarray) -> np.ndarray:
    """(rows-2, cols-2, 9) view of every interior 3x3 patch."""
    win = np.lib.stride_tricks.sliding_window_view(image, (3, 3))
    return win.reshape(win.shape[0], win.shape[1], 9)


def feature_encode(image, bank: FeatureBank = DEFAULT_BANK) -> ActivityState:
    """Rectified, contrast-normalized filter responses at every interior pixel.

    Pixels are mapped to signed contrast 2p - 1 first, so mid-gray is the
    zero point: white drives ``bright``, black drives ``dark``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 8:
        raise InvalidArgument("image must be 2-D with min side >= 8")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise InvalidArgument("pixels must lie in [0, 1]")
    patches = image_patches(2.0 * image - 1.0)
    norm = np.sqrt((patches ** 2).sum(axis=2))
    resp = np.maximum(patches @ bank.filters.reshape(bank.size, 9).T, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        resp = np.where(norm[..., None] > 1e-12, resp / norm[..., None], 0.0)
    # inner product / norms can exceed 1 by rounding only
    resp = np.minimum(resp, 1.0)
    sheet = Sheet(image.shape[0] - 2, image.shape[1] - 2, bank.size)
    return ActivityState(sheet, resp.reshape(-1, bank.size))


def exuberant_init(features: ActivityState, q: float = 0.2) -> np.ndarray:
    """Boolean (n_nodes, F) mask of the initially active units.

    Per node the top ceil(q F) features (ties to the lower feature id) plus
    every feature within 0.8 of the node maximum; zero responses never count.
    """
    if not 0 < q <= 1:
        raise InvalidArgument("q must lie in (0, 1]")
    v = features.values
    n, F = v.shape
    k = math.ceil(q * F - 1e-12)
    order = np.argsort(-v, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(n)[:, None], order] = np.arange(F)[None, :]
    top = rank < k
    near_max = v >= 0.8 * v.max(axis=1, keepdims=True)
    return (top | near_max) & (v > 0)


# --- cortical field ------------------------------------------------------------

def lateral_offsets(radius: float) -> np.ndarray:
    """Node offsets within Euclidean ``radius``, sorted row-major.

    Row-major order makes the flat (offset, feature) slot index increase
    with the pre unit id, which the lowest-id tie rules rely on.
    """
    r = int(math.floor(radius))
    out = [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1) if dr * dr + dc * dc <= radius * radius + 1e-9]
    return np.array(out, dtype=np.int64)


class CorticalField:
    """Lateral weights between (node, feature) units on one sheet.

    Stored densely over the fixed neighborhood: ``w[n, f, k, g]`` is the
    weight onto unit (n, f) from unit (n + offsets[k], g).  Out-of-sheet
    slots and the self slot are held at zero.
    """

    def __init__(self, sheet: Sheet, radius: float = 3.0, weights=None):
        if radius <= 0:
            raise InvalidArgument("radius must be positive")
        self.sheet = sheet
        self.radius = float(radius)
        self.offsets = lateral_offsets(radius)
        F = sheet.features
        K = len(self.offsets)
        rr, cc = np.divmod(np.arange(sheet.n_nodes), sheet.cols)
        tr = rr[:, None] + self.offsets[None, :, 0]
        tc = cc[:, None] + self.offsets[None, :, 1]
        inside = (tr >= 0) & (tr < sheet.rows) & (tc >= 0) & (tc < sheet.cols)
        self.pre_node = np.where(inside, tr * sheet.cols + tc, -1)
        allowed = np.broadcast_to(inside[:, None, :, None], (sheet.n_nodes, F, K, F)).copy()
        k0 = int(np.flatnonzero((self.offsets == 0).all(axis=1))[0])
        allowed[:, np.arange(F), k0, np.arange(F)] = False
        self.allowed = allowed
        if weights is None:
            weights = np.zeros(allowed.shape)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != allowed.shape:
            raise InvalidArgument("weights shape does not match the neighborhood")
        if np.any(weights[~allowed] != 0):
            raise InvalidArgument("weights outside the lateral radius or on self slots")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise InvalidArgument("lateral weights must be finite and nonnegative")
        self.w = weights

    @property
    def n_slots(self) -> int:
        return self.w.shape[2] * self.w.shape[3]

    def copy(self) -> "CorticalField":
        return CorticalField(self.sheet, self.radius, self.w.copy())

    def flat(self) -> np.ndarray:
        """(n_units, K*F) view, row = post unit, column order = pre id order."""
        return self.w.reshape(self.sheet.n_units, self.n_slots)

    def pre_units(self) -> np.ndarray:
        """(n_units, K*F) pre unit id per slot, -1 where not allowed."""
        F = self.sheet.features
        pre = self.pre_node[:, None, :, None] * F + np.arange(F)[None, None, None, :]
        pre = np.broadcast_to(pre, self.w.shape)
        return np.where(self.allowed, pre, -1).reshape(self.sheet.n_units, self.n_slots)

    def shifted(self, values: np.ndarray) -> np.ndarray:
        """(n_nodes, K, F): values of every neighbor slot, 0 outside the sheet."""
        v = np.asarray(values, dtype=np.float64).reshape(self.sheet.n_nodes, -1)
        padded = np.vstack([v, np.zeros((1, v.shape[1]))])
        return padded[self.pre_node]

    def lateral_input(self, values) -> np.ndarray:
        """(n_nodes, F): sum over neighbors of w_uv * values_v."""
        s = self.shifted(values)
        return np.einsum("nfkg,nkg->nf", self.w, s)

    def incoming_sums(self) -> np.ndarray:
        return self.flat().sum(axis=1)

    def outgoing(self):
        """CSR matrix indexed [pre, post] of the nonzero weights."""
        pre = self.pre_units()
        flat = self.flat()
        rows, slots = np.nonzero(flat > 0)
        n = self.sheet.n_units
        return csr_matrix((flat[rows, slots], (pre[rows, slots], rows)), shape=(n, n))

    def fan_in(self) -> np.ndarray:
        return (self.flat() > 0).sum(axis=1)

    def max_distance(self) -> float:
        """Largest node distance spanned by a nonzero weight."""
        used = (self.w > 0).any(axis=(0, 1, 3))
        if not used.any():
            return 0.0
        return float(np.sqrt((self.offsets[used] ** 2).sum(axis=1)).max())

    def to_weight_field(self) -> WeightField:
        pre = self.pre_units()
        flat = self.flat()
        rows, slots = np.nonzero(flat > 0)
        return WeightField.from_triples(self.sheet, self.sheet, rows, pre[rows, slots],
                                        flat[rows, slots], lateral=True)

    @classmethod
    def from_weight_field(cls, W: WeightField, radius: float = 3.0) -> "CorticalField":
        cf = cls(W.post, radius)
        post, pre, w = W.triples()
        F = W.post.features
        pn, pf = np.divmod(post, F)
        qn, qf = np.divmod(pre, F)
        dr = qn // W.post.cols - pn // W.post.cols
        dc = qn % W.post.cols - pn % W.post.cols
        lookup = {tuple(o): k for k, o in enumerate(cf.offsets)}
        try:
            k = np.array([lookup[(int(a), int(b))] for a, b in zip(dr, dc)], dtype=np.int64)
        except KeyError as exc:
            raise InvalidArgument(f"connection offset {exc.args[0]} beyond radius {radius}") from None
        cf.w[pn, pf, k, qf] = w
        return cf

    def edges(self, threshold: float, units=None):
        """Undirected unit pairs joined by a weight >= threshold in either direction."""
        pre = self.pre_units()
        flat = self.flat()
        rows, slots = np.nonzero(flat >= threshold)
        a, b = rows, pre[rows, slots]
        if units is not None:
            keep = np.zeros(self.sheet.n_units, dtype=bool)
            keep[units] = True
            m = keep[a] & keep[b]
            a, b = a[m], b[m]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        pairs = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(lo) else np.zeros((0, 2), np.int64)
        return pairs


# --- learning --------------------------------------------------------------------

@dataclass
class FragmentConfig:
    radius: float = 3.0
    s: float = 1.0
    alpha: float = 0.05
    q: float = 0.1
    fan_in_cap: int = 12
    prune_every: int = 10
    w_min: float = 1e-3
    ff_gain: float = 0.5
    lam: float = 1.0
    theta0: float = 0.1
    growth: float = 1.15
    theta_max: float = 0.6
    t_max: int = 100
    w_support: float | None = None       # default 0.5 * s / fan_in_cap
    s_min: int = 5
    s_max: int = 60
    c_min: int = 3
    merge_jaccard: float = 0.6
    quorum: float = 0.5
    align: int = 2
    vote: int = 5                        # receptive-field votes needed per mask pixel
    selection_inhibition: float = 0.6
    seed: int = 1

    def __post_init__(self):
        if self.s <= 0 or self.alpha <= 0:
            raise InvalidArgument("s and alpha must be positive")
        if self.fan_in_cap < 1 or self.prune_every < 1:
            raise InvalidArgument("fan_in_cap and prune_every must be >= 1")
        if not 1 <= self.s_min <= self.s_max:
            raise InvalidArgument("need 1 <= s_min <= s_max")
        if self.radius <= 0:
            raise InvalidArgument("radius must be positive")

    @property
    def support_threshold(self) -> float:
        if self.w_support is not None:
            return self.w_support
        return 0.5 * self.s / self.fan_in_cap

    def schedule(self) -> "ThresholdSchedule":
        return ThresholdSchedule(self.theta0, self.growth, self.theta_max, self.t_max)

    def to_dict(self):
        return asdict(self)


def normalize_lateral(cf: CorticalField, s: float) -> None:
    """Rescale every unit with incoming weight to sum ``s``; silent units stay at zero."""
    flat = cf.flat()
    sums = flat.sum(axis=1)
    live = sums > 0
    flat[live] *= (s / sums[live])[:, None]


def prune_lateral(cf: CorticalField, cap: int, w_min: float, s: float) -> None:
    """Drop weights below ``w_min``, keep the ``cap`` strongest (ties to lower pre id)."""
    flat = cf.flat()
    flat[flat < w_min] = 0.0
    order = np.argsort(-flat, axis=1, kind="stable")
    drop = order[:, cap:]
    np.put_along_axis(flat, drop, 0.0, axis=1)
    normalize_lateral(cf, s)


def hebbian_lateral(cf: CorticalField, activity: np.ndarray, alpha: float) -> None:
    """w_uv += alpha a_u a_v for every co-active pair within the radius."""
    a = np.asarray(activity, dtype=np.float64).reshape(cf.sheet.n_nodes, cf.sheet.features)
    nb = cf.shifted(a)
    dw = alpha * a[:, :, None, None] * nb[:, None, :, :]
    cf.w += np.where(cf.allowed, dw, 0.0)


def lateral_learn(corpus, config: FragmentConfig = FragmentConfig(), bank: FeatureBank = DEFAULT_BANK,
                  on_image=None) -> CorticalField:
    """Train the lateral field over ``corpus`` in order.

    Per image: encode, exuberant activation, Hebbian co-activation update,
    normalization of every unit that has incoming weight.  Pruning to the
    fan-in cap runs every ``prune_every`` images and once at the end.
    """
    corpus = list(corpus)
    if not corpus:
        raise InvalidArgument("corpus is empty")
    shape = np.asarray(corpus[0]).shape
    sheet = Sheet(shape[0] - 2, shape[1] - 2, bank.size)
    cf = CorticalField(sheet, config.radius)
    for i, image in enumerate(corpus):
        if np.asarray(image).shape != shape:
            raise InvalidArgument("corpus images must share one shape")
        feats = feature_encode(image, bank)
        active = exuberant_init(feats, config.q)
        hebbian_lateral(cf, np.where(active, feats.values, 0.0), config.alpha)
        normalize_lateral(cf, config.s)
        if (i + 1) % config.prune_every == 0:
            prune_lateral(cf, config.fan_in_cap, config.w_min, config.s)
        if on_image is not None:
            on_image(i, cf)
    if len(corpus) % config.prune_every:
        prune_lateral(cf, config.fan_in_cap, config.w_min, config.s)
    return cf


# --- silencing dynamics ----------------------------------------------------------

@dataclass(frozen=True)
class ThresholdSchedule:
    theta0: float = 0.1
    growth: float = 1.15
    theta_max: float = 0.6
    t_max: int = 100

    def __post_init__(self):
        if self.growth <= 1:
            raise InvalidArgument("threshold growth g must exceed 1")
        if self.theta0 <= 0 or self.theta_max < self.theta0:
            raise InvalidArgument("need 0 < theta0 <= theta_max")
        if self.t_max < 1:
            raise InvalidArgument("t_max must be >= 1")

    def at(self, t: int) -> float:
        return min(self.theta0 * self.growth ** t, self.theta_max)


@dataclass
class SettleResult:
    active: np.ndarray          # (n_nodes, F) bool
    support: np.ndarray         # (n_nodes, F) final support
    steps: int
    sizes: list                 # |A(t)| per step
    boundary_ties: int = 0

    def units(self) -> np.ndarray:
        return np.flatnonzero(self.active.reshape(-1))


def unit_support(ff, active, cf: CorticalField, ff_gain: float = 1.0, lam: float = 1.0) -> np.ndarray:
    return ff_gain * ff + lam * cf.lateral_input(active.astype(np.float64))


def settle_fragments(active0, cf: CorticalField, schedule: ThresholdSchedule = ThresholdSchedule(),
                     ff=None, ff_gain: float = 1.0, lam: float = 1.0) -> SettleResult:
    """Shrink the active set under a rising threshold until it stops changing.

    A(t+1) = {u in A(t) : ff_gain ff_u + lam sum_{v in A(t)} w_uv >= theta(t)}.
    Support exactly at the threshold (within 1e-12) counts as surviving and
    is logged, so the outcome does not hinge on rounding.
    """
    A = np.asarray(active0, dtype=bool).reshape(cf.sheet.n_nodes, cf.sheet.features).copy()
    ff = np.zeros(A.shape) if ff is None else np.asarray(ff, dtype=np.float64).reshape(A.shape)
    sizes = [int(A.sum())]
    ties = 0
    t = 0
    while True:
        theta = schedule.at(t)
        support = unit_support(ff, A, cf, ff_gain, lam)
        near = A & (np.abs(support - theta) <= 1e-12)
        if near.any():
            ties += int(near.sum())
            log.debug("settle step %d: %d units on the threshold, kept", t, int(near.sum()))
        new = A & (support >= theta - 1e-12)
        t += 1
        done = (not new.any()) or (theta >= schedule.theta_max and np.array_equal(new, A)) or t >= schedule.t_max + sizes[0]
        A = new
        sizes.append(int(A.sum()))
        if done:
            break
    support = unit_support(ff, A, cf, ff_gain, lam)
    return SettleResult(A, support, t, sizes, ties)


def compete(active0, cf: CorticalField, ff, schedule: ThresholdSchedule = ThresholdSchedule(),
            ff_gain: float = 1.0, lam: float = 1.0, inhibition: float = 0.0, n_ref: float = 1.0) -> SettleResult:
    """Asynchronous silencing with activity-proportional global inhibition.

    Same support as ``settle_fragments`` but the threshold is
    theta(t) + inhibition * |A| / n_ref, and units are silenced one at a
    time, weakest margin first (ties to the lower unit id).  A silenced
    unit withdraws its support from its targets before the next pick, so a
    net that starts losing members collapses while a competing net holds.
    """
    if inhibition < 0 or n_ref <= 0:
        raise InvalidArgument("need inhibition >= 0 and n_ref > 0")
    shape = (cf.sheet.n_nodes, cf.sheet.features)
    A = np.asarray(active0, dtype=bool).reshape(-1).copy()
    ff = np.asarray(ff, dtype=np.float64).reshape(-1)
    out_edges = cf.outgoing()
    lat = cf.lateral_input(A.reshape(shape).astype(np.float64)).reshape(-1)
    sizes = [int(A.sum())]
    n = sizes[0]
    t = 0
    removed_total = 0
    while True:
        theta = schedule.at(t)
        removed = 0
        while n:
            margin = np.where(A, ff_gain * ff + lam * lat - theta - inhibition * n / n_ref, np.inf)
            u = int(np.argmin(margin))
            if margin[u] >= -1e-12:
                break
            A[u] = False
            n -= 1
            removed += 1
            lo, hi = out_edges.indptr[u], out_edges.indptr[u + 1]
            lat[out_edges.indices[lo:hi]] -= out_edges.data[lo:hi]
        removed_total += removed
        sizes.append(n)
        t += 1
        if n == 0 or (theta >= schedule.theta_max and removed == 0) or t >= schedule.t_max + sizes[0]:
            break
    A = A.reshape(shape)
    support = unit_support(ff.reshape(shape), A, cf, ff_gain, lam)
    return SettleResult(A, support, t, sizes)


def evoke(image, cf: CorticalField, config: FragmentConfig = FragmentConfig(),
          bank: FeatureBank = DEFAULT_BANK) -> SettleResult:
    """Encode an image, activate exuberantly, and settle."""
    feats = feature_encode(image, bank)
    active = exuberant_init(feats, config.q)
    return settle_fragments(active, cf, config.schedule(), feats.values, config.ff_gain, config.lam)


# --- components and fragments ------------------------------------------------------

@dataclass
class CoherentNet:
    active: np.ndarray                  # sorted unit ids
    edges: np.ndarray                   # (m, 2) unit pairs
    components: list                    # list of sorted unit-id arrays

    @property
    def n_components(self) -> int:
        return len(self.components)


def coherent_components(active_units, cf: CorticalField, w_support: float) -> CoherentNet:
    """Connected components of the active units under edges with w >= w_support.

    Sorted by size (largest first), ties by the lowest member id.
    """
    units = np.unique(np.asarray(active_units, dtype=np.int64).reshape(-1))
    if len(units) == 0:
        return CoherentNet(units, np.zeros((0, 2), np.int64), [])
    pairs = cf.edges(w_support, units)
    pos = np.full(cf.sheet.n_units, -1, dtype=np.int64)
    pos[units] = np.arange(len(units))
    n = len(units)
    g = coo_matrix((np.ones(len(pairs)), (pos[pairs[:, 0]], pos[pairs[:, 1]])), shape=(n, n)) if len(pairs) \
        else coo_matrix((n, n))
    _, labels = connected_components(g, directed=False)
    comps = [units[labels == lab] for lab in np.unique(labels)]
    comps.sort(key=lambda c: (-len(c), int(c[0])))
    return CoherentNet(units, pairs, comps)


def _unit_coords(units, sheet: Sheet) -> np.ndarray:
    """(n, 3) rows of (row, col, feature) for unit ids."""
    node, f = np.divmod(np.asarray(units, dtype=np.int64), sheet.features)
    r, c = np.divmod(node, sheet.cols)
    return np.stack([r, c, f], axis=1)


def canonical_members(units, sheet: Sheet) -> frozenset:
    """Member set translated so its bounding box starts at (0, 0)."""
    rc = _unit_coords(units, sheet)
    rc[:, :2] -= rc[:, :2].min(axis=0)
    return frozenset(map(tuple, rc.tolist()))


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class NetFragment:
    id: int
    members: frozenset                  # {(dr, dc, feature)}
    edges: list                         # internal edges as ((dr, dc, f), (dr, dc, f))
    count: int = 1
    sources: list = field(default_factory=list)   # image indices it was seen in
    tally: dict = field(default_factory=dict, repr=False)   # member -> occurrences

    def absorb(self, members) -> None:
        for m in members:
            self.tally[m] = self.tally.get(m, 0) + 1

    def consensus(self, quorum: float = 0.5) -> frozenset:
        """Members seen in at least ``quorum`` of the merged occurrences."""
        return self._consensus(quorum)[0]

    def _consensus(self, quorum):
        n = max(1, len(self.sources))
        keep = [m for m, k in self.tally.items() if k >= quorum * n]
        if not keep:
            return self.members, (0, 0)
        rc = np.array(keep)
        shift = rc[:, :2].min(axis=0)
        rc[:, :2] -= shift
        return frozenset(map(tuple, rc.tolist())), (int(shift[0]), int(shift[1]))

    def apply_consensus(self, quorum: float = 0.5) -> None:
        """Replace members by the consensus set; edges follow the same re-anchoring."""
        members, (sr, sc) = self._consensus(quorum)
        moved = [((a[0] - sr, a[1] - sc, a[2]), (b[0] - sr, b[1] - sc, b[2])) for a, b in self.edges]
        self.edges = [e for e in moved if e[0] in members and e[1] in members]
        self.members = members

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def extent(self):
        m = np.array(sorted(self.members))
        return int(m[:, 0].max()) + 1, int(m[:, 1].max()) + 1

    def place(self, origin) -> frozenset:
        r0, c0 = origin
        return frozenset((r + r0, c + c0, f) for r, c, f in self.members)


def split_component(units, sheet: Sheet, tile: int):
    """Cut an oversized component into spatial tiles of ``tile`` x ``tile`` nodes."""
    rc = _unit_coords(units, sheet)
    key = (rc[:, 0] // tile) * (sheet.cols // tile + 1) + rc[:, 1] // tile
    units = np.asarray(units)
    return [units[key == k] for k in np.unique(key)]


def _internal_edges(members_units, pairs, sheet):
    """Edges with both ends in the piece, in coordinates relative to its bounding box."""
    if len(pairs) == 0:
        return []
    keep = np.isin(pairs[:, 0], members_units) & np.isin(pairs[:, 1], members_units)
    origin = np.array([*_unit_coords(members_units, sheet)[:, :2].min(axis=0), 0])
    sel = pairs[keep]
    a = _unit_coords(sel[:, 0], sheet) - origin
    b = _unit_coords(sel[:, 1], sheet) - origin
    return [(tuple(x), tuple(y)) for x, y in zip(a.tolist(), b.tolist())]


def component_pieces(comp, sheet: Sheet, config: FragmentConfig):
    """A component as fragment candidates: itself, or tiles when it is too large."""
    if len(comp) <= config.s_max:
        return [comp]
    tile = int(math.floor(config.radius)) + 1
    return [p for p in split_component(comp, sheet, tile) if len(p) <= config.s_max]


def extract_fragments(corpus, cf: CorticalField, config: FragmentConfig = FragmentConfig(),
                      bank: FeatureBank = DEFAULT_BANK):
    """Cluster recurring settled components across the corpus into a library.

    Returns kept fragments with fresh ids 0..n-1 in discovery order.
    """
    ws = config.support_threshold
    found: list[NetFragment] = []
    for idx, image in enumerate(corpus):
        res = evoke(image, cf, config, bank)
        net = coherent_components(res.units(), cf, ws)
        seen_here = set()
        for comp in net.components:
            for piece in component_pieces(comp, cf.sheet, config):
                if len(piece) < config.s_min:
                    continue
                members = canonical_members(piece, cf.sheet)
                best, best_j = None, config.merge_jaccard
                for frag in found:
                    j = jaccard(members, frag.members)
                    if j >= best_j and (best is None or j > best_j):
                        best, best_j = frag, j
                if best is None:
                    frag = NetFragment(len(found), members, _internal_edges(piece, net.edges, cf.sheet), 0, [])
                    found.append(frag)
                    best = frag
                # occurrence = number of images in which the fragment appears
                if best.id not in seen_here:
                    best.count += 1
                    best.sources.append(idx)
                    best.absorb(members)
                    seen_here.add(best.id)
    for frag in found:
        frag.apply_consensus(config.quorum)
    kept = [f for f in found if f.count >= config.c_min and config.s_min <= f.size <= config.s_max]
    for i, f in enumerate(kept):
        f.id = i
    return kept


def reactivation_jaccard(fragment: NetFragment, stable_units, sheet: Sheet, origin, align: int = 2) -> float:
    """Best Jaccard between the placed fragment and the stable set inside its hull.

    The fragment is placed with its bounding box at ``origin`` and shifted by
    up to ``align`` nodes in each direction; the stable set is restricted
    to the placed bounding box before comparison.
    """
    stable = _unit_coords(stable_units, sheet)
    h, w = fragment.extent
    best = 0.0
    for dr in range(-align, align + 1):
        for dc in range(-align, align + 1):
            r0, c0 = origin[0] + dr, origin[1] + dc
            placed = fragment.place((r0, c0))
            inside = (stable[:, 0] >= r0) & (stable[:, 0] < r0 + h) & (stable[:, 1] >= c0) & (stable[:, 1] < c0 + w)
            local = set(map(tuple, stable[inside].tolist()))
            best = max(best, jaccard(placed, local) if (placed or local) else 0.0)
    return best


def jaccard_sets(a, b) -> float:
    """Plain Jaccard of two unit sets; two empty sets give 0."""
    a, b = set(np.asarray(a).reshape(-1).tolist()), set(np.asarray(b).reshape(-1).tolist())
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


# --- figure-ground ------------------------------------------------------------------

def internal_support(units, cf: CorticalField) -> float:
    """Mean over ``units`` of the lateral input each receives from the others."""
    units = np.asarray(units, dtype=np.int64).reshape(-1)
    if len(units) == 0:
        return 0.0
    a = np.zeros(cf.sheet.n_units)
    a[units] = 1.0
    return float(cf.lateral_input(a).reshape(-1)[units].mean())


@dataclass
class FigureGround:
    mask: np.ndarray            # (rows, cols) bool over image pixels
    component: np.ndarray       # unit ids of the chosen net
    degenerate: bool            # no figure: the chosen net fills the scene
    n_components: int


def node_mask(units, sheet: Sheet, image_shape) -> np.ndarray:
    """Image pixels at the centers of the nodes carrying ``units``."""
    m = np.zeros(image_shape, dtype=bool)
    nodes = np.unique(np.asarray(units, dtype=np.int64) // sheet.features)
    r, c = np.divmod(nodes, sheet.cols)
    m[r + 1, c + 1] = True
    return m


def figure_ground(image, cf: CorticalField, config: FragmentConfig = FragmentConfig(),
                  bank: FeatureBank = DEFAULT_BANK) -> FigureGround:
    """Segment the most coherent net from the rest of the scene.

    Components are visited largest first; the first whose mean internal
    support exceeds that of all remaining active units is the figure.  A
    pixel belongs to the mask when at least ``config.vote`` of the nine
    nodes whose receptive fields cover it are in the figure net; holes are
    then filled (4-connected background).
    """

    image = np.asarray(image, dtype=np.float64)
    res = evoke(image, cf, config, bank)
    net = coherent_components(res.units(), cf, config.support_threshold)
    empty = np.zeros(image.shape, dtype=bool)
    if net.n_components == 0:
        return FigureGround(empty, np.zeros(0, np.int64), False, 0)
    chosen = None
    for comp in net.components:
        rest = np.setdiff1d(net.active, comp)
        if internal_support(comp, cf) > internal_support(rest, cf):
            chosen = comp
            break
    if chosen is None:
        return FigureGround(empty, np.zeros(0, np.int64), False, net.n_components)
    votes = convolve(node_mask(chosen, cf.sheet, image.shape).astype(np.int64),
                     np.ones((3, 3), dtype=np.int64), mode="constant")
    mask = binary_fill_holes(votes >= config.vote)
    # a net filling the scene leaves no ground to stand out from
    degenerate = bool(mask[1:-1, 1:-1].mean() >= DEGENERATE_COVER)
    if degenerate:
        mask = np.zeros(image.shape, dtype=bool)
        mask[1:-1, 1:-1] = True
    return FigureGround(mask, chosen, degenerate, net.n_components)


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


# --- collective selection --------------------------------------------------------------

@dataclass
class Selection:
    winner: int | None          # 0 for P1, 1 for P2, None for a mixed or empty state
    purity: float
    overlaps: tuple             # (|A & P1| / |P1|, |A & P2| / |P2|)
    active: np.ndarray


def net_selection(ff1, ff2, P1, P2, cf: CorticalField, delta: float = 0.0,
                  config: FragmentConfig = FragmentConfig()) -> Selection:
    """Let two trained nets compete for an ambiguous input.

    Input is the pointwise max of (1 + delta) ff1 and (1 - delta) ff2.  Every
    unit with nonzero input starts active; activity-proportional inhibition
    (normalized by the larger pattern) and asynchronous silencing leave one
    net standing.
    """
    P1 = np.asarray(P1, dtype=bool).reshape(-1)
    P2 = np.asarray(P2, dtype=bool).reshape(-1)
    if not P1.any() or not P2.any():
        raise InvalidArgument("patterns must be nonempty")
    shared = (P1 & P2).sum()
    if shared > 0.2 * min(P1.sum(), P2.sum()):
        raise InvalidArgument("patterns overlap by more than 20% of their units")
    if not 0 <= delta < 1:
        raise InvalidArgument("delta must lie in [0, 1)")
    ff = np.maximum((1 + delta) * np.asarray(ff1, dtype=np.float64).reshape(-1),
                    (1 - delta) * np.asarray(ff2, dtype=np.float64).reshape(-1))
    active0 = ff > 0
    res = compete(active0, cf, ff, config.schedule(), config.ff_gain, config.lam,
                  config.selection_inhibition, float(max(P1.sum(), P2.sum())))
    A = res.active.reshape(-1)
    o1 = float((A & P1).sum() / P1.sum())
    o2 = float((A & P2).sum() / P2.sum())
    if (o1 > 0.5 and o2 > 0.5) or (o1 == 0 and o2 == 0):
        winner = None
    else:
        winner = 0 if o1 >= o2 else 1
    purity = max(o1, o2) if winner is not None else 0.0
    return Selection(winner, purity, (o1, o2), A)

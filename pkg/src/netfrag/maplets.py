"""One-shot object models and recognition by maplet relaxation.

A model is the feature field of a single exposure, cropped to its mask.
Recognition links every model node to its K most similar image nodes and
lets neighboring links support each other when their displacements agree,
until one smooth correspondence map remains per scale hypothesis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .fragments import DEFAULT_BANK, FeatureBank, feature_encode

STORE_MAGIC = b"NFM1"
SCALES = (0.8, 1.0, 1.25)
_DIRS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)


def similarity(u_feats, v_feats) -> float:
    """Cosine similarity of two nonnegative vectors; 0 when either is zero."""
    u = np.asarray(u_feats, dtype=np.float64).reshape(-1)
    v = np.asarray(v_feats, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise InvalidArgument("feature vectors differ in length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(min(1.0, max(0.0, u @ v / (nu * nv))))


# --- models -----------------------------------------------------------------------

@dataclass
class Model:
    id: int
    features: np.ndarray        # (rows, cols, F) node field, cropped
    mask: np.ndarray            # (rows, cols) bool foreground nodes
    label: str
    origin: tuple = (0, 0)      # crop offset in the source node grid

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.ndim != 3 or self.features.shape[:2] != self.mask.shape:
            raise InvalidArgument("model features must be (rows, cols, F) matching the mask")
        if not np.all(np.isfinite(self.features)) or np.any(self.features < 0):
            raise InvalidArgument("model features must be finite and nonnegative")

    @property
    def nodes(self) -> np.ndarray:
        """(V, 2) foreground node coordinates, row-major."""
        return np.argwhere(self.mask)


@dataclass
class ModelStore:
    models: list = field(default_factory=list)

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def next_id(self) -> int:
        return max((m.id for m in self.models), default=-1) + 1

    def add(self, model: Model) -> int:
        if any(m.id == model.id for m in self.models):
            raise InvalidArgument(f"duplicate model id {model.id}")
        self.models.append(model)
        return model.id

    def get(self, model_id: int) -> Model:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)


def encode_field(image, bank: FeatureBank = DEFAULT_BANK) -> np.ndarray:
    """(rows-2, cols-2, F) feature grid; node (r, c) sits on pixel (r+1, c+1)."""
    st = feature_encode(image, bank)
    return st.values.reshape(st.sheet.rows, st.sheet.cols, st.sheet.features)


def store_model(image, mask, label: str, store: ModelStore, bank: FeatureBank = DEFAULT_BANK) -> int:
    """Encode once, crop to the mask's bounding box, append.  No training."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape:
        raise InvalidArgument("mask and image shapes differ")
    node_mask = mask[1:-1, 1:-1]
    if not node_mask.any():
        raise InvalidArgument("mask is empty")
    feats = encode_field(image, bank)
    rows, cols = np.nonzero(node_mask)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    model = Model(store.next_id(), feats[r0:r1, c0:c1].copy(), node_mask[r0:r1, c0:c1].copy(),
                  str(label), (int(r0), int(c0)))
    return store.add(model)


# --- links ------------------------------------------------------------------------------

def window_offsets(radius: int) -> np.ndarray:
    return np.array([(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)],
                    dtype=np.float64)


def descriptors(grid: np.ndarray, points: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """(P, len(offsets) * F) features sampled bilinearly at points + offsets, zero outside the grid."""
    rows, cols, F = grid.shape
    at = np.asarray(points, dtype=np.float64)[:, None, :] + offsets[None, :, :]
    base = np.floor(at + 1e-9).astype(np.int64)
    frac = np.clip(at - base, 0.0, 1.0)
    d = np.zeros(at.shape[:2] + (F,))
    for dr in (0, 1):
        for dc in (0, 1):
            wr = frac[..., 0] if dr else 1.0 - frac[..., 0]
            wc = frac[..., 1] if dc else 1.0 - frac[..., 1]
            w = wr * wc
            r = base[..., 0] + dr
            c = base[..., 1] + dc
            inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols) & (w > 0)
            d += grid[np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)] * (w * inside)[..., None]
    return d.reshape(len(at), -1)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (a @ b.T) / (na[:, None] * nb[None, :])
    s = np.where((na[:, None] > 0) & (nb[None, :] > 0), s, 0.0)
    return np.clip(s, 0.0, 1.0)


@dataclass
class LinkSet:
    """Top-K candidate links per model foreground node for one scale."""

    model_nodes: np.ndarray     # (V, 2)
    image_nodes: np.ndarray     # (V, K, 2)
    image_ids: np.ndarray       # (V, K) row-major image node ids
    sim: np.ndarray             # (V, K) static fitness in [0, 1]
    scale: float
    image_shape: tuple

    @property
    def K(self) -> int:
        return self.sim.shape[1]


def top_k(score: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row, ties to the lower index.

    Equal to ``argsort(-score, kind="stable")[:, :k]``; rows without a tie at
    the cut are resolved by a partial partition.
    """
    n = score.shape[1]
    if k >= n:
        return np.argsort(-score, axis=1, kind="stable")
    part = np.argpartition(-score, k - 1, axis=1)[:, :k]
    cut = np.take_along_axis(score, part, axis=1).min(axis=1)
    ambiguous = (score >= cut[:, None]).sum(axis=1) > k
    vals = np.take_along_axis(score, part, axis=1)
    # sort the chosen k by (-score, index)
    order = np.argsort(part, axis=1, kind="stable")
    part = np.take_along_axis(part, order, axis=1)
    vals = np.take_along_axis(vals, order, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    out = np.take_along_axis(part, order, axis=1)
    if ambiguous.any():
        out[ambiguous] = np.argsort(-score[ambiguous], axis=1, kind="stable")[:, :k]
    return out


class ImageIndex:
    """Image feature grid with region descriptors cached per scale."""

    def __init__(self, grid: np.ndarray, window: int = 2):
        self.grid = np.asarray(grid, dtype=np.float64)
        self.window = int(window)
        rows, cols, _ = self.grid.shape
        self.nodes = np.argwhere(np.ones((rows, cols), dtype=bool))
        self._cache = {}

    def descriptors(self, scale: float) -> np.ndarray:
        key = float(scale)
        if key not in self._cache:
            offs = window_offsets(self.window) * key
            d = descriptors(self.grid, self.nodes, offs)
            n = np.linalg.norm(d, axis=1)
            self._cache[key] = (d, n)
        return self._cache[key]


def build_links(model: Model, image_grid, K: int = 20, scale: float = 1.0,
                window: int = 2) -> LinkSet:
    """Keep the K image nodes most similar to each model foreground node.

    Similarity compares small regions: the model's (2w+1)^2 node window
    against the image window sampled at ``scale`` times the same offsets.
    Ties go to the lower image node id.
    """
    if K < 4:
        raise InvalidArgument("K must be >= 4")
    vn = model.nodes
    if len(vn) == 0:
        raise InvalidArgument("model has an empty foreground")
    index = image_grid if isinstance(image_grid, ImageIndex) else ImageIndex(image_grid, window)
    if index.window != window:
        raise InvalidArgument("image index built for a different window")
    rows, cols, F = index.grid.shape
    if F != model.features.shape[2]:
        raise InvalidArgument("model and image use different feature counts")
    dv = descriptors(model.features, vn, window_offsets(window))
    un = index.nodes
    du, nu = index.descriptors(scale)
    nv = np.linalg.norm(dv, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (dv @ du.T) / (nv[:, None] * nu[None, :])
    sim = np.clip(np.where((nv[:, None] > 0) & (nu[None, :] > 0), sim, 0.0), 0.0, 1.0)
    order = top_k(sim, min(K, len(un)))
    return LinkSet(vn, un[order], order, np.take_along_axis(sim, order, axis=1), float(scale), (rows, cols))


# --- relaxation ------------------------------------------------------------------------

@dataclass(frozen=True)
class RelaxParams:
    scales: tuple = SCALES
    iterations: int = 30
    eta: float = 0.5
    beta: float = 1.0
    eps0: float = 0.05
    tol: float = 1.5
    K: int = 20
    window: int = 3
    refine_rounds: int = 4      # re-relaxations of the top match at the fitted scale

    def __post_init__(self):
        if self.iterations <= 0:
            raise InvalidArgument("iterations must be positive")
        if not 0 < self.eta <= 1:
            raise InvalidArgument("eta must lie in (0, 1]")
        if self.beta < 0 or self.eps0 < 0 or self.tol <= 0:
            raise InvalidArgument("beta, eps0 must be >= 0 and tol > 0")
        if not self.scales:
            raise InvalidArgument("need at least one scale hypothesis")
        if self.refine_rounds < 0:
            raise InvalidArgument("refine_rounds must be >= 0")


@dataclass
class CorrespondenceMap:
    model_nodes: np.ndarray     # (V, 2)
    winners: np.ndarray         # (V, 2) image node per model node
    confidence: np.ndarray      # (V,) relaxed activity of the winning link
    winner_sim: np.ndarray      # (V,)
    smooth: np.ndarray          # (V,) per-node smoothness
    Q: float
    smoothness: float
    delta: np.ndarray           # (2,) translation of u = sigma v + delta
    sigma: float
    scale_hypothesis: float

    def map_point(self, v) -> np.ndarray:
        return self.sigma * np.asarray(v, dtype=np.float64) + self.delta


def _neighbor_index(nodes: np.ndarray) -> np.ndarray:
    """(V, 4) index of each 4-neighbor in ``nodes`` or -1."""
    lookup = {tuple(p): i for i, p in enumerate(nodes.tolist())}
    out = np.full((len(nodes), 4), -1, dtype=np.int64)
    for i, (r, c) in enumerate(nodes.tolist()):
        for d, (dr, dc) in enumerate(_DIRS.tolist()):
            out[i, d] = lookup.get((r + dr, c + dc), -1)
    return out


def _consistency(links: LinkSet, nbr: np.ndarray, tol: float) -> np.ndarray:
    """(V, 4, K, K) bool: link k of v agrees with link j of neighbor d."""
    u = links.image_nodes.astype(np.float64)                 # (V, K, 2)
    V, K = links.sim.shape
    safe = np.maximum(nbr, 0)
    un = u[safe]                                             # (V, 4, K, 2)
    expected = links.scale * _DIRS.astype(np.float64)        # u - u' should equal sigma (v - v') = -sigma d
    dr = u[:, None, :, None, 0] - un[:, :, None, :, 0] + expected[None, :, None, None, 0]
    dc = u[:, None, :, None, 1] - un[:, :, None, :, 1] + expected[None, :, None, None, 1]
    ok = dr * dr + dc * dc <= tol * tol + 1e-12
    return ok & (nbr >= 0)[:, :, None, None]


def relax_links(links: LinkSet, params: RelaxParams = RelaxParams(), check: bool = True):
    """Run the maplet dynamics for one scale hypothesis; returns (x, C, nbr)."""
    nbr = _neighbor_index(links.model_nodes)
    C = _consistency(links, nbr, params.tol)
    V, K = links.sim.shape
    # (V, K, 4K) so that S = Cm @ x[neighbors] is one batched product
    Cm = np.ascontiguousarray(C.transpose(0, 2, 1, 3).reshape(V, K, 4 * K), dtype=np.float64)
    x = links.sim.copy()
    safe = np.maximum(nbr, 0)
    for _ in range(params.iterations):
        xn = x[safe].reshape(V, 4 * K, 1)
        S = (Cm @ xn)[:, :, 0]
        x = (1 - params.eta) * x + params.eta * links.sim * (params.eps0 + params.beta * S)
        top = x.max(axis=1, keepdims=True)
        x = np.where(top > 0, x / np.where(top > 0, top, 1.0), 0.0)
        if check and (np.any(x < 0) or np.any(x > 1 + 1e-12)):
            raise AssertionError("relaxation left [0, 1]")
    return x, C, nbr


def fit_transform(v: np.ndarray, u: np.ndarray, w: np.ndarray):
    """Weighted least squares u = sigma v + delta with one isotropic scale."""
    w = np.asarray(w, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    vm = (w[:, None] * v).sum(0) / w.sum()
    um = (w[:, None] * u).sum(0) / w.sum()
    vc, uc = v - vm, u - um
    den = (w * (vc ** 2).sum(1)).sum()
    sigma = (w * (vc * uc).sum(1)).sum() / den if den > 0 else 1.0
    return um - sigma * vm, float(sigma)


def robust_fit(v: np.ndarray, u: np.ndarray, w: np.ndarray, tol: float = 1.5, rounds: int = 3):
    """Trimmed refits: drop winners whose residual exceeds ``tol`` (or the median, if larger)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    delta, sigma = fit_transform(v, u, w)
    for _ in range(rounds):
        r = np.linalg.norm(u - (sigma * v + delta), axis=1)
        wk = np.where(r <= max(tol, float(np.median(r))), w, 0.0)
        if wk.sum() <= 0:
            break
        delta, sigma = fit_transform(v, u, wk)
    return delta, sigma


def relax(links: LinkSet, params: RelaxParams = RelaxParams()) -> CorrespondenceMap:
    """Relax one link set into a correspondence map and read out its quality."""
    x, C, nbr = relax_links(links, params)
    V = len(links.model_nodes)
    best = np.argmax(x, axis=1)                               # first max = lowest image id
    rows = np.arange(V)
    winners = links.image_nodes[rows, best]
    conf = x[rows, best]
    wsim = links.sim[rows, best]
    has = nbr >= 0
    agree = C[rows[:, None], np.arange(4)[None, :], best[:, None], best[np.maximum(nbr, 0)]] & has
    n_nb = has.sum(axis=1)
    smooth = np.where(n_nb > 0, agree.sum(axis=1) / np.maximum(n_nb, 1), 0.0)
    Q = float(np.mean(wsim * smooth))
    delta, sigma = robust_fit(links.model_nodes, winners, conf * smooth, params.tol)
    return CorrespondenceMap(links.model_nodes, winners, conf, wsim, smooth, Q, float(smooth.mean()),
                             delta, sigma, links.scale)


def match_all(model: Model, image_grid, params: RelaxParams = RelaxParams()) -> list:
    """One relaxed map per scale hypothesis, in hypothesis order."""
    return [relax(build_links(model, image_grid, params.K, scale, params.window), params)
            for scale in params.scales]


def match(model: Model, image_grid, params: RelaxParams = RelaxParams()) -> CorrespondenceMap:
    """Best map over the scale hypotheses (ties to the earlier hypothesis)."""
    best = None
    for cm in match_all(model, image_grid, params):
        if best is None or cm.Q > best.Q:
            best = cm
    return best


def refine(model: Model, image_grid, cm: CorrespondenceMap, params: RelaxParams = RelaxParams()):
    """Re-relax at the fitted scale until it settles.

    The hypothesis grid is coarse and the fit leans toward the hypothesis it
    came from; a few rounds at the fitted scale remove most of that pull.
    """
    for _ in range(params.refine_rounds):
        if cm.sigma <= 0:
            break
        nxt = relax(build_links(model, image_grid, params.K, cm.sigma, params.window), params)
        done = abs(nxt.sigma - cm.sigma) < 0.01
        cm = nxt
        if done:
            break
    return cm


def refine_best(model: Model, image_grid, maps, params: RelaxParams = RelaxParams()):
    """Refine from every hypothesis and keep the highest refined Q (ties to the earlier one).

    Refinement can stall on either side of the true scale, so a single start
    from the best grid hypothesis is not enough.
    """
    best = None
    for cm in maps:
        r = refine(model, image_grid, cm, params)
        if best is None or r.Q > best.Q:
            best = r
    return best


@dataclass
class Recognition:
    model_id: int
    label: str
    Q: float
    map: CorrespondenceMap


def recognize(image, store: ModelStore, params: RelaxParams = RelaxParams(),
              bank: FeatureBank = DEFAULT_BANK) -> list:
    """Match the image against every model; ranked by Q, ties to the lower id."""
    if len(store) == 0:
        raise InvalidArgument("model store is empty")
    index = ImageIndex(encode_field(image, bank), params.window)
    out, maps = [], {}
    for m in store:
        maps[m.id] = match_all(m, index, params)
        cm = max(maps[m.id], key=lambda c: c.Q)     # first max = earlier hypothesis
        out.append(Recognition(m.id, m.label, cm.Q, cm))
    out.sort(key=lambda r: (-r.Q, r.model_id))
    # ranking uses the hypothesis-grid Q; only the winner's transform is refined
    top = out[0]
    top.map = refine_best(store.get(top.model_id), index, maps[top.model_id], params)
    return out


# --- serialization ------------------------------------------------------------------------

def write_store(store: ModelStore, path) -> int:
    """NFM1: magic, count, then per model id, label, shape, f64 features, packed mask bits."""
    parts = [STORE_MAGIC, struct.pack("<I", len(store))]
    for m in store:
        label = m.label.encode("utf-8")
        rows, cols, F = m.features.shape
        parts.append(struct.pack("<II", m.id, len(label)))
        parts.append(label)
        parts.append(struct.pack("<III", rows, cols, F))
        parts.append(m.features.astype("<f8").tobytes(order="C"))
        parts.append(np.packbits(m.mask.reshape(-1), bitorder="little").tobytes())
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


def read_store(path) -> ModelStore:
    data = Path(path).read_bytes()
    if data[:4] != STORE_MAGIC:
        raise FormatError("not an NFM1 model store")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("model store truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    store = ModelStore()
    for _ in range(count):
        mid, n_label = struct.unpack("<II", take(8))
        try:
            label = take(n_label).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad label encoding: {exc}") from None
        rows, cols, F = struct.unpack("<III", take(12))
        feats = np.frombuffer(take(8 * rows * cols * F), dtype="<f8").reshape(rows, cols, F).copy()
        nbits = rows * cols
        bits = np.unpackbits(np.frombuffer(take((nbits + 7) // 8), dtype=np.uint8), bitorder="little")
        try:
            store.add(Model(mid, feats, bits[:nbits].reshape(rows, cols).astype(bool), label))
        except InvalidArgument as exc:
            raise FormatError(str(exc)) from None
    if pos != len(data):
        raise FormatError("trailing bytes after model store")
    return store


def write_map_csv(cm: CorrespondenceMap, path) -> None:
    lines = ["v_row,v_col,u_row,u_col,confidence"]
    for v, u, c in zip(cm.model_nodes.tolist(), cm.winners.tolist(), cm.confidence.tolist()):
        lines.append(f"{v[0]},{v[1]},{u[0]},{u[1]},{c:.17g}")
    lines.append(f"# Q={cm.Q:.17g},smoothness={cm.smoothness:.17g},dx={cm.delta[1]:.17g},"
                 f"dy={cm.delta[0]:.17g},sigma={cm.sigma:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")

"""Retinotopic self-organization: spontaneous activity, Hebbian growth,
synaptic budget normalization and pruning, plus the order metrics.

Modeling choices the source theory leaves open:

* retinal spontaneous activity is a truncated Gaussian blob;
* plasticity is plain Hebbian growth of existing synapses followed by
  divisive post-synaptic normalization to a fixed budget ``s``;
* coarse-to-fine refinement comes only from a rising lateral inhibition
  amplitude, optionally together with a decaying learning rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DegenerateGeometryError, DegenerateUnitError, InvalidArgument, NumericalFailure
from .rng import RngStream
from .substrate import ActivityState, Sheet, WeightField, affine_correspondence, init_weight_field

log = logging.getLogger(__name__)

BUDGET_RTOL = 1e-9


@dataclass(frozen=True)
class LateralKernel:
    """Difference of Gaussians on grid distance."""

    excitation: float
    excitation_radius: float
    inhibition: float
    inhibition_radius: float

    def __post_init__(self):
        if self.excitation < 0 or self.inhibition < 0:
            raise InvalidArgument("kernel amplitudes must be nonnegative")
        if not 0 < self.excitation_radius < self.inhibition_radius:
            raise InvalidArgument("kernel radii must satisfy 0 < r_e < r_i")

    def with_inhibition(self, amplitude: float) -> "LateralKernel":
        return LateralKernel(self.excitation, self.excitation_radius, amplitude, self.inhibition_radius)


@dataclass
class SelfOrgConfig:
    pre_shape: tuple = (16, 16)
    post_shape: tuple = (16, 16)
    alpha: float = 0.005
    alpha_decay_epochs: float = 30.0     # alpha(e) = alpha / (1 + e / this); 0 disables decay
    alpha_half_life: float = 10.0        # extra halving every this many epochs after prune_start; 0 = off
    s: float = 1.0
    blob_radius: float = 1.5
    settle_steps: int = 10
    mass: float = 8.0
    epochs: int = 200
    events_per_epoch: int = 100
    excitation: float = 1.0
    excitation_radius: float = 1.5
    inhibition_radius: float = 8.0
    inhibition_start: float = 0.1
    inhibition_end: float = 1.0
    inhibition_ramp_epochs: int = 100
    inhibition_shape: str = "linear"     # or "geometric"
    init_mode: str = "polarity_biased"
    init_noise: float = 0.1
    polarity_bias: float = 0.2
    fan_in_cap: int = 16
    w_min: float = 0.01
    prune_start: int = 100
    eps_w: float | None = None           # default 1e-3 * s * N_post
    converge_epochs: int = 3
    stop_on_convergence: bool = True
    seed: int = 1

    def __post_init__(self):
        self.pre_shape = tuple(int(x) for x in self.pre_shape)
        self.post_shape = tuple(int(x) for x in self.post_shape)
        if self.alpha <= 0:
            raise InvalidArgument("alpha must be positive")
        if self.s <= 0:
            raise InvalidArgument("s must be positive")
        if self.alpha_decay_epochs < 0 or self.alpha_half_life < 0:
            raise InvalidArgument("alpha_decay_epochs and alpha_half_life must be >= 0")
        if self.eps_w is not None and self.eps_w <= 0:
            raise InvalidArgument("eps_w must be positive")
        if self.inhibition_end < self.inhibition_start:
            raise InvalidArgument("inhibition schedule must be nondecreasing")
        if self.blob_radius < 1:
            raise InvalidArgument("blob_radius must be >= 1")
        if self.fan_in_cap < 1:
            raise InvalidArgument("fan_in_cap must be >= 1")
        if self.settle_steps < 1 or self.epochs < 1 or self.events_per_epoch < 1:
            raise InvalidArgument("settle_steps, epochs and events_per_epoch must be >= 1")
        if self.inhibition_shape not in ("linear", "geometric"):
            raise InvalidArgument(f"unknown inhibition_shape {self.inhibition_shape!r}")
        if self.inhibition_shape == "geometric" and self.inhibition_start <= 0:
            raise InvalidArgument("geometric inhibition ramp needs inhibition_start > 0")
        # validates geometry early
        LateralKernel(self.excitation, self.excitation_radius, self.inhibition_start, self.inhibition_radius)

    @property
    def eps(self) -> float:
        if self.eps_w is not None:
            return self.eps_w
        return 1e-3 * self.s * self.post_shape[0] * self.post_shape[1]

    def inhibition_at(self, epoch: int) -> float:
        """Nondecreasing ramp (linear or geometric), then constant."""
        if self.inhibition_ramp_epochs <= 0:
            return self.inhibition_end
        frac = min(1.0, epoch / self.inhibition_ramp_epochs)
        if self.inhibition_shape == "geometric":
            return self.inhibition_start * (self.inhibition_end / self.inhibition_start) ** frac
        return self.inhibition_start + (self.inhibition_end - self.inhibition_start) * frac

    def alpha_at(self, epoch: int) -> float:
        a = self.alpha
        if self.alpha_decay_epochs > 0:
            a /= 1.0 + epoch / self.alpha_decay_epochs
        if self.alpha_half_life > 0 and epoch > self.prune_start:
            a *= 0.5 ** ((epoch - self.prune_start) / self.alpha_half_life)
        return a

    def kernel_at(self, epoch: int) -> LateralKernel:
        return LateralKernel(self.excitation, self.excitation_radius,
                             self.inhibition_at(epoch), self.inhibition_radius)

    def to_dict(self):
        return asdict(self)


@dataclass
class RunTrace:
    dw_l1: list = field(default_factory=list)
    neighbor_consistency: list = field(default_factory=list)
    affine_order: list = field(default_factory=list)
    mean_fan_in: list = field(default_factory=list)
    inhibition: list = field(default_factory=list)
    converged: bool = False
    converged_epoch: int | None = None

    def __len__(self):
        return len(self.dw_l1)

    def rows(self):
        for e in range(len(self)):
            yield (e, self.dw_l1[e], self.neighbor_consistency[e], self.affine_order[e], self.mean_fan_in[e])


# --- activity -------------------------------------------------------------

def gaussian_blob(sheet: Sheet, center, radius: float) -> np.ndarray:
    """Peak-1 Gaussian around ``center``, zero beyond 3 radii."""
    d2 = np.sum((sheet.coordinates() - np.asarray(center, dtype=np.float64)) ** 2, axis=1)
    values = np.exp(-d2 / (2.0 * radius * radius))
    values[d2 > (3.0 * radius) ** 2] = 0.0
    return values


def spontaneous_event(retina: Sheet, r_b: float, rng: RngStream, center=None) -> ActivityState:
    """Correlated retinal burst centered on a uniformly drawn node."""
    if r_b < 1:
        raise InvalidArgument("blob radius must be >= 1")
    if center is None:
        center = retina.coords(int(rng.draw_int(retina.n_nodes)[0]))
    return ActivityState(retina, gaussian_blob(retina, center, r_b))


_kernel_cache: dict = {}


def _kernel_matrices(sheet: Sheet, kernel: LateralKernel):
    """(net kernel E - I, inhibitory Gaussian) as dense node x node matrices."""
    key = (sheet.rows, sheet.cols, kernel)
    if key not in _kernel_cache:
        if len(_kernel_cache) > 64:
            _kernel_cache.clear()
        xy = sheet.coordinates()
        d2 = np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=2)
        ge = np.exp(-d2 / (2.0 * kernel.excitation_radius ** 2))
        gi = np.exp(-d2 / (2.0 * kernel.inhibition_radius ** 2))
        np.fill_diagonal(gi, 0.0)
        _kernel_cache[key] = (kernel.excitation * ge - kernel.inhibition * gi, gi)
    return _kernel_cache[key]


def settle(post: Sheet, drive, kernel: LateralKernel, steps: int = 10, mass: float = 8.0) -> ActivityState:
    """Synchronous lateral dynamics on the target sheet.

    ``a <- rectify(drive + E*a - I*a)`` followed by divisive rescaling whenever
    the total activity exceeds ``mass``.  Excitation ``E`` is a Gaussian
    (self-coupling included).  Inhibition is a broader Gaussian that a unit
    only receives from units that are currently more active than itself
    (equal activity: the lower id wins), so a strongly inhibited sheet keeps
    its most driven unit instead of falling silent.
    """
    drive = np.asarray(drive, dtype=np.float64).reshape(-1)
    if drive.shape[0] != post.n_nodes:
        raise InvalidArgument("drive length does not match target sheet")
    if not np.all(np.isfinite(drive)):
        raise InvalidArgument("drive must be finite")
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    net, gi = _kernel_matrices(post, kernel)
    a = np.zeros(post.n_nodes)
    for _ in range(steps):
        act = np.flatnonzero(a > 0)
        u = drive.copy()
        if len(act):
            a_act = a[act]
            # silent units are inhibited by every active unit ...
            u += net @ a
            if kernel.inhibition > 0:
                # ... active ones only by the stronger: give back the rest
                weaker = (a_act[None, :] < a_act[:, None]) | ((a_act[None, :] == a_act[:, None]) & (act[None, :] > act[:, None]))
                u[act] += kernel.inhibition * ((gi[np.ix_(act, act)] * weaker) @ a_act)
        a = np.maximum(u, 0.0)
        total = a.sum()
        if total > mass:
            a *= mass / total
    return ActivityState(post, a)


# --- plasticity -------------------------------------------------------------

def hebbian_step(W: WeightField, a_pre, a_post, alpha: float) -> np.ndarray:
    """``w_ij += alpha * a_post_i * a_pre_j`` on existing connections.

    Returns the post units whose weights changed.
    """
    if alpha <= 0:
        raise InvalidArgument("learning rate must be positive")
    a_pre = np.asarray(a_pre, dtype=np.float64).reshape(-1)
    a_post = np.asarray(a_post, dtype=np.float64).reshape(-1)
    if a_pre.shape[0] != W.n_pre or a_post.shape[0] != W.n_post:
        raise InvalidArgument("activity shapes do not match the weight field")
    rows = np.flatnonzero(a_post > 0)
    if len(rows) == 0 or not np.any(a_pre > 0):
        return rows[:0]
    idx = W.index[rows]
    gathered = np.where(idx >= 0, a_pre[np.maximum(idx, 0)], 0.0)
    W.weight[rows] += alpha * a_post[rows, None] * gathered
    return rows


def normalize_incoming(W: WeightField, s: float, rows=None) -> None:
    """Divisively rescale each post unit's incoming weights to sum to ``s``."""
    rows = np.arange(W.n_post) if rows is None else np.asarray(rows, dtype=np.int64)
    sums = W.weight[rows].sum(axis=1)
    bad = np.flatnonzero(~(sums > 0))
    if len(bad):
        raise DegenerateUnitError(rows[bad[0]])
    W.weight[rows] *= (s / sums)[:, None]


def prune(W: WeightField, fan_in_cap: int, w_min: float, s: float) -> WeightField:
    """Remove weights below ``w_min``, keep at most ``fan_in_cap`` per post unit
    (largest first, ties to the lower pre id), then renormalize to ``s``.

    A unit whose every weight is below ``w_min`` keeps its strongest one, so
    pruning never disconnects a unit.  Returns a compacted field.
    """
    if fan_in_cap < 1:
        raise InvalidArgument("fan_in_cap must be >= 1")
    index = W.index.copy()
    weight = W.weight.copy()
    present = index >= 0
    # rank every slot by (-w, pre id); empty slots last
    key_w = np.where(present, -weight, np.inf)
    key_id = np.where(present, index, np.iinfo(np.int64).max)
    for i in range(W.n_post):
        slots = np.flatnonzero(present[i])
        if len(slots) == 0:
            continue
        ranked = slots[np.lexsort((key_id[i, slots], key_w[i, slots]))]
        keep = ranked[weight[i, ranked] >= w_min][:fan_in_cap]
        if len(keep) == 0:
            keep = ranked[:1]
        drop = np.setdiff1d(slots, keep)
        index[i, drop] = -1
        weight[i, drop] = 0.0
    out = WeightField(W.pre, W.post, index, weight, W.lateral)
    normalize_incoming(out, s)
    return out.compact()


# --- metrics ----------------------------------------------------------------

def receptive_centers(W: WeightField) -> np.ndarray:
    sums = W.incoming_sums()
    bad = np.flatnonzero(~(sums > 0))
    if len(bad):
        raise DegenerateUnitError(bad[0])
    pre_xy = W.pre.coordinates()
    idx = np.maximum(W.index, 0)
    w = W.weight
    return np.stack([(w * pre_xy[idx, 0]).sum(axis=1), (w * pre_xy[idx, 1]).sum(axis=1)], axis=1) / sums[:, None]


def receptive_center(W: WeightField, post_unit: int):
    """Weight-weighted centroid of pre coordinates feeding ``post_unit``."""
    w = W.weight[post_unit]
    total = w.sum()
    if not total > 0:
        raise DegenerateUnitError(post_unit)
    xy = W.pre.coordinates()[np.maximum(W.index[post_unit], 0)]
    return tuple((w[:, None] * xy).sum(axis=0) / total)


def _scale(W: WeightField) -> float:
    pr, pc = W.pre.extent
    qr, qc = W.post.extent
    return max(pr / qr, pc / qc)


def neighbor_consistency(W: WeightField, centers=None) -> float:
    """Fraction of 4-neighbor post pairs whose receptive centers lie within
    ``1.5 * pre/post extent ratio`` of each other."""
    c = receptive_centers(W) if centers is None else centers
    g = c.reshape(W.post.rows, W.post.cols, 2)
    tol = 1.5 * _scale(W)
    dv = np.linalg.norm(g[1:] - g[:-1], axis=2)
    dh = np.linalg.norm(g[:, 1:] - g[:, :-1], axis=2)
    return float((np.sum(dv <= tol) + np.sum(dh <= tol)) / (dv.size + dh.size))


def affine_fit(W: WeightField, centers=None):
    """Least-squares affine map post coordinate -> receptive center.

    Returns (linear 2x2, offset 2, rms residual).
    """
    c = receptive_centers(W) if centers is None else centers
    X = np.column_stack([W.post.coordinates(), np.ones(W.post.n_nodes)])
    gram = X.T @ X
    if np.linalg.cond(gram) > 1e12:
        raise DegenerateGeometryError("singular normal equations for affine fit")
    coef = np.linalg.solve(gram, X.T @ c)
    resid = X @ coef - c
    rms = float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
    return coef[:2].T, coef[2], rms


def affine_order(W: WeightField, centers=None) -> float:
    """``max(0, 1 - rms / R_half) * min(1, |det| / det_expected)``."""
    linear, _, rms = affine_fit(W, centers)
    pr, pc = W.pre.extent
    qr, qc = W.post.extent
    r_half = 0.5 * max(pr, pc)
    det_expected = (pr * pc) / (qr * qc)
    return float(max(0.0, 1.0 - rms / r_half) * min(1.0, abs(np.linalg.det(linear)) / det_expected))


def square_symmetries(rows: int, cols: int):
    """Index maps of the grid symmetries (8 for a square, 4 otherwise)."""
    r, c = np.divmod(np.arange(rows * cols), cols)
    R, C = rows - 1, cols - 1
    maps = [(r, c), (R - r, c), (r, C - c), (R - r, C - c)]
    if rows == cols:
        maps += [(c, r), (C - c, r), (c, R - r), (C - c, R - r)]
    return [np.stack(m, axis=1).astype(np.float64) for m in maps]


def aligned_order(W: WeightField, centers=None, tol: float = 1.5) -> float:
    """Best fraction, over grid symmetries, of post units whose receptive
    center lies within ``tol`` (scaled) of the ideal corner-to-corner map."""
    c = receptive_centers(W) if centers is None else centers
    scale = np.array([W.pre.extent[0] / W.post.extent[0], W.pre.extent[1] / W.post.extent[1]])
    radius = tol * _scale(W)
    best = 0.0
    for coords in square_symmetries(W.post.rows, W.post.cols):
        target = coords * scale
        best = max(best, float(np.mean(np.linalg.norm(c - target, axis=1) <= radius)))
    return best


def path_redundancy(lateral: WeightField, active_set) -> float:
    """Mean number of shared co-active neighbors over connected co-active pairs."""
    active = np.unique(np.asarray(list(active_set), dtype=np.int64))
    if len(active) == 0:
        return 0.0
    in_set = np.zeros(lateral.n_post, dtype=bool)
    in_set[active] = True
    nbrs = {int(u): set() for u in active}
    post_ids, pre_ids, w = lateral.triples()
    for i, j in zip(post_ids, pre_ids):
        if i != j and in_set[i] and in_set[j]:
            nbrs[int(i)].add(int(j))
            nbrs[int(j)].add(int(i))
    pairs = [(a, b) for a in nbrs for b in nbrs[a] if a < b]
    if not pairs:
        return 0.0
    return float(np.mean([len(nbrs[a] & nbrs[b]) for a, b in pairs]))


# --- the loop ------------------------------------------------------------------

def check_budget(W: WeightField, s: float, rows=None) -> None:
    sums = W.incoming_sums() if rows is None else W.weight[rows].sum(axis=1)
    err = np.max(np.abs(sums - s)) / s if len(sums) else 0.0
    if err > BUDGET_RTOL:
        raise AssertionError(f"incoming budget violated: relative error {err:.3g}")


def initial_field(config: SelfOrgConfig) -> WeightField:
    pre, post = Sheet(*config.pre_shape), Sheet(*config.post_shape)
    rng = RngStream(config.seed, 0)
    return init_weight_field(pre, post, config.init_mode, config.init_noise, rng,
                             s=config.s, bias=config.polarity_bias)


def run_selforg(config: SelfOrgConfig, W: WeightField | None = None, start_epoch: int = 0,
                on_epoch=None, check_invariants: bool = True):
    """Drive ``W`` (default: the configured initial field) towards a stationary map.

    ``on_epoch(epoch, W, trace)`` is called after each epoch's pruning and
    metrics.  Returns ``(W, trace)``.
    """
    W = initial_field(config) if W is None else W.copy()
    retina, target = W.pre, W.post
    events = RngStream(config.seed, 1 + start_epoch)
    trace = RunTrace()
    quiet = 0
    for k in range(config.epochs):
        epoch = start_epoch + k
        kernel = config.kernel_at(epoch)
        alpha = config.alpha_at(epoch)
        before = W.dense()
        for _ in range(config.events_per_epoch):
            a_pre = spontaneous_event(retina, config.blob_radius, events).flat()
            drive = W.drive(a_pre)
            if not np.all(np.isfinite(drive)):
                raise NumericalFailure(epoch)
            a_post = settle(target, drive, kernel, config.settle_steps, config.mass).flat()
            rows = hebbian_step(W, a_pre, a_post, alpha)
            if len(rows):
                if not np.all(np.isfinite(W.weight[rows])):
                    raise NumericalFailure(epoch)
                normalize_incoming(W, config.s, rows)
                if check_invariants:
                    check_budget(W, config.s, rows)
        if epoch >= config.prune_start:
            W = prune(W, config.fan_in_cap, config.w_min, config.s)
        if not np.all(np.isfinite(W.weight)):
            raise NumericalFailure(epoch)
        dw = float(np.abs(W.dense() - before).sum())
        centers = receptive_centers(W)
        trace.dw_l1.append(dw)
        trace.neighbor_consistency.append(neighbor_consistency(W, centers))
        trace.affine_order.append(affine_order(W, centers))
        trace.mean_fan_in.append(float(W.fan_in().mean()))
        trace.inhibition.append(kernel.inhibition)
        quiet = quiet + 1 if dw < config.eps else 0
        log.debug("epoch %d dW=%.4g nc=%.3f ao=%.3f fan=%.1f", epoch, dw,
                  trace.neighbor_consistency[-1], trace.affine_order[-1], trace.mean_fan_in[-1])
        if on_epoch is not None:
            on_epoch(epoch, W, trace)
        if quiet >= config.converge_epochs and not trace.converged:
            trace.converged = True
            trace.converged_epoch = epoch
            if config.stop_on_convergence:
                break
    return W, trace

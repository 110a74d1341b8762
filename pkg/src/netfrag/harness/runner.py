"""Run one configured experiment and persist its artifacts.

Every kind writes into its own output directory:

- ``config.ini``     resolved configuration
- ``metrics.csv``    per-epoch or per-item table
- ``events.jsonl``   progress events
- ``summary.json``   acceptance-relevant scalars (deterministic)
- ``record.json``    run record: hash, version, timestamps, runtime

Only ``record.json`` carries wall-clock data, so every other file is
byte-identical between two runs of the same config.
"""

from __future__ import annotations

import datetime as dt
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import InvalidArgument, NetfragError
from ..fragments import (CorticalField, evoke, extract_fragments, feature_encode, figure_ground,
                         lateral_learn, mask_iou, net_selection, reactivation_jaccard)
from ..maplets import ModelStore, recognize, store_model, write_map_csv, write_store
from ..rng import RngStream
from ..selforg import aligned_order, receptive_centers, run_selforg
from ..substrate import write_snapshot
from .config import ExperimentConfig, config_hash
from .io import (EventLog, write_center_maps, write_csv, write_fragment_library, write_json,
                 write_pbm)
from .oracles import ncc_recognize
from .stimuli import generate_figure_scene, generate_sprite_scene, generate_texture_mosaic

log = logging.getLogger(__name__)

DEFAULT_OUT = "runs"


@dataclass
class RunRecord:
    config_hash: str
    code_version: str
    started: str
    finished: str
    runtime_s: float
    out_dir: str
    files: dict = field(default_factory=dict)
    converged: bool | None = None
    accepted: bool = False
    summary: dict = field(default_factory=dict)


def output_root() -> Path:
    return Path(os.environ.get("NETFRAG_OUT", DEFAULT_OUT))


def resolve_out(cfg: ExperimentConfig, out=None) -> Path:
    if out is not None:
        return Path(out)
    if cfg.out:
        return Path(cfg.out)
    return output_root() / f"{cfg.kind}-{config_hash(cfg)[:12]}"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# --- corpus and field -------------------------------------------------------------------

def build_corpus(corpus_cfg):
    """Reference corpus: ``per_texture`` images of each texture in a fixed shuffled order."""
    rng = RngStream(corpus_cfg.shuffle_seed, 0)
    n_tex = len(corpus_cfg.textures)
    labels = np.repeat(np.arange(n_tex), corpus_cfg.per_texture)
    labels = labels[rng.permutation(len(labels))]
    images = [generate_texture_mosaic(corpus_cfg.textures[k], corpus_cfg.size, corpus_cfg.jitter, rng)
              for k in labels]
    return images, labels


def train_field(cfg: ExperimentConfig, cache: dict | None = None, events=None):
    """Lateral field trained on the reference corpus, memoized per config."""
    fcfg, ccfg = cfg.section("fragments"), cfg.section("corpus")
    key = repr((fcfg, ccfg))
    if cache is not None and key in cache:
        return cache[key]
    images, labels = build_corpus(ccfg)

    def progress(i, cf):
        if events is not None and (i + 1) % 50 == 0:
            events("train", image=i + 1)

    cf = lateral_learn(images, fcfg, on_image=progress)
    out = (cf, images, labels)
    if cache is not None:
        cache[key] = out
    return out


# --- kinds --------------------------------------------------------------------------------

def _run_retinotopy(cfg, out: Path, events):
    scfg = cfg.section("selforg")
    rows = []
    every = cfg.snapshot_every

    def on_epoch(epoch, W, trace):
        rows.append((epoch, trace.dw_l1[-1], trace.neighbor_consistency[-1],
                     trace.affine_order[-1], trace.mean_fan_in[-1]))
        events("epoch", epoch=epoch, dw_l1=trace.dw_l1[-1], nc=trace.neighbor_consistency[-1])
        if every and (epoch + 1) % every == 0:
            write_snapshot(W, out / f"snapshot_{epoch + 1:04d}.nfw")

    W, trace = run_selforg(scfg, on_epoch=on_epoch)
    write_csv(out / "metrics.csv", ["epoch", "dW_l1", "neighbor_consistency", "affine_order", "mean_fan_in"], rows)
    write_snapshot(W, out / "final.nfw")
    centers = receptive_centers(W)
    write_center_maps(out / "centers", centers, scfg.post_shape, scfg.pre_shape)
    nc, ao = trace.neighbor_consistency[-1], trace.affine_order[-1]
    summary = {
        "epochs": len(trace),
        "converged": trace.converged,
        "converged_epoch": trace.converged_epoch,
        "neighbor_consistency": nc,
        "affine_order": ao,
        "aligned_order": aligned_order(W, centers),
        "mean_fan_in": trace.mean_fan_in[-1],
        "max_fan_in": int(W.fan_in().max()),
        "final_dW_l1": trace.dw_l1[-1],
        "accepted": bool(nc >= 0.9 and ao >= 0.85),
    }
    return summary, trace.converged


def fragment_statistics(cfg, cache=None, events=None):
    """Library plus the fragment-by-texture reactivation Jaccard matrix."""
    fcfg, ccfg = cfg.section("fragments"), cfg.section("corpus")
    cf, images, labels = train_field(cfg, cache, events)
    library = extract_fragments(images, cf, fcfg)
    tex = ccfg.textures
    tests = {}
    for k, kind in enumerate(tex):
        rng = RngStream(cfg.seed, 500 + k)
        tests[kind] = [evoke(generate_texture_mosaic(kind, ccfg.size, ccfg.jitter, rng), cf, fcfg).units()
                       for _ in range(ccfg.test_images)]
    # probe away from the border so the alignment window stays on the sheet
    origin = (fcfg.align + int(fcfg.radius), fcfg.align + int(fcfg.radius))
    own, matrix = [], []
    for f in library:
        own.append(int(np.bincount(labels[f.sources], minlength=len(tex)).argmax()))
        matrix.append([float(np.mean([reactivation_jaccard(f, u, cf.sheet, origin, fcfg.align)
                                      for u in tests[kind]])) for kind in tex])
    return cf, library, np.array(own, dtype=np.int64), np.array(matrix).reshape(len(library), len(tex))


def _run_fragments(cfg, out: Path, events, cache=None):
    ccfg = cfg.section("corpus")
    cf, library, own, J = fragment_statistics(cfg, cache, events)
    tex = ccfg.textures
    write_fragment_library(out / "library.txt", library)
    write_snapshot(cf.to_weight_field(), out / "lateral.nfw")
    write_csv(out / "metrics.csv", ["fragment", "texture", "size", "count"] + [f"J_{t}" for t in tex],
              [(f.id, tex[o], f.size, f.count, *row) for f, o, row in zip(library, own, J)])
    n = len(library)
    same = [J[i, own[i]] for i in range(n)]
    cross = [J[i, j] for i in range(n) for j in range(len(tex)) if j != own[i]]
    per_tex = np.bincount(own, minlength=len(tex)).tolist() if n else [0] * len(tex)
    same_mean = float(np.mean(same)) if same else 0.0
    cross_mean = float(np.mean(cross)) if cross else 0.0
    summary = {
        "fragments": n,
        "fragments_per_texture": dict(zip(tex, per_tex)),
        "same_texture_jaccard": same_mean,
        "cross_texture_jaccard": cross_mean,
        "accepted": bool(min(per_tex) > 0 and same_mean >= 0.8 and cross_mean <= 0.3),
    }
    return summary, None


def _run_segment(cfg, out: Path, events, cache=None):
    fcfg, ccfg, scfg = cfg.section("fragments"), cfg.section("corpus"), cfg.section("segment")
    cf, _, _ = train_field(cfg, cache, events)
    rng = RngStream(cfg.seed, 11)
    size = ccfg.size
    rows, ious = [], []
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    span = size - scfg.side + 1
    for i in range(scfg.scenes):
        figure = ccfg.textures[i % len(ccfg.textures)]
        r0, c0 = (int(x) for x in rng.draw_int(span, 2))
        image, truth = generate_figure_scene(figure, scfg.background, (r0, c0), scfg.side, size, rng, ccfg.jitter)
        fg = figure_ground(image, cf, fcfg)
        iou = mask_iou(fg.mask, truth)
        ious.append(iou)
        rows.append((i, figure, r0, c0, int(fg.mask.sum()), fg.n_components, int(fg.degenerate), iou))
        write_pbm(mask_dir / f"scene_{i:03d}.pbm", fg.mask)
        events("scene", index=i, iou=iou)
    write_csv(out / "metrics.csv", ["scene", "figure", "row", "col", "mask_area", "components", "degenerate", "iou"], rows)
    summary = {
        "scenes": scfg.scenes,
        "mean_iou": float(np.mean(ious)),
        "min_iou": float(np.min(ious)),
        "accepted": bool(np.mean(ious) >= 0.8 and np.min(ious) >= 0.6),
    }
    return summary, None


def _pattern(kind, cf, cfg, rng):
    ccfg, fcfg = cfg.section("corpus"), cfg.section("fragments")
    image = generate_texture_mosaic(kind, ccfg.size, ccfg.jitter, rng)
    ff = feature_encode(image).values
    return ff, evoke(image, cf, fcfg).active.reshape(-1)


def _run_select(cfg, out: Path, events, cache=None):
    fcfg, scfg = cfg.section("fragments"), cfg.section("select")
    cf, _, _ = train_field(cfg, cache, events)
    rows = []
    biased_ok, unbiased_ok = 0, 0
    for t in range(scfg.trials):
        rng = RngStream(cfg.seed, 1000 + t)
        ff1, P1 = _pattern(scfg.first, cf, cfg, rng)
        ff2, P2 = _pattern(scfg.second, cf, cfg, rng)
        # alternate which pattern gets the bias
        favored = t % 2
        a, b = ((ff1, P1), (ff2, P2)) if favored == 0 else ((ff2, P2), (ff1, P1))
        sel = net_selection(a[0], b[0], a[1], b[1], cf, scfg.bias, fcfg)
        ok = sel.winner == 0 and sel.purity >= 0.9 and sel.overlaps[1] <= 0.1
        biased_ok += ok
        rows.append((t, scfg.bias, favored, -1 if sel.winner is None else (sel.winner + favored) % 2,
                     sel.purity, *sel.overlaps, int(ok)))
        sel0 = net_selection(ff1, ff2, P1, P2, cf, 0.0, fcfg)
        ok0 = sel0.winner is not None
        unbiased_ok += ok0
        rows.append((t, 0.0, -1, -1 if sel0.winner is None else sel0.winner, sel0.purity, *sel0.overlaps, int(ok0)))
        events("trial", index=t, biased_ok=bool(ok), unbiased_single=bool(ok0))
    write_csv(out / "metrics.csv", ["trial", "bias", "favored", "winner", "purity", "overlap_favored",
                                    "overlap_other", "ok"], rows)
    summary = {
        "trials": scfg.trials,
        "biased_clean_wins": biased_ok,
        "unbiased_single_winner": unbiased_ok,
        "accepted": bool(biased_ok == scfg.trials and unbiased_ok == scfg.trials),
    }
    return summary, None


def sprite_store(mcfg, seed: int):
    """One model per sprite, each stored from a single scene at (10, 10)."""
    store = ModelStore()
    templates = []
    for i in range(mcfg.models):
        image, mask = generate_sprite_scene(i, mcfg.background, (10, 10), 1.0, mcfg.size,
                                            RngStream(seed, 100 + i), jitter=mcfg.jitter)
        mid = store_model(image, mask, f"sprite{i}", store)
        m = store.get(mid)
        h, w = m.mask.shape
        # pixel crop matching the model's node window (node r sits at pixel r + 1)
        templates.append(image[m.origin[0] + 1:m.origin[0] + 1 + h, m.origin[1] + 1:m.origin[1] + 1 + w])
    return store, templates


STORED_AT = 10


def true_transform(model, scale: float, translation):
    """Exact node-level map u = scale * v + delta for a query of the stored sprite."""
    b = np.asarray(model.origin, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    return scale * (b + 1 - STORED_AT) + 0.5 * (scale - 1) + t - 1


def _run_match(cfg, out: Path, events, cache=None):
    params, mcfg = cfg.section("maplets"), cfg.section("match")
    store, templates = sprite_store(mcfg, cfg.seed)
    write_store(store, out / "store.nfm")
    size = mcfg.size

    # rejection threshold from noise queries not reused for testing
    tau = mcfg.tau_rej
    cal = []
    for k in range(mcfg.calibration_trials):
        noise = RngStream(cfg.seed, 3000 + k).draw_uniform(size * size).reshape(size, size)
        cal.append(recognize(noise, store, params)[0].Q)
    if tau is None:
        if not cal:
            raise InvalidArgument("tau_rej = none needs calibration_trials > 0")
        tau = float(max(cal))

    rng = RngStream(cfg.seed, 1)
    rows = []
    correct = accepted_q = 0
    terr, serr = [], []
    t0 = time.perf_counter()
    for q in range(mcfg.queries):
        sid = int(rng.draw_int(mcfg.models)[0])
        scale = params.scales[int(rng.draw_int(len(params.scales))[0])]
        n = int(round(12 * scale))
        base = (size - n) // 2
        tr = np.clip(base + rng.draw_int(2 * mcfg.max_shift + 1, 2) - mcfg.max_shift, 0, size - n)
        image, _ = generate_sprite_scene(sid, mcfg.background, tr, scale, size, rng, jitter=mcfg.jitter)
        top = recognize(image, store, params)[0]
        m = store.get(top.model_id)
        vc = m.nodes.mean(axis=0)
        e_t = float(np.linalg.norm(top.map.map_point(vc) - (scale * vc + true_transform(m, scale, tr))))
        e_s = abs(top.map.sigma - scale)
        ok = top.model_id == sid
        if ok:
            correct += 1
            terr.append(e_t)
            serr.append(e_s)
        accepted_q += top.Q >= tau
        if q == 0:
            write_map_csv(top.map, out / "map_query0.csv")
        rows.append((q, sid, scale, int(tr[0]), int(tr[1]), top.model_id, top.Q, top.map.sigma,
                     float(top.map.delta[0]), float(top.map.delta[1]), e_t, e_s, int(ok)))
        events("query", index=q, correct=bool(ok))
    query_time = time.perf_counter() - t0
    write_csv(out / "metrics.csv", ["query", "sprite", "scale", "tr_row", "tr_col", "top_id", "Q", "sigma",
                                    "delta_row", "delta_col", "translation_error", "scale_error", "correct"], rows)

    # translation-only queries against exhaustive normalized cross-correlation
    rng = RngStream(cfg.seed, 2)
    orows, agree = [], 0
    for q in range(mcfg.oracle_queries):
        sid = int(rng.draw_int(mcfg.models)[0])
        base = (size - 12) // 2
        tr = np.clip(base + rng.draw_int(2 * mcfg.max_shift + 1, 2) - mcfg.max_shift, 0, size - 12)
        image, _ = generate_sprite_scene(sid, mcfg.background, tr, 1.0, size, rng, jitter=mcfg.jitter)
        top = recognize(image, store, params)[0]
        m = store.get(top.model_id)
        t_map = np.rint(top.map.delta - np.asarray(m.origin)).astype(int)
        oid, oscore, at = ncc_recognize(templates, image)
        t_ncc = np.asarray(at) - (np.asarray(store.get(oid).origin) + 1)
        ok = top.model_id == oid and bool(np.all(t_map == t_ncc))
        agree += ok
        orows.append((q, sid, top.model_id, int(t_map[0]), int(t_map[1]), oid, int(t_ncc[0]), int(t_ncc[1]),
                      oscore, int(ok)))
    write_csv(out / "oracle.csv", ["query", "sprite", "map_id", "map_dr", "map_dc", "ncc_id", "ncc_dr",
                                   "ncc_dc", "ncc_score", "agree"], orows)

    noise_q = []
    for k in range(mcfg.noise_trials):
        noise = RngStream(cfg.seed, 4000 + k).draw_uniform(size * size).reshape(size, size)
        noise_q.append(recognize(noise, store, params)[0].Q)
    write_csv(out / "noise.csv", ["trial", "Q", "rejected"],
              [(k, v, int(v < tau)) for k, v in enumerate(noise_q)])
    rejected = float(np.mean(np.asarray(noise_q) < tau)) if noise_q else 1.0

    acc = correct / mcfg.queries
    summary = {
        "queries": mcfg.queries,
        "rank1_accuracy": acc,
        "max_translation_error": float(max(terr)) if terr else None,
        "max_scale_error": float(max(serr)) if serr else None,
        "oracle_agreement": agree / mcfg.oracle_queries if mcfg.oracle_queries else None,
        "tau_rej": tau,
        "calibration_max_Q": float(max(cal)) if cal else None,
        "noise_rejected": rejected,
        "queries_above_tau": accepted_q / mcfg.queries,
    }
    summary["accepted"] = bool(
        acc >= 0.9 and terr and max(terr) <= 1.0 and max(serr) <= 0.1
        and (summary["oracle_agreement"] is None or summary["oracle_agreement"] >= 0.9)
        and rejected >= 0.95)
    # wall-clock goes to the run record, not the deterministic summary
    return summary, None, {"query_runtime_s": query_time}


RUNNERS = {
    "retinotopy": _run_retinotopy,
    "fragments": _run_fragments,
    "segment": _run_segment,
    "select": _run_select,
    "match": _run_match,
}


def run_experiment(cfg: ExperimentConfig, out=None, cache: dict | None = None) -> RunRecord:
    """Run ``cfg`` and write its artifacts; failed thresholds are reported, not raised."""
    out_dir = resolve_out(cfg, out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise NetfragError(f"output directory {out_dir} is not writable: {e}") from None
    started = _now()
    t0 = time.perf_counter()
    (out_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    with EventLog(out_dir / "events.jsonl") as events:
        events("start", kind=cfg.kind, config_hash=config_hash(cfg))
        fn = RUNNERS[cfg.kind]
        result = fn(cfg, out_dir, events) if cfg.kind == "retinotopy" else fn(cfg, out_dir, events, cache)
        summary, converged = result[0], result[1]
        extra = result[2] if len(result) > 2 else {}
        events("end", accepted=summary["accepted"])
    write_json(out_dir / "summary.json", summary)
    runtime = time.perf_counter() - t0
    files = sorted(p.name for p in out_dir.iterdir() if p.name != "record.json")
    rec = RunRecord(config_hash(cfg), __version__, started, _now(), runtime, str(out_dir),
                    {"files": files, **extra}, converged, summary["accepted"], summary)
    write_json(out_dir / "record.json", rec.__dict__)
    log.info("%s run in %s: accepted=%s (%.1fs)", cfg.kind, out_dir, rec.accepted, runtime)
    return rec

"""Command line entry point ``netfrag``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..errors import NetfragError
from ..fragments import CorticalField, evoke, node_mask
from ..maplets import read_store, recognize, write_map_csv, write_store
from ..rng import RngStream
from ..substrate import read_snapshot, write_snapshot
from .config import default_config, load_config
from .io import write_pbm
from .runner import resolve_out, run_experiment, sprite_store, train_field
from .stimuli import TEXTURE_KINDS, generate_sprite_scene, generate_texture_mosaic


def _common(p):
    p.add_argument("--config", help="experiment config file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="output directory (default $NETFRAG_OUT/<kind>-<hash>)")
    p.add_argument("--snapshot-every", type=int, help="write a weight snapshot every K epochs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netfrag", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="kind", required=True)
    for kind in ("retinotopy", "segment", "select"):
        _common(sub.add_parser(kind, help=f"run a {kind} experiment"))
    fp = sub.add_parser("fragments", help="train fragments, or evoke/segment/select with a field")
    fp.add_argument("action", nargs="?", default="train", choices=("train", "evoke", "segment", "select"))
    _common(fp)
    fp.add_argument("--field", help="lateral field snapshot for evoke (trained when omitted)")
    fp.add_argument("--texture", default="stripes_0", choices=TEXTURE_KINDS, help="evoke stimulus")
    mp = sub.add_parser("match", help="run the recognition experiment, or store/query models")
    mp.add_argument("action", nargs="?", default="run", choices=("run", "store", "query"))
    _common(mp)
    mp.add_argument("--store", help="model store file for query")
    mp.add_argument("--sprite", type=int, default=0)
    mp.add_argument("--scale", type=float, default=1.0)
    mp.add_argument("--translation", default="10,10", help="row,col of the sprite canvas")
    sp = sub.add_parser("sweep", help="run many configs")
    sp.add_argument("--configs", required=True, help="glob of config files")
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--out", help="root for per-config output directories")
    return ap


def _config(args, kind):
    cfg = load_config(args.config) if args.config else default_config(kind)
    if cfg.kind != kind:
        raise NetfragError(f"config is for {cfg.kind!r}, command is {kind!r}")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.snapshot_every is not None:
        cfg.snapshot_every = args.snapshot_every
    return cfg


def _report(rec) -> None:
    print(json.dumps({"out": rec.out_dir, "accepted": rec.accepted, **rec.summary}, sort_keys=True, default=str))


def _sweep_one(job):
    path, out = job
    cfg = load_config(path)
    rec = run_experiment(cfg, None if out is None else Path(out) / Path(path).stem)
    return path, rec.out_dir, rec.accepted


def _fragments(args):
    if args.action in ("segment", "select"):
        cfg = _config(args, args.action)
        _report(run_experiment(cfg, args.out))
        return
    cfg = _config(args, "fragments")
    if args.action == "train":
        _report(run_experiment(cfg, args.out))
        return
    out = resolve_out(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    fcfg, ccfg = cfg.section("fragments"), cfg.section("corpus")
    if args.field:
        cf = CorticalField.from_weight_field(read_snapshot(args.field, lateral=True), fcfg.radius)
    else:
        cf = train_field(cfg)[0]
        write_snapshot(cf.to_weight_field(), out / "lateral.nfw")
    image = generate_texture_mosaic(args.texture, ccfg.size, ccfg.jitter, RngStream(cfg.seed, 77))
    res = evoke(image, cf, fcfg)
    write_pbm(out / f"evoked_{args.texture}.pbm", node_mask(res.units(), cf.sheet, image.shape))
    print(json.dumps({"out": str(out), "active_units": int(len(res.units())), "steps": res.steps}))


def _match(args):
    cfg = _config(args, "match")
    if args.action == "run":
        _report(run_experiment(cfg, args.out))
        return
    out = resolve_out(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg, params = cfg.section("match"), cfg.section("maplets")
    if args.action == "store":
        store, _ = sprite_store(mcfg, cfg.seed)
        n = write_store(store, out / "store.nfm")
        print(json.dumps({"store": str(out / "store.nfm"), "models": len(store), "bytes": n}))
        return
    if not args.store:
        raise NetfragError("match query needs --store")
    store = read_store(args.store)
    tr = tuple(int(x) for x in args.translation.split(","))
    image, _ = generate_sprite_scene(args.sprite, mcfg.background, tr, args.scale, mcfg.size,
                                     RngStream(cfg.seed, 9), jitter=mcfg.jitter)
    ranked = recognize(image, store, params)
    write_map_csv(ranked[0].map, out / "map.csv")
    print(json.dumps([{"id": r.model_id, "label": r.label, "Q": r.Q, "sigma": r.map.sigma,
                       "delta": np.asarray(r.map.delta).tolist()} for r in ranked[:3]]))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.kind == "sweep":
            paths = sorted(glob.glob(args.configs))
            if not paths:
                raise NetfragError(f"no configs match {args.configs!r}")
            for p in paths:
                load_config(p)     # fail fast before any run starts
            jobs = [(p, args.out) for p in paths]
            if args.parallel > 1:
                with ProcessPoolExecutor(max_workers=args.parallel) as ex:
                    results = list(ex.map(_sweep_one, jobs))
            else:
                results = [_sweep_one(j) for j in jobs]
            for path, out, ok in results:
                print(f"{path}\t{out}\taccepted={ok}")
        elif args.kind == "fragments":
            _fragments(args)
        elif args.kind == "match":
            _match(args)
        else:
            _report(run_experiment(_config(args, args.kind), args.out))
    except NetfragError as e:
        print(f"netfrag: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

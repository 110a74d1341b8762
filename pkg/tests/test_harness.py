import json
from pathlib import Path

import numpy as np
import pytest

from netfrag.errors import FormatError, InvalidArgument
from netfrag.fragments import NetFragment
from netfrag.harness.cli import main
from netfrag.harness.config import config_hash, default_config, load_config, parse_config
from netfrag.harness.io import (
    EventLog, read_csv, read_fragment_library, read_pbm, read_pgm16, write_csv, write_fragment_library,
    write_pbm, write_pgm16,
)
from netfrag.harness.oracles import ncc_best, ncc_map, ncc_recognize, topk_bruteforce
from netfrag.harness.runner import run_experiment
from netfrag.harness.sprites import SPRITE_SIZE, SPRITES
from netfrag.harness.stimuli import (
    TEXTURE_KINDS, generate_figure_scene, generate_sprite_scene, generate_texture_mosaic, texture_pattern,
)
from netfrag.rng import RngStream

TINY_RETINOTOPY = """
[experiment]
kind = retinotopy
seed = 3
snapshot_every = 2

[selforg]
pre_shape = 6, 6
post_shape = 6, 6
epochs = 4
events_per_epoch = 20
prune_start = 2
fan_in_cap = 12
"""

TINY_SEGMENT = """
[experiment]
kind = segment
seed = 2

[corpus]
per_texture = 3
size = 16
test_images = 1

[segment]
scenes = 2
side = 6
"""


# --- stimuli -------------------------------------------------------------------

def test_stripes_rows_alternate_in_bands():
    img = generate_texture_mosaic("stripes_0", 16)
    for r in range(16):
        assert np.all(img[r] == (1.0 if r % 4 < 2 else 0.0))
    np.testing.assert_array_equal(generate_texture_mosaic("stripes_90", 16), img.T)


def test_checker_and_dots_period_four():
    chk = generate_texture_mosaic("checker", 16)
    np.testing.assert_array_equal(chk[:4, :4], [[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]])
    np.testing.assert_array_equal(chk, np.tile(chk[:4, :4], (4, 4)))
    dots = generate_texture_mosaic("dots", 16)
    assert dots.sum() == 16 and dots[1, 1] == 1


def test_jitter_mean_absolute_deviation():
    devs = []
    for k, kind in enumerate(TEXTURE_KINDS * 5):
        img = generate_texture_mosaic(kind, 32, 0.1, RngStream(1, k))
        devs.append(np.abs(img - texture_pattern(kind, (32, 32))).mean())
    assert max(devs) <= 0.05
    # clipping halves the uniform expectation of 0.05
    assert np.mean(devs) == pytest.approx(0.025, abs=0.003)


def test_texture_errors():
    with pytest.raises(InvalidArgument):
        generate_texture_mosaic("zebra", 16)
    with pytest.raises(InvalidArgument):
        generate_texture_mosaic("dots", 8)
    with pytest.raises(InvalidArgument):
        generate_texture_mosaic("dots", 16, 0.1)      # jitter without an rng


def test_sprite_at_origin_matches_support():
    for sid in range(len(SPRITES)):
        _, mask = generate_sprite_scene(sid, "blank", (0, 0), 1.0, 32)
        np.testing.assert_array_equal(mask[:SPRITE_SIZE, :SPRITE_SIZE], SPRITES[sid])
        assert mask[SPRITE_SIZE:].sum() == 0 and mask[:, SPRITE_SIZE:].sum() == 0


def _resample_oracle(sprite, scale):
    n = int(round(len(sprite) * scale))
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            si = min(int((i + 0.5) / scale), len(sprite) - 1)
            sj = min(int((j + 0.5) / scale), len(sprite) - 1)
            out[i, j] = sprite[si, sj]
    return out


@pytest.mark.parametrize("scale", [0.8, 1.0, 1.25])
def test_scene_mask_matches_independent_transform(scale):
    for sid in range(len(SPRITES)):
        _, mask = generate_sprite_scene(sid, "checker", (3, 7), scale, 32)
        ref = _resample_oracle(SPRITES[sid], scale)
        n = len(ref)
        np.testing.assert_array_equal(mask[3:3 + n, 7:7 + n], ref)
        assert mask.sum() == ref.sum()


def test_scaled_area_within_ten_percent():
    for sid in range(len(SPRITES)):
        _, mask = generate_sprite_scene(sid, "blank", (2, 2), 1.25, 32)
        base = SPRITES[sid].sum()
        assert abs(mask.sum() - 1.25 ** 2 * base) <= 0.1 * 1.25 ** 2 * base


def test_sprite_out_of_bounds():
    with pytest.raises(InvalidArgument):
        generate_sprite_scene(0, "blank", (25, 0), 1.0, 32)
    with pytest.raises(InvalidArgument):
        generate_sprite_scene(0, "blank", (-1, 0), 1.0, 32)
    with pytest.raises(InvalidArgument):
        generate_sprite_scene(99, "blank", (0, 0), 1.0, 32)


def test_figure_scene_mask_and_texture():
    img, mask = generate_figure_scene("dots", "stripes_0", (4, 5), 8, 32)
    assert mask.sum() == 64 and mask[4:12, 5:13].all()
    np.testing.assert_array_equal(img[mask], texture_pattern("dots", (32, 32))[mask])
    with pytest.raises(InvalidArgument):
        generate_figure_scene("dots", "dots", (0, 0))
    with pytest.raises(InvalidArgument):
        generate_figure_scene("dots", "noise", (0, 0))


# --- oracles ---------------------------------------------------------------------

def test_ncc_exact_copy():
    image = RngStream(4, 0).draw_uniform(32 * 32).reshape(32, 32)
    template = image[5:17, 0:12].copy()
    score, at = ncc_best(template, image)
    assert at == (5, 0)
    assert score == pytest.approx(1.0)


def test_ncc_constant_image_ties_to_origin():
    m = ncc_map(np.eye(4), np.full((10, 10), 0.3))
    assert np.all(m == m[0, 0])
    assert ncc_best(np.eye(4), np.full((10, 10), 0.3))[1] == (0, 0)


def test_ncc_noise_max_below_half():
    best = [ncc_best(RngStream(5, 2 * k).draw_uniform(144).reshape(12, 12),
                     RngStream(5, 2 * k + 1).draw_uniform(1024).reshape(32, 32))[0] for k in range(100)]
    assert max(best) < 0.5


def test_ncc_template_too_large():
    with pytest.raises(InvalidArgument):
        ncc_map(np.ones((5, 5)), np.ones((4, 9)))


def test_ncc_recognize_prefers_lower_index_on_tie():
    image = RngStream(6, 0).draw_uniform(400).reshape(20, 20)
    t = image[2:8, 3:9]
    assert ncc_recognize([t, t.copy()], image)[:1] == (0,)


def test_topk_bruteforce():
    np.testing.assert_array_equal(topk_bruteforce(np.array([[0.1, 0.5, 0.5, 0.2]]), 3), [[1, 2, 3]])


# --- config --------------------------------------------------------------------------

def test_unknown_key_named():
    with pytest.raises(InvalidArgument, match="alpa"):
        parse_config("[experiment]\nkind = retinotopy\n[selforg]\nalpa = 0.1\n")


def test_config_errors():
    with pytest.raises(InvalidArgument, match="experiment"):
        parse_config("[selforg]\nalpha = 0.1\n")
    with pytest.raises(InvalidArgument, match="kind"):
        parse_config("[experiment]\nkind = dance\n")
    with pytest.raises(InvalidArgument, match="epochs"):
        parse_config("[experiment]\nkind = retinotopy\n[selforg]\nepochs = many\n")
    with pytest.raises(InvalidArgument, match="nope"):
        parse_config("[experiment]\nkind = retinotopy\n[nope]\n")


def test_hash_stable_under_key_order():
    a = parse_config("[experiment]\nkind = retinotopy\nseed = 4\n[selforg]\nalpha = 0.01\nepochs = 50\n")
    b = parse_config("[selforg]\nepochs = 50\nalpha = 0.01\n[experiment]\nseed = 4\nkind = retinotopy\n")
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(a.with_seed(5))


def test_config_text_round_trip():
    for kind in ("retinotopy", "fragments", "segment", "select", "match"):
        cfg = default_config(kind, seed=9)
        back = parse_config(cfg.to_text())
        assert config_hash(back) == config_hash(cfg)
        assert back.to_dict() == cfg.to_dict()


def test_seed_propagates_into_sections():
    cfg = parse_config("[experiment]\nkind = retinotopy\nseed = 12\n")
    assert cfg.section("selforg").seed == 12


def test_tuple_and_none_values():
    cfg = parse_config("[experiment]\nkind = match\n[maplets]\nscales = 0.9, 1.1\n[match]\ntau_rej = 0.5\n")
    assert cfg.section("maplets").scales == (0.9, 1.1)
    assert cfg.section("match").tau_rej == 0.5
    assert default_config("match").section("match").tau_rej is None


# --- io ------------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [(1, 0.1), (2, 1 / 3)])
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["x", "y"]
    assert float(rows[1][1]) == 1 / 3


def test_event_log(tmp_path):
    with EventLog(tmp_path / "e.jsonl") as ev:
        ev("start", n=1)
        ev("end", value=np.float64(0.5))
    lines = [json.loads(x) for x in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert [x["event"] for x in lines] == ["start", "end"]
    assert lines[1]["value"] == 0.5


def test_pgm16_round_trip(tmp_path):
    v = np.linspace(0, 15, 48).reshape(6, 8)
    write_pgm16(tmp_path / "a.pgm", v, 0.0, 15.0)
    back = read_pgm16(tmp_path / "a.pgm")
    assert back.shape == (6, 8) and back.max() == 65535 and back.min() == 0
    np.testing.assert_allclose(back / 65535 * 15, v, atol=15 / 65535)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")


def test_pbm_round_trip(tmp_path):
    m = np.random.default_rng(0).uniform(size=(7, 9)) < 0.4
    write_pbm(tmp_path / "m.pbm", m)
    np.testing.assert_array_equal(read_pbm(tmp_path / "m.pbm"), m)
    (tmp_path / "bad.pbm").write_text("P1\n3 3\n1 0\n")
    with pytest.raises(FormatError):
        read_pbm(tmp_path / "bad.pbm")


def test_fragment_library_round_trip(tmp_path):
    frags = [NetFragment(0, frozenset({(0, 0, 1), (0, 1, 1), (1, 1, 4)}), [((0, 0, 1), (0, 1, 1))], count=4),
             NetFragment(1, frozenset({(2, 0, 9)}), [], count=1)]
    write_fragment_library(tmp_path / "lib.txt", frags)
    recs = read_fragment_library(tmp_path / "lib.txt")
    assert [(r[0], r[1], r[2]) for r in recs] == [(f.id, f.count, f.members) for f in frags]
    assert recs[0][3] == [((0, 0, 1), (0, 1, 1))]
    (tmp_path / "bad.txt").write_text("fragment 0 count 1 size 1\nmembers 0,0,0\n")
    with pytest.raises(FormatError):
        read_fragment_library(tmp_path / "bad.txt")


# --- runs and cli ------------------------------------------------------------------------

def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*"))
            if p.is_file() and p.name != "record.json"}


@pytest.mark.parametrize("text", [TINY_RETINOTOPY, TINY_SEGMENT])
def test_same_config_twice_is_byte_identical(tmp_path, text):
    cfg = parse_config(text)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    fa, fb = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert fa.keys() == fb.keys()
    assert all(fa[k] == fb[k] for k in fa), [k for k in fa if fa[k] != fb[k]]
    assert a.summary == b.summary
    rec = json.loads((tmp_path / "a" / "record.json").read_text())
    assert rec["config_hash"] == config_hash(cfg)


def test_retinotopy_artifacts(tmp_path):
    rec = run_experiment(parse_config(TINY_RETINOTOPY), tmp_path)
    names = set(rec.files["files"])
    assert {"config.ini", "events.jsonl", "summary.json", "metrics.csv", "final.nfw",
            "centers_row.pgm", "centers_col.pgm"} <= names
    assert any(n.startswith("snapshot") for n in names) or (tmp_path / "snapshots").exists()
    header, rows = read_csv(tmp_path / "metrics.csv")
    assert header[:5] == ["epoch", "dW_l1", "neighbor_consistency", "affine_order", "mean_fan_in"]
    assert len(rows) == 4
    assert rec.accepted is False      # a tiny run misses the thresholds but still completes


def test_cli_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[experiment]\nkind = retinotopy\n[selforg]\nalpa = 1\n")
    assert main(["retinotopy", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "alpa" in capsys.readouterr().err
    assert main(["retinotopy", "--config", str(tmp_path / "missing.ini")]) == 2
    assert "missing.ini" in capsys.readouterr().err


def test_cli_match_store_and_query(tmp_path, capsys):
    assert main(["match", "store", "--out", str(tmp_path / "s")]) == 0
    store = tmp_path / "s" / "store.nfm"
    assert store.exists()
    capsys.readouterr()
    assert main(["match", "query", "--store", str(store), "--sprite", "3", "--translation", "14,8",
                 "--out", str(tmp_path / "q")]) == 0
    ranked = json.loads(capsys.readouterr().out)
    assert ranked[0]["id"] == 3
    assert (tmp_path / "q" / "map.csv").exists()


def test_cli_run_and_sweep(tmp_path, capsys):
    p = tmp_path / "r.ini"
    p.write_text(TINY_RETINOTOPY)
    assert main(["retinotopy", "--config", str(p), "--seed", "4", "--out", str(tmp_path / "one")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["accepted"] is False
    assert load_config(tmp_path / "one" / "config.ini").seed == 4
    (tmp_path / "cfgs").mkdir()
    for s in (1, 2):
        (tmp_path / "cfgs" / f"c{s}.ini").write_text(TINY_RETINOTOPY.replace("seed = 3", f"seed = {s}"))
    assert main(["sweep", "--configs", str(tmp_path / "cfgs" / "*.ini"), "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "c1" / "summary.json").exists()
    assert (tmp_path / "sw" / "c2" / "summary.json").exists()
    assert main(["sweep", "--configs", str(tmp_path / "none*.ini")]) == 2

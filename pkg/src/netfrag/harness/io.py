"""Artifact writers: metrics tables, event logs, summaries, image dumps."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidArgument


def _fmt(v):
    # repr of a Python float is the shortest round-trip form, so files stay byte-stable
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else None
    return v


def write_json(path, obj) -> None:
    text = json.dumps(_jsonable(obj), sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


class EventLog:
    """JSON-lines event stream, one object per line."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def __call__(self, event: str, **payload) -> None:
        rec = {"event": event, **payload}
        self._fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_pgm16(path, values, lo: float, hi: float) -> None:
    """Binary 16-bit graymap; ``values`` mapped linearly from [lo, hi] to [0, 65535]."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgument("graymap needs a 2-D array")
    span = hi - lo if hi > lo else 1.0
    q = np.rint(np.clip((a - lo) / span, 0.0, 1.0) * 65535).astype(">u2")
    head = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(head + q.tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise FormatError("not a 16-bit binary graymap")
    cols, rows = (int(x) for x in parts[1].split())
    body = parts[3]
    if len(body) != 2 * rows * cols:
        raise FormatError("truncated graymap")
    return np.frombuffer(body, dtype=">u2").reshape(rows, cols).astype(np.int64)


def write_center_maps(prefix, centers, post_shape, pre_shape) -> tuple:
    """Receptive-center field as a pair of graymaps (row and column coordinates)."""
    rows, cols = post_shape
    c = np.asarray(centers, dtype=np.float64).reshape(rows, cols, 2)
    pr = Path(f"{prefix}_row.pgm")
    pc = Path(f"{prefix}_col.pgm")
    write_pgm16(pr, c[..., 0], 0.0, pre_shape[0] - 1)
    write_pgm16(pc, c[..., 1], 0.0, pre_shape[1] - 1)
    return pr, pc


def write_pbm(path, mask) -> None:
    """Plain-text portable bitmap (1 = set)."""
    m = np.asarray(mask, dtype=bool)
    lines = [f"P1\n{m.shape[1]} {m.shape[0]}"]
    lines += [" ".join("1" if b else "0" for b in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pbm(path) -> np.ndarray:
    toks = Path(path).read_text(encoding="ascii").split()
    if not toks or toks[0] != "P1":
        raise FormatError("not a plain bitmap")
    cols, rows = int(toks[1]), int(toks[2])
    bits = toks[3:]
    if len(bits) != rows * cols:
        raise FormatError("bitmap size mismatch")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(rows, cols)


def write_fragment_library(path, fragments) -> None:
    """One record per fragment.

    ::

        fragment <id> count <count> size <n>
        members r,c,f r,c,f ...
        edges r,c,f>r,c,f ...
        end
    """
    out = []
    for f in fragments:
        members = sorted(f.members)
        edges = sorted(f.edges)
        out.append(f"fragment {f.id} count {f.count} size {len(members)}")
        out.append("members " + " ".join(f"{r},{c},{k}" for r, c, k in members))
        out.append("edges " + " ".join(f"{a[0]},{a[1]},{a[2]}>{b[0]},{b[1]},{b[2]}" for a, b in edges))
        out.append("end")
    Path(path).write_text("\n".join(out) + ("\n" if out else ""), encoding="utf-8")


def read_fragment_library(path):
    """Parse a library file back into (id, count, members, edges) tuples."""
    recs = []
    cur = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        head, _, rest = line.partition(" ")
        if head == "fragment":
            t = rest.split()
            cur = [int(t[0]), int(t[2]), frozenset(), []]
        elif head == "members" and cur is not None:
            cur[2] = frozenset(tuple(int(x) for x in tok.split(",")) for tok in rest.split())
        elif head == "edges" and cur is not None:
            cur[3] = [tuple(tuple(int(x) for x in side.split(",")) for side in tok.split(">"))
                      for tok in rest.split()]
        elif line == "end" and cur is not None:
            recs.append(tuple(cur))
            cur = None
        elif line.strip():
            raise FormatError(f"unexpected line in fragment library: {line!r}")
    if cur is not None:
        raise FormatError("truncated fragment library")
    return recs

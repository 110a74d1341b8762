"""Synthetic textures, sprite scenes and figure-ground scenes."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..rng import RngStream
from .sprites import SPRITE_SIZE, SPRITES

TEXTURE_KINDS = ("stripes_0", "stripes_90", "checker", "dots")
PERIOD = 4


def texture_pattern(kind: str, shape, origin=(0, 0)) -> np.ndarray:
    """Clean 0/1 pattern of period 4, phase anchored at ``origin``.

    stripes_0: horizontal bands two rows wide.  stripes_90: vertical bands.
    checker: 2x2 cells.  dots: one bright pixel per 4x4 cell.
    """
    rows, cols = shape
    r = (np.arange(rows) - origin[0])[:, None] % PERIOD
    c = (np.arange(cols) - origin[1])[None, :] % PERIOD
    if kind == "stripes_0":
        p = np.broadcast_to(r < 2, (rows, cols))
    elif kind == "stripes_90":
        p = np.broadcast_to(c < 2, (rows, cols))
    elif kind == "checker":
        p = (r < 2) ^ (c < 2)
    elif kind == "dots":
        p = (r == 1) & (c == 1)
    elif kind == "solid":
        p = np.ones((rows, cols), dtype=bool)
    elif kind == "blank":
        p = np.zeros((rows, cols), dtype=bool)
    else:
        raise InvalidArgument(f"unknown texture kind {kind!r}")
    return p.astype(np.float64)


def _jittered(clean, jitter, rng):
    if jitter == 0:
        return clean
    if rng is None:
        raise InvalidArgument("jitter > 0 needs an rng")
    noise = (2.0 * rng.draw_uniform(clean.size) - 1.0).reshape(clean.shape) * jitter
    return np.clip(clean + noise, 0.0, 1.0)


def generate_texture_mosaic(kind: str, size, jitter: float = 0.0, rng: RngStream | None = None) -> np.ndarray:
    """One periodic texture filling a ``size`` image, plus uniform pixel jitter."""
    if kind not in TEXTURE_KINDS:
        raise InvalidArgument(f"unknown texture kind {kind!r}")
    shape = (size, size) if np.isscalar(size) else tuple(size)
    if min(shape) < 16:
        raise InvalidArgument("texture size must be >= 16")
    if jitter < 0:
        raise InvalidArgument("jitter must be >= 0")
    return _jittered(texture_pattern(kind, shape), jitter, rng)


def scaled_sprite(sprite_id: int, scale: float) -> np.ndarray:
    """Nearest-neighbor resampling with pixel centers aligned.

    Output pixel i samples source floor((i + 0.5) / scale), so the source
    pixel center v maps to scale * v + 0.5 * (scale - 1).
    """
    if not 0 <= int(sprite_id) < len(SPRITES):
        raise InvalidArgument(f"sprite id must be in 0..{len(SPRITES) - 1}")
    if scale <= 0:
        raise InvalidArgument("scale must be positive")
    n = int(round(SPRITE_SIZE * scale))
    src = np.minimum(np.floor((np.arange(n) + 0.5) / scale).astype(int), SPRITE_SIZE - 1)
    return SPRITES[int(sprite_id)][np.ix_(src, src)]


def generate_sprite_scene(sprite_id: int, background: str, translation, scale: float, size,
                          rng: RngStream | None = None, foreground: str = "solid",
                          jitter: float = 0.0):
    """Place a scaled sprite at ``translation`` (top-left of its canvas).

    Background texture is anchored to the image, foreground texture to the
    sprite canvas, so the sprite carries its own texture when it moves.
    Returns ``(image, mask)``.
    """
    shape = (size, size) if np.isscalar(size) else tuple(size)
    support = scaled_sprite(sprite_id, scale)
    n = support.shape[0]
    tr, tc = (int(t) for t in translation)
    if tr < 0 or tc < 0 or tr + n > shape[0] or tc + n > shape[1]:
        raise InvalidArgument(f"sprite of side {n} at {(tr, tc)} does not fit a {shape} image")
    image = texture_pattern(background, shape)
    mask = np.zeros(shape, dtype=bool)
    mask[tr:tr + n, tc:tc + n] = support
    fg = texture_pattern(foreground, shape, origin=(tr, tc))
    image[mask] = fg[mask]
    return _jittered(image, jitter, rng), mask


def generate_figure_scene(figure: str, background: str, top_left, side: int = 12, size: int = 32,
                          rng: RngStream | None = None, jitter: float = 0.0):
    """Square ``side`` x ``side`` patch of ``figure`` texture on ``background``.

    ``background`` may also be ``"noise"``: independent uniform pixels.
    """
    if figure == background:
        raise InvalidArgument("figure and background textures must differ")
    r0, c0 = (int(t) for t in top_left)
    if r0 < 0 or c0 < 0 or r0 + side > size or c0 + side > size:
        raise InvalidArgument("figure square does not fit the scene")
    if background == "noise":
        if rng is None:
            raise InvalidArgument("a noise background needs an rng")
        image = rng.draw_uniform(size * size).reshape(size, size)
    else:
        image = texture_pattern(background, (size, size))
    # both textures keep the image-anchored phase the cortical field was trained on
    fig = texture_pattern(figure, (size, size))
    mask = np.zeros((size, size), dtype=bool)
    mask[r0:r0 + side, c0:c0 + side] = True
    image[mask] = fig[mask]
    return _jittered(image, jitter, rng), mask

"""Ten fixed letter-like sprites on a 12x12 canvas.

The bit patterns are data, not generated, so scene statistics never depend
on generator randomness.  ``#`` marks sprite support.
"""

import numpy as np

SPRITE_SIZE = 12

_ART = {
    "L": """
###.........
###.........
###.........
###.........
###.........
###.........
###.........
###.........
###.........
############
############
############
""",
    "T": """
############
############
############
....###.....
....###.....
....###.....
....###.....
....###.....
....###.....
....###.....
....###.....
....###.....
""",
    "E": """
############
############
###.........
###.........
###.........
#########...
#########...
###.........
###.........
###.........
############
############
""",
    "F": """
############
############
###.........
###.........
###.........
########....
########....
###.........
###.........
###.........
###.........
###.........
""",
    "H": """
###......###
###......###
###......###
###......###
###......###
############
############
###......###
###......###
###......###
###......###
###......###
""",
    "U": """
###......###
###......###
###......###
###......###
###......###
###......###
###......###
###......###
###......###
############
.##########.
..########..
""",
    "C": """
..#########.
.##########.
###.........
###.........
###.........
###.........
###.........
###.........
###.........
###.........
.##########.
..#########.
""",
    "Z": """
############
############
........###.
.......###..
......###...
.....###....
....###.....
...###......
..###.......
.###........
############
############
""",
    "P": """
#########...
##########..
###....###..
###....###..
###....###..
##########..
#########...
###.........
###.........
###.........
###.........
###.........
""",
    "X": """
###......###
.###....###.
..###..###..
...######...
....####....
....####....
...######...
..###..###..
.###....###.
###......###
##........##
#..........#
""",
}

SPRITE_NAMES = tuple(_ART)


def _parse(art: str) -> np.ndarray:
    lines = [ln for ln in art.strip("\n").splitlines()]
    bits = np.array([[ch == "#" for ch in ln] for ln in lines], dtype=bool)
    assert bits.shape == (SPRITE_SIZE, SPRITE_SIZE), bits.shape
    return bits


SPRITES = tuple(_parse(_ART[name]) for name in SPRITE_NAMES)
for _s in SPRITES:
    _s.setflags(write=False)


def sprite(sprite_id: int) -> np.ndarray:
    """Boolean 12x12 support of sprite ``sprite_id`` (0..9)."""
    return SPRITES[int(sprite_id)]

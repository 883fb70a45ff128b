"""Halting-map export: per-token table plus per-layer PGM images.

Images are binary PGM (P5), maxval 255: one image per layer per frame.
A patch block is bright (255) when its token is still computing at that
layer, dark (32) once halted. Layer index 0 shows the glimpse filter's
keep decision; layers 1..L show the halting schedule. Brightness per
patch is non-increasing across layers because tokens never revive.
"""

from pathlib import Path

import numpy as np

BRIGHT = 255
DARK = 32

MAP_COLUMNS = ["frame", "row", "col", "halt_layer"]


def halt_map_rows(halt_map, grid):
    """(K,) halt layers -> (frame, row, col, halt_layer) rows in token order."""
    t, rows, cols = grid
    out = []
    for k, layer in enumerate(halt_map):
        f, rest = divmod(k, rows * cols)
        r, c = divmod(rest, cols)
        out.append((f, r, c, int(layer)))
    return out


def write_map_csv(path, halt_map, grid):
    lines = [",".join(MAP_COLUMNS)]
    lines += [f"{f},{r},{c},{l}" for f, r, c, l in halt_map_rows(halt_map, grid)]
    Path(path).write_text("\n".join(lines) + "\n")


def layer_frame_image(halt_map, grid, patch, layer, frame):
    """(H, W) uint8 brightness image for one (layer, frame) pair.

    A token is bright at layer l iff halt_layer >= max(l, 1); tokens the
    glimpse filter dropped (halt_layer 0) are dark everywhere.
    """
    t, rows, cols = grid
    per_frame = rows * cols
    tokens = halt_map[frame * per_frame:(frame + 1) * per_frame].reshape(rows, cols)
    bright = tokens >= max(layer, 1)
    img = np.where(bright, BRIGHT, DARK).astype(np.uint8)
    return np.kron(img, np.ones((patch, patch), dtype=np.uint8))


def write_pgm(path, img):
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("pgm: need a 2-D uint8 image")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path):
    blob = Path(path).read_bytes()
    fields = blob.split(b"\n", 3)
    if fields[0] != b"P5":
        raise ValueError("pgm: not a binary PGM file")
    w, h = map(int, fields[1].split())
    return np.frombuffer(fields[3], dtype=np.uint8, count=w * h).reshape(h, w)


def export_clip(out_dir, clip_index, halt_map, grid, patch, layers):
    """Write halting_map.csv plus layer/frame PGMs for one clip."""
    d = Path(out_dir) / f"clip{clip_index:03d}"
    d.mkdir(parents=True, exist_ok=True)
    write_map_csv(d / "halting_map.csv", halt_map, grid)
    t = grid[0]
    for layer in range(layers + 1):
        for frame in range(t):
            img = layer_frame_image(halt_map, grid, patch, layer, frame)
            write_pgm(d / f"layer{layer:02d}_frame{frame:02d}.pgm", img)
    return d

"""File formats: Middlebury .flo flow, 8/16-bit PNG images, and the
versioned Gaussian map point-list.

Depth PNGs follow the TUM convention: 16-bit, 5000 units per meter, 0 =
missing. Mask PNGs are 8-bit with 0 = static, 255 = dynamic.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import FlowField, Gaussian, GaussianMap, MaskImage

FLO_MAGIC = 202021.25
DEPTH_PNG_SCALE = 5000
MAP_MAGIC = "dynsplat-map"
MAP_VERSION = 1


class FileFormatError(ValueError):
    pass


def write_flo(path, flow: FlowField) -> None:
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.vectors.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FileFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2)
    return FlowField(data.astype(np.float64))


def write_color_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_depth_png(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float64)
    q = np.where(np.isfinite(d) & (d > 0), d * DEPTH_PNG_SCALE + 0.5, 0.0)
    arr = np.clip(q, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)  # 16-bit grayscale


def read_depth_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    depth = arr / DEPTH_PNG_SCALE
    depth[arr == 0] = np.nan
    return depth


def write_mask_png(path, mask: MaskImage) -> None:
    Image.fromarray(mask.bits * np.uint8(255), mode="L").save(path)


def read_mask_png(path) -> MaskImage:
    arr = np.asarray(Image.open(path).convert("L"))
    return MaskImage((arr > 127).astype(np.uint8))


def save_map(path, gmap: GaussianMap) -> None:
    """Versioned text point-list; floats use 17 significant digits so a
    load/save round trip is exact for all finite values."""
    lines = [f"{MAP_MAGIC} v{MAP_VERSION} count={len(gmap)} next_id={gmap.next_id}",
             "# id alive anchor px py pz qw qx qy qz sx sy sz opacity r g b"]
    for i in range(len(gmap)):
        vals = [*gmap.positions[i], *gmap.quats[i], *gmap.scales[i],
                gmap.opacities[i], *gmap.colors[i]]
        lines.append(" ".join([str(int(gmap.ids[i])), str(int(gmap.alive[i])),
                               str(int(gmap.anchors[i]))]
                              + [f"{v:.17g}" for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_map(path) -> GaussianMap:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FileFormatError(f"{path}: empty map file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != MAP_MAGIC:
        raise FileFormatError(f"{path}: not a map file (header {lines[0]!r})")
    if head[1] != f"v{MAP_VERSION}":
        raise FileFormatError(f"{path}: unsupported version {head[1]}")
    count = int(head[2].split("=")[1])
    next_id = int(head[3].split("=")[1])

    gmap = GaussianMap()
    rows = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    if len(rows) != count:
        raise FileFormatError(f"{path}: header count {count} != {len(rows)} records")
    for ln, row in enumerate(rows, start=2):
        p = row.split()
        if len(p) != 17:
            raise FileFormatError(f"{path}:{ln}: expected 17 fields, got {len(p)}")
        gid, alive, anchor = int(p[0]), bool(int(p[1])), int(p[2])
        v = [float(x) for x in p[3:]]
        g = Gaussian(v[0:3], v[3:7], v[7:10], v[10], v[11:14],
                     anchor_keyframe=anchor, alive=alive)
        gmap.ids = np.append(gmap.ids, gid)
        gmap.positions = np.vstack([gmap.positions, g.position[None]])
        gmap.quats = np.vstack([gmap.quats, g.rotation[None]])
        gmap.scales = np.vstack([gmap.scales, g.scale[None]])
        gmap.opacities = np.append(gmap.opacities, g.opacity)
        gmap.colors = np.vstack([gmap.colors, g.color[None]])
        gmap.anchors = np.append(gmap.anchors, anchor)
        gmap.alive = np.append(gmap.alive, alive)
    gmap.next_id = next_id
    return gmap

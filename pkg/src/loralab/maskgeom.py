"""Mask-to-prompt geometry: bounding box, exact Euclidean distance transform,
analytic circle IoU, and greedy inscribed-circle point sampling.

Convention: a binary mask is a 2-D boolean grid with origin at the top left,
x = column index, y = row index. The image border counts as background, so
the distance at a foreground pixel is its exact Euclidean distance to the
nearest background pixel or to just outside the image, which is also the
radius of the largest circle inscribed at that pixel.

sample_points produces the supervision target for a mask: the minimal
bounding box plus the centers of the k largest inscribed circles, selected
greedily under a pairwise circle-IoU cap.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Circle:
    cx: int
    cy: int
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"circle radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class SupervisionTarget:
    """Bounding box [x_left, y_top, x_right, y_bottom] (inclusive) plus k
    point prompts. degenerate is set when the mask supported fewer than k
    circles and the first center was repeated to pad."""

    bbox: tuple[int, int, int, int]
    points: tuple[tuple[int, int], ...]
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "bbox": list(self.bbox),
            "points": [list(p) for p in self.points],
            "degenerate": self.degenerate,
        }


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a PGM image (P2 ASCII or P5 binary); nonzero pixels are
    foreground. Comments and 16-bit P5 samples are handled."""
    if not isinstance(data, (bytes, bytearray)):
        raise TypeError("read_pgm expects raw bytes")
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError("not a PGM file: magic number must be P2 or P5")
    magic = data[:2]

    # Header tokens: magic, width, height, maxval. Comments run to end of line.
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3 and pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"[^\s#]+", data[pos:])
            tokens.append(m.group(0))
            pos += len(m.group(0))
    if len(tokens) < 3:
        raise ValueError("truncated PGM header")
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValueError(f"malformed PGM header fields: {exc}") from exc
    if width < 1 or height < 1 or maxval < 1 or maxval > 65535:
        raise ValueError(f"invalid PGM dimensions or maxval: {width}x{height}, {maxval}")

    if magic == b"P2":
        values = data[pos:].split()
        if len(values) < width * height:
            raise ValueError(f"PGM pixel data truncated: expected {width * height} samples")
        try:
            flat = np.array([int(v) for v in values[: width * height]], dtype=np.int64)
        except ValueError as exc:
            raise ValueError(f"non-numeric PGM sample: {exc}") from exc
    else:
        pos += 1  # exactly one whitespace byte separates header and raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = width * height * dtype.itemsize
        raw = data[pos : pos + need]
        if len(raw) < need:
            raise ValueError(f"PGM raster truncated: expected {need} bytes, got {len(raw)}")
        flat = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    if flat.max(initial=0) > maxval:
        raise ValueError("PGM sample exceeds declared maxval")
    return (flat.reshape(height, width) > 0)


def read_pgm_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_pgm(fh.read())


def bounding_box(mask) -> tuple[int, int, int, int]:
    """Inclusive [x_left, y_top, x_right, y_bottom] of the foreground."""
    m = as_mask(mask)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise ValueError("bounding_box of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance to the nearest background pixel, with the
    border treated as background; zero on background pixels."""
    m = as_mask(mask)
    if not m.any():
        return np.zeros(m.shape, dtype=np.float64)
    padded = np.pad(m, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)
    dist = dist[1:-1, 1:-1]
    return np.where(m, dist, 0.0)


def circle_iou(a: Circle, b: Circle) -> float:
    """Intersection over union of two disks via the analytic lens area."""
    ra, rb = a.radius, b.radius
    if ra == 0.0 and rb == 0.0:
        return 0.0
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    if d >= ra + rb:
        inter = 0.0
    elif d <= abs(ra - rb):
        rmin = min(ra, rb)
        inter = math.pi * rmin * rmin
    else:
        # circular segment areas on both sides of the chord; clamp the acos
        # arguments against rounding drift at the tangency boundaries
        ca = (d * d + ra * ra - rb * rb) / (2.0 * d * ra)
        cb = (d * d + rb * rb - ra * ra) / (2.0 * d * rb)
        alpha = math.acos(max(-1.0, min(1.0, ca)))
        beta = math.acos(max(-1.0, min(1.0, cb)))
        inter = (
            ra * ra * (alpha - math.sin(2.0 * alpha) / 2.0)
            + rb * rb * (beta - math.sin(2.0 * beta) / 2.0)
        )
    union = math.pi * ra * ra + math.pi * rb * rb - inter
    return inter / union


def sample_circles(mask, k: int = 3, iou_cap: float = 0.3) -> tuple[list[Circle], bool]:
    """Greedy largest-inscribed-circle selection.

    Candidates are all foreground pixels ranked by distance-transform radius
    descending, ties broken by (y, x) ascending. A candidate is accepted iff
    its circle overlaps every accepted circle with IoU <= iou_cap. If fewer
    than k circles are accepted, the first (largest) is repeated and the
    degenerate flag is set.
    """
    m = as_mask(mask)
    if not m.any():
        raise ValueError("sample_circles on an empty mask")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dist = distance_transform(m)
    ys, xs = np.nonzero(m)
    radii = dist[ys, xs]
    order = np.lexsort((xs, ys, -radii))

    chosen: list[Circle] = []
    for idx in order:
        cand = Circle(cx=int(xs[idx]), cy=int(ys[idx]), radius=float(radii[idx]))
        if all(circle_iou(cand, c) <= iou_cap for c in chosen):
            chosen.append(cand)
            if len(chosen) == k:
                break
    degenerate = len(chosen) < k
    while len(chosen) < k:
        chosen.append(chosen[0])
    return chosen, degenerate


def sample_points(mask, k: int = 3, iou_cap: float = 0.3) -> SupervisionTarget:
    """The full supervision target: bounding box plus k circle centers."""
    circles, degenerate = sample_circles(mask, k=k, iou_cap=iou_cap)
    return SupervisionTarget(
        bbox=bounding_box(mask),
        points=tuple((c.cx, c.cy) for c in circles),
        degenerate=degenerate,
    )

"""Supervision rasters for polygon sets.

Encodes an instance set into the three raster targets used as training
signals: a binary segmentation mask, a per-pixel attraction field pointing
at the nearest boundary segment, and a vertex heatmap with sub-pixel
offsets. Also provides a synthetic degradation pass that stands in for
imperfect network predictions.

Sampling convention: pixel (r, c) is sampled at its center (c + 0.5,
r + 0.5). Vertex offsets are relative to that center and live in
[-0.5, 0.5).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import InstanceSet, Point2, Polygon

_ALLOWED_DTYPES = {
    np.dtype(np.uint8): "u8",
    np.dtype(np.uint32): "u32",
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
}


class RasterError(ValueError):
    """Invalid raster input."""


@dataclass(frozen=True)
class RasterGrid:
    """Immutable H x W x C grid of scalars, row-major and channel-last.

    Supported dtypes: u8 and f32 (serializable), plus u32 (component
    labels) and f64 (full-precision attraction fields) in memory only.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = self.data
        if arr.ndim != 3:
            raise RasterError(f"grid data must be 3-D (H, W, C), got shape {arr.shape}")
        if arr.dtype not in _ALLOWED_DTYPES:
            raise RasterError(f"unsupported grid dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterGrid":
        """Wrap a 2-D (single channel) or 3-D array."""
        arr = np.asarray(array)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dtype_name(self) -> str:
        return _ALLOWED_DTYPES[self.data.dtype]

    def channel(self, index: int = 0) -> np.ndarray:
        return self.data[:, :, index]


@dataclass(frozen=True)
class VertexGrids:
    """Vertex heatmap (1 x f32 in [0, 1]) plus per-pixel offsets (2 x f32)."""

    heatmap: RasterGrid
    offsets: RasterGrid

    def __post_init__(self) -> None:
        h, o = self.heatmap, self.offsets
        if h.channels != 1 or o.channels != 2:
            raise RasterError("vertex grids need a 1-channel heatmap and 2-channel offsets")
        if (h.height, h.width) != (o.height, o.width):
            raise RasterError("heatmap and offsets shapes differ")


@dataclass(frozen=True)
class DegradeSpec:
    """Synthetic corruption parameters. All-zero settings are the identity."""

    dilate_radius: int = 0
    erode_radius: int = 0
    boundary_jitter_sigma: float = 0.0
    heatmap_noise_sigma: float = 0.0
    vertex_dropout_prob: float = 0.0
    spurious_vertex_count: int = 0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.dilate_radius, self.erode_radius, self.boundary_jitter_sigma,
               self.heatmap_noise_sigma, self.spurious_vertex_count) < 0:
            raise RasterError("degradation parameters must be nonnegative")
        if not 0.0 <= self.vertex_dropout_prob <= 1.0:
            raise RasterError(f"vertex_dropout_prob {self.vertex_dropout_prob} outside [0, 1]")


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    return xs[None, :], ys[:, None]


def polygon_mask(poly: Polygon, h: int, w: int) -> np.ndarray:
    """Boolean mask of pixel centers inside the polygon (boundary inclusive)."""
    xs = [v.x for v in poly.all_vertices()]
    ys = [v.y for v in poly.all_vertices()]
    c0 = max(0, int(math.floor(min(xs) - 0.5)) - 1)
    c1 = min(w - 1, int(math.ceil(max(xs) - 0.5)) + 1)
    r0 = max(0, int(math.floor(min(ys) - 0.5)) - 1)
    r1 = min(h - 1, int(math.ceil(max(ys) - 0.5)) + 1)
    out = np.zeros((h, w), dtype=bool)
    if c0 > c1 or r0 > r1:
        return out
    x = np.arange(c0, c1 + 1, dtype=np.float64)[None, :] + 0.5
    y = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] + 0.5
    parity = np.zeros((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
    boundary = np.zeros_like(parity)
    for ring in poly.rings():
        vs = ring.vertices
        n = len(vs)
        for i in range(n):
            ax, ay = vs[i]
            bx, by = vs[(i + 1) % n]
            ex, ey = bx - ax, by - ay
            crossing = (ay > y) != (by > y)
            if crossing.any():
                denom = ey if ey != 0 else 1.0
                x_int = ax + (y - ay) * ex / denom
                parity ^= crossing & (x < x_int)
            seg_len2 = ex * ex + ey * ey
            scale = max(1.0, abs(ax), abs(ay), abs(bx), abs(by))
            tol = 1e-9 * scale * math.sqrt(seg_len2)
            cross = ex * (y - ay) - ey * (x - ax)
            dot = (x - ax) * ex + (y - ay) * ey
            boundary |= (np.abs(cross) <= tol) & (dot >= -tol) & (dot <= seg_len2 + tol)
    out[r0 : r1 + 1, c0 : c1 + 1] = parity | boundary
    return out


def rasterize_mask(instances: InstanceSet, h: int, w: int) -> RasterGrid:
    """Binary u8 mask: 1 where a pixel center falls in any instance, holes excluded."""
    if h < 1 or w < 1:
        raise RasterError(f"mask shape must be positive, got {h}x{w}")
    grid = np.zeros((h, w), dtype=bool)
    for scored in instances:
        grid |= polygon_mask(scored.polygon, h, w)
    return RasterGrid.from_array(grid.astype(np.uint8))


def _all_segments(instances: InstanceSet) -> list[tuple[float, float, float, float]]:
    segs = []
    for scored in instances:
        for seg in scored.polygon.boundary_segments():
            segs.append((seg.start.x, seg.start.y, seg.end.x, seg.end.y))
    return segs


def encode_afm(instances: InstanceSet, h: int, w: int) -> RasterGrid:
    """Attraction field: for every pixel center x, the displacement x' - x to its
    projection x' on the nearest boundary segment over all instances.

    Ties between equidistant segments go to the lowest segment index
    (instance order, outer ring then holes, edges in ring order). Returned
    at f64 precision; convert to f32 explicitly before serializing.
    """
    segs = _all_segments(instances)
    if not segs:
        raise RasterError("no segments")
    x, y = _pixel_centers(h, w)
    best_d2 = np.full((h, w), np.inf)
    best_fx = np.zeros((h, w))
    best_fy = np.zeros((h, w))
    for ax, ay, bx, by in segs:
        ex, ey = bx - ax, by - ay
        l2 = ex * ex + ey * ey
        t = ((x - ax) * ex + (y - ay) * ey) / l2
        np.clip(t, 0.0, 1.0, out=t)
        fx = ax + t * ex
        fy = ay + t * ey
        d2 = (x - fx) ** 2 + (y - fy) ** 2
        better = d2 < best_d2
        best_d2[better] = d2[better]
        best_fx[better] = fx[better]
        best_fy[better] = fy[better]
    afm = np.stack([best_fx - x, best_fy - y], axis=-1)
    return RasterGrid(afm)


_MAX_F32_OFFSET = np.nextafter(np.float32(0.5), np.float32(0.0))


def _f32_offset(value: float) -> np.float32:
    # rounding to f32 may push a value just below 0.5 onto 0.5 itself,
    # which would leave the stated [-0.5, 0.5) range
    out = np.float32(value)
    return min(out, _MAX_F32_OFFSET)


def encode_vertices(instances: InstanceSet, h: int, w: int) -> VertexGrids:
    """Vertex heatmap and center-relative offsets.

    A vertex v lands in pixel (floor(v.y), floor(v.x)); the heatmap is 1
    there and the offsets store v - pixel center, in [-0.5, 0.5). When two
    vertices fall into one pixel the later write wins (warned).
    """
    heat = np.zeros((h, w), dtype=np.float32)
    off = np.zeros((h, w, 2), dtype=np.float32)
    collisions = 0
    for idx, scored in enumerate(instances):
        for ring in scored.polygon.rings():
            for v in ring.vertices:
                c = math.floor(v.x)
                r = math.floor(v.y)
                if not (0 <= c < w and 0 <= r < h):
                    raise RasterError(
                        f"vertex ({v.x}, {v.y}) of instance {idx} outside [0,{w})x[0,{h})"
                    )
                if heat[r, c] == 1.0:
                    collisions += 1
                heat[r, c] = 1.0
                off[r, c, 0] = _f32_offset(v.x - (c + 0.5))
                off[r, c, 1] = _f32_offset(v.y - (r + 0.5))
    if collisions:
        warnings.warn(f"{collisions} vertex pixel collisions; later vertices won", stacklevel=2)
    return VertexGrids(RasterGrid.from_array(heat), RasterGrid(off))


def decode_vertices(grids: VertexGrids) -> list[tuple[Point2, float]]:
    """Inverse of encode_vertices: nonzero heatmap pixels back to scored points."""
    heat = grids.heatmap.channel()
    off = grids.offsets.data
    points = []
    for r, c in np.argwhere(heat > 0):
        x = c + 0.5 + float(off[r, c, 0])
        y = r + 0.5 + float(off[r, c, 1])
        points.append((Point2(x, y), float(heat[r, c])))
    return points


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def degrade(mask: RasterGrid, grids: VertexGrids, spec: DegradeSpec) -> tuple[RasterGrid, VertexGrids]:
    """Deterministically corrupt a mask and vertex grids.

    Applies, in order: square dilation, square erosion, Gaussian jitter on
    the boundary band (clamped to [0, 1]), full-grid heatmap noise (also
    clamped), vertex dropout, and spurious vertex injection. A counter-based
    Philox generator keyed by rng_seed makes runs reproducible.
    """
    rng = np.random.Generator(np.random.Philox(key=spec.rng_seed))
    binary = mask.channel() > 0.5
    if spec.dilate_radius > 0:
        binary = ndimage.binary_dilation(binary, structure=_square(spec.dilate_radius))
    if spec.erode_radius > 0:
        binary = ndimage.binary_erosion(binary, structure=_square(spec.erode_radius))
    soft = binary.astype(np.float32)
    if spec.boundary_jitter_sigma > 0:
        band = ndimage.binary_dilation(binary, structure=_square(1)) & ~ndimage.binary_erosion(
            binary, structure=_square(1)
        )
        noise = rng.normal(0.0, spec.boundary_jitter_sigma, size=soft.shape)
        soft = np.where(band, soft + noise.astype(np.float32), soft)
        np.clip(soft, 0.0, 1.0, out=soft)

    heat = np.array(grids.heatmap.channel(), dtype=np.float32)
    off = np.array(grids.offsets.data, dtype=np.float32)
    if spec.heatmap_noise_sigma > 0:
        heat = heat + rng.normal(0.0, spec.heatmap_noise_sigma, size=heat.shape).astype(np.float32)
        np.clip(heat, 0.0, 1.0, out=heat)
    if spec.vertex_dropout_prob > 0:
        peaks = np.argwhere(grids.heatmap.channel() > 0)
        drops = rng.random(len(peaks)) < spec.vertex_dropout_prob
        for (r, c), drop in zip(peaks, drops):
            if drop:
                heat[r, c] = 0.0
                off[r, c, :] = 0.0
    if spec.spurious_vertex_count > 0:
        free = np.flatnonzero(grids.heatmap.channel().ravel() == 0)
        count = min(spec.spurious_vertex_count, len(free))
        chosen = rng.choice(free, size=count, replace=False)
        scores = rng.uniform(0.5, 1.0, size=count).astype(np.float32)
        offs = rng.uniform(-0.5, 0.5, size=(count, 2)).astype(np.float32)
        width = heat.shape[1]
        for flat, score, (ox, oy) in zip(chosen, scores, offs):
            r, c = divmod(int(flat), width)
            heat[r, c] = score
            off[r, c, 0] = ox
            off[r, c, 1] = oy
    return (
        RasterGrid.from_array(soft),
        VertexGrids(RasterGrid.from_array(heat), RasterGrid(off)),
    )


def downscale_targets(instances: InstanceSet, s: float) -> InstanceSet:
    """Divide every vertex coordinate by the down-sampling factor s (s >= 1)."""
    if s < 1:
        raise RasterError(f"down-sampling factor must be >= 1, got {s}")
    if s == 1:
        return instances
    return instances.scaled(1.0 / s)

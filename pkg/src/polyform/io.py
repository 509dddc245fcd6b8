"""Bit-exact persistence and rendering.

Formats:
  - RGF: a tiny binary raster container. 20-byte header (magic "RGF1",
    then height, width, channels, dtype code as little-endian u32; code 0
    is u8, 1 is f32) followed by the row-major channel-last payload.
  - GeoJSON: RFC 7946 FeatureCollection of Polygon features in pixel
    coordinates (x right, y down, origin at the image's top-left corner),
    no "crs" member. A foreign member "tiles" lists tile ids and sizes so
    empty tiles survive round trips; features carry tile_id and score
    properties.
  - COCO: the images/annotations/categories subset with polygon
    "segmentation" arrays. RLE segmentations are rejected.
  - SVG: deterministic polygon overlays, one even-odd path per instance.

Readers raise typed FormatError subclasses on malformed input, never
arbitrary exceptions.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import InstanceSet, Polygon, Ring, ScoredPolygon, point_in_polygon, signed_area
from .raster import RasterGrid

_MAGIC = b"RGF1"
_HEADER = struct.Struct("<4sIIII")
_DTYPE_BY_CODE = {0: np.dtype(np.uint8), 1: np.dtype(np.float32)}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}

_BOUNDS_TOL = 1e-6


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class RgfError(FormatError):
    pass


class GeoJsonError(FormatError):
    pass


class CocoError(FormatError):
    pass


@dataclass(frozen=True)
class TileRecord:
    """Instances of one image tile, with the tile's pixel size as (h, w)."""

    tile_id: str
    image_size: tuple[int, int]
    instances: InstanceSet

    def __post_init__(self) -> None:
        h, w = self.image_size
        if h < 1 or w < 1:
            raise FormatError(f"tile {self.tile_id!r}: bad image size {self.image_size}")
        object.__setattr__(self, "image_size", (int(h), int(w)))
        for sp in self.instances:
            for v in sp.polygon.all_vertices():
                if not (-_BOUNDS_TOL <= v.x <= w + _BOUNDS_TOL and -_BOUNDS_TOL <= v.y <= h + _BOUNDS_TOL):
                    raise FormatError(
                        f"tile {self.tile_id!r}: vertex ({v.x}, {v.y}) outside {w}x{h} bounds"
                    )


def write_rgf(grid: RasterGrid) -> bytes:
    """Serialize a grid; only u8 and f32 grids are representable on disk."""
    if grid.data.dtype not in _CODE_BY_DTYPE:
        raise RgfError(f"dtype {grid.dtype_name} not serializable; convert to u8 or f32 first")
    header = _HEADER.pack(
        _MAGIC, grid.height, grid.width, grid.channels, _CODE_BY_DTYPE[grid.data.dtype]
    )
    # on-disk payload is little-endian; a no-op on LE hosts
    payload = np.ascontiguousarray(grid.data).astype(grid.data.dtype.newbyteorder("<"), copy=False)
    return header + payload.tobytes()


def read_rgf(data: bytes) -> RasterGrid:
    """Parse RGF bytes; the round trip through write_rgf is bitwise exact."""
    if len(data) < _HEADER.size:
        raise RgfError(f"truncated header: got {len(data)} bytes, need {_HEADER.size}")
    magic, h, w, c, code = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise RgfError(f"bad magic {magic!r}")
    if code not in _DTYPE_BY_CODE:
        raise RgfError(f"unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]
    expected = h * w * c * dtype.itemsize
    payload = data[_HEADER.size :]
    if len(payload) != expected:
        raise RgfError(f"truncated payload: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(h, w, c)
    return RasterGrid(arr)


def _ring_coords_closed(ring: Ring) -> list[list[float]]:
    coords = [[v.x, v.y] for v in ring.vertices]
    coords.append(coords[0])
    return coords


def write_geojson(records: Sequence[TileRecord], metadata: dict | None = None) -> bytes:
    features = []
    for rec in records:
        for sp in rec.instances:
            poly = sp.polygon
            rings = [_ring_coords_closed(poly.outer)] + [_ring_coords_closed(h) for h in poly.holes]
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": rings},
                    "properties": {"tile_id": rec.tile_id, "score": sp.score},
                }
            )
    doc: dict = {
        "type": "FeatureCollection",
        "tiles": [
            {"tile_id": rec.tile_id, "image_size": [rec.image_size[0], rec.image_size[1]]}
            for rec in records
        ],
        "features": features,
    }
    if metadata is not None:
        doc["metadata"] = metadata
    return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("utf-8")


def _parse_geojson_ring(positions: object, what: str) -> Ring:
    if not isinstance(positions, list) or len(positions) < 4:
        raise GeoJsonError(f"{what}: ring needs >= 4 positions (closed), got {positions!r}")
    pts = []
    for pos in positions:
        if not (isinstance(pos, list) and len(pos) == 2):
            raise GeoJsonError(f"{what}: bad position {pos!r}")
        pts.append((float(pos[0]), float(pos[1])))
    if pts[0] != pts[-1]:
        raise GeoJsonError(f"{what}: unclosed ring")
    try:
        return Ring.from_coords(pts[:-1])
    except ValueError as exc:
        raise GeoJsonError(f"{what}: {exc}") from exc


def read_geojson(data: bytes | str) -> list[TileRecord]:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GeoJsonError(f"malformed JSON at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise GeoJsonError("not a FeatureCollection")
    if "tiles" not in doc:
        raise GeoJsonError("missing 'tiles' member (tile ids and sizes)")
    order: list[str] = []
    sizes: dict[str, tuple[int, int]] = {}
    try:
        for entry in doc["tiles"]:
            tile_id = str(entry["tile_id"])
            h, w = entry["image_size"]
            order.append(tile_id)
            sizes[tile_id] = (int(h), int(w))
    except (KeyError, TypeError, ValueError) as exc:
        raise GeoJsonError(f"bad 'tiles' member: {exc!r}") from exc
    by_tile: dict[str, list[ScoredPolygon]] = {tid: [] for tid in order}
    for i, feature in enumerate(doc.get("features", [])):
        what = f"feature {i}"
        geom = feature.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise GeoJsonError(f"{what}: unsupported geometry type {geom.get('type')!r}")
        rings = geom.get("coordinates")
        if not isinstance(rings, list) or not rings:
            raise GeoJsonError(f"{what}: empty coordinates")
        outer = _parse_geojson_ring(rings[0], what)
        holes = tuple(_parse_geojson_ring(r, what) for r in rings[1:])
        props = feature.get("properties") or {}
        tile_id = str(props.get("tile_id", ""))
        if tile_id not in by_tile:
            raise GeoJsonError(f"{what}: unknown tile_id {tile_id!r}")
        try:
            score = float(props.get("score", 1.0))
        except (TypeError, ValueError) as exc:
            raise GeoJsonError(f"{what}: bad score {props.get('score')!r}") from exc
        by_tile[tile_id].append(ScoredPolygon(Polygon(outer, holes), score))
    return [
        TileRecord(tid, sizes[tid], InstanceSet(tuple(by_tile[tid]))) for tid in order
    ]


def _rings_from_segmentation(seg: object, what: str) -> list[Ring]:
    if isinstance(seg, dict):
        raise CocoError(f"{what}: unsupported encoding (RLE segmentation)")
    if not isinstance(seg, list) or not seg:
        raise CocoError(f"{what}: empty segmentation")
    rings = []
    for flat in seg:
        if not isinstance(flat, list) or len(flat) < 6 or len(flat) % 2 != 0:
            raise CocoError(f"{what}: bad polygon array of length {len(flat) if isinstance(flat, list) else '?'}")
        pts = [(float(flat[i]), float(flat[i + 1])) for i in range(0, len(flat), 2)]
        if len(pts) > 3 and pts[0] == pts[-1]:
            pts = pts[:-1]
        try:
            rings.append(Ring.from_coords(pts))
        except ValueError as exc:
            raise CocoError(f"{what}: {exc}") from exc
    return rings


def read_coco_annotations(path: str | Path) -> list[TileRecord]:
    """Load COCO-style polygon annotations grouped per image.

    Multi-ring segmentations are interpreted as one polygon: the largest
    ring by absolute area is the outer boundary, the rest are holes (warned
    when a supposed hole lies outside the outer ring). "iscrowd" flags are
    ignored with a warning.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoError(f"malformed JSON at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise CocoError("missing 'images' list")
    images: dict[int, tuple[str, int, int]] = {}
    order: list[int] = []
    try:
        for img in doc["images"]:
            image_id = int(img["id"])
            tile_id = str(img.get("file_name", image_id))
            images[image_id] = (tile_id, int(img["height"]), int(img["width"]))
            order.append(image_id)
    except (KeyError, TypeError, ValueError) as exc:
        raise CocoError(f"bad 'images' entry: {exc!r}") from exc
    by_image: dict[int, list[ScoredPolygon]] = {i: [] for i in order}
    crowd_seen = 0
    for k, ann in enumerate(doc.get("annotations", [])):
        if not isinstance(ann, dict):
            raise CocoError(f"annotation {k}: not an object")
        what = f"annotation {ann.get('id', k)}"
        try:
            image_id = int(ann["image_id"])
            score = float(ann.get("score", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoError(f"{what}: {exc!r}") from exc
        if image_id not in images:
            raise CocoError(f"{what}: unknown image_id {image_id}")
        if ann.get("iscrowd"):
            crowd_seen += 1
        rings = _rings_from_segmentation(ann.get("segmentation"), what)
        rings.sort(key=lambda r: -abs(signed_area(r)))
        outer, holes = rings[0], tuple(rings[1:])
        poly = Polygon(outer, holes)
        for hole in holes:
            if not point_in_polygon(hole.vertices[0], Polygon(outer)):
                warnings.warn(f"{what}: disjoint ring treated as hole", stacklevel=2)
                break
        by_image[image_id].append(ScoredPolygon(poly, score))
    if crowd_seen:
        warnings.warn(f"ignored iscrowd flag on {crowd_seen} annotations", stacklevel=2)
    records = []
    for image_id in order:
        tile_id, h, w = images[image_id]
        records.append(TileRecord(tile_id, (h, w), InstanceSet(tuple(by_image[image_id]))))
    return records


def write_coco_annotations(records: Sequence[TileRecord]) -> bytes:
    """COCO-style export; the read/write round trip is coordinate-exact."""
    images = []
    annotations = []
    ann_id = 1
    for image_id, rec in enumerate(records, start=1):
        h, w = rec.image_size
        images.append({"id": image_id, "file_name": rec.tile_id, "height": h, "width": w})
        for sp in rec.instances:
            poly = sp.polygon
            seg = []
            for ring in poly.rings():
                flat: list[float] = []
                for v in ring.vertices:
                    flat.extend((v.x, v.y))
                seg.append(flat)
            xs = [v.x for v in poly.all_vertices()]
            ys = [v.y for v in poly.all_vertices()]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": 1,
                    "segmentation": seg,
                    "area": poly.area(),
                    "bbox": [min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)],
                    "iscrowd": 0,
                    "score": sp.score,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "building", "supercategory": "building"}],
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class SvgStyle:
    background: str = "none"  # "none" or "checker"
    stroke_width: float = 1.0
    fill_opacity: float = 0.45

    def __post_init__(self) -> None:
        if self.background not in ("none", "checker"):
            raise FormatError(f"unknown background {self.background!r}")


_PALETTE = (
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
    "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff",
)


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def render_svg(records: Sequence[TileRecord], style: SvgStyle | None = None) -> str:
    """Deterministic SVG overlay; tiles are laid out left to right and each
    instance is one even-odd path colored by its index within the tile."""
    style = style or SvgStyle()
    total_w = sum(rec.image_size[1] for rec in records)
    total_h = max((rec.image_size[0] for rec in records), default=0)
    width = max(total_w, 1)
    height = max(total_h, 1)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if style.background == "checker":
        parts.append(
            '<defs><pattern id="checker" width="16" height="16" patternUnits="userSpaceOnUse">'
            '<rect width="16" height="16" fill="#f0f0f0"/>'
            '<rect width="8" height="8" fill="#d8d8d8"/>'
            '<rect x="8" y="8" width="8" height="8" fill="#d8d8d8"/>'
            "</pattern></defs>"
        )
    offset = 0
    for rec in records:
        h, w = rec.image_size
        parts.append(f'<g transform="translate({offset},0)">')
        if style.background == "checker":
            parts.append(f'<rect width="{w}" height="{h}" fill="url(#checker)"/>')
        parts.append(f'<rect width="{w}" height="{h}" fill="none" stroke="#888" stroke-width="0.5"/>')
        for i, sp in enumerate(rec.instances):
            color = _PALETTE[i % len(_PALETTE)]
            cmds = []
            for ring in sp.polygon.rings():
                vs = ring.vertices
                cmds.append(f"M {_fmt(vs[0].x)} {_fmt(vs[0].y)}")
                cmds.extend(f"L {_fmt(v.x)} {_fmt(v.y)}" for v in vs[1:])
                cmds.append(f"L {_fmt(vs[0].x)} {_fmt(vs[0].y)}")  # explicit closing side
                cmds.append("Z")
            parts.append(
                f'<path d="{" ".join(cmds)}" fill="{color}" fill-opacity="{_fmt(style.fill_opacity)}" '
                f'fill-rule="evenodd" stroke="{color}" stroke-width="{_fmt(style.stroke_width)}"/>'
            )
        parts.append("</g>")
        offset += w
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

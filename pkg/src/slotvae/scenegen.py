"""Procedural multi-object scene datasets and their on-disk shard format.

Two generators are provided:

* ``generate_arrowworld`` -- one arrow in the front of the scene and three
  objects in the back. Two back objects share a shape, the third is unique,
  and the arrow points at the unique one.
* ``generate_multisprite`` -- 1 to 6 non-overlapping sprites on a flat
  background, a quick stand-in for the usual decomposition benchmarks.

Records are written as a ``manifest.txt`` plus binary ``shard-%05d.bin`` files.
"""

from __future__ import annotations

import colorsys
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

SHAPES = ("circle", "square", "triangle", "arrow")
BACK_SHAPES = ("circle", "square", "triangle")

MIN_SCALE = 3.0
AIM_TOLERANCE = 0.15  # radians; generation-side aim tolerance
SEPARATION = 2.0  # minimum gap between bounding circles, pixels
MAX_RETRIES = 200
MIN_AIM_SEPARATION = 0.5  # radians between back objects seen from the arrow
FORMAT_VERSION = 1
RECORDS_PER_SHARD = 1000


class IntegrityError(Exception):
    """Raised when a dataset directory does not match its manifest."""


@dataclass
class SpriteSpec:
    shape: str
    color: tuple[float, float, float]
    position: tuple[float, float]  # (row, col) of the sprite centroid
    scale: float  # bounding-circle radius in pixels
    rotation: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.scale < MIN_SCALE:
            raise ValueError(f"scale {self.scale} below minimum {MIN_SCALE}")


@dataclass
class SceneRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8, 0 = background, j = metadata[j - 1]
    sprites: list[SpriteSpec]
    unique_shape_index: int = -1  # index into sprites; -1 if not ArrowWorld
    arrow_angle: float = float("nan")
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0

    def metadata(self) -> dict:
        return {
            "sprites": [asdict(s) for s in self.sprites],
            "unique_shape_index": self.unique_shape_index,
            "arrow_angle": None if math.isnan(self.arrow_angle) else self.arrow_angle,
            "background": list(self.background),
        }

    @classmethod
    def from_metadata(cls, image, mask, meta: dict) -> "SceneRecord":
        sprites = [
            SpriteSpec(
                shape=s["shape"],
                color=tuple(s["color"]),
                position=tuple(s["position"]),
                scale=s["scale"],
                rotation=s["rotation"],
            )
            for s in meta["sprites"]
        ]
        angle = meta["arrow_angle"]
        return cls(
            image=image,
            mask=mask,
            sprites=sprites,
            unique_shape_index=meta["unique_shape_index"],
            arrow_angle=float("nan") if angle is None else angle,
            background=tuple(meta["background"]),
        )

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and self.metadata() == other.metadata()
        )


@dataclass
class DatasetManifest:
    version: int
    height: int
    width: int
    channels: int
    count: int
    shards: list[str] = field(default_factory=list)
    shard_counts: list[int] = field(default_factory=list)
    generator: str = ""
    seed: int = 0

    def to_text(self) -> str:
        lines = [
            f"version={self.version}",
            f"height={self.height}",
            f"width={self.width}",
            f"channels={self.channels}",
            f"count={self.count}",
            f"shards={','.join(self.shards)}",
            f"shard_counts={','.join(str(c) for c in self.shard_counts)}",
            f"generator={self.generator}",
            f"seed={self.seed}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise IntegrityError(f"malformed manifest line: {line!r}")
            kv[key.strip()] = value.strip()
        try:
            shards = [s for s in kv.get("shards", "").split(",") if s]
            counts = [int(c) for c in kv.get("shard_counts", "").split(",") if c]
            return cls(
                version=int(kv["version"]),
                height=int(kv["height"]),
                width=int(kv["width"]),
                channels=int(kv["channels"]),
                count=int(kv["count"]),
                shards=shards,
                shard_counts=counts,
                generator=kv.get("generator", ""),
                seed=int(kv.get("seed", 0)),
            )
        except (KeyError, ValueError) as err:
            raise IntegrityError(f"malformed manifest: {err}") from err


# ---------------------------------------------------------------------------
# Rasterization


def _arrow_polygons(scale: float, rotation: float) -> list[np.ndarray]:
    """Shaft and head of an arrow as two convex polygons in (row, col) offsets.

    The arrow is built along +x, shifted so its area centroid sits at the
    origin, then rotated so it points along ``(sin(rotation), cos(rotation))``
    in (row, col) coordinates.
    """
    r = scale
    shaft = np.array([[-r, -0.22 * r], [0.15 * r, -0.22 * r], [0.15 * r, 0.22 * r], [-r, 0.22 * r]])
    head = np.array([[0.1 * r, -0.6 * r], [r, 0.0], [0.1 * r, 0.6 * r]])
    areas = np.array([_polygon_area(shaft), _polygon_area(head)])
    cents = np.stack([_polygon_centroid(shaft), _polygon_centroid(head)])
    # shaft and head overlap in a thin strip; the overlap is tiny relative to
    # either part, so the union centroid is close to the area-weighted one
    centroid = (areas[:, None] * cents).sum(0) / areas.sum()
    c, s = math.cos(rotation), math.sin(rotation)
    out = []
    for poly in (shaft, head):
        xy = poly - centroid
        x = xy[:, 0] * c - xy[:, 1] * s
        y = xy[:, 0] * s + xy[:, 1] * c
        out.append(np.stack([y, x], axis=1))  # (row, col)
    return out


def _polygon_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _polygon_centroid(xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    a = cross.sum() / 2
    cx = ((x + np.roll(x, -1)) * cross).sum() / (6 * a)
    cy = ((y + np.roll(y, -1)) * cross).sum() / (6 * a)
    return np.array([cx, cy])


def _inside_convex(rows: np.ndarray, cols: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.ones(rows.shape, dtype=bool)
    sign = None
    n = len(poly)
    for i in range(n):
        r0, c0 = poly[i]
        r1, c1 = poly[(i + 1) % n]
        cross = (c1 - c0) * (rows - r0) - (r1 - r0) * (cols - c0)
        if sign is None:
            # orientation from the polygon itself, so both windings work
            area2 = sum(
                poly[j][1] * poly[(j + 1) % n][0] - poly[(j + 1) % n][1] * poly[j][0]
                for j in range(n)
            )
            sign = 1.0 if area2 > 0 else -1.0
        inside &= sign * cross >= 0
    return inside


def shape_outline(shape: str, scale: float, rotation: float = 0.0) -> list[np.ndarray]:
    """Convex polygons (row, col offsets) whose union is the sprite; circles excluded."""
    r = scale
    if shape == "square":
        h = r / math.sqrt(2)
        return [np.array([[-h, -h], [-h, h], [h, h], [h, -h]])]
    if shape == "triangle":
        # equilateral, apex up, inscribed in the bounding circle, then shifted
        # so the centroid (not the circumcentre) is at the origin; the two
        # coincide for an equilateral triangle
        pts = [(-r, 0.0), (0.5 * r, -r * math.sqrt(3) / 2), (0.5 * r, r * math.sqrt(3) / 2)]
        return [np.array(pts)]
    if shape == "arrow":
        return _arrow_polygons(scale, rotation)
    raise ValueError(f"no polygon outline for {shape!r}")


def rasterize(sprite: SpriteSpec, height: int, width: int, origin=(0, 0)) -> np.ndarray:
    """Boolean coverage of ``sprite`` sampled at pixel centres.

    ``origin`` is the (row, col) of the window's top-left pixel, so a small
    window around the sprite can be rasterized without the full canvas.
    """
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    rows += origin[0]
    cols += origin[1]
    rows = rows + 0.5
    cols = cols + 0.5
    pr, pc = sprite.position
    if sprite.shape == "circle":
        return (rows - pr) ** 2 + (cols - pc) ** 2 <= sprite.scale**2
    cover = np.zeros((height, width), dtype=bool)
    for poly in shape_outline(sprite.shape, sprite.scale, sprite.rotation):
        cover |= _inside_convex(rows - pr, cols - pc, poly)
    return cover


def render(sprites: list[SpriteSpec], background, height: int, width: int):
    """Paint sprites over a flat background; returns (uint8 image, uint8 mask)."""
    img = np.empty((height, width, 3), dtype=np.float64)
    img[:] = background
    mask = np.zeros((height, width), dtype=np.uint8)
    for j, sprite in enumerate(sprites, start=1):
        cover = rasterize(sprite, height, width)
        img[cover] = sprite.color
        mask[cover] = j
    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return image, mask


# ---------------------------------------------------------------------------
# Generators


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for record ``index``; records can be built in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _bright_color(rng) -> tuple[float, float, float]:
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.55, 1.0)
    v = rng.uniform(0.75, 1.0)
    return tuple(float(c) for c in colorsys.hsv_to_rgb(h, s, v))


def _dark_background(rng) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.0, 0.25, size=3))


def _separated(sprite: SpriteSpec, others: list[SpriteSpec]) -> bool:
    for o in others:
        d = math.dist(sprite.position, o.position)
        if d < sprite.scale + o.scale + SEPARATION:
            return False
    return True


def _wrap(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(angle, 2 * math.pi)
    return math.pi if a == -math.pi else a


def aim_angle(src: tuple[float, float], dst: tuple[float, float]) -> float:
    """Angle of the (row, col) displacement ``src -> dst``: atan2(drow, dcol)."""
    return math.atan2(dst[0] - src[0], dst[1] - src[1])


def _arrowworld_scene(rng, size: int):
    """One attempt at an ArrowWorld layout; returns None when placement fails."""
    s = size / 64.0
    unique_shape = BACK_SHAPES[rng.integers(3)]
    shared_shape = [x for x in BACK_SHAPES if x != unique_shape][rng.integers(2)]
    shapes = [shared_shape, shared_shape, unique_shape]
    rng.shuffle(shapes)

    arrow_scale = rng.uniform(7.0, 9.0) * s
    arrow_pos = (rng.uniform(0.72, 0.80) * size, rng.uniform(0.35, 0.65) * size)

    # one back object per horizontal third keeps them spread out as seen
    # from the arrow
    back: list[SpriteSpec] = []
    for third, shape in enumerate(shapes):
        scale = max(MIN_SCALE, rng.uniform(5.0, 7.5) * s)
        lo = max(scale + 1, third * size / 3 + scale / 2)
        hi = min(size - scale - 1, (third + 1) * size / 3 - scale / 2)
        pos = (rng.uniform(scale + 1, 0.42 * size), rng.uniform(lo, hi))
        cand = SpriteSpec(shape, _bright_color(rng), pos, float(scale))
        if not _separated(cand, back):
            return None
        back.append(cand)
    unique_idx = shapes.index(unique_shape)

    # seen from the arrow, back objects must be far apart in angle so the aim
    # is unambiguous for the structure oracle
    angles = [aim_angle(arrow_pos, b.position) for b in back]
    for i in range(3):
        for j in range(i + 1, 3):
            if abs(_wrap(angles[i] - angles[j])) < MIN_AIM_SEPARATION:
                return None

    rotation = angles[unique_idx]
    arrow = SpriteSpec("arrow", _bright_color(rng), arrow_pos, float(arrow_scale), float(rotation))
    if not _separated(arrow, back):
        return None
    sprites = back + [arrow]
    # metadata stays back-to-front: back objects first, arrow last
    return sprites, unique_idx, float(rotation)


def generate_arrowworld(seed: int, n: int, size: int = 64) -> Iterator[SceneRecord]:
    """ArrowWorld scenes: one arrow in front aimed at the uniquely-shaped back object."""
    if n < 1:
        raise ValueError("n must be >= 1")
    for index in range(n):
        rng = record_rng(seed, index)
        for _ in range(MAX_RETRIES):
            scene = _arrowworld_scene(rng, size)
            if scene is not None:
                break
        else:
            raise RuntimeError(f"could not place an ArrowWorld scene for record {index}")
        sprites, unique_idx, rotation = scene
        background = _dark_background(rng)
        image, mask = render(sprites, background, size, size)
        yield SceneRecord(image, mask, sprites, unique_idx, rotation, background)


def generate_multisprite(
    seed: int, n: int, k_objects: tuple[int, int] = (1, 6), size: int = 64
) -> Iterator[SceneRecord]:
    """Flat-background scenes with ``k_objects`` non-overlapping sprites."""
    lo, hi = k_objects
    if not (1 <= lo <= hi <= 6):
        raise ValueError(f"k_objects must lie within [1, 6], got {k_objects}")
    if n < 1:
        raise ValueError("n must be >= 1")
    s = size / 64.0
    for index in range(n):
        rng = record_rng(seed, index)
        while True:
            k = int(rng.integers(lo, hi + 1))
            sprites: list[SpriteSpec] = []
            for _ in range(k):
                for _ in range(MAX_RETRIES):
                    shape = BACK_SHAPES[rng.integers(3)]
                    scale = max(MIN_SCALE, rng.uniform(4.0, 9.0) * s)
                    pos = (
                        rng.uniform(scale + 1, size - scale - 1),
                        rng.uniform(scale + 1, size - scale - 1),
                    )
                    cand = SpriteSpec(shape, _bright_color(rng), pos, float(scale))
                    if _separated(cand, sprites):
                        sprites.append(cand)
                        break
                else:
                    break
            if len(sprites) == k:
                break
        background = _dark_background(rng)
        image, mask = render(sprites, background, size, size)
        yield SceneRecord(image, mask, sprites, background=background)


GENERATORS = {
    "arrowworld": generate_arrowworld,
    "multisprite": generate_multisprite,
}


# ---------------------------------------------------------------------------
# Shards

_LEN = struct.Struct("<I")


def _encode_record(rec: SceneRecord) -> bytes:
    meta = json.dumps(rec.metadata(), sort_keys=True).encode("utf-8")
    return (
        np.ascontiguousarray(rec.image, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(rec.mask, dtype=np.uint8).tobytes()
        + _LEN.pack(len(meta))
        + meta
    )


def write_shards(
    records: Iterable[SceneRecord],
    directory,
    *,
    generator: str = "",
    seed: int = 0,
    records_per_shard: int = RECORDS_PER_SHARD,
    size: tuple[int, int, int] | None = None,
) -> DatasetManifest:
    """Write ``records`` to ``directory`` and return the manifest written alongside."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shards: list[str] = []
    counts: list[int] = []
    height, width, channels = size or (0, 0, 3)
    buf: list[bytes] = []

    def flush():
        name = f"shard-{len(shards):05d}.bin"
        (directory / name).write_bytes(b"".join(buf))
        shards.append(name)
        counts.append(len(buf))
        buf.clear()

    for rec in records:
        h, w, c = rec.image.shape
        if not height:
            height, width, channels = h, w, c
        elif (h, w, c) != (height, width, channels):
            raise ValueError(f"record shape {(h, w, c)} differs from {(height, width, channels)}")
        buf.append(_encode_record(rec))
        if len(buf) == records_per_shard:
            flush()
    if buf:
        flush()

    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        height=height,
        width=width,
        channels=channels,
        count=sum(counts),
        shards=shards,
        shard_counts=counts,
        generator=generator,
        seed=seed,
    )
    (directory / "manifest.txt").write_text(manifest.to_text())
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    manifest = DatasetManifest.from_text(path.read_text())
    if manifest.version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported dataset version {manifest.version}")
    if len(manifest.shard_counts) != len(manifest.shards):
        raise IntegrityError("shard list and shard_counts differ in length")
    if sum(manifest.shard_counts) != manifest.count:
        raise IntegrityError(
            f"manifest count {manifest.count} != sum of shard counts {sum(manifest.shard_counts)}"
        )
    return manifest


def _decode_shard(data: bytes, manifest: DatasetManifest, name: str) -> Iterator[SceneRecord]:
    h, w, c = manifest.height, manifest.width, manifest.channels
    n_img, n_mask = h * w * c, h * w
    pos = 0
    while pos < len(data):
        if pos + n_img + n_mask + _LEN.size > len(data):
            raise IntegrityError(f"{name}: truncated record at byte {pos}")
        image = np.frombuffer(data, np.uint8, n_img, pos).reshape(h, w, c).copy()
        pos += n_img
        mask = np.frombuffer(data, np.uint8, n_mask, pos).reshape(h, w).copy()
        pos += n_mask
        (n_meta,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + n_meta > len(data):
            raise IntegrityError(f"{name}: truncated metadata at byte {pos}")
        try:
            meta = json.loads(data[pos : pos + n_meta].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise IntegrityError(f"{name}: corrupt metadata: {err}") from err
        pos += n_meta
        yield SceneRecord.from_metadata(image, mask, meta)


def read_shards(directory) -> Iterator[SceneRecord]:
    """Stream records back, checking every shard against the manifest counts."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    for name, expected in zip(manifest.shards, manifest.shard_counts):
        data = (directory / name).read_bytes()
        recs = list(_decode_shard(data, manifest, name))
        if len(recs) != expected:
            raise IntegrityError(f"{name}: {len(recs)} records, manifest says {expected}")
        yield from recs


def load_arrays(directory) -> tuple[np.ndarray, np.ndarray]:
    """All images (N, H, W, C) uint8 and masks (N, H, W) uint8 of a dataset."""
    manifest = read_manifest(directory)
    images = np.empty((manifest.count, manifest.height, manifest.width, manifest.channels), np.uint8)
    masks = np.empty((manifest.count, manifest.height, manifest.width), np.uint8)
    for i, rec in enumerate(read_shards(directory)):
        images[i] = rec.image
        masks[i] = rec.mask
    return images, masks

"""Synthetic building-footprint scenes: polygon generation, rasterization, cropping, datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import (
    BBox,
    GeometryError,
    Polygon,
    canonicalize,
    enlarge_bbox,
    is_simple,
    polygon_bbox,
    rasterize_mask,
    shoelace_signed_area,
)

CROP_SIZE = 128
TRAIN_SCALE_RANGE = (1.1, 1.5)
TEST_SCALE = 1.3


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to deterministically render one scene."""

    image_w: int
    image_h: int
    polygon: Polygon
    fill_shade: int
    bg_shade: int
    noise_sigma: float
    edge_jitter: int
    seed: int

    def __post_init__(self):
        if abs(self.fill_shade - self.bg_shade) < 20:
            raise ValueError("fill/bg shades must differ by >= 20 levels")
        bb = polygon_bbox(self.polygon)
        if bb.x_max > self.image_w or bb.y_max > self.image_h:
            raise ValueError("polygon does not fit inside the image")


@dataclass
class CropSample:
    """One 128x128 crop with its canonical ground-truth ring."""

    image: np.ndarray
    gt: Polygon
    source_id: str
    crop_scale: float
    transform: tuple[float, float, float, float]  # (x0, y0, sx, sy): crop = (src - origin) * s
    source_gt: Polygon | None = None
    source_size: tuple[int, int] | None = None
    image_path: str | None = None

    def __post_init__(self):
        if self.image.shape != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"crop must be {CROP_SIZE}x{CROP_SIZE}, got {self.image.shape}")


def gen_rectilinear_polygon(max_vertices: int, grid: int, rng: np.random.Generator,
                            width: int = 192, height: int = 192,
                            diagonal: bool = False,
                            vertex_weights: tuple[float, ...] | None = None,
                            bite_prob: float = 0.0) -> Polygon:
    """Simple rectilinear polygon with grid-snapped vertices, returned canonical.

    Built by cutting pieces out of a base rectangle: a corner notch adds two
    vertices and, with probability bite_prob when four or more vertices are
    still needed, a mid-edge bite adds four, so counts land in
    {4, 6, ..., max_vertices}. vertex_weights optionally skews the
    vertex-count draw (one weight per count, in order); the default is
    uniform. With diagonal=True one convex corner is chamfered afterwards
    (adds a vertex and a 45-degree edge).
    """
    if max_vertices < 4 or max_vertices % 2 != 0:
        raise GeometryError("bad-params", "max_vertices must be even and >= 4")
    if grid < 4:
        raise GeometryError("bad-params", "grid must be >= 4")
    if not 0.0 <= bite_prob <= 1.0:
        raise GeometryError("bad-params", "bite_prob must be in [0, 1]")
    gx = width // grid
    gy = height // grid
    if gx < 8 or gy < 8:
        raise GeometryError("bad-params", "image too small for the requested grid")
    counts = np.arange(4, max_vertices + 1, 2)
    probs = None
    if vertex_weights is not None:
        if len(vertex_weights) != len(counts) or min(vertex_weights) < 0 \
                or sum(vertex_weights) <= 0:
            raise GeometryError("bad-params", "vertex_weights must be one nonnegative "
                                              "weight per vertex count")
        probs = np.asarray(vertex_weights, dtype=float)
        probs = probs / probs.sum()

    target = int(rng.choice(counts, p=probs))
    for _attempt in range(200):
        x0 = grid * int(rng.integers(1, gx - 5))
        x1 = grid * int(rng.integers(x0 // grid + 4, gx))
        y0 = grid * int(rng.integers(1, gy - 5))
        y1 = grid * int(rng.integers(y0 // grid + 4, gy))
        verts: list[tuple[int, int]] = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
        ok = True
        while len(verts) < target:
            remaining = target - len(verts)
            bites = (_bite_candidates(verts, grid)
                     if bite_prob > 0 and remaining >= 4 else [])
            if bites and rng.random() < bite_prob:
                i = bites[int(rng.integers(len(bites)))]
                verts = _bite(verts, i, grid, rng)
                continue
            cands = _notch_candidates(verts, grid)
            if not cands:
                ok = False
                break
            i = cands[int(rng.integers(len(cands)))]
            verts = _notch(verts, i, grid, rng)
        if not ok or len(verts) != target:
            continue
        try:
            p = Polygon(tuple(verts))
        except GeometryError:
            continue
        if shoelace_signed_area(p) == 0 or not is_simple(p):
            continue
        if diagonal:
            chamfered = _chamfer(verts, grid, rng)
            if chamfered is not None:
                p = chamfered
        return canonicalize(p)
    raise GeometryError("generation-failed", "no simple rectilinear polygon after 200 attempts")


def _edge_len(a, b) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _convex(verts, i) -> bool:
    n = len(verts)
    p, v, q = verts[i - 1], verts[i], verts[(i + 1) % n]
    cross = (v[0] - p[0]) * (q[1] - v[1]) - (v[1] - p[1]) * (q[0] - v[0])
    return cross > 0


def _notch_candidates(verts, grid) -> list[int]:
    n = len(verts)
    out = []
    for i in range(n):
        if not _convex(verts, i):
            continue
        if (_edge_len(verts[i - 1], verts[i]) >= 2 * grid
                and _edge_len(verts[i], verts[(i + 1) % n]) >= 2 * grid):
            out.append(i)
    return out


def _notch(verts, i, grid, rng) -> list:
    n = len(verts)
    p, v, q = verts[i - 1], verts[i], verts[(i + 1) % n]
    lin = _edge_len(p, v)
    lout = _edge_len(v, q)
    a = grid * int(rng.integers(1, lin // grid))
    b = grid * int(rng.integers(1, lout // grid))
    din = ((v[0] - p[0]) // lin, (v[1] - p[1]) // lin)
    dout = ((q[0] - v[0]) // lout, (q[1] - v[1]) // lout)
    v1 = (v[0] - a * din[0], v[1] - a * din[1])
    v3 = (v[0] + b * dout[0], v[1] + b * dout[1])
    v2 = (v1[0] + b * dout[0], v1[1] + b * dout[1])
    return verts[:i] + [v1, v2, v3] + verts[i + 1:]


def _bite_candidates(verts, grid) -> list[int]:
    """Edges long enough for a mid-edge rectangular cut with grid margins."""
    n = len(verts)
    return [i for i in range(n)
            if _edge_len(verts[i], verts[(i + 1) % n]) >= 3 * grid]


def _bite(verts, i, grid, rng) -> list:
    """Cut a rectangular bite out of the middle of edge i; adds four vertices.

    Unlike a corner notch, the bite's offset along the edge is not implied by
    the surrounding corners, so recovering it requires localizing the cut.
    """
    n = len(verts)
    a, b = verts[i], verts[(i + 1) % n]
    length = _edge_len(a, b)
    d = ((b[0] - a[0]) // length, (b[1] - a[1]) // length)
    inward = (-d[1], d[0])  # interior lies right of travel on a clockwise ring
    cells = length // grid
    w = grid * int(rng.integers(1, cells - 1))
    off = grid * int(rng.integers(1, cells - w // grid))
    depth = grid * int(rng.integers(1, 3))
    p1 = (a[0] + off * d[0], a[1] + off * d[1])
    p2 = (p1[0] + depth * inward[0], p1[1] + depth * inward[1])
    p3 = (p2[0] + w * d[0], p2[1] + w * d[1])
    p4 = (p1[0] + w * d[0], p1[1] + w * d[1])
    return verts[:i + 1] + [p1, p2, p3, p4] + verts[i + 1:]


def _chamfer(verts, grid, rng) -> Polygon | None:
    idx = [i for i in range(len(verts)) if _convex(verts, i)
           and _edge_len(verts[i - 1], verts[i]) >= 2 * grid
           and _edge_len(verts[i], verts[(i + 1) % len(verts)]) >= 2 * grid]
    if not idx:
        return None
    i = idx[int(rng.integers(len(idx)))]
    p, v, q = verts[i - 1], verts[i], verts[(i + 1) % len(verts)]
    lin, lout = _edge_len(p, v), _edge_len(v, q)
    din = ((v[0] - p[0]) // lin, (v[1] - p[1]) // lin)
    dout = ((q[0] - v[0]) // lout, (q[1] - v[1]) // lout)
    v1 = (v[0] - grid * din[0], v[1] - grid * din[1])
    v2 = (v[0] + grid * dout[0], v[1] + grid * dout[1])
    out = verts[:i] + [v1, v2] + verts[i + 1:]
    try:
        p2 = Polygon(tuple(out))
    except GeometryError:
        return None
    if not is_simple(p2) or shoelace_signed_area(p2) == 0:
        return None
    return p2


def rasterize(spec: SceneSpec) -> np.ndarray:
    """Render the scene to a uint8 gray raster; deterministic for a given seed."""
    rng = np.random.default_rng(spec.seed)
    verts = spec.polygon.vertices
    if spec.edge_jitter > 0:
        for _ in range(50):
            j = spec.edge_jitter
            moved = [(int(min(max(x + rng.integers(-j, j + 1), 0), spec.image_w - 1)),
                      int(min(max(y + rng.integers(-j, j + 1), 0), spec.image_h - 1)))
                     for x, y in verts]
            try:
                cand = Polygon(tuple(moved))
            except GeometryError:
                continue
            if shoelace_signed_area(cand) != 0:
                verts = cand.vertices
                break
    mask = rasterize_mask(Polygon(verts), spec.image_w, spec.image_h, 1)
    img = np.full((spec.image_h, spec.image_w), float(spec.bg_shade))
    img[mask] = float(spec.fill_shade)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def crop_sample(image: np.ndarray, gt: Polygon, bbox: BBox, scale: float = TEST_SCALE,
                rng: np.random.Generator | None = None, source_id: str = "") -> CropSample:
    """Crop an enlarged bbox and resample to 128x128 with nearest-neighbor.

    With an rng the enlargement factor is drawn from U[1.1, 1.5] (training
    mode); otherwise the given scale (1.3 by default, test mode) is used.
    """
    img_h, img_w = image.shape
    if rng is not None:
        scale = float(rng.uniform(*TRAIN_SCALE_RANGE))
    crop = enlarge_bbox(bbox, scale, img_w, img_h)
    cw = crop.x_max - crop.x_min
    ch = crop.y_max - crop.y_min
    sx = CROP_SIZE / cw
    sy = CROP_SIZE / ch
    ix = np.clip(np.floor((np.arange(CROP_SIZE) + 0.5) / sx).astype(int) + crop.x_min, 0, img_w - 1)
    iy = np.clip(np.floor((np.arange(CROP_SIZE) + 0.5) / sy).astype(int) + crop.y_min, 0, img_h - 1)
    out = image[iy][:, ix]

    mapped = []
    for x, y in gt.vertices:
        mx = int(round((x - crop.x_min + 0.5) * sx - 0.5))
        my = int(round((y - crop.y_min + 0.5) * sy - 0.5))
        mapped.append((min(max(mx, 0), CROP_SIZE - 1), min(max(my, 0), CROP_SIZE - 1)))
    cleaned = [v for i, v in enumerate(mapped) if v != mapped[i - 1]]
    if len(set(cleaned)) < 3:
        raise GeometryError("degenerate-after-transform", "mapped ring collapsed below 3 vertices")
    try:
        poly = canonicalize(Polygon(tuple(cleaned)))
    except GeometryError as e:
        raise GeometryError("degenerate-after-transform", str(e)) from e
    return CropSample(image=out, gt=poly, source_id=source_id, crop_scale=scale,
                      transform=(float(crop.x_min), float(crop.y_min), sx, sy),
                      source_gt=gt, source_size=(img_w, img_h))


def crop_to_source(vertices, transform, source_size) -> Polygon:
    """Map crop-coordinate vertices back through the inverse crop affine."""
    x0, y0, sx, sy = transform
    w, h = source_size
    pts = []
    for x, y in vertices:
        ox = int(round((x + 0.5) / sx - 0.5 + x0))
        oy = int(round((y + 0.5) / sy - 0.5 + y0))
        pts.append((min(max(ox, 0), w - 1), min(max(oy, 0), h - 1)))
    cleaned = [v for i, v in enumerate(pts) if v != pts[i - 1]]
    if len(set(cleaned)) < 3:
        raise GeometryError("degenerate-after-transform", "inverse-mapped ring collapsed")
    return Polygon(tuple(cleaned))


@dataclass
class GenParams:
    image_w: int = 192
    image_h: int = 192
    max_vertices: int = 8
    grid: int = 24
    bg_lo: int = 30
    bg_hi: int = 110
    contrast_lo: int = 80
    contrast_hi: int = 120
    noise_sigma: float = 2.0
    edge_jitter: int = 0
    diagonal: bool = False
    vertex_weights: tuple[float, ...] | None = (0.7, 0.2, 0.1)
    bite_prob: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        if d.get("vertex_weights") is not None:
            d = dict(d, vertex_weights=tuple(d["vertex_weights"]))
        return cls(**d)


def _make_sample(gp: GenParams, master_seed: int, split_idx: int, index: int,
                 train_mode: bool, source_id: str) -> tuple[CropSample, np.ndarray]:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(split_idx, index))
    rng = np.random.default_rng(ss)
    for _ in range(50):
        try:
            poly = gen_rectilinear_polygon(gp.max_vertices, gp.grid, rng,
                                           gp.image_w, gp.image_h, diagonal=gp.diagonal,
                                           vertex_weights=gp.vertex_weights,
                                           bite_prob=gp.bite_prob)
            bg = int(rng.integers(gp.bg_lo, gp.bg_hi + 1))
            contrast = int(rng.integers(gp.contrast_lo, gp.contrast_hi + 1))
            if rng.random() < 0.5:
                fill = min(bg + contrast, 255)
            else:
                fill = max(bg - contrast, 0)
                if bg - fill < 20:
                    fill = max(bg - 20, 0)
            spec = SceneSpec(gp.image_w, gp.image_h, poly, fill, bg,
                             gp.noise_sigma, gp.edge_jitter, seed=int(rng.integers(2 ** 31)))
            img = rasterize(spec)
            bbox = polygon_bbox(poly)
            sample = crop_sample(img, poly, bbox, rng=rng) if train_mode \
                else crop_sample(img, poly, bbox, scale=TEST_SCALE)
            sample.source_id = source_id
            return sample, img
        except GeometryError:
            continue
    raise GeometryError("generation-failed", f"sample {source_id} failed after 50 retries")


def write_pgm(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr.astype(np.uint8))
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def _sample_json(sample: CropSample) -> dict:
    return {
        "source_id": sample.source_id,
        "crop_scale": sample.crop_scale,
        "gt": sample.gt.to_json(),
        "transform": list(sample.transform),
        "source_gt": sample.source_gt.to_json() if sample.source_gt else None,
        "source_size": list(sample.source_size) if sample.source_size else None,
    }


def _sample_from_json(obj: dict, image: np.ndarray, image_path: str) -> CropSample:
    return CropSample(
        image=image,
        gt=Polygon.from_json(obj["gt"]),
        source_id=obj["source_id"],
        crop_scale=obj["crop_scale"],
        transform=tuple(obj["transform"]),
        source_gt=Polygon.from_json(obj["source_gt"]) if obj.get("source_gt") else None,
        source_size=tuple(obj["source_size"]) if obj.get("source_size") else None,
        image_path=image_path,
    )


SPLITS = ("train", "val", "test")


def build_dataset(n_train: int, n_val: int, n_test: int, gen_params: GenParams,
                  out_dir: Path, master_seed: int = 0) -> dict:
    """Write PGM+JSON samples and a manifest; fully reproducible from master_seed."""
    out_dir = Path(out_dir)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    manifest = {
        "format_version": 1,
        "master_seed": master_seed,
        "gen_params": asdict(gen_params),
        "splits": {},
    }
    for split_idx, split in enumerate(SPLITS):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(counts[split]):
            sid = f"{split}-{i:05d}"
            sample, _scene = _make_sample(gen_params, master_seed, split_idx, i,
                                          train_mode=(split == "train"), source_id=sid)
            pgm_rel = f"{split}/{sid}.pgm"
            json_rel = f"{split}/{sid}.json"
            write_pgm(out_dir / pgm_rel, sample.image)
            with open(out_dir / json_rel, "w") as f:
                json.dump(_sample_json(sample), f)
            entries.append({"id": sid, "pgm": pgm_rel, "json": json_rel})
        manifest["splits"][split] = entries
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(data_dir: Path) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        return json.load(f)


def load_split(data_dir: Path, split: str) -> list[CropSample]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    samples = []
    for entry in manifest["splits"][split]:
        img = read_pgm(data_dir / entry["pgm"])
        with open(data_dir / entry["json"]) as f:
            obj = json.load(f)
        samples.append(_sample_from_json(obj, img, str(data_dir / entry["pgm"])))
    return samples

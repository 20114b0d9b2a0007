"""Synthetic splice-pair generation with exact ground-truth masks.

A source image is a textured background with a few non-overlapping candidate
regions (ellipses / star polygons with their own texture).  A triplet is
built by cutting one region out of a donor source, transforming it
(scale -> width deformation -> rotation -> luminance -> shift) and pasting
it into a host source:

    foreground pair: (composite, donor)  masks = pasted region / source region
    background pair: (composite, host)   masks = complement of the pasted region
    negative pair:   (donor, host)       all-zero masks, uncorrelated

Pasted-area fractions are constrained to (1%, 50%) and bucketed into
difficult (<=10%), normal (<=25%) and easy (<50%).  Set generation is
deterministic: every attempt derives its own generator from
(master seed, attempt index), so same-seed reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .autodiff import _bilinear_resize
from .errors import (DimensionError, GenerationError, ParameterError,
                     TransformRejected, ValidationError)

SET_KINDS = ("combination", "raw", "shift", "rotation", "scale",
             "luminance", "deformation")
DIFFICULTIES = ("difficult", "normal", "easy")
PAIR_KINDS = ("foreground", "background", "negative")

ROTATION_RANGE = (-30.0, 30.0)
SCALE_RANGE = (0.5, 4.0)
LUMINANCE_RANGE = (-32.0, 32.0)
DEFORM_RANGE = (0.5, 2.0)


@dataclass
class SourceImage:
    """A size×size×3 uint8 image plus binary candidate-region masks."""

    pixels: np.ndarray
    regions: list

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TransformSpec:
    """Sampled transform record; optional fields are None when absent."""

    shift: tuple = (0, 0)
    rotation_deg: float | None = None
    scale: float | None = None
    luminance: float | None = None
    deform_width: float | None = None

    def is_identity(self) -> bool:
        return (self.shift == (0, 0) and self.rotation_deg is None
                and self.scale is None and self.luminance is None
                and self.deform_width is None)

    def geometric(self) -> bool:
        return any(v is not None for v in
                   (self.rotation_deg, self.scale, self.deform_width))

    def to_json(self) -> dict:
        return {"shift": list(self.shift), "rotation_deg": self.rotation_deg,
                "scale": self.scale, "luminance": self.luminance,
                "deform_width": self.deform_width}

    @classmethod
    def from_json(cls, d: dict) -> "TransformSpec":
        return cls(shift=tuple(d["shift"]), rotation_deg=d["rotation_deg"],
                   scale=d["scale"], luminance=d["luminance"],
                   deform_width=d["deform_width"])


@dataclass
class PairRecord:
    """One probe/donor pair with ground truth, fully in memory."""

    pair_id: str
    probe: np.ndarray          # HWC uint8
    donor: np.ndarray
    mask_p: np.ndarray         # (S,S) bool
    mask_d: np.ndarray
    label: str                 # correlated | uncorrelated
    kind: str                  # foreground | background | negative
    difficulty: str
    transform: TransformSpec | None
    area_fraction: float
    seed: int = 0


# ---------------------------------------------------------------------------
# source-image synthesis
# ---------------------------------------------------------------------------


def _value_noise(rng: np.random.Generator, size: int,
                 scales=(4, 8, 16)) -> np.ndarray:
    acc = np.zeros((size, size))
    for s in scales:
        grid = rng.standard_normal((s + 1, s + 1))
        acc += _bilinear_resize(grid, size, size)
    return acc / len(scales)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.empty((size, size, 3))
    base = rng.uniform(40, 215, size=3)
    for c in range(3):
        img[:, :, c] = base[c] + 40.0 * _value_noise(rng, size)
    return img


def _region_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.empty((size, size, 3))
    base = rng.uniform(20, 235, size=3)
    ramp = np.linspace(-20, 20, size)
    direction = rng.integers(2)
    for c in range(3):
        noise = 35.0 * _value_noise(rng, size, scales=(8, 16))
        img[:, :, c] = base[c] + noise + (ramp[:, None] if direction else ramp[None, :])
    return img


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    rx = rng.uniform(0.05, 0.32) * size
    ry = rng.uniform(0.05, 0.32) * size
    cx = rng.uniform(0.15, 0.85) * size
    cy = rng.uniform(0.15, 0.85) * size
    yy, xx = np.mgrid[0:size, 0:size]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _polygon_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    n = int(rng.integers(5, 10))
    cx = rng.uniform(0.2, 0.8) * size
    cy = rng.uniform(0.2, 0.8) * size
    base_r = rng.uniform(0.08, 0.30) * size
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = base_r * rng.uniform(0.55, 1.0, size=n)
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.zeros((size, size), dtype=bool)
    for i in range(n):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = ((y1 > yy) != (y2 > yy)) & (
            xx < (x2 - x1) * (yy - y1) / (y2 - y1) + x1)
        inside ^= crosses
    return inside


def _seed_list(seed) -> list:
    if isinstance(seed, (list, tuple, np.ndarray)):
        return [int(s) for s in seed]
    return [int(seed)]


def synth_base_image(seed, size: int = 256) -> SourceImage:
    """Deterministic textured source image with 2-6 candidate regions.

    Regions are non-overlapping, each with its own texture and an area
    fraction inside (1%, 50%).  ``seed`` is an integer or a sequence of
    integers (a derived seed path).
    """
    for attempt in range(64):
        rng = np.random.default_rng(_seed_list(seed) + [attempt, 0x5eed])
        img = _background(rng, size)
        count = int(rng.integers(2, 7))
        occupied = np.zeros((size, size), dtype=bool)
        regions = []
        for _ in range(count):
            for _trial in range(20):
                mask = (_ellipse_mask(rng, size) if rng.random() < 0.5
                        else _polygon_mask(rng, size))
                frac = mask.mean()
                if 0.01 < frac <= 0.5 and not (occupied & mask).any():
                    break
            else:
                continue
            occupied |= mask
            img[mask] = _region_texture(rng, size)[mask]
            regions.append(mask)
        if regions:
            return SourceImage(np.clip(img, 0, 255).astype(np.uint8), regions)
    raise GenerationError(f"could not synthesize a source image for seed {seed}")


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def sample_transform(rng: np.random.Generator, kind: str,
                     size: int) -> TransformSpec:
    """Draw a transform per set-kind rules.

    ``combination``: shift always, each optional with probability 0.5;
    ``raw``: identity; single-transformation kinds force exactly that
    transform and disable all others.
    """
    if kind not in SET_KINDS:
        raise ParameterError(f"unknown set kind {kind!r}")
    half = size // 2 - 1
    if kind == "raw":
        return TransformSpec()
    if kind == "shift":
        return TransformSpec(shift=_sample_shift(rng, half))
    if kind == "rotation":
        return TransformSpec(rotation_deg=float(rng.uniform(*ROTATION_RANGE)))
    if kind == "scale":
        return TransformSpec(scale=float(rng.uniform(*SCALE_RANGE)))
    if kind == "luminance":
        return TransformSpec(luminance=float(rng.uniform(*LUMINANCE_RANGE)))
    if kind == "deformation":
        return TransformSpec(deform_width=float(rng.uniform(*DEFORM_RANGE)))
    spec = TransformSpec(shift=_sample_shift(rng, half))
    if rng.random() < 0.5:
        spec.rotation_deg = float(rng.uniform(*ROTATION_RANGE))
    if rng.random() < 0.5:
        spec.scale = float(rng.uniform(*SCALE_RANGE))
    if rng.random() < 0.5:
        spec.luminance = float(rng.uniform(*LUMINANCE_RANGE))
    if rng.random() < 0.5:
        spec.deform_width = float(rng.uniform(*DEFORM_RANGE))
    return spec


def _sample_shift(rng: np.random.Generator, half: int) -> tuple:
    return (int(rng.integers(-half, half + 1)),
            int(rng.integers(-half, half + 1)))


def _affine_matrix(spec: TransformSpec, centroid: tuple) -> np.ndarray:
    cx, cy = centroid
    mat = np.eye(3)

    def push(step: np.ndarray) -> None:
        nonlocal mat
        mat = step @ mat

    push(np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=float))
    if spec.scale is not None:
        push(np.diag([spec.scale, spec.scale, 1.0]))
    if spec.deform_width is not None:
        push(np.diag([spec.deform_width, 1.0, 1.0]))
    if spec.rotation_deg is not None:
        t = np.deg2rad(spec.rotation_deg)
        push(np.array([[np.cos(t), -np.sin(t), 0],
                       [np.sin(t), np.cos(t), 0], [0, 0, 1]]))
    push(np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=float))
    dx, dy = spec.shift
    push(np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1]], dtype=float))
    return mat


def apply_transform(pixels: np.ndarray, mask: np.ndarray,
                    spec: TransformSpec) -> tuple[np.ndarray, np.ndarray]:
    """Transform a region (full-canvas pixels + binary mask).

    Geometric changes resample bilinearly around the region centroid
    (nearest neighbour for the mask, re-binarized); luminance adds to all
    channels with clamping; integer shifts are exact copies.  Raises
    :class:`TransformRejected` if the region leaves the canvas entirely.
    """
    if pixels.shape[:2] != mask.shape:
        raise DimensionError("pixels and mask disagree on canvas size")
    if not mask.any():
        raise TransformRejected("empty region")
    size = mask.shape[0]

    if spec.geometric():
        ys, xs = np.nonzero(mask)
        centroid = (xs.mean(), ys.mean())
        inv = np.linalg.inv(_affine_matrix(spec, centroid))
        yy, xx = np.mgrid[0:size, 0:size]
        src_x = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
        src_y = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
        near_x = np.rint(src_x).astype(int)
        near_y = np.rint(src_y).astype(int)
        inside = ((near_x >= 0) & (near_x < size) & (near_y >= 0) & (near_y < size))
        out_mask = np.zeros((size, size), dtype=bool)
        out_mask[inside] = mask[near_y[inside], near_x[inside]]
        out_pixels = _bilinear_sample(pixels, src_x, src_y)
    else:
        dx, dy = int(spec.shift[0]), int(spec.shift[1])
        out_mask = _shift_exact(mask, dx, dy)
        out_pixels = _shift_exact(pixels, dx, dy).astype(float)

    if not out_mask.any():
        raise TransformRejected("region left the canvas")
    if spec.luminance is not None:
        out_pixels = out_pixels + spec.luminance
    out_pixels = np.clip(np.rint(out_pixels), 0, 255).astype(np.uint8)
    return out_pixels, out_mask


def _shift_exact(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    size_y, size_x = arr.shape[:2]
    src_x = slice(max(0, -dx), min(size_x, size_x - dx))
    src_y = slice(max(0, -dy), min(size_y, size_y - dy))
    dst_x = slice(max(0, dx), min(size_x, size_x + dx))
    dst_y = slice(max(0, dy), min(size_y, size_y + dy))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def _bilinear_sample(pixels: np.ndarray, src_x: np.ndarray,
                     src_y: np.ndarray) -> np.ndarray:
    size = pixels.shape[0]
    x0 = np.clip(np.floor(src_x).astype(int), 0, size - 1)
    y0 = np.clip(np.floor(src_y).astype(int), 0, size - 1)
    x1 = np.minimum(x0 + 1, size - 1)
    y1 = np.minimum(y0 + 1, size - 1)
    wx = np.clip(src_x - x0, 0.0, 1.0)[..., None]
    wy = np.clip(src_y - y0, 0.0, 1.0)[..., None]
    img = pixels.astype(float)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# triplets and difficulty
# ---------------------------------------------------------------------------


def classify_difficulty(area_fraction: float) -> str:
    """(1%,10%] difficult, (10%,25%] normal, (25%,50%) easy."""
    if not 0.01 < area_fraction < 0.5:
        raise ValidationError(
            f"area fraction {area_fraction:.4f} outside (0.01, 0.5)")
    if area_fraction <= 0.10:
        return "difficult"
    if area_fraction <= 0.25:
        return "normal"
    return "easy"


def make_triplet(donor_src: SourceImage, region_idx: int,
                 host_src: SourceImage, spec: TransformSpec,
                 base_id: str = "t", seed: int = 0) -> list[PairRecord]:
    """Foreground, background and negative pairs from one paste."""
    region = donor_src.regions[region_idx]
    pixels_t, mask_t = apply_transform(donor_src.pixels, region, spec)
    fraction = float(mask_t.mean())
    if not 0.01 < fraction < 0.5:
        raise TransformRejected(f"pasted area {fraction:.4f} out of bounds")
    difficulty = classify_difficulty(fraction)
    composite = host_src.pixels.copy()
    composite[mask_t] = pixels_t[mask_t]
    zeros = np.zeros_like(mask_t)
    shared = dict(difficulty=difficulty, transform=spec,
                  area_fraction=fraction, seed=seed)
    return [
        PairRecord(f"{base_id}_fg", composite, donor_src.pixels,
                   mask_t, region, "correlated", "foreground", **shared),
        PairRecord(f"{base_id}_bg", composite, host_src.pixels,
                   ~mask_t, ~mask_t, "correlated", "background", **shared),
        PairRecord(f"{base_id}_neg", donor_src.pixels, host_src.pixels,
                   zeros, zeros, "uncorrelated", "negative", **shared),
    ]


# ---------------------------------------------------------------------------
# PNG and manifest I/O
# ---------------------------------------------------------------------------


def save_image_png(arr: np.ndarray, path) -> None:
    Image.fromarray(arr, "RGB").save(path, format="PNG", compress_level=1)


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, "L").save(
        path, format="PNG", compress_level=1)


def save_mask_png_gray(arr: np.ndarray, path) -> None:
    """8-bit grayscale PNG from an already-scaled uint8 array."""
    Image.fromarray(arr.astype(np.uint8), "L").save(
        path, format="PNG", compress_level=1)


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


@dataclass
class SetManifest:
    kind: str
    size: int
    seed: int
    counts: dict
    rows: list = field(default_factory=list)
    path: str | None = None


def generate_set(kind: str, counts, seed: int, out_dir, size: int = 256,
                 pool_size: int = 24, attempt_budget_factor: int = 300) -> SetManifest:
    """Write a full pair set: images, masks and a line-delimited manifest.

    ``counts`` gives the foreground-pair target per difficulty bucket
    (difficult, normal, easy); each accepted paste also yields one
    background and one negative pair.  Buckets are filled by rejection
    resampling with a bounded attempt budget.
    """
    if kind not in SET_KINDS:
        raise ParameterError(f"unknown set kind {kind!r}")
    counts = {"difficult": int(counts[0]), "normal": int(counts[1]),
              "easy": int(counts[2])}
    total = sum(counts.values())
    if total < 1:
        raise ParameterError("need at least one pair")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    pool = [synth_base_image(_derive(seed, 1, i), size) for i in range(pool_size)]
    zero_path = os.path.join("masks", "zero.png")
    save_mask_png(np.zeros((size, size), dtype=bool), os.path.join(out_dir, zero_path))

    needed = dict(counts)
    rows = []
    serial = 0
    budget = attempt_budget_factor * total
    for attempt in range(budget):
        if not any(needed.values()):
            break
        rng = np.random.default_rng([seed, 2, attempt])
        donor_i = int(rng.integers(pool_size))
        host_i = int(rng.integers(pool_size - 1))
        if host_i >= donor_i:
            host_i += 1
        donor_src = pool[donor_i]
        region_idx = int(rng.integers(len(donor_src.regions)))
        spec = sample_transform(rng, kind, size)
        try:
            triplet = make_triplet(donor_src, region_idx, pool[host_i], spec,
                                   base_id=f"t{serial:05d}", seed=attempt)
        except TransformRejected:
            continue
        if needed[triplet[0].difficulty] <= 0:
            continue
        needed[triplet[0].difficulty] -= 1
        rows.extend(_write_triplet(out_dir, triplet, serial, zero_path))
        serial += 1
    if any(needed.values()):
        raise GenerationError(f"bucket targets unreachable, still need {needed}")

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    header = {"set": {"kind": kind, "size": size, "seed": seed,
                      "counts": counts, "format": 1}}
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return SetManifest(kind, size, seed, counts, rows, manifest_path)


def _derive(seed: int, stream: int, index: int) -> list:
    return [int(seed), int(stream), int(index)]


def _write_triplet(out_dir, triplet, serial: int, zero_path: str) -> list:
    base = f"t{serial:05d}"
    paths = {
        "composite": os.path.join("images", f"{base}_c.png"),
        "donor": os.path.join("images", f"{base}_d.png"),
        "host": os.path.join("images", f"{base}_h.png"),
        "fg_p": os.path.join("masks", f"{base}_fg_p.png"),
        "fg_d": os.path.join("masks", f"{base}_fg_d.png"),
        "bg": os.path.join("masks", f"{base}_bg.png"),
    }
    fg, bg, neg = triplet
    save_image_png(fg.probe, os.path.join(out_dir, paths["composite"]))
    save_image_png(fg.donor, os.path.join(out_dir, paths["donor"]))
    save_image_png(bg.donor, os.path.join(out_dir, paths["host"]))
    save_mask_png(fg.mask_p, os.path.join(out_dir, paths["fg_p"]))
    save_mask_png(fg.mask_d, os.path.join(out_dir, paths["fg_d"]))
    save_mask_png(bg.mask_p, os.path.join(out_dir, paths["bg"]))

    plan = [
        (fg, paths["composite"], paths["donor"], paths["fg_p"], paths["fg_d"]),
        (bg, paths["composite"], paths["host"], paths["bg"], paths["bg"]),
        (neg, paths["donor"], paths["host"], zero_path, zero_path),
    ]
    rows = []
    for pair, probe, donor, mask_p, mask_d in plan:
        files = {"probe": probe, "donor": donor, "mask_p": mask_p, "mask_d": mask_d}
        digests = {rel: _sha256(os.path.join(out_dir, rel))
                   for rel in sorted(set(files.values()))}
        rows.append({"id": pair.pair_id, "kind": pair.kind,
                     "difficulty": pair.difficulty, "label": pair.label,
                     "paths": files,
                     "transform": pair.transform.to_json(),
                     "area_fraction": pair.area_fraction,
                     "seed": pair.seed, "digests": digests})
    return rows


def load_manifest(path) -> tuple[dict, list]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "set" not in lines[0]:
        raise ValidationError(f"{path}: not a set manifest")
    return lines[0]["set"], lines[1:]


def dataset_from_manifest(path) -> "PairDataset":
    info, rows = load_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    pairs = []
    for row in rows:
        files = row["paths"]
        pairs.append(PairRecord(
            pair_id=row["id"],
            probe=load_image_png(os.path.join(root, files["probe"])),
            donor=load_image_png(os.path.join(root, files["donor"])),
            mask_p=load_mask_png(os.path.join(root, files["mask_p"])),
            mask_d=load_mask_png(os.path.join(root, files["mask_d"])),
            label=row["label"], kind=row["kind"], difficulty=row["difficulty"],
            transform=TransformSpec.from_json(row["transform"]),
            area_fraction=row["area_fraction"], seed=row["seed"]))
    return PairDataset(pairs)


# ---------------------------------------------------------------------------
# external annotations
# ---------------------------------------------------------------------------


def ingest_annotations(directory, size: int = 256) -> tuple[list, list]:
    """Load images with sidecar region files into SourceImages.

    For ``foo.png`` the sidecar is ``foo.regions.json``::

        {"regions": [{"type": "polygon", "points": [[x, y], ...]},
                     {"type": "rle", "size": [h, w], "counts": [n0, n1, ...]}]}

    Polygon points are in source-image pixel coordinates; RLE counts
    alternate runs of 0s and 1s in row-major order, starting with zeros.
    Images are resized to ``size``; regions below the 1% area floor (or
    above 50%) after resizing are dropped.  Returns (sources, issues) where
    issues is a list of human-readable per-file problems.
    """
    sources, issues = [], []
    names = sorted(os.listdir(directory)) if os.path.isdir(directory) else []
    for name in names:
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        sidecar = os.path.join(directory, stem + ".regions.json")
        if not os.path.exists(sidecar):
            issues.append(f"{name}: no sidecar region file")
            continue
        try:
            with open(sidecar, encoding="utf-8") as fh:
                meta = json.load(fh)
            regions_meta = meta["regions"]
        except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
            issues.append(f"{name}: unparseable sidecar ({exc})")
            continue
        image = Image.open(os.path.join(directory, name)).convert("RGB")
        src_w, src_h = image.size
        pixels = np.asarray(image.resize((size, size), Image.BILINEAR))
        regions = []
        for ri, rmeta in enumerate(regions_meta):
            try:
                mask = _region_from_meta(rmeta, src_w, src_h, size)
            except (KeyError, ValueError, TypeError) as exc:
                issues.append(f"{name}: region {ri} invalid ({exc})")
                continue
            frac = mask.mean()
            if frac <= 0.01:
                issues.append(f"{name}: region {ri} dropped, below 1% floor")
                continue
            if frac > 0.5:
                issues.append(f"{name}: region {ri} dropped, above 50% ceiling")
                continue
            regions.append(mask)
        if regions:
            sources.append(SourceImage(pixels, regions))
        else:
            issues.append(f"{name}: no usable regions")
    if not names:
        issues.append(f"{directory}: empty or missing directory")
    return sources, issues


def _region_from_meta(rmeta: dict, src_w: int, src_h: int, size: int) -> np.ndarray:
    if rmeta["type"] == "polygon":
        pts = np.asarray(rmeta["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError("polygon needs >= 3 [x, y] points")
        xs = pts[:, 0] * (size / src_w)
        ys = pts[:, 1] * (size / src_h)
        yy, xx = np.mgrid[0:size, 0:size]
        inside = np.zeros((size, size), dtype=bool)
        n = len(xs)
        for i in range(n):
            x1, y1, x2, y2 = xs[i], ys[i], xs[(i + 1) % n], ys[(i + 1) % n]
            if y1 == y2:
                continue
            inside ^= ((y1 > yy) != (y2 > yy)) & (
                xx < (x2 - x1) * (yy - y1) / (y2 - y1) + x1)
        return inside
    if rmeta["type"] == "rle":
        h, w = rmeta["size"]
        counts = rmeta["counts"]
        flat = np.zeros(h * w, dtype=bool)
        pos, val = 0, False
        for run in counts:
            if val:
                flat[pos:pos + run] = True
            pos += run
            val = not val
        if pos != h * w:
            raise ValueError(f"rle covers {pos} of {h * w} pixels")
        mask = flat.reshape(h, w)
        idx_y = np.clip((np.arange(size) * h / size).astype(int), 0, h - 1)
        idx_x = np.clip((np.arange(size) * w / size).astype(int), 0, w - 1)
        return mask[idx_y[:, None], idx_x[None, :]]
    raise ValueError(f"unknown region type {rmeta['type']!r}")


# ---------------------------------------------------------------------------
# training datasets
# ---------------------------------------------------------------------------


def downsample_mask(mask: np.ndarray, out_size: int) -> np.ndarray:
    """Majority vote over blocks: block mean strictly above 0.5."""
    factor = mask.shape[0] // out_size
    if factor * out_size != mask.shape[0]:
        raise DimensionError("mask size must be a multiple of the target size")
    blocks = mask.astype(float).reshape(out_size, factor, out_size, factor)
    return blocks.mean(axis=(1, 3)) > 0.5


def one_hot_mask(binary: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(B,r,r) binary -> (B,2,r,r) one-hot, channel 1 = tampered."""
    tampered = binary.astype(dtype)
    return np.stack([1.0 - tampered, tampered], axis=1)


class PairDataset:
    """In-memory pair collection with stratified deterministic sampling."""

    def __init__(self, pairs: list):
        self.pairs = list(pairs)
        self._by_kind = {k: [i for i, p in enumerate(self.pairs) if p.kind == k]
                         for k in PAIR_KINDS}

    def __len__(self) -> int:
        return len(self.pairs)

    def sample_indices(self, rng: np.random.Generator, m: int) -> list:
        """Stratified sample: the batch splits as evenly as possible across
        the pair kinds present (with replacement)."""
        kinds = [k for k in PAIR_KINDS if self._by_kind[k]]
        if not kinds:
            raise ParameterError("dataset has no pairs")
        base, extra = divmod(m, len(kinds))
        out = []
        for i, kind in enumerate(kinds):
            take = base + (1 if i < extra else 0)
            if take:
                pool = np.asarray(self._by_kind[kind])
                out.extend(pool[rng.integers(0, len(pool), size=take)].tolist())
        return out

    def batch(self, indices, mask_size: int) -> dict:
        probes = np.stack([self.pairs[i].probe.transpose(2, 0, 1) for i in indices])
        donors = np.stack([self.pairs[i].donor.transpose(2, 0, 1) for i in indices])
        gt_a = one_hot_mask(np.stack(
            [downsample_mask(self.pairs[i].mask_p, mask_size) for i in indices]))
        gt_b = one_hot_mask(np.stack(
            [downsample_mask(self.pairs[i].mask_d, mask_size) for i in indices]))
        correlated = np.array([self.pairs[i].label == "correlated" for i in indices])
        labels = np.zeros((len(indices), 2))
        labels[np.arange(len(indices)), (~correlated).astype(int)] = 1.0
        return {"probe": probes, "donor": donors, "gt_a": gt_a, "gt_b": gt_b,
                "labels": labels, "correlated": correlated}


def make_toy_dataset(n_triplets: int, size: int = 64, seed: int = 0,
                     kind: str = "combination") -> PairDataset:
    """In-memory triplet set at an arbitrary (8-divisible) canvas size."""
    pool = [synth_base_image(_derive(seed, 11, i), size)
            for i in range(max(6, n_triplets // 2))]
    pairs = []
    serial = 0
    for attempt in range(400 * n_triplets):
        if serial >= n_triplets:
            break
        rng = np.random.default_rng([seed, 12, attempt])
        donor_i = int(rng.integers(len(pool)))
        host_i = int(rng.integers(len(pool) - 1))
        if host_i >= donor_i:
            host_i += 1
        donor_src = pool[donor_i]
        spec = sample_transform(rng, kind, size)
        try:
            pairs.extend(make_triplet(
                donor_src, int(rng.integers(len(donor_src.regions))),
                pool[host_i], spec, base_id=f"toy{serial:04d}", seed=attempt))
            serial += 1
        except TransformRejected:
            continue
    if serial < n_triplets:
        raise GenerationError("could not build the requested toy triplets")
    return PairDataset(pairs)


def make_overfit_pairs(n_pairs: int = 8, size: int = 64, seed: int = 0) -> PairDataset:
    """Fixed foreground pairs whose rectangular regions align to the 8-pixel
    mask grid, so mask downsampling loses nothing."""
    cell = 8
    grid = size // cell
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, 21, i])
        donor_src = synth_base_image(_derive(seed, 22, i), size)
        host_src = synth_base_image(_derive(seed, 23, i), size)
        h_cells = int(rng.integers(2, max(3, grid // 2)))
        w_cells = int(rng.integers(2, max(3, grid // 2)))
        y0 = int(rng.integers(0, grid - h_cells + 1)) * cell
        x0 = int(rng.integers(0, grid - w_cells + 1)) * cell
        region = np.zeros((size, size), dtype=bool)
        region[y0:y0 + h_cells * cell, x0:x0 + w_cells * cell] = True
        dy = int(rng.integers(-y0 // cell, (size - y0 - h_cells * cell) // cell + 1)) * cell
        dx = int(rng.integers(-x0 // cell, (size - x0 - w_cells * cell) // cell + 1)) * cell
        mask_t = _shift_exact(region, dx, dy)
        composite = host_src.pixels.copy()
        shifted = _shift_exact(donor_src.pixels, dx, dy)
        composite[mask_t] = shifted[mask_t]
        pairs.append(PairRecord(
            f"overfit{i:02d}", composite, donor_src.pixels, mask_t, region,
            "correlated", "foreground",
            classify_difficulty(float(mask_t.mean())),
            TransformSpec(shift=(dx, dy)), float(mask_t.mean()), seed=i))
    return PairDataset(pairs)

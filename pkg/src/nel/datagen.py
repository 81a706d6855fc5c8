"""Synthetic data: binary pattern rendering, the faint-edge noise model,
dataset assembly for the edge task, and noisy/clean pairs for denoising.

Every random draw comes from a counter-keyed generator
(np.random.default_rng([seed, stream, a, b])), never from shared mutable RNG
state.  That makes any sample, any epoch's noise, and any split decision
reproducible in isolation, which is what lets training resume bitwise without
serializing generator state.

Noise model for the edge task, applied to a binary pattern I_c:

    I = clip(0.1 * (snr * I_c + I_n) + 0.45),   I_n(p) ~ N(0, 1)

so the background sits at mean 0.45 with std 0.1 and the edge contrast is
0.1 * snr; snr in [1, 2] is the faint regime.  Denoising pairs instead use
noisy = clip(clean + n / 255), n ~ N(0, sigma^2), sigma on the 0..255 scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import filters, pgm
from .errors import ContractError, DataFormatError, DimensionError, GeometryError

DEFAULT_SNRS = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)

# Stream ids for counter-keyed RNG derivation; shared with the trainer.
STREAM_BASE = 1
STREAM_SPLIT = 2
STREAM_NOISE = 3
STREAM_VFLIP = 4
STREAM_CROP = 5
STREAM_GRAY = 6
STREAM_DENOISE = 7
STREAM_EVAL = 8
STREAM_ORDER = 9


def rng_for(seed: int, stream: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *[int(c) for c in counters]])


# ---------------------------------------------------------------------------
# rasterization helpers (binary, no anti-aliasing)


def _draw_line(mask: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> None:
    """Bresenham segment, clipped to the canvas."""
    H, W = mask.shape
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        if 0 <= r < H and 0 <= c < W:
            mask[r, c] = True
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def _draw_polyline(mask: np.ndarray, pts: Sequence, close: bool = False) -> None:
    pts = [(int(round(r)), int(round(c))) for r, c in pts]
    for a, b in zip(pts, pts[1:]):
        _draw_line(mask, a[0], a[1], b[0], b[1])
    if close and len(pts) > 2:
        _draw_line(mask, pts[-1][0], pts[-1][1], pts[0][0], pts[0][1])


def _fill_polygon(mask: np.ndarray, verts: Sequence) -> None:
    """Even-odd fill, sampling at pixel centers."""
    H, W = mask.shape
    rr, cc = np.mgrid[0:H, 0:W]
    py = rr + 0.5
    px = cc + 0.5
    inside = np.zeros((H, W), dtype=bool)
    n = len(verts)
    for i in range(n):
        r0, c0 = verts[i]
        r1, c1 = verts[(i + 1) % n]
        if r0 == r1:
            continue
        crosses = (r0 > py) != (r1 > py)
        xi = (c1 - c0) * (py - r0) / (r1 - r0) + c0
        inside ^= crosses & (px < xi)
    mask |= inside


def _fill_ellipse(mask: np.ndarray, cy: float, cx: float, ry: float, rx: float) -> None:
    H, W = mask.shape
    rr, cc = np.mgrid[0:H, 0:W]
    mask |= ((rr + 0.5 - cy) / ry) ** 2 + ((cc + 0.5 - cx) / rx) ** 2 <= 1.0


def _stroke_circle(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    H, W = mask.shape
    rr, cc = np.mgrid[0:H, 0:W]
    d = np.sqrt((rr + 0.5 - cy) ** 2 + (cc + 0.5 - cx) ** 2)
    mask |= np.abs(d - radius) <= 0.5


def _bezier_points(ctrl: Sequence, samples: int) -> list:
    """De Casteljau evaluation of a quadratic or cubic control polygon."""
    ctrl = [np.asarray(p, dtype=np.float64) for p in ctrl]
    out = []
    for t in np.linspace(0.0, 1.0, samples):
        pts = ctrl
        while len(pts) > 1:
            pts = [(1 - t) * a + t * b for a, b in zip(pts, pts[1:])]
        out.append((pts[0][0], pts[0][1]))
    return out


def _stroke_bezier(mask: np.ndarray, ctrl: Sequence) -> None:
    span = sum(
        abs(a[0] - b[0]) + abs(a[1] - b[1]) for a, b in zip(ctrl, ctrl[1:])
    )
    _draw_polyline(mask, _bezier_points(ctrl, max(int(span * 2), 8)))


# ---------------------------------------------------------------------------
# pattern generators


def render_eval_pattern(size) -> np.ndarray:
    """Fixed evaluation pattern: triangle outline, line segments at several
    angles, an S-shaped cubic curve, and three concentric circles.

    Deterministic (no RNG); strictly binary; reserved for evaluation so that
    trained models are never scored on an image they saw.
    """
    H, W = _as_size(size)
    if H < 64 or W < 64:
        raise GeometryError(f"evaluation pattern needs at least 64x64, got {H}x{W}")
    mask = np.zeros((H, W), dtype=bool)
    s = min(H, W)

    def rc(fr, fc):
        return fr * (H - 1), fc * (W - 1)

    _draw_polyline(mask, [rc(0.08, 0.10), rc(0.16, 0.42), rc(0.42, 0.22)], close=True)
    _draw_polyline(mask, [rc(0.10, 0.55), rc(0.10, 0.90)])
    _draw_polyline(mask, [rc(0.18, 0.55), rc(0.38, 0.90)])
    _draw_polyline(mask, [rc(0.45, 0.55), rc(0.25, 0.90)])
    _draw_polyline(mask, [rc(0.05, 0.50), rc(0.45, 0.50)])
    _stroke_bezier(
        mask,
        [rc(0.55, 0.08), rc(0.52, 0.45), rc(0.95, 0.05), rc(0.92, 0.42)],
    )
    cy, cx = 0.72 * (H - 1), 0.72 * (W - 1)
    for radius in (0.06 * s, 0.12 * s, 0.18 * s):
        _stroke_circle(mask, cy, cx, radius)
    return mask.astype(np.float64)


def _as_size(size) -> tuple:
    if isinstance(size, int):
        return size, size
    H, W = int(size[0]), int(size[1])
    return H, W


def _random_primitive(mask: np.ndarray, rng: np.random.Generator) -> None:
    H, W = mask.shape
    kind = rng.integers(0, 4)
    if kind == 0:  # filled polygon, 3..6 vertices around a random center
        n = int(rng.integers(3, 7))
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        rad = rng.uniform(0.06, 0.22) * min(H, W)
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
        verts = [
            (cy + rad * rng.uniform(0.5, 1.0) * math.sin(a), cx + rad * rng.uniform(0.5, 1.0) * math.cos(a))
            for a in angles
        ]
        _fill_polygon(mask, verts)
    elif kind == 1:  # filled ellipse
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        ry = rng.uniform(0.04, 0.18) * H
        rx = rng.uniform(0.04, 0.18) * W
        _fill_ellipse(mask, cy, cx, ry, rx)
    elif kind == 2:  # open line strip, 2..4 segments
        n = int(rng.integers(3, 6))
        pts = [(rng.uniform(0.05, 0.95) * H, rng.uniform(0.05, 0.95) * W) for _ in range(n)]
        _draw_polyline(mask, pts)
    else:  # quadratic or cubic stroked curve
        n = int(rng.integers(3, 5))
        ctrl = [(rng.uniform(0.05, 0.95) * H, rng.uniform(0.05, 0.95) * W) for _ in range(n)]
        _stroke_bezier(mask, ctrl)


def generate_binary_images(count: int, size, seed: int) -> list:
    """Procedural binary patterns: 2..6 random primitives each, no anti-aliasing.

    Foreground fraction is kept inside (0.005, 0.5) by redrawing with a fresh
    sub-seed when a composition lands outside; everything is derived from
    (seed, image index, attempt), so the output is reproducible bitwise.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    H, W = _as_size(size)
    images = []
    for i in range(count):
        for attempt in range(32):
            rng = rng_for(seed, STREAM_BASE, i, attempt)
            mask = np.zeros((H, W), dtype=bool)
            for _ in range(int(rng.integers(2, 7))):
                _random_primitive(mask, rng)
            frac = mask.mean()
            if 0.005 < frac < 0.5:
                break
        else:  # pragma: no cover - generator parameters keep this unreachable
            mask = np.zeros((H, W), dtype=bool)
            _fill_ellipse(mask, H / 2, W / 2, H / 4, W / 4)
        images.append(mask.astype(np.float64))
    return images


def generate_gray_images(count: int, size, seed: int) -> list:
    """Piecewise-smooth grayscale scenes for the denoising task.

    A soft linear gradient background plus a few constant-level shapes,
    lightly smoothed, so the images contain both flat regions and real edges
    for the edge-preservation loss to protect.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    H, W = _as_size(size)
    images = []
    for i in range(count):
        rng = rng_for(seed, STREAM_GRAY, i)
        rr, cc = np.mgrid[0:H, 0:W]
        a, b = rng.uniform(-0.3, 0.3, size=2)
        img = 0.5 + a * (rr / max(H - 1, 1) - 0.5) + b * (cc / max(W - 1, 1) - 0.5)
        for _ in range(int(rng.integers(2, 6))):
            shape = np.zeros((H, W), dtype=bool)
            _random_primitive(shape, rng)
            img = np.where(shape, rng.uniform(0.05, 0.95), img)
        img = filters.gaussian_blur(img, 0.8)
        images.append(np.clip(img, 0.0, 1.0))
    return images


def extract_labels(binary) -> np.ndarray:
    """Edge labels for a binary pattern: the Canny detector at default settings."""
    return filters.canny(np.asarray(binary, dtype=np.float64))


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def vflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1, :])


def apply_noise_model(clean, snr: float, seed) -> np.ndarray:
    """I = clip(0.1 * (snr * I_c + I_n) + 0.45) with I_n ~ N(0, 1).

    `seed` may be an int, a counter list, or a Generator.
    """
    if snr < 0:
        raise ContractError(f"snr must be >= 0, got {snr}")
    clean = np.asarray(clean, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    return np.clip(0.1 * (snr * clean + noise) + 0.45, 0.0, 1.0)


def add_white_noise(clean, sigma255: float, seed) -> np.ndarray:
    """noisy = clip(clean + n/255), n ~ N(0, sigma255^2); sigma on the 0..255 scale."""
    if sigma255 < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma255}")
    clean = np.asarray(clean, dtype=np.float64)
    if sigma255 == 0:
        return clean.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape) * (sigma255 / 255.0)
    return np.clip(clean + noise, 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    id: str
    input: np.ndarray  # noisy image, float64 in [0,1]
    label: np.ndarray  # bool edge mask, or float64 clean target for denoising
    split: str  # "train" | "test"
    tag: float  # snr (edges) or sigma on the 0..255 scale (denoise)
    source_id: str
    kind: str  # "core" | "noise"
    clean: Optional[np.ndarray] = None  # clean image backing noise re-draws


@dataclass
class DatasetManifest:
    """Everything needed to regenerate a dataset bitwise: generator parameters
    plus the ordered sample records."""

    task: str  # "edges" | "denoise"
    seed: int
    base_count: int
    size: tuple
    snrs: Optional[tuple] = None
    sigmas: Optional[tuple] = None
    hflip: bool = True
    pure_noise_fraction: float = 0.0
    train_frac: float = 0.9
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "seed": self.seed,
            "base_count": self.base_count,
            "size": list(self.size),
            "hflip": self.hflip,
            "pure_noise_fraction": self.pure_noise_fraction,
            "train_frac": self.train_frac,
            "records": self.records,
        }
        if self.snrs is not None:
            d["snrs"] = list(self.snrs)
        if self.sigmas is not None:
            d["sigmas"] = list(self.sigmas)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(
            task=d["task"],
            seed=int(d["seed"]),
            base_count=int(d["base_count"]),
            size=tuple(d["size"]),
            snrs=tuple(d["snrs"]) if "snrs" in d else None,
            sigmas=tuple(d["sigmas"]) if "sigmas" in d else None,
            hflip=bool(d["hflip"]),
            pure_noise_fraction=float(d["pure_noise_fraction"]),
            train_frac=float(d["train_frac"]),
            records=list(d["records"]),
        )


def _snr_tag(snr: float) -> str:
    return format(snr, "g").replace(".", "p")


def plan_edge_dataset(
    base_count: int,
    snrs: Sequence[float] = DEFAULT_SNRS,
    use_hflip: bool = True,
    pure_noise_fraction: float = 0.02,
    train_frac: float = 0.9,
    seed: int = 0,
    size=(256, 256),
) -> DatasetManifest:
    """Arithmetic dataset plan: sample records, counts and split, no pixels.

    Core samples are {identity, horizontal flip} x snr per base image; the
    split is drawn at base-image granularity so no pattern appears on both
    sides.  Pure-noise samples (empty label) are extra training samples on
    top of the core count.
    """
    if base_count < 2:
        raise ContractError(f"base_count must be >= 2 to split train/test, got {base_count}")
    if not snrs:
        raise ContractError("snr list must be non-empty")
    if not (0 < train_frac < 1):
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    if pure_noise_fraction < 0:
        raise ContractError("pure_noise_fraction must be >= 0")
    perm = rng_for(seed, STREAM_SPLIT).permutation(base_count)
    n_train = min(max(int(round(base_count * train_frac)), 1), base_count - 1)
    train_bases = set(int(b) for b in perm[:n_train])
    variants = ("id", "hf") if use_hflip else ("id",)
    records = []
    for b in range(base_count):
        split = "train" if b in train_bases else "test"
        for variant in variants:
            for snr in snrs:
                records.append(
                    {
                        "id": f"b{b:05d}_{variant}_s{_snr_tag(snr)}",
                        "kind": "core",
                        "base": b,
                        "variant": variant,
                        "snr": float(snr),
                        "split": split,
                    }
                )
    n_core = len(records)
    n_noise = math.ceil(pure_noise_fraction * n_core)
    for k in range(n_noise):
        records.append(
            {
                "id": f"noise{k:05d}",
                "kind": "noise",
                "base": -1,
                "variant": "id",
                "snr": 0.0,
                "split": "train",
            }
        )
    return DatasetManifest(
        task="edges",
        seed=seed,
        base_count=base_count,
        size=_as_size(size),
        snrs=tuple(float(s) for s in snrs),
        hflip=use_hflip,
        pure_noise_fraction=pure_noise_fraction,
        train_frac=train_frac,
        records=records,
    )


def build_edge_dataset(
    base_count: int,
    size=(256, 256),
    snrs: Sequence[float] = DEFAULT_SNRS,
    use_hflip: bool = True,
    pure_noise_fraction: float = 0.02,
    train_frac: float = 0.9,
    seed: int = 0,
) -> tuple:
    """Materialize the planned dataset: (manifest, samples).

    Labels come from the Canny extractor on the clean pattern; the horizontal
    flip is applied to pattern and label before noising; noise is the epoch-0
    instantiation of each record's stream.
    """
    manifest = plan_edge_dataset(
        base_count, snrs, use_hflip, pure_noise_fraction, train_frac, seed, size
    )
    return manifest, materialize_edge_samples(manifest)


def materialize_edge_samples(manifest: DatasetManifest, epoch: int = 0) -> list:
    """Regenerate every sample of an edge-task manifest, bitwise deterministic.

    `epoch` selects the noise instantiation; the on-disk dataset and the test
    split always use epoch 0.
    """
    if manifest.task != "edges":
        raise ContractError(f"manifest task is {manifest.task!r}, expected 'edges'")
    H, W = manifest.size
    bases = generate_binary_images(manifest.base_count, (H, W), manifest.seed)
    labels = [extract_labels(b) for b in bases]
    flipped = {}
    samples = []
    for idx, rec in enumerate(manifest.records):
        rng = rng_for(manifest.seed, STREAM_NOISE, epoch, idx)
        if rec["kind"] == "noise":
            clean = np.zeros((H, W), dtype=np.float64)
            label = np.zeros((H, W), dtype=bool)
            noisy = apply_noise_model(clean, 0.0, rng)
            source = rec["id"]
        else:
            b = rec["base"]
            if rec["variant"] == "hf":
                if b not in flipped:
                    flipped[b] = (hflip(bases[b]), hflip(labels[b]))
                clean, label = flipped[b]
            else:
                clean, label = bases[b], labels[b]
            noisy = apply_noise_model(clean, rec["snr"], rng)
            source = f"b{b:05d}"
        samples.append(
            Sample(
                id=rec["id"],
                input=noisy,
                label=label.copy(),
                split=rec["split"],
                tag=rec["snr"],
                source_id=source,
                kind=rec["kind"],
                clean=clean.copy(),
            )
        )
    return samples


def plan_denoise_dataset(
    base_count: int,
    sigmas: Sequence[float] = (15.0, 25.0, 50.0),
    train_frac: float = 0.9,
    seed: int = 0,
    size=(128, 128),
) -> DatasetManifest:
    """Plan for the denoising task: one record per (gray image, sigma)."""
    if base_count < 2:
        raise ContractError(f"base_count must be >= 2 to split train/test, got {base_count}")
    if not sigmas:
        raise ContractError("sigma list must be non-empty")
    if not (0 < train_frac < 1):
        raise ContractError(f"train_frac must be in (0, 1), got {train_frac}")
    perm = rng_for(seed, STREAM_SPLIT).permutation(base_count)
    n_train = min(max(int(round(base_count * train_frac)), 1), base_count - 1)
    train_bases = set(int(b) for b in perm[:n_train])
    records = []
    for b in range(base_count):
        split = "train" if b in train_bases else "test"
        for sigma in sigmas:
            records.append(
                {
                    "id": f"g{b:05d}_sig{_snr_tag(sigma)}",
                    "kind": "core",
                    "base": b,
                    "variant": "id",
                    "sigma": float(sigma),
                    "split": split,
                }
            )
    return DatasetManifest(
        task="denoise",
        seed=seed,
        base_count=base_count,
        size=_as_size(size),
        sigmas=tuple(float(s) for s in sigmas),
        hflip=False,
        pure_noise_fraction=0.0,
        train_frac=train_frac,
        records=records,
    )


def build_denoise_dataset(
    base_count: int,
    size=(128, 128),
    sigmas: Sequence[float] = (15.0, 25.0, 50.0),
    train_frac: float = 0.9,
    seed: int = 0,
) -> tuple:
    manifest = plan_denoise_dataset(base_count, sigmas, train_frac, seed, size)
    return manifest, materialize_denoise_samples(manifest)


def materialize_denoise_samples(manifest: DatasetManifest, epoch: int = 0) -> list:
    if manifest.task != "denoise":
        raise ContractError(f"manifest task is {manifest.task!r}, expected 'denoise'")
    bases = generate_gray_images(manifest.base_count, manifest.size, manifest.seed)
    samples = []
    for idx, rec in enumerate(manifest.records):
        clean = bases[rec["base"]]
        rng = rng_for(manifest.seed, STREAM_DENOISE, epoch, idx)
        noisy = add_white_noise(clean, rec["sigma"], rng)
        samples.append(
            Sample(
                id=rec["id"],
                input=noisy,
                label=clean.copy(),
                split=rec["split"],
                tag=rec["sigma"],
                source_id=f"g{rec['base']:05d}",
                kind="core",
                clean=clean.copy(),
            )
        )
    return samples


def materialize_samples(manifest: DatasetManifest, epoch: int = 0) -> list:
    if manifest.task == "edges":
        return materialize_edge_samples(manifest, epoch)
    return materialize_denoise_samples(manifest, epoch)


def grayscale(rgb) -> np.ndarray:
    """Luma conversion, 0.299 R + 0.587 G + 0.114 B, input (H, W, 3) in [0,1]."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"grayscale expects an (H, W, 3) image, got {arr.shape}")
    return arr @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# dataset directory IO


def save_dataset(root, manifest: DatasetManifest, samples: list) -> None:
    """Write `<root>/{train,test}/<id>_{in,label}.pgm` plus manifest.json."""
    root = Path(root)
    for split in ("train", "test"):
        (root / split).mkdir(parents=True, exist_ok=True)
    for s in samples:
        d = root / s.split
        pgm.write_pgm(d / f"{s.id}_in.pgm", s.input)
        pgm.write_pgm(d / f"{s.id}_label.pgm", s.label)
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return DatasetManifest.from_dict(json.load(fh))
    except FileNotFoundError:
        raise DataFormatError(f"{path}: dataset manifest not found") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed manifest ({exc})") from None


def load_dataset(root) -> tuple:
    """Read a materialized dataset back from disk (8-bit quantized images)."""
    root = Path(root)
    manifest = load_manifest(root)
    samples = []
    for rec in manifest.records:
        d = root / rec["split"]
        noisy = pgm.read_pgm(d / f"{rec['id']}_in.pgm")
        label_img = pgm.read_pgm(d / f"{rec['id']}_label.pgm")
        if manifest.task == "edges":
            label = label_img >= 0.5
            tag = rec["snr"]
        else:
            label = label_img
            tag = rec["sigma"]
        samples.append(
            Sample(
                id=rec["id"],
                input=noisy,
                label=label,
                split=rec["split"],
                tag=tag,
                source_id=rec["id"] if rec["kind"] == "noise" else f"b{rec['base']:05d}",
                kind=rec["kind"],
                clean=None,
            )
        )
    return manifest, samples

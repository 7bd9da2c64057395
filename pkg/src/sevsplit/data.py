"""Two-channel image data: procedural synthesis, ingestion, and patch sampling.

A dataset is a pair of co-registered single-channel frame stacks (one per
structure class).  Frames are synthesized on a torus so that image statistics
are stationary: random crops then have the same population statistics as whole
frames, which the downstream normalization relies on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, IngestionError

STRUCTURE_FAMILIES = ("filaments", "blobs", "rings")
SPLITS = ("train", "val", "test")

# density is expressed as structures per 128x128 pixel area
DENSITY_REFERENCE_AREA = 128 * 128


@dataclass
class ChannelFrameSet:
    """One acquisition: two aligned stacks of single-channel frames."""

    name: str
    frames_c0: list
    frames_c1: list
    pixel_clip_quantile: float | None = None
    # (train, val, test) frame counts; None means the whole set is usable
    # as training data and has no held-out splits.
    split_counts: tuple | None = None

    def __post_init__(self):
        if len(self.frames_c0) != len(self.frames_c1):
            raise ConfigurationError(
                f"channel stacks differ in length: {len(self.frames_c0)} vs {len(self.frames_c1)}"
            )
        if not self.frames_c0:
            raise ConfigurationError("frame set is empty")
        for i, (a, b) in enumerate(zip(self.frames_c0, self.frames_c1)):
            if a.ndim != 2 or b.ndim != 2:
                raise ConfigurationError(f"frame {i} is not 2-D")
            if a.shape != b.shape:
                raise ConfigurationError(
                    f"frame {i} shape mismatch between channels: {a.shape} vs {b.shape}"
                )
            if not (np.isfinite(a).all() and np.isfinite(b).all()):
                raise ConfigurationError(f"frame {i} contains non-finite values")
        if self.split_counts is not None:
            counts = tuple(int(c) for c in self.split_counts)
            if len(counts) != 3 or any(c < 0 for c in counts):
                raise ConfigurationError(f"bad split counts {self.split_counts}")
            if sum(counts) != len(self.frames_c0):
                raise ConfigurationError(
                    f"split counts {counts} do not sum to frame count {len(self.frames_c0)}"
                )
            self.split_counts = counts

    def __len__(self):
        return len(self.frames_c0)

    def split_range(self, split: str) -> range:
        """Frame index range for a named split."""
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}, expected one of {SPLITS}")
        if self.split_counts is None:
            if split != "train":
                raise ConfigurationError(
                    f"frame set {self.name!r} has no splits; only 'train' is available"
                )
            return range(len(self))
        tr, va, te = self.split_counts
        start = {"train": 0, "val": tr, "test": tr + va}[split]
        count = {"train": tr, "val": va, "test": te}[split]
        return range(start, start + count)

    def subset(self, split: str) -> "ChannelFrameSet":
        """A new frame set holding only the frames of one split."""
        r = self.split_range(split)
        if len(r) == 0:
            raise ConfigurationError(f"split {split!r} of {self.name!r} is empty")
        return ChannelFrameSet(
            name=f"{self.name}/{split}",
            frames_c0=[self.frames_c0[i] for i in r],
            frames_c1=[self.frames_c1[i] for i in r],
            pixel_clip_quantile=self.pixel_clip_quantile,
        )


@dataclass
class SynthConfig:
    """Parameters of the procedural two-channel dataset generator."""

    seed: int = 0
    frame_size: tuple = (128, 128)
    frames_per_split: tuple = (24, 4, 8)
    structure_family_c0: str = "filaments"
    structure_family_c1: str = "blobs"
    density_c0: float = 22.0
    density_c1: float = 48.0
    intensity_scale_c0: float = 60.0
    intensity_scale_c1: float = 120.0
    background_level: float = 5.0

    def validate(self):
        problems = []
        h, w = self.frame_size
        if not (isinstance(h, int) and isinstance(w, int)) or h < 8 or w < 8:
            problems.append(f"frame_size must be integers >= 8, got {self.frame_size}")
        if len(self.frames_per_split) != 3 or any(int(c) < 0 for c in self.frames_per_split):
            problems.append(f"frames_per_split must be 3 nonnegative counts, got {self.frames_per_split}")
        elif sum(self.frames_per_split) == 0:
            problems.append("frames_per_split sums to zero")
        for label, fam in (("c0", self.structure_family_c0), ("c1", self.structure_family_c1)):
            if fam not in STRUCTURE_FAMILIES:
                problems.append(f"structure_family_{label} {fam!r} not in {STRUCTURE_FAMILIES}")
        if self.structure_family_c0 == self.structure_family_c1:
            problems.append("the two channels must use different structure families")
        for label, val in (
            ("density_c0", self.density_c0),
            ("density_c1", self.density_c1),
        ):
            if val < 0:
                problems.append(f"{label} must be nonnegative, got {val}")
        for label, val in (
            ("intensity_scale_c0", self.intensity_scale_c0),
            ("intensity_scale_c1", self.intensity_scale_c1),
        ):
            if val <= 0:
                problems.append(f"{label} must be positive, got {val}")
        if self.background_level < 0:
            problems.append(f"background_level must be nonnegative, got {self.background_level}")
        return problems


@dataclass
class PatchSpec:
    """Patch geometry for crop sampling (training) and tiling (inference)."""

    patch_size: int = 48
    stride: int = 32
    split: str = "train"

    def validate(self, min_frame_dim: int | None = None):
        problems = []
        if self.patch_size < 1:
            problems.append(f"patch_size must be >= 1, got {self.patch_size}")
        if not (1 <= self.stride <= self.patch_size):
            problems.append(
                f"stride must be in [1, patch_size], got stride={self.stride} patch_size={self.patch_size}"
            )
        if self.split not in SPLITS:
            problems.append(f"split {self.split!r} not in {SPLITS}")
        if min_frame_dim is not None and self.patch_size > min_frame_dim:
            problems.append(
                f"patch_size {self.patch_size} exceeds smallest frame dimension {min_frame_dim}"
            )
        return problems


# ---------------------------------------------------------------------------
# structure renderers (all toroidal: content wraps at the frame edges)
# ---------------------------------------------------------------------------


def _render_filaments(rng, shape, count):
    """Curvy line segments drawn by near-ballistic random walks."""
    h, w = shape
    canvas = np.zeros(shape, np.float32)
    n_steps = int(round(1.5 * (h + w) / 2))
    for _ in range(count):
        y0 = rng.uniform(0, h)
        x0 = rng.uniform(0, w)
        heading = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.8, 1.0)
        angles = heading + np.cumsum(rng.normal(0.0, 0.15, n_steps))
        ys = y0 + np.cumsum(np.sin(angles))
        xs = x0 + np.cumsum(np.cos(angles))
        iy = np.round(ys).astype(int) % h
        ix = np.round(xs).astype(int) % w
        np.add.at(canvas, (iy, ix), amp)
    return gaussian_filter(canvas, sigma=1.1, mode="wrap")


def _toroidal_distance(yy, xx, cy, cx, shape):
    h, w = shape
    dy = np.abs(yy - cy)
    dy = np.minimum(dy, h - dy)
    dx = np.abs(xx - cx)
    dx = np.minimum(dx, w - dx)
    return np.sqrt(dy * dy + dx * dx)


def _render_blobs(rng, shape, count):
    """Soft-edged disks."""
    h, w = shape
    canvas = np.zeros(shape, np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(2.0, 4.5)
        amp = rng.uniform(0.8, 1.0)
        d = _toroidal_distance(yy, xx, cy, cx, shape)
        canvas += amp * np.clip((radius - d) / 2.0 + 0.5, 0.0, 1.0)
    return canvas


def _render_rings(rng, shape, count):
    """Annuli with a Gaussian radial profile."""
    h, w = shape
    canvas = np.zeros(shape, np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(4.0, 8.0)
        amp = rng.uniform(0.8, 1.0)
        d = _toroidal_distance(yy, xx, cy, cx, shape)
        canvas += amp * np.exp(-((d - radius) ** 2) / (2 * 1.2**2))
    return canvas


_RENDERERS = {
    "filaments": _render_filaments,
    "blobs": _render_blobs,
    "rings": _render_rings,
}


def _structure_count(density, shape):
    return int(round(density * (shape[0] * shape[1]) / DENSITY_REFERENCE_AREA))


def synthesize_dataset(cfg: SynthConfig) -> ChannelFrameSet:
    """Generate a deterministic two-channel dataset from a config.

    Channel intensities are background + scale * structures, nonnegative
    float32.  The same config always produces bit-identical frames.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.frame_size)
    n_frames = sum(cfg.frames_per_split)

    def render_stack(family, density, scale):
        renderer = _RENDERERS[family]
        count = _structure_count(density, shape)
        stack = []
        for _ in range(n_frames):
            canvas = renderer(rng, shape, count)
            stack.append((scale * canvas + cfg.background_level).astype(np.float32))
        return stack

    frames_c0 = render_stack(cfg.structure_family_c0, cfg.density_c0, cfg.intensity_scale_c0)
    frames_c1 = render_stack(cfg.structure_family_c1, cfg.density_c1, cfg.intensity_scale_c1)
    return ChannelFrameSet(
        name=f"synth-seed{cfg.seed}",
        frames_c0=frames_c0,
        frames_c1=frames_c1,
        split_counts=tuple(int(c) for c in cfg.frames_per_split),
    )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _clip_threshold(fs: ChannelFrameSet, quantile: float) -> float:
    """Global clip threshold from the training split, both channels pooled.

    Uses the 'lower' quantile (an actual data value) so that clipping is
    exactly idempotent: re-clipping already-clipped data changes nothing.
    """
    r = fs.split_range("train") if fs.split_counts else range(len(fs))
    pixels = np.concatenate(
        [fs.frames_c0[i].ravel() for i in r] + [fs.frames_c1[i].ravel() for i in r]
    )
    return float(np.quantile(pixels, quantile, method="lower"))


def clip_frames(fs: ChannelFrameSet, quantile: float) -> ChannelFrameSet:
    """Upper-clip every pixel (all splits) at the train-split quantile."""
    if not (0 < quantile <= 1):
        raise ConfigurationError(f"clip quantile must be in (0, 1], got {quantile}")
    thr = _clip_threshold(fs, quantile)
    return ChannelFrameSet(
        name=fs.name,
        frames_c0=[np.minimum(f, thr).astype(f.dtype) for f in fs.frames_c0],
        frames_c1=[np.minimum(f, thr).astype(f.dtype) for f in fs.frames_c1],
        pixel_clip_quantile=quantile,
        split_counts=fs.split_counts,
    )


def _load_tiff(path: Path):
    import tifffile

    try:
        arr = tifffile.imread(str(path))
    except Exception as e:  # noqa: BLE001 - report any reader failure uniformly
        raise IngestionError(f"cannot read TIFF {path}: {e}") from e
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 2:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise IngestionError(
            f"{path}: expected a 2-channel stack shaped (frames, 2, H, W), got {arr.shape}"
        )
    frames_c0 = [np.asarray(f, np.float32) for f in arr[:, 0]]
    frames_c1 = [np.asarray(f, np.float32) for f in arr[:, 1]]
    return path.stem, frames_c0, frames_c1, None


def _load_array_dir(path: Path):
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"{path} has no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(f"{manifest_path} is not valid JSON: {e}") from e
    name = manifest.get("name", path.name)
    entries = manifest.get("frames")
    if not entries:
        raise IngestionError(f"{manifest_path} lists no frames")
    frames_c0, frames_c1 = [], []
    for i, entry in enumerate(entries):
        try:
            frames_c0.append(np.asarray(np.load(path / entry["c0"]), np.float32))
            frames_c1.append(np.asarray(np.load(path / entry["c1"]), np.float32))
        except (KeyError, OSError, ValueError) as e:
            raise IngestionError(f"frame {i} of {name}: {e}") from e
    split_counts = manifest.get("split_counts")
    if split_counts is not None:
        split_counts = tuple(int(c) for c in split_counts)
    return name, frames_c0, frames_c1, split_counts


def load_dataset(path, clip_quantile: float | None = None) -> ChannelFrameSet:
    """Load a two-channel dataset from a TIFF stack or an array directory.

    Supported layouts: a multipage TIFF shaped (frames, 2, H, W) or (2, H, W);
    or a directory with a manifest.json mapping frame files to the acquisition.
    If clip_quantile is given, every pixel above that global train-split
    quantile is set to the threshold value.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path} does not exist")
    if path.is_dir():
        name, frames_c0, frames_c1, split_counts = _load_array_dir(path)
    else:
        name, frames_c0, frames_c1, split_counts = _load_tiff(path)

    for i, (a, b) in enumerate(zip(frames_c0, frames_c1)):
        if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
            raise IngestionError(f"frame {i} of {name}: channel shape mismatch")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise IngestionError(f"frame {i} of {name} contains NaN or infinite pixels")

    fs = ChannelFrameSet(
        name=name, frames_c0=frames_c0, frames_c1=frames_c1, split_counts=split_counts
    )
    if clip_quantile is not None:
        fs = clip_frames(fs, clip_quantile)
    return fs


def save_dataset(fs: ChannelFrameSet, out_dir, extra_meta: dict | None = None) -> Path:
    """Write a frame set as an array directory that load_dataset can read."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (a, b) in enumerate(zip(fs.frames_c0, fs.frames_c1)):
        f0 = f"frame_{i:04d}_c0.npy"
        f1 = f"frame_{i:04d}_c1.npy"
        np.save(out_dir / f0, a)
        np.save(out_dir / f1, b)
        entries.append({"c0": f0, "c1": f1})
    manifest = {
        "format_version": 1,
        "name": fs.name,
        "frames": entries,
        "split_counts": list(fs.split_counts) if fs.split_counts else None,
        "pixel_clip_quantile": fs.pixel_clip_quantile,
        "fingerprint": fingerprint(fs),
    }
    if extra_meta:
        manifest.update(extra_meta)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def fingerprint(fs: ChannelFrameSet) -> str:
    """Stable content hash of a frame set (pixels, name, and split layout)."""
    h = hashlib.sha256()
    h.update(fs.name.encode())
    h.update(str(fs.split_counts).encode())
    for a, b in zip(fs.frames_c0, fs.frames_c1):
        for f in (a, b):
            h.update(str(f.shape).encode())
            h.update(np.ascontiguousarray(f, np.float32).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------


class PatchSampler:
    """Vectorized random aligned crop sampler over one split of a frame set.

    Precomputes sliding windows once; every batch draw is then one fancy
    index.  Frames in the split must share a single shape.
    """

    def __init__(self, fs: ChannelFrameSet, split: str, patch_size: int):
        idx = fs.split_range(split)
        if len(idx) == 0:
            raise ConfigurationError(f"split {split!r} of {fs.name!r} is empty")
        shapes = {fs.frames_c0[i].shape for i in idx}
        if len(shapes) != 1:
            raise ConfigurationError(f"frames in split {split!r} have mixed shapes {shapes}")
        h, w = shapes.pop()
        if patch_size > min(h, w):
            raise ConfigurationError(f"patch_size {patch_size} exceeds frame size {(h, w)}")
        stack0 = np.stack([fs.frames_c0[i] for i in idx]).astype(np.float32)
        stack1 = np.stack([fs.frames_c1[i] for i in idx]).astype(np.float32)
        self._win0 = sliding_window_view(stack0, (patch_size, patch_size), axis=(1, 2))
        self._win1 = sliding_window_view(stack1, (patch_size, patch_size), axis=(1, 2))
        self.n_frames = stack0.shape[0]
        self.n_y = h - patch_size + 1
        self.n_x = w - patch_size + 1
        self.patch_size = patch_size

    def sample(self, rng: np.random.Generator, count: int):
        """Draw `count` aligned patch pairs; returns two (count, P, P) arrays."""
        fi = rng.integers(0, self.n_frames, count)
        yi = rng.integers(0, self.n_y, count)
        xi = rng.integers(0, self.n_x, count)
        return (
            np.ascontiguousarray(self._win0[fi, yi, xi]),
            np.ascontiguousarray(self._win1[fi, yi, xi]),
        )


def extract_patches(fs: ChannelFrameSet, spec: PatchSpec, rng_seed: int):
    """Yield an endless deterministic stream of aligned (c0, c1) crops."""
    problems = spec.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    sampler = PatchSampler(fs, spec.split, spec.patch_size)
    rng = np.random.default_rng(rng_seed)
    while True:
        a, b = sampler.sample(rng, 1)
        yield a[0], b[0]

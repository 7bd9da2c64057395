"""Deployment: estimate the mixing ratio of an acquisition and unmix its frames.

An acquisition is a set of superimposed frames assumed to share one true
mixing ratio.  The pipeline standardizes the acquisition by its own pooled
statistics, runs the regressor on every tile, aggregates the estimates,
then runs both generators tile-wise (averaging several noise-perturbed
passes) and stitches full frames with feathered overlaps.

Multi-step refinement is available: starting from the estimated severity the
schedule decreases linearly to zero, each intermediate image is blended from
the previous one and the fresh prediction, and is re-standardized before the
next network call.  One step is the default and reduces to direct prediction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import PatchSpec
from .errors import ConfigurationError
from .mixing import NoiseConfig, validate_ratio
from .nets import ModelBundle
from .scin import denormalize_target

AGGREGATION_METHODS = ("mean", "median", "mode", "wgt_sum", "wgt_prod", "fixed")
MODE_BIN_WIDTH = 0.01
_FORWARD_CHUNK = 256


@dataclass
class AcquisitionInput:
    """Superimposed frames captured under one condition (one shared t)."""

    name: str
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise ConfigurationError("acquisition has no frames")
        dtypes = {np.asarray(f).dtype for f in self.frames}
        if len(dtypes) != 1:
            raise ConfigurationError(f"acquisition frames have mixed dtypes {dtypes}")
        for i, f in enumerate(self.frames):
            if np.asarray(f).ndim != 2:
                raise ConfigurationError(f"frame {i} is not 2-D")


@dataclass
class InferenceConfig:
    aggregation: str = "mean"
    fixed_t: float | None = None
    mmse_count: int = 10
    steps: int = 1
    tile: PatchSpec = field(default_factory=lambda: PatchSpec(patch_size=48, stride=32))
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    # False reproduces the no-aggregation ablation: each frame keeps the mean
    # of its own tile estimates instead of sharing one acquisition-level t.
    aggregate_across_frames: bool = True

    def validate(self):
        problems = []
        if self.aggregation not in AGGREGATION_METHODS:
            problems.append(f"aggregation {self.aggregation!r} not in {AGGREGATION_METHODS}")
        if self.aggregation == "fixed":
            if self.fixed_t is None:
                problems.append("aggregation 'fixed' requires fixed_t")
            elif not (0.0 <= self.fixed_t <= 1.0):
                problems.append(f"fixed_t must be in [0, 1], got {self.fixed_t}")
        if self.mmse_count < 1:
            problems.append(f"mmse_count must be >= 1, got {self.mmse_count}")
        if self.steps < 1:
            problems.append(f"steps must be >= 1, got {self.steps}")
        problems += self.tile.validate()
        problems += self.noise.validate()
        return problems


@dataclass
class UnmixResult:
    c0_hat: list
    c1_hat: list
    t_estimate: float
    per_patch_t: np.ndarray
    per_frame_t: np.ndarray
    config: dict


# ---------------------------------------------------------------------------
# tiling and stitching
# ---------------------------------------------------------------------------


def tile_positions(length: int, patch_size: int, stride: int) -> list:
    """Grid offsets covering [0, length); the last tile is anchored to the end."""
    if patch_size > length:
        raise ConfigurationError(f"tile size {patch_size} exceeds frame extent {length}")
    pos = list(range(0, length - patch_size + 1, stride))
    if pos[-1] != length - patch_size:
        pos.append(length - patch_size)
    return pos


def tile_frame(frame: np.ndarray, patch_size: int, stride: int):
    """Cut one frame into overlapping tiles; returns (tiles, (y, x) offsets)."""
    frame = np.asarray(frame, np.float32)
    ys = tile_positions(frame.shape[0], patch_size, stride)
    xs = tile_positions(frame.shape[1], patch_size, stride)
    tiles = np.stack([frame[y : y + patch_size, x : x + patch_size] for y in ys for x in xs])
    positions = [(y, x) for y in ys for x in xs]
    return tiles, positions


def feather_weights(patch_size: int, overlap: int) -> np.ndarray:
    """Separable linear ramp going to zero at tile borders inside overlaps."""
    if not (0 <= overlap < patch_size):
        raise ConfigurationError(f"overlap must be in [0, patch_size), got {overlap}")
    i = np.arange(patch_size, dtype=np.float64)
    ramp = np.minimum(np.minimum(i + 1, patch_size - i), overlap + 1) / (overlap + 1)
    return np.outer(ramp, ramp)


def stitch_tiles(tiles, positions, frame_shape, patch_size: int, stride: int) -> np.ndarray:
    """Blend overlapping tiles back into a frame with feathered weights.

    Tiles passed through unchanged reassemble the original frame exactly
    (float64 accumulation, then one cast back to float32).
    """
    weights = feather_weights(patch_size, patch_size - stride)
    num = np.zeros(frame_shape, np.float64)
    den = np.zeros(frame_shape, np.float64)
    for tile, (y, x) in zip(tiles, positions):
        num[y : y + patch_size, x : x + patch_size] += weights * tile
        den[y : y + patch_size, x : x + patch_size] += weights
    if not (den > 0).all():
        raise ConfigurationError("tiling does not cover every pixel")
    return (num / den).astype(np.float32)


# ---------------------------------------------------------------------------
# acquisition-level normalization and ratio estimation
# ---------------------------------------------------------------------------


def normalize_acquisition(acq: AcquisitionInput):
    """Standardize all frames by the acquisition-wide pixel mean and std.

    Returns (normalized frames, mean, std).  This matches the per-t table
    standardization used in training because the table enforces unit
    statistics for every ratio.
    """
    pixels = np.concatenate([np.asarray(f, np.float64).ravel() for f in acq.frames])
    mean = float(pixels.mean())
    std = float(pixels.std())
    if std == 0.0:
        raise ConfigurationError(f"acquisition {acq.name!r} is constant; cannot standardize")
    frames_norm = [
        ((np.asarray(f, np.float32) - np.float32(mean)) / np.float32(std)) for f in acq.frames
    ]
    return frames_norm, mean, std


def _net_forward_chunked(net, tiles: np.ndarray, severity: np.ndarray | None = None):
    outs = []
    with torch.no_grad():
        for lo in range(0, len(tiles), _FORWARD_CHUNK):
            hi = lo + _FORWARD_CHUNK
            x = torch.from_numpy(tiles[lo:hi, None])
            if severity is None:
                outs.append(net(x).numpy())
            else:
                outs.append(net(x, torch.from_numpy(severity[lo:hi])).numpy()[:, 0])
    return np.concatenate(outs)


def estimate_t(frames_norm: list, reg, tile: PatchSpec) -> np.ndarray:
    """Per-tile ratio estimates over the whole acquisition (flat array).

    Frames are forwarded one at a time so that identical frames always yield
    identical estimates (batched CPU convolutions are not bitwise stable
    across batch positions).
    """
    outs = []
    for f in frames_norm:
        t, _ = tile_frame(f, tile.patch_size, tile.stride)
        outs.append(_net_forward_chunked(reg, t))
    return np.concatenate(outs).astype(np.float64)


def _tiles_per_frame(frames, tile: PatchSpec):
    counts = []
    for f in frames:
        ys = tile_positions(f.shape[0], tile.patch_size, tile.stride)
        xs = tile_positions(f.shape[1], tile.patch_size, tile.stride)
        counts.append(len(ys) * len(xs))
    return counts


def aggregate(per_patch_t, method: str, weight_maps=None, t_maps=None) -> float:
    """Collapse per-tile estimates into one acquisition-level ratio.

    mean/median/mode work on the flat estimate array (mode = argmax of a
    0.01-wide histogram).  The weighted methods average a per-pixel t map
    under nonnegative per-pixel weights; callers build both maps from rough
    channel estimates.  Zero total weight falls back to the mean.
    """
    per_patch_t = np.asarray(per_patch_t, np.float64)
    if per_patch_t.size == 0 and method not in ("wgt_sum", "wgt_prod"):
        raise ConfigurationError("no estimates to aggregate")
    if method == "mean":
        return float(per_patch_t.mean())
    if method == "median":
        return float(np.median(per_patch_t))
    if method == "mode":
        edges = np.arange(0.0, 1.0 + MODE_BIN_WIDTH, MODE_BIN_WIDTH)
        counts, _ = np.histogram(per_patch_t, bins=edges)
        k = int(np.argmax(counts))
        return float((edges[k] + edges[k + 1]) / 2.0)
    if method in ("wgt_sum", "wgt_prod"):
        if weight_maps is None or t_maps is None:
            raise ConfigurationError(f"aggregation {method!r} needs weight and t maps")
        total_w = 0.0
        total_wt = 0.0
        for w, tm in zip(weight_maps, t_maps):
            w = np.clip(np.asarray(w, np.float64), 0.0, None)
            total_w += w.sum()
            total_wt += (w * np.asarray(tm, np.float64)).sum()
        if total_w <= 0.0:
            if per_patch_t.size == 0:
                raise ConfigurationError("all weights zero and no estimates to fall back on")
            warnings.warn("all aggregation weights are zero; falling back to mean")
            return float(per_patch_t.mean())
        return float(total_wt / total_w)
    raise ConfigurationError(f"unknown aggregation method {method!r}")


def _paint_t_maps(frames_norm, per_patch_t, tile: PatchSpec):
    """Per-pixel t maps: each tile's estimate painted and feather-blended."""
    maps = []
    i = 0
    for f in frames_norm:
        tiles, positions = tile_frame(f, tile.patch_size, tile.stride)
        const = np.ones_like(tiles)
        vals = per_patch_t[i : i + len(positions)]
        i += len(positions)
        painted = const * np.asarray(vals, np.float32)[:, None, None]
        maps.append(
            stitch_tiles(painted, positions, f.shape, tile.patch_size, tile.stride)
        )
    return maps


# ---------------------------------------------------------------------------
# unmixing
# ---------------------------------------------------------------------------


def _predict_channel(gen, tiles, severity_per_tile, cfg: InferenceConfig, rng):
    """MMSE-averaged generator prediction on a stack of tiles."""
    acc = np.zeros(tiles.shape, np.float64)
    for _ in range(cfg.mmse_count):
        x = tiles
        if cfg.noise.enabled and cfg.noise.epsilon > 0:
            scale = (severity_per_tile * cfg.noise.epsilon).astype(np.float32)
            x = tiles + scale[:, None, None] * rng.standard_normal(tiles.shape).astype(np.float32)
        acc += _net_forward_chunked(gen, x, severity_per_tile)
    return (acc / cfg.mmse_count).astype(np.float32)


def _resolve_frame_ratios(acq, frames_norm, bundle, cfg, frame_t_overrides):
    """Per-frame severity sources: overrides, fixed value, or the regressor."""
    n = len(frames_norm)
    if frame_t_overrides is not None:
        per_frame = np.asarray(frame_t_overrides, np.float64)
        if per_frame.shape != (n,):
            raise ConfigurationError(
                f"frame_t_overrides must have one value per frame ({n}), got {per_frame.shape}"
            )
        for v in per_frame:
            validate_ratio(v)
        per_patch = per_frame.copy()
        if cfg.aggregate_across_frames:
            per_frame = np.full(n, float(per_frame.mean()))
        return per_frame, per_patch
    if cfg.aggregation == "fixed":
        return np.full(n, float(cfg.fixed_t)), np.array([])
    per_patch = estimate_t(frames_norm, bundle.reg, cfg.tile)
    counts = _tiles_per_frame(frames_norm, cfg.tile)
    if cfg.aggregate_across_frames:
        if cfg.aggregation in ("wgt_sum", "wgt_prod"):
            rough = _rough_estimates(frames_norm, bundle, cfg)
            t_maps = _paint_t_maps(frames_norm, per_patch, cfg.tile)
            t_hat = aggregate(per_patch, cfg.aggregation, weight_maps=rough, t_maps=t_maps)
        else:
            t_hat = aggregate(per_patch, cfg.aggregation)
        return np.full(n, t_hat), per_patch
    per_frame = np.empty(n)
    i = 0
    for k, c in enumerate(counts):
        per_frame[k] = per_patch[i : i + c].mean()
        i += c
    return per_frame, per_patch


def _rough_estimates(frames_norm, bundle, cfg: InferenceConfig):
    """Weight maps for the weighted aggregations: quick fixed-ratio unmixing."""
    rough_cfg = InferenceConfig(
        aggregation="fixed",
        fixed_t=0.5,
        mmse_count=1,
        steps=1,
        tile=cfg.tile,
        noise=NoiseConfig(enabled=False),
        seed=cfg.seed,
    )
    maps = []
    for f in frames_norm:
        tiles, positions = tile_frame(f, cfg.tile.patch_size, cfg.tile.stride)
        sev = np.full(len(tiles), 0.5, np.float32)
        rng = np.random.default_rng(rough_cfg.seed)
        c0 = _predict_channel(bundle.gen0, tiles, sev, rough_cfg, rng)
        c1 = _predict_channel(bundle.gen1, tiles, sev, rough_cfg, rng)
        c0f = stitch_tiles(c0, positions, f.shape, cfg.tile.patch_size, cfg.tile.stride)
        c1f = stitch_tiles(c1, positions, f.shape, cfg.tile.patch_size, cfg.tile.stride)
        if cfg.aggregation == "wgt_sum":
            maps.append(c0f + c1f)
        else:
            maps.append(c0f * c1f)
    return maps


def _refine_channel(gen, frames_norm, start_severity, cfg: InferenceConfig, rng, on_step=None):
    """Direct (one-step) or scheduled multi-step prediction of one channel.

    The severity schedule decreases linearly from the start value to zero:
    step j uses severity start * (k - j) / k.  After each step the running
    image blends toward the prediction by 1 / (k - j), so the final step
    returns the prediction itself.  Intermediates are re-standardized to
    zero-mean/unit-variance over the acquisition before every network call;
    at the first step the input is already acquisition-standardized.
    """
    k = cfg.steps
    current = [np.asarray(f, np.float32) for f in frames_norm]
    for j in range(k):
        if j == 0:
            standardized = current
        else:
            pixels = np.concatenate([f.astype(np.float64).ravel() for f in current])
            m, s = float(pixels.mean()), float(pixels.std())
            if s == 0.0:
                raise ConfigurationError("intermediate image collapsed to a constant")
            standardized = [
                (f - np.float32(m)) / np.float32(s) for f in current
            ]
        severities = start_severity * (k - j) / k
        if on_step is not None:
            pooled = np.concatenate([f.astype(np.float64).ravel() for f in standardized])
            on_step(
                step=j,
                severity=float(severities.mean()),
                input_mean=float(pooled.mean()),
                input_std=float(pooled.std()),
            )
        blend = 1.0 / (k - j)
        next_frames = []
        for fi, f in enumerate(standardized):
            tiles, positions = tile_frame(f, cfg.tile.patch_size, cfg.tile.stride)
            sev = np.full(len(tiles), severities[fi], np.float32)
            pred_tiles = _predict_channel(gen, tiles, sev, cfg, rng)
            pred = stitch_tiles(
                pred_tiles, positions, f.shape, cfg.tile.patch_size, cfg.tile.stride
            )
            if k - j == 1:
                next_frames.append(pred)
            else:
                next_frames.append(
                    ((1.0 - blend) * current[fi] + blend * pred).astype(np.float32)
                )
        current = next_frames
    return current


def unmix(
    acq: AcquisitionInput,
    bundle: ModelBundle,
    cfg: InferenceConfig,
    frame_t_overrides=None,
    on_step=None,
) -> UnmixResult:
    """Recover both constituent channels of an acquisition.

    frame_t_overrides (one ratio per frame) substitutes external per-frame
    estimates for the regressor, for ablations and calibration experiments.
    on_step(step, severity, input_mean, input_std) observes each refinement
    step of channel 0.
    """
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    min_dim = min(min(np.asarray(f).shape) for f in acq.frames)
    if cfg.tile.patch_size > min_dim:
        raise ConfigurationError(
            f"tile size {cfg.tile.patch_size} exceeds smallest frame dimension {min_dim}"
        )
    frames_norm, _, _ = normalize_acquisition(acq)
    per_frame_t, per_patch_t = _resolve_frame_ratios(
        acq, frames_norm, bundle, cfg, frame_t_overrides
    )

    rng = np.random.default_rng(cfg.seed)
    c0_norm = _refine_channel(bundle.gen0, frames_norm, per_frame_t, cfg, rng, on_step=on_step)
    c1_norm = _refine_channel(bundle.gen1, frames_norm, 1.0 - per_frame_t, cfg, rng)

    stats = bundle.target_stats
    result_cfg = asdict(cfg)
    result_cfg["frame_t_overrides_used"] = frame_t_overrides is not None
    return UnmixResult(
        c0_hat=[denormalize_target(f, 0, stats) for f in c0_norm],
        c1_hat=[denormalize_target(f, 1, stats) for f in c1_norm],
        t_estimate=float(per_frame_t.mean()),
        per_patch_t=np.asarray(per_patch_t),
        per_frame_t=per_frame_t,
        config=result_cfg,
    )


def unmix_iterative(
    acq: AcquisitionInput, bundle: ModelBundle, cfg: InferenceConfig, **kwargs
) -> UnmixResult:
    """Multi-step refinement; requires steps >= 2 (steps=1 is plain unmix)."""
    if cfg.steps < 2:
        raise ConfigurationError(f"iterative unmixing needs steps >= 2, got {cfg.steps}")
    return unmix(acq, bundle, cfg, **kwargs)


def save_unmix_result(result: UnmixResult, out_dir, write_tiff: bool = True) -> Path:
    """Write per-channel frame stacks plus a JSON sidecar with the estimate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if write_tiff:
        import tifffile

        tifffile.imwrite(out_dir / "c0_hat.tif", np.stack(result.c0_hat))
        tifffile.imwrite(out_dir / "c1_hat.tif", np.stack(result.c1_hat))
    else:
        np.save(out_dir / "c0_hat.npy", np.stack(result.c0_hat))
        np.save(out_dir / "c1_hat.npy", np.stack(result.c1_hat))
    pp = result.per_patch_t
    sidecar = {
        "t_estimate": result.t_estimate,
        "per_frame_t": [float(v) for v in result.per_frame_t],
        "per_patch_t_summary": {
            "count": int(pp.size),
            "mean": float(pp.mean()) if pp.size else None,
            "std": float(pp.std()) if pp.size else None,
            "min": float(pp.min()) if pp.size else None,
            "max": float(pp.max()) if pp.size else None,
        },
        "config": result.config,
    }
    (out_dir / "result.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out_dir

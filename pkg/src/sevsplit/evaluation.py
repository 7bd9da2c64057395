"""Evaluation protocol: regime sweeps, full-frame metrics, and report emission.

Inputs for scoring channel i at weight w are built as w * c_i + (1 - w) *
c_other; both channels are scored and averaged, then averaged over each
regime's w values.  Metrics are computed on stitched full frames in raw
intensity units.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from . import data as data_mod
from .errors import ConfigurationError
from .infer import AcquisitionInput, InferenceConfig, unmix
from .mixing import NoiseConfig, convert_w_to_t, mix
from .nets import ModelBundle, config_hash

# value written to reports in place of an infinite PSNR (identical frames)
PSNR_CAP_DB = 300.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
# each of the 5 scales halves the image; the window must fit at the coarsest
MS_SSIM_MIN_DIM = _SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)

CSV_COLUMNS = ("model_variant", "regime", "w", "channel", "metric", "value",
               "std_error", "n_frames")


@dataclass
class RegimeSpec:
    name: str
    w_values: tuple

    def validate(self):
        problems = []
        if not self.w_values:
            problems.append(f"regime {self.name!r} has no w values")
        if any(not (0.0 <= w <= 1.0) for w in self.w_values):
            problems.append(f"regime {self.name!r} has w outside [0, 1]")
        return problems


def default_regimes():
    """Dominant covers bleedthrough removal; the others mirror it symmetrically."""
    return [
        RegimeSpec("weak", (0.1, 0.2, 0.3)),
        RegimeSpec("balanced", (0.4, 0.5, 0.6)),
        RegimeSpec("dominant", (0.7, 0.8, 0.9)),
    ]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def query(self, **filters):
        out = [r for r in self.rows if all(r.get(k) == v for k, v in filters.items())]
        return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio against the ground-truth frame's own range.

    Returns +inf when the frames are identical; report emission caps that.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    value_range = float(gt.max() - gt.min())
    return 10.0 * math.log10(value_range**2 / mse)


def _gaussian_window(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    g = np.exp(-((np.arange(size) - (size - 1) / 2.0) ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_pair(a: np.ndarray, b: np.ndarray, data_range: float):
    """Mean SSIM and mean contrast-structure term over the valid window area."""
    window = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def f(img):
        return convolve2d(img, window, mode="valid")

    mu_a = f(a)
    mu_b = f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float((luminance * cs).mean()), float(cs.mean())


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2]) / 4.0


def ms_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Multi-scale structural similarity (5 scales, standard weights).

    Frames too small for the scale pyramid fall back to single-scale SSIM
    with a warning.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    data_range = float(gt.max() - gt.min())
    if data_range == 0.0:
        data_range = 1.0
    if min(pred.shape) < MS_SSIM_MIN_DIM:
        warnings.warn(
            f"frame {pred.shape} smaller than {MS_SSIM_MIN_DIM}; "
            "falling back to single-scale SSIM"
        )
        return _ssim_pair(pred, gt, data_range)[0]
    value = 1.0
    a, b = pred, gt
    for level, weight in enumerate(MS_SSIM_WEIGHTS):
        ssim_full, cs = _ssim_pair(a, b, data_range)
        if level == len(MS_SSIM_WEIGHTS) - 1:
            value *= max(ssim_full, 0.0) ** weight
        else:
            value *= max(cs, 0.0) ** weight
            a = _downsample2(a)
            b = _downsample2(b)
    return float(value)


METRIC_FUNCS = {"psnr": psnr, "ms_ssim": ms_ssim}


# ---------------------------------------------------------------------------
# regime evaluation
# ---------------------------------------------------------------------------


def _score_frames(preds, gts, metric):
    fn = METRIC_FUNCS[metric]
    values = np.array([fn(p, g) for p, g in zip(preds, gts)])
    capped = np.isinf(values)
    values = np.where(capped, PSNR_CAP_DB, values)
    n = len(values)
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(values.mean()), se, n, int(capped.sum())


def evaluate_regimes(
    bundle: ModelBundle,
    fs: data_mod.ChannelFrameSet,
    regimes: list | None = None,
    variants: list | None = None,
    metrics: tuple = ("psnr", "ms_ssim"),
) -> EvalReport:
    """Score inference variants over w regimes on a held-out frame set.

    For each w, channel 0 is scored on inputs mixed at t = 1 - w and channel
    1 on inputs mixed at t = w; the report carries per-(w, channel) rows plus
    per-regime averages (rows with w='all', channel='both').
    """
    if len(fs) == 0:
        raise ConfigurationError("no frames to evaluate")
    regimes = regimes if regimes is not None else default_regimes()
    for r in regimes:
        problems = r.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
    if variants is None:
        variants = [("scsplit", InferenceConfig())]

    report = EvalReport()
    capped_rows = 0
    fallback_warned = min(fs.frames_c0[0].shape) < MS_SSIM_MIN_DIM
    for variant_name, cfg in variants:
        problems = cfg.validate()
        if problems:
            raise ConfigurationError(f"variant {variant_name!r}: " + "; ".join(problems))
        for regime in regimes:
            cell_values = {m: [] for m in metrics}
            for w in regime.w_values:
                for channel in (0, 1):
                    t = convert_w_to_t(w, channel)
                    frames = [
                        mix(c0, c1, t)
                        for c0, c1 in zip(fs.frames_c0, fs.frames_c1)
                    ]
                    acq = AcquisitionInput(
                        name=f"{fs.name}-w{w}-ch{channel}", frames=frames
                    )
                    result = unmix(acq, bundle, cfg)
                    preds = result.c0_hat if channel == 0 else result.c1_hat
                    gts = fs.frames_c0 if channel == 0 else fs.frames_c1
                    for metric in metrics:
                        with warnings.catch_warnings():
                            if fallback_warned:
                                warnings.simplefilter("ignore")
                            value, se, n, capped = _score_frames(preds, gts, metric)
                        capped_rows += capped
                        cell_values[metric].append(value)
                        report.rows.append(
                            {
                                "model_variant": variant_name,
                                "regime": regime.name,
                                "w": f"{w:g}",
                                "channel": str(channel),
                                "metric": metric,
                                "value": value,
                                "std_error": se,
                                "n_frames": n,
                            }
                        )
            for metric in metrics:
                report.rows.append(
                    {
                        "model_variant": variant_name,
                        "regime": regime.name,
                        "w": "all",
                        "channel": "both",
                        "metric": metric,
                        "value": float(np.mean(cell_values[metric])),
                        "std_error": 0.0,
                        "n_frames": len(fs),
                    }
                )

    report.metadata = {
        "bundle_scin_fingerprint": bundle.scin_table_ref,
        "bundle_config_hash": config_hash(bundle.train_config_snapshot),
        "dataset_fingerprint": data_mod.fingerprint(fs),
        "variants": {name: cfg.mmse_count for name, cfg in variants},
        "flags": {
            "psnr_capped_rows": capped_rows,
            "ms_ssim_single_scale_fallback": bool(fallback_warned),
        },
    }
    return report


def degradation_sweep(
    bundle: ModelBundle,
    fs: data_mod.ChannelFrameSet,
    actual_w_values: tuple = (0.3, 0.5, 0.7),
    assumed_w_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    base_cfg: InferenceConfig | None = None,
) -> list:
    """PSNR as a function of the severity assumed at inference time.

    For every (actual w, assumed w) cell, inputs are built at the actual w
    and unmixed with a fixed ratio derived from the assumed w; the cell holds
    the two-channel mean PSNR.  Runs single-pass noise-free inference so the
    table is deterministic and cheap.
    """
    rows = []
    for w_actual in actual_w_values:
        for w_assumed in assumed_w_grid:
            channel_scores = []
            for channel in (0, 1):
                t_actual = convert_w_to_t(w_actual, channel)
                t_assumed = convert_w_to_t(w_assumed, channel)
                cfg = InferenceConfig(
                    aggregation="fixed",
                    fixed_t=t_assumed,
                    mmse_count=1,
                    steps=1,
                    tile=(base_cfg.tile if base_cfg else InferenceConfig().tile),
                    noise=NoiseConfig(enabled=False),
                )
                frames = [
                    mix(c0, c1, t_actual)
                    for c0, c1 in zip(fs.frames_c0, fs.frames_c1)
                ]
                acq = AcquisitionInput(name=f"sweep-{w_actual}-{w_assumed}", frames=frames)
                result = unmix(acq, bundle, cfg)
                preds = result.c0_hat if channel == 0 else result.c1_hat
                gts = fs.frames_c0 if channel == 0 else fs.frames_c1
                value, _, _, _ = _score_frames(preds, gts, "psnr")
                channel_scores.append(value)
            rows.append(
                {
                    "actual_w": float(w_actual),
                    "assumed_w": float(w_assumed),
                    "metric": "psnr",
                    "value": float(np.mean(channel_scores)),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def report_to_csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    rows = sorted(
        report.rows,
        key=lambda r: (r["model_variant"], r["regime"], r["w"], r["channel"], r["metric"]),
    )
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    return list(reader)


def emit_report(
    report: EvalReport,
    out_stem,
    formats: tuple = ("csv", "json"),
    plot_data: bool = False,
    deterministic: bool = True,
) -> list:
    """Write the report; deterministic mode produces byte-stable files."""
    if not report.rows:
        raise ConfigurationError("report has no rows")
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    metadata = dict(report.metadata)
    if deterministic:
        metadata["timestamp"] = None
    else:
        import datetime

        metadata["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    if "csv" in formats:
        path = out_stem.with_suffix(".csv")
        path.write_text(report_to_csv_text(report))
        written.append(path)
    if "json" in formats:
        path = out_stem.with_suffix(".json")
        payload = {"metadata": metadata, "rows": report.rows}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_fmt))
        written.append(path)
    if plot_data:
        path = Path(str(out_stem) + "_plot.csv")
        detail = EvalReport(rows=[r for r in report.rows if r["w"] != "all"])
        path.write_text(report_to_csv_text(detail))
        written.append(path)
    return written


def emit_sweep(rows: list, out_path) -> Path:
    """Write the degradation sweep as a small deterministic CSV."""
    if not rows:
        raise ConfigurationError("sweep has no rows")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("actual_w", "assumed_w", "metric", "value"))
    for r in sorted(rows, key=lambda r: (r["actual_w"], r["assumed_w"])):
        writer.writerow([_fmt(r["actual_w"]), _fmt(r["assumed_w"]), r["metric"], _fmt(r["value"])])
    out_path.write_text(buf.getvalue())
    return out_path

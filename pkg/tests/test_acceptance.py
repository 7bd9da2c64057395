"""Desk-scale acceptance checks for the full unmixing pipeline.

Each test owns one acceptance check, prints a single PASS/FAIL verdict line,
and appends it to the list echoed after the pytest summary.  The checks run
on the shipped ``desk`` profile (128x128 frames, 5000/2500-step trainings)
so they exercise the same artifacts a user would build, at a scale that
finishes on one CPU core.  Checks A01-A07 are statistical (bands, error
bounds, orderings); A08-A10 are exact or near-exact identities; A11 re-runs
the whole pipeline and demands byte-identical report files.
"""

import time

import numpy as np
import pytest
import torch
from scipy import stats as scipy_stats

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from importlib import resources

import conftest as _conftest
from sevsplit import (
    AcquisitionInput,
    InferenceConfig,
    NoiseConfig,
    PatchSampler,
    SynthConfig,
    TrainConfig,
    TSamplerConfig,
    build_table,
    compute_target_stats,
    convert_w_to_t,
    degradation_sweep,
    emit_report,
    evaluate_regimes,
    make_bundle,
    mix,
    psnr,
    ms_ssim,
    sample_t,
    synthesize_dataset,
    train_generators,
    train_regressor,
    unmix,
    unmix_iterative,
)
from sevsplit.data import ChannelFrameSet, PatchSpec
from sevsplit.infer import (
    aggregate,
    estimate_t,
    normalize_acquisition,
    stitch_tiles,
    tile_frame,
)
from sevsplit.nets import gen_forward
from sevsplit.scin import denormalize, denormalize_target, normalize, predict_variance
from sevsplit.train import mae_loss, mse_loss

from test_evaluation import _oracle_ms_ssim
from test_nets import _finite_difference_check

# ---------------------------------------------------------------------------
# profile-driven configuration (single source of truth: the shipped profile)
# ---------------------------------------------------------------------------

PROFILE = tomllib.loads(
    resources.files("sevsplit").joinpath("profiles/desk.toml").read_bytes().decode()
)

DURATIONS = {}


def _synth_config():
    s = PROFILE["synth"]
    return SynthConfig(
        seed=s["seed"],
        frame_size=tuple(s["frame_size"]),
        frames_per_split=tuple(s["frames_per_split"]),
        structure_family_c0=s["structure_family_c0"],
        structure_family_c1=s["structure_family_c1"],
        density_c0=s["density_c0"],
        density_c1=s["density_c1"],
        intensity_scale_c0=s["intensity_scale_c0"],
        intensity_scale_c1=s["intensity_scale_c1"],
        background_level=s["background_level"],
    )


def _train_config(section):
    c = PROFILE["train"][section]
    kwargs = dict(
        batch_size=c["batch_size"],
        max_steps=c["max_steps"],
        learning_rate=c["learning_rate"],
        lr_schedule=c["lr_schedule"],
        patch_size=c["patch_size"],
        val_every=c["val_every"],
        seed=c["seed"],
    )
    if "t_sampler" in c:
        kwargs["t_sampler_reg"] = c["t_sampler"]
    return TrainConfig(**kwargs)


def _infer_config(**overrides):
    i = PROFILE["infer"]
    kwargs = dict(
        aggregation=i["aggregation"],
        mmse_count=i["mmse_count"],
        steps=i["steps"],
        tile=PatchSpec(patch_size=i["tile_size"], stride=i["tile_stride"]),
        noise=NoiseConfig(epsilon=i["noise_epsilon"]),
        seed=i["seed"],
    )
    kwargs.update(overrides)
    return InferenceConfig(**kwargs)


def _variants():
    fixed = _infer_config(aggregation="fixed", fixed_t=0.5)
    return [("scsplit", _infer_config()), ("fixed_0.5", fixed)]


def _record(check, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {check}: {detail}"
    _conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared desk-scale artifacts (built once per module, timed for the budgets)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_fs():
    return synthesize_dataset(_synth_config())


@pytest.fixture(scope="module")
def desk_table(desk_fs):
    s = PROFILE["scin"]
    t0 = time.perf_counter()
    table = build_table(
        desk_fs,
        patch_size=s["patch_size"],
        n_bins=s["n_bins"],
        samples_per_bin_target=s["samples_per_bin"],
        rng_seed=s["seed"],
    )
    DURATIONS["table_build"] = time.perf_counter() - t0
    return table


@pytest.fixture(scope="module")
def desk_target_stats(desk_fs):
    s = PROFILE["scin"]
    return compute_target_stats(
        desk_fs,
        patch_size=s["patch_size"],
        n_samples=s["target_stats_samples"],
        rng_seed=s["target_stats_seed"],
    )


@pytest.fixture(scope="module")
def desk_bundle(desk_fs, desk_table, desk_target_stats):
    t0 = time.perf_counter()
    reg, _ = train_regressor(desk_fs, desk_table, _train_config("reg"))
    DURATIONS["reg_train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gen_cfg = _train_config("gen")
    gen0, gen1, _ = train_generators(desk_fs, desk_table, desk_target_stats, gen_cfg)
    DURATIONS["gen_train"] = time.perf_counter() - t0
    return make_bundle(gen0, gen1, reg, desk_table, desk_target_stats, gen_cfg)


@pytest.fixture(scope="module")
def desk_test_split(desk_fs):
    return desk_fs.subset("test")


@pytest.fixture(scope="module")
def desk_report(desk_bundle, desk_test_split):
    t0 = time.perf_counter()
    report = evaluate_regimes(
        desk_bundle,
        desk_test_split,
        variants=_variants(),
        metrics=tuple(PROFILE["eval"]["metrics"]),
    )
    DURATIONS["eval"] = time.perf_counter() - t0
    return report


def _blend_split(fs_split, t):
    frames = [mix(c0, c1, float(t)) for c0, c1 in zip(fs_split.frames_c0, fs_split.frames_c1)]
    return AcquisitionInput(name=f"{fs_split.name}-t{t:g}", frames=frames)


# ---------------------------------------------------------------------------
# A01: every normalization-table bin standardizes fresh patches
# ---------------------------------------------------------------------------


def test_a01_normalization_band_holds_for_every_bin(desk_fs, desk_table):
    t0 = time.perf_counter()
    table = desk_table
    n_per_bin = 5000
    sampler = PatchSampler(desk_fs, "train", table.patch_size_used)
    streams = np.random.SeedSequence(20250825).spawn(table.n_bins)
    worst_mean, worst_var_lo, worst_var_hi = 0.0, np.inf, 0.0
    violations = []
    for i in range(table.n_bins):
        rng = np.random.default_rng(streams[i])
        a0, a1 = sampler.sample(rng, n_per_bin)
        t = rng.uniform(i / table.n_bins, (i + 1) / table.n_bins, n_per_bin).astype(
            np.float32
        )
        x = normalize(mix(a0, a1, t), t, table)
        m = float(x.mean(dtype=np.float64))
        v = float(x.var(dtype=np.float64))
        worst_mean = max(worst_mean, abs(m))
        worst_var_lo = min(worst_var_lo, v)
        worst_var_hi = max(worst_var_hi, v)
        if abs(m) > 0.05 or not (0.9 <= v <= 1.1):
            violations.append((i, m, v))
    total_s = DURATIONS["table_build"] + (time.perf_counter() - t0)

    ok = (
        table.n_bins == 100
        and int(table.samples_per_bin.min()) >= 2000
        and not violations
        and total_s <= 180.0
    )
    _record(
        "A01 normalization-band",
        ok,
        f"100 bins x {n_per_bin} fresh patches: worst |mean|={worst_mean:.4f} "
        f"(<=0.05), var in [{worst_var_lo:.4f}, {worst_var_hi:.4f}] (within [0.9, 1.1]), "
        f"{len(violations)} violations, build+verify {total_s:.1f}s (<=180s)",
    )


# ---------------------------------------------------------------------------
# A02: closed-form blend variance matches Monte Carlo, with and without
#      cross-channel covariance
# ---------------------------------------------------------------------------


def test_a02_variance_prediction_matches_monte_carlo(desk_fs, desk_table):
    t0 = time.perf_counter()
    patch = desk_table.patch_size_used
    grid = np.round(np.arange(0.0, 1.01, 0.1), 2)

    # second dataset engineered for strongly positive cross-channel covariance
    train = desk_fs.subset("train")
    fs_cov = ChannelFrameSet(
        name="cov-engineered",
        frames_c0=train.frames_c0,
        frames_c1=[
            (0.55 * a + 0.85 * b).astype(np.float32)
            for a, b in zip(train.frames_c0, train.frames_c1)
        ],
    )
    cov_stats = build_table(
        fs_cov, patch_size=patch, n_bins=1, samples_per_bin_target=4000, rng_seed=5
    ).channel_stats
    corr = cov_stats.cov / np.sqrt(cov_stats.var_c0 * cov_stats.var_c1)

    worst = {}
    for label, fs, stats in (
        ("desk", desk_fs, desk_table.channel_stats),
        ("cov", fs_cov, cov_stats),
    ):
        sampler = PatchSampler(fs, "train", patch)
        rng = np.random.default_rng(20250826)
        worst_rel = 0.0
        for t in grid:
            a0, a1 = sampler.sample(rng, 25000)
            mc = float(mix(a0, a1, float(t)).var(axis=(1, 2), ddof=0).mean(dtype=np.float64))
            pred = predict_variance(float(t), stats)
            worst_rel = max(worst_rel, abs(pred - mc) / mc)
        worst[label] = worst_rel
    elapsed = time.perf_counter() - t0

    ok = worst["desk"] <= 0.02 and worst["cov"] <= 0.02 and corr > 0.2 and elapsed <= 60.0
    _record(
        "A02 variance-prediction",
        ok,
        f"worst relative error over t=0..1: {worst['desk']*100:.2f}% (plain), "
        f"{worst['cov']*100:.2f}% (engineered corr={corr:.2f}) vs 2% bound, "
        f"{elapsed:.1f}s (<=60s)",
    )


# ---------------------------------------------------------------------------
# A03: the training ratio sampler has the right atom mass and a uniform body
# ---------------------------------------------------------------------------


def test_a03_ratio_sampler_atom_and_uniform_body():
    cfg = TSamplerConfig(a=1.0, atom_location=0.5)
    rng = np.random.default_rng(33)
    draws = sample_t(cfg, rng, 100_000)
    atom_mass = float((draws == 0.5).mean())
    body = draws[draws != 0.5]
    ks = scipy_stats.kstest(body, "uniform")

    ok = abs(atom_mass - 0.5) <= 0.01 and ks.pvalue >= 0.01
    _record(
        "A03 ratio-sampler",
        ok,
        f"atom mass {atom_mass:.4f} (0.50 +/- 0.01), "
        f"KS uniformity p={ks.pvalue:.3f} (>=0.01) on {body.size} continuous draws",
    )


# ---------------------------------------------------------------------------
# A04: the ratio regressor is accurate on held-out frames
# ---------------------------------------------------------------------------


def test_a04_regressor_accuracy_on_held_out_frames(desk_bundle, desk_test_split):
    i = PROFILE["infer"]
    tile = PatchSpec(patch_size=i["tile_size"], stride=i["tile_stride"])
    per_tile_errors, per_acq_errors = [], []
    for t in np.round(np.arange(0.1, 0.91, 0.1), 2):
        acq = _blend_split(desk_test_split, t)
        frames_norm, _, _ = normalize_acquisition(acq)
        est = estimate_t(frames_norm, desk_bundle.reg, tile)
        per_tile_errors.append(np.abs(est - float(t)))
        per_acq_errors.append(abs(float(est.mean()) - float(t)))
    mae_tile = float(np.concatenate(per_tile_errors).mean())
    mae_acq = float(np.mean(per_acq_errors))
    train_s = DURATIONS["reg_train"]

    ok = mae_tile <= 0.08 and train_s <= 900.0
    _record(
        "A04 regressor-accuracy",
        ok,
        f"held-out MAE {mae_tile:.4f} per tile (<=0.08), {mae_acq:.4f} after "
        f"acquisition averaging; trained in {train_s:.0f}s (<=900s)",
    )


# ---------------------------------------------------------------------------
# A05: estimating the ratio beats assuming 0.5 off-center, ties at center
# ---------------------------------------------------------------------------


def test_a05_estimated_ratio_beats_fixed_half(desk_report):
    # two-channel mean PSNR per (variant, w) from the per-w report rows
    cell = {}
    for row in desk_report.rows:
        if row["metric"] != "psnr" or row["channel"] not in ("0", "1"):
            continue
        key = (row["model_variant"], row["w"])
        cell.setdefault(key, []).append(row["value"])
    mean_psnr = {k: float(np.mean(v)) for k, v in cell.items()}
    deltas = {
        w: mean_psnr[("scsplit", w)] - mean_psnr[("fixed_0.5", w)]
        for w in ("0.2", "0.5", "0.8")
    }

    ok = deltas["0.2"] >= 0.5 and deltas["0.8"] >= 0.5 and abs(deltas["0.5"]) <= 0.3
    _record(
        "A05 estimated-vs-fixed",
        ok,
        f"PSNR delta vs fixed(0.5): {deltas['0.2']:+.2f} dB at w=0.2 (>=+0.5), "
        f"{deltas['0.8']:+.2f} dB at w=0.8 (>=+0.5), {deltas['0.5']:+.2f} dB at "
        f"w=0.5 (|delta|<=0.3)",
    )


# ---------------------------------------------------------------------------
# A06: averaging noisy per-frame estimates over the acquisition helps
# ---------------------------------------------------------------------------


def test_a06_acquisition_aggregation_beats_per_frame(desk_bundle, desk_test_split):
    rng = np.random.default_rng(606)
    base = dict(mmse_count=1, noise=NoiseConfig(enabled=False))
    t_err_agg, t_err_frame, psnr_agg, psnr_frame = [], [], [], []
    for t_true in np.linspace(0.15, 0.85, 20):
        acq = _blend_split(desk_test_split, t_true)
        noisy = np.clip(t_true + rng.normal(0.0, 0.1, len(acq.frames)), 0.0, 1.0)
        res_agg = unmix(
            acq,
            desk_bundle,
            _infer_config(aggregate_across_frames=True, **base),
            frame_t_overrides=list(noisy),
        )
        res_frame = unmix(
            acq,
            desk_bundle,
            _infer_config(aggregate_across_frames=False, **base),
            frame_t_overrides=list(noisy),
        )
        t_err_agg.append(abs(float(np.mean(noisy)) - t_true))
        t_err_frame.append(float(np.abs(noisy - t_true).mean()))

        def _mean_psnr(res):
            values = [
                psnr(pred, gt)
                for preds, gts in (
                    (res.c0_hat, desk_test_split.frames_c0),
                    (res.c1_hat, desk_test_split.frames_c1),
                )
                for pred, gt in zip(preds, gts)
            ]
            return float(np.mean(values))

        psnr_agg.append(_mean_psnr(res_agg))
        psnr_frame.append(_mean_psnr(res_frame))

    every_t_better = all(a <= f + 1e-12 for a, f in zip(t_err_agg, t_err_frame))
    psnr_wins = sum(a >= f for a, f in zip(psnr_agg, psnr_frame))
    mean_gain = float(np.mean(psnr_agg) - np.mean(psnr_frame))

    ok = every_t_better and mean_gain >= 0.0
    _record(
        "A06 acquisition-aggregation",
        ok,
        f"20 acquisitions with sigma=0.1 noised per-frame estimates: t-error "
        f"{np.mean(t_err_agg):.4f} aggregated vs {np.mean(t_err_frame):.4f} per-frame "
        f"(lower in 20/20), PSNR {mean_gain:+.3f} dB mean gain "
        f"(aggregated >= per-frame in {psnr_wins}/20)",
    )


# ---------------------------------------------------------------------------
# A07: reconstruction quality peaks when the assumed ratio is the actual one
# ---------------------------------------------------------------------------


def test_a07_sweep_peaks_at_actual_ratio(desk_bundle, desk_test_split):
    sweep = PROFILE["sweep"]
    rows = degradation_sweep(
        desk_bundle,
        desk_test_split,
        actual_w_values=tuple(sweep["actual_w"]),
        assumed_w_grid=tuple(sweep["assumed_w"]),
        base_cfg=_infer_config(),
    )
    peaks = {}
    for actual in sweep["actual_w"]:
        cells = [(r["assumed_w"], r["value"]) for r in rows if r["actual_w"] == actual]
        peaks[actual] = max(cells, key=lambda kv: kv[1])[0]

    ok = all(abs(peak - actual) <= 0.1 + 1e-9 for actual, peak in peaks.items())
    _record(
        "A07 assumed-ratio-sweep",
        ok,
        "PSNR argmax over assumed w: "
        + ", ".join(f"actual {a:g} -> peak {p:g}" for a, p in sorted(peaks.items()))
        + " (each within 0.1)",
    )


# ---------------------------------------------------------------------------
# A08: exact identities across the pipeline
# ---------------------------------------------------------------------------


def test_a08_exactness_suite(desk_fs, desk_table):
    rng = np.random.default_rng(808)
    sampler = PatchSampler(desk_fs, "train", desk_table.patch_size_used)
    failures = []

    def check(label, ok):
        if not ok:
            failures.append(label)

    # blend endpoints return the pure channels bitwise
    a0, a1 = sampler.sample(rng, 64)
    check("mix-endpoint-0", np.array_equal(mix(a0, a1, 0.0), a0))
    check("mix-endpoint-1", np.array_equal(mix(a0, a1, 1.0), a1))

    # normalize/denormalize round trip within 1e-6 of the data scale
    t = rng.uniform(0, 1, 64).astype(np.float32)
    mixed = mix(a0, a1, t)
    back = denormalize(normalize(mixed, t, desk_table), t, desk_table)
    rel = float(np.max(np.abs(back - mixed)) / np.max(np.abs(mixed)))
    check("normalize-round-trip", rel <= 1e-6)

    # overlapping tile + feathered stitch reproduce the frame bitwise
    frame = desk_fs.frames_c0[0]
    tiles, positions = tile_frame(frame, 48, 32)
    restitched = stitch_tiles(tiles, positions, frame.shape, 48, 32)
    check("stitch-identity", np.array_equal(restitched, frame))

    # aggregation rules equal brute-force formulas
    est = rng.uniform(0, 1, 999)
    check("agg-mean", aggregate(est, "mean") == pytest.approx(float(est.mean()), abs=1e-12))
    check(
        "agg-median",
        aggregate(est, "median") == pytest.approx(float(np.median(est)), abs=1e-12),
    )
    edges = np.arange(0.0, 1.01, 0.01)
    counts, _ = np.histogram(est, bins=edges)
    mode_expected = float((edges[np.argmax(counts)] + edges[np.argmax(counts) + 1]) / 2)
    check("agg-mode", aggregate(est, "mode") == pytest.approx(mode_expected, abs=1e-12))
    t_maps = [rng.uniform(0, 1, (12, 12)) for _ in range(4)]
    w_maps = [rng.uniform(0.1, 2.0, (12, 12)) for _ in range(4)]
    wgt_expected = sum(float((w * t).sum()) for w, t in zip(w_maps, t_maps)) / sum(
        float(w.sum()) for w in w_maps
    )
    check(
        "agg-weighted",
        aggregate(np.array([]), "wgt_sum", weight_maps=w_maps, t_maps=t_maps)
        == pytest.approx(wgt_expected, rel=1e-9),
    )

    # training losses equal their per-pixel formulas
    pa = torch.randn(6, 1, 9, 9, dtype=torch.float64)
    pb = torch.randn(6, 1, 9, 9, dtype=torch.float64)
    check(
        "mae-formula",
        float(mae_loss(pa, pb)) == pytest.approx(float(np.abs((pa - pb).numpy()).mean()), rel=1e-12),
    )
    check(
        "mse-formula",
        float(mse_loss(pa, pb)) == pytest.approx(float(((pa - pb).numpy() ** 2).mean()), rel=1e-12),
    )

    # metrics match independent reference implementations
    worst_psnr = 0.0
    for _ in range(10):
        gt = rng.normal(50, 12, (96, 96))
        pred = gt + rng.normal(0, 3, gt.shape)
        expected = 20 * np.log10(gt.max() - gt.min()) - 10 * np.log10(
            np.mean((pred - gt) ** 2)
        )
        worst_psnr = max(worst_psnr, abs(psnr(pred, gt) - expected))
    check("psnr-oracle", worst_psnr <= 1e-6)

    worst_ms = 0.0
    for _ in range(5):
        base = np.cumsum(np.cumsum(rng.normal(0, 1, (192, 192)), 0), 1)
        base = (base - base.min()) / (base.max() - base.min())
        noisy = base + rng.normal(0, 0.05, base.shape)
        worst_ms = max(worst_ms, abs(ms_ssim(noisy, base) - _oracle_ms_ssim(noisy, base)))
    check("ms-ssim-oracle", worst_ms <= 1e-4)

    ok = not failures
    _record(
        "A08 exactness-suite",
        ok,
        "endpoints/round-trip/stitch/aggregation/losses exact "
        f"(round-trip rel {rel:.1e}), PSNR oracle gap {worst_psnr:.1e} (<=1e-6), "
        f"MS-SSIM oracle gap {worst_ms:.1e} (<=1e-4)"
        + (f"; FAILED: {failures}" if failures else ""),
    )


# ---------------------------------------------------------------------------
# A09: autograd gradients match finite differences on miniature networks
# ---------------------------------------------------------------------------


def test_a09_gradients_match_finite_differences():
    from sevsplit.nets import GeneratorNet, GenSpec, RegressorNet, RegSpec

    torch.manual_seed(9)
    gen = GeneratorNet(GenSpec(channel_index=0, depth=2, base_width=4, patch_size=8))
    x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    sev = torch.tensor([0.25, 0.75], dtype=torch.float64)
    target = torch.randn(2, 1, 8, 8, dtype=torch.float64)
    _finite_difference_check(gen, lambda n, a, s, y: mae_loss(n(a, s), y), (x, sev, target))

    reg = RegressorNet(RegSpec(depth=2, base_width=4))
    xr = torch.randn(3, 1, 16, 16, dtype=torch.float64)
    tr = torch.tensor([0.2, 0.5, 0.8], dtype=torch.float64)
    _finite_difference_check(reg, lambda n, a, y: mse_loss(n(a), y), (xr, tr))

    _record(
        "A09 gradient-checks",
        True,
        "finite differences agree with autograd within 1e-3 relative for the "
        "generator (MAE loss) and the regressor (MSE loss)",
    )


# ---------------------------------------------------------------------------
# A10: the iterative refinement contract
# ---------------------------------------------------------------------------


def test_a10_iterative_inference_contract(desk_bundle, desk_test_split):
    acq = _blend_split(desk_test_split, 0.6)
    cfg_one = _infer_config(mmse_count=1, noise=NoiseConfig(enabled=False), steps=1)
    res_one = unmix(acq, desk_bundle, cfg_one)
    t_hat = res_one.t_estimate

    # single-step inference equals the hand-rolled direct path bitwise
    frames_norm, _, _ = normalize_acquisition(acq)
    tile = cfg_one.tile
    direct_exact = True
    for k, f in enumerate(frames_norm):
        tiles, positions = tile_frame(f, tile.patch_size, tile.stride)
        for channel, gen, preds in (
            (0, desk_bundle.gen0, res_one.c0_hat),
            (1, desk_bundle.gen1, res_one.c1_hat),
        ):
            severity = t_hat if channel == 0 else 1.0 - t_hat
            out = gen_forward(gen, tiles, np.full(len(tiles), severity, np.float32))
            stitched = stitch_tiles(out, positions, f.shape, tile.patch_size, tile.stride)
            expected = denormalize_target(stitched, channel, desk_bundle.target_stats)
            if not np.array_equal(preds[k], expected):
                direct_exact = False

    # severity schedule and re-standardization of intermediates
    records = []

    def on_step(step, severity, input_mean, input_std):
        records.append((step, severity, input_mean, input_std))

    k_steps = 4
    res_iter = unmix_iterative(
        acq,
        desk_bundle,
        _infer_config(mmse_count=1, noise=NoiseConfig(enabled=False), steps=k_steps),
        on_step=on_step,
    )
    t_it = res_iter.t_estimate
    schedule_ok = [r[0] for r in records] == list(range(k_steps)) and all(
        abs(sev - t_it * (k_steps - j) / k_steps) <= 1e-6 for j, sev, _, _ in records
    )
    restandardized = all(
        abs(m) <= 1e-6 and abs(s - 1.0) <= 1e-6 for j, _, m, s in records if j > 0
    )

    ok = direct_exact and schedule_ok and restandardized
    _record(
        "A10 iterative-contract",
        ok,
        f"single step bitwise-equals direct inference ({direct_exact}); "
        f"severities follow t*(k-j)/k from t={t_it:.3f} ({schedule_ok}); "
        f"intermediates re-standardized to |mean|<=1e-6, |std-1|<=1e-6 "
        f"({restandardized})",
    )


# ---------------------------------------------------------------------------
# A11: the full pipeline re-run is byte-identical
# ---------------------------------------------------------------------------


def test_a11_full_pipeline_rerun_byte_identical(tmp_path, desk_report):
    first = emit_report(desk_report, tmp_path / "run1" / "report", deterministic=True)

    s = PROFILE["scin"]
    fs2 = synthesize_dataset(_synth_config())
    table2 = build_table(
        fs2,
        patch_size=s["patch_size"],
        n_bins=s["n_bins"],
        samples_per_bin_target=s["samples_per_bin"],
        rng_seed=s["seed"],
    )
    stats2 = compute_target_stats(
        fs2,
        patch_size=s["patch_size"],
        n_samples=s["target_stats_samples"],
        rng_seed=s["target_stats_seed"],
    )
    reg2, _ = train_regressor(fs2, table2, _train_config("reg"))
    gen_cfg = _train_config("gen")
    gen02, gen12, _ = train_generators(fs2, table2, stats2, gen_cfg)
    bundle2 = make_bundle(gen02, gen12, reg2, table2, stats2, gen_cfg)
    report2 = evaluate_regimes(
        bundle2,
        fs2.subset("test"),
        variants=_variants(),
        metrics=tuple(PROFILE["eval"]["metrics"]),
    )
    second = emit_report(report2, tmp_path / "run2" / "report", deterministic=True)

    identical = {
        p1.suffix: p1.read_bytes() == p2.read_bytes() for p1, p2 in zip(first, second)
    }
    ok = all(identical.values()) and len(identical) == 2
    _record(
        "A11 rerun-determinism",
        ok,
        "independent rerun of synth -> table -> train -> eval reproduces the "
        f"report byte-for-byte (csv: {identical.get('.csv')}, json: {identical.get('.json')})",
    )

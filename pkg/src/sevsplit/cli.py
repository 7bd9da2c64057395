"""Command-line entry points wiring the full pipeline.

Commands: synth, build-scin, train, infer, eval, sweep, and pipeline (all of
them in sequence).  Configuration comes from a TOML/JSON file (or a bundled
profile name like "desk"); command-line flags override file values, which
override defaults.  Every command writes the merged effective config next to
its outputs so artifacts are traceable to their settings.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import infer as infer_mod
from . import scin as scin_mod
from . import train as train_mod
from .data import PatchSpec, SynthConfig
from .errors import (
    ConfigurationError,
    DivergenceError,
    FingerprintMismatchError,
    IngestionError,
)
from .infer import AcquisitionInput, InferenceConfig
from .mixing import NoiseConfig, TSamplerConfig
from .nets import config_hash, load_bundle, save_bundle

_PACKAGE_ERRORS = (ConfigurationError, IngestionError, FingerprintMismatchError, DivergenceError)

# stage-specific seed offsets applied when a single --seed is given
_SEED_OFFSETS = {"synth": 0, "scin": 1, "train_reg": 2, "train_gen": 3, "infer": 4}


def _fail(messages, code):
    for m in messages if isinstance(messages, list) else [messages]:
        click.echo(f"error: {m}", err=True)
    sys.exit(code)


def _load_config_file(spec: str | None) -> dict:
    if spec is None:
        return {}
    path = Path(spec)
    if not path.exists():
        builtin = resources.files("sevsplit").joinpath(f"profiles/{spec}.toml")
        if builtin.is_file():
            return _parse_toml(builtin.read_bytes())
        _fail(f"config {spec!r} is neither a file nor a bundled profile", 2)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    return _parse_toml(path.read_bytes())


def _parse_toml(raw: bytes) -> dict:
    try:
        import tomllib
    except ImportError:
        import tomli as tomllib
    return tomllib.loads(raw.decode())


def _section(config: dict, *names):
    node = config
    for n in names:
        node = node.get(n, {}) if isinstance(node, dict) else {}
    return dict(node) if isinstance(node, dict) else {}


def _stage_seed(cli_seed, section, stage, default):
    if cli_seed is not None:
        return cli_seed + _SEED_OFFSETS[stage]
    return int(section.get("seed", default))


def _write_effective_config(out_dir: Path, command: str, merged: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": merged,
        "config_hash": config_hash(merged),
        "package": "sevsplit",
    }
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str)
    )
    return payload["config_hash"]


def _handle_existing(out_dir: Path, merged: dict, if_exists: str) -> bool:
    """True means the caller should reuse the existing artifact and stop."""
    marker = out_dir / "effective_config.json"
    if not marker.exists():
        return False
    if if_exists == "overwrite":
        return False
    old_hash = json.loads(marker.read_text()).get("config_hash")
    new_hash = config_hash(merged)
    if if_exists == "reuse":
        if old_hash == new_hash:
            click.echo(f"reusing {out_dir} (config hash {new_hash})")
            return True
        _fail(
            f"{out_dir} exists with config hash {old_hash}, current config is {new_hash}", 1
        )
    _fail(f"{out_dir} already exists (use --if-exists to control this)", 1)
    return False


def _synth_config(section: dict, seed) -> SynthConfig:
    cfg = SynthConfig(
        seed=_stage_seed(seed, section, "synth", 0),
        frame_size=tuple(section.get("frame_size", (128, 128))),
        frames_per_split=tuple(section.get("frames_per_split", (24, 4, 8))),
        structure_family_c0=section.get("structure_family_c0", "filaments"),
        structure_family_c1=section.get("structure_family_c1", "blobs"),
        density_c0=float(section.get("density_c0", 22.0)),
        density_c1=float(section.get("density_c1", 48.0)),
        intensity_scale_c0=float(section.get("intensity_scale_c0", 60.0)),
        intensity_scale_c1=float(section.get("intensity_scale_c1", 120.0)),
        background_level=float(section.get("background_level", 5.0)),
    )
    problems = cfg.validate()
    if problems:
        _fail(problems, 2)
    return cfg


def _train_config(section: dict, seed, stage: str) -> train_mod.TrainConfig:
    sampler = section.get("t_sampler", "uniform")
    cfg = train_mod.TrainConfig(
        batch_size=int(section.get("batch_size", 8)),
        max_steps=int(section.get("max_steps", 2500)),
        learning_rate=float(section.get("learning_rate", 1e-3)),
        t_sampler_reg=sampler,
        noise=NoiseConfig(epsilon=float(section.get("noise_epsilon", 0.01))),
        patch_size=int(section.get("patch_size", 48)),
        val_every=int(section.get("val_every", 250)),
        seed=_stage_seed(seed, section, stage, 0),
        lr_schedule=section.get("lr_schedule", "constant"),
        log_path=section.get("log_path"),
    )
    problems = cfg.validate()
    if problems:
        _fail(problems, 2)
    return cfg


def _infer_config(section: dict, seed, **overrides) -> InferenceConfig:
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    aggregation = merged.get("aggregation", "mean")
    fixed_t = merged.get("fixed_t")
    if ":" in str(aggregation):
        name, _, value = str(aggregation).partition(":")
        aggregation, fixed_t = name, float(value)
    cfg = InferenceConfig(
        aggregation=aggregation,
        fixed_t=fixed_t,
        mmse_count=int(merged.get("mmse_count", 10)),
        steps=int(merged.get("steps", 1)),
        tile=PatchSpec(
            patch_size=int(merged.get("tile_size", 48)),
            stride=int(merged.get("tile_stride", 32)),
            split="test",
        ),
        noise=NoiseConfig(epsilon=float(merged.get("noise_epsilon", 0.01))),
        seed=_stage_seed(seed, merged, "infer", 0),
        aggregate_across_frames=bool(merged.get("aggregate_across_frames", True)),
    )
    problems = cfg.validate()
    if problems:
        _fail(problems, 2)
    return cfg


def _variant_from_name(name: str, base: InferenceConfig) -> tuple:
    """Translate an eval variant spec like "mean" or "fixed:0.5" to a config."""
    kwargs = dict(
        mmse_count=base.mmse_count,
        steps=base.steps,
        tile=base.tile,
        noise=base.noise,
        seed=base.seed,
    )
    if name.startswith("fixed:"):
        t = float(name.split(":", 1)[1])
        return f"fixed_{t:g}", InferenceConfig(aggregation="fixed", fixed_t=t, **kwargs)
    if name == "noagg":
        return "noagg", InferenceConfig(
            aggregation="mean", aggregate_across_frames=False, **kwargs
        )
    if name in infer_mod.AGGREGATION_METHODS:
        label = "scsplit" if name == "mean" else f"agg_{name}"
        return label, InferenceConfig(aggregation=name, **kwargs)
    _fail(f"unknown eval variant {name!r}", 2)


def _load_acquisition(path: Path) -> AcquisitionInput:
    if not path.exists():
        raise IngestionError(f"{path} does not exist")
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        frames = [
            np.asarray(np.load(path / f), np.float32) for f in manifest["frames"]
        ]
        return AcquisitionInput(name=manifest.get("name", path.name), frames=frames)
    if path.suffix == ".npy":
        arr = np.asarray(np.load(path), np.float32)
    else:
        import tifffile

        arr = np.asarray(tifffile.imread(str(path)), np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise IngestionError(f"{path}: expected single-channel frames, got shape {arr.shape}")
    return AcquisitionInput(name=path.stem, frames=list(arr))


@click.group()
@click.option("--config", "config_spec", default=None,
              help="Config file (TOML/JSON) or bundled profile name (desk, desk-small).")
@click.option("--seed", type=int, default=None, help="Base seed overriding per-stage seeds.")
@click.option("--out", "out_dir", default="out", show_default=True, help="Output directory.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker threads for compute-heavy stages.")
@click.option("--format", "formats", type=click.Choice(["csv", "json", "both"]),
              default="both", show_default=True)
@click.pass_context
def main(ctx, config_spec, seed, out_dir, jobs, formats):
    """Decompose superimposed two-channel microscopy images."""
    import torch

    torch.set_num_threads(max(1, jobs))
    ctx.ensure_object(dict)
    ctx.obj["config"] = _load_config_file(config_spec)
    ctx.obj["seed"] = seed
    ctx.obj["out"] = Path(out_dir)
    ctx.obj["formats"] = ("csv", "json") if formats == "both" else (formats,)


def _command(fn):
    """Shared error handling: domain errors exit 1 with a message."""

    def wrapper(ctx, *args, **kwargs):
        try:
            return fn(ctx, *args, **kwargs)
        except _PACKAGE_ERRORS as e:
            _fail(str(e), 1)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@main.command()
@click.option("--if-exists", type=click.Choice(["overwrite", "reuse", "error"]),
              default="overwrite", show_default=True)
@click.pass_context
@_command
def synth(ctx, if_exists):
    """Generate a synthetic two-channel dataset."""
    cfg = _synth_config(_section(ctx.obj["config"], "synth"), ctx.obj["seed"])
    out = ctx.obj["out"] / "dataset"
    merged = asdict(cfg)
    if _handle_existing(out, merged, if_exists):
        return
    fs = data_mod.synthesize_dataset(cfg)
    data_mod.save_dataset(fs, out, extra_meta={"config_hash": config_hash(merged)})
    _write_effective_config(out, "synth", merged)
    click.echo(f"wrote {len(fs)} frame pairs to {out}")


@main.command("build-scin")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--if-exists", type=click.Choice(["overwrite", "reuse", "error"]),
              default="overwrite", show_default=True)
@click.pass_context
@_command
def build_scin(ctx, data_path, if_exists):
    """Build the per-ratio normalization table from a dataset's train split."""
    section = _section(ctx.obj["config"], "scin")
    fs = data_mod.load_dataset(data_path)
    out = ctx.obj["out"] / "scin"
    merged = {
        "patch_size": int(section.get("patch_size", 48)),
        "n_bins": int(section.get("n_bins", 100)),
        "samples_per_bin": int(section.get("samples_per_bin", 2000)),
        "seed": _stage_seed(ctx.obj["seed"], section, "scin", 0),
        "data": str(data_path),
    }
    if _handle_existing(out, merged, if_exists):
        return
    table = scin_mod.build_table(
        fs,
        patch_size=merged["patch_size"],
        n_bins=merged["n_bins"],
        samples_per_bin_target=merged["samples_per_bin"],
        rng_seed=merged["seed"],
    )
    scin_mod.save_table(table, out / "scin_table.json")
    _write_effective_config(out, "build-scin", merged)
    click.echo(f"wrote table ({table.n_bins} bins) to {out / 'scin_table.json'}")


@main.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--scin-table", "table_path", required=True, type=click.Path(exists=True))
@click.option("--if-exists", type=click.Choice(["overwrite", "reuse", "error"]),
              default="overwrite", show_default=True)
@click.pass_context
@_command
def train(ctx, data_path, table_path, if_exists):
    """Train the regressor and both generators; write a model bundle."""
    config = ctx.obj["config"]
    fs = data_mod.load_dataset(data_path)
    table = scin_mod.load_table(table_path, expect_fingerprint=data_mod.fingerprint(fs))
    scin_section = _section(config, "scin")
    reg_cfg = _train_config(_section(config, "train", "reg"), ctx.obj["seed"], "train_reg")
    gen_cfg = _train_config(_section(config, "train", "gen"), ctx.obj["seed"], "train_gen")
    out = ctx.obj["out"] / "bundle"
    merged = {
        "reg": asdict(reg_cfg),
        "gen": asdict(gen_cfg),
        "data": str(data_path),
        "scin_table": str(table_path),
    }
    if _handle_existing(out, merged, if_exists):
        return
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    reg_cfg.log_path = str(log_path)
    gen_cfg.log_path = str(log_path)

    target_stats = scin_mod.compute_target_stats(
        fs,
        patch_size=int(scin_section.get("patch_size", gen_cfg.patch_size)),
        n_samples=int(scin_section.get("target_stats_samples", 4000)),
        rng_seed=int(scin_section.get("target_stats_seed", 1)),
    )
    click.echo(f"training regressor ({reg_cfg.max_steps} steps)")
    reg, reg_report = train_mod.train_regressor(fs, table, reg_cfg)
    click.echo(f"  best step {reg_report.best_step}, val MAE {reg_report.final_val['val_mae']:.4f}")
    click.echo(f"training generators ({gen_cfg.max_steps} steps)")
    gen0, gen1, gen_report = train_mod.train_generators(fs, table, target_stats, gen_cfg)
    click.echo(f"  best step {gen_report.best_step}, val loss {gen_report.final_val['val_mae_sum']:.4f}")

    bundle = train_mod.make_bundle(gen0, gen1, reg, table, target_stats, gen_cfg)
    save_bundle(
        bundle,
        out,
        metrics={
            "reg_val_mae": reg_report.final_val["val_mae"],
            "gen_val_mae_sum": gen_report.final_val["val_mae_sum"],
            "reg_wall_clock_s": round(reg_report.wall_clock_s, 1),
            "gen_wall_clock_s": round(gen_report.wall_clock_s, 1),
        },
    )
    _write_effective_config(out, "train", merged)
    click.echo(f"wrote bundle to {out}")


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--aggregation", default=None,
              help="mean|median|mode|wgt_sum|wgt_prod|fixed:<t>|noagg")
@click.pass_context
@_command
def infer(ctx, bundle_path, input_path, aggregation):
    """Unmix one acquisition of superimposed frames."""
    bundle = load_bundle(bundle_path)
    acq = _load_acquisition(Path(input_path))
    overrides = {}
    if aggregation == "noagg":
        overrides = {"aggregation": "mean", "aggregate_across_frames": False}
    elif aggregation is not None:
        overrides = {"aggregation": aggregation}
    cfg = _infer_config(_section(ctx.obj["config"], "infer"), ctx.obj["seed"], **overrides)
    result = infer_mod.unmix(acq, bundle, cfg)
    out = ctx.obj["out"] / f"unmix_{acq.name}"
    infer_mod.save_unmix_result(result, out)
    merged = result.config
    _write_effective_config(out, "infer", merged)
    click.echo(f"t estimate {result.t_estimate:.4f}; wrote {out}")


@main.command("eval")
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--variant", "variant_names", multiple=True,
              help="Inference variant (repeatable): mean, median, mode, wgt_sum, "
                   "wgt_prod, noagg, fixed:<t>.")
@click.option("--split", default="test", show_default=True)
@click.pass_context
@_command
def eval_cmd(ctx, bundle_path, data_path, variant_names, split):
    """Score inference variants over w regimes on held-out frames."""
    config = ctx.obj["config"]
    bundle = load_bundle(bundle_path)
    fs = data_mod.load_dataset(data_path)
    fs_eval = fs.subset(split) if fs.split_counts else fs
    base = _infer_config(_section(config, "infer"), ctx.obj["seed"])
    section = _section(config, "eval")
    names = list(variant_names) or list(section.get("variants", ["mean", "fixed:0.5"]))
    variants = [_variant_from_name(n, base) for n in names]
    metrics = tuple(section.get("metrics", ("psnr", "ms_ssim")))
    report = eval_mod.evaluate_regimes(bundle, fs_eval, variants=variants, metrics=metrics)
    out = ctx.obj["out"] / "eval"
    files = eval_mod.emit_report(report, out / "report", formats=ctx.obj["formats"],
                                 plot_data=True)
    merged = {"variants": names, "metrics": list(metrics), "split": split,
              "infer": asdict(base)}
    _write_effective_config(out, "eval", merged)
    for f in files:
        click.echo(f"wrote {f}")


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.pass_context
@_command
def sweep(ctx, bundle_path, data_path, split):
    """PSNR vs assumed mixing weight for inputs built at several actual weights."""
    config = ctx.obj["config"]
    bundle = load_bundle(bundle_path)
    fs = data_mod.load_dataset(data_path)
    fs_eval = fs.subset(split) if fs.split_counts else fs
    section = _section(config, "sweep")
    base = _infer_config(_section(config, "infer"), ctx.obj["seed"])
    actual_w = tuple(float(v) for v in section.get("actual_w", (0.3, 0.5, 0.7)))
    assumed_w = tuple(
        float(v)
        for v in section.get("assumed_w", np.round(np.arange(0.1, 0.91, 0.1), 2))
    )
    rows = eval_mod.degradation_sweep(
        bundle, fs_eval, actual_w_values=actual_w, assumed_w_grid=assumed_w, base_cfg=base
    )
    out = ctx.obj["out"] / "sweep"
    path = eval_mod.emit_sweep(rows, out / "sweep.csv")
    merged = {"actual_w": list(actual_w), "assumed_w": list(assumed_w), "split": split}
    _write_effective_config(out, "sweep", merged)
    click.echo(f"wrote {path}")


@main.command()
@click.pass_context
@_command
def pipeline(ctx):
    """Run synth, build-scin, train, eval, and sweep in sequence."""
    out = ctx.obj["out"]
    ctx.invoke(synth, if_exists="overwrite")
    ctx.invoke(build_scin, data_path=str(out / "dataset"), if_exists="overwrite")
    ctx.invoke(
        train,
        data_path=str(out / "dataset"),
        table_path=str(out / "scin" / "scin_table.json"),
        if_exists="overwrite",
    )
    ctx.invoke(eval_cmd, bundle_path=str(out / "bundle"), data_path=str(out / "dataset"),
               variant_names=(), split="test")
    ctx.invoke(sweep, bundle_path=str(out / "bundle"), data_path=str(out / "dataset"),
               split="test")


if __name__ == "__main__":
    main()

"""Training loops for the generators and the ratio regressor.

Every training input follows the same path: sample an aligned patch pair,
draw t, mix, normalize by the t-bin table, perturb with t-scaled noise.  The
generators learn standardized clean channels under MAE; the regressor learns
t under MSE.  Both loops validate on fixed patch/t sets and return the best
validation checkpoint.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import scin as scin_mod
from .errors import ConfigurationError, DivergenceError, FingerprintMismatchError
from .mixing import NoiseConfig, TSamplerConfig, mix, perturb, sample_t
from .nets import GenSpec, GeneratorNet, ModelBundle, RegSpec, RegressorNet

T_SAMPLERS_REG = ("uniform", "atom-mixture")
VAL_T_GRID = np.round(np.arange(0.1, 0.91, 0.1), 2).astype(np.float32)


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 2500
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    gen_loss: str = "mae"
    reg_loss: str = "mse"
    t_sampler_gen: TSamplerConfig = field(default_factory=TSamplerConfig)
    t_sampler_reg: str = "uniform"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    patch_size: int = 48
    val_every: int = 250
    val_patches: int = 72
    seed: int = 0
    grad_clip_norm: float | None = None
    lr_schedule: str = "constant"
    log_path: str | None = None

    def validate(self):
        problems = []
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            problems.append(f"max_steps must be >= 1, got {self.max_steps}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer != "adam":
            problems.append(f"unsupported optimizer {self.optimizer!r}")
        if self.gen_loss != "mae":
            problems.append(f"unsupported gen_loss {self.gen_loss!r}")
        if self.reg_loss != "mse":
            problems.append(f"unsupported reg_loss {self.reg_loss!r}")
        if self.t_sampler_reg not in T_SAMPLERS_REG:
            problems.append(f"t_sampler_reg {self.t_sampler_reg!r} not in {T_SAMPLERS_REG}")
        if self.lr_schedule not in ("constant", "cosine"):
            problems.append(f"lr_schedule {self.lr_schedule!r} not in ('constant', 'cosine')")
        if self.patch_size < 8:
            problems.append(f"patch_size must be >= 8, got {self.patch_size}")
        if self.val_every < 1:
            problems.append(f"val_every must be >= 1, got {self.val_every}")
        if self.val_patches < 1:
            problems.append(f"val_patches must be >= 1, got {self.val_patches}")
        problems += self.t_sampler_gen.validate()
        problems += self.noise.validate()
        return problems


@dataclass
class TrainReport:
    train_curve: list = field(default_factory=list)  # (step, loss)
    val_curve: list = field(default_factory=list)  # (step, loss)
    best_step: int = 0
    wall_clock_s: float = 0.0
    final_val: dict = field(default_factory=dict)
    table_fingerprint: str = ""


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).abs().mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None
        self.t0 = time.monotonic()

    def log(self, **fields):
        if self.fh is None:
            return
        fields["elapsed_s"] = round(time.monotonic() - self.t0, 3)
        self.fh.write(json.dumps(fields) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _check_setup(fs, table, cfg):
    problems = cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    actual = data_mod.fingerprint(fs)
    if actual != table.dataset_fingerprint:
        raise FingerprintMismatchError(
            f"table was built on dataset {table.dataset_fingerprint}, "
            f"training data fingerprints as {actual}"
        )


def _check_batch_stats(x: np.ndarray, step: int):
    """Canary: normalized batches must be roughly standardized."""
    m = float(x.mean(dtype=np.float64))
    v = float(x.var(dtype=np.float64))
    if not (abs(m) <= 0.2 and 0.5 <= v <= 1.5):
        raise DivergenceError(
            f"step {step}: normalized batch statistics out of range "
            f"(mean={m:.3f}, var={v:.3f}); normalization table does not match the data"
        )


# Diagnostic batches smaller than this are too noisy for the canary bounds.
_CANARY_MIN_BATCH = 32


def _canary_check(sampler, table, cfg, rng, step):
    """Sample a dedicated diagnostic batch and assert it is standardized.

    Uses its own rng stream and at least _CANARY_MIN_BATCH patches so the
    check's power does not depend on the training batch size.
    """
    n = max(cfg.batch_size, _CANARY_MIN_BATCH)
    a0, a1 = sampler.sample(rng, n)
    t = sample_t(cfg.t_sampler_gen, rng, size=n)
    x = scin_mod.normalize(mix(a0, a1, t), t, table)
    _check_batch_stats(x, step)


def _val_sampler(fs, patch_size):
    """Validation patches come from the val split when present, else train."""
    try:
        if len(fs.split_range("val")) > 0:
            return data_mod.PatchSampler(fs, "val", patch_size)
    except ConfigurationError:
        pass
    return data_mod.PatchSampler(fs, "train", patch_size)


def _fixed_val_set(fs, table, cfg, rng):
    """Fixed (normalized input, t, targets) arrays swept over a fixed t grid."""
    sampler = _val_sampler(fs, cfg.patch_size)
    a0, a1 = sampler.sample(rng, cfg.val_patches)
    t = np.resize(VAL_T_GRID, cfg.val_patches).astype(np.float32)
    x = scin_mod.normalize(mix(a0, a1, t), t, table)
    return (
        torch.from_numpy(x[:, None]),
        torch.from_numpy(t),
        a0,
        a1,
    )


def _draw_t(cfg: TrainConfig, which: str, rng, n: int) -> np.ndarray:
    if which == "gen" or cfg.t_sampler_reg == "atom-mixture":
        return sample_t(cfg.t_sampler_gen, rng, size=n)
    return rng.random(n, dtype=np.float32)


def train_generators(
    fs: data_mod.ChannelFrameSet,
    table: scin_mod.ScinTable,
    target_stats: scin_mod.TargetChannelStats,
    cfg: TrainConfig,
    specs: tuple[GenSpec, GenSpec] | None = None,
):
    """Train both generators on shared (patch, t) draws.

    Returns (gen0, gen1, TrainReport).  The two nets see identical inputs each
    step and take one optimizer step each; severity is t for channel 0 and
    1 - t for channel 1.
    """
    _check_setup(fs, table, cfg)
    if specs is None:
        specs = (GenSpec(channel_index=0, patch_size=cfg.patch_size),
                 GenSpec(channel_index=1, patch_size=cfg.patch_size))
    torch.manual_seed(cfg.seed)
    gen0 = GeneratorNet(specs[0])
    gen1 = GeneratorNet(specs[1])
    opt0 = torch.optim.Adam(gen0.parameters(), lr=cfg.learning_rate)
    opt1 = torch.optim.Adam(gen1.parameters(), lr=cfg.learning_rate)
    scheds = _make_schedulers(cfg, opt0, opt1)

    batch_rng, noise_rng, val_rng, canary_rng = _spawn_rngs(cfg.seed, 4)
    sampler = data_mod.PatchSampler(fs, "train", cfg.patch_size)
    val_x, val_t, val_a0, val_a1 = _fixed_val_set(fs, table, cfg, val_rng)
    val_y0 = torch.from_numpy(scin_mod.normalize_target(val_a0, 0, target_stats)[:, None])
    val_y1 = torch.from_numpy(scin_mod.normalize_target(val_a1, 1, target_stats)[:, None])

    logger = _Logger(cfg.log_path)
    report = TrainReport(table_fingerprint=table.dataset_fingerprint)
    best = (np.inf, 0, None, None)
    t_start = time.monotonic()
    try:
        for step in range(1, cfg.max_steps + 1):
            a0, a1 = sampler.sample(batch_rng, cfg.batch_size)
            t = _draw_t(cfg, "gen", batch_rng, cfg.batch_size)
            x = scin_mod.normalize(mix(a0, a1, t), t, table)
            if step % cfg.val_every == 1 or cfg.max_steps == 1:
                _canary_check(sampler, table, cfg, canary_rng, step)
            x = perturb(x, t, cfg.noise, noise_rng)
            xt = torch.from_numpy(x[:, None])
            tt = torch.from_numpy(t)
            y0 = torch.from_numpy(scin_mod.normalize_target(a0, 0, target_stats)[:, None])
            y1 = torch.from_numpy(scin_mod.normalize_target(a1, 1, target_stats)[:, None])

            opt0.zero_grad()
            loss0 = mae_loss(gen0(xt, tt), y0)
            loss0.backward()
            _clip(gen0, cfg)
            opt0.step()

            opt1.zero_grad()
            loss1 = mae_loss(gen1(xt, 1.0 - tt), y1)
            loss1.backward()
            _clip(gen1, cfg)
            opt1.step()
            for s in scheds:
                s.step()

            loss = loss0.item() + loss1.item()
            if not np.isfinite(loss):
                raise DivergenceError(f"generator loss became non-finite at step {step}")
            report.train_curve.append((step, loss))

            if step % cfg.val_every == 0 or step == cfg.max_steps:
                gen0.eval()
                gen1.eval()
                with torch.no_grad():
                    vloss = float(mae_loss(gen0(val_x, val_t), val_y0)) + float(
                        mae_loss(gen1(val_x, 1.0 - val_t), val_y1)
                    )
                gen0.train()
                gen1.train()
                report.val_curve.append((step, vloss))
                logger.log(step=step, component="gen", loss=loss, val_loss=vloss,
                           lr=opt0.param_groups[0]["lr"])
                if vloss < best[0]:
                    best = (vloss, step, _snapshot(gen0), _snapshot(gen1))
    finally:
        logger.close()

    if best[2] is not None:
        gen0.load_state_dict(best[2])
        gen1.load_state_dict(best[3])
    gen0.eval()
    gen1.eval()
    report.best_step = best[1]
    report.wall_clock_s = time.monotonic() - t_start
    report.final_val = {"val_mae_sum": best[0]}
    gen0.trained_fingerprint = table.dataset_fingerprint
    gen1.trained_fingerprint = table.dataset_fingerprint
    return gen0, gen1, report


def train_regressor(
    fs: data_mod.ChannelFrameSet,
    table: scin_mod.ScinTable,
    cfg: TrainConfig,
    spec: RegSpec | None = None,
):
    """Train the ratio regressor; returns (reg, TrainReport)."""
    _check_setup(fs, table, cfg)
    spec = spec or RegSpec()
    torch.manual_seed(cfg.seed)
    reg = RegressorNet(spec)
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.learning_rate)
    scheds = _make_schedulers(cfg, opt)

    batch_rng, noise_rng, val_rng, canary_rng = _spawn_rngs(cfg.seed, 4)
    sampler = data_mod.PatchSampler(fs, "train", cfg.patch_size)
    val_x, val_t, _, _ = _fixed_val_set(fs, table, cfg, val_rng)

    logger = _Logger(cfg.log_path)
    report = TrainReport(table_fingerprint=table.dataset_fingerprint)
    best = (np.inf, 0, None)
    t_start = time.monotonic()
    try:
        for step in range(1, cfg.max_steps + 1):
            a0, a1 = sampler.sample(batch_rng, cfg.batch_size)
            t = _draw_t(cfg, "reg", batch_rng, cfg.batch_size)
            x = scin_mod.normalize(mix(a0, a1, t), t, table)
            if step % cfg.val_every == 1 or cfg.max_steps == 1:
                _canary_check(sampler, table, cfg, canary_rng, step)
            x = perturb(x, t, cfg.noise, noise_rng)

            opt.zero_grad()
            loss = mse_loss(reg(torch.from_numpy(x[:, None])), torch.from_numpy(t))
            loss.backward()
            _clip(reg, cfg)
            opt.step()
            for s in scheds:
                s.step()

            loss_f = loss.item()
            if not np.isfinite(loss_f):
                raise DivergenceError(f"regressor loss became non-finite at step {step}")
            report.train_curve.append((step, loss_f))

            if step % cfg.val_every == 0 or step == cfg.max_steps:
                reg.eval()
                with torch.no_grad():
                    pred = reg(val_x)
                    vloss = float(mse_loss(pred, val_t))
                    vmae = float((pred - val_t).abs().mean())
                reg.train()
                report.val_curve.append((step, vloss))
                logger.log(step=step, component="reg", loss=loss_f, val_loss=vloss,
                           val_mae=vmae, lr=opt.param_groups[0]["lr"])
                if vloss < best[0]:
                    best = (vloss, step, _snapshot(reg))
    finally:
        logger.close()

    if best[2] is not None:
        reg.load_state_dict(best[2])
    reg.eval()
    with torch.no_grad():
        final_mae = float((reg(val_x) - val_t).abs().mean())
    report.best_step = best[1]
    report.wall_clock_s = time.monotonic() - t_start
    report.final_val = {"val_mse": best[0], "val_mae": final_mae}
    reg.trained_fingerprint = table.dataset_fingerprint
    return reg, report


def make_bundle(
    gen0: GeneratorNet,
    gen1: GeneratorNet,
    reg: RegressorNet,
    table: scin_mod.ScinTable,
    target_stats: scin_mod.TargetChannelStats,
    cfg: TrainConfig,
) -> ModelBundle:
    """Assemble a deployable bundle, refusing mixed-provenance components."""
    for name, net in (("gen0", gen0), ("gen1", gen1), ("reg", reg)):
        trained_against = getattr(net, "trained_fingerprint", None)
        if trained_against is not None and trained_against != table.dataset_fingerprint:
            raise FingerprintMismatchError(
                f"{name} was trained against table {trained_against}, "
                f"bundle table is {table.dataset_fingerprint}"
            )
    snapshot = asdict(cfg)
    snapshot.pop("log_path", None)
    snapshot["gen0_spec"] = asdict(gen0.spec)
    snapshot["gen1_spec"] = asdict(gen1.spec)
    snapshot["reg_spec"] = asdict(reg.spec)
    return ModelBundle(
        gen0=gen0,
        gen1=gen1,
        reg=reg,
        scin_table=table,
        target_stats=target_stats,
        train_config_snapshot=snapshot,
    )


def _spawn_rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _snapshot(net):
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _clip(net, cfg: TrainConfig):
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip_norm)


def _make_schedulers(cfg: TrainConfig, *optimizers):
    if cfg.lr_schedule == "constant":
        return []
    return [
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.max_steps, eta_min=1e-5)
        for opt in optimizers
    ]

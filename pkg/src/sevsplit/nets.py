"""Network architectures: two severity-conditioned generators and a ratio regressor.

Generators are small U-Nets that receive the mixing severity as a scalar,
either broadcast to an extra input plane (default) or as feature-wise
modulation.  The regressor is a conv stack with a bounded scalar head.  All
modules are plain torch; training logic lives elsewhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, FingerprintMismatchError
from . import scin as scin_mod

BUNDLE_FORMAT_VERSION = 1
CONDITIONING_MODES = ("scalar-broadcast-concat", "feature-film")
REG_HEADS = ("sigmoid-bounded", "clamped-linear")


@dataclass
class GenSpec:
    """Architecture of one generator."""

    channel_index: int
    depth: int = 3
    base_width: int = 16
    conditioning_mode: str = "scalar-broadcast-concat"
    patch_size: int = 48

    def validate(self):
        problems = []
        if self.channel_index not in (0, 1):
            problems.append(f"channel_index must be 0 or 1, got {self.channel_index}")
        if self.depth < 2:
            problems.append(f"depth must be >= 2, got {self.depth}")
        if self.base_width < 4 or self.base_width % 4 != 0:
            problems.append(f"base_width must be a positive multiple of 4, got {self.base_width}")
        if self.conditioning_mode not in CONDITIONING_MODES:
            problems.append(
                f"conditioning_mode {self.conditioning_mode!r} not in {CONDITIONING_MODES}"
            )
        if self.patch_size < 2 ** (self.depth - 1):
            problems.append(
                f"patch_size {self.patch_size} too small for depth {self.depth}"
            )
        return problems


@dataclass
class RegSpec:
    """Architecture of the mixing-ratio regressor."""

    depth: int = 3
    base_width: int = 16
    head: str = "sigmoid-bounded"

    def validate(self):
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 4 or self.base_width % 4 != 0:
            problems.append(f"base_width must be a positive multiple of 4, got {self.base_width}")
        if self.head not in REG_HEADS:
            problems.append(f"head {self.head!r} not in {REG_HEADS}")
        return problems


class ConvBlock(nn.Module):
    """Two 3x3 conv + group-norm + ReLU layers."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.GroupNorm(4, c_out),
            nn.ReLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.GroupNorm(4, c_out),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x)


class GeneratorNet(nn.Module):
    """U-Net predicting one normalized clean channel from a mixed input.

    forward(x, severity) takes x shaped (B, 1, H, W) with H and W divisible by
    2**(depth-1), and a severity tensor shaped (B,) with values in [0, 1].
    """

    def __init__(self, spec: GenSpec):
        super().__init__()
        problems = spec.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
        self.spec = spec
        widths = [spec.base_width * 2**k for k in range(spec.depth)]
        in_ch = 2 if spec.conditioning_mode == "scalar-broadcast-concat" else 1
        self.encoders = nn.ModuleList()
        for k in range(spec.depth - 1):
            self.encoders.append(ConvBlock(in_ch if k == 0 else widths[k - 1], widths[k]))
        self.bottleneck = ConvBlock(widths[spec.depth - 2], widths[spec.depth - 1])
        self.decoders = nn.ModuleList(
            ConvBlock(widths[k + 1] + widths[k], widths[k])
            for k in reversed(range(spec.depth - 1))
        )
        self.out = nn.Conv2d(widths[0], 1, 1)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2)
        if spec.conditioning_mode == "feature-film":
            self.film = nn.Linear(1, 2 * widths[0])

    def forward(self, x, severity):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigurationError(f"expected input (B, 1, H, W), got {tuple(x.shape)}")
        factor = 2 ** (self.spec.depth - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigurationError(
                f"input H/W must be divisible by {factor}, got {tuple(x.shape[2:])}"
            )
        if not torch.is_tensor(severity):
            severity = torch.as_tensor(severity, dtype=x.dtype)
        severity = severity.to(x.dtype)
        if severity.ndim == 0:
            severity = severity.expand(x.shape[0])
        if severity.ndim != 1 or severity.shape[0] != x.shape[0]:
            raise ConfigurationError(
                f"severity must be shaped (B,)={x.shape[0]}, got {tuple(severity.shape)}"
            )
        if bool((severity < 0).any()) or bool((severity > 1).any()):
            raise ConfigurationError("severity values must lie in [0, 1]")

        if self.spec.conditioning_mode == "scalar-broadcast-concat":
            plane = severity[:, None, None, None].expand(-1, 1, x.shape[2], x.shape[3])
            h = torch.cat([x, plane], dim=1)
        else:
            h = x
        skips = []
        for k, enc in enumerate(self.encoders):
            h = enc(h)
            if k == 0 and self.spec.conditioning_mode == "feature-film":
                gamma, beta = self.film(severity[:, None]).chunk(2, dim=1)
                h = h * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for dec, skip in zip(self.decoders, reversed(skips)):
            h = dec(torch.cat([self.up(h), skip], dim=1))
        return self.out(h)


class RegressorNet(nn.Module):
    """Conv stack + pooled MLP head estimating the mixing ratio in [0, 1]."""

    def __init__(self, spec: RegSpec):
        super().__init__()
        problems = spec.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
        self.spec = spec
        layers = []
        c_in = 1
        for k in range(spec.depth):
            c_out = spec.base_width * 2**k
            layers += [
                nn.Conv2d(c_in, c_out, 3, padding=1),
                nn.GroupNorm(4, c_out),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(c_in, 32), nn.ReLU(), nn.Linear(32, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigurationError(f"expected input (B, 1, H, W), got {tuple(x.shape)}")
        if min(x.shape[2], x.shape[3]) < 2**self.spec.depth:
            raise ConfigurationError(
                f"input smaller than the receptive floor {2 ** self.spec.depth}"
            )
        h = self.features(x).mean(dim=(2, 3))
        raw = self.head(h).squeeze(1)
        if self.spec.head == "sigmoid-bounded":
            return torch.sigmoid(raw)
        return torch.clamp(raw, 0.0, 1.0)


# ---------------------------------------------------------------------------
# numpy-facing forward wrappers
# ---------------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, np.float32)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ConfigurationError(f"expected (H, W) or (B, H, W) input, got shape {x.shape}")


def gen_forward(net: GeneratorNet, x, severity):
    """Run a generator on numpy input; severity is a float or per-sample array."""
    batch, squeeze = _as_batch(x)
    sev = np.asarray(severity, np.float32)
    if sev.ndim == 0:
        sev = np.full(batch.shape[0], float(sev), np.float32)
    with torch.no_grad():
        out = net(torch.from_numpy(batch[:, None]), torch.from_numpy(sev)).numpy()[:, 0]
    return out[0] if squeeze else out


def reg_forward(net: RegressorNet, x):
    """Run the regressor on numpy input; returns a float or per-sample array."""
    batch, squeeze = _as_batch(x)
    with torch.no_grad():
        out = net(torch.from_numpy(batch[:, None])).numpy()
    return float(out[0]) if squeeze else out


# ---------------------------------------------------------------------------
# bundle: the full deployable model
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed for inference: nets, their table, and target stats."""

    gen0: GeneratorNet
    gen1: GeneratorNet
    reg: RegressorNet
    scin_table: scin_mod.ScinTable
    target_stats: scin_mod.TargetChannelStats
    train_config_snapshot: dict = field(default_factory=dict)

    @property
    def scin_table_ref(self) -> str:
        return self.scin_table.dataset_fingerprint


def config_hash(config: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def save_bundle(bundle: ModelBundle, out_dir, metrics: dict | None = None) -> Path:
    """Write a bundle directory: manifest + parameter blobs + table JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(bundle.gen0.state_dict(), out_dir / "gen0.pt")
    torch.save(bundle.gen1.state_dict(), out_dir / "gen1.pt")
    torch.save(bundle.reg.state_dict(), out_dir / "reg.pt")
    scin_mod.save_table(bundle.scin_table, out_dir / "scin_table.json")
    manifest = {
        "version": BUNDLE_FORMAT_VERSION,
        "gen0_spec": asdict(bundle.gen0.spec),
        "gen1_spec": asdict(bundle.gen1.spec),
        "reg_spec": asdict(bundle.reg.spec),
        "scin_fingerprint": bundle.scin_table_ref,
        "target_stats": bundle.target_stats.as_dict(),
        "train_config_snapshot": bundle.train_config_snapshot,
        "train_config_hash": config_hash(bundle.train_config_snapshot),
        "metrics": metrics or {},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


def load_bundle(bundle_dir) -> ModelBundle:
    """Load a bundle directory, verifying version and table fingerprint."""
    bundle_dir = Path(bundle_dir)
    manifest_path = bundle_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"{bundle_dir} is not a bundle (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != BUNDLE_FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported bundle version {manifest.get('version')}"
        )
    table = scin_mod.load_table(
        bundle_dir / "scin_table.json", expect_fingerprint=manifest["scin_fingerprint"]
    )
    gen0 = GeneratorNet(GenSpec(**manifest["gen0_spec"]))
    gen1 = GeneratorNet(GenSpec(**manifest["gen1_spec"]))
    reg = RegressorNet(RegSpec(**manifest["reg_spec"]))
    gen0.load_state_dict(torch.load(bundle_dir / "gen0.pt", weights_only=True))
    gen1.load_state_dict(torch.load(bundle_dir / "gen1.pt", weights_only=True))
    reg.load_state_dict(torch.load(bundle_dir / "reg.pt", weights_only=True))
    for net in (gen0, gen1, reg):
        net.eval()
        net.trained_fingerprint = manifest["scin_fingerprint"]
    return ModelBundle(
        gen0=gen0,
        gen1=gen1,
        reg=reg,
        scin_table=table,
        target_stats=scin_mod.TargetChannelStats(**manifest["target_stats"]),
        train_config_snapshot=manifest.get("train_config_snapshot", {}),
    )

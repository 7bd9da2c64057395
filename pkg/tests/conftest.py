"""Shared fixtures: one small synthetic dataset, table, and trained bundle.

Everything here runs at toy scale (64x64 frames, 300-step trainings) so the
whole unit suite stays fast; the acceptance tests build their own full-scale
artifacts.  Torch is pinned to one thread for run-to-run reproducibility.
"""

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from sevsplit import (  # noqa: E402
    AcquisitionInput,
    SynthConfig,
    TrainConfig,
    build_table,
    compute_target_stats,
    make_bundle,
    mix,
    synthesize_dataset,
    train_generators,
    train_regressor,
)

SMALL_SYNTH = SynthConfig(seed=7, frame_size=(64, 64), frames_per_split=(6, 2, 2))
SMALL_PATCH = 32

# One line per acceptance check, echoed after the test summary so the
# verdicts are visible even with output capture enabled.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_fs():
    return synthesize_dataset(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_table(small_fs):
    return build_table(
        small_fs, patch_size=SMALL_PATCH, n_bins=100, samples_per_bin_target=256, rng_seed=11
    )


@pytest.fixture(scope="session")
def small_target_stats(small_fs):
    return compute_target_stats(small_fs, patch_size=SMALL_PATCH, n_samples=1024, rng_seed=1)


@pytest.fixture(scope="session")
def small_bundle(small_fs, small_table, small_target_stats):
    reg_cfg = TrainConfig(
        batch_size=8, max_steps=300, patch_size=SMALL_PATCH, val_every=100,
        seed=21, lr_schedule="cosine",
    )
    gen_cfg = TrainConfig(
        batch_size=4, max_steps=300, patch_size=SMALL_PATCH, val_every=100, seed=31
    )
    reg, _ = train_regressor(small_fs, small_table, reg_cfg)
    gen0, gen1, _ = train_generators(small_fs, small_table, small_target_stats, gen_cfg)
    return make_bundle(gen0, gen1, reg, small_table, small_target_stats, gen_cfg)


def make_acquisition(fs, t, split="test", name=None):
    """Blend one split's frame pairs at ratio t into an acquisition."""
    sub = fs.subset(split) if fs.split_counts else fs
    frames = [mix(c0, c1, t) for c0, c1 in zip(sub.frames_c0, sub.frames_c1)]
    return AcquisitionInput(name=name or f"{fs.name}-t{t:g}", frames=frames), sub


@pytest.fixture
def rng():
    return np.random.default_rng(123)

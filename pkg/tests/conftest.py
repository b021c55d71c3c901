import re

import pytest

from avsync.synthetic import SyntheticConfig, generate_dataset


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    outcomes = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL"), ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_acceptance\.py::test_(ac\d+)_(\w+)",
                          getattr(rep, "nodeid", ""))
            if not m:
                continue
            key = "AC-" + m.group(1)[2:]
            name = m.group(2).replace("_", " ")
            if label == "FAIL" or outcomes.get(key, ("", ""))[1] != "FAIL":
                outcomes.setdefault(key, (name, label))
                if label == "FAIL":
                    outcomes[key] = (name, "FAIL")
    if outcomes:
        terminalreporter.section("acceptance criteria")
        for key in sorted(outcomes, key=lambda k: int(k.split("-")[1])):
            name, label = outcomes[key]
            terminalreporter.write_line(f"{key} ({name}): {label}")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small deterministic dataset shared by training/CLI tests.

    Returns (manifest, dataset_root).
    """
    root = tmp_path_factory.mktemp("tinydata")
    cfg = SyntheticConfig(n_clips=12, clip_len_frames=50, seed=3)
    manifest = generate_dataset(cfg, root)
    return manifest, root


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_dataset):
    """A briefly trained small model checkpoint for CLI round-trip tests."""
    from avsync.encoders import EncoderConfig
    from avsync.sync_model import CrossModalConfig
    from avsync.training import SamplerConfig, TrainConfig, train_loop

    manifest, _ = tiny_dataset
    out = tmp_path_factory.mktemp("tinyrun")
    enc = EncoderConfig(
        audio_stage_channels=[4, 8], visual_stage_channels=[4, 8],
        audio_blocks_per_stage=[0, 0], visual_blocks_per_stage=[0, 0])
    sync = CrossModalConfig(layers=1, heads=2, model_dim=8, ffn_dim=16, dropout=0.0)
    final = train_loop(manifest, enc, sync, SamplerConfig(seed=0),
                       TrainConfig(max_steps=5, eval_every=0, batch_size=4),
                       out)
    return final

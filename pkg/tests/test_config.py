from dataclasses import fields

import pytest

from hazeforge.config import SECTIONS, RunConfig, load_config, parse_config
from hazeforge.errors import ConfigError, MissingFileError

# one non-default value per field, used to check every precedence layer
FILE_VALUES = {
    "source": "/data/scenes_a", "n_images": 7, "draws": 3, "image_size": 128, "test_fraction": 0.3,
    "A_min": 0.6, "A_max": 1.1, "beta_min": 0.5, "beta_max": 1.5, "per_channel_A": True,
    "scale": 0.25, "depth": 5, "conditional_d": True, "preset": "T-L2", "seed": 11,
    "batch_size": 2, "stage1_iters": 17, "stage2_iters": 19, "lr": 1e-3, "beta1": 0.8,
    "beta2": 0.99, "eps": 1e-7, "d_updates": 2, "stage2_t_weight": 0.5, "train_d_stage2": False,
    "feature_seed": 99, "smooth_window": 5, "lambda_a": 0.01, "lambda_G": 2.0, "lambda_p": 0.5,
    "normalize": "sum", "data_dir": "d1", "out_dir": "o1",
}
CLI_VALUES = {
    "source": "/data/scenes_b", "n_images": 9, "draws": 4, "image_size": 256, "test_fraction": 0.1,
    "A_min": 0.55, "A_max": 1.15, "beta_min": 0.45, "beta_max": 1.55, "per_channel_A": False,
    "scale": 0.5, "depth": 7, "conditional_d": False, "preset": "I-L2-T", "seed": 12,
    "batch_size": 3, "stage1_iters": 23, "stage2_iters": 29, "lr": 5e-4, "beta1": 0.7,
    "beta2": 0.9, "eps": 1e-6, "d_updates": 3, "stage2_t_weight": 2.0, "train_d_stage2": True,
    "feature_seed": 98, "smooth_window": 6, "lambda_a": 0.02, "lambda_G": 3.0, "lambda_p": 0.25,
    "normalize": "batch", "data_dir": "d2", "out_dir": "o2",
}


def _file_text(values):
    lines = []
    for sec, keys in SECTIONS.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {values[k]}" for k in keys]
    return "\n".join(lines) + "\n"


def test_sections_cover_every_field():
    assert sorted(k for keys in SECTIONS.values() for k in keys) == sorted(f.name for f in fields(RunConfig))
    assert set(FILE_VALUES) == set(CLI_VALUES) == {f.name for f in fields(RunConfig)}


def test_round_trip_identical():
    for cfg in (RunConfig(), RunConfig(**FILE_VALUES)):
        assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("name", sorted(FILE_VALUES))
def test_precedence_per_field(tmp_path, name):
    default = getattr(RunConfig(), name)
    path = tmp_path / "c.ini"
    path.write_text(_file_text(FILE_VALUES))
    assert getattr(load_config(None), name) == default
    from_file = getattr(load_config(path), name)
    assert from_file == FILE_VALUES[name] != default
    over = getattr(load_config(path, **{name: CLI_VALUES[name]}), name)
    assert over == CLI_VALUES[name] != from_file
    # a None override means "flag not given"
    assert getattr(load_config(path, **{name: None}), name) == from_file


def test_partial_file_keeps_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nseed = 5\n")
    cfg = load_config(p)
    assert cfg.seed == 5 and cfg.batch_size == RunConfig().batch_size


@pytest.mark.parametrize(
    "text",
    ["[nope]\nx = 1\n", "[train]\nunknown = 1\n", "[train]\nseed = abc\n", "garbage without section", "[data]\nimage_size = 65\n"],
)
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_config(tmp_path / "none.ini")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        RunConfig(preset="T-L3")

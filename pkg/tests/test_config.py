from __future__ import annotations

import pytest

from satp.config import ConfigError, RunConfig, dump_toml, load_config
from satp.selfaware import Estimator, Fusion, LabelForm


def test_defaults_are_valid_and_full_scale() -> None:
    cfg = load_config(None)
    assert cfg.model.feat_channels == 64
    assert cfg.data.synthetic.records == 23
    assert cfg.train.train_fraction == pytest.approx(16 / 23)
    sa = cfg.sa_config()
    assert sa.fusion is Fusion.CONCAT
    assert sa.estimator is Estimator.LSTM
    assert sa.label_form is LabelForm.DISTANCE


def test_unknown_key_rejected_with_path(tmp_path) -> None:
    path = tmp_path / "c.toml"
    path.write_text("[model]\nn_maxx = 3\n")
    with pytest.raises(ConfigError, match="model.n_maxx"):
        load_config(path)


def test_wrong_type_rejected(tmp_path) -> None:
    path = tmp_path / "c.toml"
    path.write_text("[train]\nlr = \"fast\"\n")
    with pytest.raises(ConfigError, match="train.lr"):
        load_config(path)


def test_invalid_values_rejected(tmp_path) -> None:
    path = tmp_path / "c.toml"
    path.write_text("[selfaware]\nfusion = \"telepathy\"\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[data]\nsource = \"csv\"\n")
    with pytest.raises(ConfigError, match="csv_paths"):
        load_config(path)


def test_overrides_merge_into_defaults(tmp_path) -> None:
    path = tmp_path / "c.toml"
    path.write_text("seed = 11\n[model]\nhidden = 16\n[data.synthetic]\nrecords = 4\n")
    cfg = load_config(path)
    assert cfg.seed == 11
    assert cfg.model.hidden == 16
    assert cfg.data.synthetic.records == 4
    assert cfg.model.feat_channels == 64  # untouched default


def test_print_config_roundtrip(tmp_path) -> None:
    cfg = RunConfig()
    cfg.seed = 5
    cfg.model.hidden = 24
    cfg.train.lr = 0.00125
    text = dump_toml(cfg)
    path = tmp_path / "echo.toml"
    path.write_text(text)
    again = load_config(path)
    assert dump_toml(again) == text
    assert again.train.lr == cfg.train.lr
    assert again.model.hidden == 24


def test_digest_tracks_architecture_only() -> None:
    a, b = RunConfig(), RunConfig()
    assert a.digest() == b.digest()
    b.seed = 999
    b.train.lr = 123.0
    assert a.digest() == b.digest()  # training knobs don't change the architecture
    b.model.hidden = 8
    assert a.digest() != b.digest()

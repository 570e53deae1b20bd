import json
import os

import pytest

import fmscan
from fmscan.errors import ConfigError
from fmscan.set_up import RunConfig, load_config


def test_set_up_run_config_defaults():
    act = RunConfig()
    assert (act.basis, act.degree, act.n_knots) == ("bspline", 3, 13)
    assert (act.inertia_cap, act.max_fraction, act.M) == (0.95, 0.5, 999)
    assert act.mode == "functional"
    assert act.to_dict()["domain"] is None


@pytest.mark.parametrize(
    "kwargs",
    [
        {"inertia_cap": 0},
        {"inertia_cap": 1.2},
        {"max_fraction": 0.6},
        {"level": 1},
        {"M": 0},
        {"mode": "spatial"},
        {"family": "gamma"},
        {"domain": (5, 1)},
        {"secondary_level": 0},
    ],
)
def test_set_up_run_config_invalid(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_set_up_save_default_config(user_defaults):
    assert fmscan.save_default("M", 99) == "Saved M default to config"
    assert user_defaults.exists()
    assert load_config().M == 99

    fmscan.save_default("domain", (0, 21))
    assert load_config().domain == (0.0, 21.0)

    assert fmscan.save_default("M") == "Deleted M default from config"
    assert load_config().M == 999

    with pytest.raises(ConfigError):
        fmscan.save_default("colour", "red")
    with pytest.raises(ConfigError):
        fmscan.save_default("M", "many")


def test_set_up_save_default_environ():
    os.environ["fmscan_M"] = "49"
    os.environ["fmscan_refit"] = "false"
    act = load_config()
    assert act.M == 49
    assert act.refit is False


def test_set_up_ordering(tmp_path):
    fmscan.save_default("M", 99)
    fmscan.save_default("seed", 5)
    os.environ["fmscan_M"] = "49"
    assert load_config().M == 49
    assert load_config().seed == 5

    pth = tmp_path / "run.json"
    pth.write_text(json.dumps({"M": 19, "mode": "none", "domain": [0, 10]}))
    act = load_config(pth)
    assert (act.M, act.mode, act.domain) == (19, "none", (0.0, 10.0))

    act = load_config(pth, M="9", mode=None)
    assert (act.M, act.mode) == (9, "none")


def test_set_up_load_config_invalid(tmp_path):
    pth = tmp_path / "run.json"
    pth.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(ConfigError):
        load_config(pth)
    pth.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(pth)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    with pytest.raises(ConfigError):
        load_config(refit="maybe")
    with pytest.raises(ConfigError):
        load_config(max_fraction="0.9")

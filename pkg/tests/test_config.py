import dataclasses

import pytest

from gpbalance.config import (
    ConfigError,
    load_scenario,
    load_scenario_text,
    parse_override,
    parse_value,
    resolve_scenario,
    shipped_scenarios,
)

MINIMAL = """
[plant]
model = furuta
[reference]
terms = (((0.5, 1.0, 0.0),),)
"""


def test_shipped_scenarios_load():
    names = shipped_scenarios()
    assert names == ["furuta_tracking", "three_link_eic_failure", "three_link_neic", "three_link_peic"]
    for name in names:
        cfg = load_scenario(name)
        assert cfg.name == name


def test_three_link_scenarios_share_the_learning_setup():
    cfgs = [load_scenario(n) for n in ("three_link_eic_failure", "three_link_peic", "three_link_neic")]
    for sec in ("plant", "nominal", "gp", "excitation"):
        assert all(getattr(c, sec) == getattr(cfgs[0], sec) for c in cfgs), sec
    assert [c.controller.kind for c in cfgs] == ["eic", "peic", "neic"]


@pytest.mark.parametrize("name", ["furuta_tracking", "three_link_neic"])
def test_ini_roundtrip(name):
    cfg = load_scenario(name)
    back = load_scenario_text(cfg.to_ini(), name)
    assert dataclasses.asdict(back) == dataclasses.asdict(cfg)


def test_value_parsing():
    assert parse_value(" 10 ") == 10
    assert parse_value("0.5") == 0.5
    assert parse_value("(1, 2)") == (1, 2)
    assert parse_value("[1.0, 10.0]") == [1.0, 10.0]
    assert parse_value("True") is True and parse_value("off") is False
    assert parse_value("none") is None
    assert parse_value("peic") == "peic"


def test_overrides_apply_after_file():
    cfg = load_scenario("three_link_neic", ["controller.alpha=1.5", "sim.t_end=5", "plant.m3=0.4",
                                            "disturbances.kick=(1.0, 2, 0.1, 'qd')"])
    assert cfg.controller.alpha == 1.5 and cfg.sim.t_end == 5
    assert cfg.plant.params["m3"] == 0.4
    kick = [d for d in cfg.disturbances if d.key == "kick"][0]
    assert (kick.t, kick.index, kick.jump, kick.kind) == (1.0, 2, 0.1, "qd")


def test_minimal_file_uses_defaults():
    cfg = load_scenario_text(MINIMAL)
    assert cfg.controller.kind == "eic" and cfg.sim.control_rate == 400.0
    assert cfg.disturbances == []


def test_scenario_from_path(tmp_path):
    path = tmp_path / "mine.ini"
    path.write_text(MINIMAL)
    name, text = resolve_scenario(path)
    assert name == "mine" and "furuta" in text
    assert load_scenario(str(path)).name == "mine"


@pytest.mark.parametrize(
    "override",
    ["controller.kind=lqr", "sim.plant=hardware", "sim.t_end=0", "controller.nope=1", "bogus.key=1",
     "noequals", "nodot=1", "disturbances.kick=(1.0, 2)", "disturbances.kick=(99.0, 0, 0.1)"],
)
def test_invalid_overrides(override):
    with pytest.raises(ConfigError):
        load_scenario_text(MINIMAL, overrides=[override])


def test_invalid_files():
    with pytest.raises(ConfigError):
        load_scenario_text("[plant]\nmodel = furuta\n")  # no reference
    with pytest.raises(ConfigError):
        load_scenario_text("not an ini file")
    with pytest.raises(ConfigError):
        load_scenario("no_such_scenario")


def test_parse_override_splits_on_first_dot_and_equals():
    assert parse_override("reference.terms=(((1.0, 2.0, 0.0),),)") == ("reference", "terms", (((1.0, 2.0, 0.0),),))
    assert parse_override("sim.q0=(0.0, 1.5)") == ("sim", "q0", (0.0, 1.5))

import os

import pytest
from context import hivopt, configs_dir

from hivopt.config import ConfigError, ScenarioConfig, format_rate, parse_rate, scenario_name
from hivopt.defaults import default_x_values


def test_defaults_fill_missing_sections():
    config = ScenarioConfig.from_dict(None)
    assert config.n_int == 50
    assert config.x_values == list(default_x_values)
    assert config.initial_guess == "replicated"
    assert not config.calibration["enabled"]
    assert config.scenario_names() == ["x_0", "x_1-60", "x_1-24", "x_1-12"]


def test_rates_accept_fractions():
    assert parse_rate("1/12") == 1.0 / 12.0
    assert parse_rate(" 1 / 360 ") == 1.0 / 360.0
    assert parse_rate(0.5) == 0.5
    assert format_rate(1.0 / 24.0) == "1/24"
    assert format_rate(0.0) == "0"
    assert scenario_name(1.0 / 12.0) == "x_1-12"
    for bad in ("one twelfth", "1/0", None):
        with pytest.raises(ConfigError):
            parse_rate(bad)


@pytest.mark.parametrize("raw, message", [
    ({"budget": 1.0}, "budget"),
    ({"grid": {"horizon": 24.0, "steps": 2}}, "steps"),
    ({"model": {"gamma": 0.1}}, "gamma"),
    ({"initial_state": {"E": 1.0}}, "E"),
    ({"solver": {"trust_radius": 1.0}}, "trust_radius"),
])
def test_unknown_keys_are_rejected(raw, message):
    with pytest.raises(ConfigError, match=message):
        ScenarioConfig.from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"grid": {"horizon": 25.0, "interval": 12.0}},
    {"grid": {"collocation_points": 1}},
    {"model": {"mu": -1.0}},
    {"costs": {"tap_treatment": -5.0}},
    {"budget_limit": -1.0},
    {"x_values": ["1/12", "-1/24"]},
    {"x_values": "1/12"},
    {"initial_state": {"S_H": -3.0}},
    {"initial_guess": "optimistic"},
    {"solver": {"hessian": "newton"}},
    {"calibration": {"lambda_box": [2.0, 1.0]}},
])
def test_invalid_values_are_rejected(raw):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(raw)


def test_solver_values_written_without_dot():
    config = ScenarioConfig.from_dict({"solver": {"kkt_tol": "1e-6", "max_iter": "40", "control_scale": 1e-4}})
    assert config.solver.kkt_tol == 1e-6
    assert config.solver.max_iter == 40
    assert config.control_scale == 1e-4


def test_dump_and_load_round_trip(tmp_path):
    config = ScenarioConfig.from_dict({
        "grid": {"horizon": 36.0, "interval": 12.0, "collocation_points": 4},
        "x_values": ["0", "1/12"],
        "model": {"mu": "1/360", "pi_own": 0.3},
        "budget_limit": 0.0,
        "initial_guess": "simulated",
    })
    path = str(tmp_path / "scenario.yaml")
    config.dump(path)
    reloaded = ScenarioConfig.load(path)
    assert reloaded.to_dict() == config.to_dict()
    assert reloaded.model == config.model
    assert reloaded.x_values == [0.0, 1.0 / 12.0]


def test_invalid_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("grid: [horizon\n")
    with pytest.raises(ConfigError):
        ScenarioConfig.load(str(path))


def test_shipped_configs():
    full = ScenarioConfig.load(os.path.join(configs_dir, "full.yaml"))
    assert full.model.mu == 1.0 / 360.0
    assert full.n_int == 50 and full.n_cp == 5
    assert full.x_values == [0.0, 1.0 / 60.0, 1.0 / 24.0, 1.0 / 12.0]

    desk = ScenarioConfig.load(os.path.join(configs_dir, "desk.yaml"))
    assert desk.n_int == 20
    assert desk.solver.max_iter == 300
    assert desk.output_dir == "results/desk"


def test_scenario_params_override_prep_dropout():
    config = ScenarioConfig.from_dict({"model": {"prep_dropout": 0.5}})
    params = config.scenario_params(1.0 / 24.0)
    assert params.prep_dropout == 1.0 / 24.0
    assert params.lambda_h == config.model.lambda_h
    assert config.replace(budget_limit=5.0).budget_limit == 5.0
    with pytest.raises(ConfigError):
        config.replace(interval=7.0)

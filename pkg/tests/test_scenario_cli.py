import os

import pytest
from context import hivopt, configs_dir

import jax.numpy as jnp
import numpy as np
import pandas as pd
import yaml

from hivopt.config import ScenarioConfig
from hivopt.hiv_model import CostParams, ModelParams
from hivopt.ode_oracle import ControlSchedule, evaluate_policy
from hivopt.scenario_cli import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    dominant_arms,
    emit_outputs,
    last_dominance_switch,
    main,
    recurring_switch,
    run_scenarios,
    solve_scenario,
    terminal_switch,
)
from hivopt.scenario_result import ScenarioResult, state_columns, summary_columns


def write_config(tmp_path, **sections):
    raw = {"grid": {"horizon": 24.0, "interval": 12.0, "collocation_points": 3}, "x_values": ["1/12"]}
    raw.update(sections)
    path = tmp_path / "scenario.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_last_dominance_switch():
    times = [12.0, 24.0, 36.0, 48.0]
    assert last_dominance_switch(times, [1.0, 2.0, 5.0, 6.0], [2.0, 3.0, 4.0, 7.0]) == 48.0
    assert last_dominance_switch(times, [1.0, 2.0, 5.0, 8.0], [2.0, 3.0, 4.0, 7.0]) == 36.0
    assert last_dominance_switch(times, [1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]) is None
    # a tie keeps the previous ordering
    assert last_dominance_switch(times[:3], [1.0, 1.0, 3.0], [2.0, 1.0, 2.0]) == 36.0


def test_dominant_arms_and_terminal_switch():
    costs = CostParams.defaults()
    schedule = ControlSchedule(dt=12.0, values=jnp.array([[1e-3, 0.0], [0.0, 1e-3], [0.0, 0.0], [1e-3, 1e-3]]))
    assert dominant_arms(schedule, costs) == ["prep", "tap", "none", "tap"]
    assert terminal_switch(schedule, costs) == {"from": "none", "to": "tap", "time": 36.0, "distance": 12.0}
    assert terminal_switch(ControlSchedule.constant(3, 12.0, 1e-3, 0.0), costs) is None
    assert dominant_arms(ControlSchedule.zeros(2, 12.0), costs) == ["none", "none"]


def test_recurring_switch():
    switch = {"from": "prep", "to": "tap", "distance": 12.0}
    assert recurring_switch([switch, dict(switch, distance=13.0)], tol=6.0)
    assert not recurring_switch([switch, dict(switch, distance=36.0)], tol=6.0)
    assert not recurring_switch([switch, dict(switch, to="none")], tol=6.0)
    assert not recurring_switch([switch, None], tol=6.0)
    assert not recurring_switch([], tol=6.0)


def test_configuration_errors_exit_with_code_3(tmp_path):
    bad = write_config(tmp_path, grid={"horizon": 25.0, "interval": 12.0})
    assert main(["simulate", "--config", bad]) == EXIT_CONFIG_ERROR
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG_ERROR
    assert main(["optimize", "--config", write_config(tmp_path), "--x", "abc"]) == EXIT_CONFIG_ERROR


def test_simulate_writes_deterministic_tables(tmp_path):
    config = write_config(tmp_path)
    first, second = str(tmp_path / "first"), str(tmp_path / "second")
    assert main(["-q", "simulate", "--config", config, "--output", first]) == EXIT_OK
    assert main(["-q", "simulate", "--config", config, "--output", second]) == EXIT_OK

    states = pd.read_csv(os.path.join(first, "x_1-12", "states.csv"))
    assert tuple(states.columns) == state_columns
    assert states.shape[0] == 25
    summary = pd.read_csv(os.path.join(first, "summary.csv"))
    assert tuple(summary.columns) == summary_columns
    for name in ("states.csv", "controls.csv", "budget.csv", "plot_prevalence.csv", "plot_incidence.csv"):
        with open(os.path.join(first, "x_1-12", name), "rb") as a, open(os.path.join(second, "x_1-12", name), "rb") as b:
            assert a.read() == b.read()

    # re-simulating the written zero schedule gives the same trajectory
    third = str(tmp_path / "third")
    schedule = os.path.join(first, "x_1-12", "controls.csv")
    assert main(["-q", "simulate", "--config", config, "--output", third, "--schedule", schedule]) == EXIT_OK
    with open(os.path.join(first, "x_1-12", "states.csv"), "rb") as a, open(os.path.join(third, "x_1-12", "states.csv"), "rb") as b:
        assert a.read() == b.read()
    assert main(["-q", "simulate", "--config", config, "--horizon", "36", "--schedule", schedule]) == EXIT_CONFIG_ERROR


def test_tables_reload_bit_exactly(tmp_path):
    params, costs = ModelParams.defaults(prep_dropout=1.0 / 24.0), CostParams.defaults()
    X0 = ScenarioConfig.from_dict(None).X0
    schedule = ControlSchedule(dt=12.0, values=jnp.array([[1.3e-3, 2.0e-4], [0.0, 7.1e-4]]))
    evaluation = evaluate_policy(params, costs, X0, schedule, 1e5)
    result = ScenarioResult.from_evaluation("x_1-24", evaluation, schedule, params,
                                            history={"iteration": [0, 1], "objective": [0.1, 1.0 / 3.0]})
    result.save(str(tmp_path))
    loaded = ScenarioResult.load(str(tmp_path))
    assert loaded.name == os.path.basename(str(tmp_path))
    for attribute in ("states", "controls", "budget", "history"):
        pd.testing.assert_frame_equal(getattr(loaded, attribute), getattr(result, attribute), check_exact=True)
    plots = result.plot_data()
    assert set(plots) == {"prevalence", "incidence", "infected", "treated", "prep", "u_P", "u_T", "excess"}
    assert plots["u_P"]["value"].tolist() == [1.3e-3, 0.0]


def test_emit_outputs_writes_scenarios_and_summary(tmp_path):
    params, costs = ModelParams.defaults(), CostParams.defaults()
    X0 = ScenarioConfig.from_dict(None).X0
    results = []
    for name, values in (("x_0", [[0.0, 0.0]]), ("x_1-12", [[1e-3, 5e-4]])):
        schedule = ControlSchedule(dt=12.0, values=jnp.array(values))
        evaluation = evaluate_policy(params, costs, X0, schedule, 1e5)
        summary = {"scenario": name, "total_incidence": float(evaluation.total_incidence)}
        results.append(ScenarioResult.from_evaluation(name, evaluation, schedule, params, summary=summary))
    table = emit_outputs(results, str(tmp_path))
    assert table["scenario"].tolist() == ["x_0", "x_1-12"]
    for name in ("x_0", "x_1-12"):
        for file in ("states.csv", "controls.csv", "budget.csv", "plot_prevalence.csv"):
            assert os.path.exists(tmp_path / name / file)
    written = pd.read_csv(tmp_path / "summary.csv")
    assert tuple(written.columns) == summary_columns
    assert written["total_incidence"].tolist() == pytest.approx(table["total_incidence"].tolist(), rel=1e-12)
    assert written["total_incidence"][1] < written["total_incidence"][0]


def test_load_rejects_foreign_tables(tmp_path):
    pd.DataFrame({"t": [0.0], "S": [1.0]}).to_csv(tmp_path / "states.csv", index=False)
    with pytest.raises(ValueError):
        ScenarioResult.load(str(tmp_path))


@pytest.mark.slow
def test_optimize_small_scenario(tmp_path):
    config = ScenarioConfig.load(write_config(tmp_path, budget_limit=1e5, output_dir=str(tmp_path / "out")))
    status, outcomes = run_scenarios(config)
    assert status == EXIT_OK
    outcome = outcomes[0]
    assert outcome.relative_gap <= 5e-3
    assert outcome.evaluation.max_excess_ratio <= 1.0 + 1e-3
    assert np.all(np.asarray(outcome.schedule.values) >= 0.0)
    assert os.path.exists(tmp_path / "out" / "x_1-12" / "solver_history.csv")


@pytest.mark.slow
def test_zero_budget_gives_no_interventions(tmp_path):
    config = ScenarioConfig.load(write_config(tmp_path, budget_limit=0.0))
    outcome = solve_scenario(config, 1.0 / 12.0)
    assert outcome.converged
    assert float(np.max(np.asarray(outcome.schedule.values))) <= 1e-4


@pytest.mark.slow
def test_tail_check_report(tmp_path):
    out = str(tmp_path / "tail")
    config = write_config(tmp_path, grid={"horizon": 48.0, "interval": 12.0, "collocation_points": 3},
                          budget_limit=1e5)
    assert main(["-q", "tail-check", "--config", config, "--output", out]) == EXIT_OK
    with open(os.path.join(out, "tail_report.yaml")) as file:
        reports = yaml.safe_load(file)
    assert len(reports) == 1
    assert set(reports[0]) == {"x", "dominance_switch", "discard_window", "horizon_switches", "recurring_terminal_switch"}
    assert sorted(reports[0]["horizon_switches"]) == [24.0, 48.0]


@pytest.mark.slow
def test_desk_scenarios_are_ordered(tmp_path):
    config = ScenarioConfig.load(os.path.join(configs_dir, "desk.yaml")).replace(output_dir=str(tmp_path))
    status, outcomes = run_scenarios(config)
    assert status == EXIT_OK
    incidence = [o.evaluation.total_incidence for o in outcomes]
    assert all(a <= b * (1.0 + 1e-6) for a, b in zip(incidence, incidence[1:]))
    terminal = [o.evaluation.terminal_incidence for o in outcomes]
    assert all(terminal[0] < t for t in terminal[1:])

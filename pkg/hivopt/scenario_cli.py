"""
Command-line scenario runner.

    hivopt calibrate --config configs/full.yaml
    hivopt optimize  --config configs/desk.yaml --x 1/12 --x 0
    hivopt simulate  --config configs/desk.yaml --schedule results/x_0/controls.csv
    hivopt tail-check --config configs/desk.yaml --x 1/12

Exit codes: 0 success, 2 solver non-convergence (diagnostics still written),
3 configuration error.
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import jax.numpy as jnp
import numpy as np
import pandas as pd
import yaml

from hivopt.config import ConfigError, ScenarioConfig, format_rate, parse_rate, scenario_name
from hivopt.hiv_model import ModelParams, check_essential_nonnegativity
from hivopt.ode_oracle import (
    CalibrationError,
    ControlSchedule,
    PolicyEvaluation,
    calibrate,
    evaluate_policy,
    saturating_schedule,
)
from hivopt.scenario_result import ScenarioResult, write_summary
from hivopt.sqp_solver import SolverResult, solve
from hivopt.transcribe import build_grid, build_nlp

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG_ERROR = 3

# controls below this share of the larger arm's spend count as switched off
arm_threshold = 1e-6


class ScenarioOutcome:
    """
    One optimized scenario.

    Attributes:
        x: PrEP dropout rate.
        params: ModelParams used.
        schedule: Optimized ControlSchedule.
        solver: SolverResult of the SQP run.
        evaluation: Independent re-simulation of the schedule.
        nlp_objective: Physical objective value of the NLP solution.
        result: Output tables.
    """

    def __init__(self, x: float, params: ModelParams, schedule: ControlSchedule, solver: Optional[SolverResult],
                 evaluation: PolicyEvaluation, nlp_objective: float, result: ScenarioResult) -> None:
        self.x = x
        self.params = params
        self.schedule = schedule
        self.solver = solver
        self.evaluation = evaluation
        self.nlp_objective = nlp_objective
        self.result = result

    @property
    def converged(self) -> bool:
        return self.solver is None or self.solver.converged

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.evaluation.total_cost), 1e-300)
        return abs(self.nlp_objective - self.evaluation.total_cost) / scale


def calibrated_model(config: ScenarioConfig) -> ModelParams:
    """The config's model, re-fitted to the endemic targets when calibration is enabled."""
    if not config.calibration["enabled"]:
        return config.model
    settings = config.calibration
    fit = calibrate(
        config.model.replace(prep_dropout=0.0),
        prevalence_target=float(settings["prevalence_target"]),
        treated_target=float(settings["treated_target"]),
        contact_ratio=float(settings["contact_ratio"]),
        lambda_box=tuple(float(v) for v in settings["lambda_box"]),
        tap_box=tuple(float(v) for v in settings["tap_box"]),
    )
    return fit.params.replace(prep_dropout=config.model.prep_dropout)


def solve_scenario(config: ScenarioConfig, x: float, model: Optional[ModelParams] = None,
                   horizon: Optional[float] = None) -> ScenarioOutcome:
    """Transcribe, solve, re-simulate and tabulate one value of x."""
    params = config.scenario_params(x, model)
    horizon = config.horizon if horizon is None else float(horizon)
    n_int = int(round(horizon / config.interval))
    grid = build_grid(n_int, config.interval, config.n_cp)
    nlp = build_nlp(grid, params, config.costs, config.X0, config.budget_limit, config.control_scale)
    name = scenario_name(x)
    logging.info(msg=f"Scenario {name}: {nlp.layout.size} variables, {nlp.n_eq} equalities, "
                     f"{nlp.n_ineq} budget rows over {horizon:g} months.")

    z0 = nlp.initial_guess(config.initial_guess)
    solver_result = solve(nlp.as_problem(info=f"HIV allocation {name}"), z0, config.solver)
    nlp.check_nonnegative(solver_result.x)
    schedule, _ = nlp.extract_solution(solver_result.x)
    nlp_objective = nlp.objective(solver_result.x) * nlp.state_scale

    evaluation = evaluate_policy(params, config.costs, config.X0, schedule, config.budget_limit,
                                 rel_tol=config.rel_tol, abs_tol=config.abs_tol, budget_rtol=config.budget_rtol)
    outcome = ScenarioOutcome(x, params, schedule, solver_result, evaluation, nlp_objective, None)
    if outcome.relative_gap > 5e-3:
        logging.warning(msg=f"Scenario {name}: re-simulated cost {evaluation.total_cost:.8g} differs from the "
                            f"NLP objective {nlp_objective:.8g} by {outcome.relative_gap:.2%}.")
    summary = {
        "scenario": name,
        "x": x,
        "nlp_objective": nlp_objective,
        "resimulated_cost": evaluation.total_cost,
        "relative_gap": outcome.relative_gap,
        "total_incidence": evaluation.total_incidence,
        "terminal_incidence": evaluation.terminal_incidence,
        "max_excess_ratio": evaluation.max_excess_ratio,
        "status": solver_result.status,
        "iterations": solver_result.iterations,
    }
    outcome.result = ScenarioResult.from_evaluation(name, evaluation, schedule, params,
                                                    history=solver_result.history, summary=summary)
    logging.info(msg=f"Scenario {name}: {solver_result}; {evaluation}")
    return outcome


def emit_outputs(results: Sequence[ScenarioResult], output_dir: str) -> pd.DataFrame:
    """
    Write every scenario's state, control, budget, history and plot-data
    tables to its own sub-directory of output_dir, then summary.csv.

    Returns:
        The summary table.
    """
    for result in results:
        result.save(os.path.join(output_dir, result.name))
    table = write_summary(list(results), output_dir)
    logging.info(msg="Scenario summary:\n" + table.to_string(index=False))
    return table


def run_scenarios(config: ScenarioConfig, model: Optional[ModelParams] = None) -> Tuple[int, List[ScenarioOutcome]]:
    """
    Optimize every x value of the config in turn and write the outputs.

    Returns:
        (exit status, outcomes); the status is EXIT_NOT_CONVERGED when any
        solve did not converge, outputs are written either way.
    """
    model = calibrated_model(config) if model is None else model
    outcomes = [solve_scenario(config, x, model) for x in config.x_values]
    emit_outputs([o.result for o in outcomes], config.output_dir)

    failed = [o.result.name for o in outcomes if not o.converged]
    if failed:
        logging.critical(msg=f"Solver did not converge for {', '.join(failed)}; diagnostics in {config.output_dir}.")
        return EXIT_NOT_CONVERGED, outcomes
    return EXIT_OK, outcomes


def last_dominance_switch(times, cost_prep, cost_tap, rtol: float = 1e-9) -> Optional[float]:
    """
    Last time at which the cheaper of two running costs changes.

    Ties (within rtol of the larger value) keep the previous ordering, so
    identical cost curves have no switch.
    """
    diff = np.asarray(cost_prep, dtype=float) - np.asarray(cost_tap, dtype=float)
    scale = np.maximum(np.abs(cost_prep), np.abs(cost_tap))
    signs = np.where(np.abs(diff) <= rtol * np.maximum(scale, 1e-300), 0, np.sign(diff))
    switch, previous = None, 0
    for t, s in zip(times, signs):
        if s == 0:
            continue
        if previous != 0 and s != previous:
            switch = float(t)
        previous = s
    return switch


def dominant_arms(schedule: ControlSchedule, costs) -> List[str]:
    """Per interval: "prep", "tap" or "none", by enrollment spend rate per capita."""
    values = np.asarray(schedule.values)
    prep = costs.prep_enrollment * values[:, 0]
    tap = costs.tap_enrollment * values[:, 1]
    top = max(float(np.max(prep, initial=0.0)), float(np.max(tap, initial=0.0)))
    arms = []
    for p, t in zip(prep, tap):
        if max(p, t) <= arm_threshold * top or top == 0.0:
            arms.append("none")
        else:
            arms.append("prep" if p > t else "tap")
    return arms


def terminal_switch(schedule: ControlSchedule, costs) -> Optional[Dict]:
    """Last change of dominant arm: {"from", "to", "time", "distance"} or None."""
    arms = dominant_arms(schedule, costs)
    knots = np.asarray(schedule.knots)
    for i in range(len(arms) - 1, 0, -1):
        if arms[i] != arms[i - 1]:
            return {"from": arms[i - 1], "to": arms[i], "time": float(knots[i]),
                    "distance": float(schedule.t_f - knots[i])}
    return None


def recurring_switch(switches: Sequence[Optional[Dict]], tol: float) -> bool:
    """Same switch type at the same distance from the horizon end in every run."""
    if not switches or any(s is None for s in switches):
        return False
    first = switches[0]
    return all(s["from"] == first["from"] and s["to"] == first["to"]
               and abs(s["distance"] - first["distance"]) <= tol for s in switches)


class TailReport:
    """
    Attributes:
        x: Scenario analysed.
        dominance_switch: Last time the cheaper single-arm strategy changes (heuristic a), or None.
        discard_window: (start, end) months to discard by heuristic (a); None when there is no switch.
        horizon_switches: {horizon: terminal switch or None} (heuristic b).
        recurring: Whether the terminal switch recurs at fixed distance from every horizon end.
    """

    def __init__(self, x: float, dominance_switch: Optional[float], discard_window: Optional[Tuple[float, float]],
                 horizon_switches: Dict[float, Optional[Dict]], recurring: bool) -> None:
        self.x = x
        self.dominance_switch = dominance_switch
        self.discard_window = discard_window
        self.horizon_switches = horizon_switches
        self.recurring = recurring

    def to_dict(self) -> Dict:
        return {
            "x": format_rate(self.x),
            "dominance_switch": self.dominance_switch,
            "discard_window": None if self.discard_window is None else list(self.discard_window),
            "horizon_switches": {float(h): s for h, s in self.horizon_switches.items()},
            "recurring_terminal_switch": self.recurring,
        }

    def __str__(self) -> str:
        window = "none" if self.discard_window is None else f"[{self.discard_window[0]:g}, {self.discard_window[1]:g}]"
        return f"x={format_rate(self.x)}: discard window {window}, recurring terminal switch: {self.recurring}"


def single_arm_costs(config: ScenarioConfig, params: ModelParams, horizon: float):
    """Running J^C at the knots for the budget-saturating only-PrEP and only-TaP schedules."""
    n_int = int(round(horizon / config.interval))
    grid = build_grid(n_int, config.interval, config.n_cp)
    curves = []
    for arm in ("prep", "tap"):
        schedule = saturating_schedule(params, config.costs, config.X0, grid, config.budget_limit, arm,
                                       rel_tol=config.rel_tol, abs_tol=config.abs_tol)
        evaluation = evaluate_policy(params, config.costs, config.X0, schedule, config.budget_limit,
                                     rel_tol=config.rel_tol, abs_tol=config.abs_tol, budget_rtol=config.budget_rtol)
        curves.append(evaluation.trajectory.quadrature("cost", np.asarray(schedule.knots[1:])))
    return np.asarray(grid.knots[1:]), curves[0], curves[1]


def tail_artifact_analysis(config: ScenarioConfig, outcomes: Sequence[ScenarioOutcome],
                           model: Optional[ModelParams] = None, horizon_steps: Sequence[int] = (0, 2, 4)) -> List[TailReport]:
    """
    Heuristic (a): the discarded tail is as long as the time until the last
    switch in which single-arm strategy is cheaper.
    Heuristic (b): re-optimize on horizons t_f - k * dt for k in horizon_steps
    and test whether the terminal switch recurs at a fixed distance from the end.
    """
    if not outcomes:
        raise ValueError("Tail analysis needs at least one solved scenario")
    reports = []
    for outcome in outcomes:
        horizon = outcome.schedule.t_f
        times, prep_cost, tap_cost = single_arm_costs(config, outcome.params, horizon)
        switch = last_dominance_switch(times, prep_cost, tap_cost)
        window = None if switch is None else (max(horizon - switch, 0.0), horizon)

        switches = {horizon: terminal_switch(outcome.schedule, config.costs)}
        for k in horizon_steps:
            shorter = horizon - k * config.interval
            if k == 0 or shorter <= 0:
                continue
            rerun = solve_scenario(config, outcome.x, outcome.params, horizon=shorter)
            switches[shorter] = terminal_switch(rerun.schedule, config.costs)
        report = TailReport(outcome.x, switch, window, switches, recurring_switch(list(switches.values()), 0.5 * config.interval))
        logging.info(msg=f"Tail analysis {report}")
        reports.append(report)
    return reports


def _apply_overrides(config: ScenarioConfig, args: argparse.Namespace) -> ScenarioConfig:
    changes = {}
    if args.output is not None:
        changes["output_dir"] = args.output
    if args.x:
        changes["x_values"] = [parse_rate(x) for x in args.x]
    if args.horizon is not None:
        changes["horizon"] = args.horizon
    solver = {}
    if args.constraint_tol is not None:
        solver["constraint_tol"] = args.constraint_tol
    if args.kkt_tol is not None:
        solver["kkt_tol"] = args.kkt_tol
    if args.max_iter is not None:
        solver["max_iter"] = args.max_iter
    if solver:
        changes["solver"] = config.solver.replace(**solver)
    return config.replace(**changes) if changes else config


def _load_schedule(path: str, config: ScenarioConfig) -> ControlSchedule:
    table = pd.read_csv(path, float_precision="round_trip")
    if table.shape[0] != config.n_int:
        raise ConfigError(f"{path} has {table.shape[0]} intervals, the config has {config.n_int}")
    return ControlSchedule(dt=config.interval, values=jnp.asarray(table[["u_P", "u_T"]].to_numpy(dtype=float))).validate()


def command_calibrate(config: ScenarioConfig) -> int:
    settings = dict(config.calibration, enabled=True)
    model = calibrated_model(config.replace(calibration=settings))
    report = check_essential_nonnegativity(model)
    os.makedirs(config.output_dir, exist_ok=True)
    fitted = {"lambda_h": float(model.lambda_h), "lambda_l": float(model.lambda_l),
              "baseline_tap": float(model.baseline_tap), "nonnegativity_check": str(report)}
    with open(os.path.join(config.output_dir, "calibration.yaml"), "w") as file:
        yaml.safe_dump(fitted, file, sort_keys=False)
    logging.info(msg=f"Calibration: {fitted}")
    return EXIT_OK


def command_optimize(config: ScenarioConfig) -> int:
    status, _ = run_scenarios(config)
    return status


def command_simulate(config: ScenarioConfig, schedule_path: Optional[str]) -> int:
    model = calibrated_model(config)
    schedule = (ControlSchedule.zeros(config.n_int, config.interval) if schedule_path is None
                else _load_schedule(schedule_path, config))
    results = []
    for x in config.x_values:
        params = config.scenario_params(x, model)
        evaluation = evaluate_policy(params, config.costs, config.X0, schedule, config.budget_limit,
                                     rel_tol=config.rel_tol, abs_tol=config.abs_tol, budget_rtol=config.budget_rtol)
        name = scenario_name(x)
        summary = {"scenario": name, "x": x, "resimulated_cost": evaluation.total_cost,
                   "total_incidence": evaluation.total_incidence, "terminal_incidence": evaluation.terminal_incidence,
                   "max_excess_ratio": evaluation.max_excess_ratio, "status": "simulated", "iterations": 0}
        result = ScenarioResult.from_evaluation(name, evaluation, schedule, params, summary=summary)
        results.append(result)
        logging.info(msg=f"Simulated {name}: {evaluation}")
    emit_outputs(results, config.output_dir)
    return EXIT_OK


def command_tail_check(config: ScenarioConfig) -> int:
    status, outcomes = run_scenarios(config)
    reports = tail_artifact_analysis(config, outcomes)
    with open(os.path.join(config.output_dir, "tail_report.yaml"), "w") as file:
        yaml.safe_dump([r.to_dict() for r in reports], file, sort_keys=False)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hivopt", description="Budget-constrained PrEP/TaP allocation scenarios")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("calibrate", "Fit lambda_L and the baseline TaP rate to the endemic targets"),
                       ("optimize", "Solve the allocation problem for every x value"),
                       ("simulate", "Re-simulate a fixed schedule (zero controls by default)"),
                       ("tail-check", "Optimize, then run both tail-artifact heuristics")):
        command = sub.add_parser(name, help=text)
        command.add_argument("--config", default=None, help="Scenario YAML file (defaults when omitted)")
        command.add_argument("--output", default=None, help="Output directory")
        command.add_argument("--x", action="append", default=None, help="PrEP dropout rate, e.g. 1/12; repeatable")
        command.add_argument("--horizon", type=float, default=None, help="Horizon t_f in months")
        command.add_argument("--constraint-tol", type=float, default=None)
        command.add_argument("--kkt-tol", type=float, default=None)
        command.add_argument("--max-iter", type=int, default=None)
        if name == "simulate":
            command.add_argument("--schedule", default=None, help="controls.csv of a previous run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s", force=True)

    try:
        config = ScenarioConfig.load(args.config) if args.config else ScenarioConfig.from_dict({})
        config = _apply_overrides(config, args)
        if args.command == "calibrate":
            return command_calibrate(config)
        if args.command == "optimize":
            return command_optimize(config)
        if args.command == "simulate":
            return command_simulate(config, args.schedule)
        return command_tail_check(config)
    except ConfigError as err:
        logging.critical(msg=f"Configuration error: {err}")
        return EXIT_CONFIG_ERROR
    except CalibrationError as err:
        logging.critical(msg=f"Calibration failed: {err}")
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())

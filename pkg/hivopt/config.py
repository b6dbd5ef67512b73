"""
Scenario configuration: YAML file <-> ScenarioConfig.

Every section is optional; missing keys take the values in hivopt.defaults.
Schema (all rates per month, money in the cost coefficients' currency):

    model:          ModelParams fields (alpha_h, ..., prep_dropout is overridden per scenario)
    costs:          CostParams fields
    initial_state:  {S_H: ..., ..., P: ...}
    grid:           {horizon, interval, collocation_points}
    budget_limit:   excess spend allowed per interval
    x_values:       PrEP dropout rates to sweep; numbers or strings like "1/12"
    solver:         SolverOptions fields, plus control_scale
    oracle:         {rel_tol, abs_tol, budget_rtol}
    calibration:    {enabled, prevalence_target, treated_target, contact_ratio, lambda_box, tap_box}
    initial_guess:  "replicated" | "aggressive" | "simulated"
    output_dir:     directory receiving one sub-directory per scenario
    seed:           reserved; every computation is deterministic
"""
from fractions import Fraction
from typing import Any, Dict, List, Optional

import jax.numpy as jnp
import yaml

from hivopt.defaults import (
    default_abs_tol,
    default_budget_limit,
    default_collocation_points,
    default_contact_ratio,
    default_control_scale,
    default_cost_params,
    default_horizon,
    default_initial_state,
    default_interval,
    default_lambda_box,
    default_model_params,
    default_prevalence_target,
    default_rel_tol,
    default_seed,
    default_tap_box,
    default_treated_target,
    default_x_values,
    state_names,
)
from hivopt.hiv_model import CostParams, ModelParams
from hivopt.sqp_solver import SolverOptions

sections = ("model", "costs", "initial_state", "grid", "budget_limit", "x_values", "solver", "oracle",
            "calibration", "initial_guess", "output_dir", "seed")
solver_keys = ("max_iter", "constraint_tol", "kkt_tol", "step_tol", "penalty_factor", "penalty_floor", "armijo",
               "backtrack", "min_alpha", "fd_step", "elastic_penalty", "hessian", "second_order_correction",
               "log_every", "dense_qp_limit")
initial_guess_policies = ("replicated", "aggressive", "simulated")


def scenario_name(x: float) -> str:
    """Directory-safe scenario label, e.g. x_1-12."""
    return "x_" + format_rate(x).replace("/", "-")


class ConfigError(ValueError):
    """Malformed or inconsistent scenario configuration."""


def _check_keys(section: str, given: Dict[str, Any], allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"Section '{section}' must be a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {', '.join(unknown)}")


def parse_rate(value) -> float:
    """A float, or a fraction string such as "1/12"."""
    try:
        if isinstance(value, str):
            return float(Fraction(value.replace(" ", "")))
        return float(value)
    except (TypeError, ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"Cannot read {value!r} as a rate") from err


def format_rate(value: float) -> str:
    """Short exact fraction when one exists, e.g. 1/12; used in file names and config dumps."""
    fraction = Fraction(value).limit_denominator(1000)
    if abs(float(fraction) - value) > 1e-15 * max(1.0, abs(value)):
        return repr(float(value))
    return str(fraction)


def _coerce_solver(solver: Dict[str, Any]) -> Dict[str, Any]:
    # YAML reads 1e-6 (no dot) as a string
    coerced = {}
    for key, value in solver.items():
        if key == "hessian":
            coerced[key] = str(value)
        elif key == "second_order_correction":
            coerced[key] = bool(value)
        elif key in ("max_iter", "log_every", "dense_qp_limit"):
            coerced[key] = int(value)
        else:
            coerced[key] = float(value)
    return coerced


class ScenarioConfig:
    """
    A complete scenario sweep.

    Attributes:
        model: Base ModelParams (prep_dropout replaced by each x value).
        costs: CostParams.
        X0: Initial state, shape (9,).
        horizon: t_f in months.
        interval: Control interval length dt.
        n_cp: Collocation points per interval.
        budget_limit: B_lim.
        x_values: PrEP dropout rates to sweep.
        solver: SolverOptions.
        control_scale: NLP unit of the control variables.
        rel_tol, abs_tol, budget_rtol: Oracle tolerances.
        calibration: Calibration settings (enabled flag plus targets and box).
        initial_guess: Starting-point policy.
        output_dir: Output root.
        seed: Reserved seed.
    """

    def __init__(
        self,
        model: ModelParams,
        costs: CostParams,
        X0,
        horizon: float = default_horizon,
        interval: float = default_interval,
        n_cp: int = default_collocation_points,
        budget_limit: float = default_budget_limit,
        x_values=default_x_values,
        solver: Optional[SolverOptions] = None,
        control_scale: float = default_control_scale,
        rel_tol: float = default_rel_tol,
        abs_tol: float = default_abs_tol,
        budget_rtol: float = 1e-4,
        calibration: Optional[Dict[str, Any]] = None,
        initial_guess: str = "replicated",
        output_dir: str = "results",
        seed: int = default_seed,
    ) -> None:
        self.model = model
        self.costs = costs
        self.X0 = jnp.asarray(X0, dtype=float)
        self.horizon = float(horizon)
        self.interval = float(interval)
        self.n_cp = int(n_cp)
        self.budget_limit = float(budget_limit)
        self.x_values = [float(x) for x in x_values]
        self.solver = SolverOptions() if solver is None else solver
        self.control_scale = float(control_scale)
        self.rel_tol = float(rel_tol)
        self.abs_tol = float(abs_tol)
        self.budget_rtol = float(budget_rtol)
        self.calibration = self.default_calibration()
        self.calibration.update(calibration or {})
        self.initial_guess = initial_guess
        self.output_dir = str(output_dir)
        self.seed = int(seed)
        self.validate()

    @staticmethod
    def default_calibration() -> Dict[str, Any]:
        return {
            "enabled": False,
            "prevalence_target": default_prevalence_target,
            "treated_target": default_treated_target,
            "contact_ratio": default_contact_ratio,
            "lambda_box": list(default_lambda_box),
            "tap_box": list(default_tap_box),
        }

    @property
    def n_int(self) -> int:
        return int(round(self.horizon / self.interval))

    def validate(self) -> "ScenarioConfig":
        try:
            self.model.validate()
            self.costs.validate()
            self.solver.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        problems = []
        if self.X0.shape != (len(state_names),) or bool(jnp.any(self.X0 < 0)):
            problems.append(f"initial_state={self.X0}")
        if not self.interval > 0 or not self.horizon > 0:
            problems.append(f"grid horizon={self.horizon}, interval={self.interval}")
        elif abs(self.n_int * self.interval - self.horizon) > 1e-9 * self.horizon or self.n_int < 1:
            problems.append(f"horizon {self.horizon} is not a multiple of interval {self.interval}")
        if self.n_cp < 2:
            problems.append(f"collocation_points={self.n_cp}")
        if self.budget_limit < 0:
            problems.append(f"budget_limit={self.budget_limit}")
        if not self.x_values or any(not x >= 0 for x in self.x_values):
            problems.append(f"x_values={self.x_values}")
        if not self.control_scale > 0 or not self.rel_tol > 0 or not self.abs_tol > 0 or not self.budget_rtol > 0:
            problems.append("control_scale and oracle tolerances must be positive")
        if self.initial_guess not in initial_guess_policies:
            problems.append(f"initial_guess={self.initial_guess!r}")
        lower, upper = self.calibration["lambda_box"]
        if not 0 < lower < upper:
            problems.append(f"calibration lambda_box={self.calibration['lambda_box']}")
        lower, upper = self.calibration["tap_box"]
        if not 0 <= lower < upper:
            problems.append(f"calibration tap_box={self.calibration['tap_box']}")
        if problems:
            raise ConfigError("Invalid scenario configuration: " + "; ".join(problems))
        return self

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with some constructor arguments changed."""
        values = dict(
            model=self.model, costs=self.costs, X0=self.X0, horizon=self.horizon, interval=self.interval,
            n_cp=self.n_cp, budget_limit=self.budget_limit, x_values=self.x_values, solver=self.solver,
            control_scale=self.control_scale, rel_tol=self.rel_tol, abs_tol=self.abs_tol,
            budget_rtol=self.budget_rtol, calibration=dict(self.calibration), initial_guess=self.initial_guess,
            output_dir=self.output_dir, seed=self.seed,
        )
        values.update(changes)
        return ScenarioConfig(**values)

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> "ScenarioConfig":
        raw = {} if raw is None else raw
        _check_keys("top level", raw, sections)

        model = dict(raw.get("model") or {})
        _check_keys("model", model, default_model_params)
        costs = dict(raw.get("costs") or {})
        _check_keys("costs", costs, default_cost_params)
        state = dict(default_initial_state)
        given_state = dict(raw.get("initial_state") or {})
        _check_keys("initial_state", given_state, state_names)
        state.update(given_state)
        grid = dict(raw.get("grid") or {})
        _check_keys("grid", grid, ("horizon", "interval", "collocation_points"))
        solver = dict(raw.get("solver") or {})
        _check_keys("solver", solver, solver_keys + ("control_scale",))
        control_scale = solver.pop("control_scale", default_control_scale)
        oracle = dict(raw.get("oracle") or {})
        _check_keys("oracle", oracle, ("rel_tol", "abs_tol", "budget_rtol"))
        calibration = dict(raw.get("calibration") or {})
        _check_keys("calibration", calibration, cls.default_calibration())
        x_values = raw.get("x_values", list(default_x_values))
        if not isinstance(x_values, list):
            raise ConfigError(f"x_values must be a list, got {x_values!r}")

        try:
            return cls(
                model=ModelParams.defaults(**{k: parse_rate(v) for k, v in model.items()}),
                costs=CostParams.defaults(**{k: float(v) for k, v in costs.items()}),
                X0=[float(state[name]) for name in state_names],
                horizon=grid.get("horizon", default_horizon),
                interval=grid.get("interval", default_interval),
                n_cp=grid.get("collocation_points", default_collocation_points),
                budget_limit=raw.get("budget_limit", default_budget_limit),
                x_values=[parse_rate(x) for x in x_values],
                solver=SolverOptions(**_coerce_solver(solver)),
                control_scale=control_scale,
                rel_tol=oracle.get("rel_tol", default_rel_tol),
                abs_tol=oracle.get("abs_tol", default_abs_tol),
                budget_rtol=oracle.get("budget_rtol", 1e-4),
                calibration=calibration,
                initial_guess=raw.get("initial_guess", "replicated"),
                output_dir=raw.get("output_dir", "results"),
                seed=raw.get("seed", default_seed),
            )
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path) as file:
                raw = yaml.safe_load(file)
        except OSError as err:
            raise ConfigError(f"Cannot read {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"{path} is not valid YAML: {err}") from err
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        solver = {key: getattr(self.solver, key) for key in solver_keys}
        solver = {key: (val if isinstance(val, (str, bool)) else (int(val) if isinstance(val, int) else float(val)))
                  for key, val in solver.items()}
        solver["control_scale"] = self.control_scale
        calibration = dict(self.calibration)
        calibration["lambda_box"] = [float(v) for v in calibration["lambda_box"]]
        calibration["tap_box"] = [float(v) for v in calibration["tap_box"]]
        return {
            "model": {key: float(getattr(self.model, key)) for key in default_model_params},
            "costs": {key: float(getattr(self.costs, key)) for key in default_cost_params},
            "initial_state": {name: float(self.X0[i]) for i, name in enumerate(state_names)},
            "grid": {"horizon": self.horizon, "interval": self.interval, "collocation_points": self.n_cp},
            "budget_limit": self.budget_limit,
            "x_values": [format_rate(x) for x in self.x_values],
            "solver": solver,
            "oracle": {"rel_tol": self.rel_tol, "abs_tol": self.abs_tol, "budget_rtol": self.budget_rtol},
            "calibration": calibration,
            "initial_guess": self.initial_guess,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def dump(self, path: str) -> None:
        with open(path, "w") as file:
            yaml.safe_dump(self.to_dict(), file, sort_keys=False)

    def scenario_params(self, x: float, model: Optional[ModelParams] = None) -> ModelParams:
        return (self.model if model is None else model).replace(prep_dropout=float(x))

    def scenario_names(self) -> List[str]:
        return [scenario_name(x) for x in self.x_values]

import logging
import os
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from hivopt.defaults import control_names, state_names
from hivopt.hiv_model import incidence_cost, prevalence
from hivopt.ode_oracle import ControlSchedule, PolicyEvaluation

state_columns = ("t",) + state_names + ("N", "cumulative_deaths", "cumulative_incidence")
control_columns = ("interval", "t_start") + control_names
budget_columns = ("interval", "spend", "baseline_spend", "excess", "B_lim")
summary_columns = ("scenario", "x", "nlp_objective", "resimulated_cost", "relative_gap", "total_incidence",
                   "terminal_incidence", "max_excess_ratio", "status", "iterations")
integer_columns = ("interval", "iteration")
plot_quantities = ("prevalence", "incidence", "infected", "treated", "prep", "u_P", "u_T", "excess")

# repr-precision so re-reading a table gives back the same doubles
float_format = "%.17g"


class ScenarioResult:
    """
    Tables of one solved (or simulated) scenario.

    Attributes:
        name: Scenario label, also the output sub-directory.
        states: Monthly state samples, columns state_columns.
        controls: Per-interval schedule, columns control_columns.
        budget: Per-interval budget use, columns budget_columns.
        history: Per-iteration solver records (may be empty).
        summary: One summary row as a dict keyed by summary_columns.
        params: ModelParams of the scenario; needed for the incidence series.
    """

    def __init__(self, name: str, states: pd.DataFrame, controls: pd.DataFrame, budget: pd.DataFrame,
                 history: Optional[pd.DataFrame] = None, summary: Optional[Dict] = None, params=None) -> None:
        self.name = name
        self.states = states
        self.controls = controls
        self.budget = budget
        self.history = pd.DataFrame() if history is None else history
        self.summary = {} if summary is None else summary
        self.params = params

    @classmethod
    def from_evaluation(cls, name: str, evaluation: PolicyEvaluation, schedule: ControlSchedule,
                        params, history: Optional[Dict[str, List]] = None,
                        summary: Optional[Dict] = None) -> "ScenarioResult":
        """Sample the re-simulated trajectory monthly and tabulate schedule and budget."""
        trajectory = evaluation.trajectory
        months = np.arange(int(round(trajectory.t_start)), int(round(trajectory.t_end)) + 1, dtype=float)
        X = trajectory.states(months)
        states = pd.DataFrame(X, columns=list(state_names))
        states.insert(0, "t", months)
        states["N"] = X.sum(axis=1)
        states["cumulative_deaths"] = trajectory.quadrature("deaths", months)
        states["cumulative_incidence"] = trajectory.quadrature("incidence", months)

        values = np.asarray(schedule.values)
        controls = pd.DataFrame({
            "interval": np.arange(schedule.n_int),
            "t_start": np.asarray(schedule.knots[:-1]),
            control_names[0]: values[:, 0],
            control_names[1]: values[:, 1],
        })
        budget = pd.DataFrame({
            "interval": np.arange(schedule.n_int),
            "spend": evaluation.spend,
            "baseline_spend": evaluation.baseline_spend,
            "excess": evaluation.excess,
            "B_lim": np.full(schedule.n_int, evaluation.budget_limit),
        })
        return cls(name, states, controls, budget, pd.DataFrame(history or {}), summary, params)

    def plot_data(self, params=None) -> Dict[str, pd.DataFrame]:
        """Two-column (t, value) series per displayed quantity."""
        params = self.params if params is None else params
        t = self.states["t"].to_numpy()
        X = self.states[list(state_names)].to_numpy()
        series = {
            "prevalence": np.asarray(prevalence(X)),
            "infected": X[:, 2:6].sum(axis=1),
            "treated": X[:, 6:8].sum(axis=1),
            "prep": X[:, 8],
        }
        if params is not None:
            series["incidence"] = np.asarray(incidence_cost(X, params))
        data = {name: pd.DataFrame({"t": t, "value": value}) for name, value in series.items()}
        t_start = self.controls["t_start"].to_numpy()
        for name in control_names:
            data[name] = pd.DataFrame({"t": t_start, "value": self.controls[name].to_numpy()})
        data["excess"] = pd.DataFrame({"t": t_start, "value": self.budget["excess"].to_numpy()})
        return data

    def save(self, directory: str) -> None:
        """Write states.csv, controls.csv, budget.csv, solver_history.csv and plot_<quantity>.csv."""
        os.makedirs(directory, exist_ok=True)
        self.states.to_csv(os.path.join(directory, "states.csv"), index=False, float_format=float_format)
        self.controls.to_csv(os.path.join(directory, "controls.csv"), index=False, float_format=float_format)
        self.budget.to_csv(os.path.join(directory, "budget.csv"), index=False, float_format=float_format)
        if not self.history.empty:
            self.history.to_csv(os.path.join(directory, "solver_history.csv"), index=False, float_format=float_format)
        for name, frame in self.plot_data().items():
            frame.to_csv(os.path.join(directory, f"plot_{name}.csv"), index=False, float_format=float_format)
        logging.debug(msg=f"Scenario {self.name} written to {directory}")

    @classmethod
    def load(cls, directory: str, name: Optional[str] = None) -> "ScenarioResult":
        states = _read_table(os.path.join(directory, "states.csv"))
        if tuple(states.columns) != state_columns:
            raise ValueError(f"Unexpected state table header in {directory}: {list(states.columns)}")
        controls = _read_table(os.path.join(directory, "controls.csv"))
        budget = _read_table(os.path.join(directory, "budget.csv"))
        history_path = os.path.join(directory, "solver_history.csv")
        history = _read_table(history_path) if os.path.exists(history_path) else None
        return cls(name or os.path.basename(os.path.normpath(directory)), states, controls, budget, history)


def _read_table(path: str) -> pd.DataFrame:
    """Read a written table back with the dtypes it was written from."""
    table = pd.read_csv(path, float_precision="round_trip")
    for column in table.columns:
        # whole-number floats such as t or B_lim come back as integers
        if column not in integer_columns and table[column].dtype.kind in "iu":
            table[column] = table[column].astype(float)
    return table


def summary_table(results: List[ScenarioResult]) -> pd.DataFrame:
    rows = [{key: r.summary.get(key, r.name if key == "scenario" else np.nan) for key in summary_columns}
            for r in results]
    return pd.DataFrame(rows, columns=list(summary_columns))


def write_summary(results: List[ScenarioResult], directory: str) -> pd.DataFrame:
    os.makedirs(directory, exist_ok=True)
    table = summary_table(results)
    table.to_csv(os.path.join(directory, "summary.csv"), index=False, float_format=float_format)
    return table

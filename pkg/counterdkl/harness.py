"""
Experiment harness
Replication loops over simulators and model variants, metric evaluation, aggregation and sweeps
"""

import json
import math
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import ValidationError

from counterdkl import causal
from counterdkl.causal import OracleModel, PolicySpec
from counterdkl.config import settings
from counterdkl.coregion import TaskIndex
from counterdkl.dataset import Dataset
from counterdkl.errors import ConfigInvalid, Divergence, NoTreatedUnits, NotPositiveDefinite
from counterdkl.export_service import result_export_service
from counterdkl.gp_model import fit
from counterdkl.schemas import DgpName, ExperimentConfig, MetricReport, ModelVariant, ResultRow, SplitSpec, SweepAxis, Task
from counterdkl.seeding import derive_seed
from counterdkl.simgen import GroundTruthOracle, generate, split

AGGREGATE_KEYS = ["dgp", "variant", "task", "outcome"]
SWEEP_KEYS = ["axis", "axis_value"]
FIT_FAILURES = (Divergence, NotPositiveDefinite)

PROTOCOL = {
    "fit_data": "train split",
    "ICE": "test split, RMSE over all actions against the true surfaces",
    "COVERAGE": "test split, all actions of the outcome",
    "POLICY_RISK": "test split, ICE-sign rule",
    "OPE": "full sample, RMSE of per-unit uniform-policy values",
    "OPE_REGRET": "full sample, |estimated - true| uniform-policy value",
    "OPL": "full sample, optimal allocation rate; 'all' uses the configured outcome weights",
    "ATT": "full sample, |model ATT - true ATT| of action 1 versus 0",
    "outcome_all": "equal-weight mean over outcomes (OPL: weighted policy)",
    "ci": "mean +- 1.96 * sd / sqrt(n_ok), sd with ddof 1",
    "timings": "wall-clock seconds in timings.csv, excluded from results.csv",
}


# ========== RESULT ==========

@dataclass
class ExperimentResult:
    """Raw rows, aggregate table and the seeds used"""

    rows: List[ResultRow]
    aggregates: pd.DataFrame
    seeds: Dict[str, int] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        return rows_frame(self.rows)


def rows_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in rows], columns=list(ResultRow.model_fields))


def sort_rows(rows: Sequence[ResultRow]) -> List[ResultRow]:
    """Deterministic order independent of evaluation order"""
    return sorted(
        rows,
        key=lambda r: (r.axis, -math.inf if r.axis_value is None else r.axis_value, r.dgp, r.variant, r.task, r.outcome, r.replication),
    )


def aggregate(rows: Sequence[ResultRow]) -> pd.DataFrame:
    """
    Monte Carlo mean, sd and 95% CI per cell over successful rows

    Args:
        rows: Result rows

    Returns:
        One row per (axis, axis_value, dgp, variant, task, outcome) with mean, sd,
        ci_low, ci_high, n_ok, n_failed
    """
    frame = rows_frame(rows)
    keys = AGGREGATE_KEYS if (frame["axis"] == "").all() else SWEEP_KEYS + AGGREGATE_KEYS
    frame["ok"] = ~frame["failed"]
    frame["ok_value"] = frame["value"].astype(float).where(frame["ok"])
    grouped = frame.groupby(keys, sort=True, dropna=False)
    table = grouped.agg(
        mean=("ok_value", "mean"),
        sd=("ok_value", lambda v: v.dropna().std(ddof=1)),
        n_ok=("ok", "sum"),
        n_failed=("failed", "sum"),
    ).reset_index()
    half = settings.ci_z * table["sd"] / np.sqrt(table["n_ok"].where(table["n_ok"] > 0))
    table.insert(table.columns.get_loc("n_ok"), "ci_low", table["mean"] - half)
    table.insert(table.columns.get_loc("n_ok"), "ci_high", table["mean"] + half)
    table["n_ok"] = table["n_ok"].astype(int)
    table["n_failed"] = table["n_failed"].astype(int)
    return table


# ========== METRICS ==========

def _per_outcome(task: Task, values: List[float]) -> List[Tuple[str, float]]:
    report = MetricReport()
    report.add(task.value, values)
    return report.rows(task.value)


def evaluate_task(
    task: Task,
    model,
    data: Dataset,
    test: Dataset,
    oracle: GroundTruthOracle,
    weights: Sequence[float],
) -> List[Tuple[str, float]]:
    """
    Metric values of one task, per outcome plus the 'all' aggregate

    Args:
        task: Task to evaluate
        model: Fitted model or OracleModel
        data: Full sample
        test: Held-out split
        oracle: Ground truth of the simulator
        weights: Outcome weights for the aggregate policy
    """
    n_outcomes = oracle.n_outcomes
    outcomes = range(n_outcomes)
    surface = causal.model_surface(model)
    uniform = PolicySpec.uniform(oracle.n_actions)

    if task == Task.ICE:
        return _per_outcome(task, [causal.ice_rmse(model, oracle, test.X, None, m) for m in outcomes])
    if task == Task.OPE:
        return _per_outcome(task, [
            causal.rmse(causal.unit_values(surface, uniform, data.X, m), causal.unit_values(oracle, uniform, data.X, m))
            for m in outcomes
        ])
    if task == Task.OPE_REGRET:
        return _per_outcome(task, [
            causal.ope_regret(causal.policy_value(surface, uniform, data.X, m), oracle.uniform_value(data.X, m))
            for m in outcomes
        ])
    if task == Task.OPL:
        values = []
        for m in outcomes:
            one_hot = np.eye(n_outcomes)[m]
            values.append(causal.oar(causal.optimal_policy(model, data.X, one_hot), oracle.best_actions(data.X, one_hot)))
        out = [(str(m), v) for m, v in enumerate(values)]
        out.append(("all", causal.oar(causal.optimal_policy(model, data.X, weights), oracle.best_actions(data.X, weights))))
        return out
    if task == Task.COVERAGE:
        return _per_outcome(task, [
            causal.coverage95(model, oracle, test.X, [TaskIndex(a, m) for a in range(oracle.n_actions)])
            for m in outcomes
        ])
    if task == Task.POLICY_RISK:
        return _per_outcome(task, [
            causal.policy_risk(oracle, causal.ice_sign_policy(model, test.X, m), test.X, m, oracle.n_actions)
            for m in outcomes
        ])
    if task == Task.ATT:
        truth = OracleModel(oracle)
        return _per_outcome(task, [
            abs(causal.att(model, data, 1, 0, m) - causal.att(truth, data, 1, 0, m)) for m in outcomes
        ])
    raise ValueError(f"unknown task {task}")


# ========== RUNNER ==========

class ExperimentRunner:
    """Runs experiments and sweeps sequentially; every replication owns its seed substreams"""

    def replication_seed(self, config: ExperimentConfig, grid_index: int, replication: int) -> int:
        return derive_seed(config.base_seed, grid_index, replication)

    def _replicate(
        self,
        config: ExperimentConfig,
        grid_index: int,
        replication: int,
        axis: str = "",
        axis_value: Optional[float] = None,
    ) -> Tuple[int, List[ResultRow]]:
        seed = self.replication_seed(config, grid_index, replication)
        data, oracle = generate(config.dgp, seed)
        split_spec = SplitSpec(train_fraction=config.split.train_fraction, seed=derive_seed(seed, "split", config.split.seed))
        train, test = split(data, split_spec)
        fit_config = config.fit.model_copy(update={"seed": derive_seed(seed, "fit", config.fit.seed)})
        base = dict(dgp=config.dgp.name.value, replication=replication, seed=seed, axis=axis, axis_value=axis_value)

        rows: List[ResultRow] = []
        for variant in config.variants:
            started = time.perf_counter()
            try:
                model = OracleModel(oracle) if variant == ModelVariant.ORACLE else fit(variant, train, fit_config)
            except FIT_FAILURES as e:
                seconds = time.perf_counter() - started
                logger.warning(f"⚠️ {variant.value} failed in replication {replication}: {e}")
                for task in config.tasks:
                    for outcome in [str(m) for m in range(oracle.n_outcomes)] + ["all"]:
                        rows.append(ResultRow(
                            **base, variant=variant.value, task=task.value, outcome=outcome,
                            failed=True, error=f"{type(e).__name__}: {e}", seconds=seconds,
                        ))
                continue
            seconds = time.perf_counter() - started
            for task in config.tasks:
                try:
                    values = evaluate_task(task, model, data, test, oracle, config.weights())
                except NoTreatedUnits as e:
                    rows.append(ResultRow(
                        **base, variant=variant.value, task=task.value, outcome="all",
                        failed=True, error=f"NoTreatedUnits: {e}", seconds=seconds,
                    ))
                    continue
                for outcome, value in values:
                    rows.append(ResultRow(**base, variant=variant.value, task=task.value, outcome=outcome, value=value, seconds=seconds))
        return seed, rows

    def run_experiment(
        self,
        config: ExperimentConfig,
        grid_index: int = 0,
        axis: str = "",
        axis_value: Optional[float] = None,
    ) -> ExperimentResult:
        """
        Run every replication of one experiment

        Args:
            config: Validated experiment configuration
            grid_index: Position in a sweep (0 for a plain run)
            axis: Sweep axis label, empty outside sweeps
            axis_value: Sweep grid value

        Returns:
            ExperimentResult with sorted rows and the aggregate table
        """
        logger.info(
            f"🚀 Experiment {config.dgp.name.value}: n={config.dgp.n}, B={config.replications}, "
            f"variants={[v.value for v in config.variants]}, tasks={[t.value for t in config.tasks]}"
        )
        rows: List[ResultRow] = []
        seeds: Dict[str, int] = {}
        for b in range(config.replications):
            seed, replication_rows = self._replicate(config, grid_index, b, axis, axis_value)
            seeds[f"{grid_index}/{b}"] = seed
            rows.extend(replication_rows)
        rows = sort_rows(rows)
        failed = sum(1 for r in rows if r.failed)
        logger.info(f"✅ Experiment done: {len(rows)} rows, {failed} failed")
        return ExperimentResult(rows=rows, aggregates=aggregate(rows), seeds=seeds)

    def sweep(self, config: ExperimentConfig, axis: SweepAxis, values: Sequence[float]) -> ExperimentResult:
        """
        run_experiment per grid point, keyed by the axis value

        Raises:
            ConfigInvalid: empty grid, or a grid point the simulator cannot take
        """
        if not values:
            raise ConfigInvalid("sweep needs at least one grid value")
        if axis == SweepAxis.GAMMA and config.dgp.name != DgpName.CONFOUNDED:
            raise ConfigInvalid(f"a gamma sweep needs the confounded dgp, got {config.dgp.name.value}")
        if axis == SweepAxis.P and config.dgp.name == DgpName.B1:
            raise ConfigInvalid("b1 has a single covariate; p cannot be swept")

        rows: List[ResultRow] = []
        seeds: Dict[str, int] = {}
        for i, value in enumerate(values):
            dgp = config.dgp.model_dump()
            dgp[axis.value] = int(value) if axis in (SweepAxis.N, SweepAxis.P) else float(value)
            point = _validate({**config.model_dump(exclude={"sweep"}), "dgp": dgp})
            result = self.run_experiment(point, grid_index=i, axis=axis.value, axis_value=float(value))
            rows.extend(result.rows)
            seeds.update(result.seeds)
        rows = sort_rows(rows)
        return ExperimentResult(rows=rows, aggregates=aggregate(rows), seeds=seeds)

    def run_benchmark(self, config: ExperimentConfig, out_dir: Union[str, Path], xlsx: bool = False) -> ExperimentResult:
        """Run the configured experiment (or sweep) and write every output file"""
        if config.sweep is not None:
            result = self.sweep(config, config.sweep.axis, config.sweep.values)
        else:
            result = self.run_experiment(config)
        files = ["results.csv", "aggregates.csv", "timings.csv", "manifest.json"]
        result_export_service.export_results(result.rows, out_dir)
        result_export_service.export_aggregates(result.aggregates, out_dir)
        result_export_service.export_timings(result.rows, out_dir)
        if xlsx:
            result_export_service.export_excel(result.aggregates, result.rows, out_dir)
            files.append("aggregates.xlsx")
        result_export_service.export_manifest(
            {
                "app_name": settings.app_name,
                "version": settings.app_version,
                "config": config.model_dump(mode="json"),
                "seeds": result.seeds,
                "protocol": PROTOCOL,
                "files": files,
            },
            out_dir,
        )
        return result


# ========== CONFIG FILES ==========

def _validate(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigInvalid(str(e)) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read an experiment configuration from TOML or JSON

    Raises:
        ConfigInvalid: unreadable file or failed validation
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        raw = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    return _validate(raw)


# Singleton instance
experiment_runner = ExperimentRunner()


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    return experiment_runner.run_experiment(config)


def sweep(config: ExperimentConfig, axis: SweepAxis, values: Sequence[float]) -> ExperimentResult:
    return experiment_runner.sweep(config, axis, values)

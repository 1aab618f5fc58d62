"""
Command-line interface: simulate, fit, predict, benchmark
"""

import argparse
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from loguru import logger

from counterdkl.config import settings
from counterdkl.coregion import TaskIndex
from counterdkl.dataset import read_csv, write_csv
from counterdkl.errors import ConfigInvalid
from counterdkl.gp_model import fit, load_model, save_model
from counterdkl.harness import experiment_runner, load_config
from counterdkl.schemas import DgpConfig, DgpName, FitConfig, KernelKind, ModelVariant, PriorMean
from counterdkl.simgen import (
    GroundTruthOracle,
    gen_ope_synth,
    generate,
    read_classification_source,
    sidecar_path,
)

TRAINABLE = [v.value for v in ModelVariant if v != ModelVariant.ORACLE]


def _hidden(value: str) -> List[int]:
    try:
        sizes = [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"hidden sizes must be comma-separated integers, got {value!r}") from e
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError(f"hidden sizes must be positive, got {value!r}")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.app_name, description="Counterfactual multitask GP / deep-kernel regression")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", default=None, help="Override COUNTERDKL_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a dataset CSV and its oracle sidecar")
    p.add_argument("--dgp", required=True, choices=[d.value for d in DgpName])
    p.add_argument("--n", type=int, required=True, help="Number of units")
    p.add_argument("--p", type=int, default=10, help="Number of covariates (b2, confounded, ope-synth)")
    p.add_argument("--gamma", type=float, default=0.0, help="Confounding strength (confounded)")
    p.add_argument("--n-actions", type=int, default=2, help="Number of classes of the synthetic source (ope-synth)")
    p.add_argument("--source", type=Path, default=None, help="Covariate/label CSV for ope-synth instead of the synthetic source")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fit", help="Train a model variant on a dataset CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variant", required=True, choices=TRAINABLE)
    p.add_argument("--hidden", type=_hidden, default=[50, 50, 2], help="Hidden layer sizes, e.g. 50,50,2")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel", choices=[k.value for k in KernelKind], default=KernelKind.RBF.value)
    p.add_argument("--prior-mean", choices=[m.value for m in PriorMean], default=PriorMean.CONSTANT.value)
    p.add_argument("--n-actions", type=int, default=None, help="Number of actions; read from the oracle sidecar when omitted")
    p.add_argument("--model-out", type=Path, required=True)

    p = sub.add_parser("predict", help="Posterior of one task at every row of a dataset CSV")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--action", type=int, required=True)
    p.add_argument("--outcome", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("benchmark", help="Run an experiment config (TOML or JSON)")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, default=settings.output_path)
    p.add_argument("--xlsx", action="store_true", help="Also write a formatted aggregates.xlsx")
    return parser


# ========== COMMANDS ==========

def cmd_simulate(args: argparse.Namespace) -> int:
    dgp = DgpName(args.dgp)
    if args.source is not None:
        if dgp != DgpName.OPE_SYNTH:
            raise ConfigInvalid("--source only applies to --dgp ope-synth")
        x, labels = read_classification_source(args.source)
        data, oracle = gen_ope_synth(x, labels, args.seed)
    else:
        data, oracle = generate(DgpConfig(name=dgp, n=args.n, p=args.p, gamma=args.gamma, n_actions=args.n_actions), args.seed)
    write_csv(data, args.out)
    oracle.save(sidecar_path(args.out))
    logger.info(f"✅ Simulated {dgp.value}: {data.n_units} units, {data.n_actions} actions, {data.n_outcomes} outcome(s) -> {args.out}")
    return 0


def _read_dataset(path: Path, n_actions: Optional[int] = None):
    sidecar = sidecar_path(path)
    if n_actions is None and sidecar.exists():
        oracle = GroundTruthOracle.load(sidecar)
        return read_csv(path, n_actions=oracle.n_actions, seed=oracle.seed, dgp=oracle.dgp.value)
    data = read_csv(path, n_actions=n_actions)
    if n_actions is None:
        logger.warning(
            f"⚠️ No oracle sidecar for {path}; assuming {data.n_actions} actions from the largest observed action. "
            "Pass --n-actions if some actions never occur in the data"
        )
    return data


def cmd_fit(args: argparse.Namespace) -> int:
    data = _read_dataset(args.data, args.n_actions)
    config = FitConfig(
        learning_rate=args.lr,
        iterations=args.iters,
        seed=args.seed,
        hidden=args.hidden,
        kernel=KernelKind(args.kernel),
        prior_mean=PriorMean(args.prior_mean),
    )
    model = fit(ModelVariant(args.variant), data, config)
    save_model(model, args.model_out)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    data = read_csv(args.data, n_actions=model.n_actions)
    mean, var = model.predict_batch(data.X, TaskIndex(args.action, args.outcome))
    half = settings.credible_z * np.sqrt(var)
    frame = pd.DataFrame({"mean": mean, "variance": var, "lower95": mean - half, "upper95": mean + half})
    args.out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False, float_format=settings.csv_float_format, encoding="utf-8")
    logger.info(f"✅ Wrote {len(frame)} predictions for task ({args.action}, {args.outcome}) -> {args.out}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    result = experiment_runner.run_benchmark(config, args.out_dir, xlsx=args.xlsx)
    failed = sum(1 for r in result.rows if r.failed)
    logger.info(f"✅ Benchmark written to {args.out_dir} ({len(result.rows)} rows, {failed} failed)")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
}


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Union

import pandas as pd

from src.schemas import HP_FIELDS, HPConfig
from src.services.analysis import CorrelationRow, Ecdf, Geomean, RatAeGrid, ReductionRow, TimeReduction
from src.services.harness import RunTrace
from src.services.optimizers import TunerState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SEED_COLUMNS = ["seed", "t_s", "objective", "std_error", "adv_error"]
AGGREGATE_COLUMNS = ["t_s", "mean", "std"]


def _write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.write_bytes(frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))
    logger.debug("Wrote %s (%d rows)", path, len(frame))
    return path


def _json_number(value: float):
    if value is None or math.isnan(value):
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def write_json(payload: Mapping, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def trace_basename(trace: RunTrace) -> str:
    return f"{trace.label}_{trace.mode}"


def seed_frame(trace: RunTrace) -> pd.DataFrame:
    rows = [(s.seed, t, v, std, adv)
            for s in trace.seeds for t, v, std, adv in zip(s.times, s.objective, s.std_error, s.adv_error)]
    return pd.DataFrame(rows, columns=SEED_COLUMNS)


def write_run(trace: RunTrace, out_dir: PathLike) -> Dict[str, Path]:
    """
    Emit the per-seed trace CSV (``seed,t_s,objective,std_error,adv_error``) and
    the aggregate CSV (``t_s,mean,std``; empty cells where the mean is undefined).

    :param trace: RunTrace: Replayed optimizer
    :param out_dir: PathLike: Target directory
    :return: Paths keyed by ``seeds`` and ``aggregate``
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = trace_basename(trace)
    aggregate = pd.DataFrame({"t_s": trace.grid, "mean": trace.mean, "std": trace.std}, columns=AGGREGATE_COLUMNS)
    return {
        "seeds": _write_frame(seed_frame(trace), out_dir / f"{base}_seeds.csv"),
        "aggregate": _write_frame(aggregate, out_dir / f"{base}_aggregate.csv"),
    }


def replay_summary(traces: Sequence[RunTrace], speedups: Mapping[str, float], budget: float,
                   epsilon: float) -> dict:
    optimizers = {}
    for trace in traces:
        optimizers[trace_basename(trace)] = {
            "label": trace.label,
            "mode": trace.mode,
            "oracle_assisted": trace.oracle_assisted,
            "final_mean": _json_number(trace.final_mean),
            "final_std": _json_number(trace.final_std),
            "seeds": len(trace.seeds),
            "failed_seeds": {str(seed): error for seed, error in sorted(trace.failed.items())},
        }
    return {
        "budget_s": budget,
        "epsilon": epsilon,
        "optimizers": optimizers,
        "speedups": {pair: _json_number(value) for pair, value in speedups.items()},
    }


def config_dict(config: HPConfig) -> dict:
    return dict(zip(HP_FIELDS, config.astuple()))


def write_history(state: TunerState, path: PathLike) -> Path:
    rows = [{**config_dict(e.config), "epochs": e.fidelity.epochs, "attack_iters": e.fidelity.attack_iters,
             "objective": e.value, "std_error": e.std_error, "adv_error": e.adv_error, "cost_s": e.cost,
             "elapsed_s": e.elapsed} for e in state.history]
    columns = list(HP_FIELDS) + ["epochs", "attack_iters", "objective", "std_error", "adv_error", "cost_s",
                                 "elapsed_s"]
    return _write_frame(pd.DataFrame(rows, columns=columns), path)


def write_reduction_table(rows: Iterable[ReductionRow], geomeans: Mapping[str, Optional[Geomean]],
                          out_dir: PathLike) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    table = pd.DataFrame([(r.criterion, r.rat_pct, r.epsilon, r.same, r.diff, r.reduction) for r in rows],
                         columns=["criterion", "rat_pct", "epsilon", "best_same", "best_diff", "reduction_pct"])
    summary = pd.DataFrame([(c, g.value if g else None, g.used if g else 0, g.excluded if g else 0)
                            for c, g in geomeans.items()],
                           columns=["criterion", "geomean_reduction_pct", "used", "excluded"])
    return {
        "reduction": _write_frame(table, out_dir / "error_reduction.csv"),
        "geomean": _write_frame(summary, out_dir / "error_reduction_geomean.csv"),
    }


def write_cdf(curves: Mapping[str, Optional[Ecdf]], path: PathLike, value_name: str) -> Path:
    """Long-format CDF table: one row per (series, sample) with its cumulative fraction."""
    rows = []
    for name, ecdf in curves.items():
        if ecdf is None:
            continue
        xs, ys = ecdf.steps()
        rows.extend((name, x, y) for x, y in zip(xs, ys))
    return _write_frame(pd.DataFrame(rows, columns=["series", value_name, "cdf"]), path)


def write_time_reductions(report: Mapping[str, TimeReduction], path: PathLike) -> Path:
    rows = [(m.method, m.matched, m.skipped,
             m.ecdf.median if m.ecdf else None, m.ecdf.maximum if m.ecdf else None) for m in report.values()]
    return _write_frame(pd.DataFrame(rows, columns=["method", "matched", "skipped", "median_pct", "max_pct"]), path)


def write_correlations(rows: Iterable[CorrelationRow], path: PathLike) -> Path:
    table = pd.DataFrame([(r.metric, r.epsilon, r.cheap_iters, r.r, len(r.cheap)) for r in rows],
                         columns=["metric", "epsilon", "cheap_iters", "pearson_r", "pairs"])
    return _write_frame(table, path)


def write_rat_ae_grid(grid: RatAeGrid, path: PathLike) -> Path:
    frontier = set(grid.frontier)
    table = pd.DataFrame([(c.rat_pct, c.ae_pct, c.std_error, c.adv_error, (c.rat_pct, c.ae_pct) in frontier)
                          for c in grid.cells],
                         columns=["rat_pct", "ae_pct", "std_error", "adv_error", "pareto"])
    return _write_frame(table, path)

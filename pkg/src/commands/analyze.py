import logging
from argparse import Namespace

from src.commands.common import epsilon_tag, manifest_from_args, output_dir, require, resolve_input
from src.exceptions import CorrelationUndefinedError
from src.repository import reports
from src.repository.datasets import load_dataset
from src.services import analysis, plots

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("analyze", parents=parents,
                                   help="Error reduction, correlation, time reduction and Pareto reports")
    parser.set_defaults(handler=cmd_analyze)


def cmd_analyze(args: Namespace) -> int:
    """
    Compute the study reports of a dataset and write them as CSV (and SVG plots).

    :param args: Namespace: Parsed command line
    :return: Exit code
    """
    manifest = manifest_from_args(args)
    section = require(manifest.analyze, "analyze")
    ds = load_dataset(resolve_input(section.dataset, args), manifest.space)
    out = output_dir(args)
    if args.epsilon is not None:
        epsilons = [args.epsilon]
    else:
        epsilons = list(section.epsilons) if section.epsilons else ds.epsilons()
    draw = section.plots

    rows, geomeans = analysis.error_reduction_table(ds, epsilons, section.rat_pct)
    reports.write_reduction_table(rows, geomeans, out)
    if draw:
        plots.reduction_bars(rows, out / "error_reduction.svg")

    for eps in epsilons:
        tag = epsilon_tag(eps)
        curves = {criterion: analysis.per_st_config_reduction_cdf(ds, criterion, eps, section.rat_pct)
                  for criterion in analysis.CRITERIA}
        reports.write_cdf(curves, out / f"reduction_cdf_{tag}.csv", "reduction_pct")

        correlations = []
        for metric in ("std_error", "adv_error"):
            try:
                correlations.extend(analysis.correlation_report(ds, eps, metric, section.cheap_iters,
                                                                section.reference_iters))
            except CorrelationUndefinedError as err:
                logger.warning("Correlation of %s at %s skipped: %s", metric, tag, err.detail)
        reports.write_correlations(correlations, out / f"correlation_{tag}.csv")

        grid = analysis.rat_ae_grid(ds, eps)
        reports.write_rat_ae_grid(grid, out / f"rat_ae_{tag}.csv")
        logger.info("eps=%s: %d of %d Pareto cells mix clean and adversarial examples", tag,
                    round(grid.mixed_fraction * len(grid.frontier)), len(grid.frontier))
        if draw:
            plots.cdf_plot(curves, out / f"reduction_cdf_{tag}.svg", "% error reduction")
            if correlations:
                plots.correlation_scatter(correlations, out / f"correlation_{tag}.svg")
            plots.rat_ae_heatmap(grid, out / f"rat_ae_{tag}.svg")

    times = analysis.time_reduction_cdf(ds, section.reference_iters, section.cheap_iters)
    reports.write_time_reductions(times, out / "time_reduction.csv")
    reports.write_cdf({name: item.ecdf for name, item in times.items()}, out / "time_reduction_cdf.csv",
                      "reduction_pct")
    if draw:
        plots.cdf_plot({name: item.ecdf for name, item in times.items() if item.ecdf is not None},
                       out / "time_reduction_cdf.svg", "% training time reduction")
    for criterion, geomean in geomeans.items():
        if geomean is not None:
            logger.info("Geometric mean %s reduction: %.2f%% (%d excluded)", criterion, geomean.value,
                        geomean.excluded)
    logger.info("Analysis reports written to %s", out)
    return 0

"""
SVG figures for the analysis reports and optimizer traces. Output is byte-stable:
a fixed SVG hash salt and no date metadata.
"""
import logging
from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.services.analysis import CRITERIA, CorrelationRow, Ecdf, RatAeGrid, ReductionRow  # noqa: E402
from src.services.harness import RunTrace  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "robust-hpt"

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug("Wrote figure %s", path)
    return path


def reduction_bars(rows: Sequence[ReductionRow], path: PathLike) -> Path:
    """Grouped bars of percent error reduction per %RAT, one group per criterion."""
    rats = sorted({row.rat_pct for row in rows})
    epsilons = sorted({row.epsilon for row in rows})
    fig, axes = plt.subplots(1, len(epsilons), figsize=(4.5 * len(epsilons), 3.5), squeeze=False)
    width = 0.8 / max(len(rats), 1)
    for ax, eps in zip(axes[0], epsilons):
        for k, rat in enumerate(rats):
            heights = [next((r.reduction for r in rows if r.criterion == c and r.rat_pct == rat and r.epsilon == eps),
                            0.0) for c in CRITERIA]
            ax.bar(np.arange(len(CRITERIA)) + k * width, heights, width, label=f"%RAT={rat}")
        ax.set_xticks(np.arange(len(CRITERIA)) + width * (len(rats) - 1) / 2)
        ax.set_xticklabels(CRITERIA)
        ax.set_ylabel("% error reduction")
        ax.set_title(f"eps={eps * 255:.0f}/255")
        ax.legend(fontsize=8)
    return _save(fig, path)


def cdf_plot(curves: Mapping[str, Ecdf], path: PathLike, xlabel: str) -> Path:
    """Step plot of one or more empirical CDFs."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, ecdf in curves.items():
        x, y = ecdf.steps()
        ax.step(x, y, where="post", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("CDF")
    ax.set_ylim(0.0, 1.02)
    ax.legend(fontsize=8)
    return _save(fig, path)


def correlation_scatter(rows: Sequence[CorrelationRow], path: PathLike) -> Path:
    fig, axes = plt.subplots(1, len(rows), figsize=(3.5 * len(rows), 3.5), squeeze=False)
    for ax, row in zip(axes[0], rows):
        ax.scatter(row.reference, row.cheap, s=8, alpha=0.6)
        ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
        ax.set_xlabel(f"{row.metric}, PGD20")
        ax.set_ylabel(f"{row.metric}, {'FGSM' if row.cheap_iters == 1 else f'PGD{row.cheap_iters}'}")
        ax.set_title(f"r={row.r:.3f}")
    return _save(fig, path)


def rat_ae_heatmap(grid: RatAeGrid, path: PathLike) -> Path:
    """Mean error of the best config per (%RAT, %AE) cell; Pareto cells starred."""
    rats = sorted({c.rat_pct for c in grid.cells})
    aes = sorted({c.ae_pct for c in grid.cells})
    values = np.full((len(rats), len(aes)), np.nan)
    for cell in grid.cells:
        values[rats.index(cell.rat_pct), aes.index(cell.ae_pct)] = (cell.std_error + cell.adv_error) / 2
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    image = ax.imshow(values, origin="lower", cmap="viridis")
    fig.colorbar(image, ax=ax, label="mean error")
    for rat, ae in grid.frontier:
        ax.plot(aes.index(ae), rats.index(rat), marker="*", color="white", markersize=12)
    ax.set_xticks(range(len(aes)))
    ax.set_xticklabels(aes)
    ax.set_yticks(range(len(rats)))
    ax.set_yticklabels(rats)
    ax.set_xlabel("%AE")
    ax.set_ylabel("%RAT")
    return _save(fig, path)


def trace_plot(traces: Sequence[RunTrace], path: PathLike) -> Path:
    """Mean incumbent objective over simulated time, with a one standard deviation band."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for trace in traces:
        line, = ax.plot(trace.grid, trace.mean, label=trace.label + (" (oracle)" if trace.oracle_assisted else ""))
        ax.fill_between(trace.grid, trace.mean - trace.std, trace.mean + trace.std, color=line.get_color(), alpha=0.2)
    ax.set_xlabel("simulated time [s]")
    ax.set_ylabel("objective")
    ax.legend(fontsize=8)
    return _save(fig, path)

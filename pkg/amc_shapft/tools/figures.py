# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""CSV exports of the analysis figures, with best-effort SVG renderings.

The CSV files are the reference output; the SVGs draw the same numbers.
"""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import eps_tag  # noqa: E402
from .exceptions import DataError  # noqa: E402

_logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "amc-shapft"

SVG_METADATA = {"Date": None}


def write_point_sums(path, curves):
    """``index`` column plus one column of per-timestep sums per epsilon."""
    if not curves:
        raise DataError("no attribution curves to export")
    epsilons = sorted(curves)
    lengths = {len(curves[e]) for e in epsilons}
    if len(lengths) != 1:
        raise DataError(f"curves of different lengths: {sorted(lengths)}")
    length = lengths.pop()
    table = np.column_stack([np.arange(length)] + [curves[e] for e in epsilons])
    header = ",".join(["index"] + [eps_tag(e) for e in epsilons])
    np.savetxt(
        path,
        table,
        delimiter=",",
        header=header,
        comments="",
        fmt=["%d"] + ["%.9g"] * len(epsilons),
    )
    return Path(path)


def write_matrix(path, matrix, labels):
    """Square matrix, rows are true classes, columns predicted classes."""
    matrix = np.asarray(matrix)
    fmt = "%d" if np.issubdtype(matrix.dtype, np.integer) else "%.9g"
    np.savetxt(path, matrix, delimiter=",", header=",".join(labels), comments="", fmt=fmt)
    return Path(path)


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=SVG_METADATA, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def render_point_sums(path, curves):
    fig, ax = plt.subplots(figsize=(8, 4))
    for epsilon in sorted(curves):
        ax.plot(curves[epsilon], label=f"epsilon = {epsilon:g}")
    ax.axhline(0.0, color="black", linewidth=0.5)
    ax.set_xlabel("Sampling point")
    ax.set_ylabel("Sum of attributions")
    ax.legend(loc="best")
    ax.grid(True)
    return _save(fig, path)


def render_matrix_pair(path, left, right, titles, labels):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5), layout="constrained")
    for ax, matrix, title in zip(axes, (left, right), titles):
        image = ax.imshow(np.asarray(matrix, dtype=float), cmap="viridis")
        ax.set_title(title)
        ax.set_xticks(range(len(labels)), labels, rotation=45)
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("Predicted")
        ax.set_ylabel("True")
        fig.colorbar(image, ax=ax, shrink=0.8)
    return _save(fig, path)


def export_figures(
    out_dir, curves, heatmap, confusion_tiny_adv, confusion_adv_data, labels, svg=True
):
    """Write every figure; returns ``{name: path}``.

    ``curves`` maps epsilon to per-timestep sums, the matrices belong to one
    epsilon.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {
        "point_sums": write_point_sums(out_dir / "point_sums.csv", curves),
        "heatmap": write_matrix(out_dir / "heatmap.csv", heatmap, labels),
        "confusion_tiny_adv": write_matrix(
            out_dir / "confusion_tiny_adv.csv", confusion_tiny_adv, labels
        ),
        "confusion_adv_data": write_matrix(
            out_dir / "confusion_adv_data.csv", confusion_adv_data, labels
        ),
    }
    if svg:
        try:
            written["point_sums_svg"] = render_point_sums(out_dir / "point_sums.svg", curves)
            written["heatmap_svg"] = render_matrix_pair(
                out_dir / "heatmap_confusion.svg",
                heatmap,
                confusion_tiny_adv,
                ("Attribution heatmap (tiny_adv)", "Confusion matrix (tiny_adv)"),
                labels,
            )
            written["adv_pair_svg"] = render_matrix_pair(
                out_dir / "confusion_pair.svg",
                confusion_tiny_adv,
                confusion_adv_data,
                ("Confusion matrix (tiny_adv)", "Confusion matrix (adv_data)"),
                labels,
            )
        except (OSError, ValueError) as err:
            _logger.warning("SVG rendering failed, CSV files are complete: %s", err)
    for path in written.values():
        _logger.info("Wrote %s", path)
    return {name: str(path) for name, path in written.items()}

"""Benchmark tables, map triptychs, and matplotlib figure rendering.

The report path of the CLI writes three kinds of artifact side by side: a
CSV with full-precision metric rows, an aligned plain-text table shaped like
the benchmark table (4 decimals, one row per model), and rendered figures
(PNG) plus raw PGM/PPM triptychs for the target / model / bicubic map
comparison.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport
from .raster import Raster, scale_to_bytes, write_pgm, write_ppm
from .training import LogRow

FOOTER_NOTE = (
    "zero-denominator convention: a metric with no positive predictions "
    "reports 1 when there are also no missed fires, else 0"
)

_COLUMNS = ("RMSE", "R2", "Precision", "F1", "Threat Score")


def _fmt(value: float | None, decimals: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{decimals}f}"


def format_report_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per model, benchmark-table column order."""
    rows = [
        (
            r.model,
            _fmt(r.rmse),
            _fmt(r.r2),
            _fmt(r.precision),
            _fmt(r.f1),
            _fmt(r.threat_score),
        )
        for r in reports
    ]
    headers = ("Model",) + _COLUMNS
    widths = [
        max(len(headers[c]), *(len(row[c]) for row in rows)) for c in range(len(headers))
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    lines.append("")
    lines.append(f"n_pixels={reports[0].n_pixels}  threshold={reports[0].threshold!r}")
    lines.append(f"note: {FOOTER_NOTE}")
    return "\n".join(lines) + "\n"


def write_report_text(reports: list[EvalReport], path: str | Path) -> None:
    Path(path).write_text(format_report_table(reports))


def write_report_csv(reports: list[EvalReport], path: str | Path) -> None:
    """Full-precision delimited report (empty r2 field when undefined)."""
    with open(path, "w", newline="") as f:
        f.write("model,scale,rmse,r2,precision,f1,threat_score,n_pixels,threshold\n")
        for r in reports:
            r2 = "" if r.r2 is None else repr(r.r2)
            f.write(
                f"{r.model},{r.scale},{r.rmse!r},{r2},{r.precision!r},{r.f1!r},"
                f"{r.threat_score!r},{r.n_pixels},{r.threshold!r}\n"
            )


def read_report_csv(path: str | Path) -> list[EvalReport]:
    reports = []
    with open(path) as f:
        next(f)
        for line in f:
            model, scale, rmse, r2, prec, f1, threat, n_px, thr = line.rstrip("\n").split(",")
            reports.append(
                EvalReport(
                    model=model,
                    scale=int(scale),
                    rmse=float(rmse),
                    r2=float(r2) if r2 else None,
                    precision=float(prec),
                    f1=float(f1),
                    threat_score=float(threat),
                    n_pixels=int(n_px),
                    threshold=float(thr),
                )
            )
    return reports


# ---------------------------------------------------------------------------
# Triptychs: target / model output / bicubic, jointly scaled

def _panel_values(r) -> np.ndarray:
    return r.values if isinstance(r, Raster) else np.asarray(r, dtype=np.float64)


def triptych_array(target, pred, baseline, gutter: int = 2) -> np.ndarray:
    """Concatenate the three maps side by side with a bright gutter."""
    panels = [_panel_values(x) for x in (target, pred, baseline)]
    h = panels[0].shape[0]
    for p in panels[1:]:
        if p.shape != panels[0].shape:
            raise ValueError(f"panel shapes differ: {[p.shape for p in panels]}")
    hi = max(float(p.max()) for p in panels)
    gut = np.full((h, gutter), hi)
    parts = [panels[0], gut, panels[1], gut, panels[2]]
    return np.hstack(parts)


def write_triptych_pgm(target, pred, baseline, path: str | Path) -> None:
    write_pgm(triptych_array(target, pred, baseline), path)


def write_triptych_ppm(target, pred, baseline, path: str | Path) -> None:
    """Color triptych: joint min-max scale pushed through the inferno colormap."""
    combined = triptych_array(target, pred, baseline)
    scaled = scale_to_bytes(combined)
    rgb = (plt.get_cmap("inferno")(scaled / 255.0)[..., :3] * 255).astype(np.uint8)
    write_ppm(rgb, path)


def save_triptych_figure(
    target,
    pred,
    baseline,
    path: str | Path,
    title: str = "",
    labels: tuple[str, str, str] = ("HR target", "FireSRnet", "Bicubic"),
) -> None:
    panels = [_panel_values(x) for x in (target, pred, baseline)]
    vmax = max(float(p.max()) for p in panels) or 1.0
    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2), constrained_layout=True)
    for ax, panel, label in zip(axes, panels, labels):
        im = ax.imshow(panel, cmap="inferno", vmin=0.0, vmax=vmax, interpolation="nearest")
        ax.set_title(label)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.85, label="normalized fire exposure")
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metrics_figure(reports: list[EvalReport], path: str | Path) -> None:
    """Grouped bars, one group per metric, one bar per model."""
    metrics = [
        ("RMSE", [r.rmse for r in reports]),
        ("R2", [r.r2 if r.r2 is not None else 0.0 for r in reports]),
        ("Precision", [r.precision for r in reports]),
        ("F1", [r.f1 for r in reports]),
        ("Threat", [r.threat_score for r in reports]),
    ]
    n_models = len(reports)
    width = 0.8 / n_models
    x = np.arange(len(metrics))
    fig, ax = plt.subplots(figsize=(8, 4), constrained_layout=True)
    for i, r in enumerate(reports):
        vals = [m[1][i] for m in metrics]
        ax.bar(x + (i - (n_models - 1) / 2) * width, vals, width, label=r.model)
    ax.set_xticks(x)
    ax.set_xticklabels([m[0] for m in metrics])
    ax.set_ylabel("score")
    ax.legend()
    ax.set_title(f"{reports[0].scale}x benchmark (pooled over {reports[0].n_pixels} pixels)")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve(log: list[LogRow], path: str | Path) -> None:
    epochs = [row.epoch for row in log]
    val = [row.val_loss for row in log]
    train_pts = [(row.epoch, row.train_loss) for row in log if row.train_loss is not None]
    fig, ax = plt.subplots(figsize=(7, 4), constrained_layout=True)
    if train_pts:
        ax.plot([e for e, _ in train_pts], [v for _, v in train_pts], label="train")
    ax.plot(epochs, val, label="val")
    best = [row.epoch for row in log if row.best]
    if best:
        ax.axvline(best[-1], color="gray", linestyle=":", label=f"best (epoch {best[-1]})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_filter_grid_figure(kernels: np.ndarray, path: str | Path) -> None:
    """Overview of first-layer filters (channel means) as one figure."""
    n = kernels.shape[0]
    cols = min(8, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows))
    axes = np.atleast_2d(axes)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.set_xticks([])
        ax.set_yticks([])
        if i < n:
            ax.imshow(kernels[i].mean(axis=0), cmap="RdBu_r", interpolation="nearest")
            ax.set_title(str(i), fontsize=8)
        else:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)

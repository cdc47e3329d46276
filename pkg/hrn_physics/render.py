import math
from pathlib import Path
from typing import Sequence

import numpy as np
from rich.console import Console
from rich.table import Table
from rich.text import Text

from hrn_physics.evaluation import METRICS, MetricReport
from hrn_physics.scenarios import Trajectory
from hrn_physics.training import EpochRecord


def _number(value: float | None, digits: int = 4) -> Text:
    if value is None:
        return Text("-", style="dim")
    if not math.isfinite(value):
        return Text("nan", style="bold red")
    return Text(f"{value:.{digits}g}", style="yellow")


def render_trajectory_summary(
    rows: Sequence[tuple[Path, Trajectory]], console: Console | None = None
) -> None:
    """One line per generated trajectory file."""
    console = console or Console()
    if not rows:
        console.print("No trajectories generated.")
        return
    table = Table(title="Generated trajectories", title_justify="left")
    table.add_column("file", style="cyan")
    table.add_column("scenario", style="magenta")
    table.add_column("seed", justify="right")
    table.add_column("frames", justify="right")
    table.add_column("particles", justify="right")
    table.add_column("objects", justify="right")
    table.add_column("resets", justify="right", style="dim")
    for path, traj in rows:
        header = traj.header
        table.add_row(
            path.name,
            header.scenario,
            str(header.seed),
            str(traj.n_frames),
            str(traj.n_particles),
            str(len(header.scene.objects())),
            str(len(header.resets)),
        )
    console.print(table)


def render_curve(
    curve: Sequence[EpochRecord], console: Console | None = None, last: int = 10
) -> None:
    """The tail of a training curve."""
    console = console or Console()
    if not curve:
        console.print("No epochs were run.")
        return
    table = Table(title=f"Training curve (last {min(last, len(curve))} of {len(curve)})")
    table.add_column("epoch", justify="right")
    table.add_column("train loss", justify="right")
    table.add_column("val loss", justify="right")
    table.add_column("lr", justify="right", style="dim")
    for record in curve[-last:]:
        table.add_row(
            str(record.epoch),
            _number(record.train_loss, 6),
            _number(record.val_loss, 6),
            f"{record.learning_rate:.3g}",
        )
    console.print(table)


def ordering(reports: Sequence[MetricReport], metric: str = "position") -> list[MetricReport]:
    """Reports sorted by the final-horizon value of `metric`; NaN sorts last."""

    def key(report: MetricReport) -> tuple[bool, float]:
        value = report.series(metric)[-1]
        return (not np.isfinite(value), value if np.isfinite(value) else 0.0)

    return sorted(reports, key=key)


def render_metric_table(
    reports: Sequence[MetricReport],
    metric: str = "position",
    console: Console | None = None,
) -> None:
    """Models ranked by cumulative error at the last horizon."""
    console = console or Console()
    if not reports:
        console.print("No models evaluated.")
        return
    horizon = reports[0].horizons[-1]
    table = Table(title=f"Cumulative MSE at t+{horizon} (ranked by {metric})")
    table.add_column("#", justify="right", style="dim")
    table.add_column("model", style="bold")
    for name in METRICS:
        style = "bold" if name == metric else None
        table.add_column(name, justify="right", header_style=style)
    table.add_column("windows", justify="right", style="dim")
    for rank, report in enumerate(ordering(reports, metric), start=1):
        table.add_row(
            str(rank),
            report.label,
            *(_number(report.series(name)[-1]) for name in METRICS),
            str(report.n_windows),
        )
    console.print(table)

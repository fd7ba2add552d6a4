"""Rich layout components for the fpm-singleshot progress system.

This module provides the dashboard used by the CLI to display per-stage progress
for long loops (reconstruction iterations, training steps) and a summary of
stage durations when the run ends.
"""

from datetime import timedelta
from typing import Dict, Optional

import humanize
from rich.console import Console
from rich.progress import (
    Progress,
    BarColumn,
    TextColumn,
    TimeRemainingColumn,
    TimeElapsedColumn,
    TaskID,
)
from rich.table import Table
from progress.state import RunState


class Dashboard:
    """Progress bars for pipeline stages, mirrored into the RunState.

    Numerical modules never import this class; they accept a plain
    ``callback(done, total)`` which :meth:`callback` produces.
    """

    def __init__(self, state: Optional[RunState] = None, enabled: bool = True,
                 console: Optional[Console] = None):
        """Initialize the Dashboard.

        Args:
            state: RunState receiving stage status updates
            enabled: When False, nothing is rendered
            console: Console to render on (stderr by default)
        """
        self.state = state
        self.enabled = enabled
        self.console = console or Console(stderr=True)
        self.progress = Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(bar_width=40),
            TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
            TimeElapsedColumn(),
            TimeRemainingColumn(),
            console=self.console,
            transient=True,
            disable=not enabled,
        )
        self._tasks: Dict[str, TaskID] = {}

    def __enter__(self):
        self.progress.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.progress.stop()
        if self.enabled and self.state is not None and exc_type is None:
            self.print_summary()

    def add_stage(self, name: str, total: int = 100) -> None:
        self._tasks[name] = self.progress.add_task(f"[bold]{name}[/bold]", total=total)

    def update_stage(self, name: str, status: str, progress: float) -> None:
        """Update a stage's bar and persist its status.

        Args:
            name: Stage name
            status: 'running', 'completed' or 'failed'
            progress: Fraction complete (0.0 to 1.0)
        """
        if name not in self._tasks:
            self.add_stage(name)
        task = self.progress.tasks[self._tasks[name]]
        self.progress.update(self._tasks[name], completed=progress * task.total)
        if self.state is not None and status != "running":
            self.state.update_stage(name, status, progress)

    def callback(self, name: str):
        """Return a ``callback(done, total)`` bound to a stage."""
        def _report(done: int, total: int) -> None:
            if name not in self._tasks:
                self.add_stage(name, total=total)
            self.progress.update(self._tasks[name], completed=done, total=total)
        return _report

    def print_summary(self) -> None:
        """Print a table of stage statuses and durations."""
        table = Table(title="Stages")
        table.add_column("Stage", style="bold")
        table.add_column("Status")
        table.add_column("Duration")
        for name, info in self.state.get_all_stages().items():
            status = info.get("status", "unknown")
            style = {"completed": "green", "failed": "red"}.get(status, "yellow")
            duration = info.get("duration")
            pretty = humanize.precisedelta(timedelta(seconds=duration)) if duration is not None else "n/a"
            table.add_row(name, f"[{style}]{status}[/{style}]", pretty)
        self.console.print(table)

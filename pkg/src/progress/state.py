"""State persistence module for the fpm-singleshot progress system.

This module provides JSON-backed state persistence for tracking which pipeline
stages ran, the metrics they produced, and the events (including errors)
recorded along the way.
"""

import json
from pathlib import Path
from typing import Dict, Any, Optional
from datetime import datetime
from loguru import logger

STATE_FILE_NAME = "run_state.json"


def _empty_state() -> Dict[str, Any]:
    return {
        "stages": {},
        "metrics": {},
        "last_run": None,
        "history": []
    }


class RunState:
    """Manages the state of a run with persistence."""

    def __init__(self, state_file: str = STATE_FILE_NAME, persist: bool = True):
        """Initialize the RunState with a state file path.

        Args:
            state_file: Path to the JSON state file
            persist: When False nothing is written to disk
        """
        self.state_file = Path(state_file)
        self.persist = persist
        self._state: Dict[str, Any] = _empty_state()

    @classmethod
    def in_directory(cls, output_dir: str) -> "RunState":
        return cls(str(Path(output_dir) / STATE_FILE_NAME)).load_or_create()

    def load_or_create(self) -> 'RunState':
        """Load existing state or create a new one if none exists.

        Returns:
            The initialized RunState instance
        """
        if self.state_file.exists():
            try:
                with open(self.state_file, 'r') as f:
                    self._state = json.load(f)
                logger.info(f"Loaded state from {self.state_file}")
            except (json.JSONDecodeError, IOError) as e:
                logger.warning(f"Failed to load state: {e}. Creating new state.")
                self._state = _empty_state()
        else:
            logger.debug(f"Creating new state at {self.state_file}")
        return self

    def save(self) -> None:
        """Save the current state to the state file."""
        if not self.persist:
            return
        try:
            self.state_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.state_file, 'w') as f:
                json.dump(self._state, f, indent=2)
            logger.debug(f"Saved state to {self.state_file}")
        except IOError as e:
            logger.error(f"Failed to save state: {e}")

    def update_stage(self, stage_name: str, status: str, progress: float = 0.0,
                     start_time: Optional[datetime] = None,
                     end_time: Optional[datetime] = None) -> None:
        """Update the status of a pipeline stage.

        Args:
            stage_name: Name of the stage to update
            status: Current status of the stage ('running', 'completed', 'failed')
            progress: Progress fraction (0.0 to 1.0)
            start_time: Optional datetime when the stage started
            end_time: Optional datetime when the stage ended
        """
        stage = self._state["stages"].setdefault(stage_name, {})
        stage.update({"status": status, "progress": progress})
        if start_time:
            stage["start_time"] = start_time.isoformat()
        if end_time:
            stage["end_time"] = end_time.isoformat()
            if stage.get("start_time"):
                start = datetime.fromisoformat(stage["start_time"])
                stage["duration"] = (end_time - start).total_seconds()
        self._state["last_run"] = datetime.now().isoformat()
        self.save()

    def get_stage_status(self, stage_name: str) -> Dict[str, Any]:
        return self._state["stages"].get(stage_name, {})

    def get_all_stages(self) -> Dict[str, Any]:
        return self._state["stages"]

    def record_metrics(self, stage_name: str, metrics: Dict[str, Any]) -> None:
        """Merge metrics produced by a stage.

        Args:
            stage_name: Stage the metrics belong to
            metrics: JSON-serializable mapping
        """
        self._state["metrics"].setdefault(stage_name, {}).update(metrics)
        self.save()

    def get_metrics(self) -> Dict[str, Any]:
        return self._state["metrics"]

    def record_event(self, event_type: str, details: Dict[str, Any]) -> None:
        """Record an event in the run history.

        Args:
            event_type: Type of event (e.g., 'stage_start', 'stage_end', 'error')
            details: Dictionary containing event details
        """
        event = {
            "timestamp": datetime.now().isoformat(),
            "type": event_type,
            "details": details
        }
        self._state["history"].append(event)

        # Keep history size manageable
        if len(self._state["history"]) > 1000:
            self._state["history"] = self._state["history"][-500:]

        self.save()

    def events(self, event_type: Optional[str] = None):
        return [e for e in self._state["history"] if event_type is None or e["type"] == event_type]

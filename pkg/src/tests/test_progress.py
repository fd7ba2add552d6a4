import json
from datetime import datetime, timedelta
from pathlib import Path
import sys
# Make package importable when tests run from project root:
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import pytest
from rich.console import Console

from progress.errors import (
    ConfigurationError,
    ErrorCategory,
    ErrorManager,
    FormatError,
    NumericError,
    categorize,
)
from progress.state import RunState
from progress.ui import Dashboard


@pytest.mark.parametrize("exc, category, code", [
    (ConfigurationError("bad key"), ErrorCategory.CONFIG, 2),
    (NumericError("nan", op="forward", iteration=3), ErrorCategory.NUMERIC, 3),
    (FormatError("truncated", offset=12), ErrorCategory.IO, 4),
    (FileNotFoundError("missing"), ErrorCategory.IO, 4),
    (RuntimeError("boom"), ErrorCategory.INTERNAL, 1),
])
def test_categories_and_exit_codes(exc, category, code):
    assert categorize(exc) is category
    report = ErrorManager().report_error(exc, "reconstruct")
    assert report.exit_code == code


def test_one_line_format():
    report = ErrorManager().report_error(ConfigurationError('unknown config key(s): "x"'), "setup")
    assert report.one_line() == "error category=config stage=setup message=\"unknown config key(s): 'x'\""
    assert "config.sample.yaml" in report.suggestion


def test_numeric_suggestion_names_op_and_iteration():
    report = ErrorManager().report_error(NumericError("nan", op="SqrtBackward0", iteration=41), "train")
    assert "SqrtBackward0" in report.suggestion
    assert "iteration 41" in report.suggestion


def test_format_error_message_has_offset():
    report = ErrorManager().report_error(FormatError("bad magic", offset=0), "predict")
    assert report.message.endswith("(at byte offset 0)")


def test_errors_are_recorded_in_state(tmp_path):
    state = RunState(str(tmp_path / "state.json")).load_or_create()
    ErrorManager(state).report_error(NumericError("nan", op="forward"), "reconstruct")
    events = state.events("error")
    assert len(events) == 1
    assert events[0]["details"]["category"] == "NUMERIC"
    assert events[0]["details"]["details"] == {"op": "forward"}


def test_state_round_trip(tmp_path):
    state = RunState.in_directory(str(tmp_path))
    start = datetime(2024, 1, 1, 12, 0, 0)
    state.update_stage("simulate", "running", 0.0, start_time=start)
    state.update_stage("simulate", "completed", 1.0, end_time=start + timedelta(seconds=90))
    state.record_metrics("simulate", {"stacks": 3})
    state.record_event("stage_end", {"stage": "simulate"})

    reloaded = RunState.in_directory(str(tmp_path))
    stage = reloaded.get_stage_status("simulate")
    assert stage["status"] == "completed"
    assert stage["duration"] == 90.0
    assert reloaded.get_metrics() == {"simulate": {"stacks": 3}}
    assert len(reloaded.events("stage_end")) == 1
    assert json.loads((tmp_path / "run_state.json").read_text())["metrics"]["simulate"]["stacks"] == 3


def test_state_without_persistence_writes_nothing(tmp_path):
    state = RunState(str(tmp_path / "state.json"), persist=False)
    state.record_metrics("phantom", {"count": 1})
    assert not (tmp_path / "state.json").exists()


def test_corrupt_state_file_starts_fresh(tmp_path):
    (tmp_path / "run_state.json").write_text("{not json")
    state = RunState.in_directory(str(tmp_path))
    assert state.get_all_stages() == {}


def test_dashboard_callback_and_summary(tmp_path):
    state = RunState(str(tmp_path / "state.json")).load_or_create()
    console = Console(file=open(tmp_path / "out.txt", "w"), width=100)
    with Dashboard(state, enabled=True, console=console) as dash:
        report = dash.callback("train")
        for step in range(1, 11):
            report(step, 10)
        task = dash.progress.tasks[dash._tasks["train"]]
        assert task.completed == 10
        assert task.total == 10
        start = datetime(2024, 1, 1, 8, 0, 0)
        state.update_stage("train", "completed", 1.0, start_time=start, end_time=start + timedelta(seconds=5))
    console.file.close()
    text = (tmp_path / "out.txt").read_text()
    assert "Stages" in text
    assert "train" in text
    assert "5 seconds" in text


def test_disabled_dashboard_still_updates_state(tmp_path):
    state = RunState(str(tmp_path / "state.json")).load_or_create()
    with Dashboard(state, enabled=False) as dash:
        dash.update_stage("phantom", "completed", 1.0)
    assert state.get_stage_status("phantom")["status"] == "completed"

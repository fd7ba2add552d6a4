#!/usr/bin/env python3
# scripts/run_geometry_check.py
# Print the optics geometry survey for one or more config files as
# newline-delimited JSON. With no arguments the sample config is used.
from __future__ import annotations

import json
import os
import platform
import sys
from typing import List

# Insert absolute repo_root/src at sys.path[0] before importing fpm_singleshot.
_repo_root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
_src_path = os.path.join(_repo_root, "src")
if _src_path not in sys.path:
    sys.path.insert(0, _src_path)

try:
    from fpm_singleshot.config import RunConfig
    from fpm_singleshot.optics import select_centermost
    from fpm_singleshot.report import survey
except Exception as e:
    RunConfig = None  # reported per config below
    _import_error = str(e)


def check_config(path: str) -> dict:
    json_obj = {
        "python_version": platform.python_version(),
        "config": path,
    }
    if RunConfig is None:
        json_obj["error"] = f"import_failed: {_import_error}"
        return json_obj
    try:
        cfg = RunConfig.load(path)
        optics = cfg.optics()
        json_obj["survey"] = survey(optics, select_centermost(optics, optics.num_leds))
    except Exception as e:
        json_obj["error"] = f"{type(e).__name__}: {e}"
    return json_obj


def main(argv: List[str] = None) -> int:
    paths = list(argv if argv is not None else sys.argv[1:])
    if not paths:
        paths = [os.path.join(_repo_root, "config.sample.yaml")]
    failed = False
    for path in paths:
        result = check_config(path)
        failed = failed or "error" in result
        sys.stdout.write(json.dumps(result, ensure_ascii=False) + "\n")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())

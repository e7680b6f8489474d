"""Merge a run directory's artifacts into one versioned, schema-checked JSON document."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import jsonschema

REPORT_VERSION = 1
ARTIFACTS = {
    "config": "config.json",
    "sweep": "sweep.json",
    "prune": "prune.json",
    "similarity": "similarity.json",
    "eval": "eval.json",
}


def report_schema() -> dict:
    return json.loads(resources.files("elasticlab.schemas").joinpath("report.schema.json").read_text())


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def build_report(run_dir: str | Path) -> dict:
    """Collect whatever artifacts exist; absent ones are listed under ``missing``."""
    run_dir = Path(run_dir)
    report: dict = {"report_version": REPORT_VERSION, "missing": []}
    for key, fname in ARTIFACTS.items():
        path = run_dir / fname
        if path.is_file():
            report[key] = json.loads(path.read_text())
        else:
            report[key] = None
            report["missing"].append(fname)
    logs = {}
    if run_dir.is_dir():
        for path in sorted(run_dir.glob("*.jsonl")):
            logs[path.stem] = _read_jsonl(path)
    if not logs:
        report["missing"].append("*.jsonl")
    report["train_logs"] = logs
    return report


def validate_report(report: dict) -> None:
    jsonschema.validate(report, report_schema())


def emit_report(run_dir: str | Path, out_name: str = "report.json") -> dict:
    report = build_report(run_dir)
    validate_report(report)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / out_name).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report

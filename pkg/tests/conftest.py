from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from reportcard.ingest import load_firms
from reportcard.pipeline import Pipeline, PipelineConfig

from helpers import ACCEPTANCE

DATA = Path(__file__).with_name("data")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def firm_units():
    return load_firms()


@pytest.fixture(scope="session")
def reference():
    """Reference posterior summaries, grades (1 = worst) and Condorcet ranks per firm."""
    with (DATA / "reference_results.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["firm"]: r for r in rows}


@pytest.fixture(scope="session")
def firm_runs(tmp_path_factory):
    """Full pipeline runs on the firm data for both models with p = 2 contrast moments."""
    runs = {}
    for model in ("baseline", "hierarchical"):
        out = tmp_path_factory.mktemp(f"firm_{model}")
        cfg = PipelineConfig.from_mapping(
            {"model": model, "p": 2, "lambdas": [0.25, 1.0], "output_dir": str(out)}
        )
        pipe = Pipeline(cfg)
        pipe.run()
        runs[model] = pipe
    return runs


@pytest.fixture(scope="session")
def firm_grades_p0(firm_runs):
    """Unweighted (p = 0) solutions at lambda 0.25 and 1 for both models."""
    from reportcard.solver import lambda_sweep

    out = {}
    for model, pipe in firm_runs.items():
        mats = pipe.matrices()
        out[model] = dict(lambda_sweep(mats, [0.25, 1.0], p=0))
    return out


def corr(a, b) -> float:
    return float(np.corrcoef(np.asarray(a, float), np.asarray(b, float))[0, 1])

"""
Unit tests for results persistence and report rendering
"""

import json
import pytest
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.report import (
    CSV_COLUMNS,
    RESULTS_SCHEMA,
    CellResult,
    ExperimentReport,
    PartitionSummary,
    TrialResult,
    emit_report,
    load_results,
    render_report,
    results_table,
    validate_results,
)
from src.skew import SkewReport


def make_cell(partition, protocol, accuracies, drop=None, matrix=False):
    trials = tuple(
        TrialResult(
            trial=r,
            seed=1000 + r,
            test_accuracy=acc,
            selected_round=2,
            ks=0.5,
            quantity_std=12.0,
            cross_matrix=((acc, 0.5), (0.5, acc)) if matrix else None,
            drop_rate=drop,
        )
        for r, acc in enumerate(accuracies)
    )
    mean = sum(accuracies) / len(accuracies)
    return CellResult(
        partition, protocol, protocol.split("+")[0], "none", trials,
        mean_accuracy=mean, std_accuracy=0.01, drop_rate=drop,
        reference="protocol:centralized" if drop is not None else None,
    )


@pytest.fixture
def report():
    """Two label-skew partitions, two protocols, two trials"""
    skew = SkewReport(0.0, 0.5, (10, 10), ((5, 5), (8, 2)))
    return ExperimentReport(
        name="fixture",
        reference={"protocol": "centralized"},
        repeats=2,
        partitions=(PartitionSummary("label-1", "label", skew), PartitionSummary("label-4", "label", skew)),
        cells=(
            make_cell("label-1", "centralized", [0.80, 0.82], drop=0.0),
            make_cell("label-1", "fedavg", [0.79, 0.81], drop=0.5),
            make_cell("label-4", "centralized", [0.80, 0.80], drop=0.0),
            make_cell("label-4", "fedavg", [0.60, 0.64], drop=22.5),
        ),
    )


class TestResultsStructure:
    """Test suite for the results.json structure"""

    def test_round_trip(self, report):
        """Test a report survives serialisation unchanged"""
        data = json.loads(json.dumps(report.to_dict()))

        assert ExperimentReport.from_dict(data) == report

    def test_schema_tag(self, report):
        """Test results carry the schema identifier"""
        assert report.to_dict()["schema"] == RESULTS_SCHEMA

    def test_failed_cell_keeps_error(self):
        """Test a failed cell records its error and no trials"""
        cell = CellResult("p", "fedavg", "fedavg", "none", (), error="boom")
        data = cell.to_dict()

        assert data["error"] == "boom"
        assert CellResult.from_dict(data) == cell

    def test_wrong_schema(self, report):
        """Test an unknown schema tag is rejected"""
        data = dict(report.to_dict(), schema="other/9")

        with pytest.raises(ValueError, match="results.schema"):
            validate_results(data)

    def test_missing_trial_field(self, report):
        """Test a trial without an accuracy is rejected by path"""
        data = report.to_dict()
        del data["cells"][1]["trials"][0]["test_accuracy"]

        with pytest.raises(ValueError, match=r"results.cells\[1\].trials\[0\].test_accuracy"):
            validate_results(data)

    def test_wrong_cells_type(self, report):
        """Test cells must be a list"""
        data = dict(report.to_dict(), cells={})

        with pytest.raises(ValueError, match="results.cells"):
            validate_results(data)


class TestResultsTable:
    """Test suite for results_table"""

    def test_one_row_per_cell_trial(self, report):
        """Test the table has cells x R rows in the documented columns"""
        table = results_table(report.to_dict())

        assert list(table.columns) == CSV_COLUMNS
        assert len(table) == 4 * 2

    def test_failed_cells_add_no_rows(self, report):
        """Test failed cells are absent from the table"""
        data = report.to_dict()
        data["cells"].append(CellResult("label-4", "cwt", "cwt", "none", (), error="x").to_dict())

        assert len(results_table(data)) == 8

    def test_values(self, report):
        """Test row values come from the trials"""
        table = results_table(report.to_dict())
        row = table[(table.partition_id == "label-4") & (table.protocol == "fedavg") & (table.trial == 1)].iloc[0]

        assert row.test_accuracy == 0.64
        assert row.drop_rate == 22.5
        assert row.seed == 1001


class TestEmitReport:
    """Test suite for emit_report and render_report"""

    def test_files_written(self, report, tmp_path):
        """Test results.json, results.csv and the regime figure are written"""
        written = emit_report(report, tmp_path)
        names = {p.name for p in written}

        assert {"results.json", "results.csv", "figure_label.svg"} <= names
        assert load_results(tmp_path) == json.loads((tmp_path / "results.json").read_text())
        assert len(pd.read_csv(tmp_path / "results.csv")) == 8

    def test_empty_report(self, tmp_path):
        """Test an empty report gives a header-only CSV"""
        emit_report(ExperimentReport("empty", None, 4), tmp_path)
        lines = (tmp_path / "results.csv").read_text().strip().splitlines()

        assert lines == [",".join(CSV_COLUMNS)]
        assert json.loads((tmp_path / "results.json").read_text())["cells"] == []

    def test_annotations_only_above_threshold(self, report, tmp_path):
        """Test drop rates above one percent are annotated and others are not"""
        emit_report(report, tmp_path)
        svg = (tmp_path / "figure_label.svg").read_text()

        assert "drop 22.5%" in svg
        assert "drop 0.5%" not in svg
        assert "drop 0.0%" not in svg

    def test_rendering_is_pure(self, report, tmp_path):
        """Test re-rendering from results.json reproduces every file byte for byte"""
        first = {p.name: p.read_bytes() for p in emit_report(report, tmp_path / "a")}
        rendered = render_report(load_results(tmp_path / "a"), tmp_path / "b")
        second = {p.name: p.read_bytes() for p in rendered}

        for name, content in second.items():
            assert first[name] == content

    def test_cross_matrix_outputs(self, tmp_path):
        """Test collected matrices produce cross_matrix.csv and a heatmap"""
        report = ExperimentReport(
            "matrix", None, 2,
            partitions=(PartitionSummary("q", "quantity"),),
            cells=(make_cell("q", "fedavg", [0.7, 0.9], matrix=True),),
        )
        names = {p.name for p in emit_report(report, tmp_path)}
        matrix = pd.read_csv(tmp_path / "cross_matrix.csv")

        assert "cross_matrix.csv" in names
        assert "cross_matrix_q_fedavg.svg" in names
        assert len(matrix) == 2 * 4

    def test_unwritable_directory(self, report, tmp_path):
        """Test writing under a regular file is rejected"""
        blocker = tmp_path / "file"
        blocker.write_text("x")

        with pytest.raises(ValueError, match="Cannot write report"):
            emit_report(report, blocker / "out")

    def test_unwritable_rendered_file(self, report, tmp_path):
        """Test a failed CSV write after results.json is reported as a ValueError"""
        (tmp_path / "results.csv").mkdir()

        with pytest.raises(ValueError, match="Cannot write report"):
            emit_report(report, tmp_path)
        assert (tmp_path / "results.json").is_file()
        with pytest.raises(ValueError, match="Cannot write report"):
            render_report(load_results(tmp_path), tmp_path)

    def test_load_results_missing(self, tmp_path):
        """Test a directory without results.json is rejected"""
        with pytest.raises(FileNotFoundError):
            load_results(tmp_path)

    def test_load_results_syntax_error(self, tmp_path):
        """Test a corrupt results.json names the position"""
        (tmp_path / "results.json").write_text("{\"schema\": ")

        with pytest.raises(ValueError, match="syntax error at line 1"):
            load_results(tmp_path)

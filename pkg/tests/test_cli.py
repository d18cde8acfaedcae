import csv
import json
import os

import numpy as np
import pytest

from hegcn.adjacency import AdjacencySet
from hegcn.cli import EXIT_CONFIG, EXIT_DEPTH, EXIT_OK, EXIT_PARAMS, main
from hegcn.model import random_stgcn
from hegcn.packing import GraphTensor


@pytest.fixture()
def model_path(tmp_path):
    adj = AdjacencySet.from_edges(4, [[(0, 1), (1, 2), (2, 3)]])
    spec = random_stgcn(
        (1, 2, 8, 4), widths=[2, 4], adjacency=adj, classes=3, kernel=3, stride2_at=1, seed=23
    )
    path = tmp_path / "model.json"
    spec.to_json_file(path)
    return str(path)


class TestInfer:
    def test_seeded_run_is_deterministic(self, model_path, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        for out in (out1, out2):
            rc = main(["infer", "--model", model_path, "--seed", "5", "--format", "ama",
                       "--out", str(out)])
            assert rc == EXIT_OK
        s1 = (out1 / "scores.json").read_text()
        s2 = (out2 / "scores.json").read_text()
        assert s1 == s2
        assert (out1 / "hoc.csv").read_text() == (out2 / "hoc.csv").read_text()

    def test_both_formats_emit_equivalence_report(self, model_path, tmp_path):
        out = tmp_path / "both"
        rc = main(["infer", "--model", model_path, "--seed", "1", "--format", "both",
                   "--out", str(out)])
        assert rc == EXIT_OK
        eq = json.loads((out / "equivalence.json").read_text())
        assert eq["max_abs_score_diff"] <= 1e-9
        levels = json.loads((out / "levels.json").read_text())
        assert set(levels) == {"ama", "rowmajor"}

    def test_hoc_csv_schema(self, model_path, tmp_path):
        out = tmp_path / "csv"
        main(["infer", "--model", model_path, "--seed", "2", "--format", "ama", "--out", str(out)])
        with open(out / "hoc.csv") as fp:
            rows = list(csv.DictReader(fp))
        assert set(rows[0]) == {"layer", "op", "format", "count"}
        assert any(int(r["count"]) > 0 for r in rows)

    def test_input_file(self, model_path, tmp_path):
        x = GraphTensor.random((1, 2, 8, 4), seed=3)
        tensor = tmp_path / "x.tensor"
        x.save(tensor)
        rc = main(["infer", "--model", model_path, "--input", str(tensor), "--format", "ama",
                   "--out", str(tmp_path / "run")])
        assert rc == EXIT_OK

    def test_missing_model_exits_2(self, tmp_path):
        rc = main(["infer", "--model", str(tmp_path / "nope.json"), "--seed", "1",
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_input_and_seed_conflict_exits_2(self, model_path, tmp_path):
        rc = main(["infer", "--model", model_path, "--seed", "1", "--input", "x",
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_CONFIG

    def test_depth_budget_violation_exits_3(self, model_path, tmp_path, monkeypatch):
        import hegcn.cli as cli
        import hegcn.engine as eng

        real_run = eng.run_model

        def tight_ctx_run(spec, x, fmt, **kw):
            from hegcn.hesim import SimContext

            ctx = SimContext(64, max_level=2)
            return real_run(spec, x, fmt, ctx=ctx)

        monkeypatch.setattr(cli.engine, "run_model", tight_ctx_run)
        rc = main(["infer", "--model", model_path, "--seed", "1", "--out", str(tmp_path / "o")])
        assert rc == EXIT_DEPTH


class TestParams:
    def test_reference_levels(self, capsys):
        assert main(["params", "--levels", "21"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert (doc["poly_degree"], doc["modulus_bits"]) == (2**15, 740)
        assert main(["params", "--levels", "19"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert (doc["poly_degree"], doc["modulus_bits"]) == (2**14, 680)

    def test_impossible_exits_4(self):
        assert main(["params", "--levels", "1000"]) == EXIT_PARAMS


class TestPrune:
    def stub(self, tmp_path):
        table = {
            "drop_one": {str(i): 0.70 + 0.01 * i for i in range(4)},
            "pruned_sets": {"": 0.7425, "3": 0.7312, "2,3": 0.7021},
        }
        path = tmp_path / "stub.json"
        path.write_text(json.dumps(table))
        return str(path)

    def test_search_runs_and_reports(self, model_path, tmp_path, capsys):
        rc = main(["prune", "--model", model_path, "--stub", self.stub(tmp_path),
                   "--max-prune", "2", "--out", str(tmp_path / "p")])
        assert rc == EXIT_OK
        doc = json.loads((tmp_path / "p" / "prune.json").read_text())
        assert len(doc["results"]) == 3
        assert doc["results"][0]["levels"] - doc["results"][1]["levels"] == 2

    def test_baseline_only(self, model_path, tmp_path):
        rc = main(["prune", "--model", model_path, "--stub", self.stub(tmp_path),
                   "--max-prune", "0"])
        assert rc == EXIT_OK

    def test_bad_stub_exits_2(self, model_path, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["prune", "--model", model_path, "--stub", str(bad)]) == EXIT_CONFIG

    def test_missing_variant_exits_2(self, model_path, tmp_path):
        path = tmp_path / "sparse.json"
        path.write_text(json.dumps({"drop_one": {"0": 0.7}, "pruned_sets": {}}))
        rc = main(["prune", "--model", model_path, "--stub", str(path), "--max-prune", "1"])
        assert rc == EXIT_CONFIG


class TestCompareAndHoc:
    def test_compare_emits_reductions_and_sweep(self, model_path, tmp_path):
        out = tmp_path / "cmp"
        rc = main(["compare", "--model", model_path, "--batch", "1,2,4", "--out", str(out)])
        assert rc == EXIT_OK
        doc = json.loads((out / "compare.json").read_text())
        # toy dims do not favor AMA; only the table structure is checked here
        assert set(doc["total_hoc"]) == {"ama", "rowmajor", "chet_analytic", "fast_hear_analytic"}
        assert "vs_chet" in doc["reduction_pct"]
        sweep = doc["amortized_per_sample"]["rowmajor"]
        totals = [row["total"] for row in sweep]
        assert max(totals) == min(totals)
        with open(out / "amortized.csv") as fp:
            rows = list(csv.DictReader(fp))
        assert {r["format"] for r in rows} == {"ama", "rowmajor"}

    def test_identical_formats_reduce_zero_percent(self, model_path, tmp_path):
        out = tmp_path / "same"
        main(["compare", "--model", model_path, "--out", str(out)])
        doc = json.loads((out / "compare.json").read_text())
        ama = doc["total_hoc"]["ama"]
        assert 100.0 * (1 - ama / ama) == 0.0

    def test_hoc_csv(self, model_path, tmp_path, capsys):
        rc = main(["hoc", "--model", model_path, "--format", "both"])
        assert rc == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "layer,op,format,count"
        assert len(lines) > 10

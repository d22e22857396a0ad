import json

import numpy as np
import pytest

from stratpart.cli import PUBLISHED, compare_published, main
from stratpart.domain import load_dataset


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--preset", "paper2019", "--seed", "1", "--out", str(out)]) == 0
    return out


class TestSimulate:
    def test_outputs_validate(self, simulated):
        ds = load_dataset(simulated / "dataset.csv", signals=simulated / "signals.csv")
        assert ds.n == 1510
        truth = json.loads((simulated / "truth.json").read_text())
        assert truth["truth"]["beta"] == -3.3062


class TestEstimate:
    def test_results_contents_and_recovery(self, simulated, tmp_path):
        rc = main(["estimate", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path),
                   "--estimators", "cf_joint_mle", "--bootstrap-reps", "20"])
        assert rc == 0
        res = json.loads((tmp_path / "results.json").read_text())
        p = res["participation"]["cf_joint_mle"]
        assert set(p["coefficients"]["delta_b"]) == {"standard", "cluster-bootstrap"}
        assert "rho" in p and "overall" in p["margins"] and "overall" in p["ape"]
        assert "cf_joint_mle" in res["recovery"]
        assert (tmp_path / "margins.csv").read_text().startswith("estimator,delta_b")

    def test_every_number_has_method_label(self, simulated, tmp_path):
        main(["estimate", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path),
              "--estimators", "probit", "--bootstrap-reps", "0"])
        res = json.loads((tmp_path / "results.json").read_text())

        def walk(node):
            if isinstance(node, dict):
                if "se" in node:
                    assert node.get("se_method"), node
                for v in node.values():
                    walk(v)

        walk(res)

    def test_byte_identical(self, simulated, tmp_path):
        args = ["estimate", "--input", str(simulated / "dataset.csv"), "--estimators", "cf_twostep",
                "--bootstrap-reps", "5", "--seed", "3"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
        assert (tmp_path / "a" / "metadata.json").exists()

    def test_unknown_estimator(self, simulated, tmp_path, capsys):
        rc = main(["estimate", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path),
                   "--estimators", "lasso"])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "usage"


class TestOtherCommands:
    def test_test_battery(self, simulated, tmp_path):
        assert main(["test", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "tests.json").read_text())
        assert {"assignment_binomial", "exogeneity", "late_validity_below", "prior_beta_fit"} <= set(res)

    def test_reproduce_without_input(self, tmp_path, capsys):
        rc = main(["reproduce", "--out", str(tmp_path)])
        assert rc != 0
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "usage"

    def test_reproduce_tolerance_override(self, simulated, tmp_path):
        rc = main(["reproduce", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path),
                   "--bootstrap-reps", "0", "--tolerance", "beta_hat=100", "--tolerance", "ape_overall=100",
                   "--tolerance", "ate_below=1", "--tolerance", "ate_above=1", "--tolerance", "margin_overall=1",
                   "--tolerance", "exogeneity_chi2=1000"])
        assert rc == 0
        rep = json.loads((tmp_path / "reproduction.json").read_text())
        assert set(rep) == set(PUBLISHED)

    def test_bad_tolerance_key(self, simulated, tmp_path):
        rc = main(["reproduce", "--input", str(simulated / "dataset.csv"), "--out", str(tmp_path),
                   "--tolerance", "gamma=1"])
        assert rc == 2

    def test_sweep(self, tmp_path):
        assert main(["sweep", "--seeds", "3", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "sweep.json").read_text())
        assert res["seeds"] == 3 and "cf_joint_mle" in res["estimators"]

    def test_validation_error_exit(self, tmp_path):
        (tmp_path / "d.csv").write_text("subject_id,location\n1,A\n")
        (tmp_path / "s.csv").write_text("location,s\nA,0.3\n")
        rc = main(["estimate", "--input", str(tmp_path / "d.csv"), "--signals", str(tmp_path / "s.csv"),
                   "--out", str(tmp_path)])
        assert rc == 1
        assert "problems" in json.loads((tmp_path / "error.json").read_text())


def test_compare_published_flags_mismatch():
    results = {
        "participation": {"cf_joint_mle": {
            "coefficients": {"delta_b": {"standard": {"estimate": -3.3062}}},
            "ape": {"overall": {"delta": {"estimate": -0.70}}},
            "margins": {"overall": {"delta": {"estimate": 0.1099}}},
            "exogeneity_test": {"statistic": 11.62},
        }},
        "belief": {"ols": {"ate": {"below": {"estimate": 0.0425}, "above": {"estimate": -0.0554}}}},
    }
    rows = compare_published(results, {k: v[1] for k, v in PUBLISHED.items()})
    assert rows["beta_hat"]["match"] and not rows["ape_overall"]["match"]

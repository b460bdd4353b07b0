import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from mirtlink.calibration import CalibrationSpec
from mirtlink.evaluation import (armsd, armsd_table, parameter_views, population_recovery, report_tables, rmsd,
                                 summarize_constants, write_tables)
from mirtlink.linking import LinkOptions
from mirtlink.model import DichotomousItem, Family, Format, PolytomousItem
from mirtlink.simulation import ReplicationRecord, StudyConfig, StudyReport, item_to_dict, run_study


def brute_rmsd(e, r):
    acc = 0.0
    for i in range(len(e)):
        acc = acc + (e[i] - r[i]) * (e[i] - r[i])
    return math.sqrt(acc / len(e))


def brute_armsd(pairs):
    return math.fsum(brute_rmsd(e, r) for e, r in pairs) / len(pairs)


class TestKernels:
    def test_examples(self):
        assert rmsd([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmsd([0.1, 0.3], [0.0, 0.0]) == pytest.approx(0.22361, abs=1e-5)
        assert rmsd([-0.2], [0.0]) == pytest.approx(0.2, abs=1e-15)
        assert armsd([([0.1], [0.0]), ([0.3], [0.0])]) == pytest.approx(0.2, abs=1e-15)
        assert armsd([([1.0, 2.0], [1.0, 2.0])] * 3) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            rmsd([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            rmsd([], [])
        with pytest.raises(ValueError):
            armsd([])

    def test_brute_force_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            e, r = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
            assert rmsd(e, r) == brute_rmsd(e, r)
            pairs = [(rng.normal(size=n).tolist(), rng.normal(size=n).tolist()) for _ in range(int(rng.integers(1, 6)))]
            assert armsd(pairs) == brute_armsd(pairs)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            e, r = rng.normal(size=7), rng.normal(size=7)
            k = rng.choice([-3.0, -0.5, 0.25, 2.0, 4.0])
            assert rmsd(list(k * e), list(k * r)) == pytest.approx(abs(k) * rmsd(list(e), list(r)), rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        pairs = [(rng.normal(size=5).tolist(), rng.normal(size=5).tolist()) for _ in range(9)]
        ref = armsd(pairs)
        for _ in range(20):
            perm = rng.permutation(9)
            assert armsd([pairs[i] for i in perm]) == ref


class TestViews:
    def test_uirt(self):
        mc = DichotomousItem.from_abc("m", 1.25, 0.4, 0.2)
        v = parameter_views(mc, Family.UIRT)
        assert v["MC-a"] == [1.25] and v["MC-b"][0] == pytest.approx(0.4) and v["MC-c"] == [0.2]
        cr = PolytomousItem("c", (2.0,), (1.0, -0.2, 0.6))
        v = parameter_views(cr, Family.UIRT)
        assert v["CR-step"] == pytest.approx([0.5, -0.1, 0.3])
        assert v["CR-b"] == pytest.approx([1.4 / 6])

    def test_mirt(self):
        mc = DichotomousItem("m", (1.1, 0.0), 0.3, 0.2, Format.MC, Family.SIMPLE)
        assert parameter_views(mc, Family.SIMPLE) == {"MC-a": [1.1], "MC-d": [0.3], "MC-c": [0.2]}
        cr = PolytomousItem("c", (0.9, 0.0, 0.4), (0.1, 0.2), Format.CR, Family.BIFACTOR)
        v = parameter_views(cr, Family.BIFACTOR)
        assert v["CR-a1"] == [0.9] and v["CR-a2"] == [0.4] and v["CR-t"] == [0.1, 0.2] and v["CR-t2"] == [0.2]


def fake_record(model, rho, scenario, rep, A, B, base, linked, pop_mean=(0.0, 0.0)):
    D = len(B)
    return ReplicationRecord(model, rho, scenario, rep, np.atleast_2d(A).tolist(), list(B), 0.0, 10, True, False,
                             [item_to_dict(i) for i in base], [item_to_dict(i) for i in linked],
                             [item_to_dict(i) for i in base], list(pop_mean[:D]), np.eye(D).tolist(), {})


class TestAggregation:
    def report(self):
        mc = DichotomousItem.from_abc("m", 1.0, 0.0, 0.2)
        cr = PolytomousItem("c", (1.0,), (0.0, 0.5))
        recs = []
        for rep, off in enumerate((0.1, 0.3)):
            lm = DichotomousItem("m", (1.0 + off,), 0.0, 0.2)
            lc = PolytomousItem("c", (1.0,), (0.0, 0.5))
            recs.append(fake_record("UIRT", 0.5, "MCCR", rep, [[1.0 + off]], [off], [mc, cr], [lm, lc]))
            recs.append(fake_record("UIRT", 0.5, "MCOnly", rep, [[1.0]], [0.0], [mc], [mc]))
        return StudyReport({}, recs)

    def test_armsd_table(self):
        t = armsd_table(self.report())
        assert t.get("MC-a", 0.5, "MCCR", "UIRT") == pytest.approx(0.2)
        assert t.get("CR-a", 0.5, "MCCR", "UIRT") == 0.0
        assert ("CR-a", 0.5, "MCOnly", "UIRT") not in t.cells
        assert t.get("MC-a", 0.5, "MCOnly", "UIRT") == 0.0

    def test_constants(self):
        s = summarize_constants(self.report())
        e = s.entries("UIRT", 0.5, "MCCR")
        assert e == {"A": pytest.approx(1.2), "B": pytest.approx(0.2)}

    def test_single_replication_summary(self):
        rep = self.report()
        rep = StudyReport({}, [r for r in rep.records if r.replication == 1])
        assert summarize_constants(rep).entries("UIRT", 0.5, "MCCR") == {"A": 1.3, "B": 0.3}

    def test_mixed_dimensions(self):
        rep = self.report()
        rep.records[0] = replace(rep.records[0], A=np.eye(2).tolist(), B=[0.0, 0.0])
        with pytest.raises(ValueError):
            summarize_constants(rep)

    def test_population_recovery_needs_simple_structure(self):
        with pytest.raises(ValueError):
            population_recovery(self.report())
        with pytest.raises(ValueError):
            population_recovery(self.report(), "UIRT")

    def test_tables_are_pure_functions_of_report(self, tmp_path):
        rep = self.report()
        again = StudyReport.from_json(rep.to_json())
        assert report_tables(again, raw=True) == report_tables(rep, raw=True)
        paths = write_tables(rep, tmp_path)
        assert (tmp_path / "table2.csv").exists() and (tmp_path / "table3_raw.csv").exists()
        rows = list(csv.reader(io.StringIO((tmp_path / "table2.csv").read_text())))
        assert rows[0] == ["rho", "scenario", "A", "B"] and rows[1] == ["0.5", "MCOnly", "1.00", "0.00"]
        assert len(paths) == 6


@pytest.fixture(scope="module")
def oracle_report():
    cfg = StudyConfig(analysis_models=("UIRT", "SimpleStructure"), n_replications=1, rho_levels=(0.5, 1.0),
                      calibration=CalibrationSpec(mode="OracleNoise"), link=LinkOptions(max_restarts=2))
    return run_study(cfg)


class TestOraclePipeline:
    def test_all_metrics_small(self, oracle_report):
        report = oracle_report
        for table in (armsd_table(report), armsd_table(report, "truth")):
            assert max(table.cells.values()) < 1e-2
        pop = population_recovery(report)
        for (rho, _), (mu, cov) in pop.cells.items():
            np.testing.assert_allclose(mu, 0, atol=1e-2)
            np.testing.assert_allclose(cov, [[1, rho], [rho, 1]], atol=1e-2)
            assert cov[0][1] == cov[1][0]

    def test_table_layouts(self, oracle_report):
        tables = report_tables(oracle_report)
        assert set(tables) == {"table2", "table3", "table4b", "table5b", "table6", "armsd_truth_referenced"}
        header = tables["table4b"].splitlines()[0].split(",")
        assert header == ["scenario", "rho", "a11", "a12", "a21", "a22", "b1", "b2"]
        t3 = list(csv.reader(io.StringIO(tables["table3"])))
        assert t3[0] == ["parameter", "scenario", "rho=0.5", "rho=1.0"]
        assert not any(r[0].startswith("CR") and r[1] == "MCOnly" for r in t3[1:])

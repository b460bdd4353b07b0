"""Accuracy metrics and table emission for a finished study.

ARMSD = mean over replications of the per-replication RMSD over anchor
items, where the estimates are the transformed new-form anchor parameters
and the references are the base-form calibration values of the same items.
A truth-referenced variant compares against the generating parameters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Family, loading_mask
from .simulation import StudyReport, item_from_dict


def rmsd(estimates: Sequence[float], references: Sequence[float]) -> float:
    if len(estimates) != len(references):
        raise ValueError("estimates and references differ in length")
    if len(estimates) == 0:
        raise ValueError("rmsd of an empty list")
    total = 0.0
    for e, r in zip(estimates, references):
        diff = e - r
        total += diff * diff
    return math.sqrt(total / len(estimates))


def armsd(per_replication_pairs: Iterable[tuple]) -> float:
    """Mean of per-replication RMSDs; each element is (estimates, references)."""
    values = [rmsd(e, r) for e, r in per_replication_pairs]
    if not values:
        raise ValueError("armsd needs at least one replication")
    return math.fsum(values) / len(values)


def parameter_views(item, family: Family) -> dict:
    """Reported parameter classes for one item, keyed like the result tables.

    UIRT: MC a, b, c and CR a, b (mean threshold location) and step (every
    delta_v / a, pooled). MIRT: slopes on the item's loading pattern (a, or
    a1/a2 when the pattern has two dimensions), d and c for MC, pooled
    thresholds t plus t1..tK-1 for CR.
    """
    family = Family(family)
    fmt = item.format.value
    out: dict = {}
    if family is Family.UIRT:
        a = item.a[0]
        out[f"{fmt}-a"] = [a]
        if fmt == "MC":
            out["MC-b"] = [-item.d / a]
            out["MC-c"] = [item.c]
        else:
            out["CR-b"] = [float(np.mean(item.deltas)) / a]
            out["CR-step"] = [x / a for x in item.deltas]
        return out
    mask = loading_mask(family, item.format)
    dims = [k for k, m in enumerate(mask) if m]
    if len(dims) == 1:
        out[f"{fmt}-a"] = [item.a[dims[0]]]
    else:
        for n, k in enumerate(dims, start=1):
            out[f"{fmt}-a{n}"] = [item.a[k]]
    if fmt == "MC":
        out["MC-d"] = [item.d]
        out["MC-c"] = [item.c]
    else:
        out["CR-t"] = list(item.deltas)
        for v, x in enumerate(item.deltas, start=1):
            out[f"CR-t{v}"] = [x]
    return out


def _pooled(items: list, family: Family) -> dict:
    pooled: dict = {}
    for it in items:
        for k, vals in parameter_views(it, family).items():
            pooled.setdefault(k, []).extend(vals)
    return pooled


@dataclass
class ArmsdTable:
    """cells[(param_class, rho, scenario, model)] -> ARMSD."""

    cells: dict
    reference: str = "base"

    def get(self, param: str, rho: float, scenario: str, model: str) -> float:
        return self.cells[(param, rho, scenario, model)]


def armsd_table(report: StudyReport, reference: str = "base") -> ArmsdTable:
    """ARMSD per parameter class and condition.

    ``reference="base"`` compares with the base-form calibration,
    ``reference="truth"`` with the generating parameters.
    """
    key = {"base": "base_anchors", "truth": "true_anchors"}[reference]
    pairs: dict = {}
    for (model, rho, scenario), recs in report.cells().items():
        family = Family(model)
        for rec in recs:
            est = _pooled([item_from_dict(d) for d in rec.linked_anchors], family)
            ref = _pooled([item_from_dict(d) for d in getattr(rec, key)], family)
            for param in est:
                pairs.setdefault((param, rho, scenario, model), []).append((est[param], ref[param]))
    return ArmsdTable({k: armsd(v) for k, v in sorted(pairs.items())}, reference)


@dataclass
class ConstantsSummary:
    """cells[(model, rho, scenario)] -> (mean A, mean B) over replications."""

    cells: dict

    def entries(self, model: str, rho: float, scenario: str) -> dict:
        A, B = self.cells[(model, rho, scenario)]
        D = len(B)
        out = {f"a{i + 1}{j + 1}": A[i][j] for i in range(D) for j in range(D)}
        out.update({f"b{i + 1}": B[i] for i in range(D)})
        if D == 1:
            return {"A": out["a11"], "B": out["b1"]}
        return out


def summarize_constants(report: StudyReport) -> ConstantsSummary:
    cells = {}
    for key, recs in report.cells().items():
        dims = {len(r.B) for r in recs}
        if len(dims) != 1:
            raise ValueError(f"mixed dimensionality within condition {key}")
        A = np.mean([r.A for r in recs], axis=0)
        B = np.mean([r.B for r in recs], axis=0)
        cells[key] = (A.tolist(), B.tolist())
    return ConstantsSummary(cells)


@dataclass
class PopulationRecovery:
    """cells[(rho, scenario)] -> (mean mu*, mean Sigma*) for the simple-structure model."""

    cells: dict


def population_recovery(report: StudyReport, model: str = Family.SIMPLE.value) -> PopulationRecovery:
    if Family(model) is not Family.SIMPLE:
        raise ValueError("population recovery is reported for the simple-structure model only")
    cells = {}
    for (m, rho, scenario), recs in report.cells().items():
        if m != Family.SIMPLE.value:
            continue
        mu = np.mean([r.pop_mean for r in recs], axis=0)
        cov = np.mean([r.pop_cov for r in recs], axis=0)
        cells[(rho, scenario)] = (mu.tolist(), ((cov + cov.T) / 2).tolist())
    if not cells:
        raise ValueError("report has no simple-structure results")
    return PopulationRecovery(cells)


# table emission ------------------------------------------------------------

def _csv(rows: list) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _cellfmt(x, raw: bool) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if raw else f"{x:.2f}"


def _ordered(values, preferred) -> list:
    return [v for v in preferred if v in values] + sorted(v for v in values if v not in preferred)


def report_tables(report: StudyReport, raw: bool = False) -> dict:
    """CSV text for each table, keyed by file stem (table2 ... table6)."""
    consts = summarize_constants(report)
    armsd_base = armsd_table(report, "base")
    cells = report.cells()
    models = {m for m, _, _ in cells}
    rhos = sorted({r for _, r, _ in cells})
    scenarios = _ordered({s for _, _, s in cells}, ["MCOnly", "MCCR"])
    f = lambda x: _cellfmt(x, raw)
    tables = {}

    if "UIRT" in models:
        rows = [["rho", "scenario", "A", "B"]]
        for rho in sorted(rhos, reverse=True):
            for s in scenarios:
                if ("UIRT", rho, s) in consts.cells:
                    e = consts.entries("UIRT", rho, s)
                    rows.append([rho, s, f(e["A"]), f(e["B"])])
        tables["table2"] = _csv(rows)
        params = _ordered({p for p, _, _, m in armsd_base.cells if m == "UIRT"},
                          ["MC-a", "MC-b", "MC-c", "CR-a", "CR-b", "CR-step"])
        rows = [["parameter", "scenario"] + [f"rho={r}" for r in rhos]]
        for p in params:
            for s in _ordered(set(scenarios), ["MCCR", "MCOnly"]):
                vals = [armsd_base.cells.get((p, r, s, "UIRT")) for r in rhos]
                if any(v is not None for v in vals):
                    rows.append([p, s] + [f(v) for v in vals])
        tables["table3"] = _csv(rows)

    for model, stem4, stem5 in (("Bifactor", "table4a", "table5a"), ("SimpleStructure", "table4b", "table5b")):
        if model not in models:
            continue
        D = Family(model).dim
        names = [f"a{i + 1}{j + 1}" for i in range(D) for j in range(D)] + [f"b{i + 1}" for i in range(D)]
        rows = [["scenario", "rho"] + names]
        for s in _ordered(set(scenarios), ["MCCR", "MCOnly"]):
            for rho in rhos:
                if (model, rho, s) in consts.cells:
                    e = consts.entries(model, rho, s)
                    rows.append([s, rho] + [f(e[n]) for n in names])
        tables[stem4] = _csv(rows)
        params = _ordered({p for p, _, _, m in armsd_base.cells if m == model},
                          ["MC-a", "MC-a1", "MC-a2", "MC-d", "MC-c", "CR-a", "CR-a1", "CR-a2", "CR-t"])
        cols = [(p, s) for p in params for s in _ordered(set(scenarios), ["MCCR", "MCOnly"])
                if any((p, r, s, model) in armsd_base.cells for r in rhos)]
        rows = [["rho"] + [f"{p}|{s}" for p, s in cols]]
        for rho in rhos:
            rows.append([rho] + [f(armsd_base.cells.get((p, rho, s, model))) for p, s in cols])
        tables[stem5] = _csv(rows)

    if "SimpleStructure" in models:
        pop = population_recovery(report)
        rows = [["scenario", "rho", "mean1", "mean2", "cov11", "cov12", "cov21", "cov22"]]
        for s in _ordered(set(scenarios), ["MCCR", "MCOnly"]):
            for rho in rhos:
                if (rho, s) in pop.cells:
                    mu, cov = pop.cells[(rho, s)]
                    rows.append([s, rho, f(mu[0]), f(mu[1]), f(cov[0][0]), f(cov[0][1]), f(cov[1][0]), f(cov[1][1])])
        tables["table6"] = _csv(rows)

    truth = armsd_table(report, "truth")
    rows = [["parameter", "rho", "scenario", "model", "armsd_vs_truth"]]
    for (p, rho, s, m), v in truth.cells.items():
        rows.append([p, rho, s, m, f(v)])
    tables["armsd_truth_referenced"] = _csv(rows)
    return tables


def write_tables(report: StudyReport, out_dir) -> list:
    """Write display (2-decimal) and raw (full precision) CSVs; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for raw, suffix in ((False, ""), (True, "_raw")):
        for stem, text in report_tables(report, raw=raw).items():
            p = out_dir / f"{stem}{suffix}.csv"
            p.write_text(text)
            paths.append(p)
    return paths

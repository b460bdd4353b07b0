"""Data generation and the replicated linking study.

Responses are always generated from the simple-structure model, whatever
model is used for analysis. Every random stream is seeded from the study's
base seed and a label naming its role, so any subset of conditions can be
re-run in isolation and reproduces the values of a full run.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .calibration import CalibrationResult, CalibrationSpec, calibrate_mcmc, calibrate_oracle
from .linking import LinkOptions, default_grid, estimate_transform, transform_item, transform_population
from .model import DichotomousItem, Family, Format, Item, PolytomousItem, TestForm, item_probabilities

log = logging.getLogger(__name__)

SCENARIOS = ("MCOnly", "MCCR")
RHO_LEVELS = (0.5, 0.8, 1.0)
REPORT_VERSION = 1
TRACE_POINTS = 48


class StudyError(RuntimeError):
    pass


def derive_seed(base_seed: int, *labels) -> int:
    """64-bit seed: ``base_seed`` XOR a hash of the labels."""
    labels = tuple(x.item() if isinstance(x, np.generic) else x for x in labels)
    digest = hashlib.blake2b(repr(labels).encode(), digest_size=8).digest()
    return (int(base_seed) ^ int.from_bytes(digest, "little")) & 0xFFFFFFFFFFFFFFFF


# generation ----------------------------------------------------------------

def sample_thetas(n: int, rho: float, seed: int) -> np.ndarray:
    """Draw ``n`` rows from a bivariate standard normal with correlation ``rho``."""
    if n < 1:
        raise ValueError("n must be positive")
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"correlation must lie in [-1, 1], got {rho}")
    z = np.random.default_rng(seed).standard_normal((n, 2))
    second = z[:, 0] if rho == 1.0 else rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1]
    return np.column_stack([z[:, 0], second])


def generate_responses(form: TestForm, thetas: np.ndarray, seed: int) -> np.ndarray:
    """Simulate an examinee-by-item score matrix from simple-structure items."""
    thetas = np.asarray(thetas, dtype=float)
    bad = [it.id for it in form.items if it.model_family is not Family.SIMPLE]
    if bad:
        raise ValueError(f"responses are generated from simple-structure items only; got {bad[:3]}")
    rng = np.random.default_rng(seed)
    u = rng.random((thetas.shape[0], len(form.items)))
    out = np.empty(u.shape, dtype=np.int64)
    for j, it in enumerate(form.items):
        cdf = np.cumsum(item_probabilities(it, thetas), axis=1)
        out[:, j] = (u[:, j, None] > cdf[:, :-1]).sum(axis=1)
    return out


@dataclass
class GeneratedDataset:
    thetas: np.ndarray
    responses: np.ndarray
    rho_used: float
    seed_used: int


def build_anchor_set(form: TestForm, scenario: str) -> list:
    """Anchor ids used under ``scenario`` ("MCOnly" or "MCCR"), in form order."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown anchor scenario {scenario!r}")
    anchors = [it for it in form.items if it.anchor]
    if scenario == "MCOnly":
        anchors = [it for it in anchors if it.format is Format.MC]
    if not anchors:
        raise ValueError("MC-only scenario requires MC anchor items" if scenario == "MCOnly"
                         else f"form {form.name!r} has no anchor items")
    return [it.id for it in anchors]


def default_item_bank(seed: int = 2018, n_mc: int = 40, n_cr: int = 8, n_mc_anchor: int = 12,
                      n_cr_anchor: int = 4, n_categories: int = 5) -> tuple[TestForm, TestForm]:
    """Synthetic base/new form pair sharing a block of common items.

    MC items: ln a ~ N(0, 0.3^2), b ~ N(0, 1), c ~ Beta(5, 17).
    CR items: ln a ~ N(0, 0.3^2); thresholds on the theta metric are sorted
    N(0, 1) draws centred on their own mean.
    """
    rng = np.random.default_rng(seed)

    def mc(id_, anchor):
        a = float(np.exp(rng.normal(0.0, 0.3)))
        b = float(rng.normal())
        c = float(rng.beta(5, 17))
        return DichotomousItem(id_, (a, 0.0), -a * b, c, Format.MC, Family.SIMPLE, anchor)

    def cr(id_, anchor):
        a = float(np.exp(rng.normal(0.0, 0.3)))
        tau = np.sort(rng.normal(size=n_categories - 1))
        tau -= tau.mean()
        return PolytomousItem(id_, (0.0, a), tuple(a * tau), Format.CR, Family.SIMPLE, anchor)

    common_mc = [mc(f"cmc{j + 1:02d}", True) for j in range(n_mc_anchor)]
    common_cr = [cr(f"ccr{j + 1:02d}", True) for j in range(n_cr_anchor)]
    forms = []
    for tag in ("base", "new"):
        own_mc = [mc(f"{tag}_mc{j + 1:02d}", False) for j in range(n_mc - n_mc_anchor)]
        own_cr = [cr(f"{tag}_cr{j + 1:02d}", False) for j in range(n_cr - n_cr_anchor)]
        forms.append(TestForm(tag, common_mc + own_mc + common_cr + own_cr))
    return forms[0], forms[1]


# family projection (oracle truth) ---------------------------------------------

def project_item(item: Item, family: Family, rho: float) -> Item:
    """Express a simple-structure item in ``family``.

    Bifactor: theta_MC = sqrt(rho) g + sqrt(1 - rho) s_MC (same for CR), which
    reproduces the correlated two-factor model exactly with orthogonal
    factors. UIRT keeps the single slope, exact only when rho = 1.
    """
    family = Family(family)
    slope = next(x for x in item.a if x != 0.0)
    if family is Family.SIMPLE:
        return item
    if family is Family.UIRT:
        a = (slope,)
    else:
        g, s = slope * np.sqrt(rho), slope * np.sqrt(1.0 - rho)
        a = (g, s, 0.0) if item.format is Format.MC else (g, 0.0, s)
    return replace(item, a=a, model_family=family)


def restandardize(item: Item, mean: np.ndarray, sd: np.ndarray) -> Item:
    """Re-express a simple-structure item on a group's own standardized metric."""
    a = np.asarray(item.a)
    shift = float(a @ mean)
    a_new = tuple(a * sd)
    if isinstance(item, DichotomousItem):
        return replace(item, a=a_new, d=item.d + shift)
    return replace(item, a=a_new, deltas=tuple(x - shift for x in item.deltas))


def family_population(family: Family, rho: float) -> tuple[np.ndarray, np.ndarray]:
    family = Family(family)
    if family is Family.SIMPLE:
        return np.zeros(2), np.array([[1.0, rho], [rho, 1.0]])
    return np.zeros(family.dim), np.eye(family.dim)


# study ---------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    rho_levels: tuple = RHO_LEVELS
    anchor_scenarios: tuple = SCENARIOS
    analysis_models: tuple = (Family.UIRT, Family.SIMPLE, Family.BIFACTOR)
    n_examinees: int = 3000
    n_replications: int = 20
    base_seed: int = 20180413
    bank_seed: int = 2018
    item_bank: tuple | None = None
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    link: LinkOptions = field(default_factory=LinkOptions)
    new_group_mean: tuple | None = None
    new_group_cov: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "rho_levels", tuple(float(r) for r in self.rho_levels))
        object.__setattr__(self, "anchor_scenarios", tuple(self.anchor_scenarios))
        object.__setattr__(self, "analysis_models", tuple(Family(m) for m in self.analysis_models))
        if self.n_examinees < 1 or self.n_replications < 1:
            raise ValueError("n_examinees and n_replications must be positive")
        for r in self.rho_levels:
            if not -1.0 <= r <= 1.0:
                raise ValueError(f"correlation level {r} outside [-1, 1]")
        for s in self.anchor_scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown anchor scenario {s!r}")
        base, new = self.forms()
        for form in (base, new):
            if not form.anchors:
                raise ValueError(f"form {form.name!r} has no anchor items")
            for s in self.anchor_scenarios:
                build_anchor_set(form, s)
        if {i.id for i in base.anchors} != {i.id for i in new.anchors}:
            raise ValueError("base and new forms must designate the same anchor items")

    def forms(self) -> tuple[TestForm, TestForm]:
        return self.item_bank if self.item_bank is not None else default_item_bank(self.bank_seed)

    def to_dict(self) -> dict:
        cal = asdict(self.calibration)
        cal["model_family"] = None
        return {
            "rho_levels": list(self.rho_levels), "anchor_scenarios": list(self.anchor_scenarios),
            "analysis_models": [m.value for m in self.analysis_models],
            "n_examinees": self.n_examinees, "n_replications": self.n_replications,
            "base_seed": self.base_seed, "bank_seed": self.bank_seed if self.item_bank is None else None,
            "calibration": cal, "link": asdict(self.link),
            "new_group_mean": None if self.new_group_mean is None else list(self.new_group_mean),
            "new_group_cov": None if self.new_group_cov is None else [list(r) for r in self.new_group_cov],
        }


def item_to_dict(item: Item) -> dict:
    d = {"id": item.id, "format": item.format.value, "family": item.model_family.value, "a": list(item.a)}
    if isinstance(item, DichotomousItem):
        d.update(d_=item.d, c=item.c)
    else:
        d["deltas"] = list(item.deltas)
    return d


def item_from_dict(d: dict) -> Item:
    if "deltas" in d:
        return PolytomousItem(d["id"], d["a"], d["deltas"], d["format"], d["family"], linked=True)
    return DichotomousItem(d["id"], d["a"], d["d_"], d["c"], d["format"], d["family"], linked=True)


@dataclass
class ReplicationRecord:
    """Outcome of one (model, rho, scenario, replication) cell."""

    model: str
    rho: float
    scenario: str
    replication: int
    A: list
    B: list
    loss: float
    iterations: int
    converged: bool
    condition_warning: bool
    base_anchors: list
    linked_anchors: list
    true_anchors: list
    pop_mean: list
    pop_cov: list
    seeds: dict
    loss_trace: list = field(default_factory=list)

    @property
    def key(self) -> tuple:
        return (self.model, self.rho, self.scenario, self.replication)


@dataclass
class StudyReport:
    config: dict
    records: list
    failures: list = field(default_factory=list)
    version: int = REPORT_VERSION

    def cells(self) -> dict:
        """Records grouped by (model, rho, scenario), replications in order."""
        out: dict = {}
        for rec in sorted(self.records, key=lambda r: r.key):
            out.setdefault((rec.model, rec.rho, rec.scenario), []).append(rec)
        return out

    def to_json(self) -> str:
        payload = {"version": self.version, "config": self.config,
                   "records": [asdict(r) for r in sorted(self.records, key=lambda r: r.key)],
                   "failures": sorted(self.failures, key=lambda f: json.dumps(f, sort_keys=True))}
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StudyReport":
        payload = json.loads(text)
        records = [ReplicationRecord(**r) for r in payload["records"]]
        return cls(payload["config"], records, payload.get("failures", []), payload["version"])

    def seeds(self) -> dict:
        return {"{}|rho={}|{}|rep={}".format(*r.key): r.seeds for r in sorted(self.records, key=lambda r: r.key)}


def _group_thetas(config: StudyConfig, rho: float, rep: int, group: str) -> tuple[np.ndarray, int]:
    seed = derive_seed(config.base_seed, "theta", group, rho, rep)
    th = sample_thetas(config.n_examinees, rho, seed)
    if group == "new" and (config.new_group_mean is not None or config.new_group_cov is not None):
        mean = np.asarray(config.new_group_mean if config.new_group_mean is not None else (0.0, 0.0))
        if config.new_group_cov is not None:
            cov = np.asarray(config.new_group_cov, dtype=float)
            sd = np.sqrt(np.diag(cov))
            corr = cov / np.outer(sd, sd)
            th = sample_thetas(config.n_examinees, float(corr[0, 1]), seed) * sd
        th = th + mean
    return th, seed


def _new_group_moments(config: StudyConfig, rho: float) -> tuple[np.ndarray, np.ndarray, float]:
    mean = np.asarray(config.new_group_mean if config.new_group_mean is not None else (0.0, 0.0), dtype=float)
    if config.new_group_cov is None:
        return mean, np.ones(2), rho
    cov = np.asarray(config.new_group_cov, dtype=float)
    sd = np.sqrt(np.diag(cov))
    return mean, sd, float(cov[0, 1] / (sd[0] * sd[1]))


def _calibrate_form(config, form: TestForm, model: Family, rho: float, rep: int, group: str, seeds: dict):
    spec = config.calibration
    cal_seed = derive_seed(config.base_seed, "calibrate", model.value, group, rho, rep)
    seeds[f"calibrate_{group}"] = cal_seed
    if spec.mode == "OracleNoise":
        items = list(form.items)
        pop_rho = rho
        if group == "new":
            mean, sd, pop_rho = _new_group_moments(config, rho)
            items = [restandardize(it, mean, sd) for it in items]
        truth = [project_item(it, model, pop_rho) for it in items]
        return calibrate_oracle(truth, family_population(model, pop_rho),
                                replace(spec, model_family=model, seed=cal_seed))
    thetas, th_seed = _group_thetas(config, rho, rep, group)
    resp_seed = derive_seed(config.base_seed, "responses", group, rho, rep)
    seeds[f"theta_{group}"] = th_seed
    seeds[f"responses_{group}"] = resp_seed
    responses = generate_responses(form, thetas, resp_seed)
    return calibrate_mcmc(responses, form.items, replace(spec, model_family=model, seed=cal_seed))


def _thin_trace(trace) -> list:
    """(iteration, best loss) pairs at log-spaced iterations, always keeping the last."""
    n = len(trace)
    if n == 0:
        return []
    idx = np.unique(np.geomspace(1, n, TRACE_POINTS).astype(int) - 1)
    return [[int(i), float(trace[i])] for i in idx]


def _run_unit(args) -> tuple[list, list]:
    config, model, rho, rep, scenarios = args
    base_form, new_form = config.forms()
    seeds: dict = {}
    try:
        cal_base = _calibrate_form(config, base_form, model, rho, rep, "base", seeds)
        cal_new = _calibrate_form(config, new_form, model, rho, rep, "new", seeds)
    except Exception as exc:
        return [], [{"model": model.value, "rho": rho, "replication": rep, "stage": "calibrate", "error": repr(exc)}]
    truth = {it.id: project_item(it, model, rho) for it in base_form.items}
    grid = default_grid(model.dim)
    records, failures = [], []
    for scenario in scenarios:
        try:
            ids = build_anchor_set(new_form, scenario)
            base_anchor = [cal_base.by_id()[i] for i in ids]
            new_anchor = [cal_new.by_id()[i] for i in ids]
            res = estimate_transform(base_anchor, new_anchor, grid, config.link)
            t = res.transform
            linked = [transform_item(it, t) for it in new_anchor]
            mu, cov = transform_population(cal_new.pop_mean, cal_new.pop_cov, t)
        except Exception as exc:
            failures.append({"model": model.value, "rho": rho, "scenario": scenario, "replication": rep,
                             "stage": "link", "error": repr(exc)})
            continue
        records.append(ReplicationRecord(
            model=model.value, rho=rho, scenario=scenario, replication=rep,
            A=t.A.tolist(), B=t.B.tolist(), loss=res.loss, iterations=res.iterations,
            converged=res.converged, condition_warning=res.condition_warning,
            base_anchors=[item_to_dict(it) for it in base_anchor],
            linked_anchors=[item_to_dict(it) for it in linked],
            true_anchors=[item_to_dict(truth[i]) for i in ids],
            pop_mean=mu.tolist(), pop_cov=cov.tolist(), seeds=dict(seeds),
            loss_trace=_thin_trace(res.loss_trace)))
    return records, failures


def _matches(only: dict | None, model: Family, rho: float, scenario: str | None = None) -> bool:
    if not only:
        return True
    if "model" in only and Family(only["model"]) is not model:
        return False
    if "rho" in only and float(only["rho"]) != rho:
        return False
    if scenario is not None and "scenario" in only and only["scenario"] != scenario:
        return False
    return True


def run_study(config: StudyConfig, only: dict | None = None, jobs: int = 1, strict: bool = True) -> StudyReport:
    """Run every (model, rho, replication) unit and link under each scenario.

    Base and new calibrations are shared by the anchor scenarios of a unit.
    ``only`` restricts the run to matching ``model``/``rho``/``scenario``
    values. With ``strict`` any failure raises :class:`StudyError`; otherwise
    failures are recorded on the report and the run continues.
    """
    units = []
    for model in config.analysis_models:
        for rho in config.rho_levels:
            if not _matches(only, model, rho):
                continue
            scenarios = [s for s in config.anchor_scenarios if _matches(only, model, rho, s)]
            if scenarios:
                units += [(config, model, rho, rep, scenarios) for rep in range(config.n_replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_unit, units))
    else:
        results = [_run_unit(u) for u in units]
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, fails in results for f in fails]
    if failures and strict:
        f = failures[0]
        raise StudyError("condition model={model} rho={rho} replication={replication} failed in {stage}: {error}".format(**f))
    return StudyReport(config.to_dict(), records, failures)

"""Item and population calibration.

Two estimators share one result type:

* ``calibrate_oracle`` perturbs known parameters with seeded Gaussian noise,
  isolating linking behaviour from estimation error;
* ``calibrate_mcmc`` is a blocked Metropolis-within-Gibbs sampler with
  per-iteration standardization of the ability draws.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logit

from .model import DichotomousItem, Family, Item, PackedItems, PolytomousItem, loading_mask, read_item_bank, write_item_bank

MODES = ("OracleNoise", "MCMC")


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Priors:
    log_slope_sd: float = 0.5
    location_sd: float = 2.0
    guess_alpha: float = 5.0
    guess_beta: float = 17.0


PRIOR_SETS = {"default": Priors()}


@dataclass(frozen=True)
class CalibrationSpec:
    mode: str = "MCMC"
    model_family: Family = Family.UIRT
    chain_length: int = 2000
    burn_in: int = 1000
    proposal_scales: dict = field(default_factory=lambda: {"theta": 0.8, "item": 0.1, "guess": 0.3, "corr": 0.05})
    prior_spec: str = "default"
    seed: int = 0
    noise_sigma: float = 0.0
    adapt_every: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "model_family", Family(self.model_family))
        if not 0 <= self.burn_in < self.chain_length:
            raise ValueError("burn_in must be smaller than chain_length")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        for k, v in self.proposal_scales.items():
            if k not in ("theta", "item", "guess", "corr") or not (np.isfinite(v) and v > 0):
                raise ValueError(f"proposal scale {k}={v} must be a known block with a positive finite value")
        if self.adapt_every < 1:
            raise ValueError("adapt_every must be positive")
        if self.prior_spec not in PRIOR_SETS:
            raise ValueError(f"unknown prior set {self.prior_spec!r}")


@dataclass
class CalibrationResult:
    items: list
    pop_mean: np.ndarray
    pop_cov: np.ndarray
    acceptance_rates: dict
    seed_used: int
    theta: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def by_id(self) -> dict:
        return {it.id: it for it in self.items}


# likelihood ----------------------------------------------------------------

def _check_responses(responses: np.ndarray, packed: PackedItems) -> np.ndarray:
    responses = np.asarray(responses)
    if responses.ndim != 2 or responses.shape[1] != packed.n_items:
        raise ValueError(f"response matrix must have {packed.n_items} columns")
    bad = (responses >= packed.ncat) | (responses < -1)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"score {responses[i, j]} out of range for item {packed.ids[j]}")
    return responses.astype(np.int64)


def log_likelihood(responses, items: Sequence[Item], thetas) -> float:
    """Joint log-likelihood; missing responses are coded -1 and contribute zero."""
    packed = PackedItems(items)
    y = _check_responses(responses, packed)
    thetas = np.asarray(thetas, dtype=float).reshape(y.shape[0], packed.dim)
    return float(packed.log_prob_matrix(thetas, y).sum())


# oracle-noise mode ---------------------------------------------------------

def calibrate_oracle(true_items: Sequence[Item], true_pop: tuple, spec: CalibrationSpec) -> CalibrationResult:
    if spec.mode != "OracleNoise":
        raise ValueError("calibrate_oracle needs an OracleNoise spec")
    rng = np.random.default_rng(spec.seed)
    sigma = spec.noise_sigma
    out = []
    for it in true_items:
        a = np.array(it.a)
        nz = a != 0
        noisy_a = a.copy()
        noisy_a[nz] = np.exp(np.log(np.abs(a[nz])) + sigma * rng.standard_normal(nz.sum())) * np.sign(a[nz])
        if isinstance(it, DichotomousItem):
            d = it.d + sigma * rng.standard_normal()
            eps = sigma * rng.standard_normal()
            c = float(expit(logit(it.c) + eps)) if it.c > 0 else 0.0
            new = replace(it, a=tuple(noisy_a), d=d, c=c) if sigma > 0 else it
        else:
            deltas = np.array(it.deltas) + sigma * rng.standard_normal(len(it.deltas))
            new = replace(it, a=tuple(noisy_a), deltas=tuple(deltas)) if sigma > 0 else it
        out.append(new)
    mu, cov = true_pop
    return CalibrationResult(out, np.array(mu, dtype=float), np.array(cov, dtype=float),
                             {}, spec.seed)


# MCMC ----------------------------------------------------------------------

class _State:
    """Array form of the item parameters, dichotomous columns first."""

    def __init__(self, skeleton: Sequence[Item], family: Family):
        self.order = sorted(range(len(skeleton)), key=lambda j: isinstance(skeleton[j], PolytomousItem))
        items = [skeleton[j] for j in self.order]
        self.items = items
        self.J = len(items)
        self.D = family.dim
        self.jd = sum(isinstance(it, DichotomousItem) for it in items)
        self.mask = np.array([loading_mask(family, it.format) for it in items])
        self.ncat = np.array([it.n_categories for it in items])
        self.kmax = int(self.ncat.max())
        self.slopes = np.where(self.mask, 1.0, 0.0)
        self.d = np.zeros(self.jd)
        self.logit_c = np.full(self.jd, logit(0.2))
        self.deltas = np.zeros((self.J - self.jd, max(self.kmax - 1, 1)))
        self.delta_ok = np.array([[v < it.n_categories - 1 for v in range(self.deltas.shape[1])]
                                  for it in items[self.jd:]]).reshape(self.deltas.shape)


def _cell_loglik(theta, slopes, d, logit_c, deltas, y, jd, kmax):
    """Per-cell log-probabilities, shape (N, J), for the dichotomous-first layout."""
    z = theta @ slopes.T
    out = np.empty_like(z)
    if jd:
        c = expit(logit_c)
        # clipping keeps 1 - p representable; beyond |x| = 30 the cell is saturated anyway
        p = expit(np.clip(z[:, :jd] + d, -30.0, 30.0))
        p = c + (1.0 - c) * p
        out[:, :jd] = np.log(np.where(y[:, :jd] == 1, p, 1.0 - p))
    if jd < z.shape[1]:
        zp = z[:, jd:]
        yp = y[:, jd:]
        cum = np.zeros_like(zp)
        nums = [np.zeros_like(zp)]
        for k in range(1, kmax):
            cum = cum + deltas[:, k - 1]
            nums.append(k * zp - cum)
        top = np.maximum.reduce(nums)
        lse = np.log(sum(np.exp(n - top) for n in nums)) + top
        picked = np.choose(np.clip(yp, 0, kmax - 1), nums)
        out[:, jd:] = picked - lse
    out[y < 0] = 0.0
    return out


def _mvn_logpdf_rows(theta: np.ndarray, cov: np.ndarray) -> np.ndarray:
    prec = np.linalg.inv(cov)
    return -0.5 * np.einsum("ij,jk,ik->i", theta, prec, theta)


def _cov_from_rho(D: int, rho: float) -> np.ndarray:
    cov = np.eye(D)
    if D == 2:
        cov[0, 1] = cov[1, 0] = rho
    return cov


def _initial_theta(y: np.ndarray, state: _State, family: Family, rng) -> np.ndarray:
    N = y.shape[0]
    yz = np.where(y < 0, 0, y).astype(float)
    is_mc = np.array([it.format.value == "MC" for it in state.items])

    def zscore(v):
        sd = v.std()
        return (v - v.mean()) / sd if sd > 0 else np.zeros_like(v)

    total = zscore(yz.sum(axis=1))
    mc = zscore(yz[:, is_mc].sum(axis=1)) if is_mc.any() else total
    cr = zscore(yz[:, ~is_mc].sum(axis=1)) if (~is_mc).any() else total
    if family is Family.UIRT:
        theta = total[:, None]
    elif family is Family.SIMPLE:
        theta = np.column_stack([mc, cr])
    else:
        theta = np.column_stack([total, 0.5 * (mc - total), 0.5 * (cr - total)])
    return theta + 0.1 * rng.standard_normal((N, state.D))


def _initial_items(y: np.ndarray, state: _State) -> None:
    jd = state.jd
    for j in range(state.J):
        col = y[:, j]
        col = col[col >= 0]
        if j < jd:
            p = np.clip(col.mean() if col.size else 0.5, 0.25, 0.97)
            state.d[j] = logit((p - 0.2) / 0.8)
        else:
            K = state.ncat[j]
            counts = np.bincount(col, minlength=K).astype(float) + 0.5
            state.deltas[j - jd, : K - 1] = np.clip(np.log(counts[:-1] / counts[1:]), -3, 3)


def _standardize(theta, state: _State):
    m = theta.mean(axis=0)
    s = theta.std(axis=0)
    theta = (theta - m) / s
    shift = state.slopes @ m
    state.d = state.d + shift[: state.jd]
    state.deltas = state.deltas - shift[state.jd :, None] * state.delta_ok
    state.slopes = state.slopes * s
    return theta


def _adapt(scale, rate):
    return np.where(rate < 0.30, scale * 0.8, np.where(rate > 0.45, scale * 1.25, scale))


def calibrate_mcmc(responses, form_skeleton: Sequence[Item], spec: CalibrationSpec) -> CalibrationResult:
    """Posterior-mean calibration of ``form_skeleton`` from a response matrix.

    The skeleton fixes item ids, formats, category counts and anchor flags;
    its parameter values are ignored. Ability draws are standardized (mean 0,
    variance 1 per dimension) after every sweep and the rescaling is absorbed
    into the item parameters. Under simple structure the factor correlation is
    sampled; under the bifactor model the factors stay orthogonal.
    """
    if spec.mode != "MCMC":
        raise ValueError("calibrate_mcmc needs an MCMC spec")
    family = spec.model_family
    prior = PRIOR_SETS[spec.prior_spec]
    rng = np.random.default_rng(spec.seed)
    skeleton = list(form_skeleton)
    state = _State(skeleton, family)
    packed = PackedItems([_retag(it, family) for it in skeleton])
    y_all = _check_responses(responses, packed)
    y = y_all[:, state.order]
    N, J, D, jd = y.shape[0], state.J, state.D, state.jd
    kmax = state.kmax

    _initial_items(y, state)
    theta = _initial_theta(y, state, family, rng)
    rho = 0.0
    cov = _cov_from_rho(D, rho)
    scales = dict(spec.proposal_scales)
    s_theta = float(scales.get("theta", 0.8))
    s_item = np.full(J, float(scales.get("item", 0.1)))
    s_guess = np.full(jd, float(scales.get("guess", 0.3)))
    s_corr = float(scales.get("corr", 0.05))
    pd_idx = np.arange(jd, J)

    def params_loglik(slopes, d, lc, deltas):
        return _cell_loglik(theta, slopes, d, lc, deltas, y, jd, kmax)

    def item_prior(slopes, d, deltas):
        la = np.log(np.where(state.mask, slopes, 1.0))
        lp = -0.5 * (la / prior.log_slope_sd) ** 2
        lp = lp.sum(axis=1)
        lp[:jd] += -0.5 * (d / prior.location_sd) ** 2
        lp[jd:] += (-0.5 * (deltas / prior.location_sd) ** 2 * state.delta_ok).sum(axis=1)
        return lp

    def guess_prior(lc):
        # Beta prior on c plus the logit Jacobian c(1-c)
        return prior.guess_alpha * log_expit(lc) + prior.guess_beta * log_expit(-lc)

    ll = params_loglik(state.slopes, state.d, state.logit_c, state.deltas)
    counts = {"theta": np.zeros(N), "item": np.zeros(J), "guess": np.zeros(jd), "corr": 0.0}
    window = {"theta": np.zeros(N), "item": np.zeros(J), "guess": np.zeros(jd), "corr": 0.0}
    n_kept = spec.chain_length - spec.burn_in
    acc_slopes = np.zeros_like(state.slopes)
    acc_d = np.zeros(jd)
    acc_c = np.zeros(jd)
    acc_deltas = np.zeros_like(state.deltas)
    acc_rho = 0.0
    theta_sum = np.zeros_like(theta)

    for it in range(spec.chain_length):
        # ability block, proposals shaped by the current prior covariance
        chol = np.linalg.cholesky(cov + 1e-9 * np.eye(D))
        prop = theta + s_theta * rng.standard_normal((N, D)) @ chol.T
        ll_prop = _cell_loglik(prop, state.slopes, state.d, state.logit_c, state.deltas, y, jd, kmax)
        log_r = (ll_prop.sum(axis=1) - ll.sum(axis=1)
                 + _mvn_logpdf_rows(prop, cov) - _mvn_logpdf_rows(theta, cov))
        ok = np.log(rng.random(N)) < log_r
        theta[ok] = prop[ok]
        ll[ok] = ll_prop[ok]
        window["theta"] += ok

        theta = _standardize(theta, state)

        # item block: slopes (log scale) with intercept or thresholds
        eps = rng.standard_normal((J, D)) * s_item[:, None]
        slopes_p = np.where(state.mask, state.slopes * np.exp(eps), 0.0)
        d_p = state.d + rng.standard_normal(jd) * s_item[:jd]
        deltas_p = state.deltas + rng.standard_normal(state.deltas.shape) * s_item[jd:, None] * state.delta_ok
        ll_prop = params_loglik(slopes_p, d_p, state.logit_c, deltas_p)
        log_r = (ll_prop.sum(axis=0) - ll.sum(axis=0)
                 + item_prior(slopes_p, d_p, deltas_p) - item_prior(state.slopes, state.d, state.deltas))
        ok = np.log(rng.random(J)) < log_r
        state.slopes[ok] = slopes_p[ok]
        okd = ok[:jd]
        state.d[okd] = d_p[okd]
        okp = ok[jd:]
        state.deltas[okp] = deltas_p[okp]
        ll[:, ok] = ll_prop[:, ok]
        window["item"] += ok

        # guessing block
        if jd:
            lc_p = state.logit_c + rng.standard_normal(jd) * s_guess
            ll_prop = _cell_loglik(theta, state.slopes[:jd], state.d, lc_p, state.deltas[:0], y[:, :jd], jd, kmax)
            log_r = ll_prop.sum(axis=0) - ll[:, :jd].sum(axis=0) + guess_prior(lc_p) - guess_prior(state.logit_c)
            ok = np.log(rng.random(jd)) < log_r
            state.logit_c[ok] = lc_p[ok]
            ll[:, :jd][:, ok] = ll_prop[:, ok]
            window["guess"] += ok

        # factor correlation, uniform prior on rho via Fisher z
        if family is Family.SIMPLE:
            z_p = np.arctanh(rho) + s_corr * rng.standard_normal()
            rho_p = float(np.tanh(z_p))
            if abs(rho_p) < 1 - 1e-9:
                cov_p = _cov_from_rho(D, rho_p)
                log_r = (_mvn_logpdf_rows(theta, cov_p).sum() - 0.5 * N * np.log(1 - rho_p**2) + np.log(1 - rho_p**2)
                         - _mvn_logpdf_rows(theta, cov).sum() + 0.5 * N * np.log(1 - rho**2) - np.log(1 - rho**2))
                if np.log(rng.random()) < log_r:
                    rho, cov = rho_p, cov_p
                    window["corr"] += 1

        if not (np.all(np.isfinite(ll)) and np.all(np.isfinite(state.slopes)) and np.all(np.isfinite(theta))):
            block = "theta" if not np.all(np.isfinite(theta)) else "item"
            raise CalibrationError(f"chain diverged at iteration {it} in the {block} block")

        step = it + 1
        if step <= spec.burn_in and (step % spec.adapt_every == 0 or step == spec.burn_in):
            s_theta = float(_adapt(s_theta, window["theta"].mean() / spec.adapt_every))
            s_item = _adapt(s_item, window["item"] / spec.adapt_every)
            s_guess = _adapt(s_guess, window["guess"] / spec.adapt_every)
            s_corr = float(_adapt(s_corr, window["corr"] / spec.adapt_every))
            window = {"theta": np.zeros(N), "item": np.zeros(J), "guess": np.zeros(jd), "corr": 0.0}
        if step > spec.burn_in:
            for k in counts:
                counts[k] = counts[k] + window[k]
            window = {"theta": np.zeros(N), "item": np.zeros(J), "guess": np.zeros(jd), "corr": 0.0}
            acc_slopes += state.slopes
            acc_d += state.d
            acc_c += expit(state.logit_c)
            acc_deltas += state.deltas
            acc_rho += rho
            theta_sum += theta

    rates = {"theta": float(counts["theta"].mean() / n_kept), "item": float(counts["item"].mean() / n_kept)}
    if jd:
        rates["guess"] = float(counts["guess"].mean() / n_kept)
    if family is Family.SIMPLE:
        rates["corr"] = float(counts["corr"] / n_kept)
    notes = []
    for k, r in rates.items():
        if not 0.05 <= r <= 0.95:
            msg = f"acceptance rate {r:.3f} for block {k!r} is outside [0.05, 0.95]"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)

    slopes = acc_slopes / n_kept
    d = acc_d / n_kept
    c = acc_c / n_kept
    deltas = acc_deltas / n_kept
    est = [None] * J
    for k, sk in enumerate(state.items):
        a = tuple(np.where(state.mask[k], slopes[k], 0.0))
        if k < jd:
            new = DichotomousItem(sk.id, a, d[k], c[k], sk.format, family, sk.anchor)
        else:
            K = sk.n_categories
            new = PolytomousItem(sk.id, a, tuple(deltas[k - jd, : K - 1]), sk.format, family, sk.anchor)
        est[state.order[k]] = new
    rho_hat = acc_rho / n_kept
    return CalibrationResult(est, np.zeros(D), _cov_from_rho(D, rho_hat), rates, spec.seed,
                             theta=theta, warnings=notes)


def _retag(item: Item, family: Family) -> Item:
    """Skeleton item re-expressed in ``family`` with unit loadings on its mask."""
    a = tuple(1.0 if m else 0.0 for m in loading_mask(family, item.format))
    if isinstance(item, DichotomousItem):
        return DichotomousItem(item.id, a, 0.0, 0.0, item.format, family, item.anchor)
    return PolytomousItem(item.id, a, tuple(0.0 for _ in item.deltas), item.format, family, item.anchor)


# file formats --------------------------------------------------------------

def write_responses(responses: np.ndarray, item_ids: Sequence[str], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(item_ids)
    for row in np.asarray(responses):
        w.writerow(["" if v < 0 else int(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_responses(source) -> tuple[np.ndarray, list]:
    """Parse a response CSV; blank cells become -1 (missing)."""
    text = Path(source).read_text() if not (isinstance(source, str) and "\n" in source) else source
    rows = list(csv.reader(io.StringIO(text)))
    ids = rows[0]
    data = np.array([[int(v) if v.strip() else -1 for v in row] for row in rows[1:]], dtype=np.int64)
    return data.reshape(len(rows) - 1, len(ids)), ids


def write_calibration(result: CalibrationResult, path=None) -> str:
    """Bank CSV followed by a population block (mean row, then covariance rows)."""
    text = write_item_bank(result.items)
    lines = ["# population", "mean," + ",".join(repr(float(x)) for x in result.pop_mean)]
    lines += ["cov," + ",".join(repr(float(x)) for x in row) for row in np.atleast_2d(result.pop_cov)]
    text += "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_calibration(source) -> CalibrationResult:
    text = Path(source).read_text() if not (isinstance(source, str) and "\n" in source) else source
    bank, _, pop = text.partition("# population\n")
    items = read_item_bank(bank)
    mean, cov = None, []
    for line in pop.strip().splitlines():
        key, *vals = line.split(",")
        if key == "mean":
            mean = np.array([float(v) for v in vals])
        elif key == "cov":
            cov.append([float(v) for v in vals])
    return CalibrationResult(items, mean, np.array(cov), {}, -1)

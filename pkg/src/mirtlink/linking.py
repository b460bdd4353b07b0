"""Scale linking by test-response-function matching.

The new-form coordinate system is mapped onto the base system by the affine
change ``theta_base = A @ theta_new + B``. Item parameters follow from
requiring every response probability to be unchanged:

    a* = a A^-1,    d* = d - a A^-1 B,    delta*_v = delta_v + a A^-1 B.

``A`` and ``B`` are estimated by minimizing the weighted squared difference
between the base anchor TRF and the transformed new anchor TRF over a
quadrature grid (Stocking-Lord at D=1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.stats import qmc

from .model import DichotomousItem, Item, PackedItems, PolytomousItem, loading_mask

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class Transform:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        B = np.array(self.B, dtype=float, ndmin=1)
        if A.shape != (B.size, B.size):
            raise ValueError(f"A must be {B.size}x{B.size}, got {A.shape}")
        if B.size not in (1, 2, 3):
            raise ValueError("transforms are defined for D in {1, 2, 3}")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @classmethod
    def identity(cls, dim: int) -> "Transform":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_vector(cls, x, dim: int) -> "Transform":
        x = np.asarray(x, dtype=float)
        return cls(x[: dim * dim].reshape(dim, dim), x[dim * dim :])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B])

    @property
    def dim(self) -> int:
        return self.B.size

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.A))

    @property
    def ill_conditioned(self) -> bool:
        return self.condition_number > 1e8

    def inverse(self) -> "Transform":
        Ainv = _inverse(self.A)
        return Transform(Ainv, -Ainv @ self.B)

    def __eq__(self, other):
        if not isinstance(other, Transform):
            return NotImplemented
        return np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B)

    __hash__ = None


def _inverse(A: np.ndarray) -> np.ndarray:
    if abs(np.linalg.det(A)) < SINGULAR_TOL or not np.all(np.isfinite(A)):
        raise np.linalg.LinAlgError("transformation matrix is singular")
    return np.linalg.inv(A)


def transform_theta(theta, t: Transform) -> np.ndarray:
    """Map new-form abilities to the base system; accepts (D,) or (N, D)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != t.dim:
        raise ValueError(f"theta has dimension {theta.shape[-1]}, transform is {t.dim}-dimensional")
    return theta @ t.A.T + t.B


def transform_item(item: Item, t: Transform) -> Item:
    if item.dim != t.dim:
        raise ValueError(f"item {item.id} has dimension {item.dim}, transform is {t.dim}-dimensional")
    Ainv = _inverse(t.A)
    a_new = np.asarray(item.a) @ Ainv
    shift = float(a_new @ t.B)
    mask = loading_mask(item.model_family, item.format)
    linked = item.linked or any(x != 0.0 and not m for x, m in zip(a_new, mask))
    if isinstance(item, DichotomousItem):
        return replace(item, a=tuple(a_new), d=item.d - shift, linked=linked)
    return replace(item, a=tuple(a_new), deltas=tuple(x + shift for x in item.deltas), linked=linked)


def transform_population(mu, sigma, t: Transform) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float).reshape(mu.size, mu.size)
    if mu.size != t.dim:
        raise ValueError("population dimension does not match the transform")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
        raise ValueError("covariance matrix is not symmetric")
    if np.linalg.eigvalsh(sigma).min() < -1e-10:
        raise ValueError("covariance matrix is not positive semidefinite")
    sigma_new = t.A @ sigma @ t.A.T
    return t.A @ mu + t.B, (sigma_new + sigma_new.T) / 2


@dataclass(frozen=True)
class QuadratureGrid:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float)
        if pts.shape[0] == 0 or pts.shape[0] != w.size:
            raise ValueError("grid needs one weight per point and at least one point")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("grid weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def default_grid(dim: int, n_points: int | None = None, seed: int = 20180413) -> QuadratureGrid:
    """41 normal-weighted points on [-4, 4] for D=1; 2,000 scrambled Halton normals otherwise."""
    if dim == 1:
        x = np.linspace(-4.0, 4.0, n_points or 41)
        w = stats.norm.pdf(x)
        return QuadratureGrid(x[:, None], w / w.sum())
    n = n_points or 2000
    u = qmc.Halton(d=dim, scramble=True, seed=seed).random(n)
    return QuadratureGrid(stats.norm.ppf(u), np.full(n, 1.0 / n))


def _align(anchor_base: Sequence[Item], anchor_new: Sequence[Item]) -> list:
    if not anchor_base or not anchor_new:
        raise ValueError("anchor lists are empty")
    new_by_id = {it.id: it for it in anchor_new}
    base_ids = [it.id for it in anchor_base]
    if len(new_by_id) != len(anchor_new) or set(base_ids) != set(new_by_id):
        raise ValueError("anchor lists are not aligned by item id")
    return [new_by_id[i] for i in base_ids]


class _TRFObjective:
    """Loss evaluator that pulls the grid back into the new-form system.

    By probability invariance, the transformed new TRF at ``theta`` equals the
    untransformed new TRF at ``A^-1 (theta - B)``, so no item objects are built
    per evaluation.
    """

    def __init__(self, anchor_base, anchor_new, grid: QuadratureGrid):
        anchor_new = _align(anchor_base, anchor_new)
        self.base = PackedItems(anchor_base)
        self.new = PackedItems(anchor_new)
        if self.base.dim != self.new.dim or self.base.dim != grid.dim:
            raise ValueError("anchors and grid must share dimensionality")
        self.dim = self.base.dim
        self.grid = grid
        self.target = self.base.total_scores(grid.points)
        self.n_evals = 0

    def loss(self, A: np.ndarray, B: np.ndarray) -> float:
        Ainv = _inverse(A)
        pulled = (self.grid.points - B) @ Ainv.T
        diff = self.target - self.new.total_scores(pulled)
        return float(self.grid.weights @ (diff * diff))

    def __call__(self, x: np.ndarray) -> float:
        self.n_evals += 1
        D = self.dim
        A = x[: D * D].reshape(D, D)
        if not np.all(np.isfinite(x)) or abs(np.linalg.det(A)) < SINGULAR_TOL:
            # singular candidates are infeasible, not a failure of the search
            return np.inf
        val = self.loss(A, x[D * D :])
        if np.isnan(val):
            raise FloatingPointError(f"non-finite linking loss at A={A.tolist()}, B={x[D * D:].tolist()}")
        return val


def sl_loss(anchor_base: Sequence[Item], anchor_new: Sequence[Item], t: Transform,
            grid: QuadratureGrid | None = None) -> float:
    """Weighted squared TRF difference between base anchors and transformed new anchors."""
    grid = grid or default_grid(t.dim)
    return _TRFObjective(anchor_base, anchor_new, grid).loss(t.A, t.B)


@dataclass(frozen=True)
class LinkOptions:
    """Nelder-Mead settings.

    ``initial_step`` is the edge length of the starting simplex around the
    identity on every coordinate; restarts use the smaller ``restart_step``
    around the incumbent.
    """

    initial_step: float = 0.1
    restart_step: float = 0.02
    xatol: float = 1e-7
    fatol: float = 1e-14
    max_restarts: int = 6
    max_fev: int = 20000
    rel_improvement: float = 1e-10
    hessian_cond_limit: float = 1e6


@dataclass(frozen=True)
class LinkingResult:
    transform: Transform
    loss: float
    iterations: int
    converged: bool
    condition_warning: bool
    hessian_condition: float = float("nan")
    loss_trace: tuple = field(default=(), compare=False, repr=False)  # best loss per iteration

    def to_record(self) -> str:
        return format_linking_result(self)


def _simplex(x0: np.ndarray, step: float) -> np.ndarray:
    sim = np.tile(x0, (x0.size + 1, 1))
    sim[1:] += step * np.eye(x0.size)
    return sim


def _fd_hessian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    E = np.eye(n) * h
    for i in range(n):
        H[i, i] = (f(x + E[i]) - 2 * f0 + f(x - E[i])) / h**2
        for j in range(i + 1, n):
            H[i, j] = H[j, i] = (
                f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])
            ) / (4 * h**2)
    return H


def hessian_condition(f, x: np.ndarray) -> float:
    eig = np.abs(np.linalg.eigvalsh(_fd_hessian(f, x)))
    return float(eig.max() / eig.min()) if eig.min() > 0 else np.inf


def estimate_transform(anchor_base: Sequence[Item], anchor_new: Sequence[Item],
                       grid: QuadratureGrid | None = None,
                       options: LinkOptions | None = None) -> LinkingResult:
    """Estimate (A, B) mapping the new calibration onto the base system.

    Nelder-Mead over the row-major entries of A followed by B, started at the
    identity and restarted from the incumbent until a full restart cycle
    improves the loss by less than ``rel_improvement`` (relative).
    """
    opts = options or LinkOptions()
    if not anchor_base or not anchor_new:
        raise ValueError("anchor lists are empty")
    dim = anchor_base[0].dim
    grid = grid or default_grid(dim)
    f = _TRFObjective(anchor_base, anchor_new, grid)
    x = Transform.identity(dim).to_vector()
    fx = f(x)
    trace = [fx]
    path = [fx]  # best loss after every Nelder-Mead iteration, across restarts

    def record(intermediate_result):
        path.append(min(float(intermediate_result.fun), path[-1]))

    n_iter = 0
    converged = False
    adaptive = x.size > 2
    for cycle in range(opts.max_restarts + 1):
        res = optimize.minimize(
            f, x, method="Nelder-Mead",
            options={"initial_simplex": _simplex(x, opts.initial_step if cycle == 0 else opts.restart_step), "xatol": opts.xatol,
                     "fatol": opts.fatol, "maxfev": opts.max_fev, "adaptive": adaptive},
            callback=record,
        )
        n_iter += res.nit
        improvement = fx - res.fun
        if res.fun <= fx:
            x, fx = res.x, float(res.fun)
        trace.append(fx)
        if cycle >= 1 and improvement <= opts.rel_improvement * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    cond = hessian_condition(f, x)
    warn = cond > opts.hessian_cond_limit
    if warn:
        log.debug("weakly identified transform: Hessian condition %.3g", cond)
    return LinkingResult(Transform.from_vector(x, dim), max(fx, 0.0), n_iter, converged, warn, cond, tuple(path))


# record serialization ------------------------------------------------------

def format_linking_result(res: LinkingResult) -> str:
    t = res.transform
    D = t.dim
    lines = [f"D={D}"]
    lines += [f"A{i + 1}{j + 1}={float(t.A[i, j])!r}" for i in range(D) for j in range(D)]
    lines += [f"B{i + 1}={float(t.B[i])!r}" for i in range(D)]
    lines += [f"loss={float(res.loss)!r}", f"iterations={res.iterations}",
              f"converged={str(res.converged).lower()}",
              f"condition_warning={str(res.condition_warning).lower()}"]
    return "\n".join(lines) + "\n"


def parse_linking_result(text: str) -> LinkingResult:
    kv = dict(line.split("=", 1) for line in text.strip().splitlines() if line.strip())
    D = int(kv["D"])
    A = np.array([[float(kv[f"A{i + 1}{j + 1}"]) for j in range(D)] for i in range(D)])
    B = np.array([float(kv[f"B{i + 1}"]) for i in range(D)])
    return LinkingResult(Transform(A, B), float(kv["loss"]), int(kv["iterations"]),
                         kv["converged"] == "true", kv["condition_warning"] == "true")

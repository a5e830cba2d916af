"""Penalized Poisson fitting of piecewise-exponential hazard models.

The model for PED rows is  E(delta | x) = exp(eta + offset)  with an additive
linear predictor eta built from the model terms.  Coefficients are estimated
by penalized iteratively reweighted least squares (PIRLS); smoothing
parameters by maximizing a Laplace-approximate restricted likelihood with a
derivative-free simplex search on the log scale.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .basis import (
    KnotVector,
    PenaltyMatrix,
    bspline_basis,
    difference_penalty,
    fre_term,
    indicator_basis,
    smooth_term,
    tensor_product_rows,
)
from .errors import ConfigError, NumericError
from .ped import CutPoints, PedDataset, PedSchema, SurvivalRecord

__all__ = [
    "Intercept",
    "Linear",
    "Factor",
    "Smooth",
    "VaryingCoef",
    "RandomIntercept",
    "RandomSlope",
    "Fre",
    "ModelSpec",
    "Design",
    "build_design",
    "PirlsResult",
    "pirls",
    "reml_criterion",
    "optimize_smoothing",
    "FittedModel",
    "fit",
    "predict_hazard",
    "cumulative_hazard",
    "survival_prob",
    "coefficient_table",
    "model_to_json",
    "model_from_json",
]

RANK_TOL = 1e-8            # smallest/largest singular value of the stacked design
EIG_DROP = 1e-10           # relative cutoff for generalized determinant eigenvalues
LOG_LAMBDA_BOUND = 25.0    # search box for log smoothing parameters


# --------------------------------------------------------------------- terms


@dataclass(frozen=True)
class Intercept:
    pass


@dataclass(frozen=True)
class Linear:
    var: str


@dataclass(frozen=True)
class Factor:
    """Treatment-coded effect of the group column; reference defaults to the first level."""

    reference: str | None = None


@dataclass(frozen=True)
class Smooth:
    """Penalized spline baseline over time, centered against the intercept."""

    n_knots: int = 9
    degree: int = 3
    diff_order: int = 1
    placement: str = "quantile"


@dataclass(frozen=True)
class VaryingCoef:
    """Smoothly time-varying coefficient of a covariate: f(t) * x."""

    by: str
    n_knots: int = 9
    degree: int = 3
    diff_order: int = 1
    placement: str = "quantile"


@dataclass(frozen=True)
class RandomIntercept:
    """Ridge-shrunken per-group intercepts."""

    pass


@dataclass(frozen=True)
class RandomSlope:
    """Ridge-shrunken per-group linear coefficients of a covariate."""

    by: str


@dataclass(frozen=True)
class Fre:
    """Group-specific smooth time-varying coefficient of a covariate.

    One spline curve per group level, scaled by the covariate, with a
    per-group smoothness penalty and a global ridge shrinkage penalty.
    """

    by: str
    n_knots: int = 9
    degree: int = 3
    diff_order: int = 1
    placement: str = "quantile"


_TERM_KINDS = {
    Intercept: "intercept",
    Linear: "linear",
    Factor: "factor",
    Smooth: "smooth",
    VaryingCoef: "vc",
    RandomIntercept: "ranef",
    RandomSlope: "ranslope",
    Fre: "fre",
}
_KIND_TERMS = {v: k for k, v in _TERM_KINDS.items()}


@dataclass(frozen=True)
class ModelSpec:
    """Ordered model terms plus the interval time-point convention."""

    terms: tuple
    t_convention: str = "end"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.t_convention not in ("end", "mid"):
            raise ConfigError(f"unknown t convention {self.t_convention!r}")
        n_int = sum(isinstance(t, Intercept) for t in self.terms)
        if n_int != 1:
            raise ConfigError(f"model must contain exactly one intercept term, found {n_int}")
        if sum(isinstance(t, Smooth) for t in self.terms) > 1:
            raise ConfigError("at most one baseline smooth term is allowed")
        for t in self.terms:
            if type(t) not in _TERM_KINDS:
                raise ConfigError(f"unknown term type {type(t).__name__}")

    def to_dict(self) -> dict:
        out = []
        for t in self.terms:
            d = {"kind": _TERM_KINDS[type(t)]}
            for f_name in getattr(t, "__dataclass_fields__", {}):
                d[f_name] = getattr(t, f_name)
            out.append(d)
        return {"terms": out, "t_convention": self.t_convention}

    @staticmethod
    def from_dict(d: Mapping) -> "ModelSpec":
        try:
            terms = []
            for td in d["terms"]:
                td = dict(td)
                kind = td.pop("kind")
                terms.append(_KIND_TERMS[kind](**td))
            return ModelSpec(terms=tuple(terms), t_convention=d.get("t_convention", "end"))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"bad model specification: {e}") from None


# ------------------------------------------------------------- built design


@dataclass
class Penalty:
    """A quadratic penalty acting on a contiguous column block of the design."""

    label: str
    term_label: str
    start: int
    stop: int
    matrix: np.ndarray
    root: np.ndarray

    @property
    def dim(self) -> int:
        return self.stop - self.start


@dataclass
class BuiltTerm:
    """A model term with everything needed to evaluate it on new data."""

    label: str
    kind: str
    start: int
    stop: int
    var: str | None = None
    knots: KnotVector | None = None
    diff_order: int | None = None
    center_means: np.ndarray | None = None
    levels: tuple[str, ...] | None = None
    reference: str | None = None
    col_labels: tuple[str, ...] = ()

    def evaluate(self, t: np.ndarray, groups: np.ndarray, covs: Mapping[str, np.ndarray]) -> np.ndarray:
        n = len(t)
        if self.kind == "intercept":
            return np.ones((n, 1))
        if self.kind == "linear":
            return np.asarray(covs[self.var], dtype=float)[:, None]
        if self.kind == "factor":
            ind = indicator_basis(groups, self.levels)
            keep = [i for i, lev in enumerate(self.levels) if lev != self.reference]
            return ind[:, keep]
        if self.kind == "smooth":
            B = bspline_basis(t, self.knots)
            if self.center_means is not None:
                B = (B - self.center_means)[:, 1:]
            return B
        if self.kind == "vc":
            return bspline_basis(t, self.knots) * np.asarray(covs[self.var], dtype=float)[:, None]
        if self.kind == "ranef":
            return indicator_basis(groups, self.levels)
        if self.kind == "ranslope":
            ind = indicator_basis(groups, self.levels)
            return ind * np.asarray(covs[self.var], dtype=float)[:, None]
        if self.kind == "fre":
            ind = indicator_basis(groups, self.levels)
            B = bspline_basis(t, self.knots)
            return tensor_product_rows(ind, B) * np.asarray(covs[self.var], dtype=float)[:, None]
        raise ValueError(f"unknown term kind {self.kind!r}")


@dataclass
class Design:
    """Assembled design matrix, offset, response, and penalties."""

    X: np.ndarray
    offset: np.ndarray
    y: np.ndarray
    penalties: list[Penalty]
    terms: list[BuiltTerm]
    col_labels: tuple[str, ...]
    intercept_col: int | None

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]

    @property
    def penalized_cols(self) -> np.ndarray:
        cols: set[int] = set()
        for p in self.penalties:
            cols.update(range(p.start, p.stop))
        return np.array(sorted(cols), dtype=int)

    @property
    def n_unpenalized(self) -> int:
        return self.n_cols - len(self.penalized_cols)

    def s_lambda(self, lambdas: Sequence[float]) -> np.ndarray:
        lambdas = np.asarray(lambdas, dtype=float)
        if lambdas.shape != (len(self.penalties),):
            raise ValueError(f"expected {len(self.penalties)} smoothing parameters, got {lambdas.shape}")
        if np.any(lambdas < 0):
            raise ValueError("smoothing parameters must be nonnegative")
        S = np.zeros((self.n_cols, self.n_cols))
        for lam, p in zip(lambdas, self.penalties):
            S[p.start : p.stop, p.start : p.stop] += lam * p.matrix
        return S


def _time_knots(term, t: np.ndarray, cuts: CutPoints) -> KnotVector:
    return KnotVector.make(
        t,
        n_interior=term.n_knots,
        degree=term.degree,
        placement=term.placement,
        boundary=(0.0, cuts.last),
    )


def _check_covariate(var: str, schema: PedSchema):
    if var not in schema.covariates:
        raise ConfigError(f"covariate {var!r} not in schema {schema.covariates}")


def _ridge(dim: int) -> PenaltyMatrix:
    return PenaltyMatrix(matrix=np.eye(dim), rank=dim, null_dim=0, root=np.eye(dim))


def build_design(ped: PedDataset, spec: ModelSpec) -> Design:
    """Assemble the design matrix and penalty list for a model on a PED.

    Raises if the stacked matrix of design columns and penalty roots is
    column-rank deficient, i.e. when some coefficient direction is constrained
    neither by the data nor by any penalty (for example an uncentered smooth
    next to an intercept).
    """
    t = ped.t_rep
    groups = ped.groups
    covs = ped.covariate_columns
    levels = ped.schema.group_levels

    built: list[BuiltTerm] = []
    blocks: list[np.ndarray] = []
    penalties: list[Penalty] = []
    col_labels: list[str] = []
    intercept_col: int | None = None
    start = 0

    for term in spec.terms:
        kind = _TERM_KINDS[type(term)]
        if kind == "intercept":
            bt = BuiltTerm(label="(intercept)", kind=kind, start=start, stop=start + 1,
                           col_labels=("(intercept)",))
            intercept_col = start
            term_pens: list[tuple[str, PenaltyMatrix]] = []
        elif kind == "linear":
            _check_covariate(term.var, ped.schema)
            bt = BuiltTerm(label=term.var, kind=kind, start=start, stop=start + 1,
                           var=term.var, col_labels=(term.var,))
            term_pens = []
        elif kind == "factor":
            ref = term.reference if term.reference is not None else levels[0]
            if ref not in levels:
                raise ConfigError(f"reference level {ref!r} not among group levels {levels}")
            labels = tuple(f"group[{lev}]" for lev in levels if lev != ref)
            bt = BuiltTerm(label="factor(group)", kind=kind, start=start,
                           stop=start + len(levels) - 1, levels=levels, reference=ref,
                           col_labels=labels)
            term_pens = []
        elif kind == "smooth":
            knots = _time_knots(term, t, ped.cuts)
            tb = smooth_term(t, knots, diff_order=term.diff_order, centered=True)
            bt = BuiltTerm(label="s(t)", kind=kind, start=start, stop=start + knots.dim - 1,
                           knots=knots, diff_order=term.diff_order,
                           center_means=np.asarray(tb.center_means),
                           col_labels=tuple(f"s(t):{c}" for c in tb.col_labels))
            term_pens = list(tb.penalties)
        elif kind == "vc":
            _check_covariate(term.by, ped.schema)
            knots = _time_knots(term, t, ped.cuts)
            pen = difference_penalty(knots.dim, term.diff_order)
            bt = BuiltTerm(label=f"vc({term.by})", kind=kind, start=start, stop=start + knots.dim,
                           var=term.by, knots=knots, diff_order=term.diff_order,
                           col_labels=tuple(f"vc({term.by}):b{d}" for d in range(knots.dim)))
            term_pens = [("diff", pen)]
        elif kind == "ranef":
            bt = BuiltTerm(label="ranef(group)", kind=kind, start=start, stop=start + len(levels),
                           levels=levels,
                           col_labels=tuple(f"ranef[{lev}]" for lev in levels))
            term_pens = [("ridge", _ridge(len(levels)))]
        elif kind == "ranslope":
            _check_covariate(term.by, ped.schema)
            bt = BuiltTerm(label=f"ranslope({term.by})", kind=kind, start=start,
                           stop=start + len(levels), var=term.by, levels=levels,
                           col_labels=tuple(f"ranslope({term.by})[{lev}]" for lev in levels))
            term_pens = [("ridge", _ridge(len(levels)))]
        elif kind == "fre":
            _check_covariate(term.by, ped.schema)
            knots = _time_knots(term, t, ped.cuts)
            tb = fre_term(groups, levels, t, covs[term.by], knots, diff_order=term.diff_order)
            bt = BuiltTerm(label=f"fre({term.by})", kind=kind, start=start,
                           stop=start + len(levels) * knots.dim, var=term.by, knots=knots,
                           diff_order=term.diff_order, levels=levels,
                           col_labels=tuple(f"fre({term.by}):{c}" for c in tb.col_labels))
            term_pens = list(tb.penalties)
        else:  # pragma: no cover
            raise ConfigError(f"unknown term kind {kind!r}")

        block = bt.evaluate(t, groups, covs)
        if block.shape[1] != bt.stop - bt.start:
            raise RuntimeError("term width mismatch")
        blocks.append(block)
        col_labels.extend(bt.col_labels)
        for pen_label, pen in term_pens:
            penalties.append(
                Penalty(label=f"{bt.label}:{pen_label}", term_label=bt.label,
                        start=bt.start, stop=bt.stop, matrix=pen.matrix, root=pen.root)
            )
        built.append(bt)
        start = bt.stop

    X = np.hstack(blocks)
    design = Design(
        X=X,
        offset=ped.offset,
        y=ped.delta.astype(float),
        penalties=penalties,
        terms=built,
        col_labels=tuple(col_labels),
        intercept_col=intercept_col,
    )
    _check_identifiable(design)
    return design


def _check_identifiable(design: Design) -> None:
    # stack the design on top of every penalty root: a direction that is null
    # for the data and for all penalties makes the penalized problem singular
    p = design.n_cols
    rows = [design.X]
    for pen in design.penalties:
        emb = np.zeros((pen.root.shape[0], p))
        emb[:, pen.start : pen.stop] = pen.root
        rows.append(emb)
    stacked = np.vstack(rows)
    sv = np.linalg.svd(stacked, compute_uv=False)
    if sv[0] == 0 or sv[-1] < RANK_TOL * sv[0]:
        raise NumericError(
            "design is not identifiable: singular value ratio "
            f"{sv[-1] / sv[0] if sv[0] else 0.0:.2e} below {RANK_TOL:.0e} "
            "(e.g. an uncentered smooth next to an intercept, or duplicated columns)"
        )


# -------------------------------------------------------------------- pirls


@dataclass
class PirlsResult:
    beta: np.ndarray
    w: np.ndarray
    xtwx: np.ndarray
    hessian: np.ndarray
    loglik: float
    pen_deviance: float
    grad_max: float
    n_iter: int
    converged: bool
    fallback_last: bool
    deviance_trace: list[float] = field(default_factory=list)


def _poisson_loglik(y: np.ndarray, full_eta: np.ndarray) -> float:
    # sum of y*log(mu) - mu for mu = exp(full_eta); log(y!) = 0 for y in {0,1}
    return float(np.sum(y * full_eta - np.exp(full_eta)))


def _solve_sym(H: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve H x = rhs for symmetric positive definite H, with a pivoted fallback."""
    try:
        c, low = sla.cho_factor(H, lower=True, check_finite=False)
        return sla.cho_solve((c, low), rhs, check_finite=False), False
    except np.linalg.LinAlgError:
        pass
    except sla.LinAlgError:
        pass
    try:
        lu, piv = sla.lu_factor(H, check_finite=False)
        return sla.lu_solve((lu, piv), rhs, check_finite=False), True
    except (np.linalg.LinAlgError, sla.LinAlgError) as e:
        raise NumericError(f"penalized system is singular: {e}") from None


def pirls(
    design: Design,
    lambdas: Sequence[float],
    beta0: np.ndarray | None = None,
    max_iter: int = 200,
    max_halvings: int = 50,
    rtol: float = 1e-9,
    gtol: float = 1e-7,
) -> PirlsResult:
    """Penalized iteratively reweighted least squares for the Poisson PED model.

    Newton steps on the penalized log-likelihood with step halving, so the
    penalized deviance is non-increasing.  Stops at a relative penalized
    deviance change below rtol or a penalized score max-norm below gtol.
    """
    X = design.X
    y = design.y
    off = design.offset
    n, p = X.shape
    S = design.s_lambda(lambdas)

    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float).copy()
        if beta.shape != (p,):
            raise ValueError("beta0 has wrong shape")
    else:
        beta = np.zeros(p)
        if design.intercept_col is not None:
            exposure = np.exp(off)
            beta[design.intercept_col] = math.log((y.sum() + 0.5) / exposure.sum())

    ll_sat = -float(y.sum())  # saturated log-likelihood for 0/1 responses

    def penalized_deviance(b):
        full_eta = np.clip(X @ b + off, -300.0, 300.0)
        ll = _poisson_loglik(y, full_eta)
        return 2.0 * (ll_sat - ll) + float(b @ S @ b), ll, full_eta

    pdev, ll, full_eta = penalized_deviance(beta)
    trace = [pdev]
    grad_max = np.inf
    converged = False
    fallback_last = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        mu = np.exp(full_eta)
        grad = X.T @ (y - mu) - S @ beta
        grad_max = float(np.abs(grad).max()) if p else 0.0
        if grad_max < gtol:
            converged = True
            break

        xtwx = (X * mu[:, None]).T @ X
        H = xtwx + S
        rhs = X.T @ (mu * (full_eta - off) + y - mu)
        beta_new, fallback_last = _solve_sym(H, rhs)

        step = 1.0
        direction = beta_new - beta
        accepted = False
        for _ in range(max_halvings + 1):
            cand = beta + step * direction
            pdev_new, ll_new, eta_new = penalized_deviance(cand)
            if np.isfinite(pdev_new) and pdev_new <= pdev * (1 + 1e-12) + 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # stalled; convergence decided by the criteria below

        rel_change = abs(pdev - pdev_new) / max(abs(pdev_new), 1e-10)
        beta, pdev, ll, full_eta = cand, pdev_new, ll_new, eta_new
        trace.append(pdev)
        if rel_change < rtol:
            converged = True
            break

    mu = np.exp(full_eta)
    grad = X.T @ (y - mu) - S @ beta
    grad_max = float(np.abs(grad).max()) if p else 0.0
    if grad_max < gtol:
        converged = True
    xtwx = (X * mu[:, None]).T @ X
    if converged and fallback_last:
        raise NumericError(
            "penalized Hessian is not positive definite at convergence"
        )
    return PirlsResult(
        beta=beta,
        w=mu,
        xtwx=xtwx,
        hessian=xtwx + S,
        loglik=ll,
        pen_deviance=pdev,
        grad_max=grad_max,
        n_iter=n_iter,
        converged=converged,
        fallback_last=fallback_last,
        deviance_trace=trace,
    )


# --------------------------------------------------------------------- reml


def _log_pdet_s_lambda(design: Design, lambdas: np.ndarray) -> tuple[float, int]:
    """log-pseudo-determinant of the combined penalty and its null dimension.

    Computed block by block: penalties sharing a column range are combined
    within the block, separate ranges contribute independently.  Ranks come
    from the unscaled penalty matrices, so the kept/dropped eigenvalue split
    is structural and the result stays smooth in lambda even when the
    lambdas differ by many orders of magnitude (a single eigendecomposition
    of the summed penalty loses the small-lambda directions there).
    """
    groups: dict[tuple[int, int], list[int]] = {}
    for idx, pen in enumerate(design.penalties):
        groups.setdefault((pen.start, pen.stop), []).append(idx)
    logdet = 0.0
    n_null = 0
    for (start, stop), idxs in groups.items():
        q = stop - start
        if len(idxs) == 1:
            lam = float(lambdas[idxs[0]])
            eigs = np.linalg.eigvalsh(design.penalties[idxs[0]].matrix)
            top = eigs[-1]
            kept = eigs[eigs > EIG_DROP * top] if top > 0 else eigs[:0]
            if lam > 0 and kept.size:
                logdet += kept.size * math.log(lam) + float(np.log(kept).sum())
                n_null += q - kept.size
            else:
                n_null += q
            continue
        is_ident = [np.array_equal(design.penalties[i].matrix, np.eye(q)) for i in idxs]
        if len(idxs) == 2 and any(is_ident):
            # smooth-plus-ridge pair: both diagonalize in the smooth's eigenbasis
            i_id = idxs[is_ident.index(True)]
            i_sm = idxs[1] if i_id == idxs[0] else idxs[0]
            eigs = np.clip(np.linalg.eigvalsh(design.penalties[i_sm].matrix), 0.0, None)
            vals = float(lambdas[i_sm]) * eigs + float(lambdas[i_id])
            pos = vals[vals > 0]
            logdet += float(np.log(pos).sum())
            n_null += q - pos.size
            continue
        # generic overlapping penalties: summed block with a relative cutoff
        S_b = np.zeros((q, q))
        for i in idxs:
            S_b += float(lambdas[i]) * design.penalties[i].matrix
        eigs = np.linalg.eigvalsh(S_b)
        top = eigs[-1]
        kept = eigs[eigs > EIG_DROP * top] if top > 0 else eigs[:0]
        logdet += float(np.log(kept).sum()) if kept.size else 0.0
        n_null += q - kept.size
    return logdet, n_null


def reml_criterion(
    design: Design,
    lambdas: Sequence[float],
    result: PirlsResult | None = None,
    beta0: np.ndarray | None = None,
) -> tuple[float, PirlsResult]:
    """Laplace-approximate restricted likelihood at the given smoothing parameters.

    l_r = l(beta) - 0.5 beta'S beta + 0.5 log|S|_+ - 0.5 log|X'WX + S|
          + (M_p / 2) log(2 pi)

    Both determinants run over the penalized columns only; |.|_+ drops the
    structural null space of the combined penalty, and M_p counts the
    dropped directions.
    """
    if result is None:
        result = pirls(design, lambdas, beta0=beta0)
    S = design.s_lambda(lambdas)
    beta = result.beta
    value = result.loglik - 0.5 * float(beta @ S @ beta)

    pcols = design.penalized_cols
    if pcols.size:
        lam_vec = np.asarray(lambdas, dtype=float)
        logdet_s, m_null = _log_pdet_s_lambda(design, lam_vec)
        value += 0.5 * logdet_s

        H_p = (result.xtwx + S)[np.ix_(pcols, pcols)]
        sign, logdet = np.linalg.slogdet(H_p)
        if sign <= 0:
            raise NumericError("penalized information matrix is not positive definite")
        value -= 0.5 * logdet
        value += 0.5 * m_null * math.log(2.0 * math.pi)
    return value, result


@dataclass
class SmoothingResult:
    lambdas: np.ndarray
    reml: float
    result: PirlsResult
    n_eval: int
    converged: bool
    grid_best: float


def optimize_smoothing(
    design: Design,
    grid: Sequence[float] = (1e-3, 1.0, 1e3),
    xatol: float = 1e-4,
    maxiter: int | None = None,
) -> SmoothingResult:
    """Select smoothing parameters by maximizing the restricted likelihood.

    The criterion is evaluated on a coarse grid (all combinations of `grid`
    per parameter); a Nelder-Mead search on log(lambda) starts from the best
    grid point.  Coefficient estimates are warm-started between evaluations.
    """
    k = len(design.penalties)
    if k == 0:
        res = pirls(design, [])
        return SmoothingResult(lambdas=np.zeros(0), reml=reml_criterion(design, [], res)[0],
                               result=res, n_eval=1, converged=res.converged, grid_best=-np.inf)

    state = {"beta": None, "n_eval": 0, "best": (-np.inf, None, None),
             "sig_best": -np.inf, "sig_idx": 0}

    def evaluate(log_lam: np.ndarray) -> float:
        raw = np.asarray(log_lam, dtype=float)
        clipped = np.clip(raw, -LOG_LAMBDA_BOUND, LOG_LAMBDA_BOUND)
        out_of_box = float(np.sum((raw - clipped) ** 2))
        lam = np.exp(clipped)
        state["n_eval"] += 1
        try:
            value, res = reml_criterion(design, lam, beta0=state["beta"])
        except NumericError:
            return np.inf
        if not np.isfinite(value):
            return np.inf
        state["beta"] = res.beta
        if value > state["best"][0]:
            state["best"] = (value, lam, res)
        # significant-improvement tracker; criterion noise near a flat
        # optimum is far below this threshold
        if value > state["sig_best"] + 1e-6:
            state["sig_best"] = value
            state["sig_idx"] = state["n_eval"]
        return -value + 1e-4 * out_of_box

    log_grid = [math.log(g) for g in grid]
    grid_best = -np.inf
    x0 = np.full(k, log_grid[len(log_grid) // 2])
    for combo in itertools.product(log_grid, repeat=k):
        val = -evaluate(np.array(combo))
        if val > grid_best:
            grid_best = val
            x0 = np.array(combo)

    # on a flat stretch of the criterion Nelder-Mead can wander without
    # collapsing the simplex; stop once the best value stops moving
    patience = 60 * k

    def stagnated(_xk) -> None:
        if state["n_eval"] - state["sig_idx"] > patience:
            raise StopIteration

    simplex = np.vstack([x0] + [x0 + 2.0 * np.eye(k)[i] for i in range(k)])
    opt = minimize(
        evaluate,
        x0,
        method="Nelder-Mead",
        callback=stagnated,
        options={
            "xatol": xatol,
            "fatol": 1e-2,
            "maxiter": maxiter if maxiter is not None else 400 * k,
            "initial_simplex": simplex,
        },
    )

    best_val, best_lam, best_res = state["best"]
    if best_lam is None:
        raise NumericError("smoothing selection failed: criterion undefined everywhere")
    stalled = state["n_eval"] - state["sig_idx"] > patience
    return SmoothingResult(
        lambdas=np.asarray(best_lam),
        reml=best_val,
        result=best_res,
        n_eval=state["n_eval"],
        converged=(bool(opt.success) or stalled) and best_res.converged,
        grid_best=grid_best,
    )


# ------------------------------------------------------------- fitted model


@dataclass
class FittedModel:
    spec: ModelSpec
    cuts: CutPoints
    schema: PedSchema
    terms: list[BuiltTerm]
    col_labels: tuple[str, ...]
    beta: np.ndarray
    lambdas: np.ndarray
    lambda_labels: tuple[str, ...]
    V: np.ndarray
    edf_total: float
    edf_per_term: dict[str, float]
    loglik: float
    reml: float
    converged: bool
    diagnostics: dict

    # ---- linear predictor machinery

    def _eval_design(self, t: np.ndarray, groups: np.ndarray, covs: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.hstack([bt.evaluate(t, groups, covs) for bt in self.terms])

    def linear_predictor(self, ped: PedDataset) -> np.ndarray:
        """eta for every PED row (no offset)."""
        X = self._eval_design(ped.t_rep, ped.groups, ped.covariate_columns)
        return X @ self.beta

    def _t_rep_of(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kappas = self.cuts.as_array()
        times = np.asarray(times, dtype=float)
        if np.any(times <= 0) or np.any(times > kappas[-1]):
            raise ValueError(f"times must lie in (0, {kappas[-1]}]")
        idx = np.searchsorted(kappas, times, side="left")  # containing interval
        if self.spec.t_convention == "end":
            t_rep = kappas[idx]
        else:
            t_rep = 0.5 * (kappas[idx - 1] + kappas[idx])
        return idx, t_rep

    def _interval_hazards(self, covariates: Mapping[str, float], group: str) -> np.ndarray:
        """Hazard in every interval for one covariate profile."""
        kappas = self.cuts.as_array()
        J = len(kappas) - 1
        if self.spec.t_convention == "end":
            t_rep = kappas[1:]
        else:
            t_rep = 0.5 * (kappas[:-1] + kappas[1:])
        groups = np.array([group] * J, dtype=object)
        covs = {k: np.full(J, float(v)) for k, v in covariates.items()}
        X = self._eval_design(t_rep, groups, covs)
        return np.exp(X @ self.beta)


def _edf_diag(V: np.ndarray, S: np.ndarray) -> np.ndarray:
    # diag of (X'WX + S)^-1 X'WX = I - V S
    return 1.0 - np.einsum("ij,ji->i", V, S)


def _finalize(design: Design, spec: ModelSpec, ped: PedDataset, lambdas: np.ndarray,
              result: PirlsResult, reml_value: float, converged: bool,
              diagnostics: dict) -> FittedModel:
    S = design.s_lambda(lambdas)
    H = result.xtwx + S
    try:
        c, low = sla.cho_factor(H, lower=True, check_finite=False)
        V = sla.cho_solve((c, low), np.eye(design.n_cols), check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError) as e:
        raise NumericError(f"penalized information matrix not positive definite: {e}") from None
    edf = _edf_diag(V, S)
    edf_per_term = {bt.label: float(edf[bt.start : bt.stop].sum()) for bt in design.terms}
    return FittedModel(
        spec=spec,
        cuts=ped.cuts,
        schema=ped.schema,
        terms=design.terms,
        col_labels=design.col_labels,
        beta=result.beta,
        lambdas=np.asarray(lambdas, dtype=float),
        lambda_labels=tuple(p.label for p in design.penalties),
        V=V,
        edf_total=float(edf.sum()),
        edf_per_term=edf_per_term,
        loglik=result.loglik,
        reml=reml_value,
        converged=converged,
        diagnostics=diagnostics,
    )


def fit(ped: PedDataset, spec: ModelSpec, lambdas: Sequence[float] | None = None) -> FittedModel:
    """Fit a model on a PED; smoothing parameters are selected unless given."""
    design = build_design(ped, spec)
    if lambdas is not None:
        lambdas = np.asarray(lambdas, dtype=float)
        result = pirls(design, lambdas)
        reml_value, result = reml_criterion(design, lambdas, result=result)
        diagnostics = {"pirls_iter": result.n_iter, "grad_max": result.grad_max,
                       "outer_evals": 0, "fixed_lambda": True}
        return _finalize(design, spec, ped, lambdas, result, reml_value, result.converged, diagnostics)

    sel = optimize_smoothing(design)
    diagnostics = {"pirls_iter": sel.result.n_iter, "grad_max": sel.result.grad_max,
                   "outer_evals": sel.n_eval, "fixed_lambda": False,
                   "reml_grid_best": sel.grid_best}
    return _finalize(design, spec, ped, sel.lambdas, sel.result, sel.reml, sel.converged, diagnostics)


# -------------------------------------------------------------- predictions


def predict_hazard(model: FittedModel, covariates: Mapping[str, float], group: str,
                   times: Sequence[float]) -> np.ndarray:
    """Hazard at the given times for one covariate profile.

    Each time is evaluated at the representative time point of its interval,
    so the hazard is a step function.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    _, t_rep = model._t_rep_of(times)
    groups = np.array([group] * len(times), dtype=object)
    covs = {k: np.full(len(times), float(v)) for k, v in covariates.items()}
    X = model._eval_design(t_rep, groups, covs)
    return np.exp(X @ model.beta)


def cumulative_hazard(model: FittedModel, covariates: Mapping[str, float], group: str,
                      times: Sequence[float]) -> np.ndarray:
    """Piecewise-linear cumulative hazard at the given times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    idx, _ = model._t_rep_of(times)
    kappas = model.cuts.as_array()
    haz = model._interval_hazards(covariates, group)
    widths = np.diff(kappas)
    cum = np.r_[0.0, np.cumsum(haz * widths)]
    return cum[idx - 1] + haz[idx - 1] * (times - kappas[idx - 1])


def survival_prob(model: FittedModel, covariates: Mapping[str, float], group: str,
                  times: Sequence[float]) -> np.ndarray:
    return np.exp(-cumulative_hazard(model, covariates, group, times))


def coefficient_table(model: FittedModel) -> list[dict]:
    """Wald summaries for the intercept, linear and factor columns."""
    from scipy.special import erfc

    rows = []
    se_all = np.sqrt(np.diag(model.V))
    for bt in model.terms:
        if bt.kind not in ("intercept", "linear", "factor"):
            continue
        for j in range(bt.start, bt.stop):
            est = float(model.beta[j])
            se = float(se_all[j])
            z = est / se if se > 0 else math.inf
            p = float(erfc(abs(z) / math.sqrt(2.0)))
            rows.append({"term": model.col_labels[j], "estimate": est, "se": se, "z": z, "p": p})
    return rows


# ------------------------------------------------------------ serialization


def _knots_to_dict(kv: KnotVector | None):
    if kv is None:
        return None
    return {"degree": kv.degree, "interior": list(kv.interior), "boundary": list(kv.boundary)}


def _knots_from_dict(d):
    if d is None:
        return None
    return KnotVector(degree=d["degree"], interior=tuple(d["interior"]),
                      boundary=tuple(d["boundary"]))


def model_to_json(model: FittedModel) -> str:
    terms = [
        {
            "label": bt.label,
            "kind": bt.kind,
            "start": bt.start,
            "stop": bt.stop,
            "var": bt.var,
            "knots": _knots_to_dict(bt.knots),
            "diff_order": bt.diff_order,
            "center_means": None if bt.center_means is None else list(map(float, bt.center_means)),
            "levels": None if bt.levels is None else list(bt.levels),
            "reference": bt.reference,
            "col_labels": list(bt.col_labels),
        }
        for bt in model.terms
    ]
    doc = {
        "format": "pamm-model",
        "spec": model.spec.to_dict(),
        "cuts": list(model.cuts.kappas),
        "schema": {"covariates": list(model.schema.covariates),
                   "group_levels": list(model.schema.group_levels)},
        "terms": terms,
        "col_labels": list(model.col_labels),
        "beta": [float(b) for b in model.beta],
        "lambdas": [float(l) for l in model.lambdas],
        "lambda_labels": list(model.lambda_labels),
        "V": [[float(v) for v in row] for row in model.V],
        "edf_total": model.edf_total,
        "edf_per_term": model.edf_per_term,
        "loglik": model.loglik,
        "reml": model.reml,
        "converged": model.converged,
        "diagnostics": model.diagnostics,
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> FittedModel:
    try:
        doc = json.loads(text)
        if doc.get("format") != "pamm-model":
            raise ConfigError("not a model document")
        terms = [
            BuiltTerm(
                label=td["label"],
                kind=td["kind"],
                start=td["start"],
                stop=td["stop"],
                var=td["var"],
                knots=_knots_from_dict(td["knots"]),
                diff_order=td["diff_order"],
                center_means=None if td["center_means"] is None else np.asarray(td["center_means"]),
                levels=None if td["levels"] is None else tuple(td["levels"]),
                reference=td["reference"],
                col_labels=tuple(td["col_labels"]),
            )
            for td in doc["terms"]
        ]
        return FittedModel(
            spec=ModelSpec.from_dict(doc["spec"]),
            cuts=CutPoints(tuple(doc["cuts"])),
            schema=PedSchema(covariates=tuple(doc["schema"]["covariates"]),
                             group_levels=tuple(doc["schema"]["group_levels"])),
            terms=terms,
            col_labels=tuple(doc["col_labels"]),
            beta=np.asarray(doc["beta"], dtype=float),
            lambdas=np.asarray(doc["lambdas"], dtype=float),
            lambda_labels=tuple(doc["lambda_labels"]),
            V=np.asarray(doc["V"], dtype=float),
            edf_total=float(doc["edf_total"]),
            edf_per_term={k: float(v) for k, v in doc["edf_per_term"].items()},
            loglik=float(doc["loglik"]),
            reml=float(doc["reml"]),
            converged=bool(doc["converged"]),
            diagnostics=doc["diagnostics"],
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad model document: {e}") from None

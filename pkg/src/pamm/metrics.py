"""Model evaluation: likelihood, AIC, Kaplan-Meier and censoring-weighted Brier scores."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fit import FittedModel
from .ped import PedDataset, SurvivalRecord

__all__ = [
    "StepFunction",
    "kaplan_meier",
    "model_loglik",
    "survival_loglik",
    "aic",
    "survival_matrix",
    "brier_score",
    "integrated_brier_score",
    "FitReport",
    "fit_report",
]


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with jumps at sorted times."""

    times: np.ndarray      # ascending jump locations
    values: np.ndarray     # value from each jump onward
    initial: float = 1.0

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        ext = np.r_[self.initial, self.values]
        return ext[idx]

    def left_limit(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        ext = np.r_[self.initial, self.values]
        return ext[idx]


def kaplan_meier(times: Sequence[float], events: Sequence[bool]) -> StepFunction:
    """Product-limit survival estimate; jumps only where events occur."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    if times.shape != events.shape or times.ndim != 1 or times.size == 0:
        raise ValueError("times and events must be equal-length nonempty vectors")
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    e_sorted = events[order]
    uniq, start = np.unique(t_sorted, return_index=True)
    n = times.size
    surv = []
    jump_t = []
    s = 1.0
    counts = np.diff(np.r_[start, n])
    at_risk = n - start
    for u, a, r, c in zip(uniq, start, at_risk, counts):
        d = int(e_sorted[a : a + c].sum())
        if d > 0:
            s *= 1.0 - d / r
            jump_t.append(u)
            surv.append(s)
    return StepFunction(times=np.asarray(jump_t), values=np.asarray(surv), initial=1.0)


def model_loglik(model: FittedModel, ped: PedDataset) -> float:
    """Poisson log-likelihood sum(delta * log(mu) - mu), mu = exp(eta + offset)."""
    full_eta = model.linear_predictor(ped) + ped.offset
    return float(np.sum(ped.delta * full_eta - np.exp(full_eta)))


def survival_loglik(model: FittedModel, ped: PedDataset) -> float:
    """Piecewise-exponential survival log-likelihood sum_i delta_i log lambda(t_i) - Lambda(t_i).

    Equals :func:`model_loglik` minus the data-only constant sum(delta * offset),
    the log-exposure of each event interval.
    """
    eta = model.linear_predictor(ped)
    lam = np.exp(eta)
    return float(np.sum(ped.delta * eta) - np.sum(lam * ped.exposure))


def aic(model: FittedModel) -> float:
    """-2 * loglik + 2 * total effective degrees of freedom."""
    return -2.0 * model.loglik + 2.0 * model.edf_total


# ----------------------------------------------------------- brier and ibs


def survival_matrix(model: FittedModel, records: Sequence[SurvivalRecord],
                    times: Sequence[float]) -> np.ndarray:
    """Predicted survival S(t | x_i) for every record (rows) and time (columns).

    Times may include 0 (survival 1); otherwise they must lie in the model's
    interval range.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    kappas = model.cuts.as_array()
    if np.any(times < 0) or np.any(times > kappas[-1]):
        raise ValueError(f"times must lie in [0, {kappas[-1]}]")
    n = len(records)
    J = len(kappas) - 1
    if model.spec.t_convention == "end":
        t_rep = kappas[1:]
    else:
        t_rep = 0.5 * (kappas[:-1] + kappas[1:])

    groups = np.repeat(np.array([r.group for r in records], dtype=object), J)
    t_all = np.tile(t_rep, n)
    covs = {
        name: np.repeat(np.array([r.covariates[name] for r in records], dtype=float), J)
        for name in model.schema.covariates
    }
    X = model._eval_design(t_all, groups, covs)
    haz = np.exp(X @ model.beta).reshape(n, J)
    cum = np.hstack([np.zeros((n, 1)), np.cumsum(haz * np.diff(kappas), axis=1)])

    idx = np.searchsorted(kappas, times, side="left")  # containing interval, 0 for t == 0
    H = np.empty((n, len(times)))
    for j, (t, k) in enumerate(zip(times, idx)):
        if k == 0:
            H[:, j] = 0.0
        else:
            H[:, j] = cum[:, k - 1] + haz[:, k - 1] * (t - kappas[k - 1])
    return np.exp(-H)


def _brier_terms(records, surv_col, t, g_cens):
    """Sum of weighted squared residuals at time t plus the dropped-subject count."""
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    total = 0.0
    dropped = 0
    g_at_t = float(g_cens(t))
    g_left = g_cens.left_limit(times)
    for i in range(len(records)):
        if times[i] <= t and events[i]:
            g = float(g_left[i])
            if g <= 0.0:
                dropped += 1
                continue
            total += surv_col[i] ** 2 / g
        elif times[i] > t:
            if g_at_t <= 0.0:
                dropped += 1
                continue
            total += (1.0 - surv_col[i]) ** 2 / g_at_t
    return total, dropped


def brier_score(model: FittedModel, records: Sequence[SurvivalRecord], t: float,
                g_cens: StepFunction | None = None) -> float:
    """Censoring-weighted squared prediction error at horizon t.

    Past events are weighted by the censoring survival just before their event
    time, survivors by the censoring survival at t.  Subjects whose weight
    denominator is zero are dropped (with a warning).
    """
    if g_cens is None:
        g_cens = censoring_distribution(records)
    if t == 0.0:
        return 0.0
    surv = survival_matrix(model, records, [t])[:, 0]
    total, dropped = _brier_terms(records, surv, t, g_cens)
    if dropped:
        warnings.warn(f"brier_score(t={t}): dropped {dropped} zero-weight subjects")
    return total / len(records)


def censoring_distribution(records: Sequence[SurvivalRecord]) -> StepFunction:
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    return kaplan_meier(times, ~events)


def integrated_brier_score(
    model: FittedModel,
    records: Sequence[SurvivalRecord],
    tau: float | None = None,
    grid_size: int = 200,
) -> float:
    """Trapezoid average of the Brier score over [0, tau].

    tau defaults to the largest observed event time.
    """
    times = np.array([r.time for r in records], dtype=float)
    events = np.array([r.event for r in records], dtype=bool)
    if tau is None:
        if not events.any():
            raise ValueError("no events: specify tau explicitly")
        tau = float(times[events].max())
    if tau <= 0:
        raise ValueError("tau must be positive")
    grid = np.linspace(0.0, tau, grid_size)
    g_cens = censoring_distribution(records)
    surv = survival_matrix(model, records, grid[1:])
    bs = np.zeros(grid_size)
    dropped_total = 0
    for j in range(1, grid_size):
        total, dropped = _brier_terms(records, surv[:, j - 1], grid[j], g_cens)
        bs[j] = total / len(records)
        dropped_total += dropped
    if dropped_total:
        warnings.warn(f"integrated_brier_score: dropped {dropped_total} zero-weight terms")
    return float(np.trapezoid(bs, grid) / tau)


# -------------------------------------------------------------- fit report


@dataclass(frozen=True)
class FitReport:
    label: str
    loglik: float
    edf: float
    aic: float
    ibs: float
    n_subjects: int
    n_events: int
    converged: bool

    def to_row(self) -> dict:
        return {
            "model": self.label,
            "loglik": self.loglik,
            "edf": self.edf,
            "aic": self.aic,
            "ibs": self.ibs,
            "n_subjects": self.n_subjects,
            "n_events": self.n_events,
            "converged": self.converged,
        }


def fit_report(model: FittedModel, ped: PedDataset, label: str = "model",
               tau: float | None = None, grid_size: int = 200) -> FitReport:
    """Evaluate a fitted model on a PED: likelihood, AIC and integrated Brier score.

    The subject-level data needed for the Brier score is reconstructed from
    the PED rows.
    """
    records = ped.to_records()
    ll = model_loglik(model, ped)
    a = -2.0 * ll + 2.0 * model.edf_total
    ibs = integrated_brier_score(model, records, tau=tau, grid_size=grid_size)
    return FitReport(
        label=label,
        loglik=ll,
        edf=model.edf_total,
        aic=a,
        ibs=ibs,
        n_subjects=len(records),
        n_events=int(sum(r.event for r in records)),
        converged=model.converged,
    )

"""
cox.py
Stratified Cox proportional-hazards regression with a ridge penalty.

The objective is the Breslow-tie partial log-likelihood minus lam/2 * ||beta||^2,
maximised by Newton steps with step halving. Strata share beta and keep their
own baseline hazard. Confidence intervals are Wald intervals from the inverse
of the penalised observed information.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from histoage.utils.errors import DataError, NoEventsError, NumericFailure

logger = logging.getLogger(__name__)

Z_975 = float(stats.norm.ppf(0.975))
MAX_HALVINGS = 40


def _as_arrays(times, events, X, strata):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not (len(times) == len(events) == len(X)):
        raise DataError(f"times {times.shape}, events {events.shape} and covariates {X.shape} do not line up")
    if (times < 0).any() or not np.isfinite(times).all():
        raise DataError("follow-up times must be finite and non-negative")
    strata = np.zeros(len(times), dtype=object) if strata is None else np.asarray(strata, dtype=object)
    if len(strata) != len(times):
        raise DataError(f"strata has {len(strata)} entries for {len(times)} subjects")
    return times, events, X, strata


def _stratum_terms(beta, times, events, X, with_hessian: bool = True):
    """Log partial likelihood, gradient and Hessian of one stratum (Breslow ties)."""
    p = X.shape[1]
    if not events.any():
        return 0.0, np.zeros(p), np.zeros((p, p))
    order = np.argsort(times, kind="mergesort")
    t, d, x = times[order], events[order], X[order]
    eta = x @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    # risk set of index i = every index from the first tie of t[i] onwards
    first = np.searchsorted(t, t, side="left")
    s0 = np.cumsum(w[::-1])[::-1][first]
    s1 = np.cumsum((w[:, None] * x)[::-1], axis=0)[::-1][first]
    loglik = float(np.sum(eta[d] - shift - np.log(s0[d])))
    mean_x = s1[d] / s0[d][:, None]
    grad = x[d].sum(axis=0) - mean_x.sum(axis=0)
    hessian = np.zeros((p, p))
    if with_hessian:
        s2 = np.cumsum((w[:, None, None] * x[:, :, None] * x[:, None, :])[::-1], axis=0)[::-1][first]
        hessian = -(s2[d] / s0[d][:, None, None]).sum(axis=0) + mean_x.T @ mean_x
    return loglik, grad, hessian


def _partial_terms(beta, times, events, X, strata, with_hessian: bool = True):
    p = X.shape[1]
    loglik, grad, hessian = 0.0, np.zeros(p), np.zeros((p, p))
    for stratum in sorted(set(strata.tolist()), key=str):
        rows = strata == stratum
        ll, g, h = _stratum_terms(beta, times[rows], events[rows], X[rows], with_hessian)
        loglik += ll
        grad += g
        hessian += h
    return loglik, grad, hessian


def cox_log_partial_likelihood(beta, times, events, X, strata=None) -> float:
    """Breslow-tie log partial likelihood, summed over strata."""
    times, events, X, strata = _as_arrays(times, events, X, strata)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if len(beta) != X.shape[1]:
        raise DataError(f"beta has {len(beta)} entries for {X.shape[1]} covariates")
    return _partial_terms(beta, times, events, X, strata, with_hessian=False)[0]


@dataclass
class CoxFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    lam: float
    iterations: int
    converged: bool
    baseline: dict = field(default_factory=dict)  # stratum -> DataFrame(t, cumhaz)
    max_followup: dict = field(default_factory=dict)

    @property
    def hazard_ratios(self) -> np.ndarray:
        return np.exp(self.coef)

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        return np.exp(self.coef - Z_975 * self.se), np.exp(self.coef + Z_975 * self.se)

    @property
    def strata(self) -> list:
        return list(self.baseline)

    def summary(self) -> pd.DataFrame:
        lo, hi = self.ci
        return pd.DataFrame({"covariate": self.names, "coef": self.coef, "se": self.se,
                             "hr": self.hazard_ratios, "ci_lo": lo, "ci_hi": hi})

    def risk_score(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.coef):
            raise DataError(f"profile has {X.shape[1]} covariates; the fit has {len(self.coef)}")
        return X @ self.coef


def breslow_baseline(times, events, X, beta, strata=None) -> dict:
    """
    Breslow cumulative baseline hazard per stratum: at each distinct event time
    the number of events divided by the summed exp(x'beta) of the risk set.
    """
    times, events, X, strata = _as_arrays(times, events, X, strata)
    beta = np.asarray(beta, dtype=np.float64)
    baselines = {}
    for stratum in sorted(set(strata.tolist()), key=str):
        rows = strata == stratum
        t, d = times[rows], events[rows]
        risk = np.exp(X[rows] @ beta)
        event_times = np.unique(t[d])
        if len(event_times) == 0:
            baselines[stratum] = pd.DataFrame({"t": [0.0], "cumhaz": [0.0]})
            continue
        order = np.argsort(t, kind="mergesort")
        t_sorted, risk_sorted = t[order], risk[order]
        at_risk = np.cumsum(risk_sorted[::-1])[::-1]
        denominators = at_risk[np.searchsorted(t_sorted, event_times, side="left")]
        counts = np.array([np.sum(d & (t == s)) for s in event_times], dtype=np.float64)
        baselines[stratum] = pd.DataFrame({"t": event_times, "cumhaz": np.cumsum(counts / denominators)})
    return baselines


def fit_cox(times, events, X, strata=None, names=None, lam: float = 0.1, max_iter: int = 100, tol: float = 1e-9) -> CoxFit:
    times, events, X, strata = _as_arrays(times, events, X, strata)
    p = X.shape[1]
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if len(names) != p:
        raise DataError(f"{len(names)} covariate names for {p} covariates")
    if not events.any():
        raise NoEventsError("survival data has no observed events; the Cox model is not identifiable")
    for stratum in sorted(set(strata.tolist()), key=str):
        if not events[strata == stratum].any():
            logger.warning(f"Cox stratum {stratum!r} has no events; its baseline hazard is zero")

    def objective(beta):
        return _partial_terms(beta, times, events, X, strata, with_hessian=False)[0] - 0.5 * lam * float(beta @ beta)

    beta = np.zeros(p)
    current = objective(beta)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        _, grad, hessian = _partial_terms(beta, times, events, X, strata)
        grad = grad - lam * beta
        information = -hessian + lam * np.eye(p)
        try:
            chol = np.linalg.cholesky(information)
        except np.linalg.LinAlgError:
            escalated = lam * 10 if lam > 0 else 1e-4
            logger.warning(f"Cox information matrix not positive definite; ridge penalty raised from {lam:g} to {escalated:g}")
            lam = escalated
            current = objective(beta)
            continue
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        scale = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = objective(beta + scale * step)
            if candidate >= current:
                break
            scale *= 0.5
        else:
            converged = float(np.max(np.abs(grad), initial=0.0)) < 1e-6
            break
        beta = beta + scale * step
        improvement = candidate - current
        current = candidate
        if np.max(np.abs(scale * step), initial=0.0) < 1e-10 or improvement < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"Cox Newton iteration stopped after {iterations} steps without converging")

    loglik, _, hessian = _partial_terms(beta, times, events, X, strata)
    information = -hessian + lam * np.eye(p)
    try:
        covariance = np.linalg.inv(information)
    except np.linalg.LinAlgError as e:
        raise NumericFailure(f"Cox information matrix is singular at the optimum: {e}") from e
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    if not (np.isfinite(beta).all() and np.isfinite(se).all()):
        raise NumericFailure("Cox fit produced non-finite coefficients or standard errors")

    fit = CoxFit(names=names, coef=beta, se=se, loglik=loglik, lam=lam, iterations=iterations,
                 converged=converged, baseline=breslow_baseline(times, events, X, beta, strata))
    fit.max_followup = {s: float(times[strata == s].max()) for s in fit.baseline}
    logger.info(f"COX FIT - {len(times)} subjects - {int(events.sum())} events - {iterations} iterations - loglik={loglik:.4f}")
    return fit


def _cumhaz_at(baseline: pd.DataFrame, grid: np.ndarray) -> np.ndarray:
    steps = np.searchsorted(baseline["t"].to_numpy(), grid, side="right")
    values = np.concatenate([[0.0], baseline["cumhaz"].to_numpy()])
    return np.where(grid > 0, values[steps], 0.0)


def survival_curve(fit: CoxFit, profile, grid, stratum=None) -> pd.DataFrame:
    """
    S(t | x) = exp(-Lambda0(t) * exp(x'beta)) on `grid` for one stratum (all
    strata when None). Points beyond the stratum's follow-up are flat-extended
    and flagged.
    """
    risk = float(np.exp(fit.risk_score(profile)[0]))
    grid = np.asarray(grid, dtype=np.float64)
    if (grid < 0).any():
        raise DataError("survival times must be non-negative")
    frames = []
    for name in ([stratum] if stratum is not None else fit.strata):
        if name not in fit.baseline:
            raise DataError(f"unknown stratum {name!r}; fit has {fit.strata}")
        beyond = grid > fit.max_followup.get(name, np.inf)
        if beyond.any():
            logger.warning(f"Survival curve for stratum {name!r} flat-extended beyond {fit.max_followup[name]:.2f} years")
        survival = np.exp(-_cumhaz_at(fit.baseline[name], grid) * risk)
        frames.append(pd.DataFrame({"stratum": name, "t": grid, "survival": survival, "extrapolated": beyond}))
    return pd.concat(frames, ignore_index=True)


def kaplan_meier(times, events) -> pd.DataFrame:
    """Product-limit estimate at each distinct event time (S(0) = 1 prepended)."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    event_times = np.unique(times[events])
    at_risk = np.array([np.sum(times >= t) for t in event_times], dtype=np.float64)
    deaths = np.array([np.sum(events & (times == t)) for t in event_times], dtype=np.float64)
    survival = np.cumprod(1.0 - deaths / at_risk) if len(event_times) else np.array([])
    return pd.DataFrame({"t": np.concatenate([[0.0], event_times]),
                         "at_risk": np.concatenate([[float(len(times))], at_risk]),
                         "events": np.concatenate([[0.0], deaths]),
                         "survival": np.concatenate([[1.0], survival])})


def survival_at(curve: pd.DataFrame, t: float) -> float:
    """Step-function lookup in a Kaplan-Meier frame."""
    idx = np.searchsorted(curve["t"].to_numpy(), t, side="right") - 1
    return float(curve["survival"].iloc[max(idx, 0)])

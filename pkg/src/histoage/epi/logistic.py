"""
logistic.py
Prevalent-disease classifiers: ridge-stabilised logistic regression fitted by
Newton/IRLS, scored by stratified k-fold accuracy at threshold 0.5.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit
from sklearn.model_selection import StratifiedKFold

from histoage.utils.errors import DataError

logger = logging.getLogger(__name__)


@dataclass
class LogisticFit:
    coef: np.ndarray  # intercept first when fitted with one
    fit_intercept: bool
    loglik: float
    objective: float
    iterations: int
    grad_norm: float
    converged: bool

    @property
    def intercept(self) -> float:
        return float(self.coef[0]) if self.fit_intercept else 0.0

    def design(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        return np.column_stack([np.ones(len(X)), X]) if self.fit_intercept else X

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.design(X) @ self.coef)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(int)


def log_likelihood(coef, X, y) -> float:
    eta = X @ coef
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logistic(X, y, ridge: float = 1e-6, fit_intercept: bool = True, max_iter: int = 100, tol: float = 1e-10) -> LogisticFit:
    """
    Maximise loglik - ridge/2 * ||beta||^2 (intercept unpenalised) by Newton
    steps with step halving. Non-convergence is reported, not raised.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError(f"logistic regression needs both classes; labels are all {classes[0] if len(classes) else 'missing'}")
    if not np.isin(classes, (0.0, 1.0)).all():
        raise DataError(f"labels must be 0/1, got {classes.tolist()}")

    design = np.column_stack([np.ones(len(X)), X]) if fit_intercept else X
    p = design.shape[1]
    penalty = np.full(p, ridge)
    if fit_intercept:
        penalty[0] = 0.0

    def objective(beta):
        return log_likelihood(beta, design, y) - 0.5 * float(np.sum(penalty * beta ** 2))

    beta = np.zeros(p)
    current = objective(beta)
    grad_norm = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mu = expit(design @ beta)
        grad = design.T @ (y - mu) - penalty * beta
        grad_norm = float(np.linalg.norm(grad))
        weights = mu * (1 - mu)
        information = design.T @ (design * weights[:, None]) + np.diag(penalty)
        try:
            step = np.linalg.solve(information, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(information, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(40):
            candidate = objective(beta + scale * step)
            if candidate >= current:
                break
            scale *= 0.5
        else:
            break
        beta = beta + scale * step
        improvement = candidate - current
        current = candidate
        if np.max(np.abs(scale * step)) < 1e-10 or (improvement < tol and grad_norm < 1e-6):
            converged = True
            break

    mu = expit(design @ beta)
    grad_norm = float(np.linalg.norm(design.T @ (y - mu) - penalty * beta))
    if not converged:
        converged = grad_norm < 1e-6
    if not converged:
        logger.warning(f"Logistic regression did not converge after {iterations} Newton steps (gradient norm {grad_norm:.3e})")
    return LogisticFit(coef=beta, fit_intercept=fit_intercept, loglik=log_likelihood(beta, design, y),
                       objective=current, iterations=iterations, grad_norm=grad_norm, converged=converged)


def accuracy(fit: LogisticFit, X, y, threshold: float = 0.5) -> float:
    return float(np.mean(fit.predict(X, threshold) == np.asarray(y)))


def cv_predict_proba(X, y, folds: int = 5, seed: int = 0, ridge: float = 1e-6, max_iter: int = 100) -> tuple[np.ndarray, int]:
    """Out-of-fold probabilities from stratified folds. Returns (probabilities, folds used)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(int)
    minority = int(min(np.sum(y == 0), np.sum(y == 1)))
    if minority < 2:
        raise DataError(f"only {minority} subjects in the minority class; cannot cross-validate")
    if minority < folds:
        logger.warning(f"Minority class has {minority} subjects; using {minority} folds instead of {folds}")
        folds = minority
    probabilities = np.empty(len(y))
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2 ** 32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for train, test in splitter.split(X, y):
            fit = fit_logistic(X[train], y[train], ridge=ridge, max_iter=max_iter)
            probabilities[test] = fit.predict_proba(X[test])
    return probabilities, folds


def fold_accuracy(probabilities, y, folds: int, seed: int = 0) -> float:
    """Mean over the stratified folds of the accuracy at threshold 0.5."""
    y = np.asarray(y).astype(int)
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2 ** 32))
    hits = (np.asarray(probabilities) >= 0.5).astype(int) == y
    return float(np.mean([hits[test].mean() for _, test in splitter.split(np.zeros(len(y)), y)]))


def cv_accuracy(X, y, folds: int = 5, seed: int = 0, ridge: float = 1e-6, max_iter: int = 100) -> float:
    probabilities, used = cv_predict_proba(X, y, folds, seed, ridge, max_iter)
    return fold_accuracy(probabilities, y, used, seed)

"""Sequentially thresholded ridge regression (the SINDy baseline)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .dynamics import Trajectory, integrate
from .errors import IntegrationDiverged, RankDeficient
from .library import (
    CoefficientMatrix,
    PolynomialLibrary,
    evaluate,
    finite_difference_derivatives,
    rhs_from_coefficients,
)

logger = logging.getLogger(__name__)

DIVERGED_MSE = 1e12


@dataclass(frozen=True)
class StlsqConfig:
    ridge_lambda: float = 1e-5
    threshold: float = 0.05
    max_sweeps: int = 10

    def __post_init__(self):
        if not (np.isfinite(self.ridge_lambda) and np.isfinite(self.threshold)):
            raise ValueError("ridge_lambda and threshold must be finite")
        if self.ridge_lambda < 0 or self.threshold < 0:
            raise ValueError("ridge_lambda and threshold must be >= 0")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


@dataclass(frozen=True)
class StlsqResult:
    coefficients: CoefficientMatrix
    sweeps_used: int
    support_history: list = field(default_factory=list)
    empty_states: tuple = ()

    @property
    def empty_model(self) -> bool:
        return bool(self.empty_states)


@dataclass(frozen=True)
class Reconstruction:
    mse: float
    diverged: bool
    predicted: np.ndarray = field(default=None, repr=False)


def ridge_solve(design, targets, lam: float) -> np.ndarray:
    """Solve min ||design @ A.T - targets||^2 + lam ||A||^2 for A (n_targets x P).

    Uses a Cholesky factorization of the normal equations. With ``lam == 0``
    a rank-deficient design raises RankDeficient instead of falling back to a
    pseudo-inverse.
    """
    design = np.asarray(design, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    p = design.shape[1]
    gram = design.T @ design
    if lam == 0 and np.linalg.matrix_rank(design) < p:
        raise RankDeficient("normal matrix is singular; use ridge_lambda > 0")
    gram[np.diag_indices(p)] += lam
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise RankDeficient("normal matrix is not positive definite; use ridge_lambda > 0") from exc
    return linalg.cho_solve(factor, design.T @ targets).T


def _library_points(traj: Trajectory, library: PolynomialLibrary) -> np.ndarray:
    if library.n_vars == traj.n_states:
        return traj.states
    if library.n_vars == traj.n_states + traj.n_inputs:
        return np.column_stack([traj.states, traj.inputs])
    raise ValueError(
        f"library has {library.n_vars} variables; trajectory has "
        f"{traj.n_states} states and {traj.n_inputs} inputs"
    )


def stlsq_fit(design, targets, config: StlsqConfig):
    """Core STLSQ loop on a prepared design matrix.

    Returns (coefficients n x P, sweeps used, list of per-sweep support masks).
    """
    targets = np.asarray(targets, dtype=float)
    n, p = targets.shape[1], design.shape[1]
    coef = np.zeros((n, p))
    active = np.ones((n, p), dtype=bool)
    history = []
    sweeps = 0
    for _ in range(config.max_sweeps):
        sweeps += 1
        for i in range(n):
            cols = np.flatnonzero(active[i])
            coef[i] = 0.0
            if cols.size:
                coef[i, cols] = ridge_solve(design[:, cols], targets[:, i], config.ridge_lambda)[0]
        keep = active & (np.abs(coef) >= config.threshold)
        coef[~keep] = 0.0
        history.append(keep.copy())
        if np.array_equal(keep, active):
            break
        active = keep
    # refit on the surviving support
    for i in range(n):
        cols = np.flatnonzero(active[i])
        coef[i] = 0.0
        if cols.size:
            coef[i, cols] = ridge_solve(design[:, cols], targets[:, i], config.ridge_lambda)[0]
    return coef, sweeps, history


def stlsq_recover(traj: Trajectory, library: PolynomialLibrary, config: StlsqConfig = None) -> StlsqResult:
    """Fit a sparse polynomial model to finite-difference derivatives of ``traj``."""
    config = config or StlsqConfig()
    design = evaluate(library, _library_points(traj, library))
    targets = finite_difference_derivatives(traj)
    coef, sweeps, history = stlsq_fit(design, targets, config)
    empty = tuple(int(i) for i in np.flatnonzero(~np.any(coef != 0, axis=1)))
    if empty:
        logger.warning("every coefficient was thresholded away for states %s", empty)
    return StlsqResult(CoefficientMatrix(library, coef), sweeps, history, empty)


def reconstruction_error(coeffs: CoefficientMatrix, traj: Trajectory, shifts=None) -> Reconstruction:
    """Integrate the recovered model from traj's first state over its grid and compare."""
    field_fn = rhs_from_coefficients(coeffs)
    inputs = traj.inputs if shifts is None else traj.inputs + np.asarray(shifts)
    try:
        pred = integrate(field_fn, traj.states[0], inputs, traj.h, traj.n_samples, traj.times[0])
    except IntegrationDiverged:
        return Reconstruction(DIVERGED_MSE, True)
    mse = float(np.mean((pred.states - traj.states) ** 2))
    if not np.isfinite(mse) or mse > DIVERGED_MSE:
        return Reconstruction(DIVERGED_MSE, True, pred.states)
    return Reconstruction(mse, False, pred.states)


def coefficient_mse(estimate: CoefficientMatrix, truth: CoefficientMatrix) -> float:
    return float(np.mean((estimate.values - truth.values) ** 2))


def support_scores(estimate: CoefficientMatrix, truth: CoefficientMatrix) -> tuple[float, float]:
    """(precision, recall) of the recovered nonzero pattern."""
    est, ref = estimate.support, truth.support
    hits = len(est & ref)
    precision = hits / len(est) if est else (1.0 if not ref else 0.0)
    recall = hits / len(ref) if ref else 1.0
    return precision, recall

"""L1-regularized least-squares solvers for block reconstruction.

The canonical objective is

    f(w) = 0.5 * ||x - Y w||_2^2 + beta * ||w||_1

with ``Y`` the (channels x n_atoms) gallery dictionary and ``x`` one
probe block.  The production solver is an active-set feature-sign
search; a cyclic coordinate-descent solver with soft thresholding is
provided as an independent cross-check and is only meant for tests.

Atoms are reordered into a canonical order (sorted by their raw bytes)
before any arithmetic, so a permutation of the dictionary columns
produces bit-identical objective values and residuals.  Coefficients
are scattered back to the caller's ordering.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError
from .feature_maps import BlockSet

DEFAULT_BETA = 0.4
DEFAULT_TOL_KKT = 1e-8
DEFAULT_MAX_ITERS = 1000


@dataclass(frozen=True)
class LassoProblem:
    """One reconstruction subproblem: dictionary (d x M), target (d,), beta."""

    dictionary: np.ndarray
    target: np.ndarray
    beta: float

    def __post_init__(self):
        Y = np.asarray(self.dictionary, dtype=np.float64)
        x = np.asarray(self.target, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] < 1:
            raise ValueError("dictionary must be a d x M matrix with M >= 1")
        if x.shape != (Y.shape[0],):
            raise ValueError("target length must match dictionary rows")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(x))):
            raise ValueError("dictionary and target must be finite")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        object.__setattr__(self, "dictionary", Y)
        object.__setattr__(self, "target", x)

    @property
    def n_atoms(self) -> int:
        return self.dictionary.shape[1]


@dataclass(frozen=True)
class SparseCode:
    """Solver output for one probe block."""

    coefficients: np.ndarray
    active_set: tuple[int, ...]
    objective: float
    iterations: int
    converged: bool
    residual_sq: float  # ||x - Y w||^2, evaluated in the canonical atom order


@dataclass(frozen=True)
class CodeMatrix:
    """One SparseCode per probe block; columns share the atom count M."""

    columns: tuple[SparseCode, ...]

    def __post_init__(self):
        sizes = {c.coefficients.shape[0] for c in self.columns}
        if len(sizes) > 1:
            raise ValueError("all columns must share the same atom count")

    @property
    def shape(self) -> tuple[int, int]:
        m = self.columns[0].coefficients.shape[0] if self.columns else 0
        return (m, len(self.columns))

    def matrix(self) -> np.ndarray:
        return np.stack([c.coefficients for c in self.columns], axis=1)


def objective(problem: LassoProblem, w: np.ndarray) -> float:
    """Evaluate 0.5*||x - Yw||^2 + beta*||w||_1."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (problem.n_atoms,):
        raise ValueError("coefficient length must match the atom count")
    r = problem.target - problem.dictionary @ w
    return 0.5 * float(r @ r) + problem.beta * float(np.abs(w).sum())


def kkt_residual(problem: LassoProblem, w: np.ndarray) -> float:
    """Maximum violation of the lasso optimality conditions at w.

    For active coordinates the stationarity residual is
    |(Y^T(Yw - x))_i + beta * sign(w_i)|; for inactive ones it is
    max(|(Y^T(Yw - x))_i| - beta, 0).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (problem.n_atoms,):
        raise ValueError("coefficient length must match the atom count")
    grad = problem.dictionary.T @ (problem.dictionary @ w - problem.target)
    active = w != 0.0
    viol = np.where(
        active,
        np.abs(grad + problem.beta * np.sign(w)),
        np.maximum(np.abs(grad) - problem.beta, 0.0),
    )
    return float(viol.max())


def soft_threshold(v: float, t: float) -> float:
    if v > t:
        return v - t
    if v < -t:
        return v + t
    return 0.0


def _canonical_order(Y: np.ndarray) -> list[int]:
    # Total order on the raw column bytes: permutation independent, and
    # bitwise-identical columns collapse to an arbitrary-but-harmless order.
    keys = [Y[:, j].tobytes() for j in range(Y.shape[1])]
    return sorted(range(Y.shape[1]), key=keys.__getitem__)


def _solve_spd(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # Dense symmetric solve with one refinement step; minimum-norm fallback
    # when the active Gram matrix is singular (duplicate atoms).
    try:
        w = np.linalg.solve(G, rhs)
        w = w + np.linalg.solve(G, rhs - G @ w)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(G, rhs, rcond=None)[0]
    if not np.all(np.isfinite(w)):
        w = np.linalg.lstsq(G, rhs, rcond=None)[0]
    return w


def _gram_objective(G, c, target_sq, w, beta) -> float:
    return float(0.5 * (w @ (G @ w)) + 0.5 * target_sq - c @ w + beta * np.abs(w).sum())


def _feature_sign_core(
    G: np.ndarray,
    c: np.ndarray,
    target_sq: float,
    beta: float,
    tol: float,
    max_iters: int,
) -> tuple[np.ndarray, int, bool]:
    """Feature-sign search on precomputed Gram/correlation data.

    Returns (w, iterations, converged).  Entering coordinates are chosen
    by largest gradient magnitude with lowest-index tie-breaking, which
    together with the caller's canonical atom order makes the trajectory
    deterministic.
    """
    m = G.shape[0]
    w = np.zeros(m)
    theta = np.zeros(m, dtype=np.int8)
    active: list[int] = []
    best_w = w.copy()
    best_obj = _gram_objective(G, c, target_sq, w, beta)
    iters = 0
    converged = False

    while iters < max_iters:
        iters += 1
        grad = G @ w - c
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient in feature-sign search")

        if active:
            act = np.asarray(active)
            nz_viol = float(np.max(np.abs(grad[act] + beta * theta[act])))
        else:
            nz_viol = 0.0

        if nz_viol <= tol:
            # Active set is stationary; look for a zero coefficient to enter.
            inactive = theta == 0
            if np.any(inactive):
                scores = np.where(inactive, np.abs(grad), -np.inf)
                cand = int(np.argmax(scores))  # first max: lowest index wins
                if scores[cand] > beta + tol:
                    theta[cand] = -1 if grad[cand] > 0 else 1
                    bisect.insort(active, cand)
                else:
                    converged = True
                    break
            else:
                converged = True
                break

        act = np.asarray(active)
        Gaa = G[np.ix_(act, act)]
        rhs = c[act] - beta * theta[act].astype(np.float64)
        w_new = _solve_spd(Gaa, rhs)
        w_old = w[act]

        def sub_obj(v: np.ndarray) -> float:
            return float(
                0.5 * (v @ (Gaa @ v)) - c[act] @ v + beta * np.abs(v).sum()
            )

        # Discrete line search over sign-flip crossings between w_old and w_new.
        best_cand = w_new
        best_cand_obj = sub_obj(w_new)
        flips = np.nonzero(np.sign(w_new) != theta[act])[0]
        for a in flips:
            denom = w_old[a] - w_new[a]
            if denom == 0.0:
                continue
            t = w_old[a] / denom
            if not (0.0 < t < 1.0):
                continue
            cand = w_old + t * (w_new - w_old)
            cand[a] = 0.0
            o = sub_obj(cand)
            if o < best_cand_obj:
                best_cand_obj = o
                best_cand = cand

        w[act] = best_cand
        zeroed = act[w[act] == 0.0]
        for z in zeroed.tolist():
            theta[z] = 0
            active.remove(z)
        keep = np.asarray(active, dtype=int)
        if keep.size:
            theta[keep] = np.sign(w[keep]).astype(np.int8)

        cur = best_cand_obj + 0.5 * target_sq
        if cur < best_obj:
            best_obj = cur
            best_w = w.copy()

    if not converged:
        # Best iterate seen, flagged so callers can surface a warning.
        return best_w, iters, False
    return w, iters, True


def _finish_code(
    Yc: np.ndarray,
    x: np.ndarray,
    order: Sequence[int],
    beta: float,
    w_c: np.ndarray,
    iters: int,
    converged: bool,
) -> SparseCode:
    r = x - Yc @ w_c
    residual_sq = float(r @ r)
    obj = 0.5 * residual_sq + beta * float(np.abs(w_c).sum())
    m = Yc.shape[1]
    w = np.zeros(m)
    for j, orig in enumerate(order):
        w[orig] = w_c[j]
    return SparseCode(
        coefficients=w,
        active_set=tuple(int(i) for i in np.nonzero(w)[0]),
        objective=obj,
        iterations=iters,
        converged=converged,
        residual_sq=residual_sq,
    )


def feature_sign_search(
    problem: LassoProblem,
    tol_kkt: float = DEFAULT_TOL_KKT,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> SparseCode:
    """Solve one lasso subproblem to KKT optimality within ``tol_kkt``."""
    order = _canonical_order(problem.dictionary)
    Yc = problem.dictionary[:, order]
    G = Yc.T @ Yc
    c = Yc.T @ problem.target
    target_sq = float(problem.target @ problem.target)
    w_c, iters, converged = _feature_sign_core(
        G, c, target_sq, problem.beta, tol_kkt, max_iters
    )
    return _finish_code(Yc, problem.target, order, problem.beta, w_c, iters, converged)


def coordinate_descent_oracle(
    problem: LassoProblem,
    tol: float = 1e-12,
    max_sweeps: int = 20000,
) -> SparseCode:
    """Cyclic coordinate descent with soft thresholding.

    Independent of the feature-sign path by construction; intended for
    tests and acceptance cross-checks, not production matching.
    """
    order = _canonical_order(problem.dictionary)
    Yc = problem.dictionary[:, order]
    G = Yc.T @ Yc
    c = Yc.T @ problem.target
    target_sq = float(problem.target @ problem.target)
    m = G.shape[0]
    diag = np.diag(G).copy()
    w = np.zeros(m)
    prev_obj = _gram_objective(G, c, target_sq, w, problem.beta)
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        for j in range(m):
            if diag[j] == 0.0:
                w[j] = 0.0
                continue
            rho = c[j] - G[j] @ w + diag[j] * w[j]
            w[j] = soft_threshold(float(rho), problem.beta) / diag[j]
        obj = _gram_objective(G, c, target_sq, w, problem.beta)
        if prev_obj - obj < tol:
            converged = True
            break
        prev_obj = obj
    return _finish_code(Yc, problem.target, order, problem.beta, w, sweeps, converged)


def solve_batch(
    gallery: BlockSet,
    probe: BlockSet,
    beta: float = DEFAULT_BETA,
    tol_kkt: float = DEFAULT_TOL_KKT,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> CodeMatrix:
    """Solve one lasso subproblem per probe block against the gallery.

    Columns are independent; the Gram matrix of the (canonically
    ordered) gallery is computed once and shared.
    """
    if len(gallery) == 0:
        raise ValueError("gallery has no blocks")
    if gallery.channels != probe.channels:
        raise ValueError(
            f"channel mismatch: probe {probe.channels}, gallery {gallery.channels}"
        )
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    Y = gallery.matrix()
    order = _canonical_order(Y)
    Yc = Y[:, order]
    G = Yc.T @ Yc
    cols = []
    for b in probe.blocks:
        x = b.vector.astype(np.float64)
        c = Yc.T @ x
        target_sq = float(x @ x)
        w_c, iters, converged = _feature_sign_core(
            G, c, target_sq, beta, tol_kkt, max_iters
        )
        cols.append(_finish_code(Yc, x, order, beta, w_c, iters, converged))
    return CodeMatrix(columns=tuple(cols))

"""
Regularized Logistic Regression (ERM) for the FedAUXfdp simulator

Objective for a C-class head B (C x d, bias in column 0) on rows x_i with targets Y:

    J(B) = (1/N) sum_i -sum_k Y[i,k] log softmax(B x_i)_k + (lam/2) ||B||^2

Hard labels are one-hot Y. The binary head is a single row b with sigmoid in place of
softmax. Every feature row must lie in the unit ball; the bias is regularized too.

Fitting is L-BFGS-B (memory 10) from zero, followed by a Newton-CG polish when L-BFGS
stops above the gradient tolerance. The polish solves H d = -g with conjugate gradients
on Hessian-vector products and accepts a step only when the gradient norm drops,
halving the step otherwise. Both stages are deterministic.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import expit, logsumexp, softmax

from services.datamodel import Dataset, FeatureVector, HeadParams, frozen_array
from services.errors import RejectedInputError


DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 1000
LBFGS_MEMORY = 10
LOG_PROB_FLOOR = np.log(1e-300)
UNIT_BALL_SLACK = 1e-12
LINEAR_HEAD_EPOCHS = 40
NEWTON_CG_RTOL = 1e-6
NEWTON_MAX_HALVINGS = 30

_SCORE_LOW = np.nextafter(0.0, 1.0)
_SCORE_HIGH = np.nextafter(1.0, 0.0)


@dataclass(frozen=True, eq=False)
class ErmProblem:
    """
    One regularized regression

    Attributes:
        features: N x d normalized rows, bias coordinate first
        targets: N x C target distributions (one-hot for hard labels); N-vector of
            {0, 1} for a binary problem
        lam: regularization strength lambda > 0
        class_count: C (2 for binary)
        binary: single-row sigmoid head instead of a C-row softmax head
    """

    features: np.ndarray
    targets: np.ndarray
    lam: float
    class_count: int
    binary: bool = False

    def __post_init__(self):
        X = frozen_array(self.features)
        T = frozen_array(self.targets)

        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] < 2:
            raise RejectedInputError(f"features must be a nonempty N x (p+1) matrix, got shape {X.shape}")
        if not (self.lam > 0) or not np.isfinite(self.lam):
            raise RejectedInputError(f"lambda must be positive, got {self.lam}")
        if self.class_count < 2:
            raise RejectedInputError(f"class_count must be >= 2, got {self.class_count}")

        worst = float(np.max(np.linalg.norm(X, axis=1)))
        if worst > 1.0 + UNIT_BALL_SLACK:
            raise RejectedInputError(f"feature rows must lie in the unit ball, found norm {worst!r}")

        expected = (X.shape[0],) if self.binary else (X.shape[0], self.class_count)
        if T.shape != expected:
            raise RejectedInputError(f"targets must have shape {expected}, got {T.shape}")

        object.__setattr__(self, 'features', X)
        object.__setattr__(self, 'targets', T)

    @classmethod
    def from_labels(
        cls,
        features: np.ndarray,
        labels: np.ndarray,
        lam: float,
        class_count: int
    ) -> 'ErmProblem':
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            raise RejectedInputError(f"labels must lie in [0, {class_count})")
        targets = np.zeros((labels.size, class_count))
        targets[np.arange(labels.size), labels] = 1.0
        return cls(features=features, targets=targets, lam=lam, class_count=class_count)

    @classmethod
    def from_dataset(cls, data: Dataset, lam: float, class_count: Optional[int] = None) -> 'ErmProblem':
        return cls.from_labels(data.features, data.labels, lam, class_count or data.class_count)

    @classmethod
    def binary_problem(cls, positives: np.ndarray, negatives: np.ndarray, lam: float) -> 'ErmProblem':
        positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
        negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
        if positives.shape[0] == 0 or negatives.shape[0] == 0:
            raise RejectedInputError("binary regression needs positives and negatives")
        features = np.vstack((positives, negatives))
        targets = np.concatenate((np.ones(positives.shape[0]), np.zeros(negatives.shape[0])))
        return cls(features=features, targets=targets, lam=lam, class_count=2, binary=True)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.features.shape[1])

    @property
    def head_shape(self):
        return (1 if self.binary else self.class_count, self.dimension)


@dataclass(frozen=True)
class FitResult:
    params: HeadParams
    final_gradient_norm: float
    iterations: int
    converged: bool
    tolerance: float = DEFAULT_TOLERANCE


# ============================================================================
# OBJECTIVE AND DERIVATIVES
# ============================================================================

def _as_matrix(params, problem: ErmProblem) -> np.ndarray:
    B = params.matrix if isinstance(params, HeadParams) else np.asarray(params, dtype=np.float64)
    B = B.reshape(problem.head_shape) if B.ndim == 1 else B
    if B.shape != problem.head_shape:
        raise RejectedInputError(f"params shape {B.shape} does not match problem head {problem.head_shape}")
    return B


def _value_and_grad(B: np.ndarray, problem: ErmProblem):
    X, T, lam = problem.features, problem.targets, problem.lam
    n = problem.size

    if problem.binary:
        z = X @ B[0]
        loss = np.sum(np.logaddexp(0.0, z) - T * z) / n
        grad = ((expit(z) - T) @ X / n)[None, :]
    else:
        Z = X @ B.T
        log_norm = logsumexp(Z, axis=1, keepdims=True)
        log_p = np.maximum(Z - log_norm, LOG_PROB_FLOOR)
        loss = -np.sum(T * log_p) / n
        grad = (np.exp(Z - log_norm) - T).T @ X / n

    return loss + 0.5 * lam * np.sum(B * B), grad + lam * B


def objective(params, problem: ErmProblem) -> float:
    """J(beta) with the mean over data and (lam/2)||beta||^2 outside it"""
    return float(_value_and_grad(_as_matrix(params, problem), problem)[0])


def gradient(params, problem: ErmProblem) -> np.ndarray:
    """
    Analytic gradient, shaped like the head

    Row k is mean_i (p_k(x_i) - Y[i,k]) x_i + lam * beta_k.
    """
    return _value_and_grad(_as_matrix(params, problem), problem)[1]


def hessian_vector_product(params, vector, problem: ErmProblem) -> np.ndarray:
    B = _as_matrix(params, problem)
    V = _as_matrix(vector, problem)
    X = problem.features
    n = problem.size

    if problem.binary:
        s = expit(X @ B[0])
        hv = ((s * (1.0 - s) * (X @ V[0])) @ X / n)[None, :]
    else:
        P = softmax(X @ B.T, axis=1)
        A = X @ V.T
        PA = P * A
        R = PA - P * PA.sum(axis=1, keepdims=True)
        hv = R.T @ X / n
    return hv + problem.lam * V


def example_loss_gradient(params: HeadParams, features: np.ndarray, label: int) -> np.ndarray:
    """Gradient of the unregularized log-softmax loss at one example (rows (p_k - [k == y]) x)"""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (params.dimension,):
        raise RejectedInputError(f"feature dimension {x.shape} does not match head {params.dimension}")
    p = softmax(params.matrix @ x)
    p[label] -= 1.0
    return np.outer(p, x)


# ============================================================================
# FITTING
# ============================================================================

def newton_polish(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    hessp_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    w: np.ndarray,
    tolerance: float,
    max_steps: int
) -> Tuple[np.ndarray, float, int]:
    """
    Newton-CG steps that drive the gradient norm down

    Each step solves H d = -g by conjugate gradients; d is a descent direction for
    ||g||^2, and the step is halved until the gradient norm drops. Stops at the
    tolerance, at the step cap, or when no halving helps.

    Returns:
        (w, gradient norm at w, steps taken)
    """
    grad = grad_fn(w)
    norm = float(np.linalg.norm(grad))
    steps = 0
    while norm > tolerance and steps < max_steps:
        hessian = LinearOperator(
            (w.size, w.size), matvec=lambda v, at=w: hessp_fn(at, v), dtype=np.float64
        )
        direction, _ = cg(hessian, -grad, rtol=NEWTON_CG_RTOL)
        steps += 1

        step = 1.0
        for _ in range(NEWTON_MAX_HALVINGS):
            trial = w + step * direction
            trial_grad = grad_fn(trial)
            trial_norm = float(np.linalg.norm(trial_grad))
            if trial_norm < norm:
                break
            step *= 0.5
        else:
            break
        w, grad, norm = trial, trial_grad, trial_norm
    return w, norm, steps


def fit(
    problem: ErmProblem,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS
) -> FitResult:
    """
    Minimize J from zero initialization

    Args:
        problem: Regression to solve
        tolerance: Gradient 2-norm at which the fit counts as converged
        max_iterations: Iteration cap shared by both stages

    Returns:
        FitResult; converged is False (never an exception) when the cap is hit
    """
    if not (tolerance > 0):
        raise RejectedInputError(f"tolerance must be positive, got {tolerance}")
    if max_iterations < 1:
        raise RejectedInputError(f"max_iterations must be >= 1, got {max_iterations}")

    shape = problem.head_shape
    size = shape[0] * shape[1]

    def fun(w):
        value, grad = _value_and_grad(w.reshape(shape), problem)
        return value, grad.ravel()

    result = minimize(
        fun,
        np.zeros(size),
        jac=True,
        method='L-BFGS-B',
        options={
            'maxcor': LBFGS_MEMORY,
            'ftol': 0.0,
            'gtol': tolerance / np.sqrt(size),
            'maxiter': max_iterations,
            'maxls': 50,
        },
    )
    w = result.x
    iterations = int(result.nit)
    grad_norm = float(np.linalg.norm(fun(w)[1]))

    if grad_norm > tolerance and iterations < max_iterations:
        w, grad_norm, steps = newton_polish(
            lambda v: fun(v)[1],
            lambda v, u: hessian_vector_product(v.reshape(shape), u.reshape(shape), problem).ravel(),
            w,
            tolerance,
            max_iterations - iterations,
        )
        iterations += steps

    return FitResult(
        params=HeadParams(w.reshape(shape)),
        final_gradient_norm=grad_norm,
        iterations=iterations,
        converged=grad_norm <= tolerance,
        tolerance=tolerance,
    )


def fit_binary(
    positives: np.ndarray,
    negatives: np.ndarray,
    lam: float,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS
) -> FitResult:
    """Single-row head separating positives (label 1) from negatives (label 0)"""
    return fit(ErmProblem.binary_problem(positives, negatives, lam), tolerance, max_iterations)


def train_linear_head_epochs(problem: ErmProblem, epochs: int = LINEAR_HEAD_EPOCHS) -> HeadParams:
    """
    Fixed number of full-batch gradient steps from zero (no convergence guarantee)

    The step is 1/L with L = 1/2 + lam, the gradient Lipschitz constant on the unit ball.
    """
    if epochs < 1:
        raise RejectedInputError(f"epochs must be >= 1, got {epochs}")
    step = 1.0 / (0.5 + problem.lam)
    B = np.zeros(problem.head_shape)
    for _ in range(epochs):
        B = B - step * _value_and_grad(B, problem)[1]
    return HeadParams(B)


# ============================================================================
# PREDICTION
# ============================================================================

def _rows(features, dimension: int) -> np.ndarray:
    values = features.values if isinstance(features, FeatureVector) else features
    X = np.asarray(values, dtype=np.float64)
    if X.shape[-1] != dimension or X.ndim not in (1, 2):
        raise RejectedInputError(f"features of shape {X.shape} do not match head dimension {dimension}")
    return X


def predict_proba(params: HeadParams, features) -> np.ndarray:
    """Softmax class distribution for one vector (length C) or each row of a matrix (N x C)"""
    X = _rows(features, params.dimension)
    if params.is_binary:
        s = score_binary(params, X)
        return np.stack((1.0 - s, s), axis=-1)
    return softmax(X @ params.matrix.T, axis=-1)


def score_binary(params: HeadParams, features):
    """sigmoid(beta . x), kept strictly inside (0, 1)"""
    if not params.is_binary:
        raise RejectedInputError(f"score_binary needs a single-row head, got {params.rows} rows")
    X = _rows(features, params.dimension)
    scores = np.clip(expit(X @ params.matrix[0]), _SCORE_LOW, _SCORE_HIGH)
    return float(scores) if X.ndim == 1 else scores


def predict(params: HeadParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; np.argmax breaks ties toward the lowest index"""
    X = np.atleast_2d(_rows(features, params.dimension))
    if params.is_binary:
        return (X @ params.matrix[0] > 0).astype(np.int64)
    return np.argmax(X @ params.matrix.T, axis=1)


__all__ = [
    'DEFAULT_TOLERANCE',
    'DEFAULT_MAX_ITERATIONS',
    'LINEAR_HEAD_EPOCHS',
    'ErmProblem',
    'FitResult',
    'objective',
    'gradient',
    'hessian_vector_product',
    'example_loss_gradient',
    'newton_polish',
    'fit',
    'fit_binary',
    'train_linear_head_epochs',
    'predict_proba',
    'score_binary',
    'predict',
]

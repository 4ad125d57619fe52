"""
Output-Perturbation Privacy for the FedAUXfdp simulator

- l2_sensitivity: 2 sqrt(C) / (lam N) for a C-row softmax head, 2 / (lam N) for a binary head
- gaussian_sigma: sigma = sqrt(2 ln(1.25 / delta)) * sensitivity / eps
- sanitize: beta* + N(0, sigma^2 I), only for converged fits
- compose: basic composition (sums of eps and delta)
- empirical_sensitivity: brute-force neighboring-dataset oracle for the bound
"""

import hashlib
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from services.datamodel import Dataset, HeadParams, PrivacyParams
from services.erm import ErmProblem, FitResult, fit
from services.errors import ConvergenceError, RejectedInputError, SanitizationRefusedError
from services.event_logger import log_epsilon_above_one, log_event


ORACLE_TOLERANCE = 1e-10
ORACLE_MAX_ITERATIONS = 1000
ORACLE_SLACK = 1e-6

SCORING_MECHANISM = 'scores'
CLASS_MECHANISM = 'classes'


@dataclass(frozen=True)
class SensitivityBound:
    value: float
    class_count: int
    lam: float
    n: int
    binary: bool = False


@dataclass(frozen=True)
class NoiseScale:
    """Per-coordinate Gaussian variance; 0 means the mechanism is disabled"""

    sigma_squared: float

    def __post_init__(self):
        if not (self.sigma_squared >= 0) or not math.isfinite(self.sigma_squared):
            raise RejectedInputError(f"sigma_squared must be finite and >= 0, got {self.sigma_squared}")

    @classmethod
    def disabled(cls) -> 'NoiseScale':
        return cls(0.0)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_squared)


@dataclass(frozen=True)
class SpendRecord:
    epsilon: float
    delta: float
    mechanism: str

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise RejectedInputError(f"spend epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise RejectedInputError(f"spend delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class PrivacySpend:
    """Ordered ledger of mechanism invocations charged to one client"""

    records: Tuple[SpendRecord, ...] = ()

    def add(self, record: Optional[SpendRecord]) -> 'PrivacySpend':
        if record is None:
            return self
        return PrivacySpend(self.records + (record,))

    def merge(self, other: 'PrivacySpend') -> 'PrivacySpend':
        return PrivacySpend(self.records + other.records)

    def __iter__(self) -> Iterator[SpendRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


# ============================================================================
# CALIBRATION
# ============================================================================

def l2_sensitivity(class_count: int, lam: float, n: int, binary: bool = False) -> SensitivityBound:
    """
    Closed-form l2 sensitivity of the regularized logistic regression minimizer

    Args:
        class_count: C (ignored by the binary form, still validated)
        lam: regularization strength
        n: training-set size of the regression
        binary: single-row sigmoid head

    Returns:
        SensitivityBound with its provenance
    """
    if class_count < 2:
        raise RejectedInputError(f"class_count must be >= 2, got {class_count}")
    if not (lam > 0) or not math.isfinite(lam):
        raise RejectedInputError(f"lambda must be positive, got {lam}")
    if n < 1:
        raise RejectedInputError(f"n must be >= 1, got {n}")

    numerator = 2.0 if binary else 2.0 * math.sqrt(class_count)
    return SensitivityBound(numerator / (lam * n), class_count, lam, n, binary)


def gaussian_sigma(
    eps: float,
    delta: float,
    sensitivity: SensitivityBound,
    mechanism: str = 'gaussian'
) -> NoiseScale:
    """
    Gaussian-mechanism variance for (eps, delta)

    Example:
        bound = l2_sensitivity(10, 0.01, 2500)
        gaussian_sigma(0.5, 1e-5, bound).sigma_squared   # ~6.0089
    """
    if not (eps > 0) or not math.isfinite(eps):
        raise RejectedInputError(f"epsilon must be positive, got {eps}")
    if not (0.0 < delta < 1.0):
        raise RejectedInputError(f"delta must lie in (0, 1), got {delta}")
    if eps >= 1.0:
        log_epsilon_above_one(eps, mechanism)

    sigma = math.sqrt(2.0 * math.log(1.25 / delta)) * sensitivity.value / eps
    return NoiseScale(sigma * sigma)


def sanitize(fit_result: FitResult, noise: NoiseScale, rng: np.random.Generator) -> HeadParams:
    """
    Add N(0, sigma^2) to every entry of a converged head

    Raises:
        SanitizationRefusedError: the fit stopped above its gradient tolerance
    """
    if not fit_result.converged:
        raise SanitizationRefusedError(
            f"refusing to sanitize a non-converged fit "
            f"(gradient norm {fit_result.final_gradient_norm:.3e} > {fit_result.tolerance:.1e})"
        )
    if noise.sigma_squared == 0.0:
        return fit_result.params

    matrix = fit_result.params.matrix
    return HeadParams(matrix + noise.sigma * rng.standard_normal(matrix.shape))


def privatize(
    fit_result: FitResult,
    dp: PrivacyParams,
    sensitivity: SensitivityBound,
    rng: np.random.Generator,
    mechanism: str
) -> Tuple[HeadParams, Optional[SpendRecord]]:
    """Sanitize per `dp`; returns the spend record, or None when the mechanism is disabled"""
    if not dp.enabled:
        return sanitize(fit_result, NoiseScale.disabled(), rng), None
    noise = gaussian_sigma(dp.epsilon, dp.delta, sensitivity, mechanism)
    return sanitize(fit_result, noise, rng), SpendRecord(dp.epsilon, dp.delta, mechanism)


def compose(spend: PrivacySpend) -> Tuple[float, float]:
    """Basic composition: (sum of eps, sum of delta), exactly rounded"""
    return (
        math.fsum(r.epsilon for r in spend),
        math.fsum(r.delta for r in spend),
    )


def stream_for(master_seed: int, client_id: int, mechanism: str) -> np.random.Generator:
    """Independent noise stream per (master seed, client, mechanism)"""
    digest = hashlib.sha256(f"{master_seed}:{client_id}:{mechanism}".encode('utf-8')).digest()
    return np.random.default_rng(int.from_bytes(digest, 'little'))


def effective_class_count(local: Dataset) -> int:
    """Classes actually present on a client (at least 2)"""
    return max(2, local.observed_classes())


# ============================================================================
# EMPIRICAL SENSITIVITY ORACLE
# ============================================================================

@dataclass(frozen=True)
class SensitivityProblemTemplate:
    """
    Shape of the random regressions the oracle fits

    mode:
        'random'       replace one point with a fresh random point and label
        'adversarial'  points on the unit sphere; replacement is the reflected point
                       (with a different label for a multi-class head)
        'identical'    replace a point with itself
    """

    n: int
    p: int
    class_count: int
    lam: float
    binary: bool = False
    mode: str = 'random'

    def __post_init__(self):
        if not 1 <= self.n <= 50:
            raise RejectedInputError(f"oracle instances need 1 <= n <= 50, got {self.n}")
        if not 1 <= self.p <= 5:
            raise RejectedInputError(f"oracle instances need 1 <= p <= 5, got {self.p}")
        if not 2 <= self.class_count <= 4:
            raise RejectedInputError(f"oracle instances need 2 <= C <= 4, got {self.class_count}")
        if self.binary and self.class_count != 2:
            raise RejectedInputError("a binary template has class_count 2")
        if self.mode not in ('random', 'adversarial', 'identical'):
            raise RejectedInputError(f"unknown oracle mode {self.mode!r}")

    @property
    def bound(self) -> SensitivityBound:
        return l2_sensitivity(self.class_count, self.lam, self.n, self.binary)


def _unit_ball_points(rng: np.random.Generator, count: int, dim: int, on_sphere: bool) -> np.ndarray:
    directions = rng.standard_normal((count, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if on_sphere:
        return directions
    radii = rng.random(count) ** (1.0 / dim)
    return directions * radii[:, None]


def _oracle_problem(template: SensitivityProblemTemplate, X: np.ndarray, y: np.ndarray) -> ErmProblem:
    if template.binary:
        return ErmProblem(X, y.astype(np.float64), template.lam, 2, binary=True)
    return ErmProblem.from_labels(X, y, template.lam, template.class_count)


def _oracle_fit(problem: ErmProblem) -> HeadParams:
    result = fit(problem, ORACLE_TOLERANCE, ORACLE_MAX_ITERATIONS)
    if not result.converged:
        raise ConvergenceError(
            f"oracle fit stopped at gradient norm {result.final_gradient_norm:.3e}",
            result.final_gradient_norm,
            result.iterations,
        )
    return result.params


def empirical_sensitivity(
    template: SensitivityProblemTemplate,
    trials: int,
    rng: np.random.Generator
) -> float:
    """
    Max ||beta1* - beta2*|| over random neighboring dataset pairs

    Args:
        template: Problem shape and replacement mode
        trials: Number of neighboring pairs
        rng: Source of datasets and replacements

    Returns:
        Largest observed parameter distance

    Raises:
        ConvergenceError: any fit missed the oracle tolerance (aborts the trial set)
    """
    if trials < 1:
        raise RejectedInputError(f"trials must be >= 1, got {trials}")

    dim = template.p + 1
    on_sphere = template.mode == 'adversarial'
    worst = 0.0

    for _ in range(trials):
        X = _unit_ball_points(rng, template.n, dim, on_sphere)
        y = rng.integers(0, template.class_count, size=template.n)

        j = int(rng.integers(template.n))
        X2, y2 = X.copy(), y.copy()
        if template.mode == 'random':
            X2[j] = _unit_ball_points(rng, 1, dim, False)[0]
            y2[j] = rng.integers(0, template.class_count)
        elif template.mode == 'adversarial':
            X2[j] = -X[j]
            if not template.binary:
                y2[j] = (y[j] + 1 + rng.integers(0, template.class_count - 1)) % template.class_count

        beta1 = _oracle_fit(_oracle_problem(template, X, y))
        beta2 = _oracle_fit(_oracle_problem(template, X2, y2))
        worst = max(worst, float(np.linalg.norm(beta1.matrix - beta2.matrix)))

    bound = template.bound.value
    if worst > bound + ORACLE_SLACK:
        log_event(
            'sensitivity_violation',
            scope=f'oracle:n={template.n},C={template.class_count},lam={template.lam}',
            details={'observed': worst, 'bound': bound, 'mode': template.mode},
        )
    return worst


__all__ = [
    'SCORING_MECHANISM',
    'CLASS_MECHANISM',
    'SensitivityBound',
    'NoiseScale',
    'SpendRecord',
    'PrivacySpend',
    'l2_sensitivity',
    'gaussian_sigma',
    'sanitize',
    'privatize',
    'compose',
    'stream_for',
    'effective_class_count',
    'SensitivityProblemTemplate',
    'empirical_sensitivity',
]

"""
One-Round Federated Distillation for the FedAUXfdp simulator

Client side (independent per client, may run in parallel):
1. Scoring head: binary regression of D_i against the public negatives D-, privatized
2. Class head: C-way regression on D_i, privatized
3. Emit certainty scores f_i and soft labels g_i on the public distillation set

Server side (after every client finished):
4. Aggregate soft labels (certainty-weighted, or plain mean for FedD+P)
5. Distill a logistic head on the distillation set, or average client heads (FedAVG+P)
6. Evaluate on the held-out test set
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.datamodel import (
    CertaintyScores,
    Dataset,
    HeadParams,
    MetricsRecord,
    PrivacyParams,
    SoftLabelMatrix,
)
from services.erm import (
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_TOLERANCE,
    LINEAR_HEAD_EPOCHS,
    ErmProblem,
    FitResult,
    fit,
    fit_binary,
    predict,
    predict_proba,
    score_binary,
    train_linear_head_epochs,
)
from services.errors import (
    ClientFailureError,
    ConvergenceError,
    RejectedInputError,
    RoundFailureError,
)
from services.event_logger import (
    log_client_failure,
    log_denominator_fallback,
    log_fit_not_converged,
)
from services.features import (
    FeatureExtractor,
    NormalizationConstant,
    NormalizationPolicy,
    append_bias,
    fit_normalizer,
    prepare_inference_features,
    prepare_training_features,
)
from services.privacy import (
    CLASS_MECHANISM,
    SCORING_MECHANISM,
    PrivacySpend,
    SpendRecord,
    compose,
    effective_class_count,
    l2_sensitivity,
    privatize,
    stream_for,
)


DENOMINATOR_FLOOR = 1e-12


class Method(str, Enum):
    FEDAUXFDP = 'fedauxfdp'   # certainty-weighted distillation, both heads privatized
    FEDD_P = 'fedd_p'         # plain ensemble distillation, privatized class heads
    FEDAVG_P = 'fedavg_p'     # size-weighted average of privatized class heads
    FEDAUX_F = 'fedaux_f'     # certainty-weighted, class heads trained 40 epochs, not privatized


MAIN_METHODS = (Method.FEDAUXFDP, Method.FEDD_P, Method.FEDAVG_P)


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class TrainedHead:
    """A client head plus the constant its inputs must be normalized with"""

    params: HeadParams
    constant: NormalizationConstant
    spend: Optional[SpendRecord] = None


@dataclass(frozen=True, eq=False)
class ClientArtifacts:
    """
    Everything a client publishes

    scores and soft_labels are filled by client_emit; they are post-processing of the
    privatized heads and carry no further privacy cost.
    """

    client_id: int
    size: int
    scoring: TrainedHead
    classifier: TrainedHead
    spend: PrivacySpend
    scores: Optional[CertaintyScores] = None
    soft_labels: Optional[SoftLabelMatrix] = None

    @property
    def scoring_head(self) -> HeadParams:
        return self.scoring.params

    @property
    def class_head(self) -> HeadParams:
        return self.classifier.params


@dataclass(frozen=True, eq=False)
class ServerModel:
    """
    Server head on frozen extractor features

    constant normalizes raw test features; None means inputs arrive already prepared.
    """

    head: HeadParams
    constant: Optional[NormalizationConstant] = None

    def prepare(self, features: np.ndarray) -> np.ndarray:
        if self.constant is None:
            return features
        return prepare_inference_features(features, self.constant)


@dataclass(frozen=True, eq=False)
class FederatedData:
    """
    One experiment's data, before extraction

    clients: private local datasets D_i (from the partition)
    negatives: public D- rows
    distill: public D_distill rows
    test: held-out labeled test set
    """

    clients: Tuple[Dataset, ...]
    negatives: np.ndarray
    distill: np.ndarray
    test: Dataset

    def __post_init__(self):
        if not self.clients:
            raise RejectedInputError("a round needs at least one client")
        for i, local in enumerate(self.clients):
            local.require_nonempty(f"client {i} dataset")
        if len(self.negatives) == 0 or len(self.distill) == 0:
            raise RejectedInputError("negatives and distill sets must be nonempty")

    def extracted(self, extractor: FeatureExtractor) -> 'FederatedData':
        return FederatedData(
            clients=tuple(d.with_features(extractor.extract_batch(d.features)) for d in self.clients),
            negatives=extractor.extract_batch(self.negatives),
            distill=extractor.extract_batch(self.distill),
            test=self.test.with_features(extractor.extract_batch(self.test.features)),
        )


@dataclass(frozen=True)
class RoundConfig:
    """One sweep cell"""

    alpha: float
    seed: int
    class_count: int = 10
    lambda_class: float = 0.01
    lambda_score: float = 0.01
    lambda_server: float = 0.01
    dp_class: PrivacyParams = field(default_factory=lambda: PrivacyParams(0.5, 1e-5))
    dp_score: PrivacyParams = field(default_factory=lambda: PrivacyParams(0.1, 1e-5))
    normalization: NormalizationPolicy = NormalizationPolicy.LOCAL
    per_client_class_count: bool = False
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    methods: Tuple[Method, ...] = MAIN_METHODS
    threads: Optional[int] = None
    record_timing: bool = False

    @property
    def eps_class(self) -> Optional[float]:
        return self.dp_class.epsilon if self.dp_class.enabled else None

    def scope(self, method: Union[Method, str] = '*') -> str:
        name = method.value if isinstance(method, Method) else method
        return f'cell:{name}/{self.alpha}/{self.eps_class}/{self.lambda_class}/{self.seed}'


@dataclass(frozen=True, eq=False)
class RoundResult:
    records: Tuple[MetricsRecord, ...]
    models: Dict[str, ServerModel]
    artifacts: Tuple[ClientArtifacts, ...]


def thread_count(requested: Optional[int] = None) -> int:
    """Worker threads for client training (FEDAUXFDP_THREADS, default 1)"""
    if requested is not None:
        return max(1, int(requested))
    try:
        return max(1, int(os.getenv('FEDAUXFDP_THREADS', '1')))
    except ValueError:
        return 1


# ============================================================================
# CLIENT
# ============================================================================

def _require_converged(result: FitResult, scope: str) -> FitResult:
    if not result.converged:
        log_fit_not_converged(scope, result.final_gradient_norm, result.iterations, result.tolerance)
        raise ConvergenceError(
            f"{scope}: fit stopped at gradient norm {result.final_gradient_norm:.3e} "
            f"after {result.iterations} iterations",
            result.final_gradient_norm,
            result.iterations,
        )
    return result


def client_train_scoring(
    local: Dataset,
    negatives: np.ndarray,
    lam: float,
    dp: PrivacyParams,
    rng: np.random.Generator,
    policy: NormalizationPolicy = NormalizationPolicy.LOCAL,
    public_reference: Optional[np.ndarray] = None,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS
) -> TrainedHead:
    """
    Privatized binary scoring head: local data (label 1) against public negatives (label 0)

    Inputs are extracted features without the bias; normalization is fitted over
    D_i united with D- (LOCAL policy). Sensitivity uses N = |D_i| + |D-|.

    Raises:
        ConvergenceError: the binary fit stopped above tolerance
    """
    local.require_nonempty("local dataset")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] == 0:
        raise RejectedInputError("negative set is empty")

    rows, constant = prepare_training_features(
        np.vstack((local.features, negatives)), policy, public_reference
    )
    n_pos = len(local)
    result = _require_converged(
        fit_binary(rows[:n_pos], rows[n_pos:], lam, tolerance, max_iterations),
        'scoring head',
    )
    bound = l2_sensitivity(2, lam, rows.shape[0], binary=True)
    params, spend = privatize(result, dp, bound, rng, SCORING_MECHANISM)
    return TrainedHead(params, constant, spend)


def client_train_classifier(
    local: Dataset,
    lam: float,
    dp: PrivacyParams,
    rng: np.random.Generator,
    class_count: Optional[int] = None,
    per_client_class_count: bool = False,
    policy: NormalizationPolicy = NormalizationPolicy.LOCAL,
    public_reference: Optional[np.ndarray] = None,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS
) -> TrainedHead:
    """
    Privatized C-way class head on local data

    The head always has the global C rows. per_client_class_count (experimental)
    calibrates the noise with the number of classes the client actually holds.

    Raises:
        ConvergenceError: the fit stopped above tolerance
    """
    local.require_nonempty("local dataset")
    class_count = class_count or local.class_count

    rows, constant = prepare_training_features(local.features, policy, public_reference)
    problem = ErmProblem.from_labels(rows, local.labels, lam, class_count)
    result = _require_converged(fit(problem, tolerance, max_iterations), 'class head')

    noise_classes = effective_class_count(local) if per_client_class_count else class_count
    bound = l2_sensitivity(noise_classes, lam, len(local))
    params, spend = privatize(result, dp, bound, rng, CLASS_MECHANISM)
    return TrainedHead(params, constant, spend)


def client_train_linear_epochs(
    local: Dataset,
    lam: float,
    class_count: Optional[int] = None,
    epochs: int = LINEAR_HEAD_EPOCHS,
    policy: NormalizationPolicy = NormalizationPolicy.LOCAL,
    public_reference: Optional[np.ndarray] = None
) -> TrainedHead:
    """Non-private class head trained for a fixed number of local epochs (FedAUX+F)"""
    local.require_nonempty("local dataset")
    rows, constant = prepare_training_features(local.features, policy, public_reference)
    problem = ErmProblem.from_labels(rows, local.labels, lam, class_count or local.class_count)
    return TrainedHead(train_linear_head_epochs(problem, epochs), constant)


def client_emit(artifacts: ClientArtifacts, distill: np.ndarray) -> Tuple[CertaintyScores, SoftLabelMatrix]:
    """
    Certainty scores and soft labels on the distillation set

    Each head sees the distillation rows normalized with its own training constant,
    clipped to the unit ball.
    """
    scores = score_binary(
        artifacts.scoring.params,
        prepare_inference_features(distill, artifacts.scoring.constant),
    )
    soft = predict_proba(
        artifacts.classifier.params,
        prepare_inference_features(distill, artifacts.classifier.constant),
    )
    return CertaintyScores(np.atleast_1d(scores)), SoftLabelMatrix(np.atleast_2d(soft))


# ============================================================================
# AGGREGATION
# ============================================================================

def _stack_soft_labels(soft_labels: Sequence[SoftLabelMatrix]) -> np.ndarray:
    if not soft_labels:
        raise RejectedInputError("aggregation needs at least one client")
    shapes = {s.rows.shape for s in soft_labels}
    if len(shapes) != 1:
        raise RejectedInputError(f"client soft-label shapes differ: {sorted(shapes)}")
    return np.stack([s.rows for s in soft_labels])


def _client_mean(stacked: np.ndarray) -> np.ndarray:
    """Per-point mean over clients; entries where every client agrees keep that value exactly"""
    mean = stacked.mean(axis=0)
    return np.where(np.all(stacked == stacked[0], axis=0), stacked[0], mean)


def aggregate_unweighted(soft_labels: Sequence[SoftLabelMatrix]) -> SoftLabelMatrix:
    """Arithmetic mean of the clients' soft labels per distillation point"""
    return SoftLabelMatrix(_client_mean(_stack_soft_labels(soft_labels)))


def aggregate_weighted(
    scores: Sequence[CertaintyScores],
    soft_labels: Sequence[SoftLabelMatrix],
    scope: Optional[str] = None
) -> Tuple[SoftLabelMatrix, int]:
    """
    Certainty-weighted soft labels: sum_i f_i(x) g_i(x) / sum_i f_i(x)

    Points where every client reports the same score take the plain mean, so constant
    scores reproduce aggregate_unweighted exactly, as do points where every client emits
    the same soft-label row. Denominators below 1e-12 also fall back to the plain mean.

    Returns:
        (SoftLabelMatrix, number of denominator fallbacks)
    """
    G = _stack_soft_labels(soft_labels)
    if len(scores) != G.shape[0]:
        raise RejectedInputError(f"{len(scores)} score vectors for {G.shape[0]} soft-label matrices")
    F = np.stack([s.values for s in scores])
    if F.shape[1] != G.shape[1]:
        raise RejectedInputError(
            f"scores cover {F.shape[1]} distillation points, soft labels cover {G.shape[1]}"
        )

    mean = _client_mean(G)
    denominator = F.sum(axis=0)
    weighted = np.einsum('im,imc->mc', F, G) / np.maximum(denominator, DENOMINATOR_FLOOR)[:, None]

    underflow = denominator < DENOMINATOR_FLOOR
    constant = np.all(F == F[0], axis=0)
    agreed = np.all(G == G[0], axis=(0, 2))
    rows = np.where((underflow | constant | agreed)[:, None], mean, weighted)

    fallbacks = int(np.count_nonzero(underflow))
    if fallbacks:
        log_denominator_fallback(fallbacks, scope)
    return SoftLabelMatrix(rows), fallbacks


def fedavg_aggregate(
    heads: Sequence[HeadParams],
    sizes: Sequence[int],
    constant: Optional[NormalizationConstant] = None
) -> ServerModel:
    """
    Size-weighted average of client heads

    Each coordinate is summed with math.fsum, so the result does not depend on
    client order.
    """
    if not heads or len(heads) != len(sizes):
        raise RejectedInputError(f"{len(heads)} heads for {len(sizes)} sizes")
    shapes = {h.matrix.shape for h in heads}
    if len(shapes) != 1:
        raise RejectedInputError(f"client head shapes differ: {sorted(shapes)}")
    if any(s <= 0 for s in sizes):
        raise RejectedInputError("client sizes must be positive")

    total = math.fsum(sizes)
    weighted = np.stack([(s / total) * h.matrix for s, h in zip(sizes, heads)])
    averaged = np.apply_along_axis(math.fsum, 0, weighted.reshape(len(heads), -1))
    return ServerModel(HeadParams(averaged.reshape(heads[0].matrix.shape)), constant)


# ============================================================================
# SERVER
# ============================================================================

def server_distill(
    supervision: SoftLabelMatrix,
    distill: np.ndarray,
    lambda_server: float,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS
) -> ServerModel:
    """
    Train the server head on (D_distill, Y) with soft-label cross-entropy

    Args:
        supervision: aggregated soft labels, one row per distillation point
        distill: extracted distillation features (public, no bias)
        lambda_server: regularization of the server head

    Raises:
        ConvergenceError: the fit stopped above tolerance
    """
    distill = np.atleast_2d(np.asarray(distill, dtype=np.float64))
    if distill.shape[0] != len(supervision):
        raise RejectedInputError(
            f"{len(supervision)} supervision rows for {distill.shape[0]} distillation points"
        )
    rows, constant = prepare_training_features(distill)
    problem = ErmProblem(rows, supervision.rows, lambda_server, supervision.class_count)
    result = _require_converged(fit(problem, tolerance, max_iterations), 'server head')
    return ServerModel(result.params, constant)


def evaluate(model: Union[ServerModel, HeadParams], test: Dataset) -> float:
    """Fraction of test points whose argmax class (ties to the lowest index) is the label"""
    if len(test) == 0:
        raise RejectedInputError("test set is empty")
    if isinstance(model, HeadParams):
        model = ServerModel(model)
    predictions = predict(model.head, model.prepare(test.features))
    return float(np.count_nonzero(predictions == test.labels)) / len(test)


# ============================================================================
# ROUND
# ============================================================================

class _StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(str(cause))
        self.stage = stage
        self.cause = cause


def _run_clients(
    work: Callable[[int, Dataset], ClientArtifacts],
    clients: Sequence[Dataset],
    threads: int
) -> List[ClientArtifacts]:
    """Run `work` per client; results come back in client order whatever the schedule"""
    def guarded(client_id: int, local: Dataset):
        try:
            return work(client_id, local)
        except _StageError as e:
            log_client_failure(client_id, e.stage, str(e.cause))
            return ClientFailureError(client_id, e.stage, e.cause)
        except Exception as e:
            log_client_failure(client_id, 'training', str(e))
            return ClientFailureError(client_id, 'training', e)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(guarded, i, local) for i, local in enumerate(clients)]
        outcomes = [f.result() for f in futures]

    failures = [o for o in outcomes if isinstance(o, ClientFailureError)]
    if failures:
        raise RoundFailureError(failures)
    return outcomes


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise _StageError(stage, e) from e


def run_round(
    config: RoundConfig,
    data: FederatedData,
    extractor: Optional[FeatureExtractor] = None
) -> RoundResult:
    """
    One round with full participation, every requested method on the same clients

    Args:
        config: Round settings (one sweep cell)
        data: Client datasets and public/test data before extraction
        extractor: Frozen extractor (identity when None)

    Returns:
        RoundResult with one MetricsRecord per method, in config.methods order

    Raises:
        RoundFailureError: at least one client failed; carries per-client diagnostics
    """
    started = time.perf_counter()
    data = data.extracted(extractor or FeatureExtractor.identity())
    methods = tuple(Method(m) for m in config.methods)
    needs_f = Method.FEDAUX_F in methods
    public = data.distill if config.normalization == NormalizationPolicy.PUBLIC else None

    def client_work(client_id: int, local: Dataset) -> ClientArtifacts:
        scoring = _staged(
            'scoring', client_train_scoring,
            local, data.negatives, config.lambda_score, config.dp_score,
            stream_for(config.seed, client_id, SCORING_MECHANISM),
            config.normalization, public, config.tolerance, config.max_iterations,
        )
        classifier = _staged(
            'classifier', client_train_classifier,
            local, config.lambda_class, config.dp_class,
            stream_for(config.seed, client_id, CLASS_MECHANISM),
            config.class_count, config.per_client_class_count,
            config.normalization, public, config.tolerance, config.max_iterations,
        )
        spend = PrivacySpend().add(scoring.spend).add(classifier.spend)
        artifacts = ClientArtifacts(client_id, len(local), scoring, classifier, spend)
        scores, soft = _staged('emit', client_emit, artifacts, data.distill)
        return replace(artifacts, scores=scores, soft_labels=soft)

    artifacts = _run_clients(client_work, data.clients, thread_count(config.threads))

    epoch_artifacts: List[ClientArtifacts] = []
    if needs_f:
        def epoch_work(client_id: int, local: Dataset) -> ClientArtifacts:
            base = artifacts[client_id]
            classifier = _staged(
                'classifier', client_train_linear_epochs,
                local, config.lambda_class, config.class_count, LINEAR_HEAD_EPOCHS,
                config.normalization, public,
            )
            spend = PrivacySpend().add(base.scoring.spend)
            f_artifacts = ClientArtifacts(client_id, len(local), base.scoring, classifier, spend)
            scores, soft = _staged('emit', client_emit, f_artifacts, data.distill)
            return replace(f_artifacts, scores=scores, soft_labels=soft)

        epoch_artifacts = _run_clients(epoch_work, data.clients, thread_count(config.threads))

    client_ms = (time.perf_counter() - started) * 1000.0
    records: List[MetricsRecord] = []
    models: Dict[str, ServerModel] = {}

    for method in methods:
        method_started = time.perf_counter()
        group = epoch_artifacts if method == Method.FEDAUX_F else artifacts
        fallbacks = 0

        if method in (Method.FEDAUXFDP, Method.FEDAUX_F):
            supervision, fallbacks = aggregate_weighted(
                [a.scores for a in group], [a.soft_labels for a in group], config.scope(method)
            )
            model = server_distill(
                supervision, data.distill, config.lambda_server, config.tolerance, config.max_iterations
            )
        elif method == Method.FEDD_P:
            supervision = aggregate_unweighted([a.soft_labels for a in group])
            model = server_distill(
                supervision, data.distill, config.lambda_server, config.tolerance, config.max_iterations
            )
        else:
            model = fedavg_aggregate(
                [a.class_head for a in group],
                [a.size for a in group],
                fit_normalizer(append_bias(data.distill)),
            )

        eps_total, delta_total = max(compose(a.spend) for a in group)
        wall_ms = 0
        if config.record_timing:
            wall_ms = int(round(client_ms + (time.perf_counter() - method_started) * 1000.0))

        models[method.value] = model
        records.append(MetricsRecord(
            method=method.value,
            alpha=config.alpha,
            eps_class=config.eps_class,
            lambda_class=config.lambda_class,
            seed=config.seed,
            accuracy=evaluate(model, data.test),
            eps_total=eps_total,
            delta_total=delta_total,
            fallback_count=fallbacks,
            wall_ms=wall_ms,
        ))

    return RoundResult(tuple(records), models, tuple(artifacts))


__all__ = [
    'DENOMINATOR_FLOOR',
    'Method',
    'MAIN_METHODS',
    'TrainedHead',
    'ClientArtifacts',
    'ServerModel',
    'FederatedData',
    'RoundConfig',
    'RoundResult',
    'thread_count',
    'client_train_scoring',
    'client_train_classifier',
    'client_train_linear_epochs',
    'client_emit',
    'aggregate_weighted',
    'aggregate_unweighted',
    'fedavg_aggregate',
    'server_distill',
    'evaluate',
    'run_round',
]

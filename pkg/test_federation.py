"""
Test One-Round Federated Distillation
Validates client training, aggregation, server distillation and full rounds
"""

from dataclasses import replace

import numpy as np
import pytest

from conftest import make_blobs
from services.datamodel import (
    CertaintyScores,
    Dataset,
    HeadParams,
    PrivacyParams,
    SoftLabelMatrix,
)
from services.erm import ErmProblem, fit, fit_binary, predict, predict_proba
from services.errors import RejectedInputError, RoundFailureError
from services.event_logger import get_event_logger
from services.features import NormalizationConstant, prepare_training_features
from services.federation import (
    ClientArtifacts,
    FederatedData,
    Method,
    RoundConfig,
    ServerModel,
    TrainedHead,
    aggregate_unweighted,
    aggregate_weighted,
    client_emit,
    client_train_classifier,
    client_train_scoring,
    evaluate,
    fedavg_aggregate,
    run_round,
    server_distill,
)
from services.privacy import compose, gaussian_sigma, l2_sensitivity


NO_DP = PrivacyParams.disabled()
FAITHFUL_LAMBDA_SERVER = 1e-4


def _federated(seed=0, n_clients=3, classes=3, per_class=60, spread=0.5):
    """Iid clients, public data from the same mixture, separate test blobs"""
    pool = make_blobs(seed, classes=classes, per_class=per_class, spread=spread)
    rng = np.random.default_rng(seed + 100)
    order = rng.permutation(len(pool))
    train, public, test = np.array_split(order, [len(pool) // 2, 3 * len(pool) // 4])
    public_rows = pool.features[public]
    half = len(public_rows) // 2
    return FederatedData(
        clients=tuple(pool.subset(idx) for idx in np.array_split(train, n_clients)),
        negatives=public_rows[:half],
        distill=public_rows[half:],
        test=pool.subset(test),
    )


# ============================================
# Client
# ============================================

def test_scoring_without_dp_is_plain_binary_fit():
    data = _federated()
    local = data.clients[0]
    head = client_train_scoring(local, data.negatives, 0.01, NO_DP, np.random.default_rng(0))

    rows, constant = prepare_training_features(np.vstack((local.features, data.negatives)))
    plain = fit_binary(rows[:len(local)], rows[len(local):], 0.01)
    assert head.spend is None
    assert head.constant.value == constant.value
    np.testing.assert_array_equal(head.params.matrix, plain.params.matrix)


def test_scoring_spend_record():
    data = _federated()
    head = client_train_scoring(
        data.clients[0], data.negatives, 0.01, PrivacyParams(0.1, 1e-5), np.random.default_rng(0)
    )

    assert (head.spend.epsilon, head.spend.delta, head.spend.mechanism) == (0.1, 1e-5, 'scores')


def test_scores_are_neutral_when_local_data_looks_public():
    means = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        local = Dataset(rng.standard_normal((200, 3)), np.zeros(200, dtype=np.int64), 2)
        negatives = rng.standard_normal((200, 3))
        distill = rng.standard_normal((100, 3))
        scoring = client_train_scoring(local, negatives, 0.01, NO_DP, rng)
        classifier = client_train_classifier(local, 0.01, NO_DP, rng)
        scores, _ = client_emit(ClientArtifacts(0, 200, scoring, classifier, None), distill)
        means.append(scores.values.mean())

    assert np.mean(means) == pytest.approx(0.5, abs=0.1)


def test_classifier_without_dp_is_plain_fit():
    local = make_blobs(1)
    head = client_train_classifier(local, 0.01, NO_DP, np.random.default_rng(0), class_count=3)

    rows, _ = prepare_training_features(local.features)
    plain = fit(ErmProblem.from_labels(rows, local.labels, 0.01, 3))
    assert head.spend is None
    np.testing.assert_array_equal(head.params.matrix, plain.params.matrix)


def test_classifier_noise_follows_calibration():
    local = make_blobs(2)
    dp = PrivacyParams(0.5, 1e-5)
    plain = client_train_classifier(local, 0.01, NO_DP, np.random.default_rng(0))
    noisy = client_train_classifier(local, 0.01, dp, np.random.default_rng(4))

    sigma = gaussian_sigma(0.5, 1e-5, l2_sensitivity(3, 0.01, len(local))).sigma
    expected = sigma * np.random.default_rng(4).standard_normal(plain.params.matrix.shape)
    np.testing.assert_allclose(noisy.params.matrix - plain.params.matrix, expected, rtol=1e-9, atol=1e-9)


def test_global_class_count_keeps_absent_class_rows():
    local = make_blobs(3, classes=2)
    local = Dataset(local.features, local.labels, 5)
    head = client_train_classifier(local, 0.01, NO_DP, np.random.default_rng(0))

    assert head.params.rows == 5


def test_zero_heads_emit_neutral_outputs():
    dim = 4
    constant = NormalizationConstant(1.0)
    artifacts = ClientArtifacts(
        client_id=0,
        size=10,
        scoring=TrainedHead(HeadParams.zeros(2, dim, binary=True), constant),
        classifier=TrainedHead(HeadParams.zeros(3, dim), constant),
        spend=None,
    )
    scores, soft = client_emit(artifacts, np.random.default_rng(0).standard_normal((6, dim - 1)))

    np.testing.assert_array_equal(scores.values, 0.5)
    np.testing.assert_allclose(soft.rows, 1.0 / 3.0, rtol=0, atol=1e-16)


# ============================================
# Aggregation
# ============================================

def test_equal_scores_give_plain_mean():
    a = SoftLabelMatrix([[0.2, 0.8], [1.0, 0.0]])
    b = SoftLabelMatrix([[0.6, 0.4], [0.0, 1.0]])
    weighted, fallbacks = aggregate_weighted([CertaintyScores([0.5, 0.5]), CertaintyScores([0.5, 0.5])], [a, b])

    np.testing.assert_array_equal(weighted.rows, aggregate_unweighted([a, b]).rows)
    np.testing.assert_allclose(weighted.rows, [[0.4, 0.6], [0.5, 0.5]])
    assert fallbacks == 0


def test_weighted_mean_example():
    weighted, _ = aggregate_weighted(
        [CertaintyScores([0.8]), CertaintyScores([0.2])],
        [SoftLabelMatrix([[1.0, 0.0]]), SoftLabelMatrix([[0.0, 1.0]])],
    )

    np.testing.assert_allclose(weighted.rows, [[0.8, 0.2]], rtol=0, atol=1e-15)


def test_single_client_weighting_is_identity():
    soft = SoftLabelMatrix([[0.3, 0.7], [0.9, 0.1]])
    weighted, _ = aggregate_weighted([CertaintyScores([0.9, 1e-5])], [soft])

    np.testing.assert_array_equal(weighted.rows, soft.rows)


def test_underflowing_denominator_falls_back():
    a = SoftLabelMatrix([[1.0, 0.0], [1.0, 0.0]])
    b = SoftLabelMatrix([[0.0, 1.0], [0.0, 1.0]])
    weighted, fallbacks = aggregate_weighted(
        [CertaintyScores([1e-13, 0.9]), CertaintyScores([2e-13, 0.1])], [a, b], scope='test'
    )

    assert fallbacks == 1
    np.testing.assert_allclose(weighted.rows, [[0.5, 0.5], [0.9, 0.1]])
    assert get_event_logger().get_event_summary()['denominator_fallback'] == 1


def test_aggregation_rejects_mismatched_inputs():
    with pytest.raises(RejectedInputError):
        aggregate_unweighted([])
    with pytest.raises(RejectedInputError):
        aggregate_weighted([CertaintyScores([0.5])], [SoftLabelMatrix([[1.0, 0.0], [0.0, 1.0]])])


def test_unweighted_examples():
    same = SoftLabelMatrix([[0.1, 0.9]])
    np.testing.assert_array_equal(aggregate_unweighted([same, same, same]).rows, same.rows)
    np.testing.assert_allclose(
        aggregate_unweighted([SoftLabelMatrix([[1.0, 0.0]]), SoftLabelMatrix([[0.0, 1.0]])]).rows,
        [[0.5, 0.5]],
    )


def test_identical_clients_aggregate_exactly():
    rng = np.random.default_rng(15)
    for clients in (3, 7, 10):
        raw = rng.random((20, 10))
        same = SoftLabelMatrix(raw / raw.sum(axis=1, keepdims=True))
        np.testing.assert_array_equal(aggregate_unweighted([same] * clients).rows, same.rows)
        weighted, _ = aggregate_weighted(
            [CertaintyScores(rng.random(20)) for _ in range(clients)], [same] * clients
        )
        np.testing.assert_array_equal(weighted.rows, same.rows)


def test_fedavg_examples():
    rng = np.random.default_rng(5)
    a = HeadParams(rng.standard_normal((3, 4)))
    b = HeadParams(rng.standard_normal((3, 4)))

    np.testing.assert_array_equal(fedavg_aggregate([a, a], [2, 2]).head.matrix, a.matrix)
    np.testing.assert_allclose(
        fedavg_aggregate([a, b], [3, 1]).head.matrix, 0.75 * a.matrix + 0.25 * b.matrix, rtol=1e-15
    )


def test_fedavg_is_order_independent():
    rng = np.random.default_rng(6)
    heads = [HeadParams(rng.standard_normal((4, 5))) for _ in range(6)]
    sizes = [int(s) for s in rng.integers(1, 1000, 6)]
    order = rng.permutation(6)

    forward = fedavg_aggregate(heads, sizes).head.matrix
    shuffled = fedavg_aggregate([heads[i] for i in order], [sizes[i] for i in order]).head.matrix
    np.testing.assert_array_equal(forward, shuffled)


# ============================================
# Server
# ============================================

def test_uniform_supervision_gives_uniform_head():
    distill = np.random.default_rng(7).standard_normal((40, 3))
    model = server_distill(SoftLabelMatrix(np.full((40, 4), 0.25)), distill, 0.01)

    proba = predict_proba(model.head, model.prepare(distill))
    assert np.max(np.abs(proba - 0.25)) <= 1e-3


def test_one_hot_supervision_equals_direct_fit():
    data = make_blobs(8)
    model = server_distill(SoftLabelMatrix(np.eye(3)[data.labels]), data.features, 0.01)

    rows, _ = prepare_training_features(data.features)
    direct = fit(ErmProblem.from_labels(rows, data.labels, 0.01, 3)).params
    assert evaluate(model, data) == pytest.approx(evaluate(direct, data.with_features(rows)), abs=0.005)
    np.testing.assert_allclose(model.head.matrix, direct.matrix, atol=1e-8)


@pytest.mark.parametrize("seed", [9, 19, 29])
def test_distillation_from_single_client_is_faithful(seed):
    data = _federated(seed=seed, n_clients=1, per_class=1000)
    classifier = client_train_classifier(data.clients[0], 0.01, NO_DP, np.random.default_rng(0))
    client = ServerModel(classifier.params, classifier.constant)
    model = server_distill(SoftLabelMatrix(predict_proba(client.head, client.prepare(data.distill))),
                           data.distill, FAITHFUL_LAMBDA_SERVER)

    agreement = np.mean(
        predict(model.head, model.prepare(data.test.features))
        == predict(client.head, client.prepare(data.test.features))
    )
    assert agreement >= 0.99
    assert evaluate(model, data.test) == pytest.approx(evaluate(client, data.test), abs=0.01)


def test_evaluate_examples():
    test = Dataset(np.eye(4)[1:], [0, 1, 2], 3)
    perfect = HeadParams(np.eye(4)[1:])

    assert evaluate(perfect, test) == 1.0
    balanced = Dataset(np.ones((6, 4)), [0, 1, 2, 0, 1, 2], 3)
    assert evaluate(HeadParams.zeros(3, 4), balanced) == pytest.approx(1.0 / 3.0)


# ============================================
# Rounds
# ============================================

def test_single_client_round_methods_agree():
    data = _federated(seed=10, n_clients=1, per_class=200)
    config = RoundConfig(alpha=1.0, seed=0, class_count=3, dp_class=NO_DP, dp_score=NO_DP)
    result = run_round(config, data)

    accuracy = {r.method: r.accuracy for r in result.records}
    assert list(accuracy) == ['fedauxfdp', 'fedd_p', 'fedavg_p']
    assert accuracy['fedauxfdp'] == accuracy['fedd_p']
    assert max(accuracy.values()) - min(accuracy.values()) <= 0.01
    assert all(r.eps_total == 0.0 for r in result.records)


def test_round_spend_ledger():
    result = run_round(RoundConfig(alpha=1.0, seed=1, class_count=3), _federated(seed=11))

    for artifacts in result.artifacts:
        assert [r.mechanism for r in artifacts.spend] == ['scores', 'classes']
        assert compose(artifacts.spend) == pytest.approx((0.6, 2e-5))
    for record in result.records:
        assert (record.eps_total, record.delta_total) == pytest.approx((0.6, 2e-5))
        assert record.eps_class == 0.5


def test_round_is_deterministic_across_thread_counts():
    data = _federated(seed=12, n_clients=4)
    config = RoundConfig(alpha=0.1, seed=3, class_count=3, threads=1)

    first = run_round(config, data).records
    assert run_round(config, data).records == first
    assert run_round(replace(config, threads=4), data).records == first


def test_fedaux_f_charges_scores_only():
    config = RoundConfig(alpha=1.0, seed=2, class_count=3, methods=(Method.FEDAUX_F, Method.FEDAUXFDP))
    records = run_round(config, _federated(seed=13)).records

    assert [r.method for r in records] == ['fedaux_f', 'fedauxfdp']
    assert (records[0].eps_total, records[0].delta_total) == pytest.approx((0.1, 1e-5))
    assert records[1].eps_total == pytest.approx(0.6)


def test_non_converged_clients_abort_the_round():
    config = RoundConfig(alpha=1.0, seed=0, class_count=3, tolerance=1e-14, max_iterations=1)

    with pytest.raises(RoundFailureError) as info:
        run_round(config, _federated(seed=14))
    diagnostics = info.value.diagnostics()
    assert [d['client_id'] for d in diagnostics] == [0, 1, 2]
    assert all(d['stage'] == 'scoring' for d in diagnostics)
    assert get_event_logger().get_event_summary()['client_failure'] == 3


def test_federated_data_rejects_empty_clients():
    data = _federated()
    empty = data.clients[0].subset([])
    with pytest.raises(RejectedInputError):
        FederatedData((empty,), data.negatives, data.distill, data.test)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))

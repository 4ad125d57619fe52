"""
Services module for the FedAUXfdp simulator
"""

from .datamodel import (
    AuxiliarySplit,
    CertaintyScores,
    Dataset,
    FeatureVector,
    HeadParams,
    LabeledExample,
    MetricsRecord,
    PrivacyParams,
    SoftLabelMatrix,
)
from .partition import PartitionConfig, Assignment, partition_dirichlet, heterogeneity_stats
from .features import (
    FeatureExtractor,
    NormalizationConstant,
    NormalizationPolicy,
    extract,
    append_bias,
    fit_normalizer,
    normalize,
    clip_to_unit_ball,
)
from .erm import ErmProblem, FitResult, objective, gradient, fit, fit_binary, predict_proba, score_binary
from .privacy import (
    SensitivityBound,
    NoiseScale,
    PrivacySpend,
    SpendRecord,
    SensitivityProblemTemplate,
    l2_sensitivity,
    gaussian_sigma,
    sanitize,
    compose,
    empirical_sensitivity,
)
from .federation import (
    Method,
    ClientArtifacts,
    ServerModel,
    FederatedData,
    RoundConfig,
    client_train_scoring,
    client_train_classifier,
    client_emit,
    aggregate_weighted,
    aggregate_unweighted,
    server_distill,
    fedavg_aggregate,
    evaluate,
    run_round,
)
from .experiment import ExperimentConfig, parse_config, generate_synthetic, run_sweep

__all__ = [
    'AuxiliarySplit',
    'CertaintyScores',
    'Dataset',
    'FeatureVector',
    'HeadParams',
    'LabeledExample',
    'MetricsRecord',
    'PrivacyParams',
    'SoftLabelMatrix',
    'PartitionConfig',
    'Assignment',
    'partition_dirichlet',
    'heterogeneity_stats',
    'FeatureExtractor',
    'NormalizationConstant',
    'NormalizationPolicy',
    'extract',
    'append_bias',
    'fit_normalizer',
    'normalize',
    'clip_to_unit_ball',
    'ErmProblem',
    'FitResult',
    'objective',
    'gradient',
    'fit',
    'fit_binary',
    'predict_proba',
    'score_binary',
    'SensitivityBound',
    'NoiseScale',
    'PrivacySpend',
    'SpendRecord',
    'SensitivityProblemTemplate',
    'l2_sensitivity',
    'gaussian_sigma',
    'sanitize',
    'compose',
    'empirical_sensitivity',
    'Method',
    'ClientArtifacts',
    'ServerModel',
    'FederatedData',
    'RoundConfig',
    'client_train_scoring',
    'client_train_classifier',
    'client_emit',
    'aggregate_weighted',
    'aggregate_unweighted',
    'server_distill',
    'fedavg_aggregate',
    'evaluate',
    'run_round',
    'ExperimentConfig',
    'parse_config',
    'generate_synthetic',
    'run_sweep',
]

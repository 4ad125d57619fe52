"""
Error types for the FedAUXfdp simulator
"""

from typing import Any, Dict, List, Optional


class FedAuxError(Exception):
    """Base class for every simulator error"""


class RejectedInputError(FedAuxError, ValueError):
    """Invalid parameters, shape mismatch or empty input"""


class PartitionError(FedAuxError):
    """Dirichlet partition kept producing empty clients"""


class NormalizationError(FedAuxError):
    """Normalization constant cannot be fitted (all-zero reference)"""


class ConvergenceError(FedAuxError):
    """A privacy-critical fit did not reach the gradient tolerance"""

    def __init__(self, message: str, gradient_norm: float, iterations: int):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SanitizationRefusedError(FedAuxError):
    """Sanitizing a non-converged fit would void the sensitivity bound"""


class ClientFailureError(FedAuxError):
    """A single client could not produce its artifacts"""

    def __init__(self, client_id: int, stage: str, cause: Exception):
        super().__init__(f"client {client_id} failed during {stage}: {cause}")
        self.client_id = client_id
        self.stage = stage
        self.cause = cause


class RoundFailureError(FedAuxError):
    """One or more clients failed, so the round was aborted"""

    def __init__(self, failures: List[ClientFailureError]):
        summary = "; ".join(str(f) for f in failures)
        super().__init__(f"round aborted, {len(failures)} client failure(s): {summary}")
        self.failures = failures

    def diagnostics(self) -> List[Dict[str, Any]]:
        return [
            {'client_id': f.client_id, 'stage': f.stage, 'error': str(f.cause)}
            for f in self.failures
        ]


class ConfigError(FedAuxError, ValueError):
    """Experiment configuration rejected; key_path points at the offending entry"""

    def __init__(self, key_path: str, message: str, details: Optional[List[str]] = None):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
        self.details = details or []


__all__ = [
    'FedAuxError',
    'RejectedInputError',
    'PartitionError',
    'NormalizationError',
    'ConvergenceError',
    'SanitizationRefusedError',
    'ClientFailureError',
    'RoundFailureError',
    'ConfigError',
]

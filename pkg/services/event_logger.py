"""
Experiment Event Logging for the FedAUXfdp simulator
Structured JSON-lines logging for run events, failures and privacy warnings
"""

import json
import logging
import os
import threading
from collections import defaultdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional


class ExperimentEventLogger:
    """
    Experiment event logging and monitoring service

    Provides methods to:
    - Log run events (partition retries, fallbacks, failures)
    - Track repeated events per scope (client, cell)
    - Raise alerts when an event type keeps recurring
    - Summarize event counts for the sweep summary
    """

    # Event types and their default severity
    EVENT_TYPES = {
        'partition_retry': 'info',         # Dirichlet draw left a client empty
        'fit_not_converged': 'high',       # Optimizer stopped above tolerance
        'client_failure': 'critical',      # Client excluded, round aborted
        'denominator_fallback': 'medium',  # Certainty-weight denominator underflowed
        'epsilon_above_one': 'medium',     # Gaussian mechanism outside eps < 1
        'cell_completed': 'info',          # Sweep cell finished
        'cell_failed': 'high',             # Sweep cell failed
        'sweep_completed': 'info',         # Sweep finished
        'sensitivity_violation': 'critical',  # Empirical distance above the bound
        'sensitivity_check_failed': 'high',   # Oracle fits did not converge for a template
        'config_error': 'high',            # Configuration rejected
    }

    # Alert thresholds per scope
    ALERT_THRESHOLDS = {
        'fit_not_converged': 3,
        'denominator_fallback': 50,
        'cell_failed': 5,
    }

    SEVERITY_LEVELS = {
        'info': logging.INFO,
        'medium': logging.WARNING,
        'high': logging.WARNING,
        'critical': logging.ERROR,
    }

    def __init__(self, log_file: Optional[str] = None, console: bool = True):
        """
        Initialize event logger

        Args:
            log_file: Path to JSON-lines log file (None = no file output)
            console: Whether to also log warnings to console
        """
        self.log_file = log_file
        self.console = console

        self.logger = logging.getLogger('fedauxfdp_events')
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False

        # Clear existing handlers
        self.logger.handlers = []

        if log_file:
            log_path = Path(log_file)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(log_file)
            file_handler.setLevel(logging.INFO)
            file_handler.setFormatter(logging.Formatter('%(message)s'))  # JSON only
            self.logger.addHandler(file_handler)

        if console:
            console_handler = logging.StreamHandler()
            console_handler.setLevel(logging.WARNING)
            console_handler.setFormatter(
                logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
            )
            self.logger.addHandler(console_handler)

        self._lock = threading.Lock()
        self._events: Dict[str, List[str]] = defaultdict(list)
        self._alerted = set()

    def log_event(
        self,
        event_type: str,
        scope: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        severity: Optional[str] = None
    ):
        """
        Log an experiment event

        Args:
            event_type: Type of event (from EVENT_TYPES)
            scope: Where it happened, e.g. 'client:3' or 'cell:fedauxfdp/0.01/0.5/0.01/0'
            details: Additional event details
            severity: Override default severity (info, medium, high, critical)

        Example:
            logger.log_event(
                'denominator_fallback',
                scope='cell:fedauxfdp/0.01/0.5/0.01/3',
                details={'count': 4}
            )
        """
        if severity is None:
            severity = self.EVENT_TYPES.get(event_type, 'info')

        log_entry = {
            'timestamp': datetime.now().isoformat(),
            'event_type': event_type,
            'severity': severity,
            'scope': scope or 'global',
            'details': details or {},
        }

        level = self.SEVERITY_LEVELS.get(severity, logging.INFO)
        self.logger.log(level, json.dumps(log_entry, default=str))

        with self._lock:
            self._events[event_type].append(scope or 'global')
            count = sum(1 for s in self._events[event_type] if s == (scope or 'global'))

        self._check_alerts(event_type, scope or 'global', count)

    def log_partition_retry(self, seed: int, attempt: int, empty_clients: List[int]):
        """Log a Dirichlet re-draw"""
        self.log_event(
            'partition_retry',
            scope=f'partition:{seed}',
            details={'attempt': attempt, 'empty_clients': empty_clients}
        )

    def log_fit_not_converged(self, scope: str, gradient_norm: float, iterations: int, tolerance: float):
        """Log a fit that stopped above tolerance"""
        self.log_event(
            'fit_not_converged',
            scope=scope,
            details={'gradient_norm': gradient_norm, 'iterations': iterations, 'tolerance': tolerance}
        )

    def log_client_failure(self, client_id: int, stage: str, error: str):
        """Log a client failure"""
        self.log_event(
            'client_failure',
            scope=f'client:{client_id}',
            details={'stage': stage, 'error': error}
        )

    def log_denominator_fallback(self, count: int, scope: Optional[str] = None):
        """Log distill points whose certainty weights underflowed"""
        self.log_event(
            'denominator_fallback',
            scope=scope,
            details={'count': count}
        )

    def log_epsilon_above_one(self, epsilon: float, mechanism: str):
        """Log a Gaussian mechanism used outside the eps < 1 guarantee"""
        self.log_event(
            'epsilon_above_one',
            scope=f'mechanism:{mechanism}',
            details={'epsilon': epsilon}
        )

    def _check_alerts(self, event_type: str, scope: str, count: int):
        """
        Check if event triggers alert threshold

        Args:
            event_type: Type of event
            scope: Event scope
            count: Events of this type seen for the scope
        """
        threshold = self.ALERT_THRESHOLDS.get(event_type)
        if threshold is None or count < threshold:
            return

        key = (event_type, scope)
        with self._lock:
            if key in self._alerted:
                return
            self._alerted.add(key)

        alert = {
            'timestamp': datetime.now().isoformat(),
            'alert_type': f'threshold_exceeded_{event_type}',
            'scope': scope,
            'event_count': count,
            'threshold': threshold,
        }
        self.logger.warning(f"ALERT: {json.dumps(alert)}")

    def get_event_summary(self) -> Dict[str, int]:
        """
        Get summary of all events

        Returns:
            Dict of event_type -> count
        """
        with self._lock:
            return {event_type: len(scopes) for event_type, scopes in sorted(self._events.items())}

    def reset(self):
        """Forget counted events (start of a new sweep)"""
        with self._lock:
            self._events.clear()
            self._alerted.clear()


# Singleton instance for process-wide use
_event_logger_instance = None
_instance_lock = threading.Lock()


def get_event_logger() -> ExperimentEventLogger:
    """
    Get singleton event logger instance

    The log file comes from FEDAUXFDP_LOG_FILE (unset = console only).

    Returns:
        ExperimentEventLogger instance
    """
    global _event_logger_instance
    with _instance_lock:
        if _event_logger_instance is None:
            _event_logger_instance = ExperimentEventLogger(
                log_file=os.getenv('FEDAUXFDP_LOG_FILE') or None
            )
    return _event_logger_instance


# Convenience functions
def log_event(
    event_type: str,
    scope: Optional[str] = None,
    details: Optional[Dict[str, Any]] = None,
    severity: Optional[str] = None
):
    """
    Log an experiment event

    Example:
        log_event('cell_failed', 'cell:fedd_p/0.01/0.5/0.01/2', {'error': 'round aborted'})
    """
    get_event_logger().log_event(event_type, scope, details, severity)


def log_partition_retry(seed: int, attempt: int, empty_clients: List[int]):
    get_event_logger().log_partition_retry(seed, attempt, empty_clients)


def log_fit_not_converged(scope: str, gradient_norm: float, iterations: int, tolerance: float):
    get_event_logger().log_fit_not_converged(scope, gradient_norm, iterations, tolerance)


def log_client_failure(client_id: int, stage: str, error: str):
    get_event_logger().log_client_failure(client_id, stage, error)


def log_denominator_fallback(count: int, scope: Optional[str] = None):
    get_event_logger().log_denominator_fallback(count, scope)


def log_epsilon_above_one(epsilon: float, mechanism: str):
    get_event_logger().log_epsilon_above_one(epsilon, mechanism)


__all__ = [
    'ExperimentEventLogger',
    'get_event_logger',
    'log_event',
    'log_partition_retry',
    'log_fit_not_converged',
    'log_client_failure',
    'log_denominator_fallback',
    'log_epsilon_above_one',
]

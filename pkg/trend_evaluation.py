"""
Trend Evaluation for FedAUXfdp sweeps
Checks a sweep summary against the qualitative claims the simulator is meant to reproduce
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np


# ============================================
# GATES
# ============================================

NON_IID_MARGIN = 0.10        # FedAUXfdp over both baselines at the smallest alpha
IID_SPREAD = 0.05            # all methods within this at the largest alpha
DP_COST = 0.03               # accuracy lost when class DP goes from off to eps=0.5
DP_MONOTONE_SLACK = 0.02     # per step along decreasing eps
REFERENCE_EPS = 0.5
HEAVY_NOISE_EPS = 0.01
REFERENCE_LAMBDA = 0.01
REGULARIZATION_SLACK = 0.01  # lambda=1 over lambda=0.01 without DP at the largest alpha
EPS_ORDER = ['none', 1.0, 0.5, 0.1, 0.01]


def _eps_key(value) -> str:
    if value is None or str(value).lower() == 'none':
        return 'none'
    return repr(float(value))


class TrendEvaluator:
    """
    Evaluates sweep summaries with release-style gates

    Gates (each skipped when the sweep lacks the cells it needs):
    - Non-iid gap: FedAUXfdp beats FedD+P and FedAVG+P by NON_IID_MARGIN at the smallest alpha
    - IID parity: methods within IID_SPREAD at the largest alpha
    - DP cost: class DP at eps=0.5 costs at most DP_COST against no class DP
    - DP monotone: accuracy does not rise as eps shrinks (DP_MONOTONE_SLACK per step)
    - Regularization: at eps=0.01, lambda=1 beats lambda=0.01
    - Regularization without DP: at the largest alpha, lambda=1 is no better than lambda=0.01
      (REGULARIZATION_SLACK)

    The alpha and DP gates read lambda=REFERENCE_LAMBDA cells only.
    """

    def __init__(self, summary: Dict[str, Any]):
        self.cells = summary.get('cells', [])
        self.failures = summary.get('failures', [])

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'TrendEvaluator':
        with open(path, 'r') as f:
            return cls(json.load(f))

    def accuracy(
        self,
        method: str,
        alpha: Optional[float] = None,
        eps=REFERENCE_EPS,
        lam: Optional[float] = None
    ) -> Optional[float]:
        """Mean accuracy over matching cells (None when nothing matches)"""
        matches = [
            c['accuracy_mean'] for c in self.cells
            if c['method'] == method
            and (alpha is None or float(c['alpha']) == alpha)
            and _eps_key(c['eps_class']) == _eps_key(eps)
            and (lam is None or float(c['lambda']) == lam)
        ]
        return float(np.mean(matches)) if matches else None

    def _values(self, key: str) -> List[float]:
        return sorted({float(c[key]) for c in self.cells})

    def _gate_non_iid(self) -> Optional[Dict[str, Any]]:
        alphas = self._values('alpha')
        if not alphas:
            return None
        alpha = alphas[0]
        ours = self.accuracy('fedauxfdp', alpha, lam=REFERENCE_LAMBDA)
        baselines = [self.accuracy(m, alpha, lam=REFERENCE_LAMBDA) for m in ('fedd_p', 'fedavg_p')]
        if ours is None or any(b is None for b in baselines):
            return None
        margin = ours - max(baselines)
        return {
            'name': f'Non-iid gap @ alpha={alpha}',
            'passed': margin >= NON_IID_MARGIN,
            'display': f'{margin * 100:+.1f} pts (>= {NON_IID_MARGIN * 100:.0f})',
        }

    def _gate_iid_parity(self) -> Optional[Dict[str, Any]]:
        alphas = self._values('alpha')
        if len(alphas) < 2 or alphas[-1] < 1.0:
            return None
        alpha = alphas[-1]
        accs = [self.accuracy(m, alpha, lam=REFERENCE_LAMBDA) for m in ('fedauxfdp', 'fedd_p', 'fedavg_p')]
        accs = [a for a in accs if a is not None]
        if len(accs) < 2:
            return None
        spread = max(accs) - min(accs)
        return {
            'name': f'IID parity @ alpha={alpha}',
            'passed': spread <= IID_SPREAD,
            'display': f'{spread * 100:.1f} pts (<= {IID_SPREAD * 100:.0f})',
        }

    def _gate_dp_cost(self) -> Optional[Dict[str, Any]]:
        worst = None
        for alpha in self._values('alpha'):
            private = self.accuracy('fedauxfdp', alpha, REFERENCE_EPS, REFERENCE_LAMBDA)
            public = self.accuracy('fedauxfdp', alpha, 'none', REFERENCE_LAMBDA)
            if private is None or public is None:
                continue
            cost = public - private
            worst = cost if worst is None else max(worst, cost)
        if worst is None:
            return None
        return {
            'name': f'DP cost @ eps={REFERENCE_EPS}',
            'passed': worst <= DP_COST,
            'display': f'{worst * 100:.1f} pts (<= {DP_COST * 100:.0f})',
        }

    def _gate_dp_monotone(self) -> Optional[Dict[str, Any]]:
        worst_rise = None
        for alpha in self._values('alpha'):
            chain = [self.accuracy('fedauxfdp', alpha, eps, REFERENCE_LAMBDA) for eps in EPS_ORDER]
            chain = [a for a in chain if a is not None]
            for before, after in zip(chain, chain[1:]):
                rise = after - before
                worst_rise = rise if worst_rise is None else max(worst_rise, rise)
        if worst_rise is None:
            return None
        return {
            'name': 'DP monotone in eps',
            'passed': worst_rise <= DP_MONOTONE_SLACK,
            'display': f'max rise {worst_rise * 100:.1f} pts (<= {DP_MONOTONE_SLACK * 100:.0f})',
        }

    def _gate_regularization(self) -> Optional[Dict[str, Any]]:
        strong = self.accuracy('fedauxfdp', None, HEAVY_NOISE_EPS, 1.0)
        weak = self.accuracy('fedauxfdp', None, HEAVY_NOISE_EPS, REFERENCE_LAMBDA)
        if strong is None or weak is None:
            return None
        return {
            'name': f'Regularization @ eps={HEAVY_NOISE_EPS}',
            'passed': strong > weak,
            'display': f'lambda=1 {strong:.3f} vs lambda={REFERENCE_LAMBDA} {weak:.3f}',
        }

    def _gate_regularization_cost(self) -> Optional[Dict[str, Any]]:
        alphas = self._values('alpha')
        if not alphas or alphas[-1] < 1.0:
            return None
        alpha = alphas[-1]
        strong = self.accuracy('fedauxfdp', alpha, 'none', 1.0)
        weak = self.accuracy('fedauxfdp', alpha, 'none', REFERENCE_LAMBDA)
        if strong is None or weak is None:
            return None
        return {
            'name': f'Regularization without DP @ alpha={alpha}',
            'passed': strong <= weak + REGULARIZATION_SLACK,
            'display': f'lambda=1 {strong:.3f} vs lambda={REFERENCE_LAMBDA} {weak:.3f}',
        }

    def evaluate(self) -> Dict[str, Any]:
        """
        Run every applicable gate and print the gate table

        Returns:
            Dict with 'gates', 'passed' and 'timestamp'
        """
        gates = [
            gate for gate in (
                self._gate_non_iid(),
                self._gate_iid_parity(),
                self._gate_dp_cost(),
                self._gate_dp_monotone(),
                self._gate_regularization(),
                self._gate_regularization_cost(),
            )
            if gate is not None
        ]
        passed = all(g['passed'] for g in gates) and not self.failures
        self._print_summary(gates, passed)
        return {
            'gates': gates,
            'passed': passed,
            'timestamp': datetime.now().isoformat(),
        }

    def _print_summary(self, gates: List[Dict[str, Any]], passed: bool):
        print("=" * 60)
        print("TREND GATE CHECK")
        print("=" * 60)

        if not gates:
            print("No gate applies to this sweep")
        for gate in gates:
            status = "✅ PASS" if gate['passed'] else "❌ FAIL"
            print(f"{status} {gate['name']:32s} {gate['display']}")

        if self.failures:
            print(f"❌ FAIL {len(self.failures)} failed cell(s) in the sweep")

        print("\n" + "=" * 60)
        if passed:
            print("✅ ALL GATES PASSED")
        else:
            print("❌ GATES FAILED")
        print("=" * 60)


__all__ = [
    'TrendEvaluator',
    'EPS_ORDER',
]

"""
Randomized property suite behind `cli.py verify`: the Gram-cosine
equality, the MMD decomposition and its Jensen bound, range, symmetry,
invariance and gradient checks. Every check runs under both centering
settings.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

import gradcheck
import linalg
import similarity
from similarity import CkaConfig

logger = logging.getLogger(__name__)

CONFIGS = (CkaConfig(center=True), CkaConfig(center=False))
SCALES = (1e-3, 1.0, 1e3)


@dataclass
class CheckResult:
    name: str
    description: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_deviation <= self.tolerance)


def _pairs(rng: np.random.Generator, trials: int, x_shape, y_shape):
    for t in range(trials):
        cfg = CONFIGS[t % 2]
        yield cfg, rng.standard_normal(x_shape), rng.standard_normal(y_shape)


def check_theorem1(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (8, 5), (8, 7)):
        worst = max(worst, abs(similarity.cka(x, y, cfg) - similarity.cka_via_gram_cosine(x, y, cfg)))
    return CheckResult('theorem1', 'CKA equals the cosine of the Gram matrices', worst, 1e-10)


def check_theorem2_equality(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (6, 4), (6, 4)):
        decomposition = similarity.mmd_decomposition(x, y, cfg)
        worst = max(worst, abs(decomposition.mmd_form - 2.0 * similarity.cka(x, y, cfg)))
    return CheckResult('theorem2_equality', '2 - pairwise term equals 2·CKA', worst, 1e-8)


def check_theorem2_bound(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (6, 4), (6, 4)):
        decomposition = similarity.mmd_decomposition(x, y, cfg)
        worst = max(worst, decomposition.mmd_form - decomposition.jensen_bound, 0.0)
    return CheckResult('theorem2_bound', 'MMD form stays under the Jensen bound', worst, 1e-10)


def check_range(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (8, 5), (8, 7)):
        value = similarity.cka(x, y, cfg)
        worst = max(worst, -value, value - 1.0, 0.0)
    return CheckResult('range', 'CKA lies in [0, 1]', worst, 1e-12)


def check_symmetry(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (8, 5), (8, 7)):
        worst = max(worst, abs(similarity.cka(x, y, cfg) - similarity.cka(y, x, cfg)))
    return CheckResult('symmetry', 'cka(X, Y) = cka(Y, X)', worst, 1e-12)


def check_orthogonal_invariance(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (8, 5), (8, 7)):
        q1 = linalg.random_orthogonal(5, rng)
        q2 = linalg.random_orthogonal(7, rng)
        worst = max(worst, abs(similarity.cka(x @ q1, y @ q2, cfg) - similarity.cka(x, y, cfg)))
    return CheckResult('orthogonal_invariance', 'cka(XQ1, YQ2) = cka(X, Y)', worst, 1e-10)


def check_scale_invariance(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (8, 5), (8, 7)):
        base = similarity.cka(x, y, cfg)
        for a in SCALES:
            for b in SCALES:
                worst = max(worst, abs(similarity.cka(a * x, b * y, cfg) - base))
    return CheckResult('scale_invariance', 'cka(aX, bY) = cka(X, Y)', worst, 1e-10)


def check_gradient(rng, trials) -> CheckResult:
    worst = 0.0
    for cfg, x, y in _pairs(rng, trials, (5, 3), (5, 3)):
        analytic = similarity.cka_gradient(x, y, cfg)
        numeric = gradcheck.finite_difference_gradient(lambda v: similarity.cka(v, y, cfg), x)
        worst = max(worst, gradcheck.max_relative_error(analytic, numeric))
    return CheckResult('gradient', 'cka_gradient matches central differences', worst, 1e-4)


# (check, cap on trials): invariance and gradient suites run fewer instances
CHECKS = [
    (check_theorem1, None),
    (check_theorem2_equality, None),
    (check_theorem2_bound, None),
    (check_range, None),
    (check_symmetry, None),
    (check_orthogonal_invariance, 200),
    (check_scale_invariance, 200),
    (check_gradient, 100),
]


def run_verification(trials: int = 500, seed: int = 0,
                     checks: List = None) -> List[CheckResult]:
    """Run every check with its own seeded generator; results in suite order."""
    results = []
    for index, (check, cap) in enumerate(checks or CHECKS):
        rng = np.random.default_rng([seed, index])
        n = trials if cap is None else min(trials, cap)
        result = check(rng, n)
        logger.info(f"{result.name}: max deviation {result.max_deviation:.3e} (tol {result.tolerance:.0e})")
        results.append(result)
    return results


def first_failure(results: List[CheckResult]):
    return next((r for r in results if not r.passed), None)

"""Differential-privacy calibration and accounting.

* Analytic Gaussian mechanism: the smallest noise scale satisfying the exact
  Gaussian (eps, delta) condition, by bisection.
* Composition of many subsampled Gaussian releases through Renyi-DP bounds
  at integer orders 2..256, converted back to (eps, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractError, NumericError

ORDERS = np.arange(2, 257, dtype=np.float64)
METHODS = ("rdp", "moments")


def std_normal_cdf(t: float) -> float:
    return 0.5 * math.erfc(-t / math.sqrt(2.0))


def gaussian_delta(sigma: float, epsilon: float, sensitivity: float = 1.0) -> float:
    """Smallest delta the Gaussian mechanism with std ``sigma`` achieves at ``epsilon``."""
    a = sensitivity / (2.0 * sigma)
    b = epsilon * sigma / sensitivity
    return std_normal_cdf(a - b) - math.exp(epsilon) * std_normal_cdf(-a - b)


def analytic_gaussian_sigma(epsilon: float, delta: float, sensitivity: float = 1.0,
                            max_steps: int = 200) -> float:
    """Smallest ``sigma`` with ``gaussian_delta(sigma, epsilon) <= delta``."""
    if epsilon <= 0 or not 0 < delta < 1 or sensitivity <= 0:
        raise ContractError("need epsilon > 0, 0 < delta < 1 and sensitivity > 0")
    lo, hi = 1e-3 * sensitivity, 1e3 * sensitivity
    while gaussian_delta(hi, epsilon, sensitivity) > delta:
        hi *= 2.0
        if hi > 1e12 * sensitivity:
            raise NumericError("no noise scale satisfies the Gaussian condition")
    if gaussian_delta(lo, epsilon, sensitivity) <= delta:
        return lo
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            return hi
        if gaussian_delta(mid, epsilon, sensitivity) <= delta:
            hi = mid
        else:
            lo = mid
    if (hi - lo) / hi > 1e-6:
        raise NumericError(f"bisection did not converge in {max_steps} steps")
    return hi


def analytic_gaussian_epsilon(sigma: float, delta: float, sensitivity: float = 1.0) -> float:
    """Smallest ``epsilon`` the Gaussian mechanism with std ``sigma`` satisfies at ``delta``."""
    if gaussian_delta(sigma, 0.0, sensitivity) <= delta:
        return 0.0
    lo, hi = 0.0, 1.0
    while gaussian_delta(sigma, hi, sensitivity) > delta:
        hi *= 2.0
        if hi > 1e6:
            return math.inf
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gaussian_delta(sigma, mid, sensitivity) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def subsampled_gaussian_rdp(q: float, sigma: float, orders=ORDERS) -> np.ndarray:
    """RDP of one Poisson-subsampled Gaussian release at integer ``orders``."""
    orders = np.asarray(orders, dtype=np.float64)
    if sigma <= 0:
        return np.full(orders.shape, np.inf)
    if q >= 1.0:
        return orders / (2.0 * sigma**2)
    if q <= 0:
        return np.zeros(orders.shape)
    out = np.empty(orders.shape)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for n, alpha in enumerate(orders):
        i = np.arange(int(alpha) + 1, dtype=np.float64)
        log_terms = (special.gammaln(alpha + 1) - special.gammaln(i + 1)
                     - special.gammaln(alpha - i + 1)
                     + i * log_q + (alpha - i) * log_1mq
                     + (i * i - i) / (2.0 * sigma**2))
        out[n] = special.logsumexp(log_terms) / (alpha - 1.0)
    return out


def rdp_to_epsilon(rdp: np.ndarray, delta: float, orders=ORDERS, method: str = "rdp") -> float:
    """Best (eps, delta) conversion over orders; ``moments`` uses the classic bound."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        if method == "moments":
            eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
        elif method == "rdp":
            eps = rdp + np.log1p(-1.0 / orders) - (math.log(delta) + np.log(orders)) / (orders - 1.0)
        else:
            raise ContractError(f"unknown accounting method {method!r}")
    eps = eps[np.isfinite(eps)]
    if eps.size == 0:
        return math.inf
    return max(float(eps.min()), 0.0)


@dataclass
class AccountantState:
    """Running privacy ledger for ``steps_taken`` subsampled Gaussian releases."""

    sigma: float
    subsample_rate: float
    delta: float
    steps_taken: int = 0
    method: str = "rdp"
    _rdp: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}")
        if not 0 < self.subsample_rate <= 1:
            raise ContractError("subsample_rate must be in (0, 1]")

    def step(self, count: int = 1) -> None:
        self.steps_taken += count

    def per_step_rdp(self) -> np.ndarray:
        if self._rdp is None:
            self._rdp = subsampled_gaussian_rdp(self.subsample_rate, self.sigma)
        return self._rdp

    def epsilon(self, steps: int | None = None) -> float:
        steps = self.steps_taken if steps is None else steps
        if steps == 0:
            return 0.0
        return rdp_to_epsilon(self.per_step_rdp() * steps, self.delta, method=self.method)


def compose_epsilon(state: AccountantState) -> float:
    """Epsilon after ``state.steps_taken`` releases (``inf`` if no finite bound)."""
    if state.sigma <= 0:
        return math.inf
    return state.epsilon()


def sigma_for_budget(epsilon: float, delta: float, q: float, total_steps: int,
                     method: str = "rdp", lo: float = 1e-3, hi: float = 1e3,
                     rel_tol: float = 1e-5) -> float:
    """Smallest noise multiplier whose composed epsilon stays within ``epsilon``."""
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")

    def eps_at(sigma):
        return compose_epsilon(AccountantState(sigma, q, delta, total_steps, method))

    if eps_at(hi) > epsilon:
        raise NumericError(f"even sigma={hi} exceeds epsilon={epsilon}")
    if eps_at(lo) <= epsilon:
        return lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= epsilon:
            hi = mid
        else:
            lo = mid
        if hi / lo - 1.0 < rel_tol:
            return hi
    raise NumericError("sigma bisection did not converge")


def epsilon_curve(sigmas, q: float, steps: int, delta: float, num_parties: int,
                  method: str = "rdp") -> list[dict]:
    """Epsilon per sigma with secure averaging, and without it.

    Without secure aggregation every party's noisy release is observed on its
    own, so the accounted release count is multiplied by ``num_parties``.
    """
    rows = []
    for sigma in sigmas:
        state = AccountantState(float(sigma), q, delta, steps, method)
        rows.append({
            "sigma": float(sigma),
            "eps_with_mpc": compose_epsilon(state),
            "eps_rdp_no_mpc": state.epsilon(steps * num_parties) if sigma > 0 else math.inf,
        })
    return rows

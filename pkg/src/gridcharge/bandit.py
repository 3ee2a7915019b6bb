"""Combinatorial linear Thompson Sampling state carried by each EV agent.

The learner keeps a ridge-regression system (Gram matrix, response vector)
over the daily decision instants, samples a parameter from the Gaussian
posterior once per day, and plays the top-k instants under the sample.
The same machinery estimates the daily PV production vector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "BanditState",
    "PvLearnerState",
    "SuperArm",
    "sample_parameter",
    "select_super_arm",
    "update_day",
    "update_pv",
    "pseudo_regret",
]


@dataclass
class _RidgePosterior:
    """Gaussian posterior over an m-vector: mean = gram^-1 response."""
    gram: np.ndarray       # m x m, symmetric positive definite
    response: np.ndarray   # m
    estimate: np.ndarray   # m, always gram^-1 response
    scale: float           # exploration scale on the posterior covariance

    @classmethod
    def initial(cls, m: int, scale: float):
        if m < 1:
            raise ValueError("m must be >= 1")
        if scale < 0.0:
            raise ValueError("exploration scale must be >= 0")
        return cls(gram=np.eye(m), response=np.zeros(m),
                   estimate=np.zeros(m), scale=float(scale))

    @property
    def m(self) -> int:
        return self.response.shape[0]


class BanditState(_RidgePosterior):
    """Reward learner: estimate is the per-instant expected charging reward."""


class PvLearnerState(_RidgePosterior):
    """PV learner: estimate is the per-instant PV power in watt."""


@dataclass(frozen=True)
class SuperArm:
    """A set of decision instants played together on one day."""
    instants: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "instants", tuple(sorted(set(self.instants))))

    def __contains__(self, instant: int) -> bool:
        return instant in set(self.instants)

    def __len__(self) -> int:
        return len(self.instants)

    def mask(self, m: int) -> np.ndarray:
        if self.instants and not (0 <= min(self.instants) <= max(self.instants) < m):
            raise ValueError("super-arm instants out of range")
        out = np.zeros(m)
        out[list(self.instants)] = 1.0
        return out

    def value(self, theta: np.ndarray) -> float:
        return float(sum(theta[i] for i in self.instants))


def sample_parameter(state: _RidgePosterior, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(estimate, scale^2 gram^-1).

    Uses the Cholesky factor of the Gram matrix, which exists by the SPD
    invariant; scale 0 returns the mean exactly.
    """
    if state.scale == 0.0:
        return state.estimate.copy()
    chol = np.linalg.cholesky(state.gram)
    z = rng.standard_normal(state.m)
    return state.estimate + state.scale * np.linalg.solve(chol.T, z)


def select_super_arm(theta_sample: np.ndarray, candidates, k: int) -> SuperArm:
    """Top-k candidate instants under the sampled parameter.

    Linear super-arm value means the greedy top-k is exactly optimal over
    all size-k subsets. Ties break toward the lowest instant index.
    """
    cand = sorted(set(int(c) for c in candidates))
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > len(cand):
        raise ValueError(f"k={k} exceeds {len(cand)} candidates")
    ordered = sorted(cand, key=lambda c: (-theta_sample[c], c))
    return SuperArm(tuple(ordered[:k]))


def _updated(state, mask, values, rule):
    mask = np.asarray(mask, dtype=float)
    values = np.asarray(values, dtype=float)
    if mask.shape != (state.m,) or values.shape != (state.m,):
        raise ValueError("mask/values dimension mismatch with state")
    if np.any((mask == 0.0) & (values != 0.0)):
        raise ValueError("values must be zero at instants outside the mask")
    if rule == "rank_one":
        gram = state.gram + np.outer(mask, mask)
    elif rule == "per_arm":
        gram = state.gram + np.diag(mask)
    else:
        raise ValueError(f"unknown update rule {rule!r}")
    response = state.response + values
    estimate = np.linalg.solve(gram, response)
    return type(state)(gram=gram, response=response,
                       estimate=estimate, scale=state.scale)


def update_day(state: BanditState, played_mask, rewards,
               rule: str = "rank_one") -> BanditState:
    """End-of-day reward update.

    "rank_one" adds the full day-mask outer product to the Gram matrix;
    "per_arm" adds one diagonal unit per played instant (the semi-bandit
    reading of the same statistics). Estimate is re-solved, never stale.
    """
    return _updated(state, played_mask, rewards, rule)


def update_pv(state: PvLearnerState, observed_mask, observations,
              rule: str = "rank_one") -> PvLearnerState:
    """End-of-day PV update from the instants with a sensor reading.

    The default adds the full observation-mask outer product. With a dense
    repeating mask that system drifts (the estimate grows linearly in the
    day count off the mask mean), so callers that observe whole connection
    windows should prefer the "per_arm" diagonal rule, under which each
    coordinate converges to its running mean.
    """
    return _updated(state, observed_mask, observations, rule)


def pseudo_regret(true_theta: np.ndarray, daily_selections, k) -> dict:
    """Cumulative regret traces over a run of daily selections.

    `daily_selections` is a sequence of (SuperArm, theta_hat_d) pairs; `k`
    is the optimal super-arm size, an int or one value per day. Returns
    cumulative traces under two scorings of the played arm:
      "estimated": optimal true value minus the day's estimated played value
      "true":      optimal true value minus the true played value
    The "true" trace is non-decreasing by optimality of the best arm.
    """
    true_theta = np.asarray(true_theta, dtype=float)
    n = len(daily_selections)
    ks = [int(k)] * n if np.isscalar(k) else [int(x) for x in k]
    if len(ks) != n:
        raise ValueError("one k per day required")
    est = np.zeros(n)
    tru = np.zeros(n)
    for d, ((arm, theta_hat_d), kd) in enumerate(zip(daily_selections, ks)):
        best = select_super_arm(true_theta, range(true_theta.shape[0]), kd)
        opt = best.value(true_theta)
        est[d] = opt - arm.value(np.asarray(theta_hat_d, dtype=float))
        tru[d] = opt - arm.value(true_theta)
    return {"estimated": np.cumsum(est), "true": np.cumsum(tru)}

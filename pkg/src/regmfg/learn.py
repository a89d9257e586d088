"""Model-free learning of the regularized mean-field equilibrium.

Fitted Q-learning on the class ``{(x, u) -> <q_x, u> - Omega(u)}`` replaces the
optimal Q-function, an empirical next-state mixture replaces the mean-field
update, and the two are iterated from an initial mean field.

Every random draw comes from a sub-stream keyed by
``(seed, repetition, k, stage, index)`` so results do not depend on how work is
scheduled.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .exact import (
    QFactors,
    greedy_policy,
    mean_field_update,
    solve_q_star,
)
from .model import GameModel, Regularizer, check_simplex

log = logging.getLogger(__name__)

STAGE_H1 = 1
STAGE_H2 = 2
STAGE_FINAL = 3


class FitError(RuntimeError):
    def __init__(self, state, message):
        super().__init__(f"state {state}: {message}")
        self.state = state


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def simplex_measure(n_actions: int) -> float:
    """Lebesgue measure of the simplex in the chart of its first ``n-1`` coordinates."""
    return 1.0 / math.factorial(n_actions - 1)


@dataclass(frozen=True)
class GenerativeSimulator:
    """Sampler of (regularized reward, next state) for any (x, u, mu)."""

    model: GameModel
    reg: Regularizer
    seed: int = 0

    def stream(self, *key) -> np.random.Generator:
        return substream(self.seed, *key)

    def draw(self, x: int, u, mu, rng: Optional[np.random.Generator] = None) -> tuple[float, int]:
        rng = rng if rng is not None else self.stream()
        r, y = self.draw_batch(np.array([x]), np.asarray(u, dtype=float)[None, :], mu, rng)
        return float(r[0]), int(y[0])

    def draw_batch(self, xs, us, mu, rng: np.random.Generator):
        mu = check_simplex(mu, "mean field")
        xs = np.asarray(xs, dtype=int)
        us = np.asarray(us, dtype=float)
        rewards = np.einsum("ta,ta->t", self.model.reward(mu)[xs], us) - np.asarray(self.reg.value(us))
        trans = np.einsum("ta,tay->ty", us, self.model.kernel(mu)[xs])
        return rewards, sample_categorical(trans, rng)


def sample_categorical(probs, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(cdf.shape[:-1])
    return np.minimum((cdf < u[..., None] * cdf[..., -1:]).sum(axis=-1), cdf.shape[-1] - 1)


# ---------------------------------------------------------------------------
# Behavior policies on the simplex
# ---------------------------------------------------------------------------


class BehaviorPolicy:
    """Density over mixed actions used to explore; ``floor`` is its infimum."""

    n_actions: int
    floor: float

    def density(self, x, u):
        raise NotImplementedError

    def sample(self, x, size: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def weights(self, xs, us) -> np.ndarray:
        return 1.0 / (simplex_measure(self.n_actions) * self.density(xs, us))


@dataclass(frozen=True)
class UniformSimplexBehavior(BehaviorPolicy):
    n_actions: int

    @property
    def floor(self) -> float:
        return 1.0 / simplex_measure(self.n_actions)

    def density(self, x, u):
        u = np.asarray(u, dtype=float)
        return np.full(u.shape[:-1], self.floor)

    def weights(self, xs, us):
        return np.ones(np.asarray(us).shape[:-1])

    def sample(self, x, size, rng):
        # normalized exponential spacings are uniform on the simplex
        e = rng.standard_exponential((size, self.n_actions))
        return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class DirichletBehavior(BehaviorPolicy):
    """Symmetric Dirichlet(c) with ``0 < c <= 1`` so the density stays bounded below."""

    n_actions: int
    concentration: float

    def __post_init__(self):
        if not 0 < self.concentration <= 1:
            raise ValueError("concentration must lie in (0, 1] for a positive density floor")

    def _log_norm(self):
        c, n = self.concentration, self.n_actions
        return gammaln(n * c) - n * gammaln(c)

    def density(self, x, u):
        u = np.asarray(u, dtype=float)
        return np.exp(self._log_norm() + (self.concentration - 1) * np.log(u).sum(axis=-1))

    @property
    def floor(self) -> float:
        return float(self.density(0, np.full(self.n_actions, 1.0 / self.n_actions)))

    def sample(self, x, size, rng):
        return rng.dirichlet(np.full(self.n_actions, self.concentration), size=size)


def uniform_simplex_behavior(n_actions: int) -> UniformSimplexBehavior:
    return UniformSimplexBehavior(int(n_actions))


# ---------------------------------------------------------------------------
# Fitted Q-learning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.states)


def generate_batch(sim: GenerativeSimulator, mu, n: int, behavior: BehaviorPolicy, nu=None,
                   rng: Optional[np.random.Generator] = None, min_per_state: int = 0,
                   max_retries: int = 10) -> SampleBatch:
    """``n`` i.i.d. tuples with x ~ nu, u ~ behavior(x) and simulator outputs.

    If ``min_per_state`` is set, the batch is redrawn (at most ``max_retries``
    times) until every state in the support of ``nu`` has that many samples.
    """
    if n < 1:
        raise ValueError("batch size must be >= 1")
    nx = sim.model.n_states
    nu = np.full(nx, 1.0 / nx) if nu is None else check_simplex(nu, "nu")
    rng = rng if rng is not None else sim.stream()
    support = np.flatnonzero(nu > 0)
    for _ in range(max_retries + 1):
        xs = rng.choice(nx, size=n, p=nu)
        counts = np.bincount(xs, minlength=nx)
        if counts[support].min() >= min_per_state:
            break
    us = np.empty((n, sim.model.n_actions))
    for x in np.unique(xs):
        sel = xs == x
        us[sel] = behavior.sample(x, int(sel.sum()), rng)
    rewards, ys = sim.draw_batch(xs, us, mu, rng)
    return SampleBatch(xs, us, rewards, ys, behavior.weights(xs, us))


def _ridge(design: np.ndarray) -> float:
    return 1e-8 * np.trace(design) / design.shape[0]


def fit_q_factors(batch: SampleBatch, q_prev: QFactors, beta: float, reg: Regularizer,
                  min_samples: Optional[int] = None, cond_limit: float = 1e10) -> QFactors:
    """One regression round of fitted Q-learning.

    Targets are ``r_t + beta max_u Q_prev(y_t, u)``; for each state the weighted
    least-squares fit of ``<q, u_t> - Omega(u_t)`` to them is solved from the
    normal equations.  A ridge of ``1e-8 trace / n_actions`` is added only if
    the weighted design is ill-conditioned.  States with fewer than
    ``min_samples`` tuples (default ``n_actions``) keep their previous factors.
    """
    nx, na = q_prev.factors.shape
    min_samples = na if min_samples is None else min_samples
    targets = batch.rewards + beta * np.asarray(reg.conjugate(q_prev.factors))[batch.next_states]
    response = targets + np.asarray(reg.value(batch.actions))
    out = q_prev.factors.copy()
    for x in range(nx):
        sel = batch.states == x
        count = int(sel.sum())
        if count == 0:
            continue
        if count < min_samples:
            warnings.warn(f"state {x} has {count} samples (< {min_samples}); keeping previous fit")
            continue
        U, w, z = batch.actions[sel], batch.weights[sel], response[sel]
        design = U.T @ (w[:, None] * U)
        rhs = U.T @ (w * z)
        if np.linalg.matrix_rank(U) < na:
            raise FitError(x, "sampled mixed actions do not span the simplex")
        if np.linalg.cond(design) > cond_limit:
            design = design + _ridge(design) * np.eye(na)
        q = np.linalg.solve(design, rhs)
        if not np.all(np.isfinite(q)):
            raise FitError(x, "regression produced non-finite coefficients")
        out[x] = q
    return QFactors(out, reg)


def fitted_q_learning(sim: GenerativeSimulator, mu, n_samples: int, n_rounds: int,
                      behavior: Optional[BehaviorPolicy] = None, nu=None, seed: Optional[int] = None,
                      key: tuple = ()) -> QFactors:
    """Learned approximation of the optimal Q-function at ``mu``: ``n_rounds``
    regressions from Q = 0, each on a fresh batch of ``n_samples`` tuples."""
    if n_samples < 1 or n_rounds < 1:
        raise ValueError("n_samples and n_rounds must be >= 1")
    model, reg = sim.model, sim.reg
    behavior = behavior or uniform_simplex_behavior(model.n_actions)
    seed = sim.seed if seed is None else seed
    na = model.n_actions
    q = QFactors.zeros(model.n_states, na, reg)
    for l in range(n_rounds):
        rng = substream(seed, *key, l)
        batch = generate_batch(sim, mu, n_samples, behavior, nu, rng, min_per_state=3 * na)
        q = fit_q_factors(batch, q, model.discount, reg, min_samples=3 * na)
    return q


def empirical_mean_field_update(sim: GenerativeSimulator, mu, Q: QFactors, m: int,
                                seed: Optional[int] = None, key: tuple = ()) -> np.ndarray:
    """Mean-field update with each conditional next-state law replaced by the
    empirical law of ``m`` draws (one sub-stream per state)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    mu = check_simplex(mu, "mean field")
    seed = sim.seed if seed is None else seed
    policy = greedy_policy(Q)
    trans = np.einsum("xa,xay->xy", policy, sim.model.kernel(mu))
    out = np.zeros(sim.model.n_states)
    for x in range(sim.model.n_states):
        counts = substream(seed, *key, x).multinomial(m, trans[x] / trans[x].sum())
        out += mu[x] * counts / m
    return out


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LearnerConfig:
    K: int = 20
    N: int = 1000
    L: int = 10
    M: int = 1000
    seed: int = 0
    nu: Optional[tuple] = None
    exact_tol: float = 1e-13

    def __post_init__(self):
        if self.K < 0 or min(self.N, self.L, self.M) < 1:
            raise ValueError("need K >= 0 and N, L, M >= 1")


@dataclass(frozen=True)
class TraceRecord:
    repetition: int
    k: int
    l1_step: float
    wall_ms: float
    seed_key: tuple


@dataclass
class LearnResult:
    mean_field: np.ndarray
    q_factors: Optional[QFactors]
    policy: Optional[np.ndarray]
    trace: list = field(default_factory=list)
    history: list = field(default_factory=list)
    error: Optional[Exception] = None

    @property
    def values(self) -> np.ndarray:
        return self.q_factors.values()


def learn_mfe(sim: GenerativeSimulator, config: LearnerConfig, mu0=None, repetition: int = 0,
              exact_operators: bool = False) -> LearnResult:
    """Iterate the sampled MFE operator ``config.K`` times, then fit Q once more
    at the final mean field and return its greedy policy.

    With ``exact_operators`` the sampled operators are swapped for the exact
    ones (infinite-sample limit), reproducing the Picard iterates of
    :func:`regmfg.exact.solve_mfe`.  If a fit fails, the partial trace is
    attached to the raised :class:`FitError` as ``result``.
    """
    model, reg = sim.model, sim.reg
    mu = check_simplex(np.full(model.n_states, 1.0 / model.n_states) if mu0 is None else mu0, "mu0").copy()
    nu = None if config.nu is None else np.asarray(config.nu, dtype=float)
    result = LearnResult(mu, None, None, history=[mu])

    def h1(mu, k):
        if exact_operators:
            return solve_q_star(model, reg, mu, config.exact_tol)
        stage = STAGE_FINAL if k == config.K else STAGE_H1
        return fitted_q_learning(sim, mu, config.N, config.L, nu=nu, seed=config.seed,
                                 key=(repetition, k, stage))

    def h2(mu, q, k):
        if exact_operators:
            return mean_field_update(model, mu, q)
        return empirical_mean_field_update(sim, mu, q, config.M, seed=config.seed, key=(repetition, k, STAGE_H2))

    try:
        for k in range(config.K):
            t0 = time.perf_counter()
            nxt = h2(mu, h1(mu, k), k)
            result.trace.append(TraceRecord(repetition, k, float(np.abs(nxt - mu).sum()),
                                            1e3 * (time.perf_counter() - t0), (config.seed, repetition, k)))
            mu = nxt
            result.history.append(mu)
        result.mean_field = mu
        result.q_factors = h1(mu, config.K)
        result.policy = greedy_policy(result.q_factors)
    except FitError as exc:
        exc.result = result
        raise
    return result


def error_propagation_bound(step_errors, k_h: float, initial_gap: float) -> float:
    """Bound on ``||mu_K - mu*||_1`` from per-step operator errors
    ``e_k = ||mu_{k+1} - H(mu_k)||_1``: ``sum_k K_H^(K-k-1) e_k + K_H^K ||mu_0 - mu*||_1``."""
    e = np.asarray(step_errors, dtype=float)
    K = len(e)
    powers = k_h ** (K - 1 - np.arange(K))
    return float(powers @ e + k_h ** K * initial_gap)


# ---------------------------------------------------------------------------
# Sample sizes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleComplexityInputs:
    """Constants entering the fitted-Q sample size.

    ``alpha`` is the corner-measure constant of the simplex; 1/2 is exact for
    the segment (|A| = 2) and only a placeholder for larger action sets.
    """

    n_actions: int
    beta: float
    r_max: float
    Q_Lip: float
    L_reg: float
    V_F: float
    V_Fmax: float
    pi0: float
    alpha: float = 0.5
    E_F: float = 0.0

    @property
    def Q_max(self) -> float:
        return self.r_max / (1.0 - self.beta)

    @property
    def L_m(self) -> float:
        return (1.0 + self.beta) * self.Q_max + self.r_max

    @property
    def m_U(self) -> float:
        return simplex_measure(self.n_actions)

    @property
    def C(self) -> float:
        return self.L_m ** 2 / (self.m_U * self.pi0)

    @property
    def gamma(self) -> float:
        return 512.0 * self.C ** 2

    @property
    def V(self) -> float:
        return self.V_F + self.V_Fmax

    @property
    def Upsilon(self) -> float:
        base = 64.0 * math.e * self.Q_max * self.L_m * (1.0 + self.beta) / (self.m_U * self.pi0)
        return 8.0 * math.e ** 2 * (self.V_F + 1) * (self.V_Fmax + 1) * base ** self.V

    def _corner(self) -> float:
        n = self.n_actions
        return self.m_U * math.factorial(n) / (self.alpha * (2.0 / (self.Q_Lip + self.L_reg)) ** (n - 1))

    @property
    def Lambda(self) -> float:
        return self._corner() ** (1.0 / self.n_actions) / (1.0 - self.beta)

    @property
    def Delta(self) -> float:
        return (self._corner() * self.E_F) ** (1.0 / self.n_actions) / (1.0 - self.beta)


@dataclass(frozen=True)
class SampleSize:
    n: int
    value: float
    horizon_ok: Optional[bool] = None
    log_argument_ok: bool = True


def sample_size_m1(eps: float, delta: float, L: int, inputs: SampleComplexityInputs) -> SampleSize:
    """Fitted-Q batch size for sup-norm error ``eps`` with probability ``1 - delta``.

    Reported only; it is vacuous at practical scales.  ``horizon_ok`` is the
    companion requirement ``beta^L Q_max / (1 - beta) < eps / 2``.
    """
    if not (0 < eps < 1 and 0 < delta < 1) or L < 1:
        raise ValueError("need eps, delta in (0, 1) and L >= 1")
    na, V = inputs.n_actions, inputs.V
    two_lam = 2.0 * inputs.Lambda
    log_lead = math.log(inputs.gamma) + 4 * na * (math.log(two_lam) - math.log(eps))
    log_arg = (math.log(inputs.Upsilon) + 2 * V * na * (math.log(two_lam) - math.log(eps))
               + math.log(L) - math.log(delta))
    horizon_ok = inputs.beta ** L / (1.0 - inputs.beta) * inputs.Q_max < eps / 2.0
    if log_arg <= 0:
        warnings.warn("m1 logarithm argument <= 1; returning 1")
        return SampleSize(1, 1.0, horizon_ok, False)
    log_value = log_lead + math.log(log_arg)
    if log_value < 700:
        value = math.exp(log_value)
        return SampleSize(int(math.ceil(value)), value, horizon_ok)
    import mpmath

    with mpmath.workdps(max(30, int(log_value / 2.3) + 20)):
        exact = mpmath.exp(log_lead) * log_arg
        return SampleSize(int(mpmath.ceil(exact)), math.inf, horizon_ok)


def sample_size_m2(eps: float, delta: float, n_states: int) -> int:
    """Draws per state that put the empirical mean-field update within ``eps``
    (l1) of the exact one with probability ``1 - delta``."""
    if not (0 < eps <= 1 and 0 < delta <= 1):
        raise ValueError("eps and delta must lie in (0, 1]")
    return int(math.ceil(n_states ** 2 / eps ** 2 * math.log(2 * n_states ** 2 / delta)))

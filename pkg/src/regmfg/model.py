"""Game primitives: simplex checks, the lifted (mixed-action) model and regularizers.

Probability vectors are plain float arrays; a mean-field term has shape
``(n_states,)``, a mixed action ``(n_actions,)`` and a policy
``(n_states, n_actions)``.  Model callables take a mean-field term and return
full tables, so one call gives the kernel ``p[x, a, y]`` or reward ``r[x, a]``
for every state-action pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax, xlogy

SIMPLEX_TOL = 1e-12


class SimplexError(ValueError):
    """An input that should be a probability vector is not one."""


class ParameterError(ValueError):
    """A model or regularizer parameter is outside its admissible range."""


def check_simplex(v, name: str = "vector", tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Return ``v`` as a float array after checking it lies on the simplex.

    Works on the last axis, so a stack of distributions is checked row-wise.
    Nothing is renormalized; use :func:`normalize` for that explicitly.
    """
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise SimplexError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise SimplexError(f"{name} has non-finite entries")
    if np.any(arr < 0.0):
        raise SimplexError(f"{name} has negative entries: {arr}")
    total = arr.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > tol):
        raise SimplexError(f"{name} sums to {total}, not 1")
    return arr


def normalize(v) -> np.ndarray:
    """Explicit renormalization of a nonnegative vector (last axis)."""
    arr = np.asarray(v, dtype=float)
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise SimplexError("cannot normalize a vector with negative or non-finite entries")
    total = arr.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise SimplexError("cannot normalize a zero vector")
    return arr / total


def l1(a, b) -> float:
    return float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())


def point_mass(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def uniform(size: int) -> np.ndarray:
    return np.full(size, 1.0 / size)


@dataclass(frozen=True)
class StateSpace:
    size: int

    def __post_init__(self):
        if int(self.size) < 1:
            raise ParameterError("state space needs at least one state")


@dataclass(frozen=True)
class ActionSpace:
    size: int

    def __post_init__(self):
        if int(self.size) < 1:
            raise ParameterError("action space needs at least one action")


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------


class Regularizer:
    """Convex penalty on the action simplex together with its Fenchel conjugate.

    Subclasses implement ``value``, ``conjugate`` and ``conjugate_gradient``
    over the last axis and set ``modulus`` (strong convexity w.r.t. l1) and
    ``lipschitz_bound``.
    """

    n_actions: int
    modulus: float
    lipschitz_bound: float

    def value(self, u) -> np.ndarray | float:
        raise NotImplementedError

    def conjugate(self, q) -> np.ndarray | float:
        raise NotImplementedError

    def conjugate_gradient(self, q) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class EntropyRegularizer(Regularizer):
    """Weighted negative entropy ``weight * sum_a u(a) ln u(a)``.

    ``0 ln 0`` is taken as 0.  The conjugate is a scaled log-sum-exp and its
    gradient the softmax at temperature ``weight``.  Entropy is not Lipschitz up
    to the boundary, so ``lipschitz_bound`` is computed on the clipped simplex
    ``{u : u(a) >= clip}``: the gradient spread there is
    ``weight * ln((1 - (n-1) clip) / clip)`` and half of it bounds the change
    per unit of l1 distance between simplex points.
    """

    weight: float
    n_actions: int
    clip: float = 1e-6

    def __post_init__(self):
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ParameterError(f"entropy weight must be positive, got {self.weight}")
        if self.n_actions < 1:
            raise ParameterError("n_actions must be >= 1")
        if not (0 < self.clip < 1.0 / self.n_actions):
            raise ParameterError("clip must lie in (0, 1/n_actions)")

    @property
    def modulus(self) -> float:
        return self.weight

    @property
    def lipschitz_bound(self) -> float:
        if self.n_actions == 1:
            return 0.0
        top = 1.0 - (self.n_actions - 1) * self.clip
        return self.weight * math.log(top / self.clip) / 2.0

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return self.weight * xlogy(u, u).sum(axis=-1)

    def conjugate(self, q):
        q = np.asarray(q, dtype=float)
        return self.weight * logsumexp(q / self.weight, axis=-1)

    def conjugate_gradient(self, q):
        q = np.asarray(q, dtype=float)
        return softmax(q / self.weight, axis=-1)


@dataclass(frozen=True)
class ZeroRegularizer(Regularizer):
    """``Omega = 0``.  Not strongly convex; only useful for reward bookkeeping
    and degenerate checks.  The conjugate gradient picks the first maximizer."""

    n_actions: int
    modulus: float = 0.0
    lipschitz_bound: float = 0.0

    def value(self, u):
        u = np.asarray(u, dtype=float)
        return np.zeros(u.shape[:-1]) if u.ndim > 1 else 0.0

    def conjugate(self, q):
        return np.asarray(q, dtype=float).max(axis=-1)

    def conjugate_gradient(self, q):
        q = np.asarray(q, dtype=float)
        idx = q.argmax(axis=-1)
        return np.eye(q.shape[-1])[idx]


def entropy_regularizer(weight: float, n_actions: int, clip: float = 1e-6) -> EntropyRegularizer:
    return EntropyRegularizer(float(weight), int(n_actions), clip)


# ---------------------------------------------------------------------------
# Game model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GameModel:
    """Finite mean-field game ``(X, A, p, r)`` with discount ``beta``.

    ``kernel_fn(mu)`` returns ``p[x, a, y]`` and ``reward_fn(mu)`` returns
    ``r[x, a]``.  With ``vectorized=True`` both must also accept a stack of
    mean-field terms of shape ``(B, n_states)`` and return the stacked tables;
    otherwise batches are evaluated one at a time.

    ``lipschitz`` optionally carries analytic ``(L1, K1)`` constants.
    """

    states: StateSpace
    actions: ActionSpace
    kernel_fn: Callable[[np.ndarray], np.ndarray]
    reward_fn: Callable[[np.ndarray], np.ndarray]
    discount: float
    name: str = "custom"
    vectorized: bool = False
    lipschitz: Optional[tuple[float, float]] = None
    mean_field_free: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.discount < 1.0):
            raise ParameterError(f"discount must lie in (0, 1), got {self.discount}")
        nx = self.n_states
        probes = [uniform(nx)] + [point_mass(i, nx) for i in range(nx)]
        for mu in probes:
            p = np.asarray(self.kernel_fn(mu), dtype=float)
            r = np.asarray(self.reward_fn(mu), dtype=float)
            if p.shape != (nx, self.n_actions, nx):
                raise ParameterError(f"kernel table has shape {p.shape}")
            if r.shape != (nx, self.n_actions):
                raise ParameterError(f"reward table has shape {r.shape}")
            check_simplex(p, "kernel row")
            if not np.all(np.isfinite(r)):
                raise ParameterError("reward table has non-finite entries")

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def n_actions(self) -> int:
        return self.actions.size

    def kernel(self, mu) -> np.ndarray:
        return np.asarray(self.kernel_fn(np.asarray(mu, dtype=float)), dtype=float)

    def reward(self, mu) -> np.ndarray:
        return np.asarray(self.reward_fn(np.asarray(mu, dtype=float)), dtype=float)

    def kernel_batch(self, mus) -> np.ndarray:
        mus = np.asarray(mus, dtype=float)
        if self.vectorized:
            return np.asarray(self.kernel_fn(mus), dtype=float)
        return np.stack([self.kernel(m) for m in mus])

    def reward_batch(self, mus) -> np.ndarray:
        mus = np.asarray(mus, dtype=float)
        if self.vectorized:
            return np.asarray(self.reward_fn(mus), dtype=float)
        return np.stack([self.reward(m) for m in mus])

    def p(self, x: int, a: int, mu) -> np.ndarray:
        return self.kernel(mu)[x, a]

    def r(self, x: int, a: int, mu) -> float:
        return float(self.reward(mu)[x, a])

    def with_reward_scale(self, factor: float) -> "GameModel":
        fn = self.reward_fn
        lip = None if self.lipschitz is None else (self.lipschitz[0] * abs(factor), self.lipschitz[1])
        return GameModel(self.states, self.actions, self.kernel_fn, lambda mu: factor * np.asarray(fn(mu)),
                         self.discount, name=f"{self.name}*{factor}", vectorized=self.vectorized,
                         lipschitz=lip, mean_field_free=self.mean_field_free, params=dict(self.params))


def tabular_model(kernel, reward, discount: float, name: str = "tabular") -> GameModel:
    """Model whose kernel and reward ignore the mean-field term."""
    p = check_simplex(np.array(kernel, dtype=float), "kernel row")
    r = np.array(reward, dtype=float)
    nx, na = r.shape

    def kernel_fn(mu):
        mu = np.asarray(mu)
        return np.broadcast_to(p, mu.shape[:-1] + p.shape).copy()

    def reward_fn(mu):
        mu = np.asarray(mu)
        return np.broadcast_to(r, mu.shape[:-1] + r.shape).copy()

    return GameModel(StateSpace(nx), ActionSpace(na), kernel_fn, reward_fn, discount, name=name,
                     vectorized=True, mean_field_free=True)


def affine_mean_model(kernel_low, kernel_high, reward_base, reward_slope, discount: float,
                      name: str = "affine-mean") -> GameModel:
    """Model coupled to the population through its state mean.

    With ``m = <mu> / (n_states - 1)`` in [0, 1] (``<mu> = sum_x x mu(x)``):
    ``p = (1 - m) kernel_low + m kernel_high`` and
    ``r = reward_base + m reward_slope``.
    """
    p0 = check_simplex(np.array(kernel_low, dtype=float), "kernel_low row")
    p1 = check_simplex(np.array(kernel_high, dtype=float), "kernel_high row")
    r0 = np.array(reward_base, dtype=float)
    r1 = np.array(reward_slope, dtype=float)
    nx, na = r0.shape
    scale = max(nx - 1, 1)
    idx = np.arange(nx, dtype=float)
    static = np.array_equal(p0, p1) and not np.any(r1)

    def m_of(mu):
        return (np.asarray(mu) @ idx / scale)[..., None, None]

    def kernel_fn(mu):
        m = m_of(mu)[..., None]
        return (1.0 - m) * p0 + m * p1

    def reward_fn(mu):
        m = m_of(mu)
        return r0 + m * r1

    return GameModel(StateSpace(nx), ActionSpace(na), kernel_fn, reward_fn, discount, name=name,
                     vectorized=True, mean_field_free=static)


BENCHMARK_PARAMS = dict(eta=0.6, alpha=0.3, kappa=0.7, xi=0.2, tau=0.2, lam=0.2, gamma=0.15, beta=0.2)


def benchmark_model(eta=0.6, alpha=0.3, kappa=0.7, xi=0.2, tau=0.2, lam=0.2, beta=0.2) -> GameModel:
    """Two-state, two-action congestion example.

    ``p(1|0,0)=eta, p(1|1,0)=1-alpha, p(1|0,1)=kappa, p(1|1,1)=1-xi`` and
    ``r(x,a,mu) = tau (1-<mu>)(1-x) + lam <mu> (1-a)``.
    """
    p = np.array([
        [[1 - eta, eta], [1 - kappa, kappa]],
        [[alpha, 1 - alpha], [xi, 1 - xi]],
    ])
    x = np.array([[0.0], [1.0]])
    a = np.array([[0.0, 1.0]])
    params = dict(eta=eta, alpha=alpha, kappa=kappa, xi=xi, tau=tau, lam=lam, beta=beta)

    def kernel_fn(mu):
        mu = np.asarray(mu)
        return np.broadcast_to(p, mu.shape[:-1] + p.shape).copy()

    def reward_fn(mu):
        m = np.asarray(mu)[..., 1][..., None, None]
        return tau * (1 - m) * (1 - x) + lam * m * (1 - a)

    defaults = {k: BENCHMARK_PARAMS[k] for k in params}
    lip = (0.2, 0.2) if params == defaults else None
    return GameModel(StateSpace(2), ActionSpace(2), kernel_fn, reward_fn, beta, name="paper-sec5",
                     vectorized=True, lipschitz=lip, params=params)


def benchmark_regularizer(gamma: float = 0.15) -> EntropyRegularizer:
    return entropy_regularizer(gamma, 2)


# ---------------------------------------------------------------------------
# Lifted model
# ---------------------------------------------------------------------------


def lift_transition(model: GameModel, x: int, u, mu) -> np.ndarray:
    """``P(.|x,u,mu) = sum_a p(.|x,a,mu) u(a)``."""
    u = check_simplex(u, "mixed action")
    mu = check_simplex(mu, "mean field")
    return u @ model.kernel(mu)[x]


def lift_reward(model: GameModel, x: int, u, mu, reg: Regularizer) -> float:
    """Regularized lifted reward ``sum_a r(x,a,mu) u(a) - Omega(u)``."""
    u = check_simplex(u, "mixed action")
    mu = check_simplex(mu, "mean field")
    return float(model.reward(mu)[x] @ u - reg.value(u))


def q_table(model: GameModel, mu, V) -> np.ndarray:
    """All per-state vectors ``q_x(a) = r(x,a,mu) + beta sum_y V(y) p(y|x,a,mu)``."""
    V = np.asarray(V, dtype=float)
    return model.reward(mu) + model.discount * model.kernel(mu) @ V


def q_vector(model: GameModel, mu, V, x: int) -> np.ndarray:
    return q_table(model, mu, V)[x]

"""Model-based solver: regularized Bellman operator, the MFE operator and its
fixed point, plus the Lipschitz/contraction constants that certify it."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    GameModel,
    Regularizer,
    check_simplex,
    point_mass,
    q_table,
)

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual, iterations, history=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.history = history or []


class AssumptionError(RuntimeError):
    """The contraction constant is not below one and no override was given."""


class ConstantsError(ValueError):
    pass


@dataclass(frozen=True)
class QFactors:
    """Q(x, u) = <q_x, u> - Omega(u), stored as the ``(n_states, n_actions)`` table of q_x."""

    factors: np.ndarray
    regularizer: Regularizer

    def __call__(self, x: int, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(self.factors[x] @ u - self.regularizer.value(u))

    def evaluate(self, u) -> np.ndarray:
        """Q on a stack of mixed actions ``u`` of shape ``(k, n_actions)``; returns ``(n_states, k)``."""
        u = np.asarray(u, dtype=float)
        return self.factors @ u.T - self.regularizer.value(u)[None, :]

    def values(self) -> np.ndarray:
        """max_u Q(x, u) for every state, in closed form via the conjugate."""
        return np.asarray(self.regularizer.conjugate(self.factors))

    @classmethod
    def zeros(cls, n_states, n_actions, reg):
        return cls(np.zeros((n_states, n_actions)), reg)


def bellman_T(model: GameModel, reg: Regularizer, mu, V) -> np.ndarray:
    """T_mu V(x) = sup_u [R_reg(x,u,mu) + beta sum_y V(y) P(y|x,u,mu)] = Omega*(q_x)."""
    return np.asarray(reg.conjugate(q_table(model, mu, V)))


def solve_q_star(model: GameModel, reg: Regularizer, mu, tol: float = 1e-12,
                 max_iter: int = 100_000) -> QFactors:
    """Optimal regularized Q-function for a frozen mean-field term.

    Value iteration from V = 0, stopped once successive iterates are within
    ``tol (1 - beta) / beta``, which puts the last iterate within ``tol`` of the
    fixed point.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    mu = check_simplex(mu, "mean field")
    beta = model.discount
    stop = tol * (1.0 - beta) / beta
    r = model.reward(mu)
    p = model.kernel(mu)
    V = np.zeros(model.n_states)
    for _ in range(max_iter):
        V_next = np.asarray(reg.conjugate(r + beta * p @ V))
        if not np.all(np.isfinite(V_next)):
            raise NumericalError("value iteration produced non-finite values")
        done = np.max(np.abs(V_next - V)) <= stop
        V = V_next
        if done:
            return QFactors(r + beta * p @ V, reg)
    raise ConvergenceError("value iteration did not converge", float(np.max(np.abs(V_next - V))), max_iter)


def greedy_policy(Q: QFactors) -> np.ndarray:
    """Row x is the unique maximizer of Q(x, .) over the simplex."""
    return np.asarray(Q.regularizer.conjugate_gradient(Q.factors))


def mean_field_update(model: GameModel, mu, Q: QFactors) -> np.ndarray:
    """Push ``mu`` one step through the dynamics under the greedy policy of Q."""
    mu = check_simplex(mu, "mean field")
    policy = greedy_policy(Q)
    return np.einsum("x,xa,xay->y", mu, policy, model.kernel(mu))


def mfe_operator(model: GameModel, reg: Regularizer, mu, tol: float = 1e-12) -> np.ndarray:
    return mean_field_update(model, mu, solve_q_star(model, reg, mu, tol))


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzEstimate:
    L1: float
    K1: float
    provenance: str  # "analytic" or "empirical lower bound"


def _pair_ratios(r, rh, p, ph, d_mu):
    """Largest ratios for one mean-field pair over every (x, a, x^, a^)."""
    nx, na = r.shape
    dx = (np.arange(nx)[:, None] != np.arange(nx)[None, :]).astype(float)
    da = (np.arange(na)[:, None] != np.arange(na)[None, :]).astype(float)
    denom = dx[:, None, :, None] + 2.0 * da[None, :, None, :] + d_mu
    num_r = np.abs(r[:, :, None, None] - rh[None, None, :, :])
    num_p = np.abs(p[:, :, None, None, :] - ph[None, None, :, :, :]).sum(axis=-1)
    ok = denom > 0
    if not ok.any():
        return 0.0, 0.0
    return float((num_r[ok] / denom[ok]).max()), float((num_p[ok] / denom[ok]).max())


def estimate_lipschitz_constants(model: GameModel, sample_budget: int = 1000, rng_seed: int = 0,
                                 use_analytic: bool = True) -> LipschitzEstimate:
    """Smallest (L1, K1) consistent with the reward/kernel Lipschitz bounds on a probe set.

    The probe set pairs every vertex of the mean-field simplex with every other,
    each sampled mean field with itself, and ``sample_budget`` random pairs.
    Unless analytic constants are attached to the model, the result is only an
    empirical lower bound.
    """
    if sample_budget < 1:
        raise ValueError("sample_budget must be >= 1")
    if use_analytic and model.lipschitz is not None:
        L1, K1 = model.lipschitz
        return LipschitzEstimate(float(L1), float(K1), "analytic")
    nx = model.n_states
    rng = np.random.default_rng(rng_seed)
    vertices = [point_mass(i, nx) for i in range(nx)]
    pairs = [(a, b) for a in vertices for b in vertices]
    samples = rng.dirichlet(np.ones(nx), size=(sample_budget, 2))
    pairs += [(s[0], s[0]) for s in samples]
    pairs += [(s[0], s[1]) for s in samples]
    L1 = K1 = 0.0
    for mu, mh in pairs:
        d = float(np.abs(mu - mh).sum())
        lr, lp = _pair_ratios(model.reward(mu), model.reward(mh), model.kernel(mu), model.kernel(mh), d)
        L1, K1 = max(L1, lr), max(K1, lp)
    return LipschitzEstimate(L1, K1, "empirical lower bound")


def estimate_reward_bound(model: GameModel, reg: Regularizer, sample_budget: int = 1000,
                          rng_seed: int = 0) -> float:
    """Sampled sup of |R_reg(x, u, mu)|, including simplex vertices and the barycenters."""
    nx, na = model.n_states, model.n_actions
    rng = np.random.default_rng(rng_seed)
    mus = np.vstack([np.eye(nx), np.full((1, nx), 1.0 / nx), rng.dirichlet(np.ones(nx), size=sample_budget)])
    us = np.vstack([np.eye(na), np.full((1, na), 1.0 / na), rng.dirichlet(np.ones(na), size=sample_budget)])
    omega = np.asarray(reg.value(us))
    best = 0.0
    for r in model.reward_batch(mus):
        best = max(best, float(np.abs(r @ us.T - omega[None, :]).max()))
    return best


@dataclass(frozen=True)
class TheoryConstants:
    L1: float
    K1: float
    beta: float
    rho: float
    L_reg: float
    Q_Lip: float
    K_H1: float
    K_H: float
    C1: float
    C2: Optional[float]
    C3: float
    tau: Optional[float]
    theta: float
    r_max: float
    Q_max_bound: float
    assumption2_holds: bool
    reg_clip: Optional[float] = None
    provenance: str = "analytic"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def theory_constants(L1: float, K1: float, beta: float, rho: float, L_reg: float, r_max: float,
                     reg_clip: Optional[float] = None, provenance: str = "analytic") -> TheoryConstants:
    if rho <= 0:
        raise ConstantsError("rho must be positive")
    if beta * K1 / 2.0 >= 1.0:
        raise ConstantsError("Q_Lip undefined: beta * K1 / 2 >= 1")
    q_lip = L1 / (1.0 - beta * K1 / 2.0)
    k_h1 = q_lip / (1.0 - beta)
    k_h = 1.5 * K1 * (1.0 + k_h1 / rho)
    c1 = 1.5 * K1 + K1 * k_h1 / (2.0 * rho)
    spill = beta * K1 * q_lip / 2.0
    c3 = L1 + L_reg + spill
    if c1 < 1.0:
        c2 = (L1 + spill) * K1 / (1.0 - c1)
        tau = (2.0 * c2 + c3) / (1.0 - beta)
    else:
        log.warning("C1 = %.6g >= 1: C2 and tau are undefined", c1)
        c2 = tau = None
    return TheoryConstants(
        L1=L1, K1=K1, beta=beta, rho=rho, L_reg=L_reg, Q_Lip=q_lip, K_H1=k_h1, K_H=k_h,
        C1=c1, C2=c2, C3=c3, tau=tau, theta=4.0 / rho, r_max=r_max,
        Q_max_bound=r_max / (1.0 - beta), assumption2_holds=bool(k_h < 1.0),
        reg_clip=reg_clip, provenance=provenance,
    )


def model_constants(model: GameModel, reg: Regularizer, sample_budget: int = 1000, rng_seed: int = 0,
                    lipschitz: Optional[tuple[float, float]] = None) -> TheoryConstants:
    """Theory constants for a model, using analytic Lipschitz constants when known."""
    if lipschitz is not None:
        est = LipschitzEstimate(float(lipschitz[0]), float(lipschitz[1]), "analytic")
    else:
        est = estimate_lipschitz_constants(model, sample_budget, rng_seed)
    r_max = estimate_reward_bound(model, reg, sample_budget, rng_seed)
    return theory_constants(est.L1, est.K1, model.discount, reg.modulus, reg.lipschitz_bound, r_max,
                            reg_clip=getattr(reg, "clip", None), provenance=est.provenance)


def kappa_bound(eps: float, delta: float, tc: TheoryConstants) -> float:
    """Policy accuracy guaranteed once the mean field is learned to ``eps`` with
    representation error term ``delta``."""
    if not tc.K_H < 1.0:
        raise AssumptionError("kappa bound needs K_H < 1")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    th, k1, kh = tc.theta, tc.K1, tc.K_H
    if k1 == 0.0:
        return math.inf if eps > 0 else math.sqrt(th * delta)
    mean_err = k1 * math.sqrt(th * delta) / (1.0 - kh) + eps
    inner = (1.0 - kh) ** 2 * eps ** 2 / (16.0 * th * k1 ** 2) + delta + tc.K_H1 * mean_err
    return math.sqrt(th * inner)


# ---------------------------------------------------------------------------
# Fixed point
# ---------------------------------------------------------------------------


@dataclass
class MfeSolution:
    mean_field: np.ndarray
    q_factors: QFactors
    policy: np.ndarray
    residual: float
    iterations: int
    verified: bool = True
    history: list = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return self.q_factors.values()


def solve_mfe(model: GameModel, reg: Regularizer, mu0=None, tol: float = 1e-10, max_iter: int = 1000,
              constants: Optional[TheoryConstants] = None, allow_unverified: bool = False,
              inner_tol: float = 1e-13) -> MfeSolution:
    """Picard iteration on the MFE operator.

    Stops when ``||mu_{k+1} - mu_k||_1 <= tol (1 - K_H) / K_H``, which bounds the
    distance to the fixed point by ``tol``.  If ``K_H >= 1`` the iteration only
    runs with ``allow_unverified`` and then stops on ``tol`` directly; the
    result is flagged ``verified=False``.
    """
    if mu0 is None:
        mu0 = np.full(model.n_states, 1.0 / model.n_states)
    mu = check_simplex(mu0, "initial mean field").copy()
    if constants is None:
        constants = model_constants(model, reg, lipschitz=model.lipschitz)
    k_h = constants.K_H
    verified = bool(constants.assumption2_holds)
    if not verified and not allow_unverified:
        raise AssumptionError(f"K_H = {k_h:.6g} >= 1; pass allow_unverified=True to iterate anyway")
    stop = tol * (1.0 - k_h) / k_h if 0.0 < k_h < 1.0 else tol

    history = [mu]
    diff = math.inf
    for k in range(1, max_iter + 1):
        nxt = mfe_operator(model, reg, mu, inner_tol)
        diff = float(np.abs(nxt - mu).sum())
        mu = nxt
        history.append(mu)
        if diff <= stop:
            q = solve_q_star(model, reg, mu, inner_tol)
            residual = float(np.abs(mean_field_update(model, mu, q) - mu).sum())
            return MfeSolution(mu, q, greedy_policy(q), residual, k, verified, history)
    raise ConvergenceError(f"no convergence in {max_iter} iterations (last step {diff:.3g})", diff, max_iter,
                           history)

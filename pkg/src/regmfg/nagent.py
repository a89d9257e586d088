"""Finite-population simulation and a Monte Carlo Nash-gap probe.

Episodes are simulated in batches; episode ``e`` draws all its randomness
(initial states and one uniform per agent per step) from its own sub-stream,
so any two profiles evaluated with the same seed see the same noise.  That
pairing makes the estimated gain of an identical deviation exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exact import estimate_reward_bound, greedy_policy, solve_q_star
from .learn import substream
from .model import GameModel, Regularizer, check_simplex


@dataclass(frozen=True)
class AgentProfile:
    """Per-agent stationary policies, shape ``(N, n_states, n_actions)``."""

    policies: np.ndarray

    def __post_init__(self):
        pol = np.asarray(self.policies, dtype=float)
        if pol.ndim != 3 or pol.shape[0] < 1:
            raise ValueError("profile must have shape (N, n_states, n_actions) with N >= 1")
        check_simplex(pol, "policy row")

    @property
    def num_agents(self) -> int:
        return self.policies.shape[0]

    @classmethod
    def symmetric(cls, policy, n_agents: int) -> "AgentProfile":
        policy = np.asarray(policy, dtype=float)
        return cls(np.repeat(policy[None], n_agents, axis=0))

    def with_deviation(self, agent: int, policy) -> "AgentProfile":
        pol = np.array(self.policies, dtype=float)
        pol[agent] = policy
        return AgentProfile(pol)


@dataclass(frozen=True)
class EpisodeResult:
    rewards: np.ndarray   # (N,) discounted regularized reward over t = 0..T
    measures: np.ndarray  # (T+1, n_states) empirical state distributions
    counts: np.ndarray    # (T+1, n_states) integer state counts


def _episode_noise(seed: int, episodes: Sequence[int], n_agents: int, horizon: int):
    init = np.empty((len(episodes), n_agents))
    steps = np.empty((len(episodes), horizon, n_agents))
    for row, e in enumerate(episodes):
        rng = substream(seed, e)
        init[row] = rng.random(n_agents)
        steps[row] = rng.random((horizon, n_agents))
    return init, steps


def _inverse_cdf(probs, u):
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf < (u * cdf[..., -1])[..., None]).sum(axis=-1), probs.shape[-1] - 1)


def _simulate(model: GameModel, reg: Regularizer, policies, mu0, horizon: int, init, steps):
    """Batched core.  Returns rewards (E, N) and counts (E, T+1, X)."""
    nx = model.n_states
    beta = model.discount
    E, N = init.shape
    omega = np.asarray(reg.value(policies))  # (N, X)
    agent = np.arange(N)
    x = np.broadcast_to(_inverse_cdf(mu0, init), (E, N)).copy()
    rewards = np.zeros((E, N))
    counts = np.zeros((E, horizon + 1, nx), dtype=np.int64)
    for t in range(horizon + 1):
        c = np.stack([np.bincount(row, minlength=nx) for row in x])
        counts[:, t] = c
        emp = c / N
        r_tab = model.reward_batch(emp)                       # (E, X, A)
        u = policies[agent[None, :], x]                       # (E, N, A)
        r_now = np.take_along_axis(r_tab, x[..., None], axis=1)  # (E, N, A)
        rewards += beta ** t * ((r_now * u).sum(-1) - omega[agent[None, :], x])
        if t == horizon:
            break
        p_tab = model.kernel_batch(emp)                       # (E, X, A, X)
        p_now = p_tab[np.arange(E)[:, None], x]               # (E, N, A, X)
        trans = np.einsum("ena,enay->eny", u, p_now)
        x = _inverse_cdf(trans, steps[:, t])
    return rewards, counts


def simulate_episode(model: GameModel, reg: Regularizer, profile: AgentProfile, mu0, horizon: int,
                     rng_seed: int = 0, episode: int = 0) -> EpisodeResult:
    """One N-agent episode with i.i.d. initial states from ``mu0``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mu0 = check_simplex(mu0, "initial distribution")
    init, steps = _episode_noise(rng_seed, [episode], profile.num_agents, horizon)
    rewards, counts = _simulate(model, reg, np.asarray(profile.policies), mu0, horizon, init, steps)
    return EpisodeResult(rewards[0], counts[0] / profile.num_agents, counts[0])


def default_horizon(beta: float, r_max: float, target: float = 1e-4) -> int:
    """Smallest T with ``beta^(T+1) r_max / (1 - beta) < target``."""
    if r_max <= 0:
        return 1
    T = math.ceil(math.log(target * (1 - beta) / r_max) / math.log(beta) - 1)
    T = max(T, 1)
    while beta ** (T + 1) * r_max / (1 - beta) >= target:
        T += 1
    return T


def truncation_bias(beta: float, horizon: int, r_max: float) -> float:
    return beta ** (horizon + 1) * r_max / (1 - beta)


@dataclass(frozen=True)
class ValueEstimate:
    estimate: float
    standard_error: float
    truncation_bias: float
    samples: np.ndarray


def _agent_returns(model, reg, profile, mu0, agent, horizon, episodes, rng_seed, batch=500):
    mu0 = check_simplex(mu0, "initial distribution")
    pol = np.asarray(profile.policies)
    out = np.empty(episodes)
    for start in range(0, episodes, batch):
        idx = list(range(start, min(start + batch, episodes)))
        init, steps = _episode_noise(rng_seed, idx, profile.num_agents, horizon)
        rewards, _ = _simulate(model, reg, pol, mu0, horizon, init, steps)
        out[start:start + len(idx)] = rewards[:, agent]
    return out


def estimate_agent_value(model: GameModel, reg: Regularizer, profile: AgentProfile, mu0, agent: int,
                         horizon: int, episodes: int, rng_seed: int = 0,
                         r_max: Optional[float] = None) -> ValueEstimate:
    """Monte Carlo estimate of one agent's discounted regularized reward."""
    if episodes < 2:
        raise ValueError("need at least two episodes")
    samples = _agent_returns(model, reg, profile, mu0, agent, horizon, episodes, rng_seed)
    r_max = estimate_reward_bound(model, reg) if r_max is None else r_max
    se = float(samples.std(ddof=1) / math.sqrt(episodes))
    return ValueEstimate(float(samples.mean()), se, truncation_bias(model.discount, horizon, r_max), samples)


@dataclass(frozen=True)
class ExploitabilityResult:
    """Best observed gain of agent 0 over the candidate deviations.

    This is a lower bound on the true exploitability: only the listed
    deviations are tried.
    """

    gap: float
    standard_error: float
    best_deviation: np.ndarray
    best_index: int
    gains: np.ndarray
    gain_errors: np.ndarray
    baseline: float


def exploitability_estimate(model: GameModel, reg: Regularizer, shared_policy, n_agents: int, mu0,
                            horizon: int, episodes: int, candidates: Sequence, rng_seed: int = 0
                            ) -> ExploitabilityResult:
    """Gain of the best candidate deviation for agent 0 while the others keep
    ``shared_policy``; paired with the symmetric run through shared seeds."""
    if len(candidates) == 0:
        raise ValueError("need at least one candidate deviation")
    base_profile = AgentProfile.symmetric(shared_policy, n_agents)
    base = _agent_returns(model, reg, base_profile, mu0, 0, horizon, episodes, rng_seed)
    gains, errs = [], []
    for cand in candidates:
        dev = _agent_returns(model, reg, base_profile.with_deviation(0, cand), mu0, 0, horizon, episodes, rng_seed)
        d = dev - base
        gains.append(float(d.mean()))
        errs.append(float(d.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0)
    gains, errs = np.array(gains), np.array(errs)
    best = int(np.argmax(gains))
    return ExploitabilityResult(max(0.0, float(gains[best])), float(errs[best]), np.asarray(candidates[best]),
                                best, gains, errs, float(base.mean()))


def best_response(model: GameModel, reg: Regularizer, mu, tol: float = 1e-12) -> np.ndarray:
    """Mean-field best response: greedy policy of the optimal Q at a frozen ``mu``."""
    return greedy_policy(solve_q_star(model, reg, mu, tol))


def candidate_deviations(model: GameModel, reg: Regularizer, grid_size: int = 11, vertices: bool = True,
                         extra: Sequence = ()) -> list:
    """Best responses to mean fields on a grid, vertex policies and any extras.

    The grid covers the two-state segment exactly; for more states it uses the
    vertices, the barycenter and the edge midpoints.
    """
    nx, na = model.n_states, model.n_actions
    if nx == 2:
        grid = [np.array([1 - s, s]) for s in np.linspace(0, 1, grid_size)]
    else:
        eye = np.eye(nx)
        grid = list(eye) + [np.full(nx, 1.0 / nx)]
        grid += [(eye[i] + eye[j]) / 2 for i in range(nx) for j in range(i + 1, nx)]
    cands = [best_response(model, reg, mu) for mu in grid]
    if vertices:
        cands += [np.tile(np.eye(na)[a], (nx, 1)) for a in range(na)]
    cands += [np.asarray(c, dtype=float) for c in extra]
    return cands


def lumped_agent_value(model: GameModel, reg: Regularizer, policy_agent, policy_others, n_agents: int, mu0,
                       horizon: int) -> float:
    """Exact truncated value of agent 0 in a two-state model where all other
    agents share one policy.

    The others are exchangeable, so the pair (agent 0's state, number of others
    in state 1) is a Markov chain; the others' count moves by the sum of two
    binomials.  Serves as a noise-free reference for the Monte Carlo estimators.
    """
    from scipy.stats import binom

    if model.n_states != 2:
        raise ValueError("lumped evaluation is implemented for two-state models only")
    mu0 = check_simplex(mu0, "initial distribution")
    pa, po = np.asarray(policy_agent, dtype=float), np.asarray(policy_others, dtype=float)
    n_oth = n_agents - 1
    k = np.arange(n_oth + 1)
    dist = np.outer(mu0, binom.pmf(k, n_oth, mu0[1]))  # (x0, k)
    omega_a = np.asarray(reg.value(pa))
    total = 0.0
    for t in range(horizon + 1):
        for x0 in range(2):
            counts1 = k + x0
            emp = np.stack([1 - counts1 / n_agents, counts1 / n_agents], axis=1)
            r = model.reward_batch(emp)[:, x0] @ pa[x0] - omega_a[x0]
            total += model.discount ** t * float(dist[x0] @ r)
        if t == horizon:
            break
        new = np.zeros_like(dist)
        for x0 in range(2):
            for kk in range(n_oth + 1):
                w = dist[x0, kk]
                if w == 0.0:
                    continue
                c1 = kk + x0
                emp = np.array([1 - c1 / n_agents, c1 / n_agents])
                p = model.kernel(emp)
                move_a = pa[x0] @ p[x0]
                up0 = po[0] @ p[0][:, 1]   # other agent 0 -> 1
                up1 = po[1] @ p[1][:, 1]   # other agent 1 -> 1
                law = np.convolve(binom.pmf(np.arange(n_oth - kk + 1), n_oth - kk, up0),
                                  binom.pmf(np.arange(kk + 1), kk, up1))
                new[0] += w * move_a[0] * law
                new[1] += w * move_a[1] * law
        dist = new
    return total

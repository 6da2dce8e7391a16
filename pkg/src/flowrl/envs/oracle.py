"""Exact return-distribution oracles for finite toy MDPs.

``enumerate_return_distribution`` walks every (transition x policy) branch up
to a horizon and returns the exact atoms of the truncated discounted return.
``monte_carlo_returns`` is the sampling cross-check. The histogram-level
Bellman operator discretizes the density backup for contraction and
fixed-point harnesses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowrl.envs.base import ToyMdp, UniformDiscretePolicy, step
from flowrl.errors import ContractError, OracleError

PATH_GUARD = 10_000_000


@dataclass
class ReturnAtomSet:
    """Atoms of a truncated return distribution plus truncation accounting."""

    values: np.ndarray
    masses: np.ndarray
    horizon: int
    truncated_mass: float
    value_tol: float

    def mean(self) -> float:
        return float(np.dot(self.values, self.masses))

    def variance(self) -> float:
        mu = self.mean()
        return float(np.dot((self.values - mu) ** 2, self.masses))

    def sorted(self) -> "ReturnAtomSet":
        order = np.argsort(self.values)
        return ReturnAtomSet(self.values[order], self.masses[order], self.horizon,
                             self.truncated_mass, self.value_tol)


def _policy_support(policy, s):
    support = getattr(policy, "support", None)
    if support is None:
        raise ContractError("enumeration needs a policy with finite support(s)")
    return support(s)


def enumerate_return_distribution(mdp: ToyMdp, policy, s: np.ndarray, a: np.ndarray,
                                  horizon: int, mass_tol: float = 1e-6) -> ReturnAtomSet:
    """Exact atoms of the discounted return from (s, a), truncated at ``horizon``.

    Paths still alive at the horizon contribute atoms at their partial return;
    their total probability is reported as ``truncated_mass`` and the value
    truncation bound as ``value_tol``. Raises :class:`OracleError` when the
    branch walk would exceed the path guard.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    gamma = mdp.gamma
    atoms: dict[float, float] = {}
    truncated_mass = 0.0
    expanded = 0
    # stack entries: (state, action, probability, partial return, depth)
    stack = [(np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64), 1.0, 0.0, 0)]
    while stack:
        cur_s, cur_a, prob, ret, depth = stack.pop()
        expanded += 1
        if expanded > PATH_GUARD:
            raise OracleError(f"more than {PATH_GUARD} paths; lower the horizon")
        for p_out, s_next, r, terminal in mdp.outcomes(cur_s, cur_a):
            new_ret = ret + gamma**depth * r
            new_prob = prob * p_out
            if terminal:
                key = round(new_ret, 10)
                atoms[key] = atoms.get(key, 0.0) + new_prob
            elif depth + 1 >= horizon:
                key = round(new_ret, 10)
                atoms[key] = atoms.get(key, 0.0) + new_prob
                truncated_mass += new_prob
            else:
                for p_a, a_next in _policy_support(policy, s_next):
                    if p_a > 0.0:
                        stack.append((s_next, a_next, new_prob * p_a, new_ret, depth + 1))
    values = np.array(sorted(atoms))
    masses = np.array([atoms[v] for v in values])
    value_tol = gamma**horizon * max(abs(mdp.r_min), abs(mdp.r_max)) / (1.0 - gamma)
    if not np.isclose(masses.sum(), 1.0, atol=1e-9):
        raise OracleError(f"atom masses sum to {masses.sum()}, expected 1")
    if truncated_mass > mass_tol + 1e-12:
        raise OracleError(f"truncated mass {truncated_mass:.3g} exceeds mass_tol "
                          f"{mass_tol:.3g}; raise the horizon")
    return ReturnAtomSet(values, masses, horizon, truncated_mass, value_tol)


def monte_carlo_returns(mdp: ToyMdp, policy, s: np.ndarray, a: np.ndarray,
                        n: int, horizon: int, seed: int = 0) -> np.ndarray:
    """n independent truncated discounted-return samples from (s, a)."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for i in range(n):
        cur_s, cur_a = s, a
        ret, disc = 0.0, 1.0
        for _ in range(horizon):
            s_next, r, terminal = step(mdp, cur_s, cur_a, rng)
            ret += disc * r
            disc *= mdp.gamma
            if terminal:
                break
            cur_s, cur_a = s_next, policy(s_next, rng)
        out[i] = ret
    return out


# -- discretized density-level Bellman operator --------------------------------

HistTable = dict[tuple, np.ndarray]


def reachable_state_actions(mdp: ToyMdp, policy) -> list[tuple[np.ndarray, np.ndarray]]:
    """All nonterminal (s, a) pairs reachable from the initial state."""
    atoms = mdp.action_atoms()
    if atoms is None:
        raise ContractError("reachability scan needs a finite action set")
    rng = np.random.default_rng(0)
    start = mdp.initial_state(rng)
    seen: dict[tuple, np.ndarray] = {mdp.state_key(start): start}
    frontier = [start]
    while frontier:
        s = frontier.pop()
        for a in atoms:
            for _, s_next, _, terminal in mdp.outcomes(s, a):
                key = mdp.state_key(s_next)
                if not terminal and key not in seen:
                    seen[key] = s_next
                    frontier.append(s_next)
    return [(s, a) for s in seen.values() for a in atoms]


def table_key(mdp: ToyMdp, s: np.ndarray, a: np.ndarray) -> tuple:
    return (mdp.state_key(s), tuple(np.round(np.asarray(a, dtype=np.float64), 12)))


def project_masses(values: np.ndarray, masses: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Spread mass at arbitrary values onto fixed bin centers (linear split)."""
    out = np.zeros(len(centers))
    v = np.clip(values, centers[0], centers[-1])
    idx = np.clip(np.searchsorted(centers, v, side="right") - 1, 0, len(centers) - 2)
    left = centers[idx]
    width = centers[idx + 1] - left
    frac = np.clip((v - left) / width, 0.0, 1.0)
    np.add.at(out, idx, masses * (1.0 - frac))
    np.add.at(out, idx + 1, masses * frac)
    return out


def bellman_histogram_operator(mdp: ToyMdp, policy, table: HistTable,
                               edges: np.ndarray) -> HistTable:
    """One application of the density-level distributional Bellman backup.

    Each (s, a) histogram becomes the mixture over outcomes of the next-pair
    histogram pushed through z -> r + gamma * z and re-projected onto the
    shared bin grid; terminal branches contribute a point mass at r.
    """
    centers = 0.5 * (edges[:-1] + edges[1:])
    new_table: HistTable = {}
    for s, a in reachable_state_actions(mdp, policy):
        key = table_key(mdp, s, a)
        masses = np.zeros(len(centers))
        for p_out, s_next, r, terminal in mdp.outcomes(s, a):
            if terminal:
                masses += p_out * project_masses(np.array([r]), np.array([1.0]), centers)
                continue
            for p_a, a_next in _policy_support(policy, s_next):
                src = table[table_key(mdp, s_next, a_next)]
                shifted = r + mdp.gamma * centers
                masses += p_out * p_a * project_masses(shifted, src, centers)
        new_table[key] = masses
    return new_table


def uniform_table(mdp: ToyMdp, policy, edges: np.ndarray) -> HistTable:
    n = len(edges) - 1
    return {table_key(mdp, s, a): np.full(n, 1.0 / n)
            for s, a in reachable_state_actions(mdp, policy)}


def uniform_discrete_policy(mdp: ToyMdp) -> UniformDiscretePolicy:
    atoms = mdp.action_atoms()
    if atoms is None:
        raise ContractError(f"{mdp.env_id} has no discrete action set")
    return UniformDiscretePolicy(tuple(tuple(a) for a in atoms))

"""Toy MDP interface, transitions, behavior policies, and dataset plumbing.

States are encoded as float vectors (discrete states one-hot); actions live in
the box [-1, 1]^d, with discrete action sets embedded as points of that box so
every network sees continuous inputs. Terminal states absorb: stepping from
one returns (same state, reward 0, terminal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from flowrl.errors import ConfigError, ContractError


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class Dataset:
    """Ordered transitions plus provenance (env, behavior policy, seed)."""

    transitions: list[Transition]
    env_id: str
    behavior_id: str
    seed: int

    def __len__(self) -> int:
        return len(self.transitions)

    def arrays(self) -> dict[str, np.ndarray]:
        """Column-major view used by training code."""
        if not self.transitions:
            raise ContractError("dataset is empty")
        return {
            "s": np.stack([t.s for t in self.transitions]),
            "a": np.stack([t.a for t in self.transitions]),
            "r": np.array([t.r for t in self.transitions]),
            "s_next": np.stack([t.s_next for t in self.transitions]),
            "terminal": np.array([t.terminal for t in self.transitions], dtype=bool),
        }


class ToyMdp:
    """Base class for the shipped toy environments.

    Subclasses define ``env_id``, dims, reward bounds, gamma, and the dynamics.
    Finite-state envs additionally expose ``outcomes`` (the enumerable branch
    structure) and ``state_key`` for tabular oracles.
    """

    env_id: str = "toy"
    state_dim: int = 1
    action_dim: int = 1
    gamma: float = 0.9
    r_min: float = -1.0
    r_max: float = 1.0
    episode_cap: int = 100

    @property
    def z_bounds(self) -> tuple[float, float]:
        return self.r_min / (1.0 - self.gamma), self.r_max / (1.0 - self.gamma)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def action_atoms(self) -> list[np.ndarray] | None:
        """Embedded discrete action set, or None for continuous-action envs."""
        return None

    def validate_action(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (self.action_dim,):
            raise ContractError(f"action shape {a.shape} != ({self.action_dim},)")
        if np.any(np.abs(a) > 1.0 + 1e-9):
            raise ContractError(f"action {a} outside the [-1, 1] box")
        return a

    def is_terminal(self, s: np.ndarray) -> bool:
        raise NotImplementedError

    def _step_inner(self, s: np.ndarray, a: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    # finite-state hooks -----------------------------------------------------

    def outcomes(self, s: np.ndarray, a: np.ndarray) -> list[tuple[float, np.ndarray, float, bool]]:
        """Enumerable branches (prob, s_next, r, terminal) for oracle use."""
        raise ContractError(f"{self.env_id} has no enumerable dynamics")

    def _sample_outcome(self, s: np.ndarray, a: np.ndarray,
                        rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
        """Draw one branch from ``outcomes`` by inverse CDF."""
        u = rng.random()
        acc = 0.0
        branches = self.outcomes(s, a)
        for prob, s_next, r, terminal in branches:
            acc += prob
            if u < acc:
                return s_next, r, terminal
        _, s_next, r, terminal = branches[-1]
        return s_next, r, terminal

    def state_key(self, s: np.ndarray):
        return tuple(np.round(np.asarray(s, dtype=np.float64), 12))


def step(mdp: ToyMdp, s: np.ndarray, a: np.ndarray,
         rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
    """Sample one transition; terminal states self-loop with reward 0."""
    a = mdp.validate_action(a)
    if mdp.is_terminal(s):
        return np.asarray(s, dtype=np.float64).copy(), 0.0, True
    s_next, r, terminal = mdp._step_inner(np.asarray(s, dtype=np.float64), a, rng)
    if not mdp.r_min - 1e-9 <= r <= mdp.r_max + 1e-9:
        raise ConfigError(f"{mdp.env_id} emitted reward {r} outside "
                          f"[{mdp.r_min}, {mdp.r_max}]")
    return s_next, float(r), bool(terminal)


# -- behavior policies --------------------------------------------------------

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class UniformDiscretePolicy:
    """Uniform over an embedded discrete action set."""

    atoms: tuple

    behavior_id: str = "uniform-discrete"

    def __call__(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.array(self.atoms[rng.integers(len(self.atoms))], dtype=np.float64)

    def support(self, s: np.ndarray) -> list[tuple[float, np.ndarray]]:
        p = 1.0 / len(self.atoms)
        return [(p, np.asarray(a, dtype=np.float64)) for a in self.atoms]


@dataclass(frozen=True)
class UniformBoxPolicy:
    """Uniform over the continuous action box."""

    dim: int
    behavior_id: str = "uniform-box"

    def __call__(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.dim)


def behavior_policy_for(mdp: ToyMdp) -> Policy:
    atoms = mdp.action_atoms()
    if atoms is None:
        return UniformBoxPolicy(mdp.action_dim)
    return UniformDiscretePolicy(tuple(tuple(a) for a in atoms))


# -- dataset generation and serialization -------------------------------------

def generate_dataset(mdp: ToyMdp, behavior: Policy, n_transitions: int, seed: int) -> Dataset:
    """Seeded rollouts under ``behavior``; episodes truncated at the env cap
    with terminal=False on truncation."""
    if n_transitions < 1:
        raise ContractError("n_transitions must be >= 1")
    rng = np.random.default_rng(seed)
    transitions: list[Transition] = []
    while len(transitions) < n_transitions:
        s = mdp.initial_state(rng)
        for _ in range(mdp.episode_cap):
            a = behavior(s, rng)
            s_next, r, terminal = step(mdp, s, a, rng)
            transitions.append(Transition(s.copy(), np.asarray(a, dtype=np.float64),
                                          r, s_next.copy(), terminal))
            if terminal or len(transitions) >= n_transitions:
                break
            s = s_next
    behavior_id = getattr(behavior, "behavior_id", "custom")
    return Dataset(transitions[:n_transitions], mdp.env_id, behavior_id, seed)


def _fmt_vec(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in v)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """One transition per line: ``s|a|r|s_next|terminal`` after a header line.

    Reals are written with repr so the round trip is bit-exact.
    """
    arrays = dataset.arrays()
    lines = ["|".join([dataset.env_id, dataset.behavior_id, str(dataset.seed),
                       str(len(dataset)), str(arrays["s"].shape[1]),
                       str(arrays["a"].shape[1])])]
    for t in dataset.transitions:
        lines.append("|".join([_fmt_vec(t.s), _fmt_vec(t.a), repr(float(t.r)),
                               _fmt_vec(t.s_next), "1" if t.terminal else "0"]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().strip().split("\n")
    header = text[0].split("|")
    if len(header) != 6:
        raise ContractError(f"malformed dataset header: {text[0]!r}")
    env_id, behavior_id, seed, count, sdim, adim = header
    transitions = []
    for line in text[1:]:
        s, a, r, s_next, terminal = line.split("|")
        transitions.append(Transition(
            np.array([float(x) for x in s.split(",")]),
            np.array([float(x) for x in a.split(",")]),
            float(r),
            np.array([float(x) for x in s_next.split(",")]),
            terminal == "1",
        ))
    if len(transitions) != int(count):
        raise ContractError(f"dataset header count {count} != {len(transitions)} lines")
    ds = Dataset(transitions, env_id, behavior_id, int(seed))
    arr = ds.arrays()
    if arr["s"].shape[1] != int(sdim) or arr["a"].shape[1] != int(adim):
        raise ContractError("dataset dims do not match header")
    return ds

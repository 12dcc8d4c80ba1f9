"""Exact tabular ground truth for finite MDPs.

Rewards follow the next-state convention throughout:
``Q(s, a) = E[sum_{t>=0} gamma^t r(s_{t+1})]``, so
``Q = M r`` where ``M(s, a, s+) = sum_t gamma^t Pr(s_{t+1} = s+ | s, a)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rldp._io import atomic_write_bytes
from rldp.envdata import Dataset, GridWorld, segments_at, valid_segment_starts
from rldp.replearn import EncoderParams, loss_dynamics, ortho_penalty

TOL = 1e-10
MAX_ITERS = 100_000
QUANT_GRID = 1e-6


class ConvergenceError(RuntimeError):
    pass


@dataclass
class TabularMdp:
    P: np.ndarray  # [S, A, S]
    rho: np.ndarray  # [S]
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.gamma = float(self.gamma)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def validate(self) -> None:
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape [S, A, S], got {self.P.shape}")
        if (self.P < 0).any() or np.abs(self.P.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValueError("every P[s, a, :] must be a probability vector (sum 1 within 1e-12)")
        if self.rho.shape != (self.n_states,) or (self.rho < 0).any() or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must be a probability vector over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    def to_text(self) -> str:
        lines = [f"n_states {self.n_states}", f"n_actions {self.n_actions}", f"gamma {self.gamma!r}",
                 "P " + " ".join(repr(float(v)) for v in self.P.ravel()),
                 "rho " + " ".join(repr(float(v)) for v in self.rho)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularMdp":
        fields = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, rest = line.partition(" ")
            if key not in ("n_states", "n_actions", "gamma", "P", "rho"):
                raise ValueError(f"line {lineno}: unknown field {key!r}")
            fields[key] = rest.split()
        missing = {"n_states", "n_actions", "gamma", "P", "rho"} - fields.keys()
        if missing:
            raise ValueError(f"missing fields: {sorted(missing)}")
        S, A = int(fields["n_states"][0]), int(fields["n_actions"][0])
        P = np.array([float(v) for v in fields["P"]])
        if P.size != S * A * S:
            raise ValueError(f"P has {P.size} entries, expected {S * A * S}")
        return cls(P.reshape(S, A, S), np.array([float(v) for v in fields["rho"]]), float(fields["gamma"][0]))

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_text().encode())

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_text(Path(path).read_text())


def gridworld_mdp(env: GridWorld, gamma: float, rho=None) -> TabularMdp:
    """Tabular view of a gridworld over free-cell indices; ``rho`` defaults to uniform."""
    rho = np.full(env.n_free, 1.0 / env.n_free) if rho is None else rho
    return TabularMdp(env.transition_tensor(), rho, gamma)


def empirical_rho(env: GridWorld, dataset: Dataset) -> np.ndarray:
    """Frequency of each free cell among the dataset's next-states."""
    idx = env.cell_indices(dataset.next_states)
    return np.bincount(idx, minlength=env.n_free) / len(idx)


@dataclass
class TabularPolicy:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or (self.probs < 0).any() or np.abs(self.probs.sum(axis=1) - 1).max() > 1e-12:
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        p = rng.random((n_states, n_actions)) + 0.1
        return cls(p / p.sum(axis=1, keepdims=True))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        return cls(np.eye(n_actions)[np.asarray(actions, dtype=np.int64)])


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, dtype=np.float64)


def _iterate(update, x0: np.ndarray, what: str, gamma: float) -> np.ndarray:
    # a gamma-contraction whose last step moved by c is within c*gamma/(1-gamma) of its fixed point
    stop = TOL * (1 - gamma) / gamma if gamma > 0 else np.inf
    x = x0
    for _ in range(MAX_ITERS):
        nxt = update(x)
        if np.abs(nxt - x).max() < stop:
            return nxt
        x = nxt
    raise ConvergenceError(f"{what} did not reach tolerance {TOL} within {MAX_ITERS} iterations")


def successor_measure_exact(mdp: TabularMdp, policy) -> np.ndarray:
    """Fixed point of ``M = P + gamma P Pi M``; returns ``[S, A, S]``."""
    pi = _probs(policy)
    P, g = mdp.P, mdp.gamma
    return _iterate(lambda M: P + g * np.einsum("sat,tu->sau", P, np.einsum("tb,tbu->tu", pi, M)), P.copy(),
                    "successor measure", g)


def q_from_measure(M: np.ndarray, r) -> np.ndarray:
    return np.asarray(M) @ np.asarray(r, dtype=np.float64)


def policy_evaluation(mdp: TabularMdp, policy, r) -> np.ndarray:
    """Iterate ``Q = P (r + gamma Pi Q)``."""
    pi = _probs(policy)
    r = np.asarray(r, dtype=np.float64)
    P, g = mdp.P, mdp.gamma
    return _iterate(lambda Q: P @ (r + g * (pi * Q).sum(axis=1)), np.zeros((mdp.n_states, mdp.n_actions)),
                    "policy evaluation", g)


def value_iteration(mdp: TabularMdp, r) -> tuple[np.ndarray, TabularPolicy]:
    """Optimal ``Q`` for next-state reward ``r`` and its greedy policy (ties to the lowest action)."""
    r = np.asarray(r, dtype=np.float64)
    P, g = mdp.P, mdp.gamma
    Q = _iterate(lambda Q: P @ (r + g * Q.max(axis=1)), np.zeros((mdp.n_states, mdp.n_actions)),
                 "value iteration", g)
    return Q, TabularPolicy.deterministic(Q.argmax(axis=1), mdp.n_actions)


def sm_fixed_point_check(mdp: TabularMdp, policy, m: np.ndarray) -> float:
    """``max |m(s, a, s+) rho(s+) - M(s, a, s+)|`` for a density-form critic ``m``."""
    if (mdp.rho <= 0).any():
        bad = np.flatnonzero(mdp.rho <= 0)
        raise ValueError(f"rho is zero on states {bad[:10].tolist()}; densities there are undefined")
    M = successor_measure_exact(mdp, policy)
    return float(np.abs(np.asarray(m) * mdp.rho[None, None, :] - M).max())


def state_visitation(mdp: TabularMdp, policy, d0=None) -> np.ndarray:
    """Normalised discounted state-action visitation ``d^pi(s, a)`` from start distribution ``d0``."""
    pi = _probs(policy)
    S = mdp.n_states
    d0 = np.full(S, 1.0 / S) if d0 is None else np.asarray(d0, dtype=np.float64)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    ds = (1 - mdp.gamma) * np.linalg.solve((np.eye(S) - mdp.gamma * P_pi).T, d0)
    return ds[:, None] * pi


def quantized_groups(embeddings: np.ndarray, grid: float = QUANT_GRID) -> np.ndarray:
    """Group id per row; rows with identical quantised embeddings share an id (numbered by first occurrence)."""
    keys = np.round(np.asarray(embeddings) / grid).astype(np.int64)
    ids: dict = {}
    return np.array([ids.setdefault(k.tobytes(), len(ids)) for k in keys], dtype=np.int64)


def latent_mdp(mdp: TabularMdp, policy, groups: np.ndarray) -> tuple[TabularMdp, np.ndarray]:
    """Aggregate states by group: transitions and policies are averaged uniformly over group members."""
    pi = _probs(policy)
    G = int(groups.max()) + 1
    member = np.zeros((mdp.n_states, G))
    member[np.arange(mdp.n_states), groups] = 1.0
    counts = member.sum(axis=0)
    P_to_group = np.einsum("sat,tg->sag", mdp.P, member)
    P_bar = np.einsum("sg,sah->gah", member, P_to_group) / counts[:, None, None]
    pi_bar = member.T @ pi / counts[:, None]
    rho_bar = member.T @ mdp.rho
    # renormalise away accumulated rounding so validation stays within 1e-12
    P_bar /= P_bar.sum(axis=2, keepdims=True)
    pi_bar /= pi_bar.sum(axis=1, keepdims=True)
    return TabularMdp(P_bar, rho_bar / rho_bar.sum(), mdp.gamma), pi_bar


@dataclass
class LemmaReport:
    lhs: float
    rhs: float
    loss_dynamics: float
    loss_ortho: float
    n_groups: int


def lemma_bound_report(encoder: EncoderParams, mdp: TabularMdp, policy, dataset: Dataset, state_obs,
                       lam: float = 1.0, H: int = 1, probe_size: int = 1024, d0=None) -> LemmaReport:
    """Both sides of the successor-measure error bound for an encoder on a tabular MDP.

    ``lhs = E_{(s,a)~d^pi, s+~rho} |M(s, a, s+) - M_bar(phi(s), a, phi(s+))|`` where ``M_bar``
    is the successor measure of the latent MDP obtained by merging states
    with identical quantised embeddings.  ``rhs = (L_d + lam L_r) / (1 - gamma)``
    with ``L_d`` over every length-``H`` segment of ``dataset`` and ``L_r``
    over the first ``probe_size`` dataset states.  No ordering between the
    sides is asserted: the bound also involves unmeasured Lipschitz constants.
    """
    pi = _probs(policy)
    groups = quantized_groups(encoder.encode(state_obs))
    M = successor_measure_exact(mdp, pi)
    bar, pi_bar = latent_mdp(mdp, pi, groups)
    M_bar = successor_measure_exact(bar, pi_bar)
    lifted = M_bar[groups][:, :, groups]
    dpi = state_visitation(mdp, pi, d0)
    lhs = float(np.einsum("sa,sat,t->", dpi, np.abs(M - lifted), mdp.rho))
    segs = segments_at(dataset, valid_segment_starts(dataset, H), H)
    l_d = loss_dynamics(encoder, segs).item()
    l_r = ortho_penalty(encoder.phi(dataset.states[:probe_size])).item()
    rhs = (l_d + lam * l_r) / (1 - mdp.gamma)
    return LemmaReport(lhs, rhs, l_d, l_r, int(groups.max()) + 1)

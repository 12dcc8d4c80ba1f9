"""Test-time use of a trained model: reward -> task vector, rollouts, successor heatmaps.

Rewards are functions of the state reached, ``r(s')``, matching the
training-time convention.  A reward is described by a :class:`RewardSpec`
and bound to an environment with :meth:`RewardSpec.bind`, which returns a
plain ``obs_batch -> rewards`` callable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rldp._io import write_csv
from rldp.envdata import Dataset, GridWorld, action_features

REWARD_KINDS = ("goal_cell", "goal_region", "linear_in_obs", "tabular")


@dataclass
class RewardSpec:
    """``kind`` plus its parameters.

    goal_cell      ``cell=(x, y)``; 1 in that gridworld cell, else 0
    goal_region    ``center=(x, y)``, ``radius``; 1 within Euclidean radius of the position
    linear_in_obs  ``weights``; ``obs @ weights``
    tabular        ``values`` per gridworld free cell
    """

    kind: str
    params: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}; expected one of {REWARD_KINDS}")
        need = {"goal_cell": ("cell",), "goal_region": ("center", "radius"), "linear_in_obs": ("weights",),
                "tabular": ("values",)}[self.kind]
        missing = [k for k in need if k not in self.params]
        if missing:
            raise ValueError(f"{self.kind} reward needs parameters {missing}")
        if not self.name:
            self.name = self.kind + "".join(f"_{v}" for v in np.ravel(self.params.get("cell", ())))

    @property
    def is_goal(self) -> bool:
        return self.kind in ("goal_cell", "goal_region")

    def bind(self, env) -> Callable[[np.ndarray], np.ndarray]:
        """Reward function on observation batches for ``env``."""
        p = self.params
        if self.kind == "goal_cell":
            if not isinstance(env, GridWorld):
                raise ValueError("goal_cell rewards need a gridworld")
            goal = env.index.get(tuple(p["cell"]))
            if goal is None:
                raise ValueError(f"goal cell {p['cell']} is not a free cell")
            return lambda obs: (env.cell_indices(obs) == goal).astype(np.float64)
        if self.kind == "goal_region":
            center, radius = np.asarray(p["center"], dtype=np.float64), float(p["radius"])

            def region(obs):
                obs = np.atleast_2d(obs)
                if isinstance(env, GridWorld):
                    pos = np.array([env.free_cells[i] for i in env.cell_indices(obs)], dtype=np.float64)
                else:
                    pos = obs[:, :2]
                return (np.linalg.norm(pos - center, axis=1) <= radius).astype(np.float64)
            return region
        if self.kind == "linear_in_obs":
            w = np.asarray(p["weights"], dtype=np.float64)
            if w.shape != (env.obs_dim,):
                raise ValueError(f"linear reward needs {env.obs_dim} weights, got {w.shape}")
            return lambda obs: np.atleast_2d(obs) @ w
        values = np.asarray(p["values"], dtype=np.float64)
        if not isinstance(env, GridWorld) or values.shape != (env.n_free,):
            raise ValueError("tabular rewards need a gridworld and one value per free cell")
        return lambda obs: values[env.cell_indices(obs)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardSpec":
        d = dict(d)
        kind = d.pop("kind")
        name = d.pop("name", "")
        return cls(kind, d, name)


# ---------------------------------------------------------------------------
# task inference
# ---------------------------------------------------------------------------

def _sample_indices(n: int, N: int, rng: np.random.Generator) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be at least 1")
    if n == 0:
        raise ValueError("cannot infer a task from an empty dataset")
    if N >= n:
        return np.arange(n) if N == n else np.sort(rng.integers(n, size=N))
    return np.sort(rng.choice(n, size=N, replace=False))


def rescale_to_sphere(z: np.ndarray) -> np.ndarray:
    """Scale ``z`` to norm ``sqrt(d)``; the zero vector is returned unchanged."""
    norm = np.linalg.norm(z)
    return z if norm == 0 else z * (math.sqrt(len(z)) / norm)


def infer_z_mean(dataset: Dataset, encoder, reward: Callable, N: int, rng: np.random.Generator,
                 rescale: bool = False) -> np.ndarray:
    """``z = mean_i phi(s'_i) r(s'_i)`` over ``N`` next-states.

    Indices are drawn without replacement (the whole dataset when
    ``N == len(dataset)``, with replacement only when ``N`` exceeds it).
    """
    idx = _sample_indices(len(dataset), N, rng)
    states = dataset.next_states[idx]
    r = np.asarray(reward(states), dtype=np.float64)
    z = (encoder.encode(states) * r[:, None]).sum(axis=0) / len(idx)
    return rescale_to_sphere(z) if rescale else z


def infer_z_regression(dataset: Dataset, encoder, reward: Callable, N: int, ridge: float = 0.0,
                       rng: np.random.Generator | None = None, rescale: bool = False) -> np.ndarray:
    """Least squares ``(Phi^T Phi + ridge I) z = Phi^T r`` over ``N`` sampled next-states."""
    rng = np.random.default_rng(0) if rng is None else rng
    idx = _sample_indices(len(dataset), N, rng)
    states = dataset.next_states[idx]
    phi = encoder.encode(states)
    r = np.asarray(reward(states), dtype=np.float64)
    d = phi.shape[1]
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge == 0 and np.linalg.matrix_rank(phi) < d:
        raise ValueError(f"design matrix has rank {np.linalg.matrix_rank(phi)} < d={d}; "
                         "the normal equations are singular, use ridge > 0")
    z = np.linalg.solve(phi.T @ phi + ridge * np.eye(d), phi.T @ r)
    return rescale_to_sphere(z) if rescale else z


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    returns: list = field(default_factory=list)
    discounted_returns: list = field(default_factory=list)
    successes: list = field(default_factory=list)
    seed: int = 0
    task: str = ""

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.returns)) if self.returns else float("nan")

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else float("nan")

    def to_csv(self, path) -> None:
        write_csv(path, ["episode", "return", "discounted_return", "success"],
                  ([i, r, dr, int(s)] for i, (r, dr, s) in
                   enumerate(zip(self.returns, self.discounted_returns, self.successes))))


def bfm_policy(bfm, encoder, z) -> Callable[[np.ndarray], object]:
    """Deterministic zero-shot policy ``obs -> action`` for task vector ``z``."""
    z = np.asarray(z, dtype=np.float64)

    def act(obs):
        a = bfm.act(np.atleast_2d(obs), z[None, :])[0]
        return int(a) if bfm.discrete else a
    return act


def _start(env, rng, goal_fn):
    if isinstance(env, GridWorld):
        candidates = [c for c in env.free_cells if goal_fn is None or goal_fn(env.observe(c)[None])[0] == 0]
        return candidates[int(rng.integers(len(candidates)))]
    return env.reset(rng)


def evaluate(env, policy: Callable, reward: RewardSpec, episodes: int, seed: int, episode_len: int = 100,
             gamma: float = 0.98, task: str = "") -> EvalReport:
    """Roll out ``policy`` from start states drawn per episode.

    Episode ``i`` uses its own generator seeded with ``(seed, i)``; gridworld
    episodes start from a uniformly drawn free cell outside the goal.
    Success means the goal was reached at least once.
    """
    reward_fn = reward.bind(env)
    goal_fn = reward_fn if reward.is_goal else None
    report = EvalReport(seed=int(seed), task=task or reward.name)
    for ep in range(episodes):
        rng = np.random.default_rng([int(seed), ep])
        state = _start(env, rng, goal_fn)
        ret = disc = 0.0
        success = False
        for t in range(episode_len):
            a = policy(env.observe(state))
            state = env.step(state, a)
            r = float(reward_fn(env.observe(state)[None])[0])
            ret += r
            disc += gamma ** t * r
            success = success or (reward.is_goal and r > 0)
        report.returns.append(ret)
        report.discounted_returns.append(disc)
        report.successes.append(bool(success))
    return report


# ---------------------------------------------------------------------------
# successor-measure heatmaps
# ---------------------------------------------------------------------------

@dataclass
class Heatmap:
    cells: list  # (x, y) per free cell
    values: np.ndarray

    def grid(self, env: GridWorld) -> np.ndarray:
        out = np.full((env.height, env.width), np.nan)
        for (x, y), v in zip(self.cells, self.values):
            out[y, x] = v
        return out

    def to_csv(self, path) -> None:
        write_csv(path, ["x", "y", "value"], ([x, y, float(v)] for (x, y), v in zip(self.cells, self.values)))


def successor_heatmap(bfm, encoder, env: GridWorld, s0, a0: int, z=None) -> Heatmap:
    """``psi(s0, a0, z)^T phi(s+)`` for every free cell ``s+`` (a density w.r.t. rho, not clipped).

    ``bfm`` may be a network model (with ``encoder``) or a tabular critic
    carrying its own ``psi`` table and ``features``.
    """
    if not isinstance(env, GridWorld):
        raise ValueError("successor heatmaps need a gridworld")
    s0 = tuple(s0)
    if s0 not in env.index:
        raise ValueError(f"start cell {s0} is not a free cell")
    if hasattr(bfm, "measure"):
        psi = bfm.psi[env.index[s0], a0]
        feats = bfm.features
    else:
        obs = env.observe(s0)[None]
        psi = bfm.psi(obs, action_features([[a0]], env.n_actions), np.atleast_2d(z)).data[0]
        feats = encoder.encode(env.observe_all())
    return Heatmap(list(env.free_cells), feats @ psi)


"""Desk-scale environments, reward-free datasets, samplers and the dataset file format.

Dataset file layout
-------------------
One line of JSON (the header, UTF-8, terminated by ``\\n``) followed by a
blob of little-endian float32 values laid out block by block:

    states        n x obs_dim
    actions       n x action_dim   (discrete actions: the index as a float)
    next_states   n x obs_dim
    done          n                (1.0 marks the last transition of an episode)
    episode       n                (episode index)

The header records ``n_transitions``, ``obs_dim``, ``action_dim``,
``n_actions`` (0 for continuous), ``env_id``, ``policy``, ``seed`` and
``blob_bytes``.  No reward is stored anywhere.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rldp._io import atomic_write_bytes

FOUR_ROOMS = """
#############
#     #     #
#     #     #
#           #
#     #     #
#     #     #
## ####     #
#     ### ###
#     #     #
#     #     #
#           #
#     #     #
#############
"""

# up, down, left, right as (dx, dy) with y growing downwards
GRID_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
ACTION_NAMES = ("up", "down", "left", "right")


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# gridworld
# ---------------------------------------------------------------------------

class GridWorld:
    """Deterministic gridworld parsed from an ASCII layout (``#`` = wall).

    Cells are ``(x, y)`` tuples; ``x`` is the column, ``y`` the row.
    Observations are either one-hot over free cells scaled by
    ``sqrt(n_free)`` (so every observation sits on the hypersphere) or the
    ``(x, y)`` pair normalised to ``[0, 1]``.
    """

    n_actions = 4
    action_dim = 1
    discrete = True

    def __init__(self, layout: str = FOUR_ROOMS, obs_mode: str = "onehot", start_cell=(1, 1),
                 env_id: str = "fourroom"):
        rows = [r for r in layout.strip("\n").splitlines()]
        self.height = len(rows)
        self.width = max(len(r) for r in rows)
        self.walls = set()
        free = []
        for y, row in enumerate(rows):
            for x in range(self.width):
                ch = row[x] if x < len(row) else "#"
                if ch == "#":
                    self.walls.add((x, y))
                else:
                    free.append((x, y))
        if obs_mode not in ("onehot", "xy"):
            raise ValueError(f"unknown observation mode {obs_mode!r}")
        self.layout = layout
        self.obs_mode = obs_mode
        self.env_id = env_id
        self.free_cells = free
        self.index = {c: i for i, c in enumerate(free)}
        self.n_free = len(free)
        self.start_cell = tuple(start_cell) if start_cell is not None else None
        if self.start_cell is not None and self.start_cell not in self.index:
            raise ValueError(f"start cell {start_cell} is not free")
        self._scale = math.sqrt(self.n_free)

    @property
    def obs_dim(self) -> int:
        return self.n_free if self.obs_mode == "onehot" else 2

    def step(self, cell, action: int):
        return grid_step(self, cell, action)

    def observe(self, cell) -> np.ndarray:
        if self.obs_mode == "onehot":
            obs = np.zeros(self.n_free)
            obs[self.index[tuple(cell)]] = self._scale
            return obs
        x, y = cell
        return np.array([x / (self.width - 1), y / (self.height - 1)])

    def observe_all(self) -> np.ndarray:
        return np.stack([self.observe(c) for c in self.free_cells])

    def cell_of_obs(self, obs) -> tuple:
        obs = np.asarray(obs)
        if self.obs_mode == "onehot":
            return self.free_cells[int(np.argmax(obs))]
        return (int(round(obs[0] * (self.width - 1))), int(round(obs[1] * (self.height - 1))))

    def cell_indices(self, obs_batch) -> np.ndarray:
        obs_batch = np.atleast_2d(obs_batch)
        if self.obs_mode == "onehot":
            return np.argmax(obs_batch, axis=1)
        return np.array([self.index[self.cell_of_obs(o)] for o in obs_batch])

    def reset(self, rng: np.random.Generator):
        if self.start_cell is not None:
            return self.start_cell
        return self.free_cells[int(rng.integers(self.n_free))]

    def transition_tensor(self) -> np.ndarray:
        """``P[s, a, s']`` over free-cell indices (deterministic, so 0/1 entries)."""
        P = np.zeros((self.n_free, self.n_actions, self.n_free))
        for i, c in enumerate(self.free_cells):
            for a in range(self.n_actions):
                P[i, a, self.index[grid_step(self, c, a)]] = 1.0
        return P


def grid_step(env: GridWorld, cell, action: int):
    if not 0 <= int(action) < env.n_actions or int(action) != action:
        raise ValueError(f"action {action!r} out of range 0..{env.n_actions - 1}")
    x, y = cell
    dx, dy = GRID_MOVES[int(action)]
    nxt = (x + dx, y + dy)
    if nxt in env.walls or not (0 <= nxt[0] < env.width and 0 <= nxt[1] < env.height):
        return (x, y)
    return nxt


# ---------------------------------------------------------------------------
# point mass
# ---------------------------------------------------------------------------

def four_room_walls(door_halfwidth: float = 0.05) -> tuple:
    """Axis-aligned wall segments ``((x0, y0), (x1, y1))`` splitting [0,1]^2 into four rooms."""
    lo, hi = 0.25 - door_halfwidth, 0.25 + door_halfwidth
    lo2, hi2 = 0.75 - door_halfwidth, 0.75 + door_halfwidth
    vertical = [((0.5, 0.0), (0.5, lo)), ((0.5, hi), (0.5, lo2)), ((0.5, hi2), (0.5, 1.0))]
    horizontal = [((0.0, 0.5), (lo, 0.5)), ((hi, 0.5), (lo2, 0.5)), ((hi2, 0.5), (1.0, 0.5))]
    return tuple(vertical + horizontal)


@dataclass
class PointMass:
    """2-D point mass with semi-implicit Euler integration and wall blocking.

    State is ``(x, y, vx, vy)``; actions are accelerations in ``[-1, 1]^2``.
    """

    dt: float = 0.05
    v_max: float = 1.0
    walls: tuple = field(default_factory=four_room_walls)
    episode_len: int = 200
    start: tuple | None = (0.15, 0.15)
    bins: int = 10
    env_id: str = "pointmass"

    n_actions = 0
    action_dim = 2
    obs_dim = 4
    discrete = False

    def step(self, state, action):
        return pointmass_step(self, state, action)

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.start is not None:
            return np.array([self.start[0], self.start[1], 0.0, 0.0])
        while True:
            p = rng.uniform(0.0, 1.0, size=2)
            if abs(p[0] - 0.5) > 0.02 and abs(p[1] - 0.5) > 0.02:
                return np.array([p[0], p[1], 0.0, 0.0])

    def cell_of(self, state) -> tuple:
        x, y = state[0], state[1]
        return (min(int(x * self.bins), self.bins - 1), min(int(y * self.bins), self.bins - 1))


def _blocked(walls, axis: int, old: float, new: float, other: float) -> bool:
    if old == new:
        return False
    lo, hi = min(old, new), max(old, new)
    for (x0, y0), (x1, y1) in walls:
        if axis == 0 and x0 == x1:
            if lo <= x0 <= hi and min(y0, y1) <= other <= max(y0, y1):
                return True
        elif axis == 1 and y0 == y1:
            if lo <= y0 <= hi and min(x0, x1) <= other <= max(x0, x1):
                return True
    return False


def pointmass_step(env: PointMass, state, action) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if not np.all(np.isfinite(state)):
        raise ValueError(f"non-finite point-mass state {state}")
    if not np.all(np.isfinite(action)):
        raise ValueError(f"non-finite point-mass action {action}")
    x, y, vx, vy = state
    vx = float(np.clip(vx + action[0] * env.dt, -env.v_max, env.v_max))
    vy = float(np.clip(vy + action[1] * env.dt, -env.v_max, env.v_max))
    nx = float(np.clip(x + vx * env.dt, 0.0, 1.0))
    if _blocked(env.walls, 0, x, nx, y):
        nx, vx = x, 0.0
    ny = float(np.clip(y + vy * env.dt, 0.0, 1.0))
    if _blocked(env.walls, 1, y, ny, nx):
        ny, vy = y, 0.0
    return np.array([nx, ny, vx, vy])


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _rows(a, n: int) -> np.ndarray:
    a = _f32(a)
    # keep the declared width of an empty 2-d block
    width = a.shape[1] if a.ndim == 2 else (a.size // n if n else 1)
    return a.reshape(n, width)


@dataclass
class Dataset:
    """Flat, reward-free transition arrays; episodes are contiguous runs."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    env_id: str = "unknown"
    policy: str = "unknown"
    seed: int = 0
    n_actions: int = 0

    def __post_init__(self):
        n = len(self.dones)
        self.states = _rows(self.states, n)
        self.next_states = _rows(self.next_states, n)
        self.actions = _rows(self.actions, n)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.dones)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def discrete(self) -> bool:
        return self.n_actions > 0

    def action_features(self, actions=None) -> np.ndarray:
        """Network-ready actions: one-hot for discrete envs, raw otherwise."""
        actions = self.actions if actions is None else np.asarray(actions)
        return action_features(actions, self.n_actions)

    def episode_bounds(self) -> list[tuple[int, int]]:
        if len(self) == 0:
            return []
        change = np.flatnonzero(np.diff(self.episode_ids)) + 1
        starts = np.concatenate([[0], change])
        stops = np.concatenate([change, [len(self)]])
        return list(zip(starts.tolist(), stops.tolist()))

    def check_chaining(self) -> bool:
        for start, stop in self.episode_bounds():
            if not np.array_equal(self.next_states[start:stop - 1], self.states[start + 1:stop]):
                return False
        return True

    def equals(self, other: "Dataset") -> bool:
        return (self.env_id == other.env_id and self.policy == other.policy and self.seed == other.seed
                and self.n_actions == other.n_actions
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("states", "actions", "next_states", "dones", "episode_ids")))


def action_features(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    if n_actions <= 0:
        return actions.reshape(len(actions), -1)
    idx = actions.reshape(-1).astype(np.int64)
    out = np.zeros((len(idx), n_actions))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def empty_dataset(obs_dim: int, action_dim: int, n_actions: int = 0, **meta) -> Dataset:
    return Dataset(np.zeros((0, obs_dim)), np.zeros((0, action_dim)), np.zeros((0, obs_dim)),
                   np.zeros(0, bool), np.zeros(0, np.int64), n_actions=n_actions, **meta)


def _count_bonus(count: float) -> float:
    return 1.0 / math.sqrt(1.0 + count)


def generate_dataset(env, policy: str, episodes: int, episode_len: int, seed: int,
                     epsilon: float = 0.1) -> Dataset:
    """Roll out a reward-free behaviour policy.

    ``uniform_random`` picks actions uniformly.  ``count_bonus`` is
    epsilon-greedy on ``1/sqrt(1 + N(cell))`` of the cell each action would
    lead to, with visit counts shared across all episodes; for the point
    mass the cell is a ``bins x bins`` discretisation of the position and
    the candidates are the eight compass accelerations.
    """
    if episodes <= 0 or episode_len <= 0:
        raise ValueError("episodes and episode_len must be positive")
    if policy not in ("uniform_random", "count_bonus"):
        raise ValueError(f"unknown behaviour policy {policy!r}")
    rng = np.random.default_rng(seed)
    states, actions, nexts, dones, eps_ids = [], [], [], [], []
    counts: dict = {}
    compass = np.array([[np.cos(t), np.sin(t)] for t in np.linspace(0, 2 * np.pi, 8, endpoint=False)])
    for ep in range(episodes):
        s = env.reset(rng)
        if env.discrete:
            counts[s] = counts.get(s, 0) + 1
        else:
            counts[env.cell_of(s)] = counts.get(env.cell_of(s), 0) + 1
        for t in range(episode_len):
            if env.discrete:
                if policy == "count_bonus" and rng.random() >= epsilon:
                    bonus = np.array([_count_bonus(counts.get(grid_step(env, s, a), 0))
                                      for a in range(env.n_actions)])
                    best = np.flatnonzero(bonus == bonus.max())
                    a = int(best[rng.integers(len(best))])
                else:
                    a = int(rng.integers(env.n_actions))
                s2 = grid_step(env, s, a)
                states.append(env.observe(s))
                nexts.append(env.observe(s2))
                actions.append([a])
                counts[s2] = counts.get(s2, 0) + 1
            else:
                if policy == "count_bonus" and rng.random() >= epsilon:
                    bonus = np.array([_count_bonus(counts.get(env.cell_of(pointmass_step(env, s, c)), 0))
                                      for c in compass])
                    best = np.flatnonzero(bonus == bonus.max())
                    a = compass[best[rng.integers(len(best))]]
                else:
                    a = rng.uniform(-1.0, 1.0, size=2)
                s2 = pointmass_step(env, s, a)
                states.append(env.observe(s))
                nexts.append(env.observe(s2))
                actions.append(a)
                c2 = env.cell_of(s2)
                counts[c2] = counts.get(c2, 0) + 1
            dones.append(t == episode_len - 1)
            eps_ids.append(ep)
            s = s2
    return Dataset(np.array(states), np.array(actions), np.array(nexts), np.array(dones), np.array(eps_ids),
                   env_id=env.env_id, policy=policy, seed=int(seed), n_actions=env.n_actions)


def exhaustive_dataset(env: GridWorld) -> Dataset:
    """Every (cell, action) pair exactly once, each as its own one-step episode."""
    states, actions, nexts = [], [], []
    for c in env.free_cells:
        for a in range(env.n_actions):
            states.append(env.observe(c))
            actions.append([a])
            nexts.append(env.observe(grid_step(env, c, a)))
    n = len(states)
    return Dataset(np.array(states), np.array(actions), np.array(nexts), np.ones(n, bool), np.arange(n),
                   env_id=env.env_id, policy="exhaustive", seed=0, n_actions=env.n_actions)


def visited_cells(env: GridWorld, dataset: Dataset) -> set:
    cells = set(env.cell_indices(dataset.states).tolist()) if len(dataset) else set()
    if len(dataset):
        cells |= set(env.cell_indices(dataset.next_states).tolist())
    return cells


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class SegmentBatch:
    states: np.ndarray  # [B, H+1, obs_dim]
    actions: np.ndarray  # [B, H, action_dim]
    starts: np.ndarray  # transition index of s_0

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return len(self.starts)


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    plus_states: np.ndarray
    indices: np.ndarray
    plus_indices: np.ndarray


def valid_segment_starts(dataset: Dataset, H: int) -> np.ndarray:
    starts = [np.arange(a, b - H + 1) for a, b in dataset.episode_bounds() if b - a >= H]
    if not starts:
        raise ValueError(f"no episode has at least {H} transitions")
    return np.concatenate(starts)


def segments_at(dataset: Dataset, starts: np.ndarray, H: int) -> SegmentBatch:
    offs = starts[:, None] + np.arange(H)[None, :]
    states = np.concatenate([dataset.states[offs], dataset.next_states[offs[:, -1]][:, None, :]], axis=1)
    return SegmentBatch(states=states, actions=dataset.actions[offs], starts=starts)


def sample_segments(dataset: Dataset, H: int, batch: int, rng: np.random.Generator,
                    valid_starts: np.ndarray | None = None) -> SegmentBatch:
    """Uniform over all start indices whose horizon-H window stays inside one episode."""
    if H < 1:
        raise ValueError("horizon must be >= 1")
    valid = valid_segment_starts(dataset, H) if valid_starts is None else valid_starts
    starts = valid[rng.integers(len(valid), size=batch)]
    return segments_at(dataset, starts, H)


def sample_transitions(dataset: Dataset, batch: int, rng: np.random.Generator) -> TransitionBatch:
    """(s, a, s') uniformly plus an independent batch of s+ drawn from stored next-states."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(n, size=batch)
    plus = rng.integers(n, size=batch)
    return TransitionBatch(dataset.states[idx], dataset.actions[idx], dataset.next_states[idx],
                           dataset.dones[idx], dataset.next_states[plus], idx, plus)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

DATASET_FORMAT = "rldp-dataset"


def dataset_to_bytes(dataset: Dataset) -> bytes:
    n = len(dataset)
    blocks = [dataset.states, dataset.actions, dataset.next_states,
              dataset.dones.astype(np.float64), dataset.episode_ids.astype(np.float64)]
    blob = b"".join(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks)
    header = {
        "format": DATASET_FORMAT,
        "version": 1,
        "env_id": dataset.env_id,
        "policy": dataset.policy,
        "seed": int(dataset.seed),
        "n_transitions": n,
        "obs_dim": int(dataset.states.shape[1]),
        "action_dim": int(dataset.actions.shape[1]),
        "n_actions": int(dataset.n_actions),
        "blob_bytes": len(blob),
    }
    return (json.dumps(header, sort_keys=True) + "\n").encode() + blob


def dataset_from_bytes(raw: bytes) -> Dataset:
    nl = raw.find(b"\n")
    if nl < 0:
        raise DatasetFormatError("header line not terminated", len(raw))
    try:
        header = json.loads(raw[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt header: {exc}", 0) from exc
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError("not an rldp dataset header", 0)
    try:
        n, od, ad = int(header["n_transitions"]), int(header["obs_dim"]), int(header["action_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"header missing field: {exc}", 0) from exc
    base = nl + 1
    expected = 4 * n * (2 * od + ad + 2)
    have = len(raw) - base
    if have < expected:
        raise DatasetFormatError(f"truncated blob: expected {expected} bytes, found {have}", base + have)
    if have > expected:
        raise DatasetFormatError(f"trailing bytes after blob: expected {expected}, found {have}", base + expected)
    vals = np.frombuffer(raw, dtype="<f4", offset=base, count=expected // 4).astype(np.float64)
    cuts = np.cumsum([n * od, n * ad, n * od, n])
    s, a, s2, d, e = np.split(vals, cuts)
    return Dataset(s.reshape(n, od), a.reshape(n, ad), s2.reshape(n, od), d > 0.5, e.astype(np.int64),
                   env_id=header.get("env_id", "unknown"), policy=header.get("policy", "unknown"),
                   seed=int(header.get("seed", 0)), n_actions=int(header.get("n_actions", 0)))


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, dataset_to_bytes(dataset))
    return path


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())

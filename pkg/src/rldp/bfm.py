"""Successor-feature behavioural foundation model on top of state features.

The critic ``psi(s, a, z)`` has two parallel embedders, one for ``(s, a)``
and one for ``(s, z)``, whose outputs are concatenated and fed to a head
producing a ``d``-vector.  ``Q(s, a, z) = psi(s, a, z)^T z``.  Continuous
control adds a tanh actor ``pi(s, z)`` built the same way; discrete
control uses the exact argmax over actions instead of an actor network.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rldp._io import write_csv
from rldp.diffcore import (AdamState, ParamStore, Tensor, adam_step, backward, concat, copy_into, forward_mlp,
                           hard_copy_targets, init_mlp, mlp_spec, rowdot, sphere_project)
from rldp.envdata import Dataset, action_features, sample_transitions
from rldp.replearn import EncoderParams, ortho_penalty

log = logging.getLogger(__name__)

ACTOR_VARIANTS = ("greedy", "td3bc")
CRITIC_VARIANTS = ("successor_measure", "usfa")
MODES = ("frozen_features", "fb_joint")
BC_Q_FLOOR = 1e-8


@dataclass
class BfmConfig:
    gamma: float = 0.98
    z_goal_fraction: float = 0.5
    actor_variant: str = "greedy"
    critic_variant: str = "successor_measure"
    alpha_bc: float = 2.5
    batch: int = 256
    steps: int = 50000
    target_update_period: int = 100
    exploration_noise: float = 0.2
    seed: int = 0
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    embed_hidden: int = 256
    embed_dim: int = 128
    head_hidden: int = 256
    n_heads: int = 2
    log_every: int = 500
    bootstrap_at_done: bool = True
    fb_ortho_coef: float = 1.0
    fb_phi_lr: float = 1e-4
    psi_scale: float = 1.0
    lr_final_fraction: float = 1.0  # critic/actor lr decays linearly to this fraction
    ema_decay: float = 0.0  # > 0 keeps an exponential average of critic weights, returned at the end

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.z_goal_fraction <= 1.0:
            raise ValueError("z_goal_fraction must lie in [0, 1]")
        if self.actor_variant not in ACTOR_VARIANTS:
            raise ValueError(f"unknown actor variant {self.actor_variant!r}")
        if self.critic_variant not in CRITIC_VARIANTS:
            raise ValueError(f"unknown critic variant {self.critic_variant!r}")
        if self.actor_variant == "td3bc" and self.alpha_bc <= 0:
            raise ValueError("alpha_bc must be positive for td3bc")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("lr_final_fraction must lie in (0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.target_update_period < 1 or self.batch < 2 or self.steps < 0:
            raise ValueError("target_update_period >= 1, batch >= 2 and steps >= 0 required")


class BfmParams:
    """Critic, optional actor, their frozen targets, and the feature encoder used in training."""

    def __init__(self, obs_dim: int, n_actions: int, action_dim: int, d: int, embed_hidden: int = 256,
                 embed_dim: int = 128, head_hidden: int = 256, rng: np.random.Generator | None = None,
                 n_heads: int = 2, psi_scale: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        if n_heads < 1:
            raise ValueError("need at least one critic head")
        self.obs_dim, self.n_actions, self.action_dim, self.d = obs_dim, n_actions, action_dim, d
        self.widths = (embed_hidden, embed_dim, head_hidden)
        self.n_heads = n_heads
        self.critic_ema = None  # running weight average, only set while training with ema_decay
        # fixed multiplier on critic outputs; measure targets are large densities
        self.psi_scale = float(psi_scale)
        act_in = n_actions if n_actions > 0 else action_dim
        self.sa_spec = mlp_spec(obs_dim + act_in, (embed_hidden,), embed_dim, output_activation="relu")
        self.sz_spec = mlp_spec(obs_dim + d, (embed_hidden,), embed_dim, output_activation="relu")
        self.head_spec = mlp_spec(2 * embed_dim, (head_hidden,), d)
        self.critic = ParamStore()
        self.critic.update(init_mlp(self.sa_spec, rng, "psi.sa"))
        self.critic.update(init_mlp(self.sz_spec, rng, "psi.sz"))
        for k in range(n_heads):
            self.critic.update(init_mlp(self.head_spec, rng, f"psi.head{k}"))
        self.actor = ParamStore()
        if n_actions == 0:
            self.pi_s_spec = mlp_spec(obs_dim, (embed_hidden,), embed_dim, output_activation="relu")
            self.pi_sz_spec = mlp_spec(obs_dim + d, (embed_hidden,), embed_dim, output_activation="relu")
            self.pi_head_spec = mlp_spec(2 * embed_dim, (head_hidden,), action_dim, output_transform="tanh")
            self.actor.update(init_mlp(self.pi_s_spec, rng, "pi.s"))
            self.actor.update(init_mlp(self.pi_sz_spec, rng, "pi.sz"))
            self.actor.update(init_mlp(self.pi_head_spec, rng, "pi.head"))
        self.critic_target = hard_copy_targets(self.critic)
        self.actor_target = hard_copy_targets(self.actor)
        self.encoder: EncoderParams | None = None

    @property
    def discrete(self) -> bool:
        return self.n_actions > 0

    def arch(self) -> dict:
        return {"obs_dim": self.obs_dim, "n_actions": self.n_actions, "action_dim": self.action_dim, "d": self.d,
                "embed_hidden": self.widths[0], "embed_dim": self.widths[1], "head_hidden": self.widths[2],
                "n_heads": self.n_heads, "psi_scale": self.psi_scale}

    @classmethod
    def from_arch(cls, arch: dict) -> "BfmParams":
        return cls(arch["obs_dim"], arch["n_actions"], arch["action_dim"], arch["d"], arch["embed_hidden"],
                   arch["embed_dim"], arch["head_hidden"], n_heads=arch.get("n_heads", 2),
                   psi_scale=arch.get("psi_scale", 1.0))

    # -- networks -------------------------------------------------------
    def psi_heads(self, states, act_feats, z, store: ParamStore | None = None) -> list[Tensor]:
        """One ``[B, d]`` output per critic head (shared embedders)."""
        store = self.critic if store is None else store
        states = Tensor(states) if not isinstance(states, Tensor) else states
        sa = forward_mlp(self.sa_spec, store, concat([states, act_feats], axis=1), "psi.sa")
        sz = forward_mlp(self.sz_spec, store, concat([states, z], axis=1), "psi.sz")
        joint = concat([sa, sz], axis=1)
        heads = [forward_mlp(self.head_spec, store, joint, f"psi.head{k}") for k in range(self.n_heads)]
        return heads if self.psi_scale == 1.0 else [h * self.psi_scale for h in heads]

    def psi(self, states, act_feats, z, store: ParamStore | None = None) -> Tensor:
        """Head-averaged successor features ``psi(s, a, z)``."""
        heads = self.psi_heads(states, act_feats, z, store)
        out = heads[0]
        for h in heads[1:]:
            out = out + h
        return out * (1.0 / self.n_heads) if self.n_heads > 1 else out

    def psi_all_actions(self, states, z, store: ParamStore | None = None) -> np.ndarray:
        """``[n_heads, B, n_actions, d]`` critic outputs for every discrete action (no graph)."""
        store = self.critic_target if store is None else store
        states = np.asarray(states, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        B, A = len(states), self.n_actions
        sz = forward_mlp(self.sz_spec, store, np.concatenate([states, z], axis=1), "psi.sz").data
        onehots = np.repeat(np.eye(A)[None], B, axis=0).reshape(B * A, A)
        sa = forward_mlp(self.sa_spec, store, np.concatenate([np.repeat(states, A, axis=0), onehots], axis=1),
                         "psi.sa").data
        joint = np.concatenate([sa, np.repeat(sz, A, axis=0)], axis=1)
        return self.psi_scale * np.stack([forward_mlp(self.head_spec, store, joint, f"psi.head{k}").data
                                          .reshape(B, A, self.d) for k in range(self.n_heads)])

    def q_all_actions(self, states, z, store: ParamStore | None = None) -> np.ndarray:
        """Pessimistic ``[B, n_actions]`` action values: the minimum over heads of ``psi^T z``."""
        z = np.broadcast_to(np.atleast_2d(z), (len(np.atleast_2d(states)), self.d))
        psi = self.psi_all_actions(states, z, store)
        return np.einsum("kbad,bd->kba", psi, z).min(axis=0)

    def actor_forward(self, states, z, store: ParamStore | None = None) -> Tensor:
        store = self.actor if store is None else store
        s = forward_mlp(self.pi_s_spec, store, states, "pi.s")
        sz = forward_mlp(self.pi_sz_spec, store, np.concatenate([states, z], axis=1), "pi.sz")
        return forward_mlp(self.pi_head_spec, store, concat([s, sz], axis=1), "pi.head")

    def act(self, states, z, target: bool = False) -> np.ndarray:
        """Deterministic policy: argmax of ``psi^T z`` (discrete) or the actor output."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        z = np.broadcast_to(np.atleast_2d(z), (len(states), self.d))
        if self.discrete:
            return greedy_actions(self.q_all_actions(states, z, self.critic_target if target else self.critic))
        return self.actor_forward(states, z, self.actor_target if target else self.actor).data

    def refresh_targets(self) -> None:
        copy_into(self.critic_target, self.critic)
        copy_into(self.actor_target, self.actor)

    # -- checkpoints ----------------------------------------------------
    def store_for_checkpoint(self) -> ParamStore:
        out = ParamStore()
        for prefix, store in (("", self.critic), ("", self.actor), ("target.", self.critic_target),
                              ("target.", self.actor_target)):
            for name, t in store.items():
                out.add(prefix + name, t)
        return out

    def load_checkpoint_store(self, store: ParamStore) -> None:
        for name, t in store.items():
            if name.startswith("encoder."):
                continue
            target = name.startswith("target.")
            key = name[len("target."):] if target else name
            group = ("critic" if key.startswith("psi.") else "actor") + ("_target" if target else "")
            getattr(self, group)[key].data = t.data.copy()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def q_value(psi_out, z) -> Tensor:
    """``psi(s, a, z)^T z`` per row."""
    psi_out = psi_out if isinstance(psi_out, Tensor) else Tensor(psi_out)
    return rowdot(psi_out, np.broadcast_to(np.atleast_2d(z), psi_out.shape))


def greedy_actions(q_all: np.ndarray) -> np.ndarray:
    """Argmax over the action axis; ties go to the lowest index."""
    return np.argmax(np.asarray(q_all), axis=-1)


def _weights(n: int, w) -> np.ndarray:
    return np.full(n, 1.0 / n) if w is None else np.asarray(w, dtype=np.float64)


def _stack_targets(target_psi_next) -> np.ndarray:
    """``[K, B, d]`` from one ``[B, d]`` array or a sequence of them (one per target head)."""
    t = np.asarray(target_psi_next, dtype=np.float64)
    return t[None] if t.ndim == 2 else t


def loss_fb_joint(psi_sa: Tensor, phi_next, phi_plus, target_psi_next, target_phi_plus, gamma: float,
                  discount=None, sample_weights=None, plus_weights=None) -> Tensor:
    """Bellman-residual successor-measure loss with trainable features.

    ``-E[psi(s,a,z)^T phi(s')] + 1/2 E[(psi(s,a,z)^T phi(s+) - gamma psi_bar(s',a',z)^T phi_bar(s+))^2]``

    Every row of the ``(s, a, s')`` batch is paired with every ``s+`` row;
    the two batches are independent, so all pairs are valid samples.
    ``target_psi_next`` may stack several target heads; the bootstrap then
    uses their elementwise minimum measure.  ``discount`` (per row,
    default 1) switches bootstrapping off where 0.
    """
    B, P = psi_sa.shape[0], np.shape(phi_plus.data if isinstance(phi_plus, Tensor) else phi_plus)[0]
    w = _weights(B, sample_weights)
    rho = _weights(P, plus_weights)
    disc = np.ones(B) if discount is None else np.asarray(discount, dtype=np.float64)
    phi_plus_t = phi_plus if isinstance(phi_plus, Tensor) else Tensor(phi_plus)
    diag = (rowdot(psi_sa, phi_next) * w).sum()
    cross = psi_sa @ phi_plus_t.T
    bootstrap = (_stack_targets(target_psi_next) @ np.asarray(target_phi_plus).T).min(axis=0)
    target = gamma * disc[:, None] * bootstrap
    resid = (cross - target).square() * np.outer(w, rho)
    return -diag + 0.5 * resid.sum()


def loss_sm(psi_sa: Tensor, phi_next, phi_plus, target_psi_next, gamma: float, discount=None,
            sample_weights=None, plus_weights=None) -> Tensor:
    """Contrastive successor-measure loss with frozen features (the same ``phi`` on both sides)."""
    phi_plus_arr = phi_plus.data if isinstance(phi_plus, Tensor) else np.asarray(phi_plus)
    return loss_fb_joint(psi_sa, phi_next, phi_plus_arr, target_psi_next, phi_plus_arr, gamma, discount,
                         sample_weights, plus_weights)


def loss_usfa(psi_sa: Tensor, phi_s, target_psi_next, gamma: float, discount=None, sample_weights=None,
              z=None) -> Tensor:
    """Vector TD: ``E[(psi(s,a,z) - [phi(s) + gamma psi_bar(s',a',z)])^2]``, averaged over the d components.

    With several target heads, each row bootstraps from the head with the
    smaller ``psi_bar^T z`` (``z`` required).
    """
    B, d = psi_sa.shape
    w = _weights(B, sample_weights)
    disc = np.ones(B) if discount is None else np.asarray(discount, dtype=np.float64)
    heads = _stack_targets(target_psi_next)
    if len(heads) > 1:
        if z is None:
            raise ValueError("choosing between target heads needs z")
        pick = np.einsum("kbd,bd->kb", heads, np.broadcast_to(np.atleast_2d(z), (B, d))).argmin(axis=0)
        boot = heads[pick, np.arange(B)]
    else:
        boot = heads[0]
    target = np.asarray(phi_s) + gamma * disc[:, None] * boot
    return ((psi_sa - target).square() * (w[:, None] / d)).sum()


def loss_policy(psi_pi: Tensor, z) -> Tensor:
    """``-E[psi(s, pi(s), z)^T z]``; gradients reach the actor through the action input."""
    return -q_value(psi_pi, z).mean()


def bc_weight(q_values, alpha: float) -> float:
    """``alpha / mean|Q|``, with ``mean|Q|`` floored at 1e-8; a constant for the gradient."""
    scale = float(np.mean(np.abs(np.asarray(q_values, dtype=np.float64))))
    return alpha / max(scale, BC_Q_FLOOR)


def loss_policy_bc(psi_pi: Tensor, z, pi_actions: Tensor, data_actions, alpha: float,
                   lam: float | None = None) -> Tensor:
    """``-lambda_hat * Q(s, pi(s)) + (pi(s) - a)^2`` with ``lambda_hat = alpha / mean|Q|``.

    ``lam`` overrides the batch estimate (useful to hold it fixed).
    """
    q = q_value(psi_pi, z)
    lam = bc_weight(q.data, alpha) if lam is None else lam
    bc = (pi_actions - np.asarray(data_actions, dtype=np.float64)).square().mean()
    return -lam * q.mean() + bc


# ---------------------------------------------------------------------------
# task sampling
# ---------------------------------------------------------------------------

def sample_z(rng: np.random.Generator, goal_features, d: int, goal_fraction: float, size: int = 1) -> np.ndarray:
    """Mix of goal-encoded ``z = phi(s_g)`` and uniform draws on the radius-sqrt(d) sphere."""
    goal_features = np.asarray(goal_features) if goal_features is not None else None
    use_goal = rng.random(size) < goal_fraction
    z = rng.standard_normal((size, d))
    z *= math.sqrt(d) / np.linalg.norm(z, axis=1, keepdims=True)
    n_goal = int(use_goal.sum())
    if n_goal:
        if goal_features is None or len(goal_features) == 0:
            raise ValueError("goal-encoded z requested but no goal features given")
        z[use_goal] = goal_features[rng.integers(len(goal_features), size=n_goal)]
    return z


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class BfmResult:
    bfm: BfmParams
    metrics: list = field(default_factory=list)

    def metrics_to_csv(self, path) -> None:
        write_csv(path, ["step", "critic_loss", "actor_loss", "mean_q"],
                  ([m["step"], m["critic_loss"], m["actor_loss"], m["mean_q"]] for m in self.metrics))


def _next_actions(bfm: BfmParams, next_states, z, rng, config: BfmConfig) -> np.ndarray:
    if bfm.discrete:
        return action_features(greedy_actions(bfm.q_all_actions(next_states, z, bfm.critic_target)), bfm.n_actions)
    a = bfm.actor_forward(next_states, z, bfm.actor_target).data
    if config.exploration_noise > 0:
        noise = np.clip(rng.normal(0.0, config.exploration_noise, a.shape), -0.5, 0.5)
        a = np.clip(a + noise, -1.0, 1.0)
    return a


def _sum_heads(heads, loss_fn) -> Tensor:
    total = loss_fn(heads[0])
    for h in heads[1:]:
        total = total + loss_fn(h)
    return total


def train_bfm(config: BfmConfig, dataset: Dataset, encoder: EncoderParams,
              mode: str = "frozen_features", on_log=None) -> BfmResult:
    """Alternate one critic step and one actor step per iteration.

    ``frozen_features`` keeps ``encoder`` fixed.  ``fb_joint`` trains a
    fresh copy of its ``phi`` jointly with the critic (plus an
    orthogonality penalty weighted by ``fb_ortho_coef``).  ``on_log(step, bfm)``
    is called at every logging step.
    """
    config.validate()
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    if encoder.obs_dim != dataset.obs_dim:
        raise ValueError(f"encoder expects obs_dim {encoder.obs_dim}, dataset has {dataset.obs_dim}")
    if config.critic_variant == "usfa" and mode == "fb_joint":
        raise ValueError("fb_joint trains the successor-measure critic only")
    if config.actor_variant == "td3bc" and dataset.discrete:
        raise ValueError("td3bc needs continuous actions")
    rng = np.random.default_rng(config.seed)
    d = encoder.d
    bfm = BfmParams(dataset.obs_dim, dataset.n_actions, dataset.action_dim, d, config.embed_hidden,
                    config.embed_dim, config.head_hidden, rng, n_heads=config.n_heads,
                    psi_scale=config.psi_scale)
    if mode == "fb_joint":
        enc = EncoderParams(**{**encoder.arch(), "rng": rng})
        phi_opt = AdamState(learning_rate=config.fb_phi_lr)
        phi_params = enc.params.subset("phi")
    else:
        enc = encoder
        feats_s = enc.encode(dataset.states)
        feats_next = enc.encode(dataset.next_states)
    bfm.encoder = enc
    critic_opt = AdamState(learning_rate=config.critic_lr)
    bfm.critic_ema = hard_copy_targets(bfm.critic) if config.ema_decay > 0 else None
    actor_opt = AdamState(learning_rate=config.actor_lr)
    act_feats_all = dataset.action_features()
    metrics: list = []
    for step in range(1, config.steps + 1):
        frac = 1.0 - (1.0 - config.lr_final_fraction) * (step - 1) / max(config.steps - 1, 1)
        critic_opt.learning_rate = config.critic_lr * frac
        actor_opt.learning_rate = config.actor_lr * frac
        batch = sample_transitions(dataset, config.batch, rng)
        if mode == "fb_joint":
            goal_pool = enc.encode(dataset.next_states[rng.integers(len(dataset), size=config.batch)])
        else:
            goal_pool = feats_next
        z = sample_z(rng, goal_pool, d, config.z_goal_fraction, config.batch)
        discount = np.ones(config.batch) if config.bootstrap_at_done else 1.0 - batch.dones
        a_feats = act_feats_all[batch.indices]
        next_a = _next_actions(bfm, batch.next_states, z, rng, config)
        target_psi = np.stack([t.data for t in bfm.psi_heads(batch.next_states, next_a, z, bfm.critic_target)])
        heads = bfm.psi_heads(batch.states, a_feats, z)
        psi_sa = heads[0]
        if mode == "fb_joint":
            phi_next = enc.phi(batch.next_states)
            phi_plus = enc.phi(batch.plus_states)
            target_plus = enc.encode_target(batch.plus_states)
            loss = _sum_heads(heads, lambda h: loss_fb_joint(h, phi_next, phi_plus, target_psi, target_plus,
                                                             config.gamma, discount))
            if config.fb_ortho_coef:
                loss = loss + config.fb_ortho_coef * ortho_penalty(phi_plus)
            all_params = ParamStore()
            all_params.update(bfm.critic)
            all_params.update(phi_params)
            grads = backward(loss, all_params)
            adam_step(critic_opt, bfm.critic, grads.subset("psi"))
            adam_step(phi_opt, phi_params, grads.subset("phi"))
        else:
            if config.critic_variant == "usfa":
                loss = _sum_heads(heads, lambda h: loss_usfa(h, feats_s[batch.indices], target_psi, config.gamma,
                                                             discount, z=z))
            else:
                loss = _sum_heads(heads, lambda h: loss_sm(h, feats_next[batch.indices],
                                                           feats_next[batch.plus_indices], target_psi,
                                                           config.gamma, discount))
            adam_step(critic_opt, bfm.critic, backward(loss, bfm.critic))
        if bfm.critic_ema is not None:
            for name, p in bfm.critic.items():
                avg = bfm.critic_ema[name].data
                avg *= config.ema_decay
                avg += (1.0 - config.ema_decay) * p.data
        actor_loss = float("nan")
        if not bfm.discrete:
            pi_a = bfm.actor_forward(batch.states, z)
            psi_pi = bfm.psi(batch.states, pi_a, z)
            if config.actor_variant == "td3bc":
                a_loss = loss_policy_bc(psi_pi, z, pi_a, batch.actions, config.alpha_bc)
            else:
                a_loss = loss_policy(psi_pi, z)
            adam_step(actor_opt, bfm.actor, backward(a_loss, bfm.actor))
            actor_loss = a_loss.item()
        if step % config.target_update_period == 0:
            bfm.refresh_targets()
            if mode == "fb_joint":
                enc.refresh_target()
        if step % config.log_every == 0 or step == config.steps:
            mean_q = float(np.mean(q_value(psi_sa.data, z).data))
            metrics.append({"step": step, "critic_loss": loss.item(), "actor_loss": actor_loss, "mean_q": mean_q})
            log.debug("bfm step %d critic %.5f actor %.5f q %.3f", step, loss.item(), actor_loss, mean_q)
            if on_log is not None:
                on_log(step, bfm)
    if bfm.critic_ema is not None:
        copy_into(bfm.critic, bfm.critic_ema)
        bfm.refresh_targets()
    return BfmResult(bfm, metrics)


# ---------------------------------------------------------------------------
# tabular critics (exact expectations, for oracle comparisons)
# ---------------------------------------------------------------------------

@dataclass
class TabularCritic:
    psi: np.ndarray  # [S, A, d]
    features: np.ndarray  # [S, d]

    def measure(self) -> np.ndarray:
        """``m(s, a, s+) = psi(s, a)^T phi(s+)``."""
        return np.einsum("sad,td->sat", self.psi, self.features)

    def q(self, z) -> np.ndarray:
        return self.psi @ np.asarray(z, dtype=np.float64)


def fit_tabular_critic(s_idx, a_idx, next_idx, features, n_actions: int, gamma: float,
                       variant: str = "successor_measure", policy=None, z=None, plus_weights=None,
                       steps: int = 5000, lr: float | None = None, target_update_period: int = 1,
                       trainable_features: bool = False, optimizer: str = "gd",
                       rng: np.random.Generator | None = None) -> TabularCritic:
    """Fit a table ``psi[s, a]`` by full-batch descent on the exact empirical loss.

    Every listed transition gets equal weight and every state is paired
    with every ``s+`` (weights ``plus_weights``, default: empirical
    next-state frequencies).  The bootstrap action at ``s'`` follows
    ``policy`` (``[S, A]`` probabilities) or, if ``policy`` is None, the
    greedy action for ``z``.  With ``lr=None`` plain gradient descent uses
    the reciprocal of the largest curvature of the per-row quadratic.
    ``trainable_features`` also learns the feature table (projected onto
    the sphere), as the joint forward-backward loss does.
    """
    s_idx, a_idx, next_idx = (np.asarray(v, dtype=np.int64) for v in (s_idx, a_idx, next_idx))
    features = np.asarray(features, dtype=np.float64)
    S, d = features.shape
    A = n_actions
    n = len(s_idx)
    if variant not in CRITIC_VARIANTS:
        raise ValueError(f"unknown critic variant {variant!r}")
    if policy is None and z is None:
        raise ValueError("need a fixed policy or a task vector z for greedy bootstrapping")
    if plus_weights is None:
        plus_weights = np.bincount(next_idx, minlength=S) / n
    plus_weights = np.asarray(plus_weights, dtype=np.float64)
    rng = np.random.default_rng(0) if rng is None else rng
    table = Tensor(np.zeros((S * A, d)), requires_grad=True)
    params = ParamStore({"psi": table})
    if trainable_features:
        params.add("phi", Tensor(features + 0.1 * rng.standard_normal(features.shape), requires_grad=True))
    w = np.full(n, 1.0 / n)
    rows = s_idx * A + a_idx
    if lr is None:
        # repeated (s, a) pairs accumulate into one table row
        row_weight = float(np.bincount(rows, weights=w).max())
        if variant == "usfa":
            curv = 2.0 / d * row_weight
        else:
            second = (features * plus_weights[:, None]).T @ features
            curv = row_weight * float(np.linalg.eigvalsh(second).max())
        lr = 1.0 / curv
    opt = AdamState(learning_rate=lr) if optimizer == "adam" else None
    target = table.data.copy()
    feats_target = features.copy()

    def current_features():
        if trainable_features:
            return sphere_project(params["phi"], d)
        return Tensor(features)

    for step in range(steps):
        if step % target_update_period == 0:
            target = table.data.copy()
            if trainable_features:
                feats_target = current_features().data
        tgt = target.reshape(S, A, d)[next_idx]  # [n, A, d]
        if policy is not None:
            probs = np.asarray(policy)[next_idx]
        else:
            greedy = greedy_actions(tgt @ np.asarray(z))
            probs = np.eye(A)[greedy]
        target_next = np.einsum("na,nad->nd", probs, tgt)
        psi_sa = table.take_rows(rows)
        feats = current_features()
        if variant == "usfa":
            loss = loss_usfa(psi_sa, features[s_idx], target_next, gamma, sample_weights=w)
        elif trainable_features:
            loss = loss_fb_joint(psi_sa, feats.take_rows(next_idx), feats, target_next, feats_target, gamma,
                                 sample_weights=w, plus_weights=plus_weights)
        else:
            loss = loss_sm(psi_sa, features[next_idx], features, target_next, gamma,
                           sample_weights=w, plus_weights=plus_weights)
        grads = backward(loss, params)
        if opt is not None:
            adam_step(opt, params, grads)
        else:
            for name, p in params.items():
                p.data -= lr * grads[name].data
    final_feats = current_features().data
    return TabularCritic(table.data.reshape(S, A, d).copy(), final_feats)

"""State-representation pretraining.

Four methods share one encoder layout:

* ``rldp``        latent next-state prediction + orthogonality penalty
* ``rldp_no_sn``  same, without projecting the dynamics-head output onto the sphere
* ``laplacian``   graph-Laplacian smoothness + orthogonality penalty
* ``random``      the untrained encoder

The encoder ``phi`` maps states onto the radius-sqrt(d) sphere.  For the
prediction loss an action projector ``A``, a dynamics MLP ``g`` and a
linear map ``w`` unroll ``h_{t+1} = sphere(g([h_t, A(a_t)]) @ w)`` from
``h_0 = phi(s_0)``; targets come from a hard-copied ``phi_target`` that
never receives gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from rldp._io import write_csv
from rldp.diffcore import (AdamState, MlpSpec, ParamStore, Tensor, adam_step, backward, concat, copy_into,
                           forward_mlp, hard_copy_targets, init_mlp, mlp_spec, sphere_project)
from rldp.envdata import Dataset, SegmentBatch, action_features, sample_segments, valid_segment_starts

log = logging.getLogger(__name__)

METHODS = ("rldp", "rldp_no_sn", "laplacian", "random")


@dataclass
class ReprConfig:
    d: int = 64
    H: int = 5
    lam: float = 1.0
    target_update_period: int = 1000
    method: str = "rldp"
    beta: float = 1.0
    learning_rate: float = 1e-4
    batch: int = 256
    total_steps: int = 20000
    seed: int = 0
    phi_hidden: tuple = (256, 256)
    action_proj: int = 256
    g_hidden: tuple = (512, 512)
    trace_every: int = 500
    probe_size: int = 256
    probe_seed: int = 0

    def __post_init__(self):
        self.phi_hidden = tuple(self.phi_hidden)
        self.g_hidden = tuple(self.g_hidden)
        self.validate()

    def validate(self) -> None:
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.target_update_period < 1:
            raise ValueError("target_update_period must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown representation method {self.method!r}; choose from {METHODS}")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")


class EncoderParams:
    """Encoder ``phi``, action projector ``A``, dynamics head ``g``, map ``w`` and ``phi_target``."""

    def __init__(self, obs_dim: int, n_actions: int, action_dim: int, d: int, phi_hidden=(256, 256),
                 action_proj: int = 256, g_hidden=(512, 512), sphere_g: bool = True,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.obs_dim, self.n_actions, self.action_dim, self.d = obs_dim, n_actions, action_dim, d
        self.sphere_g = sphere_g
        act_in = n_actions if n_actions > 0 else action_dim
        self.phi_spec = mlp_spec(obs_dim, phi_hidden, d, output_transform="sphere")
        self.a_spec = MlpSpec((act_in, action_proj), ("none",))
        self.g_spec = mlp_spec(d + action_proj, g_hidden, d)
        self.params = ParamStore()
        self.params.update(init_mlp(self.phi_spec, rng, "phi"))
        self.params.update(init_mlp(self.a_spec, rng, "A"))
        self.params.update(init_mlp(self.g_spec, rng, "g"))
        bound = 1.0 / math.sqrt(d)
        self.params.add("w", rng.uniform(-bound, bound, size=(d, d)))
        self.target = hard_copy_targets(self.params.subset("phi"))

    # -- configuration round trip (for checkpoints) ---------------------
    def arch(self) -> dict:
        return {
            "obs_dim": self.obs_dim, "n_actions": self.n_actions, "action_dim": self.action_dim, "d": self.d,
            "phi_hidden": list(self.phi_spec.layer_widths[1:-1]), "action_proj": self.a_spec.out_width,
            "g_hidden": list(self.g_spec.layer_widths[1:-1]), "sphere_g": self.sphere_g,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "EncoderParams":
        return cls(arch["obs_dim"], arch["n_actions"], arch["action_dim"], arch["d"], tuple(arch["phi_hidden"]),
                   arch["action_proj"], tuple(arch["g_hidden"]), arch["sphere_g"])

    def store_for_checkpoint(self) -> ParamStore:
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t)
        for name, t in self.target.items():
            out.add("target." + name, t)
        return out

    def load_checkpoint_store(self, store: ParamStore) -> None:
        for name, t in store.items():
            if name.startswith("target."):
                self.target[name[len("target."):]].data = t.data.copy()
            else:
                self.params[name].data = t.data.copy()

    # -- forward passes -------------------------------------------------
    def action_features(self, actions) -> np.ndarray:
        return action_features(actions, self.n_actions)

    def phi(self, states) -> Tensor:
        return forward_mlp(self.phi_spec, self.params, states, "phi")

    def encode(self, states) -> np.ndarray:
        return encode(self, states)

    __call__ = encode

    def encode_target(self, states) -> np.ndarray:
        return forward_mlp(self.phi_spec, self.target, np.atleast_2d(states), "phi").data

    def predict(self, h: Tensor, action_feats) -> Tensor:
        a = forward_mlp(self.a_spec, self.params, action_feats, "A")
        out = forward_mlp(self.g_spec, self.params, concat([h, a], axis=1), "g") @ self.params["w"]
        return sphere_project(out) if self.sphere_g else out

    def refresh_target(self) -> None:
        copy_into(self.target, self.params.subset("phi"))


def encode(params: EncoderParams, states) -> np.ndarray:
    """Embed a batch of states; rows lie on the radius-sqrt(d) sphere."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    return forward_mlp(params.phi_spec, params.params, states, "phi").data


def encoder_for(config: ReprConfig, dataset: Dataset, rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(dataset.obs_dim, dataset.n_actions, dataset.action_dim, config.d, config.phi_hidden,
                         config.action_proj, config.g_hidden, sphere_g=config.method != "rldp_no_sn", rng=rng)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def rollout_latent(params: EncoderParams, s0, actions, h0: Tensor | None = None) -> list[Tensor]:
    """Unroll the latent model; ``actions`` is ``[B, H, action_dim]`` (raw actions)."""
    actions = np.asarray(actions, dtype=np.float64)
    B, H = actions.shape[0], actions.shape[1]
    if H < 1:
        raise ValueError("need at least one action to unroll")
    h = params.phi(np.asarray(s0, dtype=np.float64)) if h0 is None else h0
    out = []
    for t in range(H):
        feats = params.action_features(actions[:, t].reshape(B, -1))
        h = params.predict(h, feats)
        out.append(h)
    return out


def _dynamics_terms(params: EncoderParams, segments: SegmentBatch) -> tuple[Tensor, Tensor]:
    B, Hp1, obs_dim = segments.states.shape
    H = Hp1 - 1
    h0 = params.phi(segments.states[:, 0])
    preds = rollout_latent(params, None, segments.actions, h0=h0)
    targets = params.encode_target(segments.states[:, 1:].reshape(B * H, obs_dim)).reshape(B, H, -1)
    loss = None
    for t, h in enumerate(preds):
        step = (h - targets[:, t]).square().sum(axis=1).mean()
        loss = step if loss is None else loss + step
    return loss, h0


def loss_dynamics(params: EncoderParams, segments: SegmentBatch) -> Tensor:
    """Batch mean of sum_t ||h_{t+1} - phi_target(s_{t+1})||^2."""
    return _dynamics_terms(params, segments)[0]


def ortho_penalty(emb: Tensor) -> Tensor:
    """Mean off-diagonal entry of the Gram matrix ``emb @ emb.T``."""
    B = emb.shape[0]
    if B < 2:
        raise ValueError("orthogonality penalty needs a batch of at least 2")
    offdiag = 1.0 - np.eye(B)
    gram = emb @ emb.T
    return (gram * offdiag).sum() * (1.0 / (B * (B - 1)))


def loss_ortho(states, params: EncoderParams) -> Tensor:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) < 2:
        raise ValueError("loss_ortho needs a batch of at least 2 states")
    return ortho_penalty(params.phi(states))


def loss_rldp(params: EncoderParams, segments: SegmentBatch, lam: float) -> Tensor:
    """Dynamics loss plus ``lam`` times the orthogonality penalty on the s_0 batch."""
    l_d, h0 = _dynamics_terms(params, segments)
    if lam == 0:
        return l_d
    return l_d + lam * ortho_penalty(h0)


def loss_laplacian(params: EncoderParams, states, next_states, beta: float, neg_states=None) -> Tensor:
    """0.5 E||phi(s) - phi(s')||^2 over consecutive pairs + beta E[phi(s)^T phi(s~)] over independent pairs.

    The independent pairs are the distinct rows of ``neg_states`` (default:
    the rows of ``states``, which are themselves independent draws).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) < 2:
        raise ValueError("loss_laplacian needs a batch of at least 2")
    ps = params.phi(states)
    pn = params.phi(np.atleast_2d(next_states))
    smooth = (ps - pn).square().sum(axis=1).mean() * 0.5
    neg = ps if neg_states is None else params.phi(np.atleast_2d(neg_states))
    return smooth + beta * ortho_penalty(neg)


def cosine_similarity_mean(embeddings) -> float:
    """Mean cos(phi_i, phi_j) over unordered pairs i < j."""
    e = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    n = len(e)
    if n < 2:
        raise ValueError("need at least two embeddings")
    u = e / np.linalg.norm(e, axis=1, keepdims=True)
    cos = u @ u.T
    return float((cos.sum() - np.trace(cos)) / (n * (n - 1)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class CollapseTrace:
    steps: list = field(default_factory=list)
    values: list = field(default_factory=list)

    def record(self, step: int, value: float) -> None:
        self.steps.append(int(step))
        self.values.append(float(value))

    @property
    def final(self) -> float:
        return self.values[-1]

    def to_csv(self, path) -> None:
        write_csv(path, ["step", "mean_cosine"], zip(self.steps, self.values))


@dataclass
class ReprResult:
    encoder: EncoderParams
    trace: CollapseTrace
    history: list  # dicts: step, loss, dynamics, ortho
    steps_done: int = 0


def probe_batch(dataset: Dataset, size: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(dataset)
    idx = rng.choice(n, size=min(size, n), replace=False)
    return dataset.states[np.sort(idx)]


def train_representation(config: ReprConfig, dataset: Dataset) -> ReprResult:
    """Adam on the selected method's loss, refreshing ``phi_target`` every ``target_update_period`` steps."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    enc = encoder_for(config, dataset, rng)
    probe = probe_batch(dataset, config.probe_size, config.probe_seed)
    trace = CollapseTrace()
    trace.record(0, cosine_similarity_mean(enc.encode(probe)))
    history: list = []
    if config.method == "random" or config.total_steps == 0:
        return ReprResult(enc, trace, history, 0)

    H = 1 if config.method == "laplacian" else config.H
    valid = valid_segment_starts(dataset, H)
    opt = AdamState(learning_rate=config.learning_rate)
    for step in range(1, config.total_steps + 1):
        seg = sample_segments(dataset, H, config.batch, rng, valid_starts=valid)
        if config.method == "laplacian":
            loss = loss_laplacian(enc, seg.states[:, 0], seg.states[:, 1], config.beta)
            parts = (float("nan"), float("nan"))
        else:
            l_d, h0 = _dynamics_terms(enc, seg)
            l_r = ortho_penalty(h0)
            loss = l_d + config.lam * l_r if config.lam != 0 else l_d
            parts = (l_d.item(), l_r.item())
        grads = backward(loss, enc.params)
        adam_step(opt, enc.params, grads)
        if step % config.target_update_period == 0:
            enc.refresh_target()
        if step % config.trace_every == 0 or step == config.total_steps:
            trace.record(step, cosine_similarity_mean(enc.encode(probe)))
            history.append({"step": step, "loss": loss.item(), "dynamics": parts[0], "ortho": parts[1]})
            log.debug("repr step %d loss %.5f cos %.4f", step, loss.item(), trace.final)
    return ReprResult(enc, trace, history, config.total_steps)


# ---------------------------------------------------------------------------
# hand-built encoders
# ---------------------------------------------------------------------------

def identity_encoder(transition_tensor: np.ndarray) -> EncoderParams:
    """Exact abstraction for a deterministic tabular MDP with one-hot observations.

    ``phi(s) = sqrt(n) e_s`` and the dynamics head reproduces the true
    next state, so the prediction loss is zero.  Observations must be the
    one-hot encoding scaled by ``sqrt(n)`` (as :class:`GridWorld` emits).
    """
    P = np.asarray(transition_tensor)
    n, A, _ = P.shape
    if not np.all((P == 0) | (P == 1)):
        raise ValueError("identity_encoder needs deterministic transitions")
    enc = EncoderParams(n, A, 1, n, phi_hidden=(n, n), action_proj=A, g_hidden=(n * A, n * A))
    p = enc.params
    eye = np.eye(n)
    for i in range(3):
        p[f"phi.{i}.weight"].data = eye.copy()
        p[f"phi.{i}.bias"].data = np.zeros(n)
    p["A.0.weight"].data = np.eye(A)
    p["A.0.bias"].data = np.zeros(A)
    w0 = np.zeros((n + A, n * A))
    w2 = np.zeros((n * A, n))
    scale = math.sqrt(n)
    for s in range(n):
        for a in range(A):
            unit = s * A + a
            w0[s, unit] = 1.0 / scale
            w0[n + a, unit] = 1.0
            w2[unit, int(np.argmax(P[s, a]))] = scale
    p["g.0.weight"].data = w0
    p["g.0.bias"].data = -np.ones(n * A)
    p["g.1.weight"].data = np.eye(n * A)
    p["g.1.bias"].data = np.zeros(n * A)
    p["g.2.weight"].data = w2
    p["g.2.bias"].data = np.zeros(n)
    p["w"].data = eye.copy()
    enc.refresh_target()
    return enc


def repr_config_fields() -> list[str]:
    return [f.name for f in fields(ReprConfig)]

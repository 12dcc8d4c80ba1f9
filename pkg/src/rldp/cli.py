"""Command-line pipeline: gen-data, pretrain, train-bfm, eval, diag.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from rldp._io import derive_seed, write_csv
from rldp.bfm import BfmParams, train_bfm
from rldp.config import ConfigError, RunConfig, load_config, parse_config
from rldp.diffcore import NumericError, ParamStore, load_checkpoint, save_checkpoint
from rldp.envdata import FOUR_ROOMS, GridWorld, PointMass, generate_dataset, load_dataset, save_dataset, \
    visited_cells
from rldp.oracle import TabularPolicy, empirical_rho, gridworld_mdp, lemma_bound_report
from rldp.replearn import EncoderParams, cosine_similarity_mean, probe_batch, train_representation
from rldp.zeroshot import bfm_policy, evaluate, infer_z_mean, infer_z_regression, successor_heatmap

log = logging.getLogger("rldp")

ENCODER_CKPT = "encoder.ckpt"
BFM_CKPT = "bfm.ckpt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def build_env(cfg: RunConfig):
    if cfg.env.id == "pointmass":
        return PointMass()
    return GridWorld(cfg.env.layout or FOUR_ROOMS, obs_mode=cfg.env.obs_mode, env_id=cfg.env.id)


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def _seeded(cfg: RunConfig, component: str) -> int:
    return derive_seed(cfg.env.seed, component)


def _repr_config(cfg: RunConfig):
    rc = cfg.repr
    rc.seed = _seeded(cfg, "repr")
    return rc


def _bfm_config(cfg: RunConfig):
    bc = cfg.bfm
    bc.seed = _seeded(cfg, "bfm")
    return bc


def load_encoder(path: Path) -> tuple[EncoderParams, dict]:
    store, meta = load_checkpoint(_require(path, "encoder checkpoint"))
    enc = EncoderParams.from_arch(meta["arch"])
    enc.load_checkpoint_store(store)
    return enc, meta


def load_bfm(path: Path, encoder_path: Path) -> tuple[BfmParams, EncoderParams, dict]:
    store, meta = load_checkpoint(_require(path, "bfm checkpoint"))
    bfm = BfmParams.from_arch(meta["arch"])
    bfm.load_checkpoint_store(store)
    if meta.get("mode") == "fb_joint":
        enc = EncoderParams.from_arch(meta["encoder_arch"])
        inner = ParamStore({k[len("encoder."):]: t for k, t in store.items() if k.startswith("encoder.")})
        enc.load_checkpoint_store(inner)
    else:
        enc, _ = load_encoder(encoder_path)
    if enc.d != bfm.d:
        raise ValueError(f"encoder dimension {enc.d} does not match critic dimension {bfm.d}")
    bfm.encoder = enc
    return bfm, enc, meta


def _coverage(env, dataset) -> tuple[int, int]:
    if isinstance(env, GridWorld):
        return len(visited_cells(env, dataset)), env.n_free
    cells = {env.cell_of(s) for s in dataset.states} | {env.cell_of(s) for s in dataset.next_states}
    return len(cells), env.bins * env.bins


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, force: bool = False) -> Path:
    env = build_env(cfg)
    out = cfg.path("dataset")
    _check_writable(out, force)
    ds = generate_dataset(env, cfg.data.policy, cfg.data.episodes, cfg.data.episode_len, _seeded(cfg, "data"),
                          epsilon=cfg.data.epsilon)
    save_dataset(ds, out)
    visited, total = _coverage(env, ds)
    write_csv(cfg.path("metrics") / "data_summary.csv",
              ["transitions", "episodes", "visited_cells", "total_cells", "coverage"],
              [[len(ds), cfg.data.episodes, visited, total, visited / total]])
    log.info("wrote %d transitions to %s (coverage %.3f)", len(ds), out, visited / total)
    return out


def cmd_pretrain(cfg: RunConfig, force: bool = False) -> Path:
    ds = load_dataset(_require(cfg.path("dataset"), "dataset"))
    out = cfg.path("checkpoints") / ENCODER_CKPT
    _check_writable(out, force)
    rc = _repr_config(cfg)
    res = train_representation(rc, ds)
    meta = {"kind": "encoder", "arch": res.encoder.arch(), "method": rc.method, "steps_done": res.steps_done,
            "trace": {"steps": res.trace.steps, "values": res.trace.values}}
    save_checkpoint(out, res.encoder.store_for_checkpoint(), meta)
    metrics = cfg.path("metrics")
    res.trace.to_csv(metrics / "collapse_trace.csv")
    write_csv(metrics / "repr_history.csv", ["step", "loss", "dynamics", "ortho"],
              ([h["step"], h["loss"], h["dynamics"], h["ortho"]] for h in res.history))
    log.info("encoder (%s, %d steps) saved to %s", rc.method, res.steps_done, out)
    return out


def cmd_train_bfm(cfg: RunConfig, force: bool = False) -> Path:
    ds = load_dataset(_require(cfg.path("dataset"), "dataset"))
    out = cfg.path("checkpoints") / BFM_CKPT
    _check_writable(out, force)
    bc = _bfm_config(cfg)
    enc_path = cfg.path("checkpoints") / ENCODER_CKPT
    if bc.mode == "fb_joint" and not enc_path.exists():
        rc = cfg.repr
        encoder = EncoderParams(ds.obs_dim, ds.n_actions, ds.action_dim, rc.d, rc.phi_hidden, rc.action_proj,
                                rc.g_hidden)
    else:
        encoder, _ = load_encoder(enc_path)
    if encoder.obs_dim != ds.obs_dim:
        raise ValueError(f"encoder expects observations of width {encoder.obs_dim}, dataset has {ds.obs_dim}")
    res = train_bfm(bc, ds, encoder, mode=bc.mode)
    store = res.bfm.store_for_checkpoint()
    meta = {"kind": "bfm", "arch": res.bfm.arch(), "mode": bc.mode, "encoder_arch": res.bfm.encoder.arch(),
            "steps": bc.steps}
    if bc.mode == "fb_joint":
        for name, t in res.bfm.encoder.store_for_checkpoint().items():
            store.add("encoder." + name, t)
    save_checkpoint(out, store, meta)
    res.metrics_to_csv(cfg.path("metrics") / "bfm_metrics.csv")
    log.info("bfm (%s, %d steps) saved to %s", bc.mode, bc.steps, out)
    return out


def cmd_eval(cfg: RunConfig, force: bool = False) -> Path:
    tasks = cfg.tasks()
    metrics = cfg.path("metrics")
    summary = metrics / "eval_summary.csv"
    rows = []
    if tasks:
        env = build_env(cfg)
        ds = load_dataset(_require(cfg.path("dataset"), "dataset"))
        bfm, enc, _ = load_bfm(cfg.path("checkpoints") / BFM_CKPT, cfg.path("checkpoints") / ENCODER_CKPT)
        eval_seed = _seeded(cfg, "eval")
        for i, spec in enumerate(tasks):
            reward = spec.bind(env)
            rng = np.random.default_rng([eval_seed, i])
            if cfg.eval.inference == "mean":
                z = infer_z_mean(ds, enc, reward, cfg.eval.N, rng, rescale=cfg.eval.rescale_z)
            else:
                z = infer_z_regression(ds, enc, reward, cfg.eval.N, cfg.eval.ridge, rng, rescale=cfg.eval.rescale_z)
            report = evaluate(env, bfm_policy(bfm, enc, z), spec, cfg.eval.episodes, eval_seed,
                              episode_len=cfg.eval.episode_len, gamma=cfg.bfm.gamma)
            report.to_csv(metrics / f"eval_{spec.name}.csv")
            rows.append([spec.name, report.mean, report.std, report.success_rate if spec.is_goal else float("nan"),
                         report.episodes])
            log.info("task %s: mean return %.3f, success %.2f", spec.name, report.mean, report.success_rate)
    write_csv(summary, ["task", "mean_return", "std_return", "success_rate", "episodes"], rows)
    return summary


def cmd_diag(cfg: RunConfig, force: bool = False) -> Path:
    env = build_env(cfg)
    tabular_needed = bool(cfg.diag.heatmaps) or cfg.diag.lemma
    if tabular_needed and not isinstance(env, GridWorld):
        raise UsageError("heatmaps and the bound report need a gridworld; set diag.heatmaps: [] and "
                         "diag.lemma: false for continuous environments")
    out = cfg.path("metrics") / "diag"
    ds = load_dataset(_require(cfg.path("dataset"), "dataset"))
    enc, meta = load_encoder(cfg.path("checkpoints") / ENCODER_CKPT)
    trace = meta.get("trace", {"steps": [], "values": []})
    probe = probe_batch(ds, cfg.repr.probe_size, cfg.repr.probe_seed)
    steps = list(trace["steps"])
    values = list(trace["values"])
    if not steps:
        steps, values = [0], [cosine_similarity_mean(enc.encode(probe))]
    write_csv(out / "cosine_trace.csv", ["step", "mean_cosine"], zip(steps, values))

    if isinstance(env, GridWorld):
        states = env.observe_all()
        coords = env.free_cells
    else:
        states = ds.states[: cfg.repr.probe_size]
        coords = [tuple(s[:2]) for s in states]
    emb = enc.encode(states)
    write_csv(out / "embeddings.csv", ["x", "y"] + [f"phi_{k}" for k in range(enc.d)],
              ([*c, *e] for c, e in zip(coords, emb)))

    if cfg.diag.heatmaps:
        bfm, henc, _ = load_bfm(cfg.path("checkpoints") / BFM_CKPT, cfg.path("checkpoints") / ENCODER_CKPT)
        for i, h in enumerate(cfg.diag.heatmaps):
            try:
                s0, a0, goal = tuple(h["s0"]), int(h["a0"]), tuple(h["goal"])
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"diag.heatmaps[{i}]: needs s0, a0 and goal ({exc})") from None
            if goal not in env.index:
                raise ConfigError(f"diag.heatmaps[{i}].goal: {goal} is not a free cell")
            z = henc.encode(env.observe(goal)[None])[0]
            hm = successor_heatmap(bfm, henc, env, s0, a0, z)
            hm.to_csv(out / f"heatmap_{i}.csv")

    if cfg.diag.lemma:
        if cfg.diag.lemma_policy == "uniform":
            policy = TabularPolicy.uniform(env.n_free, env.n_actions)
        else:
            policy = TabularPolicy.random(env.n_free, env.n_actions, np.random.default_rng(_seeded(cfg, "diag")))
        mdp = gridworld_mdp(env, cfg.bfm.gamma, empirical_rho(env, ds))
        rep = lemma_bound_report(enc, mdp, policy, ds, env.observe_all(), lam=cfg.repr.lam,
                                 H=1 if cfg.repr.method == "laplacian" else cfg.repr.H)
        write_csv(out / "lemma_bound.csv", ["lhs", "rhs", "loss_dynamics", "loss_ortho", "n_groups"],
                  [[rep.lhs, rep.rhs, rep.loss_dynamics, rep.loss_ortho, rep.n_groups]])
    return out


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-bfm": cmd_train_bfm, "eval": cmd_eval,
            "diag": cmd_diag}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rldp", description="Latent-dynamics representations and zero-shot policies.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML run configuration (defaults apply when omitted)")
        s.add_argument("--seed", type=int, help="root seed; overrides env.seed")
        s.add_argument("--force", action="store_true", help="overwrite existing outputs")
        s.add_argument("--out", type=Path, help="directory that relative paths resolve against")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config) if args.config else parse_config({})
        if args.seed is not None:
            cfg.env.seed = args.seed
        if args.out is not None:
            cfg.base_dir = args.out
        COMMANDS[args.command](cfg, force=args.force)
    except NumericError as exc:
        print(f"rldp: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"rldp: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

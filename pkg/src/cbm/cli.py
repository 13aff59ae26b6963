"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand writes into its output directory the resolved config
(``config.json``), a manifest of the artifacts it produced
(``manifest.json``) and a schema-versioned ``metadata.json``.  With several
seeds each seed gets a sibling ``seed_<k>`` directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import abstraction as ab
from . import cmi as C
from . import dynamics as D
from . import explicit as X
from . import loop as L
from . import oracle as O
from . import reward as R
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig
from .env import EnvSpec, GroundTruthGraph, ReplayBuffer, collect_dataset

log = logging.getLogger("cbm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class RunDir:
    """Output directory that records every artifact written through it."""

    def __init__(self, path: Path, cfg: ExperimentConfig, command: str, seed: int):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg, self.command, self.seed = cfg, command, seed
        self.artifacts: list[str] = []
        resolved = cfg.to_dict()
        resolved["run"]["seeds"] = [seed]
        resolved["run"]["out_dir"] = str(self.path)
        (self.path / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def file(self, name: str) -> Path:
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.path / name

    def finish(self, extra: dict | None = None) -> None:
        entries = []
        for name in sorted(self.artifacts):
            p = self.path / name
            if p.exists():
                data = p.read_bytes()
                entries.append({"path": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {"command": self.command, "artifacts": entries}
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        meta = {"schema_version": SCHEMA_VERSION, "package_version": __version__, "command": self.command, "seed": self.seed}
        meta.update(extra or {})
        (self.path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared stages


def _env(cfg: ExperimentConfig, seed: int) -> EnvSpec:
    return cfg.env.build(seed)


def _buffer(cfg: ExperimentConfig, env: EnvSpec, seed: int) -> ReplayBuffer:
    if cfg.dyn.buffer_path:
        try:
            buf = ReplayBuffer.load(cfg.dyn.buffer_path)
        except OSError as exc:
            raise ConfigError(f"cannot read buffer {cfg.dyn.buffer_path}: {exc}") from None
        if (buf.d_S, buf.d_A) != (env.d_S, env.d_A):
            raise ConfigError("buffer dimensions do not match the environment")
        return buf
    return collect_dataset(env, cfg.dyn.behavior_policy, cfg.dyn.n_transitions, seed=seed)


def _split(cfg: ExperimentConfig, buf: ReplayBuffer):
    return buf.split(cfg.dyn.heldout_fraction)


def _supports(env: EnvSpec):
    sups = env.supports()
    return sups if any(s is not None for s in sups) else None


def _train_implicit(cfg, env, train_buf, seed, run: RunDir | None = None, resume: str | None = None) -> D.DynModel:
    if resume:
        model = D.load_model(resume)
        state = Path(resume).parent / "resume.pt"
        if state.exists():
            D.load_resume_state(model, state)
    else:
        model = D.build_model(train_buf, cfg.dyn.model_config(), seed, env.ranges, _supports(env))
    trace: list = []
    D.train_dyn(model, train_buf, cfg.dyn.steps, trace)
    if run is not None:
        manifest = D.save_model(model, run.path)
        run.file(manifest.name)
        for f in json.loads(manifest.read_text(encoding="utf-8"))["files"]:
            run.file(f)
        D.write_loss_trace(trace, run.file("loss.csv"), env.d_S)
        D.save_resume_state(model, run.file("resume.pt"))
    return model


def _train_explicit(cfg, env, train_buf, seed, run: RunDir | None = None) -> X.ExplicitDynModel:
    model = X.build_explicit(train_buf, cfg.dyn.model_config(), seed, env.ranges)
    trace: list = []
    X.train_explicit(model, train_buf, cfg.dyn.steps, trace)
    if run is not None:
        manifest = X.save_explicit(model, run.path)
        run.file(manifest.name)
        for f in json.loads(manifest.read_text(encoding="utf-8"))["files"]:
            run.file(f)
        D.write_loss_trace(trace, run.file("loss.csv"), env.d_S)
    return model


def _write_reward_trace(trace, path: Path, n_tasks: int) -> None:
    rows: dict[int, list] = {}
    for step, k, lf, lm in trace:
        rows.setdefault(step, [""] * (2 * n_tasks))[2 * k : 2 * k + 2] = [repr(float(lf)), repr(float(lm))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"{n}_task{k}" for k in range(n_tasks) for n in ("nll_full", "nll_masked")])
        for step in sorted(rows):
            w.writerow([step, *rows[step]])


def _oracle_values(env: EnvSpec, cfg: ExperimentConfig) -> np.ndarray | None:
    if env.transition_kind != "discrete-tabular" or env.n_controllable_distractors or env.n_uncontrollable_distractors:
        return None
    return O.oracle_matrix(env, cfg.dyn.behavior_policy)


def _estimate(cfg, env, train_buf, eval_buf, seed, kind: str, model=None) -> C.CmiMatrix:
    if kind == "oracle-exact":
        vals = _oracle_values(env, cfg)
        if vals is None:
            raise ConfigError("oracle-exact needs a discrete-tabular environment without distractors")
        return C.CmiMatrix(vals, 0, 0, "oracle-exact")
    n_eval = min(cfg.dyn.n_eval, len(eval_buf))
    if kind == "explicit-likelihood":
        model = model or _train_explicit(cfg, env, train_buf, seed)
        return X.explicit_cmi_matrix(model, eval_buf, n_eval)
    model = model or _train_implicit(cfg, env, train_buf, seed)
    learned = None
    if kind == "demi-learned-phi":
        learned = {
            (i, j): C.train_demi_phi(model, train_buf, i, j, cfg.dyn.demi_steps, seed)
            for i in range(model.d_S)
            for j in range(model.n_units)
        }
    return C.cmi_matrix(model, kind, eval_buf, n_eval, seed=seed, learned=learned)


def _report(env: EnvSpec, cfg: ExperimentConfig, est: C.CmiMatrix, graph: C.CausalGraphEstimate) -> dict:
    rep = {
        "estimator": est.estimator_kind,
        "threshold": graph.threshold,
        "n_eval_transitions": est.n_eval_transitions,
        "n_negatives": est.n_negatives,
        "accuracy": C.graph_accuracy(graph, env.true_graph),
    }
    oracle = _oracle_values(env, cfg)
    if oracle is not None:
        rows = []
        for j in range(oracle.shape[0]):
            for i in range(oracle.shape[1]):
                e, o = float(est.values[j, i]), float(oracle[j, i])
                rows.append({"parent": j, "child": i, "estimate": e, "oracle": o, "abs_error": abs(e - o)})
        rep["per_pair"] = rows
        rep["max_abs_error"] = max(r["abs_error"] for r in rows)
    return rep


def _json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _short(kind: str) -> str:
    return {"cbm-g-minus-psi": "cbm", "demi-learned-phi": "demi", "explicit-likelihood": "explicit",
            "oracle-exact": "oracle"}[kind]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, seed: int, run: RunDir, args) -> dict:
    env = _env(cfg, seed)
    buf = collect_dataset(env, cfg.dyn.behavior_policy, cfg.dyn.n_transitions, seed=seed)
    try:
        buf.save(run.file("buffer.bin"))
    except OSError as exc:
        raise ConfigError(f"cannot write to {run.path}: {exc}") from None
    run.file("buffer.bin.json")
    env.save(run.file("env.json"))
    return {"n_records": len(buf)}


def cmd_train_dynamics(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    train, _ = _split(cfg, _buffer(cfg, env, seed))
    model = _train_implicit(cfg, env, train, seed, run, getattr(args, "resume", None))
    return {"steps_done": model.steps_done}


def cmd_train_explicit(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    train, _ = _split(cfg, _buffer(cfg, env, seed))
    model = _train_explicit(cfg, env, train, seed, run)
    return {"steps_done": model.steps_done}


def cmd_train_reward(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    train, held = _split(cfg, _buffer(cfg, env, seed))
    net = R.build_reward_net(train, cfg.reward.model_config(), seed, env.ranges)
    trace: list = []
    R.train_reward(net, train, cfg.reward.steps, trace)
    manifest = R.save_reward_net(net, run.path)
    run.file(manifest.name)
    for k in range(net.n_tasks):
        run.file(f"reward_task{k}.json")
    _write_reward_trace(trace, run.file("reward_loss.csv"), net.n_tasks)
    values = R.reward_cmi_matrix(net, held.arrays())
    R.write_reward_cmi_csv(values, run.file("reward_cmi.csv"), env.variable_names())
    parents = {k: R.parents_from_cmi(values[k], cfg.reward.eps) for k in range(net.n_tasks)}
    R.save_parents(parents, run.file("reward_parents.json"))
    return {"reward_parents": {str(k): v for k, v in parents.items()}}


def cmd_eval_cmi(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    kind = getattr(args, "estimator", None) or cfg.dyn.estimator_kind
    model = None
    if getattr(args, "model", None):
        model = X.load_explicit(args.model) if kind == "explicit-likelihood" else D.load_model(args.model)
    train, held = (None, None) if kind == "oracle-exact" else _split(cfg, _buffer(cfg, env, seed))
    est = _estimate(cfg, env, train, held, seed, kind, model)
    graph = C.binarize(est, cfg.dyn.eps)
    tag = _short(kind)
    est.to_csv(run.file(f"cmi_{tag}.csv"), env.variable_names())
    graph.save(run.file(f"graph_{tag}.json"))
    rep = _report(env, cfg, est, graph)
    _json(run.file(f"report_{tag}.json"), rep)
    return {"estimator": kind, "accuracy": rep["accuracy"]}


def _load_parents(path: str | None, truth: GroundTruthGraph, n_tasks: int) -> dict[int, list[int]]:
    if path is None:
        return {k: [int(j) for j in np.flatnonzero(truth.reward_parents[k])] for k in range(n_tasks)}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {int(d["task"]): [int(j) for j in d["parents"]] for d in doc}


def cmd_derive_abstraction(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    graph = C.CausalGraphEstimate.load(args.graph).edges if getattr(args, "graph", None) else env.true_graph.dyn_parents
    parents = _load_parents(getattr(args, "reward_parents", None), env.true_graph, env.n_tasks)
    prov = cfg.abstraction.provenance
    out = {}
    for k in cfg.run.tasks:
        if prov == "full":
            mask = ab.full_mask(env.d_S, k)
        elif prov == "oracle":
            mask = ab.oracle_mask(env.true_graph, k)
        elif prov == "cdl":
            mask = ab.cdl_abstraction(graph, k)
        else:
            mask = ab.bisim_abstraction(graph, parents.get(k, []), k)
        mask.save(run.file(f"mask_task{k}.json"))
        out[str(k)] = {
            "kept": mask.indices,
            "accuracy_vs_oracle": ab.abstraction_accuracy(mask, ab.oracle_mask(env.true_graph, k)),
        }
    _json(run.file("abstraction_report.json"), out)
    return {"masks": out}


def _policy_doc(agent) -> dict:
    def dump(net):
        return {name: p.detach().double().tolist() for name, p in net.named_parameters()}

    return {"version": 1, "kind": "sac", "mask": agent.mask.to_dict(), "actor": dump(agent.actor),
            "critic": dump(agent.critic), "target": dump(agent.target)}


def _train_policy(cfg, env, seed, run, dyn) -> L.RunResult:
    res = L.run_cbm(env, cfg.loop_config(), cfg.sac.model_config(), cfg.reward.model_config(), dyn, seed)
    L.write_training_log(res.log_rows, run.file("training_log.csv"))
    L.write_mask_history(res.mask_history, run.file("mask_history.json"))
    _json(run.file("cmi_snapshots.json"), res.cmi_snapshots)
    for k, agent in res.agents.items():
        _json(run.file(f"policy_task{k}.json"), _policy_doc(agent))
    return res


def _needs_dyn(cfg) -> bool:
    return cfg.abstraction.provenance in ("bisimulation", "cdl")


def cmd_train_policy(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    dyn = None
    if _needs_dyn(cfg):
        if getattr(args, "model", None):
            dyn = D.load_model(args.model)
        else:
            train, _ = _split(cfg, _buffer(cfg, env, seed))
            dyn = _train_implicit(cfg, env, train, seed, run)
    res = _train_policy(cfg, env, seed, run, dyn)
    return {"episodes": len(res.log_rows)}


def cmd_run_experiment(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    env.save(run.file("env.json"))
    buf = _buffer(cfg, env, seed)
    buf.save(run.file("buffer.bin"))
    run.file("buffer.bin.json")
    train, held = _split(cfg, buf)
    summary: dict = {}
    dyn = None
    if _needs_dyn(cfg) or cfg.dyn.estimator_kind in ("cbm-g-minus-psi", "demi-learned-phi"):
        dyn = _train_implicit(cfg, env, train, seed, run)
    kind = cfg.dyn.estimator_kind
    est = _estimate(cfg, env, train, held, seed, kind, dyn if kind != "explicit-likelihood" else None)
    graph = C.binarize(est, cfg.dyn.eps)
    tag = _short(kind)
    est.to_csv(run.file(f"cmi_{tag}.csv"), env.variable_names())
    graph.save(run.file(f"graph_{tag}.json"))
    rep = _report(env, cfg, est, graph)
    _json(run.file(f"report_{tag}.json"), rep)
    summary["graph_accuracy"] = rep["accuracy"]
    res = _train_policy(cfg, env, seed, run, dyn)
    summary["final_masks"] = {str(k): m.indices for k, m in res.masks.items()}
    summary["episodes"] = len(res.log_rows)
    return summary


def cmd_oracle_cmi(cfg, seed, run, args) -> dict:
    env = _env(cfg, seed)
    vals = _oracle_values(env, cfg)
    if vals is None:
        raise ConfigError("oracle-cmi needs a discrete-tabular environment without distractors")
    C.CmiMatrix(vals, 0, 0, "oracle-exact").to_csv(run.file("cmi_oracle.csv"), env.variable_names())
    return {"max": float(vals.max())}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dynamics": cmd_train_dynamics,
    "train-explicit": cmd_train_explicit,
    "train-reward": cmd_train_reward,
    "eval-cmi": cmd_eval_cmi,
    "derive-abstraction": cmd_derive_abstraction,
    "train-policy": cmd_train_policy,
    "run-experiment": cmd_run_experiment,
    "oracle-cmi": cmd_oracle_cmi,
}


# ---------------------------------------------------------------------------
# driver


def _run_one(command: str, cfg_dict: dict, seed: int, out: str, args_dict: dict, threads: int) -> dict:
    torch.set_num_threads(threads)
    cfg = ExperimentConfig.from_dict(cfg_dict)
    run = RunDir(Path(out), cfg, command, seed)
    info = COMMANDS[command](cfg, seed, run, argparse.Namespace(**args_dict))
    run.finish({"summary": info})
    return info


def _nonfinite(obj) -> bool:
    if isinstance(obj, float):
        return not math.isfinite(obj)
    if isinstance(obj, dict):
        return any(_nonfinite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(_nonfinite(v) for v in obj)
    return False


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults apply to missing fields)")
    common.add_argument("--seed", type=int, help="run a single seed, overriding run.seeds")
    common.add_argument("--out-dir", help="output directory, overriding run.out_dir")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    common.add_argument("--parallel-seeds", action="store_true", help="run seeds in parallel processes")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads per process")
    p = argparse.ArgumentParser(prog="cbm", description="Causal bisimulation modeling experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("eval-cmi", "train-policy"):
            sp.add_argument("--model", help="manifest of a trained dynamics model")
        if name == "eval-cmi":
            sp.add_argument("--estimator", choices=C.ESTIMATORS, help="override dyn.estimator_kind")
        if name == "train-dynamics":
            sp.add_argument("--resume", help="manifest of a checkpoint to continue training from")
        if name == "derive-abstraction":
            sp.add_argument("--graph", help="graph JSON from eval-cmi (default: true graph)")
            sp.add_argument("--reward-parents", help="reward_parents.json from train-reward (default: true parents)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.run = replace(cfg.run, seeds=[args.seed])
        if args.out_dir:
            cfg.run = replace(cfg.run, out_dir=args.out_dir)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), file=sys.stderr)
    seeds = cfg.run.seeds
    base = Path(cfg.run.out_dir)
    outs = [str(base) if len(seeds) == 1 else str(base / f"seed_{s}") for s in seeds]
    extra = {k: v for k, v in vars(args).items()
             if k in ("model", "estimator", "resume", "graph", "reward_parents")}
    jobs = [(args.command, cfg.to_dict(), s, o, extra, args.threads) for s, o in zip(seeds, outs)]
    try:
        if args.parallel_seeds and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
                results = list(pool.map(_run_one, *zip(*jobs)))
        else:
            results = [_run_one(*job) for job in jobs]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for s, info in zip(seeds, results):
        if _nonfinite(info):
            print(f"numeric failure: non-finite summary for seed {s}", file=sys.stderr)
            return EXIT_NUMERIC
        if not args.quiet:
            print(json.dumps({"seed": s, **info}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line runner: ``eqspike {train,distill,eval,sweep,agreement,gradcheck}``.

Settings come from built-in defaults, then the JSON ``--config`` file, then
command-line flags, each overriding the one before. Every run writes a
``manifest.json`` holding the resolved configuration and seed, and passing
that manifest back as ``--config`` repeats the run exactly.

One ``numpy.random.default_rng(seed)`` generator is threaded through task
generation, initialization and data shuffling, in that order.
"""
from __future__ import annotations

import argparse
import copy
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as eio
from . import kernels
from .distill import (DistillConfig, TeacherConfig, TeacherModel, general_corpus, init_projections,
                      load_projections, load_teacher, run_pipeline, save_projections, save_teacher,
                      train_teacher)
from .energy import energy_report, sweep
from .equilibrium import (ConvergenceCriterion, SurrogateNet, agreement_report, convergence_table,
                          simulate_to_equilibrium)
from .gradients import ImplicitSolveConfig, gradcheck
from .model import ModelConfig, ModelParams, embed, init_params, load_checkpoint, save_checkpoint
from .train import TaskSpec, TrainConfig, evaluate, load_task, make_task, save_task, train_supervised

SCHEMA_VERSION = 1
MANIFEST_KIND = "eqspike-manifest"
COMMANDS = ("train", "distill", "eval", "sweep", "agreement", "gradcheck")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "task": {"name": "majority", "n_train": 96, "n_eval": 32},
    "model": {"init_std": 0.5},
    "criterion": {"t_max": 80, "tol": 1e-3, "window": 10},
    "solve": {"max_iters": 500, "tol": 1e-10, "damping": 0.5, "method": "iterative"},
    "train": {"epochs": 10, "lr": 0.01, "batch_size": 16},
    "teacher": {"n_layers": 1, "d_model": 32, "d_ff": 64, "init_std": 0.1, "epochs": 100, "lr": 3e-3,
                "batch_size": 16, "checkpoint": None},
    "distill": {
        "general_corpus_size": 256,
        "stages": [
            {"stage": "general", "epochs": 4, "lr": 0.01},
            {"stage": "task", "epochs": 12, "lr": 0.01},
            {"stage": "prediction", "epochs": 8, "lr": 0.01, "temperature": 1.0},
        ],
    },
    "checkpoint": None,
    "projections": None,
    "energy": {"divide_by_t": False},
    "sweep": {"axis": "t_conv", "values": [4, 8, 16, 32, 80]},
    "agreement": {"steps": [50, 500], "n_examples": 4, "every": 10},
    "gradcheck": {"n_configs": 4, "feedback": False, "coords_per_param": 3, "feedback_scale": 0.05,
                  "step": 1e-5, "threshold": None},
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config(path) -> dict:
    """Load a config file, or the configuration stored in a run manifest."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("kind") == MANIFEST_KIND:
        doc = doc["config"]
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return doc


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = _merge(cfg, read_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.t_conv is not None:
        cfg["criterion"]["t_max"] = args.t_conv
    if args.v_th is not None:
        cfg["model"]["v_th"] = args.v_th
    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    if args.teacher is not None:
        cfg["teacher"]["checkpoint"] = args.teacher
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _criterion(cfg) -> ConvergenceCriterion:
    return ConvergenceCriterion(**cfg["criterion"])


def _solve(cfg) -> ImplicitSolveConfig:
    return ImplicitSolveConfig(**cfg["solve"])


def build_task(cfg: dict, rng: np.random.Generator) -> TaskSpec:
    t = cfg["task"]
    if "train" in t:
        return load_task(t)
    return make_task(t["name"], rng, int(t.get("n_train", 96)), int(t.get("n_eval", 32)), t.get("length"))


def model_config(cfg: dict, task: TaskSpec) -> ModelConfig:
    fields = dict(cfg["model"])
    fields.update(task.model_fields())
    return ModelConfig.from_dict(fields)


def student_for(cfg: dict, task: TaskSpec, rng: np.random.Generator) -> ModelParams:
    if cfg.get("checkpoint"):
        params = load_checkpoint(cfg["checkpoint"])
        if "v_th" in cfg["model"]:
            params = ModelParams(params.config.replace(v_th=float(cfg["model"]["v_th"])), params.arrays)
        return params
    return init_params(model_config(cfg, task), rng)


# ---------------------------------------------------------------- commands

def _metrics_rows(rows: list, header: list):
    return [[r.get(k, "") for k in header] for r in rows]


def cmd_train(cfg, out: Path, rng) -> dict:
    task = build_task(cfg, rng)
    data = save_task(task, out / "data")
    params = student_for(cfg, task, rng)
    tc = TrainConfig(criterion=_criterion(cfg), solve=_solve(cfg), **cfg["train"])
    params, rows = train_supervised(params, task, tc, rng)
    save_checkpoint(out / "student.json", params)
    metric = "accuracy" if task.kind == "classification" else "pearson"
    header = ["epoch", "stage", "loss", metric, "mean_t_used"]
    eio.write_csv(out / "metrics.csv", header, _metrics_rows(rows, header))
    return {"outputs": ["student.json", "metrics.csv", "data/train.tsv", "data/eval.tsv"], "data": data,
            "final": {k: v for k, v in rows[-1].items() if k != "stage"} if rows else {}}


def cmd_distill(cfg, out: Path, rng) -> dict:
    task = build_task(cfg, rng)
    data = save_task(task, out / "data")
    tcfg = cfg["teacher"]
    if tcfg.get("checkpoint"):
        teacher = load_teacher(tcfg["checkpoint"])
        teacher_rows = []
    else:
        shape = {k: tcfg[k] for k in ("n_layers", "d_model", "d_ff", "init_std")}
        fields = task.model_fields()
        tconf = TeacherConfig(vocab_size=fields["vocab_size"], seq_len=fields["seq_len"],
                              n_heads=model_config(cfg, task).n_heads, task_head=task.kind,
                              n_classes=task.n_classes, **shape)
        teacher, teacher_rows = train_teacher(TeacherModel.init(tconf, rng), task, tcfg["epochs"],
                                              tcfg["lr"], tcfg["batch_size"], rng)
    save_teacher(out / "teacher.json", teacher)
    student = student_for(cfg, task, rng)
    projections = load_projections(cfg["projections"]) if cfg.get("projections") else init_projections(
        student, teacher, rng)
    dcfg = cfg["distill"]
    stages = []
    for s in dcfg["stages"]:
        s = dict(s)
        s.setdefault("batch_size", cfg["train"]["batch_size"])
        stages.append(DistillConfig(criterion=_criterion(cfg), solve=_solve(cfg), **s))
    corpus = general_corpus(task.vocab, task.seq_len, int(dcfg["general_corpus_size"]), rng)
    eio.write_csv(out / "data" / "general.tsv", ["tokens"], [[" ".join(map(str, r))] for r in corpus])
    student, projections, rows = run_pipeline(student, teacher, task, stages, rng, corpus, projections)
    save_checkpoint(out / "student.json", student)
    save_projections(out / "projections.json", projections)
    metric = "accuracy" if task.kind == "classification" else "pearson"
    header = ["epoch", "stage", "hidden", "attention", "embedding", "prediction", "total", metric]
    teacher_part = [{"epoch": r["epoch"], "stage": "teacher", "total": r["loss"], metric: r[metric]}
                    for r in teacher_rows]
    eio.write_csv(out / "metrics.csv", header, _metrics_rows(teacher_part + rows, header))
    return {
        "outputs": ["student.json", "teacher.json", "projections.json", "metrics.csv"],
        "stages": [s.to_dict() for s in stages],
        "teacher_checkpoint": str(out / "teacher.json"),
        "student_checkpoint": str(out / "student.json"),
        "corpus": {**data, "general": str(out / "data" / "general.tsv")},
        "final": {k: v for k, v in rows[-1].items() if k != "stage"} if rows else {},
    }


def cmd_eval(cfg, out: Path, rng) -> dict:
    task = build_task(cfg, rng)
    params = student_for(cfg, task, rng)
    metrics, record = evaluate(params, task, _criterion(cfg), return_record=True)
    report = energy_report(record, params.config, cfg["energy"]["divide_by_t"])
    eio.write_json(out / "metrics.json", metrics)
    eio.write_json(out / "energy.json", report.to_dict())
    header = sorted(metrics)
    eio.write_csv(out / "metrics.csv", header, [[metrics[k] for k in header]])
    return {"outputs": ["metrics.json", "metrics.csv", "energy.json"], "final": metrics}


def cmd_sweep(cfg, out: Path, rng) -> dict:
    task = build_task(cfg, rng)
    params = student_for(cfg, task, rng)
    sw = cfg["sweep"]
    header, rows = sweep(params, task, sw["axis"], sw["values"], _criterion(cfg), cfg["energy"]["divide_by_t"])
    eio.write_csv(out / "sweep.csv", header, rows)
    return {"outputs": ["sweep.csv"], "rows": len(rows)}


def cmd_agreement(cfg, out: Path, rng) -> dict:
    task = build_task(cfg, rng)
    params = student_for(cfg, task, rng)
    ag = cfg["agreement"]
    tokens = task.arrays("eval")[0][: int(ag["n_examples"])]
    net = SurrogateNet(params)
    rows = []
    for steps in ag["steps"]:
        crit = ConvergenceCriterion(t_max=int(steps), tol=0.0, window=_criterion(cfg).window)
        record = simulate_to_equilibrium(params, tokens, crit)
        for layer, r in agreement_report(record, net, embed(tokens, params)).items():
            rows.append([int(steps), layer, r["abs"], r["rel"]])
    eio.write_csv(out / "agreement.csv", ["t", "layer", "abs_diff", "rel_diff"], rows)
    header, conv = convergence_table(params, tokens[:1], int(max(ag["steps"])), int(ag["every"]))
    eio.write_csv(out / "convergence.csv", header, conv)
    return {"outputs": ["agreement.csv", "convergence.csv"]}


def gradcheck_configs(n: int, feedback: bool, rng: np.random.Generator):
    """Random small configurations: 1-2 encoders, D_emb <= 16, N_s <= 8."""
    out = []
    for _ in range(n):
        heads = int(rng.choice([1, 2]))
        d = int(rng.choice([4, 8])) if feedback else int(rng.choice([4, 8, 16]))
        out.append(ModelConfig(
            vocab_size=int(rng.integers(4, 9)), seq_len=int(rng.integers(2, 5 if feedback else 9)),
            d_emb=d, d_intermediate=2 * d, n_encoders=int(rng.integers(1, 3)), n_heads=heads,
            feedback_enabled=feedback, norm_enabled=bool(rng.random() < 0.8), init_std=0.5,
            task_head="classification" if rng.random() < 0.7 else "regression", n_classes=int(rng.integers(2, 4))))
    return out


def run_gradchecks(n: int, feedback: bool, rng: np.random.Generator, coords_per_param: int = 3,
                   feedback_scale: float = 0.05, step: float = 1e-5, solve=ImplicitSolveConfig()):
    """Gradient checks on random toy models; feedback matrices are scaled down
    so the input-layer map stays contractive."""
    results = []
    for cfg in gradcheck_configs(n, feedback, rng):
        params = init_params(cfg, rng)
        if feedback:
            params["feedback"] = params["feedback"] * feedback_scale
        tokens = rng.integers(0, cfg.vocab_size, size=(2, cfg.seq_len))
        rep = gradcheck(params, tokens, rng, coords_per_param=coords_per_param, step=step, solve=solve)
        results.append({"config": cfg.to_dict(), "max_rel_error": rep.max_rel_error,
                        "checked": rep.checked, "excluded": rep.excluded})
    return results


def cmd_gradcheck(cfg, out: Path, rng) -> dict:
    g = cfg["gradcheck"]
    feedback = bool(g["feedback"])
    threshold = g["threshold"] if g["threshold"] is not None else (1e-2 if feedback else 1e-3)
    results = run_gradchecks(int(g["n_configs"]), feedback, rng, int(g["coords_per_param"]),
                             float(g["feedback_scale"]), float(g["step"]), _solve(cfg))
    worst = max(r["max_rel_error"] for r in results) if results else 0.0
    report = {"threshold": threshold, "max_rel_error": worst, "passed": worst < threshold, "results": results}
    eio.write_json(out / "gradcheck.json", report)
    return {"outputs": ["gradcheck.json"], "final": {"max_rel_error": worst, "passed": worst < threshold},
            "exit_code": 0 if worst < threshold else 1}


HANDLERS = {"train": cmd_train, "distill": cmd_distill, "eval": cmd_eval, "sweep": cmd_sweep,
            "agreement": cmd_agreement, "gradcheck": cmd_gradcheck}


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqspike", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file or run manifest")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--t-conv", type=int, dest="t_conv", help="simulation step limit")
        p.add_argument("--v-th", type=float, dest="v_th", help="firing threshold")
        p.add_argument("--checkpoint", help="student checkpoint to start from")
        p.add_argument("--teacher", help="teacher checkpoint (distill)")
    return parser


def versions() -> dict:
    return {"eqspike": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "kernel_backend": kernels.BACKEND}


def run(command: str, cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(cfg["seed"]))
    result = HANDLERS[command](cfg, out, rng)
    code = int(result.pop("exit_code", 0))
    manifest = {"kind": MANIFEST_KIND, "command": command, "seed": cfg["seed"], "config": cfg,
                "versions": versions(), "result": result}
    eio.write_json(out / "manifest.json", manifest)
    return code


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _error("usage", "invalid command line", 2)
    try:
        cfg = resolve_config(args)
        return run(args.command, cfg, Path(args.out))
    except (ConfigError, KeyError, TypeError) as exc:
        return _error("config", str(exc), 2)
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        return _error(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())

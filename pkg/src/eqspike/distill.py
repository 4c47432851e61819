"""Teacher-student distillation from a plain transformer into the spiking student.

The teacher is an ordinary (non-spiking) encoder trained here by backprop.
The student matches, through learned projections, the teacher's embedding
output and hidden states, its pre-softmax attention scores and finally its
softened logits. Student layer ``i`` (1-based) is paired with teacher layer
``p * i``, ``p = teacher layers / student layers``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import io as eio
from . import numerics as nx
from .attention import merge_heads, split_heads
from .equilibrium import ConvergenceCriterion, SurrogateNet, simulate_to_equilibrium
from .gradients import ImplicitSolveConfig, loss_gradients
from .model import ModelParams, truncated_normal
from .train import OptimizerState, TaskSpec, Vocab, batches, evaluate, label_loss, optimizer_step, score

STAGES = ("general", "task", "prediction")


# ------------------------------------------------------------------ teacher

@dataclass
class TeacherConfig:
    vocab_size: int = 16
    seq_len: int = 8
    d_model: int = 16
    d_ff: int = 32
    n_layers: int = 2
    n_heads: int = 2
    task_head: str = "classification"
    n_classes: int = 2
    init_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.seq_len, self.d_model, self.d_ff, self.n_layers, self.n_heads) < 1:
            raise ValueError("teacher dimensions must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 1 if self.task_head == "regression" else self.n_classes

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def teacher_shapes(cfg: TeacherConfig) -> dict:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.seq_len, d),
              "emb_ln_gain": (d,), "emb_ln_shift": (d,)}
    for j in range(cfg.n_layers):
        p = f"layer{j}."
        shapes.update({
            p + "w_q": (d, d), p + "b_q": (d,), p + "w_k": (d, d), p + "b_k": (d,),
            p + "w_v": (d, d), p + "b_v": (d,), p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln1_gain": (d,), p + "ln1_shift": (d,),
            p + "w_ff1": (d, f), p + "b_ff1": (f,), p + "w_ff2": (f, d), p + "b_ff2": (d,),
            p + "ln2_gain": (d,), p + "ln2_shift": (d,),
        })
    shapes["head.w"] = (d, cfg.n_outputs)
    shapes["head.b"] = (cfg.n_outputs,)
    return shapes


@dataclass
class TeacherModel:
    config: TeacherConfig
    arrays: dict

    @classmethod
    def init(cls, config: TeacherConfig, rng: np.random.Generator) -> "TeacherModel":
        arrays = {}
        for name, shape in teacher_shapes(config).items():
            leaf = name.split(".")[-1]
            if leaf.endswith("gain"):
                arrays[name] = np.ones(shape)
            elif leaf.startswith("b_") or leaf.endswith("shift") or name == "head.b":
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = truncated_normal(rng, shape, config.init_std)
        return cls(config, arrays)

    def forward(self, tokens, source=None) -> dict:
        """Embedding output, per-layer hidden states and scores, and logits.

        With tape nodes in ``source`` the whole pass is differentiable.
        """
        cfg = self.config
        src = self.arrays if source is None else source
        tokens = np.asarray(tokens)
        x = nx.add(nx.gather_rows(src["tok_emb"], tokens), src["pos_emb"])
        x = nx.layer_norm(x, src["emb_ln_gain"], src["emb_ln_shift"])
        out = {"embedding": x, "hidden": [], "scores": []}
        scale = 1.0 / np.sqrt(cfg.d_model // cfg.n_heads)
        for j in range(cfg.n_layers):
            p = f"layer{j}."

            def lin(a, w, b):
                return nx.add(nx.matmul(a, src[p + w]), src[p + b])

            qh = split_heads(lin(x, "w_q", "b_q"), cfg.n_heads)
            kh = split_heads(lin(x, "w_k", "b_k"), cfg.n_heads)
            vh = split_heads(lin(x, "w_v", "b_v"), cfg.n_heads)
            scores = nx.scale(nx.matmul(qh, nx.swap_last(kh)), scale)
            ctx = merge_heads(nx.matmul(nx.softmax_rows(scores), vh))
            x = nx.layer_norm(nx.add(x, lin(ctx, "w_o", "b_o")), src[p + "ln1_gain"], src[p + "ln1_shift"])
            ff = lin(nx.gelu(lin(x, "w_ff1", "b_ff1")), "w_ff2", "b_ff2")
            x = nx.layer_norm(nx.add(x, ff), src[p + "ln2_gain"], src[p + "ln2_shift"])
            out["hidden"].append(x)
            out["scores"].append(scores)
        pooled = nx.take(x, (Ellipsis, slice(0, 1), slice(None)))
        logits = nx.add(nx.matmul(pooled, src["head.w"]), src["head.b"])
        shape = nx.value_of(logits).shape
        out["logits"] = nx.reshape(logits, shape[:-2] + (shape[-1],))
        return out


def train_teacher(teacher: TeacherModel, task: TaskSpec, epochs: int, lr: float, batch_size: int,
                  rng: np.random.Generator):
    """Plain backprop on the task labels; returns ``(teacher, metric rows)``."""
    if teacher.config.task_head != task.kind:
        raise ValueError("teacher head does not fit the task")
    opt = OptimizerState(lr)
    tokens, labels = task.arrays("train")
    rows = []
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in batches(len(labels), batch_size, rng):
            leaves = {k: nx.param(v, k) for k, v in teacher.arrays.items()}
            out = teacher.forward(tokens[idx], leaves)
            loss = label_loss(task.kind, labels[idx], teacher.config.n_outputs)(SimpleNamespace(logits=out["logits"]))
            grads = nx.grads_by_name(nx.backward(loss), leaves.values())
            arrays, opt = optimizer_step(teacher.arrays, grads, opt)
            teacher = TeacherModel(teacher.config, arrays)
            losses.append(float(loss.value))
        rows.append({"epoch": epoch, "stage": "teacher", "loss": float(np.mean(losses)),
                     **teacher_metrics(teacher, task)})
    return teacher, rows


def teacher_metrics(teacher: TeacherModel, task: TaskSpec, split: str = "eval") -> dict:
    tokens, labels = task.arrays(split)
    return score(task.kind, teacher.forward(tokens)["logits"], labels)


def save_teacher(path, teacher: TeacherModel) -> None:
    eio.save_tensors(path, "teacher", teacher.config.to_dict(), teacher.arrays)


def load_teacher(path) -> TeacherModel:
    kind, config, arrays, _ = eio.load_tensors(path)
    if kind != "teacher":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not a teacher")
    cfg = TeacherConfig(**config)
    if set(arrays) != set(teacher_shapes(cfg)):
        raise ValueError(f"{path}: teacher parameter names do not match its config")
    return TeacherModel(cfg, arrays)


# -------------------------------------------------------------- layer map

@dataclass(frozen=True)
class LayerMap:
    teacher_layers: int
    student_layers: int

    def __post_init__(self):
        if self.student_layers < 1 or self.teacher_layers % self.student_layers:
            raise ValueError(f"{self.teacher_layers} teacher layers do not divide into "
                             f"{self.student_layers} student layers")

    @property
    def p(self) -> int:
        return self.teacher_layers // self.student_layers

    def __call__(self, i: int) -> int:
        """Teacher layer (1-based) paired with student layer ``i`` (1-based)."""
        if not 1 <= i <= self.student_layers:
            raise IndexError(f"student layer {i} outside 1..{self.student_layers}")
        return self.p * i

    def pairs(self):
        """0-based ``(student, teacher)`` index pairs."""
        return [(i - 1, self(i) - 1) for i in range(1, self.student_layers + 1)]


# ------------------------------------------------------------------ losses

def hidden_loss(student_rates, w_td, teacher_hidden):
    """Mean squared error between ``rates @ w_td`` and the teacher states."""
    proj = nx.matmul(student_rates, w_td)
    return nx.mse(proj, teacher_hidden)


embedding_loss = hidden_loss


def attention_loss(student_scores, teacher_scores):
    s, t = nx.value_of(student_scores).shape, nx.value_of(teacher_scores).shape
    if s != t:
        raise nx.DimensionError(f"attention score shapes differ: {s} vs {t}")
    return nx.mse(student_scores, teacher_scores)


def prediction_loss(student_logits, teacher_logits, temperature: float = 1.0, kind: str = "classification"):
    """Soft cross-entropy at temperature ``t'``; squared error for regression."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if kind == "regression":
        return nx.mse(student_logits, teacher_logits)
    target = nx.value_of(nx.softmax_rows(np.asarray(nx.value_of(teacher_logits)) / temperature))
    return nx.soft_cross_entropy(nx.scale(student_logits, 1.0 / temperature), target)


# ----------------------------------------------------------------- stages

@dataclass
class DistillConfig:
    stage: str = "task"
    temperature: float = 1.0
    weights: dict = field(default_factory=lambda: {"hidden": 1.0, "attention": 1.0, "embedding": 1.0})
    epochs: int = 20
    lr: float = 2e-5
    batch_size: int = 16
    criterion: ConvergenceCriterion = field(default_factory=ConvergenceCriterion)
    solve: ImplicitSolveConfig = field(default_factory=ImplicitSolveConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        return {"stage": self.stage, "temperature": self.temperature, "weights": dict(self.weights),
                "epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                "criterion": self.criterion.__dict__.copy(), "solve": self.solve.__dict__.copy()}


def init_projections(student: ModelParams, teacher: TeacherModel, rng: np.random.Generator) -> dict:
    """One ``W_Td`` per student encoder plus one for the embedding layer."""
    ds, dt = student.config.d_emb, teacher.config.d_model
    std = student.config.init_std
    out = {"proj.embedding": truncated_normal(rng, (ds, dt), std)}
    for i in range(student.config.n_encoders):
        out[f"proj.enc{i}"] = truncated_normal(rng, (ds, dt), std)
    return out


def save_projections(path, projections: dict) -> None:
    eio.save_tensors(path, "projection", {}, projections)


def load_projections(path) -> dict:
    kind, _, arrays, _ = eio.load_tensors(path)
    if kind != "projection":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not projections")
    return arrays


def check_compatible(student: ModelParams, teacher: TeacherModel) -> LayerMap:
    s, t = student.config, teacher.config
    if s.n_heads != t.n_heads:
        raise ValueError(f"student has {s.n_heads} heads, teacher {t.n_heads}")
    if s.seq_len != t.seq_len or s.vocab_size != t.vocab_size:
        raise ValueError("student and teacher disagree on vocabulary or sequence length")
    return LayerMap(t.n_layers, s.n_encoders)


def _stage_loss(config: DistillConfig, lmap: LayerMap, target: dict, kind: str):
    """Loss callback for :func:`loss_gradients`; also reports each component."""
    parts: dict = {}

    def loss_fn(ctx):
        w = config.weights
        terms = []
        if config.stage == "prediction":
            parts["prediction"] = prediction_loss(ctx.logits, target["logits"], config.temperature, kind)
            terms.append(parts["prediction"])
        else:
            parts["embedding"] = embedding_loss(ctx.rates["input"], ctx.leaves["proj.embedding"],
                                                target["embedding"])
            h, a = [], []
            for s_i, t_i in lmap.pairs():
                h.append(hidden_loss(ctx.rates[f"enc{s_i}.out"], ctx.leaves[f"proj.enc{s_i}"],
                                     target["hidden"][t_i]))
                a.append(attention_loss(ctx.scores(s_i), target["scores"][t_i]))
            parts["hidden"] = _sum(h)
            parts["attention"] = _sum(a)
            for key in ("hidden", "attention", "embedding"):
                if w.get(key, 0.0):
                    terms.append(nx.scale(parts[key], float(w[key])))
        if not terms:
            raise ValueError("every loss weight is zero")
        return _sum(terms)

    return loss_fn, parts


def _sum(terms):
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total


def teacher_targets(teacher: TeacherModel, tokens) -> dict:
    out = teacher.forward(tokens)
    return {"embedding": out["embedding"], "hidden": out["hidden"], "scores": out["scores"],
            "logits": out["logits"]}


def stage_losses(student: ModelParams, teacher: TeacherModel, projections: dict, tokens,
                 config: DistillConfig) -> dict:
    """Every distillation loss component on ``tokens`` at the spiking equilibrium."""
    lmap = check_compatible(student, teacher)
    record = simulate_to_equilibrium(student, tokens, config.criterion, count_spikes=False)
    target = teacher_targets(teacher, tokens)
    rates = record.rates
    out = {"embedding": float(embedding_loss(rates["input"], projections["proj.embedding"], target["embedding"]))}
    net = SurrogateNet(student)
    out["hidden"] = float(sum(float(hidden_loss(rates[f"enc{s}.out"], projections[f"proj.enc{s}"],
                                                target["hidden"][t])) for s, t in lmap.pairs()))
    out["attention"] = float(sum(float(attention_loss(net.scores(rates, s), target["scores"][t]))
                                 for s, t in lmap.pairs()))
    out["prediction"] = float(prediction_loss(record.logits(student), target["logits"], config.temperature,
                                              student.config.task_head))
    return out


def distill_stage(student: ModelParams, teacher: TeacherModel, tokens, config: DistillConfig,
                  rng: np.random.Generator, projections: dict | None = None, task: TaskSpec | None = None):
    """Run one distillation stage; returns ``(student, projections, metric rows)``.

    ``tokens`` is the stage corpus (M, seq_len). Each minibatch is simulated
    to equilibrium, the stage loss is built on the steady-state maps with
    the simulated rates pinned, and student plus projections take one Adam
    step. When ``task`` is given, rows carry eval metrics.
    """
    lmap = check_compatible(student, teacher)
    projections = dict(projections) if projections is not None else init_projections(student, teacher, rng)
    opt = OptimizerState(config.lr)
    tokens = np.asarray(tokens)
    kind = student.config.task_head
    rows = []
    for epoch in range(1, config.epochs + 1):
        sums: dict = {}
        n_batches = 0
        for idx in batches(len(tokens), config.batch_size, rng):
            batch = tokens[idx]
            record = simulate_to_equilibrium(student, batch, config.criterion, count_spikes=False)
            loss_fn, parts = _stage_loss(config, lmap, teacher_targets(teacher, batch), kind)
            res = loss_gradients(student, batch, loss_fn, rates=record.rates, extra=projections,
                                 solve=config.solve)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(nx.value_of(v))
            sums["total"] = sums.get("total", 0.0) + res.loss
            n_batches += 1
            merged = {**student.arrays, **projections}
            merged, opt = optimizer_step(merged, res.grads, opt)
            student = ModelParams(student.config, {k: merged[k] for k in student.arrays})
            projections = {k: merged[k] for k in projections}
        row = {"epoch": epoch, "stage": config.stage}
        for key in ("hidden", "attention", "embedding", "prediction", "total"):
            row[key] = sums[key] / n_batches if key in sums else ""
        if task is not None:
            row.update(evaluate(student, task, config.criterion))
        rows.append(row)
    return student, projections, rows


def general_corpus(vocab: Vocab, seq_len: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unlabelled random strings over the task alphabet, packed like task inputs."""
    alphabet = vocab.tokens[3:]
    texts = ["".join(rng.choice(alphabet, size=seq_len - 1)) for _ in range(n)]
    return np.array([vocab.encode(t, None, seq_len) for t in texts], dtype=np.int64)


def run_pipeline(student: ModelParams, teacher: TeacherModel, task: TaskSpec, stages: list,
                 rng: np.random.Generator, general_tokens=None, projections: dict | None = None):
    """Chain stages on one student; ``general`` stages use ``general_tokens``."""
    rows = []
    for cfg in stages:
        if cfg.stage == "general":
            if general_tokens is None:
                raise ValueError("a general stage needs a general corpus")
            corpus = general_tokens
        else:
            corpus = task.arrays("train")[0]
        student, projections, r = distill_stage(student, teacher, corpus, cfg, rng, projections, task)
        rows += r
    return student, projections, rows

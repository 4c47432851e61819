"""Adam updates, toy task suite, evaluation metrics and the label-training loop."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as eio
from . import numerics as nx
from .equilibrium import ConvergenceCriterion, simulate_to_equilibrium
from .gradients import ImplicitSolveConfig, loss_gradients
from .model import ModelParams

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
SPECIALS = (PAD, CLS, SEP)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid optimizer settings")


def optimizer_step(params, grads: dict, state: OptimizerState):
    """Bias-corrected Adam update, no weight decay.

    ``params`` is a :class:`ModelParams` or a plain name -> array mapping;
    the same kind is returned. Names missing from ``grads`` are left alone.
    """
    arrays = params.arrays if isinstance(params, ModelParams) else params
    for name, g in grads.items():
        if name not in arrays:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != arrays[name].shape:
            raise nx.DimensionError(f"{name}: gradient shape {g.shape} != {arrays[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in arrays.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if isinstance(params, ModelParams):
        return ModelParams(params.config, out), state
    return out, state


# -------------------------------------------------------------------- tasks

class Vocab:
    """Character vocabulary with the three special tokens first."""

    def __init__(self, symbols):
        symbols = [s for s in symbols if s not in SPECIALS]
        self.tokens = list(SPECIALS) + sorted(set(symbols))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, text2: str | None, seq_len: int) -> list[int]:
        ids = [self.index[CLS]] + [self._id(c) for c in text]
        if text2 is not None:
            ids += [self.index[SEP]] + [self._id(c) for c in text2]
        if len(ids) > seq_len:
            raise ValueError(f"example {text!r} needs {len(ids)} positions, seq_len is {seq_len}")
        return ids + [self.index[PAD]] * (seq_len - len(ids))

    def _id(self, c):
        try:
            return self.index[c]
        except KeyError:
            raise ValueError(f"symbol {c!r} is not in the vocabulary") from None


@dataclass(frozen=True)
class Example:
    text: str
    text2: str | None
    label: float


@dataclass
class TaskSpec:
    name: str
    kind: str  # "classification" or "regression"
    vocab: Vocab
    train: list
    eval: list
    seq_len: int
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if set(self.train) & set(self.eval):
            raise ValueError("train and eval examples overlap")
        for ex in self.train + self.eval:
            if self.kind == "classification" and ex.label not in range(self.n_classes):
                raise ValueError(f"label {ex.label} outside 0..{self.n_classes - 1}")
            self.vocab.encode(ex.text, ex.text2, self.seq_len)

    def arrays(self, split: str = "train"):
        """``(token ids (M, seq_len), labels (M,))`` for one split."""
        data = self.train if split == "train" else self.eval
        ids = np.array([self.vocab.encode(e.text, e.text2, self.seq_len) for e in data], dtype=np.int64)
        dtype = np.int64 if self.kind == "classification" else np.float64
        return ids.reshape(len(data), self.seq_len), np.array([e.label for e in data], dtype=dtype)

    def model_fields(self) -> dict:
        """ModelConfig fields implied by the task."""
        return {"vocab_size": len(self.vocab), "seq_len": self.seq_len,
                "task_head": self.kind, "n_classes": self.n_classes}


def _distinct(draw, n: int, rng: np.random.Generator, balance: bool):
    """``n`` distinct examples from ``draw(rng)``, optionally class-balanced."""
    seen, out = set(), []
    per_class = {0: 0, 1: 0}
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 200 * n + 1000:
            raise ValueError("could not draw enough distinct examples; enlarge the example space")
        ex = draw(rng)
        if ex in seen:
            continue
        if balance and per_class[int(ex.label)] >= (n + 1) // 2:
            continue
        seen.add(ex)
        if balance:
            per_class[int(ex.label)] += 1
        out.append(ex)
    return out


def _majority(length):
    def draw(rng):
        s = "".join(rng.choice(list("ab"), size=length))
        return Example(s, None, int(s.count("a") > s.count("b")))
    return draw, "ab"


def _contains(length, pattern="ab"):
    def draw(rng):
        s = "".join(rng.choice(list("abcd"), size=length))
        return Example(s, None, int(pattern in s))
    return draw, "abcd"


def _similarity(length):
    def draw(rng):
        a = "".join(rng.choice(list("abc"), size=length))
        b = "".join(rng.choice(list("abc"), size=length))
        return Example(a, b, sum(x == y for x, y in zip(a, b)) / length)
    return draw, "abc"


TOY_TASKS = ("majority", "contains", "similarity")


def make_task(name: str, rng: np.random.Generator, n_train: int = 96, n_eval: int = 32,
              length: int | None = None) -> TaskSpec:
    """One of the synthetic tasks.

    ``majority``: more a than b in an a/b string (odd length, no ties).
    ``contains``: does "ab" occur in an a-d string.
    ``similarity``: fraction of equal positions in a string pair, as regression.
    """
    if name == "majority":
        length = length or 9
        if length % 2 == 0:
            raise ValueError("majority strings need odd length")
        draw, alphabet = _majority(length)
        kind, seq_len, balance = "classification", length + 1, True
    elif name == "contains":
        length = length or 7
        draw, alphabet = _contains(length)
        kind, seq_len, balance = "classification", length + 1, True
    elif name == "similarity":
        length = length or 3
        draw, alphabet = _similarity(length)
        kind, seq_len, balance = "regression", 2 * length + 2, False
    else:
        raise ValueError(f"unknown toy task {name!r}; choose from {TOY_TASKS}")
    examples = _distinct(draw, n_train + n_eval, rng, balance)
    order = rng.permutation(len(examples))
    examples = [examples[i] for i in order]
    return TaskSpec(name, kind, Vocab(alphabet), examples[:n_train], examples[n_train:], seq_len)


# ---------------------------------------------------------------- TSV files

TSV_HEADER = ("sentence", "sentence2", "label")


def write_task_tsv(path, examples) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(TSV_HEADER)
    for e in examples:
        w.writerow([e.text, "" if e.text2 is None else e.text2, repr(float(e.label)) if isinstance(e.label, float) else e.label])
    eio.atomic_write_text(path, buf.getvalue())


def read_task_tsv(path, kind: str) -> list[Example]:
    """Rows of ``sentence <tab> sentence2 <tab> label`` after a header row.

    The sentence2 column may be empty, or absent from every row.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise ValueError(f"{path}: empty corpus")
    header, body = rows[0], rows[1:]
    if header[0] != "sentence" or header[-1] != "label" or len(header) not in (2, 3):
        raise ValueError(f"{path}: header must be sentence[, sentence2], label")
    out = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        text2 = row[1] if len(row) == 3 and row[1] != "" else None
        label = int(row[-1]) if kind == "classification" else float(row[-1])
        out.append(Example(row[0], text2, label))
    return out


def save_task(task: TaskSpec, directory) -> dict:
    d = Path(directory)
    write_task_tsv(d / "train.tsv", task.train)
    write_task_tsv(d / "eval.tsv", task.eval)
    return {"name": task.name, "kind": task.kind, "seq_len": task.seq_len, "n_classes": task.n_classes,
            "train": str(d / "train.tsv"), "eval": str(d / "eval.tsv"),
            "alphabet": "".join(task.vocab.tokens[len(SPECIALS):])}


def load_task(spec: dict) -> TaskSpec:
    """Build a task from ``{name, kind, seq_len, train, eval[, n_classes, alphabet]}``."""
    kind = spec["kind"]
    train = read_task_tsv(spec["train"], kind)
    evals = read_task_tsv(spec["eval"], kind)
    alphabet = spec.get("alphabet")
    if alphabet is None:
        alphabet = "".join(sorted({c for e in train + evals for c in e.text + (e.text2 or "")}))
    return TaskSpec(spec.get("name", "corpus"), kind, Vocab(alphabet), train, evals,
                    int(spec["seq_len"]), int(spec.get("n_classes", 2)))


# --------------------------------------------------------------- evaluation

def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; 0 when either side is constant."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt(np.sum(x * x) * np.sum(y * y))
    return float(np.sum(x * y) / denom) if denom > 0 else 0.0


def predict(params: ModelParams, tokens, criterion: ConvergenceCriterion):
    """``(logits, record)`` from a spiking run to equilibrium."""
    record = simulate_to_equilibrium(params, tokens, criterion)
    return record.logits(params), record


def score(kind: str, logits: np.ndarray, labels: np.ndarray) -> dict:
    if kind == "classification":
        pred = np.argmax(logits, axis=-1)  # first maximum wins ties
        return {"accuracy": float(np.mean(pred == labels))}
    out = logits[..., 0]
    return {"pearson": pearson(out, labels), "mse": float(np.mean((out - labels) ** 2))}


def primary_metric(metrics: dict) -> float:
    return metrics["accuracy"] if "accuracy" in metrics else metrics["pearson"]


def evaluate(params: ModelParams, task: TaskSpec, criterion: ConvergenceCriterion = ConvergenceCriterion(),
             t_conv_override: int | None = None, split: str = "eval", return_record: bool = False):
    """Accuracy (classification) or Pearson correlation (regression).

    ``t_conv_override`` runs exactly that many steps instead of detecting
    convergence.
    """
    if t_conv_override is not None:
        criterion = ConvergenceCriterion(t_max=int(t_conv_override), tol=0.0, window=criterion.window)
    tokens, labels = task.arrays(split)
    logits, record = predict(params, tokens, criterion)
    metrics = score(task.kind, logits, labels)
    metrics["mean_t_used"] = float(np.mean(record.t_used))
    return (metrics, record) if return_record else metrics


# ----------------------------------------------------------------- training

def label_loss(kind: str, labels: np.ndarray, n_outputs: int):
    """Cross-entropy on one-hot labels, or squared error for regression."""
    if kind == "classification":
        target = np.eye(n_outputs)[labels]
        return lambda ctx: nx.soft_cross_entropy(ctx.logits, target)
    target = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    return lambda ctx: nx.mse(ctx.logits, target)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2e-5
    batch_size: int = 16
    criterion: ConvergenceCriterion = field(default_factory=ConvergenceCriterion)
    solve: ImplicitSolveConfig = field(default_factory=ImplicitSolveConfig)


def supervised_step(params: ModelParams, tokens, labels, kind: str, criterion, solve, opt: OptimizerState):
    record = simulate_to_equilibrium(params, tokens, criterion, count_spikes=False)
    loss_fn = label_loss(kind, labels, params.config.n_outputs)
    res = loss_gradients(params, tokens, loss_fn, rates=record.rates, solve=solve)
    params, opt = optimizer_step(params, res.grads, opt)
    return params, opt, res.loss


def train_supervised(params: ModelParams, task: TaskSpec, config: TrainConfig, rng: np.random.Generator,
                     opt: OptimizerState | None = None):
    """Train on true labels; returns ``(params, metric rows)``.

    Each row holds the epoch, mean training loss and eval metrics.
    """
    if params.config.task_head != task.kind:
        raise ValueError(f"model head {params.config.task_head!r} does not fit a {task.kind} task")
    opt = opt or OptimizerState(config.lr)
    tokens, labels = task.arrays("train")
    rows = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in batches(len(labels), config.batch_size, rng):
            params, opt, loss = supervised_step(params, tokens[idx], labels[idx], task.kind,
                                                config.criterion, config.solve, opt)
            losses.append(loss)
        metrics = evaluate(params, task, config.criterion)
        rows.append({"epoch": epoch, "stage": "supervised", "loss": float(np.mean(losses)), **metrics})
    return params, rows

"""Spiking encoder stack: configuration, parameters and per-step dynamics.

Layer order in one time step:

    input LIF (embedding + optional feedback)
    for each encoder: key, value -> attention output -> IL-1 -> IL-2 -> output

All traffic between layers is binary spikes. Skip connections add spikes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import io as eio
from . import kernels
from . import numerics as nx
from .attention import AttentionParams, spiking_attention_step
from .neuron import LifParams, NeuronState, step

SUBLAYERS = ("key", "value", "attn", "il1", "il2", "out")


@dataclass
class ModelConfig:
    vocab_size: int = 16
    seq_len: int = 8
    d_emb: int = 16
    d_intermediate: int = 32
    n_encoders: int = 1
    n_heads: int = 2
    v_th: float = 1.0
    gamma: float = 1.0
    feedback_enabled: bool = False
    norm_enabled: bool = True
    pi_mode: str = "softmax"
    task_head: str = "classification"
    n_classes: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "seq_len", "d_emb", "d_intermediate", "n_encoders", "n_heads", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_emb % self.n_heads:
            raise ValueError("d_emb must be divisible by n_heads")
        if self.task_head not in ("classification", "regression"):
            raise ValueError(f"unknown task_head {self.task_head!r}")
        LifParams(self.v_th, self.gamma)

    @property
    def lif(self) -> LifParams:
        return LifParams(self.v_th, self.gamma)

    @property
    def n_outputs(self) -> int:
        return 1 if self.task_head == "regression" else self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig(**d)


def layer_names(config: ModelConfig) -> list[str]:
    names = ["input"]
    for i in range(config.n_encoders):
        names += [f"enc{i}.{s}" for s in SUBLAYERS]
    return names


def layer_width(config: ModelConfig, name: str) -> int:
    return config.d_intermediate if name.endswith(".il2") else config.d_emb


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, di = config.d_emb, config.d_intermediate
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.seq_len, d),
        "b_in": (d,),
    }
    if config.feedback_enabled:
        shapes["feedback"] = (d, d)
    for i in range(config.n_encoders):
        p = f"enc{i}."
        shapes.update({
            p + "w_q": (d, d), p + "w_k": (d, d), p + "w_v": (d, d),
            p + "b_k": (d,), p + "b_v": (d,), p + "b_attn": (d,),
            p + "w_il1": (d, d), p + "b_il1": (d,), p + "ln1_gain": (d,), p + "ln1_shift": (d,),
            p + "w_il2": (d, di), p + "b_il2": (di,),
            p + "w_out": (di, d), p + "b_out": (d,), p + "ln2_gain": (d,), p + "ln2_shift": (d,),
        })
    shapes["head.w"] = (d, config.n_outputs)
    shapes["head.b"] = (config.n_outputs,)
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class ModelParams:
    """Named float64 arrays; the mapping order is the checkpoint order."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = value

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def check(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, shape in expected.items():
            if self.arrays[k].shape != shape:
                raise nx.DimensionError(f"{k}: shape {self.arrays[k].shape}, expected {shape}")

    def attention(self, i: int, source=None) -> AttentionParams:
        src = self.arrays if source is None else source
        p = f"enc{i}."
        return AttentionParams(src[p + "w_q"], src[p + "w_k"], src[p + "w_v"],
                               src[p + "b_k"], src[p + "b_v"], self.config.n_heads, self.config.pi_mode)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Truncated-normal weights and embeddings, zero biases, unit norm gains."""
    arrays = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf.startswith("ln") and leaf.endswith("gain"):
            arrays[name] = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("shift") or name == "head.b":
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = truncated_normal(rng, shape, config.init_std)
    return ModelParams(config, arrays)


def embed(tokens, params: ModelParams) -> np.ndarray:
    """Token plus position embedding, shape (..., N_s, D_emb)."""
    cfg = params.config
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if tokens.shape[-1] != cfg.seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} != configured {cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return params["tok_emb"][tokens] + params["pos_emb"]


def _norm(x, gain, shift, enabled: bool):
    return nx.layer_norm(x, gain, shift) if enabled else x


# --------------------------------------------------------------- simulation

@dataclass
class ModelState:
    """Per-example neuron states plus the previous step's final output spikes."""

    neurons: dict[str, NeuronState]
    prev_out: np.ndarray
    t: int = 0


def init_state(config: ModelConfig, batch_shape=(), count_spikes: bool = False) -> ModelState:
    neurons = {}
    for name in layer_names(config):
        shape = tuple(batch_shape) + (config.seq_len, layer_width(config, name))
        neurons[name] = NeuronState.zeros(shape, count_spikes=count_spikes)
    prev = np.zeros(tuple(batch_shape) + (config.seq_len, config.d_emb))
    return ModelState(neurons, prev)


def encoder_step(params: ModelParams, i: int, state: ModelState, input_spikes: np.ndarray):
    """One time step through encoder ``i``; returns ``(output spikes, scores)``."""
    cfg = params.config
    lif = cfg.lif
    p = f"enc{i}."
    n = state.neurons
    attn_cur, scores = spiking_attention_step(
        input_spikes, params.attention(i), n[p + "key"], n[p + "value"], lif)
    s_attn = step(n[p + "attn"], attn_cur + params[p + "b_attn"], lif)
    il1 = _norm(kernels.spike_matmul(s_attn, params[p + "w_il1"]) + input_spikes,
                params[p + "ln1_gain"], params[p + "ln1_shift"], cfg.norm_enabled)
    s_il1 = step(n[p + "il1"], il1 + params[p + "b_il1"], lif)
    il2 = nx.gelu(kernels.spike_matmul(s_il1, params[p + "w_il2"]))
    s_il2 = step(n[p + "il2"], il2 + params[p + "b_il2"], lif)
    out = _norm(kernels.spike_matmul(s_il2, params[p + "w_out"]) + s_il1,
                params[p + "ln2_gain"], params[p + "ln2_shift"], cfg.norm_enabled)
    s_out = step(n[p + "out"], out + params[p + "b_out"], lif)
    return s_out, scores


def input_current(params: ModelParams, state: ModelState, embedded: np.ndarray) -> np.ndarray:
    cur = embedded + params["b_in"]
    if params.config.feedback_enabled:
        cur = cur + kernels.spike_matmul(state.prev_out, params["feedback"])
    return cur


def model_step(params: ModelParams, state: ModelState, embedded: np.ndarray):
    """Advance every layer one step; returns ``(state, per-encoder scores)``."""
    lif = params.config.lif
    s = step(state.neurons["input"], input_current(params, state, embedded), lif)
    scores = []
    for i in range(params.config.n_encoders):
        s, sc = encoder_step(params, i, state, s)
        scores.append(sc)
    state.prev_out = s
    state.t += 1
    return state, scores


def head_logits(pred_rates, params_or_arrays):
    """Linear head on the first-token rates of the final encoder output."""
    src = params_or_arrays.arrays if isinstance(params_or_arrays, ModelParams) else params_or_arrays
    pooled = nx.take(pred_rates, (Ellipsis, 0, slice(None)))
    return squeeze_row(nx.add(nx.matmul(_as_row(pooled), src["head.w"]), src["head.b"]))


def _as_row(x):
    shape = nx.value_of(x).shape
    return nx.reshape(x, shape[:-1] + (1, shape[-1]))


def squeeze_row(x):
    shape = nx.value_of(x).shape
    return nx.reshape(x, shape[:-2] + (shape[-1],))


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    eio.save_tensors(path, "student", params.config.to_dict(), params.arrays, extra)


def load_checkpoint(path) -> ModelParams:
    kind, config, arrays, _ = eio.load_tensors(path)
    if kind != "student":
        raise ValueError(f"{path} holds a {kind!r} checkpoint, not a student")
    cfg = ModelConfig.from_dict(config)
    order = [k for k in param_shapes(cfg) if k in arrays] + [k for k in arrays if k not in param_shapes(cfg)]
    params = ModelParams(cfg, {k: arrays[k] for k in order})
    params.check()
    return params

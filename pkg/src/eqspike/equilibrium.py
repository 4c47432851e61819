"""Forward phase to steady state, and the surrogate (rate-domain) network.

The surrogate replaces each spiking layer with its steady-state map from
input rates to output rate:

    input  clip01((y + b_in [+ a_out F]) / v_th)
    key    clip01((a_x W_K + b_K) / v_th)                 (value alike)
    attn   clip01((pi(s (a_x W_Q) a_k^T) a_v + b) / v_th)
    il1    clip01((norm(a_attn W_IL1 + a_x) + b) / v_th)
    il2    clip01((gelu(a_il1 W_IL2) + b) / v_th)
    out    clip01((norm(a_il2 W_out + a_il1) + b) / v_th)
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import surrogate_attention, surrogate_scores
from .model import (ModelParams, embed, head_logits, init_state, layer_names,
                    model_step)


class FixedPointError(RuntimeError):
    """Damped Picard iteration did not reach the residual bound."""


@dataclass(frozen=True)
class ConvergenceCriterion:
    t_max: int = 80
    tol: float = 1e-3
    window: int = 10

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0 (0 forces fixed-step runs)")
        if self.window < 1:
            raise ValueError("window must be >= 1")


# ----------------------------------------------------------------- surrogate

class SurrogateNet:
    """Steady-state layer functions sharing one parameter source.

    ``source`` maps parameter names to arrays or tape nodes, so the same
    net evaluates plain values or records a differentiable graph.
    """

    def __init__(self, params: ModelParams, source=None):
        self.params = params
        self.config = params.config
        self.source = params.arrays if source is None else source
        self.names = layer_names(self.config)
        self.clamp_log: list | None = None

    def _clip(self, pre):
        if self.clamp_log is not None:
            v = nx.value_of(pre)
            self.clamp_log.append(np.concatenate([(v <= 0.0).ravel(), (v >= 1.0).ravel()]))
        return nx.clip01(pre)

    def _rate(self, current):
        return self._clip(nx.scale(current, 1.0 / self.config.v_th))

    def _norm(self, x, i, which):
        if not self.config.norm_enabled:
            return x
        src = self.source
        return nx.layer_norm(x, src[f"enc{i}.{which}_gain"], src[f"enc{i}.{which}_shift"])

    def input_layer(self, y, a_fb=None):
        cur = nx.add(y, self.source["b_in"])
        if self.config.feedback_enabled and a_fb is not None:
            cur = nx.add(cur, nx.matmul(a_fb, self.source["feedback"]))
        return self._rate(cur)

    def layer(self, name: str, rates: dict, y=None):
        """Evaluate one layer's steady-state map on upstream ``rates``."""
        src = self.source
        if name == "input":
            fb = rates.get(self.names[-1]) if self.config.feedback_enabled else None
            return self.input_layer(y, fb)
        enc, sub = name.split(".")
        i = int(enc[3:])
        p = f"enc{i}."
        a_x = rates["input"] if i == 0 else rates[f"enc{i - 1}.out"]
        if sub == "key":
            return self._rate(nx.add(nx.matmul(a_x, src[p + "w_k"]), src[p + "b_k"]))
        if sub == "value":
            return self._rate(nx.add(nx.matmul(a_x, src[p + "w_v"]), src[p + "b_v"]))
        if sub == "attn":
            attn = self.params.attention(i, src)
            out = surrogate_attention(a_x, rates[p + "key"], rates[p + "value"], attn,
                                      self.config.v_th, src[p + "b_attn"])
            if self.clamp_log is not None:
                self.clamp_log.append(np.concatenate([(nx.value_of(out) <= 0).ravel(),
                                                      (nx.value_of(out) >= 1).ravel()]))
            return out
        if sub == "il1":
            x = nx.add(nx.matmul(rates[p + "attn"], src[p + "w_il1"]), a_x)
            return self._rate(nx.add(self._norm(x, i, "ln1"), src[p + "b_il1"]))
        if sub == "il2":
            x = nx.gelu(nx.matmul(rates[p + "il1"], src[p + "w_il2"]))
            return self._rate(nx.add(x, src[p + "b_il2"]))
        if sub == "out":
            x = nx.add(nx.matmul(rates[p + "il2"], src[p + "w_out"]), rates[p + "il1"])
            return self._rate(nx.add(self._norm(x, i, "ln2"), src[p + "b_out"]))
        raise KeyError(name)

    def scores(self, rates: dict, i: int):
        a_x = rates["input"] if i == 0 else rates[f"enc{i - 1}.out"]
        return surrogate_scores(a_x, rates[f"enc{i}.key"], self.params.attention(i, self.source))

    def downstream(self, a_input, y=None, pinned: dict | None = None) -> dict:
        """Compose every layer after the input layer, starting from ``a_input``."""
        rates = {"input": a_input}
        for name in self.names[1:]:
            out = self.layer(name, rates, y)
            if pinned is not None and name in pinned:
                out = nx.pin(out, pinned[name])
            rates[name] = out
        return rates

    def logits(self, rates: dict):
        return head_logits(rates[self.names[-1]], self.source)


@dataclass
class SurrogateOutput:
    rates: dict
    logits: object
    iterations: int = 0
    residual: float = 0.0


def solve_feedback(net: SurrogateNet, y, tol: float = 1e-8, max_iter: int = 500,
                   damping: float = 0.5, fail_above: float = 1e-6, init=None):
    """Fixed point of ``a = l_input(G(a), y)`` by damped Picard iteration.

    Starts from ``init`` when given, else from the no-feedback input rate.
    Returns ``(a, iterations, residual)`` on plain arrays.
    """
    y = nx.value_of(y)
    saved, net.clamp_log = net.clamp_log, None
    try:
        a = nx.value_of(net.input_layer(y, None)) if init is None else np.array(init, dtype=np.float64)
        residual = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            rates = net.downstream(a, y)
            new = nx.value_of(net.input_layer(y, rates[net.names[-1]]))
            residual = float(np.max(np.abs(new - a))) if a.size else 0.0
            if residual < tol:
                break
            a = (1.0 - damping) * a + damping * new
    finally:
        net.clamp_log = saved
    if residual > fail_above:
        raise FixedPointError(f"feedback fixed point residual {residual:.3e} after {it} iterations")
    return a, it, residual


def surrogate_forward(net: SurrogateNet, embedded, tol: float = 1e-8, max_iter: int = 500,
                      init=None) -> SurrogateOutput:
    """Rates of every layer and head logits from the surrogate network.

    Without feedback this is one feedforward composition. With feedback
    the input-layer rate is first solved as a fixed point.
    """
    if not net.config.feedback_enabled:
        a_in = net.input_layer(embedded, None)
        rates = net.downstream(a_in, embedded)
        return SurrogateOutput(rates, net.logits(rates))
    a, it, res = solve_feedback(net, embedded, tol=tol, max_iter=max_iter, init=init)
    rates = net.downstream(a, embedded)
    # final evaluation of the input map keeps the clamp trace complete
    net.input_layer(embedded, rates[net.names[-1]])
    return SurrogateOutput(rates, net.logits(rates), it, res)


# ---------------------------------------------------------------- simulation

@dataclass
class EquilibriumRecord:
    """Converged rates and diagnostics for a batch of examples (leading axis)."""

    layer_names: list
    rates: dict
    scores: list
    t_used: np.ndarray
    converged: np.ndarray
    mean_history: np.ndarray
    change_history: np.ndarray
    spike_counts: dict | None = None
    batched: bool = True
    extras: dict = field(default_factory=dict)

    @property
    def embedding_rates(self):
        return self.rates["input"]

    @property
    def pred_rates(self):
        return self.rates[self.layer_names[-1]]

    def logits(self, params: ModelParams) -> np.ndarray:
        return head_logits(self.pred_rates, params)

    def history(self, b: int = 0) -> np.ndarray:
        """Mean rate per layer for t = 0..t_used of example ``b``."""
        return self.mean_history[: int(self.t_used[b]) + 1, b]

    def select(self, idx) -> "EquilibriumRecord":
        idx = np.atleast_1d(idx)
        return EquilibriumRecord(
            self.layer_names,
            {k: v[idx] for k, v in self.rates.items()},
            [s[idx] for s in self.scores],
            self.t_used[idx], self.converged[idx],
            self.mean_history[:, idx], self.change_history[:, idx],
            None if self.spike_counts is None else {k: v[idx] for k, v in self.spike_counts.items()},
        )


def simulate_to_equilibrium(params: ModelParams, tokens, criterion: ConvergenceCriterion = ConvergenceCriterion(),
                            count_spikes: bool = True, embedded=None) -> EquilibriumRecord:
    """Step the spiking model until the windowed mean-rate change drops below ``tol``.

    The change is the maximum over layers of |mean rate(t) - mean rate(t - window)|,
    with the rate at t = 0 taken as 0. Examples in a batch converge
    independently, and each one's snapshot is taken at its own ``t_used``,
    so results do not depend on how examples are batched.
    """
    tokens = np.asarray(tokens)
    batched = tokens.ndim == 2
    if not batched:
        tokens = tokens[None]
    y = embed(tokens, params) if embedded is None else np.asarray(embedded).reshape(tokens.shape + (-1,))
    cfg = params.config
    names = layer_names(cfg)
    B = tokens.shape[0]
    state = init_state(cfg, (B,), count_spikes=count_spikes)

    means = [np.zeros((B, len(names)))]
    changes = [np.full(B, np.inf)]
    score_buf: deque = deque(maxlen=criterion.window)
    done = np.zeros(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    t_used = np.zeros(B, dtype=np.int64)
    rates = {n: np.zeros(state.neurons[n].shape) for n in names}
    counts = {n: np.zeros(state.neurons[n].shape) for n in names} if count_spikes else None
    scores = [np.zeros((B, cfg.n_heads, cfg.seq_len, cfg.seq_len)) for _ in range(cfg.n_encoders)]

    for t in range(1, criterion.t_max + 1):
        state, sc = model_step(params, state, y)
        score_buf.append(sc)
        m = np.stack([state.neurons[n].asr().mean(axis=(-1, -2)) for n in names], axis=-1)
        means.append(m)
        if t >= criterion.window:
            change = np.abs(m - means[t - criterion.window]).max(axis=-1)
        else:
            change = np.full(B, np.inf)
        changes.append(change)
        hit = (~done) & (change < criterion.tol)
        newly = hit | ((~done) & (t == criterion.t_max))
        if newly.any():
            converged[hit] = True
            t_used[newly] = t
            for n in names:
                rates[n][newly] = state.neurons[n].asr()[newly]
                if counts is not None:
                    counts[n][newly] = state.neurons[n].spike_count[newly]
            for i in range(cfg.n_encoders):
                total = score_buf[0][i].copy()
                for k in range(1, len(score_buf)):
                    total += score_buf[k][i]
                scores[i][newly] = (total / len(score_buf))[newly]
            done |= newly
        if done.all():
            break

    rec = EquilibriumRecord(names, rates, scores, t_used, converged,
                            np.stack(means), np.stack(changes), counts, batched)
    return rec


def unbatch(x, record: EquilibriumRecord):
    return x if record.batched else x[0]


# ----------------------------------------------------------------- agreement

def _fro(x):
    return float(np.sqrt(np.sum(np.square(x))))


def agreement_report(record: EquilibriumRecord, net: SurrogateNet, embedded) -> dict:
    """Frobenius distance between simulated rates and each layer's steady-state
    map evaluated on the simulated upstream rates.

    Returns ``{layer: {"abs": ..., "rel": ...}}``; ``rel`` divides by the
    larger of the two norms.
    """
    embedded = np.asarray(embedded)
    if record.batched and embedded.ndim == 2:
        embedded = np.broadcast_to(embedded, record.rates["input"].shape)
    elif not record.batched and embedded.ndim == 2:
        embedded = embedded[None]
    out = {}
    for name in record.layer_names:
        pred = nx.value_of(net.layer(name, record.rates, embedded))
        sim = record.rates[name]
        diff = _fro(sim - pred)
        scale = max(_fro(sim), _fro(pred))
        out[name] = {"abs": diff, "rel": diff / scale if scale > 0 else 0.0}
    return out


def convergence_table(params: ModelParams, tokens, t_max: int, every: int = 1):
    """Per-step mean rate and relative difference norm for one example.

    Rows are ``(t, mean rate per layer..., rel. difference per layer...)``,
    ready for CSV export.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    cfg = params.config
    names = layer_names(cfg)
    y = embed(tokens, params)
    net = SurrogateNet(params)
    state = init_state(cfg, (tokens.shape[0],))
    rows = []
    for t in range(1, t_max + 1):
        state, _ = model_step(params, state, y)
        if t % every and t != t_max:
            continue
        rates = {n: state.neurons[n].asr() for n in names}
        row = [t] + [float(rates[n].mean()) for n in names]
        for n in names:
            pred = nx.value_of(net.layer(n, rates, y))
            scale = max(_fro(rates[n]), _fro(pred))
            row.append(_fro(rates[n] - pred) / scale if scale > 0 else 0.0)
        rows.append(row)
    header = ["t"] + [f"mean_asr_{n}" for n in names] + [f"diff_norm_{n}" for n in names]
    return header, rows

"""Parameter gradients at equilibrium, plus a finite-difference oracle.

Without feedback the surrogate is a feedforward composition, so one
reverse pass gives the gradient. With feedback the input-layer rate ``z``
is a fixed point ``z = f(z)``. The adjoint ``v`` solves
``v = dL/dz + v df/dz`` (by damped iteration, or by a dense solve for
small problems), and the parameter gradient is ``dL/dtheta|_z + v df/dtheta``.
Nothing from the time-stepped simulation is kept on the tape, only the
equilibrium rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .equilibrium import SurrogateNet, surrogate_forward
from .model import ModelParams, embed


class AdjointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImplicitSolveConfig:
    max_iters: int = 500
    tol: float = 1e-10
    damping: float = 0.5
    method: str = "iterative"  # or "dense"

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0 or not 0 < self.damping <= 1:
            raise ValueError("invalid implicit solve configuration")
        if self.method not in ("iterative", "dense"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class LossContext:
    """What a loss callback sees: rate nodes, head logits, score builder, leaves."""

    rates: dict
    logits: object
    net: SurrogateNet
    leaves: dict

    def scores(self, i: int):
        return self.net.scores(self.rates, i)


@dataclass
class GradientResult:
    loss: float
    grads: dict
    tape_nodes: int
    adjoint_iterations: int = 0


def _leaves(arrays: dict) -> dict:
    return {name: nx.param(a, name) for name, a in arrays.items()}


def embed_node(tokens, source: dict):
    """Token plus position embedding as a tape expression."""
    return nx.add(nx.gather_rows(source["tok_emb"], np.asarray(tokens)), source["pos_emb"])


def loss_gradients(params: ModelParams, tokens, loss_fn: Callable[[LossContext], nx.Node],
                   rates: dict | None = None, extra: dict | None = None,
                   solve: ImplicitSolveConfig = ImplicitSolveConfig()) -> GradientResult:
    """Gradient of ``loss_fn`` with respect to every model (and ``extra``) parameter.

    ``rates`` are equilibrium rates per layer, usually from a spiking
    simulation. When given, each layer's output value is pinned to them,
    while adjoints still flow through the steady-state maps. When omitted,
    the surrogate's own equilibrium is used.
    """
    leaves = _leaves(params.arrays)
    extra_leaves = _leaves(extra or {})
    net = SurrogateNet(params, leaves)
    embed(tokens, params)  # validates ids and length
    y = embed_node(tokens, leaves)
    cfg = params.config

    if rates is None:
        solved = surrogate_forward(SurrogateNet(params), nx.value_of(y))
        rates = {k: nx.value_of(v) for k, v in solved.rates.items()}
        pinned = None
    else:
        pinned = rates

    iterations = 0
    all_leaves = {**leaves, **extra_leaves}
    if not cfg.feedback_enabled:
        a_in = net.input_layer(y, None)
        if pinned is not None:
            a_in = nx.pin(a_in, pinned["input"])
        node_rates = net.downstream(a_in, y, pinned)
        loss = loss_fn(LossContext(node_rates, net.logits(node_rates), net, all_leaves))
        raw = nx.backward(loss)
        n_nodes = nx.count_nodes(loss)
    else:
        z = nx.param(rates["input"], "__z__")
        node_rates = net.downstream(z, y, pinned)
        f = net.input_layer(y, node_rates[net.names[-1]])
        loss = loss_fn(LossContext(node_rates, net.logits(node_rates), net, all_leaves))
        raw = nx.backward(loss)
        g_z = raw.pop(z, np.zeros_like(z.value))
        v, iterations = _adjoint(f, z, g_z, solve)
        for leaf, g in nx.backward(f, seed=v).items():
            if leaf is z:
                continue
            raw[leaf] = raw[leaf] + g if leaf in raw else g
        n_nodes = nx.count_nodes(loss) + nx.count_nodes(f)
    grads = nx.grads_by_name(raw, all_leaves.values())
    return GradientResult(float(loss.value), grads, n_nodes, iterations)


def _vjp_z(f, z, v):
    g = nx.backward(f, seed=v).get(z)
    return np.zeros_like(v) if g is None else g


def _adjoint(f: nx.Node, z: nx.Node, g_z: np.ndarray, solve: ImplicitSolveConfig):
    """Solve ``v = g_z + v J`` with ``J = df/dz``."""
    if solve.method == "dense":
        n = z.value.size
        jac = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            jac[i] = _vjp_z(f, z, e.reshape(z.value.shape)).ravel()
        # rows of jac are e_i^T J, so v (I - J) = g  <=>  (I - J)^T v^T = g^T
        v = np.linalg.solve((np.eye(n) - jac).T, g_z.ravel())
        return v.reshape(z.value.shape), 1
    v = g_z.copy()
    for it in range(1, solve.max_iters + 1):
        new = g_z + _vjp_z(f, z, v)
        step = float(np.max(np.abs(new - v))) if v.size else 0.0
        v = (1.0 - solve.damping) * v + solve.damping * new
        if step <= solve.tol * max(1.0, float(np.max(np.abs(v)))):
            return v, it
    raise AdjointError(f"adjoint iteration did not converge in {solve.max_iters} steps (last change {step:.3e})")


# --------------------------------------------------------- finite differences

def finite_difference_oracle(loss_of: Callable[[dict], tuple], arrays: dict, subset=None,
                             step: float = 1e-5) -> tuple[dict, int]:
    """Central differences of ``loss_of`` for selected scalar parameters.

    ``loss_of(arrays)`` returns ``(loss, signature)``. ``signature`` is any
    array that changes when the evaluation crosses a non-smooth point (here,
    the clamp pattern). A coordinate whose +step and -step signatures differ
    is excluded and reported as NaN. ``subset`` maps names to flat index
    lists; by default every coordinate is used.

    Returns ``(gradient map, number of excluded coordinates)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in arrays.items()}
    names = list(subset) if subset is not None else list(work)
    grads = {}
    excluded = 0
    for name in names:
        a = work[name]
        flat = a.reshape(-1)
        g = np.zeros(a.size)
        idx = range(a.size) if subset is None else subset[name]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp, sp = loss_of(work)
            flat[i] = orig - step
            lm, sm = loss_of(work)
            flat[i] = orig
            if not np.array_equal(sp, sm):
                g[i] = np.nan
                excluded += 1
            else:
                g[i] = (lp - lm) / (2.0 * step)
        grads[name] = g.reshape(a.shape)
    return grads, excluded


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``, skipping NaN."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    ok = ~np.isnan(n)
    if not ok.any():
        return 0.0
    a, n = a[ok], n[ok]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# ------------------------------------------------------------ gradient check

@dataclass
class GradcheckReport:
    max_rel_error: float
    per_param: dict
    checked: int
    excluded: int
    feedback: bool


def random_linear_loss(params: ModelParams, tokens, rng: np.random.Generator):
    """A loss touching every layer rate, every score matrix and the logits.

    Works on tape nodes and on plain arrays alike.
    """
    cfg = params.config
    out = surrogate_forward(SurrogateNet(params), embed(tokens, params))
    weights = {n: rng.normal(size=nx.value_of(r).shape) for n, r in out.rates.items()}
    w_logits = rng.normal(size=nx.value_of(out.logits).shape)
    w_scores = [rng.normal(size=nx.value_of(SurrogateNet(params).scores(
        {k: nx.value_of(v) for k, v in out.rates.items()}, i)).shape) for i in range(cfg.n_encoders)]

    def loss_fn(ctx: LossContext):
        total = nx.sum_all(nx.mul(ctx.logits, w_logits))
        for n in ctx.net.names:
            total = nx.add(total, nx.sum_all(nx.mul(ctx.rates[n], weights[n])))
        for i in range(cfg.n_encoders):
            total = nx.add(total, nx.sum_all(nx.mul(ctx.scores(i), w_scores[i])))
        return total

    return loss_fn


def surrogate_loss(params: ModelParams, tokens, loss_fn, fixed_point_tol: float = 1e-13, init=None):
    """``(loss, clamp signature, input rate)`` of the pure surrogate network."""
    net = SurrogateNet(params)
    net.clamp_log = []
    out = surrogate_forward(net, embed(tokens, params), tol=fixed_point_tol, max_iter=20000, init=init)
    loss = loss_fn(LossContext(out.rates, out.logits, net, params.arrays))
    sig = np.concatenate(net.clamp_log) if net.clamp_log else np.zeros(0, dtype=bool)
    return float(nx.value_of(loss)), sig, nx.value_of(out.rates["input"])


def gradcheck(params: ModelParams, tokens, rng: np.random.Generator, coords_per_param: int = 6,
              step: float = 1e-5, solve: ImplicitSolveConfig = ImplicitSolveConfig()) -> GradcheckReport:
    """Compare implicit/backprop gradients with central differences.

    A few coordinates are sampled from each parameter tensor. Coordinates
    whose +/- perturbation changes the clamp pattern are excluded.
    """
    loss_fn = random_linear_loss(params, tokens, rng)
    analytic = loss_gradients(params, tokens, loss_fn, solve=solve).grads
    _, _, a0 = surrogate_loss(params, tokens, loss_fn)
    cfg = params.config

    def loss_of(arrays):
        value, sig, _ = surrogate_loss(ModelParams(cfg, arrays), tokens, loss_fn, init=a0)
        return value, sig

    subset = {}
    for name, a in params.arrays.items():
        k = min(coords_per_param, a.size)
        subset[name] = sorted(rng.choice(a.size, size=k, replace=False).tolist())
    numeric, excluded = finite_difference_oracle(loss_of, params.arrays, subset, step)
    per_param = {}
    checked = 0
    for name, idx in subset.items():
        a = analytic[name].reshape(-1)[idx]
        n = numeric[name].reshape(-1)[idx]
        per_param[name] = relative_error(a, n)
        checked += int(np.sum(~np.isnan(n)))
    worst = max(per_param.values()) if per_param else 0.0
    return GradcheckReport(worst, per_param, checked, excluded, cfg.feedback_enabled)

"""Spike-count based energy estimate.

IFR_i is the total spike count of layer i over the run divided by its
neuron count. Norm#OPS weighs the synaptic operations each layer's spikes
drive in the next layer by that IFR:

    norm_ops = sum_i IFR_i * ops[i + 1] / sum_j ops[j]

where ``ops`` lists every layer in simulation order followed by the head.
The efficiency factor compares a multiply-accumulate (4.6 pJ) network of
the same shape with an accumulate-only (0.9 pJ) one: ``e = 5.1 / norm_ops``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .equilibrium import ConvergenceCriterion, EquilibriumRecord
from .model import ModelConfig, ModelParams, layer_names
from .train import TaskSpec, evaluate, primary_metric

MAC_ENERGY_PJ = 4.6
ACC_ENERGY_PJ = 0.9
MAC_ACC_RATIO = 5.1
SUBLAYER_GROUPS = ("attn", "il1", "il2", "out")


class EfficiencyError(ValueError):
    pass


def collect_ifr(record: EquilibriumRecord, divide_by_t: bool = False) -> dict:
    """Per-layer spikes per neuron, averaged over the examples in ``record``.

    With ``divide_by_t`` each example's count is also divided by its number
    of time steps, which turns IFR into a mean firing rate.
    """
    if record.spike_counts is None:
        raise ValueError("spike counters were disabled for this simulation")
    out = {}
    for name in record.layer_names:
        counts = np.asarray(record.spike_counts[name])
        if not record.batched:
            counts = counts[None]
        per_example = counts.reshape(counts.shape[0], -1).sum(axis=1) / counts[0].size
        if divide_by_t:
            per_example = per_example / np.maximum(np.asarray(record.t_used).reshape(-1), 1)
        out[name] = float(per_example.mean())
    return out


def layer_ops(config: ModelConfig) -> list:
    """Synaptic operations per layer in simulation order, then the head.

    Each weight application counts fan-in x fan-out x positions. The
    attention layer counts the query projection plus the dense score and
    value products.
    """
    n, d, di = config.seq_len, config.d_emb, config.d_intermediate
    ops = [n * d + (n * d * d if config.feedback_enabled else 0)]
    for _ in range(config.n_encoders):
        ops += [
            n * d * d,                      # key
            n * d * d,                      # value
            n * d * d + 2 * n * n * d,      # query, scores, weighted values
            n * d * d + n * d,              # IL-1 weights and skip
            n * d * di,                     # IL-2
            n * di * d + n * d,             # output weights and skip
        ]
    ops.append(d * config.n_outputs)        # head on the first position
    return ops


def norm_ops(ifr, ops) -> float:
    """``sum_i ifr[i] * ops[i + 1] / sum(ops)``; needs ``len(ops) == len(ifr) + 1``."""
    ifr = list(ifr.values()) if isinstance(ifr, dict) else list(ifr)
    ops = list(ops)
    if len(ops) != len(ifr) + 1:
        raise nx.DimensionError(f"{len(ifr)} IFR values need {len(ifr) + 1} op counts, got {len(ops)}")
    total = float(sum(ops))
    if total <= 0:
        raise ValueError("operation counts must sum to a positive number")
    return float(sum(r * o for r, o in zip(ifr, ops[1:])) / total)


def efficiency(norm_ops_value: float) -> float:
    if not norm_ops_value > 0:
        raise EfficiencyError("efficiency is undefined when no operations are performed")
    return MAC_ACC_RATIO / norm_ops_value


@dataclass
class EnergyReport:
    ifr: dict
    layer_ops: list
    norm_ops: float
    e: float
    mac_energy: float = MAC_ENERGY_PJ
    acc_energy: float = ACC_ENERGY_PJ
    mac_acc_ratio: float = MAC_ACC_RATIO
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ifr": dict(self.ifr), "layer_ops": list(self.layer_ops), "norm_ops": self.norm_ops,
                "e": self.e, "mac_energy_pj": self.mac_energy, "acc_energy_pj": self.acc_energy,
                "mac_acc_ratio": self.mac_acc_ratio}


def energy_report(record: EquilibriumRecord, config: ModelConfig, divide_by_t: bool = False) -> EnergyReport:
    ifr = collect_ifr(record, divide_by_t)
    ops = layer_ops(config)
    n_ops = norm_ops(ifr, ops)
    e = efficiency(n_ops) if n_ops > 0 else float("inf")
    return EnergyReport(ifr, ops, n_ops, e)


def mean_rates_by_group(record: EquilibriumRecord) -> dict:
    """Mean equilibrium rate per sub-layer kind, pooled over encoders."""
    out = {}
    for group in SUBLAYER_GROUPS:
        vals = [record.rates[n] for n in record.layer_names if n.endswith("." + group)]
        out[group] = float(np.mean([v.mean() for v in vals]))
    return out


SWEEP_HEADER = ("axis_value", "accuracy", "mean_asr_attention", "mean_asr_il1", "mean_asr_il2",
                "mean_asr_output", "norm_ops", "e")


def sweep_point(params: ModelParams, task: TaskSpec, criterion: ConvergenceCriterion,
                t_conv: int | None = None, divide_by_t: bool = False):
    """``(metrics, group mean rates, energy report)`` for one setting."""
    metrics, record = evaluate(params, task, criterion, t_conv_override=t_conv, return_record=True)
    return metrics, mean_rates_by_group(record), energy_report(record, params.config, divide_by_t)


def sweep(params: ModelParams, task: TaskSpec, axis: str, values, criterion: ConvergenceCriterion = ConvergenceCriterion(),
          divide_by_t: bool = False):
    """One row per setting: accuracy (or correlation), mean rates, Norm#OPS and e.

    ``axis="t_conv"`` runs exactly that many steps; ``axis="v_th"`` rebuilds
    the model with that threshold and uses ``criterion``.
    """
    if axis not in ("t_conv", "v_th"):
        raise ValueError("axis must be 't_conv' or 'v_th'")
    rows = []
    for value in values:
        if axis == "t_conv":
            metrics, rates, report = sweep_point(params, task, criterion, int(value), divide_by_t)
        else:
            model = ModelParams(params.config.replace(v_th=float(value)), params.arrays)
            metrics, rates, report = sweep_point(model, task, criterion, None, divide_by_t)
        rows.append([value, primary_metric(metrics), rates["attn"], rates["il1"], rates["il2"], rates["out"],
                     report.norm_ops, report.e])
    return list(SWEEP_HEADER), rows


__all__ = ["collect_ifr", "layer_ops", "norm_ops", "efficiency", "EnergyReport", "energy_report",
           "sweep", "sweep_point", "mean_rates_by_group", "SWEEP_HEADER", "layer_names"]

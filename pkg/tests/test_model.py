import math

import numpy as np
import pytest
from conftest import toy_params, toy_tokens
from hypothesis import given, settings
from hypothesis import strategies as st

from eqspike import numerics as nx
from eqspike.equilibrium import ConvergenceCriterion, simulate_to_equilibrium
from eqspike.model import (ModelConfig, ModelParams, embed, encoder_step, init_params, init_state,
                           layer_names, load_checkpoint, model_step, param_shapes, save_checkpoint)


# ------------------------------------------------------------------- embed

def test_embed_zero_tables():
    p = toy_params()
    p["tok_emb"][:] = 0
    p["pos_emb"][:] = 0
    np.testing.assert_array_equal(embed(np.array([0, 1, 2, 3]), p), 0.0)


def test_embed_is_table_lookup_plus_position():
    p = toy_params()
    d = p.config.d_emb
    p["tok_emb"] = np.eye(p.config.vocab_size, d)
    tokens = np.array([2, 0, 5, 2])
    y = embed(tokens, p)
    for i, t in enumerate(tokens):
        np.testing.assert_array_equal(y[i], p["tok_emb"][t] + p["pos_emb"][i])


def test_same_token_different_positions_differ():
    p = toy_params()
    y = embed(np.array([1, 1, 1, 1]), p)
    assert len({tuple(r) for r in y}) == 4


@pytest.mark.parametrize("tokens", [[0, 1, 2, 6], [0, 1, 2], [0, -1, 2, 3]])
def test_embed_rejects_bad_ids(tokens):
    with pytest.raises(ValueError):
        embed(np.array(tokens), toy_params())


def test_embed_rejects_float_ids():
    with pytest.raises(ValueError):
        embed(np.array([0.0, 1.0, 2.0, 3.0]), toy_params())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_emb=6, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(task_head="ranking")
    with pytest.raises(ValueError):
        ModelConfig(gamma=0.0)


def test_param_shapes_with_feedback():
    cfg = ModelConfig(d_emb=8, n_heads=2, feedback_enabled=True)
    assert param_shapes(cfg)["feedback"] == (8, 8)
    assert "feedback" not in param_shapes(cfg.replace(feedback_enabled=False))


# ----------------------------------------------------------------- encoder

def test_zero_weights_silent_encoder():
    p = toy_params()
    for k in p.names():
        if k.startswith("enc0."):
            p[k] = np.zeros_like(p[k])
    state = init_state(p.config)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = (rng.random((4, 8)) < 0.5).astype(float)
        out, _ = encoder_step(p, 0, state, x)
        np.testing.assert_array_equal(out, 0.0)


def scalar_encoder_trace(w, b, v_th, steps, x_spikes):
    """Single-neuron, single-token encoder stepped by hand.

    With one feature the normalized value is 0, so each norm returns its shift.
    """
    u = dict.fromkeys(("key", "value", "attn", "il1", "il2", "out"), 0.0)
    out = []

    def fire(name, cur):
        u[name] += cur
        if u[name] > v_th:
            u[name] -= v_th
            return 1.0
        return 0.0

    for t in range(steps):
        x = x_spikes[t]
        fire("key", x * w["w_k"] + b["b_k"])
        sv = fire("value", x * w["w_v"] + b["b_v"])
        s_attn = fire("attn", 1.0 * sv + b["b_attn"])
        s_il1 = fire("il1", b["ln1_shift"] + b["b_il1"])
        z = s_il1 * w["w_il2"]
        s_il2 = fire("il2", z * 0.5 * (1 + math.erf(z / math.sqrt(2))) + b["b_il2"])
        out.append((s_attn, s_il1, s_il2, fire("out", b["ln2_shift"] + b["b_out"])))
    return out


def test_single_neuron_encoder_matches_hand_trace():
    cfg = ModelConfig(vocab_size=1, seq_len=1, d_emb=1, d_intermediate=1, n_heads=1)
    p = init_params(cfg, np.random.default_rng(0))
    w = {"w_k": 0.7, "w_v": 0.6, "w_il2": 2.0}
    b = {"b_k": 0.1, "b_v": 0.0, "b_attn": 0.2, "ln1_shift": 0.3, "b_il1": 0.15,
         "b_il2": -0.2, "ln2_shift": 0.4, "b_out": 0.0}
    for k, v in {**w, **b}.items():
        p["enc0." + k] = np.full(p["enc0." + k].shape, v)
    x = [1.0, 1.0, 0.0]
    expected = scalar_encoder_trace(w, b, 1.0, 3, x)
    state = init_state(cfg)
    n = state.neurons
    for t in range(3):
        s_out, _ = encoder_step(p, 0, state, np.full((1, 1), x[t]))
        got = (n["enc0.attn"].last_spikes.item(), n["enc0.il1"].last_spikes.item(),
               n["enc0.il2"].last_spikes.item(), s_out.item())
        assert got == expected[t]


def test_il1_skip_connection_isolated():
    p = toy_params(seed=3)
    p["enc0.w_il1"][:] = 0
    p["enc0.b_il1"] = np.linspace(-0.2, 0.2, 8)
    state = init_state(p.config)
    x = (np.random.default_rng(1).random((4, 8)) < 0.5).astype(float)
    encoder_step(p, 0, state, x)
    il1 = state.neurons["enc0.il1"]
    current = il1.u + p.config.v_th * il1.last_spikes
    expected = nx.layer_norm(x, p["enc0.ln1_gain"], p["enc0.ln1_shift"]) + p["enc0.b_il1"]
    np.testing.assert_allclose(current, expected, atol=1e-12)


# ------------------------------------------------------------------- model

def run_raster(p, tokens, steps):
    state = init_state(p.config)
    y = embed(tokens, p)
    raster = []
    for _ in range(steps):
        model_step(p, state, y)
        raster.append({k: v.last_spikes.copy() for k, v in state.neurons.items()})
    return raster


def test_feedback_disabled_equals_zero_feedback():
    p = toy_params(seed=1)
    fb = ModelParams(p.config.replace(feedback_enabled=True), dict(p.arrays, feedback=np.zeros((8, 8))))
    tokens = toy_tokens(p, batch=1)[0]
    for a, b in zip(run_raster(p, tokens, 12), run_raster(fb, tokens, 12)):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_first_step_unaffected_by_feedback():
    p = toy_params(seed=2)
    rng = np.random.default_rng(2)
    fb = ModelParams(p.config.replace(feedback_enabled=True), dict(p.arrays, feedback=rng.normal(0, 1, (8, 8))))
    tokens = toy_tokens(p, batch=1)[0]
    a, b = run_raster(p, tokens, 1)[0], run_raster(fb, tokens, 1)[0]
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def reference_simulation(p: ModelParams, tokens, steps):
    """Straight-line re-implementation with explicit loops over positions and features."""
    cfg = p.config
    a = p.arrays
    n, d, h = cfg.seq_len, cfg.d_emb, cfg.n_heads
    dk = d // h
    v_th = cfg.v_th

    def spikes_times(s, w):
        out = np.zeros((s.shape[0], w.shape[1]))
        for i in range(s.shape[0]):
            for k in range(s.shape[1]):
                if s[i, k]:
                    out[i] += w[k]
        return out

    def lif(name, cur):
        u[name] = u[name] * cfg.gamma + cur
        s = (u[name] > v_th).astype(float)
        u[name] -= v_th * s
        return s

    def norm(x, g, sh):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            mu = sum(x[i]) / len(x[i])
            var = sum((x[i] - mu) ** 2) / len(x[i])
            out[i] = (x[i] - mu) / math.sqrt(var + 1e-12) * g + sh
        return out

    names = layer_names(cfg)
    u = {k: np.zeros((n, cfg.d_intermediate if k.endswith("il2") else d)) for k in names}
    y = a["tok_emb"][tokens] + a["pos_emb"]
    prev = np.zeros((n, d))
    raster = []
    for _ in range(steps):
        row = {}
        cur = y + a["b_in"]
        if cfg.feedback_enabled:
            cur = cur + spikes_times(prev, a["feedback"])
        s = row["input"] = lif("input", cur)
        for e in range(cfg.n_encoders):
            p_ = f"enc{e}."
            q = spikes_times(s, a[p_ + "w_q"])
            sk = row[p_ + "key"] = lif(p_ + "key", spikes_times(s, a[p_ + "w_k"]) + a[p_ + "b_k"])
            sv = row[p_ + "value"] = lif(p_ + "value", spikes_times(s, a[p_ + "w_v"]) + a[p_ + "b_v"])
            att = np.zeros((n, d))
            for hh in range(h):
                cols = slice(hh * dk, (hh + 1) * dk)
                for i in range(n):
                    sc = np.array([q[i, cols] @ sk[j, cols] for j in range(n)]) / math.sqrt(dk)
                    wts = np.exp(sc - sc.max())
                    wts /= wts.sum()
                    for j in range(n):
                        att[i, cols] += wts[j] * sv[j, cols]
            s_attn = row[p_ + "attn"] = lif(p_ + "attn", att + a[p_ + "b_attn"])
            x1 = norm(spikes_times(s_attn, a[p_ + "w_il1"]) + s, a[p_ + "ln1_gain"], a[p_ + "ln1_shift"])
            s_il1 = row[p_ + "il1"] = lif(p_ + "il1", x1 + a[p_ + "b_il1"])
            z = spikes_times(s_il1, a[p_ + "w_il2"])
            g = np.vectorize(lambda v: v * 0.5 * (1 + math.erf(v / math.sqrt(2))))(z)
            s_il2 = row[p_ + "il2"] = lif(p_ + "il2", g + a[p_ + "b_il2"])
            x2 = norm(spikes_times(s_il2, a[p_ + "w_out"]) + s_il1, a[p_ + "ln2_gain"], a[p_ + "ln2_shift"])
            s = row[p_ + "out"] = lif(p_ + "out", x2 + a[p_ + "b_out"])
        prev = s
        raster.append(row)
    return raster


@pytest.mark.parametrize("feedback", [False, True])
def test_two_encoder_raster_matches_reimplementation(feedback):
    p = toy_params(seed=5, n_encoders=2, feedback_enabled=feedback)
    tokens = toy_tokens(p, batch=1, seed=5)[0]
    got = run_raster(p, tokens, 5)
    ref = reference_simulation(p, tokens, 5)
    active = 0
    for a, b in zip(got, ref):
        for k in a:
            np.testing.assert_array_equal(a[k], b[k], err_msg=k)
            active += int(a[k].sum())
    assert active > 0


def test_record_rates_match_neuron_asr():
    p = toy_params(seed=4)
    tokens = toy_tokens(p, batch=3)
    crit = ConvergenceCriterion(t_max=30, tol=0.0)
    rec = simulate_to_equilibrium(p, tokens, crit)
    state = init_state(p.config, (3,))
    y = embed(tokens, p)
    for _ in range(30):
        model_step(p, state, y)
    for k in rec.layer_names:
        np.testing.assert_array_equal(rec.rates[k], state.neurons[k].asr())


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.booleans(), st.integers(1, 2))
def test_all_traffic_is_binary(seed, feedback, n_enc):
    p = toy_params(seed=seed, feedback_enabled=feedback, n_encoders=n_enc)
    state = init_state(p.config, (2,))
    y = embed(toy_tokens(p, batch=2, seed=seed), p)
    for _ in range(8):
        model_step(p, state, y)
        for v in state.neurons.values():
            assert np.all((v.last_spikes == 0) | (v.last_spikes == 1))
            r = v.asr()
            assert r.min() >= 0 and r.max() <= 1


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = toy_params(seed=7, feedback_enabled=True)
    path = tmp_path / "student.json"
    save_checkpoint(path, p)
    q = load_checkpoint(path)
    assert q.config == p.config
    assert q.names() == p.names()
    for k in p.names():
        assert q[k].tobytes() == p[k].tobytes()


def test_checkpoint_rejects_wrong_kind(tmp_path):
    from eqspike import io as eio
    path = tmp_path / "x.json"
    eio.save_tensors(path, "teacher", {}, {"a": np.zeros(2)})
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_check_reports_shape_mismatch():
    p = toy_params()
    p["b_in"] = np.zeros(3)
    with pytest.raises(nx.DimensionError):
        p.check()

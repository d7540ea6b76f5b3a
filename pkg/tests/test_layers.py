import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gradcases
from gmufusion.layers import (
    GMUClassifier,
    GmuBimodalParams,
    GmuMultimodalParams,
    LogisticParams,
    MaxoutLayerParams,
    MaxoutMLPParams,
    MoEParams,
    ModelSpec,
    build_model,
    fusion_avg_probs,
    fusion_concat,
    fusion_linear_sum,
    gmu_bimodal_forward,
    gmu_multimodal_forward,
    maxout_mlp_forward,
    moe_forward,
)
from gmufusion.tensor import Parameter, ShapeError, split

SATURATE = 40.0  # logit magnitude at which sigmoid is 1 to double precision


def P(name, value, axis=None):
    return Parameter(name, np.asarray(value, dtype=float), axis)


def bimodal(W_v, W_t, W_z, **biases):
    return GmuBimodalParams(P("W_v", W_v), P("W_t", W_t), P("W_z", W_z),
                            **{k: P(k, v) for k, v in biases.items()})


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


# --- bimodal GMU -------------------------------------------------------------

def test_gmu_matches_hand_formula():
    rng = np.random.default_rng(0)
    p = GmuBimodalParams.init(3, 2, 4, rng, init_range=1.0)
    x_v, x_t = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    out = gmu_bimodal_forward(x_v, x_t, p)
    h_v, h_t = np.tanh(x_v @ p.W_v.value.T), np.tanh(x_t @ p.W_t.value.T)
    z = sigmoid(np.hstack([x_v, x_t]) @ p.W_z.value.T)
    np.testing.assert_allclose(out.h, z * h_v + (1 - z) * h_t, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(out.z, z, rtol=1e-14)


def test_gmu_open_visual_gate_passes_visual_branch():
    x_v, x_t = np.array([[0.3, 0.7]]), np.array([[1.2]])  # positive, so the gate logit is >= 60
    p = bimodal([[0.5, 2.0]], [[-1.0]], [[SATURATE, 0.0, SATURATE]])
    out = gmu_bimodal_forward(x_v, x_t, p)
    np.testing.assert_allclose(out.h, np.tanh(x_v @ p.W_v.value.T), atol=1e-15)


def test_gmu_zero_transforms_give_zero():
    p = bimodal(np.zeros((2, 3)), np.zeros((2, 1)), np.ones((2, 4)))
    rng = np.random.default_rng(1)
    assert np.all(gmu_bimodal_forward(rng.normal(size=(4, 3)), rng.normal(size=(4, 1)), p).h == 0)


def test_gmu_odd_symmetry_example():
    out = gmu_bimodal_forward([[1.0]], [[-1.0]], bimodal([[1.0]], [[1.0]], [[0.0, 0.0]]))
    assert out.z[0, 0] == 0.5
    assert out.h[0, 0] == 0.0


def test_gmu_bias_is_opt_in():
    rng = np.random.default_rng(0)
    assert len(GmuBimodalParams.init(2, 2, 3, rng).parameters()) == 3
    assert len(GmuBimodalParams.init(2, 2, 3, rng, bias=True).parameters()) == 6


def test_gmu_bias_shifts_gate():
    p = bimodal([[1.0]], [[1.0]], [[0.0, 0.0]], b_v=[0.0], b_t=[0.0], b_z=[SATURATE])
    out = gmu_bimodal_forward([[0.2]], [[0.9]], p)
    assert out.h[0, 0] == pytest.approx(np.tanh(0.2), abs=1e-15)


@pytest.mark.parametrize("shapes", [
    ((2, 3), (3, 2), (2, 5)),  # d_h disagrees
    ((2, 3), (2, 2), (2, 4)),  # gate input extent wrong
])
def test_gmu_param_shape_errors(shapes):
    with pytest.raises(ShapeError):
        bimodal(*[np.zeros(s) for s in shapes])


def test_gmu_input_shape_error():
    p = GmuBimodalParams.init(3, 2, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        gmu_bimodal_forward(np.zeros((5, 2)), np.zeros((5, 2)), p)
    with pytest.raises(ShapeError):
        gmu_bimodal_forward(np.zeros((5, 3)), np.zeros((4, 2)), p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.01, 3.0))
def test_gmu_output_between_branches(seed, n, scale):
    rng = np.random.default_rng(seed)
    p = GmuBimodalParams.init(3, 2, 4, rng, init_range=scale)
    out = gmu_bimodal_forward(rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), p)
    h_v, h_t = out.branches
    tol = 1e-15
    assert np.all(out.h >= np.minimum(h_v, h_t) - tol)
    assert np.all(out.h <= np.maximum(h_v, h_t) + tol)
    z_v, z_t = out.gates[0], 1.0 - out.gates[0]
    assert np.all(z_v + z_t == 1.0)


# --- k-modal GMU -------------------------------------------------------------

def _multimodal(dims, d_h, gate_bias, rng):
    p = GmuMultimodalParams.init(dims, d_h, rng, init_range=0.5, bias=True)
    for b, val in zip(p.b_z, gate_bias):
        b.value = np.full(d_h, val)
    return p


def test_k3_single_open_gate():
    rng = np.random.default_rng(3)
    dims = (2, 3, 1)
    p = _multimodal(dims, 4, [-60.0, 60.0, -60.0], rng)
    xs = [rng.normal(size=(5, d)) for d in dims]
    out = gmu_multimodal_forward(xs, p)
    np.testing.assert_allclose(out.h, np.tanh(xs[1] @ p.W[1].value.T + p.b[1].value), atol=1e-9)


def test_k3_all_gates_closed():
    rng = np.random.default_rng(4)
    p = _multimodal((2, 2, 2), 3, [-60.0] * 3, rng)
    out = gmu_multimodal_forward([rng.normal(size=(4, 2)) for _ in range(3)], p)
    assert np.max(np.abs(out.h)) < 1e-20


def test_k3_gates_are_not_normalized():
    rng = np.random.default_rng(5)
    p = _multimodal((2, 2, 2), 3, [60.0] * 3, rng)
    out = gmu_multimodal_forward([rng.normal(size=(4, 2)) for _ in range(3)], p)
    np.testing.assert_allclose(sum(out.gates), 3.0)


def test_k2_tied_gates_reproduce_bimodal():
    # z_2 = sigmoid(-a) = 1 - sigmoid(a), so the two forwards agree
    rng = np.random.default_rng(6)
    bi = GmuBimodalParams.init(3, 2, 4, rng, init_range=1.0)
    multi = GmuMultimodalParams(
        [bi.W_v, bi.W_t],
        [bi.W_z, P("W_z1", -bi.W_z.value)],
    )
    x_v, x_t = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    a, b = gmu_bimodal_forward(x_v, x_t, bi), gmu_multimodal_forward([x_v, x_t], multi)
    np.testing.assert_allclose(a.h, b.h, atol=1e-15)


def test_multimodal_needs_two_modalities():
    with pytest.raises(ShapeError):
        GmuMultimodalParams([P("W0", np.zeros((2, 2)))], [P("Z0", np.zeros((2, 2)))])


# --- maxout ------------------------------------------------------------------

def test_maxout_abs_construction():
    layer = MaxoutLayerParams(P("W", [[[1.0, -1.0]]]), P("b", [[0.0, 0.0]]))
    head = LogisticParams(P("hW", [[1.0]]), P("hb", [0.0]))
    p = maxout_mlp_forward([[2.0], [-3.0]], [layer], head)
    np.testing.assert_allclose(p[:, 0], sigmoid(np.array([2.0, 3.0])), rtol=1e-15)


def test_maxout_all_zero_weights():
    layer = MaxoutLayerParams(P("W", np.zeros((3, 2, 2))), P("b", np.zeros((2, 2))))
    head = LogisticParams(P("hW", np.zeros((2, 2))), P("hb", [0.7, -1.1]))
    p = maxout_mlp_forward(np.random.default_rng(0).normal(size=(4, 3)), [layer], head)
    np.testing.assert_allclose(p, np.tile(sigmoid(np.array([0.7, -1.1])), (4, 1)), rtol=1e-15)


def test_maxout_needs_two_pieces():
    with pytest.raises(ShapeError):
        MaxoutLayerParams(P("W", np.zeros((3, 2, 1))), P("b", np.zeros((2, 1))))


def _brute_force_mlp(x, layers, head):
    h = x
    for layer in layers:
        W, b = layer.W.value, layer.b.value
        d, m, k = W.shape
        out = np.empty((h.shape[0], m))
        for n, i in itertools.product(range(h.shape[0]), range(m)):
            out[n, i] = max(sum(h[n, a] * W[a, i, j] for a in range(d)) + b[i, j] for j in range(k))
        h = out
    logits = np.array([[sum(h[n, a] * head.W.value[q, a] for a in range(h.shape[1])) + head.b.value[q]
                        for q in range(head.W.shape[0])] for n in range(h.shape[0])])
    return sigmoid(logits)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_maxout_matches_piece_enumeration(seed, k):
    rng = np.random.default_rng(seed)
    layers = [MaxoutLayerParams.init(3, 4, k, rng, 1.0, "l0"), MaxoutLayerParams.init(4, 2, k, rng, 1.0, "l1")]
    for layer in layers:
        layer.b.value = rng.normal(size=layer.b.shape)
    head = LogisticParams.init(2, 3, rng, 1.0)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(maxout_mlp_forward(x, layers, head), _brute_force_mlp(x, layers, head),
                               rtol=0, atol=1e-12)


# --- mixture of experts ------------------------------------------------------

def _logistic_expert(W, b, name):
    return LogisticParams(P(f"{name}.W", W), P(f"{name}.b", b))


def test_moe_saturated_gate_selects_expert():
    rng = np.random.default_rng(0)
    e0, e1 = (LogisticParams.init(2, 3, rng, 1.0, f"e{i}") for i in range(2))
    gate = _logistic_expert(np.zeros((2, 4)), [SATURATE, -SATURATE], "gate")
    xs = [rng.normal(size=(5, 2)), rng.normal(size=(5, 2))]
    out = moe_forward(xs, MoEParams([e0, e1], gate, "tied"))
    np.testing.assert_allclose(out.probs, sigmoid(xs[0] @ e0.W.value.T + e0.b.value), atol=1e-15)


def test_moe_identical_experts():
    rng = np.random.default_rng(1)
    W, b = rng.normal(size=(2, 2)), rng.normal(size=2)
    gate = LogisticParams.init(4, 2, rng, 2.0, "gate")
    x = rng.normal(size=(6, 2))
    out = moe_forward([x, x], MoEParams([_logistic_expert(W, b, "a"), _logistic_expert(W, b, "b")], gate))
    np.testing.assert_allclose(out.probs, sigmoid(x @ W.T + b), atol=1e-15)


def test_moe_untied_hand_example():
    # gate logits are constant per label: label 0 -> [0.3, 0.7], label 1 -> [0.9, 0.1]
    lg = np.log
    gate_b = np.array([lg(0.3), lg(0.9), lg(0.7), lg(0.1)])  # layout [expert, label]
    gate = _logistic_expert(np.zeros((4, 2)), gate_b, "gate")
    e0 = _logistic_expert(np.zeros((2, 1)), [lg(0.2 / 0.8), lg(0.6 / 0.4)], "e0")  # probs 0.2, 0.6
    e1 = _logistic_expert(np.zeros((2, 1)), [lg(0.5 / 0.5), lg(0.9 / 0.1)], "e1")  # probs 0.5, 0.9
    out = moe_forward([np.ones((1, 1)), np.ones((1, 1))], MoEParams([e0, e1], gate, "untied"))
    np.testing.assert_allclose(out.probs[0], [0.3 * 0.2 + 0.7 * 0.5, 0.9 * 0.6 + 0.1 * 0.9], atol=1e-15)
    np.testing.assert_allclose(out.gates[0], [[0.3, 0.9], [0.7, 0.1]], atol=1e-15)


@pytest.mark.parametrize("mode", ["tied", "untied"])
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_moe_gates_sum_to_one(mode, seed):
    rng = np.random.default_rng(seed)
    experts = [LogisticParams.init(d, 3, rng, 1.0, f"e{i}") for i, d in enumerate((2, 3))]
    gate = LogisticParams.init(5, 2 if mode == "tied" else 6, rng, 5.0, "gate")
    out = moe_forward([rng.normal(size=(4, 2)), rng.normal(size=(4, 3))], MoEParams(experts, gate, mode))
    np.testing.assert_allclose(out.gates.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out.probs >= 0) & (out.probs <= 1))


def test_moe_gate_extent_checked():
    rng = np.random.default_rng(0)
    experts = [LogisticParams.init(2, 3, rng, prefix=f"e{i}") for i in range(2)]
    with pytest.raises(ShapeError):
        MoEParams(experts, LogisticParams.init(4, 3, rng, prefix="gate"), "tied")
    with pytest.raises(ShapeError):
        moe_forward([np.zeros((2, 2))], MoEParams(experts, LogisticParams.init(4, 2, rng, prefix="g"), "tied"))


def test_moe_with_maxout_experts_runs():
    rng = np.random.default_rng(2)
    experts = [MaxoutMLPParams([MaxoutLayerParams.init(2, 3, 2, rng, 0.5, f"e{i}.l0")],
                               LogisticParams.init(3, 2, rng, 0.5, f"e{i}.head")) for i in range(2)]
    out = moe_forward([rng.normal(size=(3, 2))] * 2, MoEParams(experts, LogisticParams.init(4, 2, rng, prefix="g")))
    assert out.probs.shape == (3, 2)


# --- fusion baselines --------------------------------------------------------

def test_concat_examples():
    np.testing.assert_array_equal(fusion_concat([[[1.0, 2.0]], [[3.0]]]), [[1.0, 2.0, 3.0]])
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(fusion_concat([np.zeros((2, 0)), x]), x)
    a, b = split(fusion_concat([x, x[:, :1]]), [2, 1])
    np.testing.assert_array_equal(a, x)
    with pytest.raises(ShapeError):
        fusion_concat([np.zeros((2, 1)), np.zeros((3, 1))])


def test_linear_sum_examples():
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    P1, P2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(fusion_linear_sum([x1, x2], [P1, np.zeros((5, 2))]), x1 @ P1.T)
    np.testing.assert_allclose(fusion_linear_sum([x1, x1], [P1, P1]), 2 * (x1 @ P1.T))
    np.testing.assert_allclose(fusion_linear_sum([x1, x2], [P1, P2]), x1 @ P1.T + x2 @ P2.T, atol=1e-14)
    with pytest.raises(ShapeError):
        fusion_linear_sum([x1, x2], [P1, P1])


def test_avg_probs_examples():
    assert fusion_avg_probs([[[0.9]], [[0.1]]])[0, 0] == 1  # mean 0.5 is positive
    p = np.array([[0.2, 0.7], [0.5, 0.49]])
    np.testing.assert_array_equal(fusion_avg_probs([p, p]), [[0, 1], [1, 0]])
    three = [[[0.9, 0.1]], [[0.3, 0.4]], [[0.2, 0.8]]]  # means 1.4/3, 1.3/3
    np.testing.assert_array_equal(fusion_avg_probs(three, threshold=0.45), [[1, 0]])
    with pytest.raises(ShapeError):
        fusion_avg_probs([np.zeros((1, 2)), np.zeros((2, 1))])
    with pytest.raises(ValueError):
        fusion_avg_probs([[[1.2]]])


# --- classifiers -------------------------------------------------------------

@pytest.mark.parametrize("kind", ["gmu", "maxout_mlp", "logistic", "moe_tied", "moe_untied", "concat", "linear_sum"])
def test_build_model_predicts_probabilities(kind):
    rng = np.random.default_rng(0)
    model = build_model(ModelSpec(kind), [3, 2], 4, 5, 0.1, rng)
    p = model.predict_proba([rng.normal(size=(6, 3)), rng.normal(size=(6, 2))])
    assert p.shape == (6, 4) and np.all((p >= 0) & (p <= 1))


def test_build_model_rejects_avg_probs():
    with pytest.raises(ValueError, match="train_avg_probs"):
        build_model(ModelSpec("avg_probs"), [3, 2], 4, 5, 0.1, np.random.default_rng(0))


def test_gmu_classifier_exposes_gates():
    rng = np.random.default_rng(0)
    model = GMUClassifier([3, 2], 2, 5, rng)
    z = model.gates([rng.normal(size=(4, 3)), rng.normal(size=(4, 2))])
    assert len(z) == 1 and z[0].shape == (4, 5)
    assert np.all((z[0] > 0) & (z[0] < 1))


def test_state_roundtrip():
    rng = np.random.default_rng(0)
    model = build_model(ModelSpec("gmu"), [3, 2], 2, 4, 0.1, rng)
    xs = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
    before, state = model.predict_proba(xs), model.state()
    for p in model.parameters():
        p.value = p.value + 1.0
    model.load_state(state)
    np.testing.assert_array_equal(model.predict_proba(xs), before)


@pytest.mark.parametrize("kind", sorted(gradcases.LAYER_CASES))
def test_layer_gradients(kind):
    worst, _ = gradcases.max_relative_error(gradcases.LAYER_CASES[kind], n_points=20)
    assert worst < gradcases.TOL

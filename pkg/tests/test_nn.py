import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ohs_bench import nn
from oracles import central_difference, relative_error, straight_line_forward

# (input_dim, output_dim, hidden, blocks): desk-grid policy/critic shapes plus the FQE critic
DESK_SHAPES = [
    (4, 2, 32, 1), (4, 2, 64, 1),        # PointMass policies
    (6, 51, 32, 1), (6, 51, 64, 1),      # PointMass critics
    (5, 1, 32, 1), (6, 51, 64, 1),       # ChainWalk policy / critic
    (6, 1, 64, 1),                       # scalar FQE critic
]


def random_params(rng, shape, scale=0.5):
    p = nn.init_mlp(*shape, rng)
    # perturb layer-norm params so their gradients are exercised away from 1/0
    return p.with_values(p.values + scale * 0.1 * rng.standard_normal(p.values.size))


def test_zero_network_gives_zero_output(rng):
    p = nn.MlpParams(3, 2, 4, 0, np.zeros(nn.param_count(3, 2, 4, 0)))
    assert np.array_equal(nn.mlp_forward(p, rng.standard_normal((5, 3))), np.zeros((5, 2)))


def test_zeroed_residual_branch_passes_input_projection_through(rng):
    p = nn.init_mlp(3, 2, 6, 1, rng)
    seg = p.segments()
    seg["block0.W2"][...] = 0.0
    seg["block0.b2"][...] = 0.0
    seg["block0.ln_b"][...] = 0.0
    x = rng.standard_normal((4, 3))
    expected = (x @ seg["in.W"] + seg["in.b"]) @ seg["out.W"] + seg["out.b"]
    np.testing.assert_allclose(nn.mlp_forward(p, x), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("shape", [(3, 2, 5, 0), (3, 2, 5, 1), (4, 3, 6, 2)])
def test_forward_matches_straight_line_oracle(rng, shape):
    p = random_params(rng, shape)
    x = rng.standard_normal((3, shape[0]))
    np.testing.assert_allclose(nn.mlp_forward(p, x), straight_line_forward(p, x), rtol=0, atol=1e-6)


def test_single_vector_input_is_squeezed(rng):
    p = nn.init_mlp(3, 2, 4, 1, rng)
    x = rng.standard_normal(3)
    np.testing.assert_array_equal(nn.mlp_forward(p, x), nn.mlp_forward(p, x[None])[0])


def test_wrong_input_width_raises(rng):
    with pytest.raises(ValueError):
        nn.mlp_forward(nn.init_mlp(3, 2, 4, 1, rng), np.zeros((1, 4)))


def test_zero_upstream_gradient_gives_zero_grads(rng):
    p = random_params(rng, (3, 2, 5, 1))
    g = nn.backprop(p, rng.standard_normal((4, 3)), np.zeros((4, 2)))
    assert np.array_equal(g, np.zeros_like(g))


def test_linear_network_grads_are_outer_products(rng):
    p = random_params(rng, (3, 2, 4, 0))
    x, dy = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
    grads = p.segments(nn.backprop(p, x, dy))
    seg = p.segments()
    h = x[0] @ seg["in.W"] + seg["in.b"]
    np.testing.assert_allclose(grads["out.W"], np.outer(h, dy[0]), atol=1e-12)
    np.testing.assert_allclose(grads["out.b"], dy[0], atol=1e-12)
    np.testing.assert_allclose(grads["in.W"], np.outer(x[0], seg["out.W"] @ dy[0]), atol=1e-12)


@pytest.mark.parametrize("shape", sorted(set(DESK_SHAPES)))
def test_param_gradients_match_finite_differences(rng, shape):
    p = random_params(rng, shape)
    x = rng.standard_normal((6, shape[0]))
    dy = rng.standard_normal((6, shape[1]))
    analytic = nn.backprop(p, x, dy)
    idx = rng.choice(p.values.size, size=min(400, p.values.size), replace=False)
    numeric = central_difference(lambda th: float((nn.mlp_forward(p.with_values(th), x) * dy).sum()),
                                 p.values, indices=idx)
    assert relative_error(analytic[idx], numeric[idx]) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    p = random_params(rng, (4, 3, 8, 2))
    x = rng.standard_normal((1, 4))
    dy = rng.standard_normal((1, 3))
    _, cache = nn.forward(p, x)
    _, dx = nn.backward(p, cache, dy)
    numeric = central_difference(lambda v: float((nn.mlp_forward(p, v[None]) * dy).sum()), x[0])
    assert relative_error(dx[0], numeric) < 1e-6


@given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 6), st.integers(0, 2), st.integers(0, 2**31))
def test_gradient_check_random_architectures(in_dim, out_dim, hidden, blocks, seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, (in_dim, out_dim, hidden, blocks))
    x = rng.standard_normal((3, in_dim))
    dy = rng.standard_normal((3, out_dim))
    numeric = central_difference(lambda th: float((nn.mlp_forward(p.with_values(th), x) * dy).sum()),
                                 p.values)
    assert relative_error(nn.backprop(p, x, dy), numeric) < 1e-4


def test_forward_is_pure(rng):
    p = random_params(rng, (3, 2, 5, 1))
    before = p.values.copy()
    x = rng.standard_normal((4, 3))
    x_before = x.copy()
    a, b = nn.mlp_forward(p, x), nn.mlp_forward(p, x)
    assert np.array_equal(a, b)
    assert np.array_equal(p.values, before) and np.array_equal(x, x_before)


def test_init_is_seeded():
    a = nn.init_mlp(3, 2, 8, 1, np.random.default_rng(1))
    b = nn.init_mlp(3, 2, 8, 1, np.random.default_rng(1))
    c = nn.init_mlp(3, 2, 8, 1, np.random.default_rng(2))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    seg = a.segments()
    assert np.all(seg["block0.ln_g"] == 1.0) and np.all(seg["block0.ln_b"] == 0.0)
    assert np.all(np.abs(seg["in.W"]) <= 1 / np.sqrt(3))


def test_adam_zero_grads_leave_params_and_advance_step(rng):
    params = rng.standard_normal(10)
    state = nn.AdamState.zeros(10)
    new, state2 = nn.adam_step(state, params, np.zeros(10), 1e-3)
    assert np.array_equal(new, params)
    assert state2.step == 1


def test_adam_first_step_is_sign_scaled():
    g = np.array([0.3, -2.0, 1e-3])
    new, _ = nn.adam_step(nn.AdamState.zeros(3), np.zeros(3), g, 0.01)
    # bias-corrected first step: -lr * g / (|g| + eps)
    np.testing.assert_allclose(new, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_is_deterministic(rng):
    grads = rng.standard_normal((5, 8))

    def run():
        p, s = np.ones(8), nn.AdamState.zeros(8)
        for g in grads:
            p, s = nn.adam_step(s, p, g, 1e-2)
        return p

    assert np.array_equal(run(), run())


def test_adam_rejects_bad_inputs():
    s = nn.AdamState.zeros(2)
    with pytest.raises(nn.TrainingError):
        nn.adam_step(s, np.zeros(2), np.array([np.nan, 0.0]), 1e-3)
    with pytest.raises(ValueError):
        nn.adam_step(s, np.zeros(2), np.zeros(2), 0.0)


def test_weight_file_round_trip(tmp_path, rng):
    p = random_params(rng, (4, 51, 16, 2)).quantized()
    nn.write_weights(p, tmp_path / "w.ohsw")
    q = nn.read_weights(tmp_path / "w.ohsw")
    assert q.shape_key == p.shape_key
    assert np.array_equal(q.values, p.values)
    raw = (tmp_path / "w.ohsw").read_bytes()
    assert raw[:4] == b"OHSW" and len(raw) == 28 + 4 * p.values.size


def test_weight_file_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.ohsw").write_bytes(b"XXXX" + bytes(24))
    with pytest.raises(ValueError):
        nn.read_weights(tmp_path / "bad.ohsw")


def test_param_count_matches_layout():
    for shape in DESK_SHAPES + [(2, 3, 1024, 5)]:
        total = sum(int(np.prod(s)) for _, s in nn.segment_layout(*shape))
        assert total == nn.param_count(*shape)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skelsplat import autodiff as ad
from skelsplat.autodiff import (
    Adam,
    CheckpointError,
    NonFiniteError,
    ParamGroup,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)

from gradcheck import assert_gradients_match, mlp_gradients, primitive_cases

CASES = primitive_cases()


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradients_match_finite_differences(name, fn, inputs):
    assert_gradients_match(fn, inputs, rtol=1e-4, atol=1e-6)


def test_mlp_gradients_match_finite_differences():
    analytic, numeric = mlp_gradients(seed=3)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-6)


def test_square_sum_gradient():
    x = Parameter(np.array([1.0, 2.0]), name="x")
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    assert y.item() == 5.0
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_matmul_vector_gradient():
    A = Parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), name="A")
    with Tape() as tape:
        y = ad.matmul(A, np.array([1.0, 1.0])).sum()
    tape.backward(y)
    np.testing.assert_array_equal(A.grad, np.ones((2, 2)))


def test_maximum_subgradient_is_zero_at_kink():
    x = Parameter(np.array([0.0, 1.0, -1.0]), name="x")
    with Tape() as tape:
        y = ad.maximum(x, 0.0).sum()
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_shape_mismatch_names_operation_and_shapes():
    with pytest.raises(ShapeError) as err:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    msg = str(err.value)
    assert "add" in msg and "(2, 3)" in msg and "(4,)" in msg


def test_backward_needs_scalar():
    x = Parameter(np.ones(3), name="x")
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_second_backward_on_consumed_tape_errors():
    x = Parameter(np.ones(3), name="x")
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    tape.reset()
    assert len(tape) == 0


def test_gradients_accumulate_across_tapes_until_zeroed():
    x = Parameter(np.array([1.0, -2.0]), name="x")
    for _ in range(2):
        with Tape() as tape:
            y = (3.0 * x).sum()
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_shared_subexpression_accumulates():
    x = Parameter(np.array([2.0]), name="x")
    with Tape() as tape:
        u = x * x
        y = (u + u * 3.0).sum()
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [16.0])


def test_no_grad_records_nothing():
    x = Parameter(np.ones(2), name="x")
    with Tape() as tape:
        with no_grad():
            y = (x * 2).sum()
    assert len(tape) == 0
    assert not y.requires_grad


def test_nonfinite_policy():
    x = Tensor(np.array([-1.0]))
    ad.set_nonfinite_policy("error")
    try:
        with pytest.raises(NonFiniteError):
            with np.errstate(invalid="ignore"):
                ad.sqrt(x)
    finally:
        ad.set_nonfinite_policy("propagate")
    with np.errstate(invalid="ignore"):
        assert np.isnan(ad.sqrt(x).data).all()


@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-3, 3)),
    st.booleans(),
)
def test_broadcast_gradient_reduces_to_input_shape(a, keep_row):
    row = a[:1] if keep_row else a[:, :1]
    x = Parameter(a.copy(), name="x")
    r = Parameter(row.copy(), name="r")
    with Tape() as tape:
        y = (x * r).sum()
    tape.backward(y)
    assert r.grad.shape == row.shape
    np.testing.assert_allclose(x.grad, np.broadcast_to(row, a.shape))
    np.testing.assert_allclose(r.grad, a.sum(axis=0 if keep_row else 1, keepdims=True))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
def _reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(4)]
    p = Parameter(p0.copy(), name="p")
    opt = Adam([ParamGroup([p], 0.01, "g")])
    for g in grads:
        p.grad[...] = g
        opt.step()
    np.testing.assert_allclose(p.data, _reference_adam(p0, grads, 0.01), rtol=1e-12, atol=1e-14)


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -1.0]), name="p")
    opt = Adam([ParamGroup([p], 0.1, "g")])
    p.grad[...] = [3.0, -0.5]
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adam_zero_lr_group_keeps_params_but_updates_moments():
    a = Parameter(np.ones(2), name="a")
    b = Parameter(np.ones(2), name="b")
    opt = Adam([ParamGroup([a], 0.1, "a"), ParamGroup([b], 0.0, "b")])
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    opt.step()
    np.testing.assert_array_equal(b.data, [1.0, 1.0])
    assert np.all(opt.m["b"] != 0)
    assert np.all(a.data < 1.0)


def test_adam_state_round_trip_resumes_identically():
    rng = np.random.default_rng(1)
    grads = [rng.normal(size=3) for _ in range(6)]

    def run(split):
        p = Parameter(np.zeros(3), name="p")
        opt = Adam([ParamGroup([p], 0.05, "g")])
        for i, g in enumerate(grads):
            if i == split:
                state = opt.state_arrays()
                data = p.data.copy()
                p = Parameter(data, name="p")
                opt = Adam([ParamGroup([p], 0.05, "g")])
                opt.load_state_arrays(state)
            p.grad[...] = g
            opt.step()
        return p.data

    np.testing.assert_array_equal(run(None), run(3))


def test_adam_requires_unique_names():
    with pytest.raises(ValueError):
        Adam([ParamGroup([Parameter(np.ones(1), name="x"), Parameter(np.ones(1), name="x")], 0.1)])


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b.c": np.array([np.pi]), "empty": np.zeros((0, 3)), "s": np.array(2.0)}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"kind": "test", "n": 3})
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"kind": "test", "n": 3}
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert loaded[k].shape == arrays[k].shape
        assert loaded[k].tobytes() == arrays[k].tobytes()
    index = (tmp_path / "x.ckpt.index").read_text()
    assert "a\t" in index and "meta\t" in index


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"a": np.ones(4)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "bad_magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    for name in ("bad_magic.ckpt", "short.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


@given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=8),
                       arrays(np.float64, st.integers(0, 5), elements=st.floats(allow_nan=False)), max_size=4))
def test_checkpoint_encode_decode_property(arrays_in):
    from skelsplat.autodiff.checkpoint import decode, encode

    payload, _ = encode(arrays_in)
    out = decode(payload)
    assert set(out) == set(arrays_in)
    for k, v in arrays_in.items():
        assert out[k].tobytes() == v.tobytes()

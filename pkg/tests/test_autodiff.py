"""Engine tests: forward values, gradients against finite differences, Adam."""
import numpy as np
import pytest

from adbcr import autodiff
from adbcr.autodiff import Adam, ParamSet, Tape
from adbcr.errors import ConfigError, DimensionError, DomainError, TrainingError

from conftest import finite_difference, rel_err


# ---------------------------------------------------------------------------
# forward values

def test_matmul_identity():
    """Identity times a column leaves it unchanged."""
    tape = Tape()
    a = tape.constant([[1.0, 0.0], [0.0, 1.0]])
    b = tape.constant([[3.0], [4.0]])
    out = autodiff.matmul(tape, a, b)
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_scalar():
    tape = Tape()
    out = autodiff.matmul(tape, tape.constant([[2.0]]), tape.constant([[5.0]]))
    assert out.data[0, 0] == 10.0


def test_matmul_shape_mismatch():
    tape = Tape()
    with pytest.raises(DimensionError):
        autodiff.matmul(tape, tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


def test_elu_values():
    """0 -> 0, 1 -> 1, -1 -> exp(-1)-1."""
    tape = Tape()
    out = autodiff.elu(tape, tape.constant([[0.0, 1.0, -1.0]]))
    np.testing.assert_allclose(out.data, [[0.0, 1.0, np.expm1(-1.0)]], rtol=0, atol=1e-15)


def test_elu_large_negative_no_overflow():
    tape = Tape()
    out = autodiff.elu(tape, tape.constant([[-1e4]]))
    assert out.data[0, 0] == -1.0
    root = autodiff.mse_loss(tape, out, tape.constant([[0.0]]))
    tape.backward(root)
    assert np.all(np.isfinite(root.grad))


def test_mse_values():
    tape = Tape()
    pred = tape.constant([[2.0]])
    same = autodiff.mse_loss(tape, pred, tape.constant([[2.0]]))
    assert same.data[0, 0] == 0.0
    off = autodiff.mse_loss(tape, pred, tape.constant([[0.0]]))
    assert off.data[0, 0] == 4.0


def test_mse_empty_rejected():
    tape = Tape()
    empty = tape.constant(np.empty((0, 1)))
    with pytest.raises(DomainError):
        autodiff.mse_loss(tape, empty, empty)


def test_l1_values():
    tape = Tape()
    a = tape.constant([[1.0, 3.0]])
    b = tape.constant([[0.0, 1.0]])
    out = autodiff.l1_mean(tape, a, b)
    assert out.data[0, 0] == 1.5
    same = autodiff.l1_mean(tape, a, a)
    assert same.data[0, 0] == 0.0


def test_softmax_cross_entropy_matches_manual():
    """Value equals the mean negative log softmax probability of the label."""
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    tape = Tape()
    out = autodiff.softmax_cross_entropy(tape, tape.constant(logits), labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect = -np.mean(logp[np.arange(6), labels])
    np.testing.assert_allclose(out.data[0, 0], expect, rtol=1e-14)


def test_softmax_cross_entropy_label_range():
    tape = Tape()
    with pytest.raises(DomainError):
        autodiff.softmax_cross_entropy(tape, tape.constant(np.zeros((2, 2))), [0, 2])


# ---------------------------------------------------------------------------
# dropout

def test_dropout_eval_and_p0_identity():
    """Eval mode and p=0 return the input node itself and draw no randomness."""
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state["state"]["state"]
    tape = Tape()
    x = tape.constant(np.ones((3, 3)))
    assert autodiff.dropout(tape, x, 0.5, False, rng) is x
    assert autodiff.dropout(tape, x, 0.0, True, rng) is x
    assert rng.bit_generator.state["state"]["state"] == before


def test_dropout_invalid_p():
    tape = Tape()
    x = tape.constant(np.ones((2, 2)))
    with pytest.raises(ConfigError):
        autodiff.dropout(tape, x, 1.0, True, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        autodiff.dropout(tape, x, 0.5, True, None)


def test_dropout_mean_preserved():
    """p=0.5 on 1e4 ones: sample mean within 3 sigma of 1 (binomial concentration)."""
    tape = Tape()
    x = tape.constant(np.ones((100, 100)))
    out = autodiff.dropout(tape, x, 0.5, True, np.random.default_rng(7))
    # each output entry is 0 or 2 with variance p/(1-p) = 1; sd of mean = 1e-2
    assert abs(out.data.mean() - 1.0) < 3e-2
    survivors = out.data[out.data != 0.0]
    np.testing.assert_allclose(survivors, 2.0)


def test_dropout_backward_uses_forward_mask():
    """The vjp scales by the same kept/scaled mask the forward pass drew."""
    rng = np.random.default_rng(11)
    mask_rng = np.random.default_rng(11)
    keep = (mask_rng.random((4, 5)) >= 0.3) / 0.7
    tape = Tape()
    x = tape.constant(np.full((4, 5), 2.0))
    out = autodiff.dropout(tape, x, 0.3, True, rng)
    np.testing.assert_array_equal(out.data, 2.0 * keep)
    # |out - 0| has positive entries exactly at kept positions, so the l1
    # gradient w.r.t. x is sign * keep / n = keep / n.
    root = autodiff.l1_mean(tape, out, tape.constant(np.zeros((4, 5))))
    tape.backward(root)
    np.testing.assert_allclose(x.grad, keep / 20.0, rtol=1e-15)


# ---------------------------------------------------------------------------
# backward mechanics

def test_backward_accumulates_shared_node():
    """d/dx of (x + x) is 2, not 1: contributions sum."""
    tape = Tape()
    x = tape.param("x", np.array([[1.5]]))
    root = autodiff.add(tape, x, x)
    tape.backward(root)
    assert x.grad[0, 0] == 2.0


def test_backward_param_memoized_across_uses():
    """Two graph uses of one named parameter share a node and sum gradients."""
    tape = Tape()
    x = tape.param("x", np.array([[3.0]]))
    again = tape.param("x", np.array([[999.0]]))  # value ignored, same node
    assert again is x
    root = autodiff.mse_loss(tape, autodiff.add(tape, x, x), tape.constant([[0.0]]))
    tape.backward(root)
    # d/dx (2x)^2 = 8x = 24
    np.testing.assert_allclose(x.grad, [[24.0]], rtol=1e-14)


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.constant(np.ones((2, 2)))
    with pytest.raises(DimensionError):
        tape.backward(x)


def test_backward_unreached_nodes_zero():
    tape = Tape()
    used = tape.param("used", np.array([[1.0]]))
    unused = tape.param("unused", np.array([[1.0]]))
    root = autodiff.mse_loss(tape, used, tape.constant([[0.0]]))
    tape.backward(root)
    assert unused.grad[0, 0] == 0.0
    assert root.grad[0, 0] == 1.0


def test_backward_repeatable():
    """A second backward pass re-zeros buffers and reproduces the gradients."""
    tape = Tape()
    x = tape.param("x", np.array([[2.0, -1.0]]))
    root = autodiff.mse_loss(tape, autodiff.elu(tape, x), tape.constant([[0.0, 0.0]]))
    tape.backward(root)
    first = x.grad.copy()
    tape.backward(root)
    np.testing.assert_array_equal(x.grad, first)


def test_forward_bit_reproducible():
    """Same seed, same graph: outputs identical across runs."""
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(42)
        tape = Tape()
        x = tape.constant(np.arange(12.0).reshape(4, 3) / 7.0)
        w = tape.param("w", np.linspace(-1, 1, 6).reshape(3, 2))
        h = autodiff.elu(tape, autodiff.matmul(tape, x, w))
        h = autodiff.dropout(tape, h, 0.4, True, rng)
        outs.append(h.data.copy())
    np.testing.assert_array_equal(outs[0], outs[1])


# ---------------------------------------------------------------------------
# gradients against central finite differences

def _check_param_grads(build, params: dict[str, np.ndarray], tol: float,
                       eps: float = 1e-5) -> None:
    """build(params) -> (tape, root); compare every parameter gradient to FD."""
    tape, root = build(params)
    tape.backward(root)
    for name, array in params.items():
        analytic = tape.params[name].grad
        numeric = finite_difference(lambda: build(params)[1].data[0, 0], array, eps)
        worst = rel_err(analytic, numeric).max()
        assert worst < tol, f"{name}: worst relative error {worst:.3g}"


def test_matmul_gradient_finite_differences():
    """Random 3x4 by 4x2 product, reduced to a scalar by mse against zero."""
    rng = np.random.default_rng(5)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}

    def build(p):
        tape = Tape()
        prod = autodiff.matmul(tape, tape.param("a", p["a"]), tape.param("b", p["b"]))
        return tape, autodiff.mse_loss(tape, prod, tape.constant(np.zeros((3, 2))))

    _check_param_grads(build, params, tol=1e-6)


def test_mse_gradient_finite_differences():
    rng = np.random.default_rng(6)
    params = {"pred": rng.normal(size=(5, 1))}
    target = rng.normal(size=(5, 1))

    def build(p):
        tape = Tape()
        root = autodiff.mse_loss(tape, tape.param("pred", p["pred"]), tape.constant(target))
        return tape, root

    _check_param_grads(build, params, tol=1e-6)


def test_l1_gradient_finite_differences_away_from_ties():
    """Gaps kept above 1e-3 so the central difference never straddles the kink."""
    rng = np.random.default_rng(8)
    b = rng.normal(size=(6, 1))
    gap = rng.uniform(0.05, 1.0, size=(6, 1)) * np.where(rng.random((6, 1)) < 0.5, -1, 1)
    params = {"a": b + gap}

    def build(p):
        tape = Tape()
        root = autodiff.l1_mean(tape, tape.param("a", p["a"]), tape.constant(b))
        return tape, root

    _check_param_grads(build, params, tol=1e-5)


def test_l1_tie_subgradient_zero():
    tape = Tape()
    a = tape.param("a", np.array([[1.0, 2.0]]))
    root = autodiff.l1_mean(tape, a, tape.constant([[1.0, 0.0]]))
    tape.backward(root)
    np.testing.assert_array_equal(a.grad, [[0.0, 0.5]])


def test_add_bias_broadcast_gradient():
    """1xC bias over n rows: gradient is the column sum of the upstream."""
    rng = np.random.default_rng(9)
    params = {"bias": rng.normal(size=(1, 3))}
    base = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 3))

    def build(p):
        tape = Tape()
        out = autodiff.add(tape, tape.constant(base), tape.param("bias", p["bias"]))
        return tape, autodiff.mse_loss(tape, out, tape.constant(target))

    _check_param_grads(build, params, tol=1e-6)


def test_take_rows_gradient_with_repeats():
    """A row selected twice accumulates both downstream contributions."""
    rng = np.random.default_rng(10)
    params = {"x": rng.normal(size=(4, 2))}
    rows = np.array([0, 2, 2, 3])
    target = rng.normal(size=(4, 2))

    def build(p):
        tape = Tape()
        taken = autodiff.take_rows(tape, tape.param("x", p["x"]), rows)
        return tape, autodiff.mse_loss(tape, taken, tape.constant(target))

    _check_param_grads(build, params, tol=1e-6)
    # unselected row receives zero gradient
    tape, root = build(params)
    tape.backward(root)
    np.testing.assert_array_equal(tape.params["x"].grad[1], [0.0, 0.0])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(12)
    params = {"logits": rng.normal(size=(7, 2))}
    labels = rng.integers(0, 2, size=7)

    def build(p):
        tape = Tape()
        root = autodiff.softmax_cross_entropy(tape, tape.param("logits", p["logits"]), labels)
        return tape, root

    _check_param_grads(build, params, tol=1e-6)


def test_two_layer_composition_gradient():
    """matmul + bias + elu + matmul + scale + sub, checked end to end."""
    rng = np.random.default_rng(13)
    params = {
        "w1": rng.normal(size=(3, 4)) * 0.7,
        "b1": rng.normal(size=(1, 4)) * 0.1,
        "w2": rng.normal(size=(4, 1)) * 0.7,
    }
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 1))

    def build(p):
        tape = Tape()
        h = autodiff.elu(tape, autodiff.add(
            tape, autodiff.matmul(tape, tape.constant(x), tape.param("w1", p["w1"])),
            tape.param("b1", p["b1"])))
        out = autodiff.matmul(tape, h, tape.param("w2", p["w2"]))
        loss = autodiff.mse_loss(tape, out, tape.constant(y))
        penal = autodiff.l1_mean(tape, out, tape.constant(y + 2.0))
        return tape, autodiff.sub(tape, loss, autodiff.scale(tape, penal, 0.5))

    _check_param_grads(build, params, tol=1e-4)


# ---------------------------------------------------------------------------
# ParamSet

def test_paramset_duplicate_name():
    ps = ParamSet()
    ps.add("w", np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        ps.add("w", np.zeros((2, 2)))


def test_paramset_order_subset_count():
    ps = ParamSet()
    ps.add("phi.0.w", np.zeros((2, 3)))
    ps.add("head.0.0.w", np.zeros((3, 1)))
    ps.add("phi.0.b", np.zeros((1, 3)))
    assert ps.names() == ["phi.0.w", "head.0.0.w", "phi.0.b"]
    assert list(ps.subset("phi.")) == ["phi.0.w", "phi.0.b"]
    assert list(ps.subset("phi.", "head.")) == ps.names()
    assert ps.count() == 6 + 3 + 3


def test_paramset_snapshot_restore_isolated():
    ps = ParamSet()
    ps.add("w", np.ones((2, 2)))
    snap = ps.snapshot()
    ps["w"][...] += 5.0
    assert snap["w"][0, 0] == 1.0
    ps.restore(snap)
    np.testing.assert_array_equal(ps["w"], np.ones((2, 2)))
    # restoring writes in place: existing references see the restored values
    view = ps["w"]
    view += 1.0
    ps.restore(snap)
    assert view[0, 0] == 1.0


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_no_move():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.zeros((1, 2))})
    np.testing.assert_array_equal(p["w"], [[1.0, -2.0]])


def test_adam_first_step_hand_computed():
    """theta=1, g=1, lr=0.1: bias correction gives update 0.1/(1+1e-8)."""
    p = {"w": np.array([[1.0]])}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.array([[1.0]])})
    expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    np.testing.assert_allclose(p["w"][0, 0], expect, rtol=0, atol=1e-16)


def test_adam_matches_reference_loop():
    """200 steps on f(theta)=theta^2 track a scalar reference to 1e-10 and converge."""
    p = {"w": np.array([[1.0]])}
    opt = Adam(p, lr=0.05)
    theta, m, v = 1.0, 0.0, 0.0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for step in range(1, 201):
        opt.step({"w": 2.0 * p["w"]})
        g = 2.0 * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** step)
        vhat = v / (1 - beta2 ** step)
        theta -= 0.05 * mhat / (np.sqrt(vhat) + eps)
        assert abs(p["w"][0, 0] - theta) < 1e-10
    assert abs(p["w"][0, 0]) < 0.05


def test_adam_weight_decay_is_l2_in_gradient():
    """decay*param joins the gradient before moments, matching an explicit run."""
    rng = np.random.default_rng(14)
    start = rng.normal(size=(2, 2))
    grads = [rng.normal(size=(2, 2)) for _ in range(5)]
    p1 = {"w": start.copy()}
    opt1 = Adam(p1, lr=0.01, weight_decay=0.3)
    p2 = {"w": start.copy()}
    opt2 = Adam(p2, lr=0.01, weight_decay=0.0)
    for g in grads:
        opt1.step({"w": g})
        opt2.step({"w": g + 0.3 * p2["w"]})
        np.testing.assert_array_equal(p1["w"], p2["w"])


def test_adam_rejects_non_finite_gradient():
    p = {"w": np.ones((1, 1))}
    opt = Adam(p, lr=0.1)
    with pytest.raises(TrainingError):
        opt.step({"w": np.array([[np.inf]])})
    with pytest.raises(TrainingError):
        opt.step({"w": np.array([[np.nan]])})
    # the failed step must not have moved the parameters
    np.testing.assert_array_equal(p["w"], [[1.0]])


def test_adam_rejects_negative_lr():
    with pytest.raises(ConfigError):
        Adam({"w": np.ones((1, 1))}, lr=-0.1)


def test_adam_zero_lr_is_noop():
    p = {"w": np.array([[3.0]])}
    opt = Adam(p, lr=0.0)
    opt.step({"w": np.array([[123.0]])})
    assert p["w"][0, 0] == 3.0


def test_grads_for_collects_named_buffers():
    tape = Tape()
    x = tape.param("x", np.array([[2.0]]))
    tape.param("y", np.array([[5.0]]))
    root = autodiff.mse_loss(tape, x, tape.constant([[0.0]]))
    tape.backward(root)
    grads = autodiff.grads_for(tape, ["x", "y"])
    np.testing.assert_allclose(grads["x"], [[4.0]])
    np.testing.assert_array_equal(grads["y"], [[0.0]])

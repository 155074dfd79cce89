"""Test tensor operations, differentiation and the optimizer."""
import math
import threading

import numpy as np
import pytest
from common import SEEDS, check_gradients

from mitkd import ContractError, DegenerateRowError, DimensionError
from mitkd.numerics import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    cross_entropy_loss,
    dropout,
    embedding_lookup,
    gelu,
    kl_divergence_rows,
    layer_norm,
    lr_schedule,
    matmul,
    mul,
    no_tape,
    reshape,
    scale,
    softmax_rows,
    split,
    tensor_mean,
    tensor_sum,
    transpose,
)


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out, seed=99):
    """Reduce a tensor to a scalar with fixed, non-uniform weights."""
    weights = np.random.default_rng(seed).normal(size=out.shape)
    return tensor_sum(mul(out, weights))


def test_matmul_examples():
    """Matrix products shall match hand-computed values."""
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])
    assert np.array_equal(matmul(a, Tensor(np.eye(2))).data, a.data)

    projector = Tensor([[1.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(matmul(a, projector).data, [[1.0, 0.0], [3.0, 0.0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_triple_loop(seed):
    """Matrix products shall agree with the triple-loop definition."""
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(1, 6, size=3)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    expected = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for inner in range(k):
                expected[i, j] += a[i, inner] * b[inner, j]
    result = matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(result, expected, rtol=1e-12, atol=1e-12)


def test_matmul_batched():
    """Stacked operands shall be multiplied slice by slice."""
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2))
    result = matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            assert np.allclose(result[i, j], a[i, j] @ b[i, j], rtol=1e-12)


def test_matmul_mismatch():
    """Incompatible shapes shall raise DimensionError naming both shapes."""
    with pytest.raises(DimensionError) as err:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(err.value)
    assert "(4, 5)" in str(err.value)


def test_softmax_examples():
    """Softmax rows shall match hand-computed distributions."""
    assert np.allclose(softmax_rows(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(softmax_rows(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75])
    assert np.allclose(softmax_rows(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    masked = softmax_rows(Tensor([1.0, 2.0, 3.0]), mask=[True, False, True]).data
    total = math.e + math.e**3
    assert np.allclose(masked, [math.e / total, 0.0, math.e**3 / total])
    assert masked[1] == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_normalised(seed):
    """Every softmax row shall sum to one and be non-negative."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=(3, 4, 7))
    mask = rng.random((3, 4, 7)) > 0.4
    mask[..., 0] = True
    probs = softmax_rows(Tensor(logits), mask).data
    assert np.all(probs >= 0.0)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(probs[~mask] == 0.0)


def test_softmax_fully_masked_row():
    """A row without unmasked entries shall raise DegenerateRowError."""
    with pytest.raises(DegenerateRowError):
        softmax_rows(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, True], [False, False]])


def test_kl_examples():
    """Row KL shall match hand-computed values."""
    half = Tensor([0.5, 0.5])
    assert kl_divergence_rows(Tensor([1.0, 0.0]), half).item() == pytest.approx(
        math.log(2.0), abs=1e-12
    )
    assert kl_divergence_rows(half, half).item() == pytest.approx(0.0, abs=1e-15)

    floored = kl_divergence_rows(half, Tensor([1.0, 0.0])).item()
    assert math.isfinite(floored)
    assert floored == pytest.approx(0.5 * math.log(0.5 / 1e-12) + 0.5 * math.log(0.5))


@pytest.mark.parametrize("seed", SEEDS)
def test_kl_oracle(seed):
    """Row KL shall equal the mean of the per-row definition and be non-negative."""
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(6), size=5)
    q = rng.dirichlet(np.ones(6), size=5)
    expected = np.mean([np.sum(pr * np.log(pr / qr)) for pr, qr in zip(p, q)])
    value = kl_divergence_rows(Tensor(p), Tensor(q)).item()
    assert value == pytest.approx(expected, rel=1e-12)
    assert value >= 0.0


def test_kl_row_mask():
    """Masked rows shall not contribute to the mean."""
    p = Tensor([[1.0, 0.0], [0.5, 0.5]])
    q = Tensor([[0.5, 0.5], [0.9, 0.1]])
    value = kl_divergence_rows(p, q, row_mask=[True, False]).item()
    assert value == pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_constant_reference():
    """The reference side shall be constant and receive no gradient."""
    p = Tensor([0.3, 0.7], requires_grad=True)
    with pytest.raises(ContractError):
        kl_divergence_rows(p, Tensor([0.5, 0.5]))

    p = Tensor([0.3, 0.7])
    x = Tensor([0.1, -0.2], requires_grad=True)
    with Tape() as tape:
        loss = kl_divergence_rows(p, softmax_rows(x))
    backward(loss, tape)
    assert p.grad is None
    assert x.grad is not None


def test_layer_norm_examples():
    """Layer norm shall centre and scale rows to unit variance."""
    gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(layer_norm(Tensor([3.0, 3.0]), gain, bias).data, [0.0, 0.0])
    centred = layer_norm(Tensor([1.0, -1.0]), gain, bias).data
    assert np.allclose(centred, [1.0, -1.0], atol=1e-5)

    row = np.random.default_rng(0).normal(scale=10.0, size=64)
    normed = layer_norm(Tensor(row), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert abs(normed.mean()) < 1e-9
    assert abs(normed.var() - 1.0) < 1e-6


def test_elementwise_examples():
    """GELU, cross-entropy and embedding lookup shall match known values."""
    assert gelu(Tensor(0.0)).item() == 0.0
    assert abs(gelu(Tensor(-10.0)).item()) < 1e-12
    assert gelu(Tensor(10.0)).item() == pytest.approx(10.0)

    even = cross_entropy_loss(Tensor([0.0, 0.0]), 0).item()
    assert even == pytest.approx(math.log(2.0))
    logits = Tensor([[0.0, 0.0], [math.log(3.0), 0.0]])
    expected = (math.log(2.0) + math.log(4.0 / 3.0)) / 2.0
    assert cross_entropy_loss(logits, [0, 0]).item() == pytest.approx(expected)

    table = Tensor(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(embedding_lookup(table, [2, 0]).data, [[6, 7, 8], [0, 1, 2]])


@pytest.mark.parametrize("ids", [[4], [-1], [0, 9]])
def test_embedding_out_of_range(ids):
    """Ids outside the table shall raise IndexError."""
    with pytest.raises(IndexError):
        embedding_lookup(Tensor(np.zeros((4, 2))), ids)


def test_backward_examples():
    """Gradients of simple losses shall match their closed forms."""
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(w)
    backward(loss, tape)
    assert np.array_equal(w.grad, np.ones((2, 3)))

    w.grad = None
    with Tape() as tape:
        loss = scale(tensor_sum(mul(w, w)), 0.5)
    backward(loss, tape)
    assert np.array_equal(w.grad, w.data)


def test_backward_accumulates():
    """A second backward pass shall add to existing parameter gradients."""
    w = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = tensor_sum(scale(w, 3.0))
        backward(loss, tape)
    assert np.array_equal(w.grad, [6.0, 6.0])


def test_backward_contract():
    """Non-scalar losses and losses off the tape shall raise ContractError."""
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = scale(w, 2.0)
    with pytest.raises(ContractError):
        backward(out, tape)

    loss = tensor_sum(w)
    with pytest.raises(ContractError):
        backward(loss, Tape())


def test_backward_deterministic():
    """Two passes over the same computation shall give bit-identical gradients."""
    rng = np.random.default_rng(5)
    x, w = _param(rng, 4, 6), _param(rng, 6, 3)
    grads = []
    for _ in range(2):
        x.grad = w.grad = None
        with Tape() as tape:
            loss = _weighted(softmax_rows(gelu(matmul(x, w))))
        backward(loss, tape)
        grads.append((x.grad.copy(), w.grad.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


def test_no_tape():
    """Operations under no_tape shall not be recorded."""
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        with no_tape():
            constant = scale(w, 2.0)
        loss = tensor_sum(mul(w, constant))
    assert not constant.requires_grad
    assert len(tape) == 2
    backward(loss, tape)
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_tape_thread_local():
    """A tape shall only record operations of its own thread."""
    w = Tensor([1.0], requires_grad=True)
    recorded = []

    def other():
        recorded.append(scale(w, 2.0).requires_grad)

    with Tape() as tape:
        worker = threading.Thread(target=other)
        worker.start()
        worker.join()
    assert recorded == [False]
    assert len(tape) == 0


def _grad_cases():
    rng = np.random.default_rng(42)
    a, b, v = _param(rng, 3, 4), _param(rng, 4), _param(rng, 2, 3, 4)
    m, s = _param(rng, 4, 5), _param(rng, 2, 4, 5)
    c, t = _param(rng, 3, 2), _param(rng, 6, 3)
    logits = _param(rng, 5, 4)
    gain, bias = _param(rng, 4), _param(rng, 4)
    mask = np.array([[True, True, False, True]] * 3)
    reference = rng.dirichlet(np.ones(4), size=3)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    return {
        "add": (lambda: _weighted(add(a, b)), [a, b]),
        "mul": (lambda: _weighted(mul(a, b)), [a, b]),
        "scale-mean": (lambda: tensor_mean(scale(mul(a, a), 3.0)), [a]),
        "matmul-shared": (lambda: _weighted(matmul(v, m)), [v, m]),
        "matmul-stacked": (lambda: _weighted(matmul(v, s)), [v, s]),
        "transpose": (lambda: _weighted(mul(transpose(v, (2, 0, 1)), 1.5)), [v]),
        "reshape": (lambda: _weighted(reshape(v, (6, 4))), [v]),
        "concat": (lambda: _weighted(concat([a, c], axis=-1)), [a, c]),
        "split": (
            lambda: add(_weighted(split(a, 2)[0], 1), _weighted(split(a, 2)[1], 2)),
            [a],
        ),
        "embedding": (lambda: _weighted(embedding_lookup(t, ids)), [t]),
        "gelu": (lambda: _weighted(gelu(a)), [a]),
        "softmax": (lambda: _weighted(softmax_rows(a, mask)), [a]),
        "layer-norm": (lambda: _weighted(layer_norm(a, gain, bias)), [a, gain, bias]),
        "cross-entropy": (
            lambda: cross_entropy_loss(logits, [0, 3, 1, 1, 2]),
            [logits],
        ),
        "kl": (lambda: kl_divergence_rows(Tensor(reference), softmax_rows(a)), [a]),
        "dropout": (
            lambda: _weighted(dropout(a, 0.3, np.random.default_rng(4))),
            [a],
        ),
    }


@pytest.mark.parametrize("case", sorted(_grad_cases()))
def test_gradients(case):
    """Tape gradients shall agree with central finite differences."""
    loss_fn, tensors = _grad_cases()[case]
    check_gradients(loss_fn, tensors)


def test_adam_first_step_sign():
    """The first step from zero moments shall move by lr against the gradient."""
    w = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    grad = np.array([0.3, -4.0, 2.0])
    state = AdamState(learning_rate=0.01, weight_decay=0.0)
    adam_step({"w": w}, {"w": grad}, state)
    assert np.allclose(w.data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-8)
    assert state.step == 1


def test_adam_fixed_point():
    """Zero gradients without weight decay shall leave parameters unchanged."""
    w = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState(weight_decay=0.0)
    for _ in range(3):
        adam_step({"w": w}, {"w": np.zeros(2)}, state)
    assert np.array_equal(w.data, [1.0, -2.0])


def test_adam_zero_learning_rate():
    """A zero learning rate shall leave parameters unchanged, decay included."""
    w = Tensor([1.0, -2.0], requires_grad=True)
    adam_step({"w": w}, {"w": np.array([1.0, 1.0])}, AdamState(), learning_rate=0.0)
    assert np.array_equal(w.data, [1.0, -2.0])
    with pytest.raises(ContractError):
        adam_step({"w": w}, {"w": np.ones(2)}, AdamState(), learning_rate=-1.0)


def test_adam_reference_trajectory():
    """Three steps shall match a scalar reference implementation."""
    lr, b1, b2, eps, decay = 0.05, 0.9, 0.999, 1e-8, 0.01
    grads = [0.5, -1.5, 0.25]
    w = Tensor([2.0], requires_grad=True)
    state = AdamState(learning_rate=lr, weight_decay=decay)

    theta, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        adam_step({"w": w}, {"w": np.array([g])}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
        theta -= lr * (m_hat / (math.sqrt(v_hat) + eps) + decay * theta)
        assert w.data[0] == pytest.approx(theta, abs=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_adam_elementwise(seed):
    """Without weight decay a vector update shall equal per-entry scalar updates."""
    rng = np.random.default_rng(seed)
    start = rng.normal(size=5)
    grads = rng.normal(size=(4, 5))
    vector = Tensor(start.copy(), requires_grad=True)
    vector_state = AdamState(learning_rate=0.01, weight_decay=0.0)
    scalars = [Tensor(start[i : i + 1].copy(), requires_grad=True) for i in range(5)]
    scalar_states = [AdamState(learning_rate=0.01, weight_decay=0.0) for _ in range(5)]
    for grad in grads:
        adam_step({"w": vector}, {"w": grad}, vector_state)
        for i, (scalar, state) in enumerate(zip(scalars, scalar_states)):
            adam_step({"w": scalar}, {"w": grad[i : i + 1]}, state)
    assert np.array_equal(vector.data, np.concatenate([s.data for s in scalars]))
    assert not np.array_equal(vector.data, start)


def test_adam_only_given_parameters():
    """Parameters without a gradient entry shall not move."""
    moved = Tensor([1.0], requires_grad=True)
    frozen = Tensor([1.0], requires_grad=True)
    adam_step({"a": moved, "b": frozen}, {"a": np.array([1.0])}, AdamState())
    assert moved.data[0] != 1.0
    assert frozen.data[0] == 1.0


@pytest.mark.parametrize(
    "step, expected", [(0, 0.0), (5, 0.5), (10, 1.0), (55, 0.5), (100, 0.0)]
)
def test_lr_schedule(step, expected):
    """Warm-up shall be linear over 10% of the steps, then decay linearly to zero."""
    assert lr_schedule(step, 100, 1.0) == pytest.approx(expected)


@pytest.mark.parametrize("step, total", [(0, 0), (-1, 100), (101, 100)])
def test_lr_schedule_contract(step, total):
    """Non-positive totals and steps outside the run shall raise ContractError."""
    with pytest.raises(ContractError):
        lr_schedule(step, total, 1.0)

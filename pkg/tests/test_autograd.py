import numpy as np
import pytest
from hypothesis import given, strategies as st

from csskit import autograd as ag
from csskit.autograd import Adam, Tensor, backward, lr_schedule
from csskit.oracles import finite_diff_grad

from _gradcases import CASES, check


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients_20_seeds(name):
    worst = max(check(name, seed) for seed in range(20))
    assert worst < 1e-4, f"{name}: rel error {worst:.2e}"


def test_sigmoid_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with ag.Tape():
        y = ag.sigmoid(x)
        loss = y.sum()
    backward(loss)
    assert np.all(y.data == 0.5)
    assert np.allclose(x.grad, 0.25)


def test_matmul_identity_and_grad():
    r = np.random.default_rng(0)
    A = r.standard_normal((3, 4))
    B = r.standard_normal((4, 2))
    assert np.array_equal(ag.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)
    a = Tensor(A, requires_grad=True)
    with ag.Tape():
        loss = ag.matmul(a, Tensor(B)).sum()
    backward(loss)
    assert np.allclose(a.grad, np.tile(B.sum(axis=1), (3, 1)))


def test_simple_backward_identities():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ag.Tape():
        loss = x.sum()
    backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    with ag.Tape():
        loss = (x * x).sum()
    backward(loss)
    assert np.array_equal(x.grad, 2 * x.data)


def test_finite_diff_oracle_itself():
    assert np.allclose(finite_diff_grad(lambda x: np.sum(x ** 2), np.array([1.0, 2.0])), [2, 4], atol=1e-6)
    sig = lambda x: np.sum(1 / (1 + np.exp(-x)))
    assert np.allclose(finite_diff_grad(sig, np.zeros(3)), 0.25, atol=1e-6)


def test_leaf_grad_accumulates_and_no_leaks():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    for _ in range(2):
        with ag.Tape():
            loss = (x * c).sum()
        backward(loss)
    assert np.array_equal(x.grad, 2 * np.ones(3))
    assert c.grad is None


def test_intermediates_get_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.Tape():
        h = x * 2.0
        loss = h.sum()
    backward(loss)
    assert h.grad is None


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.Tape():
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(y)
    with ag.Tape():
        loss = y.sum()
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)
    with pytest.raises(RuntimeError):
        backward((x * 2.0).sum())  # no tape
    with pytest.raises(ValueError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ag.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.Tape() as tape:
        with ag.no_grad():
            y = (x * 3.0).sum()
    assert tape.nodes == []
    with pytest.raises(RuntimeError):
        backward(y)


def test_l2_norm_zero_grad():
    x = Tensor(np.zeros(4), requires_grad=True)
    with ag.Tape():
        loss = ag.l2_norm(x)
    backward(loss)
    assert np.array_equal(x.grad, np.zeros(4))


@given(st.integers(0, 10 ** 6))
def test_determinism(seed):
    def run():
        r = np.random.default_rng(seed)
        x = Tensor(r.standard_normal((4, 6)), requires_grad=True)
        w = Tensor(r.standard_normal((6, 3)), requires_grad=True)
        with ag.Tape():
            loss = ag.l2_norm(ag.softmax(ag.swish(x @ w)))
        backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()
    assert run() == run()


def test_lr_schedule():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(1) == pytest.approx(0.99998e-4, rel=1e-12)
    assert lr_schedule(50000) == pytest.approx(3.6788e-5, rel=1e-4)
    with pytest.raises(ValueError):
        lr_schedule(-1)


def test_adam_first_step_and_zero_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.01, abs=1e-9)
    q = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = Adam({"q": q}, lr=0.1, weight_decay=0.0)
    q.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(q.data, [2.0, -1.0])


def test_adam_quadratic_bowl():
    w = Tensor(np.array([0.6, 0.8]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1, weight_decay=0.0)
    values = []
    for _ in range(100):
        with ag.Tape():
            loss = (w * w).sum()
        backward(loss)
        values.append(loss.item())
        opt.step()
        opt.zero_grad()
    assert float(np.sum(w.data ** 2)) < 1e-3
    assert values[-1] < values[0]


def test_adam_state_round_trip_and_missing_grad():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"w": w})
    with pytest.raises(RuntimeError):
        opt.step()
    w.grad = np.ones(3)
    opt.step()
    other = Adam({"w": Tensor(np.ones(3), requires_grad=True)})
    other.load_state_dict(opt.state_dict())
    assert other.t == 1 and np.array_equal(other.m["w"], opt.m["w"])

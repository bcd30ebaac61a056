import numpy as np
import pytest

from amen import autodiff as ad
from amen.autodiff import AdaGrad, Tensor


def fd_check(build, inputs, tol=1e-6):
    """Compare backward() against central differences for every input tensor."""
    out = build()
    for t in inputs:
        t.grad = None
    out.backward()
    for t in inputs:
        numeric = ad.numerical_gradient(lambda: build().item(), t)
        assert ad.relative_error(t.grad, numeric) < tol, t


def test_matmul_identity():
    rng = np.random.default_rng(0)
    b = rng.normal(size=(2, 2))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_hand_value():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    fd_check(lambda: (a @ b).sum(), [a, b])


def test_batched_matmul_gradient_with_shared_weight():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = rng.normal(size=(3, 5, 2))
    fd_check(lambda: ((a @ w) * c).sum(), [a, w])


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    c = rng.normal(size=(2, 5))
    fd_check(lambda: (ad.softmax(x, axis=1) * c).sum(), [x])


def test_masked_softmax_all_masked_row_is_zero():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.masked_softmax(x, np.array([[True, False], [False, False]])).data
    assert out.tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_masked_softmax_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    mask = np.array([[1, 1, 0, 1], [0, 0, 0, 0], [1, 0, 0, 0]], bool)
    c = rng.normal(size=(3, 4))
    fd_check(lambda: (ad.masked_softmax(x, mask) * c).sum(), [x])


def test_elementwise_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    out = ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 5)))], axis=-1)
    assert out.shape == (2, 8)


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([-2.0]))


def test_composite_sigmoid_gradient():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3,)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    c = Tensor(rng.normal(size=(3,)), requires_grad=True)
    fd_check(lambda: ad.sigmoid(a * b + c).sum(), [a, b, c])


@pytest.mark.parametrize("seed", range(20))
def test_elementwise_suite_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    z = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    # keep relu/abs away from their kinks
    x.data[np.abs(x.data) < 1e-3] += 0.01

    def build():
        h = ad.concat([ad.relu(x) * y, z], axis=1)
        p = ad.log(ad.sigmoid(h) + 0.5) + ad.tabs(x).sum() * 0.3
        return (ad.log_sigmoid(p) - p * y.sum()).sum()

    fd_check(build, [x, y, z], tol=1e-4)


def test_gather_accumulates_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.gather(table, np.array([[0, 2], [2, 2]]))
    out.sum().backward()
    assert table.grad.tolist() == [[1, 1], [0, 0], [3, 3]]


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather(Tensor(np.zeros((3, 2))), np.array([3]))


def test_parameter_used_once_or_never():
    used = Tensor([2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    (used * 3.0).sum().backward()
    assert used.grad.tolist() == [3.0]
    assert unused.grad is None
    # a second backward accumulates into leaves
    (used * 3.0).sum().backward()
    assert used.grad.tolist() == [6.0]


def test_tape_visits_consumers_first():
    a = Tensor(1.0, requires_grad=True)
    b = a * 2.0
    c = b + a
    d = c * b
    tape = ad.build_tape(d)
    pos = {id(t): i for i, t in enumerate(tape)}
    for node in tape:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]


def test_adagrad_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdaGrad({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2)})
    assert p.data.tolist() == [1.0, -2.0]


def test_adagrad_hand_recurrence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdaGrad({"p": p}, lr=0.1, eps=0.0)
    opt.step({"p": np.array([3.0])})
    assert p.data[0] == pytest.approx(-0.1, abs=1e-15)
    opt.step({"p": np.array([4.0])})
    assert p.data[0] == pytest.approx(-0.1 - 0.08, abs=1e-15)
    assert opt.accumulators["p"][0] == 25.0


def test_adagrad_step_size_non_increasing():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = AdaGrad({"p": p}, lr=0.5)
    prev = None
    steps = []
    for _ in range(6):
        before = p.data.copy()
        opt.step({"p": np.array([1.0, -2.0])})
        steps.append(np.abs(p.data - before))
    for a, b in zip(steps, steps[1:]):
        assert np.all(b <= a)
        assert np.all(opt.accumulators["p"] >= 0)
    del prev


def test_adagrad_decay_hook():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdaGrad({"p": p}, lr=1.0, eps=0.0, decay=0.5)
    opt.step({"p": np.array([1.0])})
    opt.step({"p": np.array([0.0])})
    assert opt.current_lr() == 0.25


def test_adagrad_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ad.DimensionError):
        AdaGrad({"p": p}).step({"p": np.zeros(3)})

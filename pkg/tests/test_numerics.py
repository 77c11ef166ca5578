import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmvim import numerics as nx
from cmvim.numerics import BACKWARD_RULES, ContractError, DimensionError, Tape, Tensor
from cmvim.selftest import _op_cases, check_op

OP_CASES = _op_cases(np.random.default_rng(0))


@pytest.mark.parametrize("case", OP_CASES, ids=[c.name for c in OP_CASES])
def test_backward_rule_matches_finite_differences(case):
    assert check_op(case, np.random.default_rng(1)) <= 1e-6


def test_every_registered_rule_has_a_gradient_case():
    covered = {c.name.split("[")[0] for c in OP_CASES}
    assert set(BACKWARD_RULES) <= covered


def test_forward_values_against_numpy():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    assert np.allclose(nx.matmul(Tensor(a), Tensor(b)).data, a @ b)
    assert np.allclose(nx.softplus(Tensor(a)).data, np.log1p(np.exp(a)))
    assert np.allclose(nx.silu(Tensor(a)).data, a / (1 + np.exp(-a)))
    ln = nx.layer_norm(Tensor(a), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.allclose(ln, (a - a.mean(1, keepdims=True)) / np.sqrt(a.var(1, keepdims=True) + 1e-5))


def test_causal_conv_matches_direct_sum():
    rng = np.random.default_rng(3)
    x, w, bias = rng.normal(size=(2, 7, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)
    out = nx.causal_conv1d(Tensor(x), Tensor(w), Tensor(bias)).data
    ref = np.zeros_like(x)
    for t in range(7):
        for k in range(4):
            src = t - (3 - k)
            if src >= 0:
                ref[:, t] += x[:, src] * w[:, k]
    assert np.allclose(out, ref + bias)


def test_softplus_is_stable_for_large_inputs():
    out = nx.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert np.all(np.isfinite(out)) and out[2] == 800.0 and out[0] >= 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(Tensor(x), axis=-1).data
    assert np.allclose(p.sum(-1), 1.0) and np.all(p >= 0)
    assert np.allclose(nx.log_softmax(Tensor(x), axis=-1).data, np.log(np.maximum(p, 1e-300)), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-10, 10)))
def test_l2_normalize_gives_unit_rows(x):
    x = x + np.arange(8)  # keep rows away from zero
    assert np.allclose(np.linalg.norm(nx.l2_normalize(Tensor(x)).data, axis=-1), 1.0)


def test_broadcast_gradients_sum_back():
    a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.ones((3, 1)), requires_grad=True)
    nx.sum(nx.mul(a, b)).backward()
    assert b.grad.shape == (3, 1) and np.all(b.grad == 8.0)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nx.sum(nx.mul(x, x)).backward()
    nx.sum(nx.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * 2 * x.data)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = nx.mul(x, x)
    z = nx.add(y, y)  # dz/dx = 4x
    tape = Tape.from_output(z)
    assert tape.ops.count("mul") == 1
    z.backward()
    assert float(x.grad) == 12.0


def test_backward_contract():
    with pytest.raises(ContractError):
        nx.sum(Tensor(np.ones(3))).backward()  # does not require grad
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()  # not a scalar


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad and nx.grad_enabled()


def test_matmul_dimension_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_gather_bounds_and_duplicates():
    x = Tensor(np.arange(5.0), requires_grad=True)
    with pytest.raises(IndexError):
        nx.gather(x, np.array([5]))
    nx.sum(nx.gather(x, np.array([1, 1, 4]))).backward()
    assert x.grad.tolist() == [0, 2, 0, 0, 1]


def test_detach_cuts_the_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    y = nx.add(nx.mul(x, 3.0).detach(), x)
    nx.sum(y).backward()
    assert np.all(x.grad == 1.0)


def test_perturbed_rule_is_caught_by_name(monkeypatch):
    original = BACKWARD_RULES["exp"]
    monkeypatch.setitem(BACKWARD_RULES, "exp", lambda ctx, inputs, g: tuple(1.01 * a for a in original(ctx, inputs, g)))
    case = next(c for c in OP_CASES if c.name == "exp")
    assert check_op(case, np.random.default_rng(1)) > 1e-3

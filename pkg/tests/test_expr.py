import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conjpt import expr as ex
from conjpt.tape import compile_tape


def test_parse_power_sum():
    e = ex.parse("z1^2 + z2", ["z1", "z2"])
    assert e.kind == "add"
    assert e.children[0].kind == "pow"
    assert e.children[0].exponent == 2
    assert e.children[1] == ex.variable(1)


def test_parse_function_call():
    e = ex.parse("sin(z1*z2)", ["z1", "z2"])
    assert e.kind == "sin"
    assert e.children[0].kind == "mul"


def test_parse_error_offset():
    with pytest.raises(ex.ExprSyntaxError) as err:
        ex.parse("z1 +", ["z1"])
    assert err.value.offset == 4


def test_unknown_identifier():
    with pytest.raises(ex.ExprSyntaxError) as err:
        ex.parse("z1 + q", ["z1"])
    assert "q" in str(err.value)
    assert err.value.offset == 5


def test_non_integer_exponent():
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse("z1^2.5", ["z1"])
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse("z1^-1", ["z1"])
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse("z1^z1", ["z1"])


def test_precedence():
    # ^ binds tighter than unary minus, which binds tighter than * /
    vals = {"-z1^2": -4.0, "2*-z1": -4.0, "-z1*z1": -4.0, "6/2/3": 1.0,
            "1 - 2 - 3": -4.0, "2^3": 8.0}
    for text, want in vals.items():
        e = ex.parse(text, ["z1"])
        assert ex.evaluate(e, [2.0]) == want, text


def test_differentiate_power_rule():
    e = ex.parse("z1^3", ["z1"])
    d = ex.differentiate(e, 0)
    for x in (0.0, 1.3, -2.0):
        assert ex.evaluate(d, [x]) == pytest.approx(3 * x * x, rel=1e-14)


def test_differentiate_chain_rule():
    e = ex.parse("sin(z1*z2)", ["z1", "z2"])
    d = ex.differentiate(e, 0)
    x = (0.3, 0.7)
    assert ex.evaluate(d, x) == pytest.approx(0.7 * math.cos(0.21), rel=1e-14)


def test_differentiate_independence():
    e = ex.parse("z1", ["z1", "z2"])
    assert ex.differentiate(e, 1) == ex.constant(0.0)


def test_evaluate_examples():
    assert ex.evaluate(ex.parse("z1^2+z2", ["z1", "z2"]), (2, 1)) == 5.0
    assert ex.evaluate(ex.parse("exp(0*z1)", ["z1"]), (7,)) == 1.0


def test_domain_errors():
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(ex.parse("log(z1)", ["z1"]), [-1.0])
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(ex.parse("log(z1)", ["z1"]), [0.0])
    with pytest.raises(ex.ExprDomainError):
        ex.evaluate(ex.parse("1/z1", ["z1"]), [0.0])


def _fd_derivative(e, i, x, h=1e-5):
    # 4th-order central stencil, one Richardson halving
    def stencil(s):
        xp = list(x)
        vals = []
        for off in (2 * s, s, -s, -2 * s):
            xp[i] = x[i] + off
            vals.append(ex.evaluate(e, xp))
        return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * s)

    a, b = stencil(h), stencil(h / 2)
    return (16 * b - a) / 15


_SAFE_EXPRS = [
    "z1^2 + z2",
    "sin(z1*z2)",
    "cos(z1) + 0.5*sin(z1+z2)",
    "exp(z1/4)*cos(z2)",
    "z1^3 - z2^4/24 + z1*z2",
    "log(2 + z1^2 + z2^2)",
    "(z1 - z2)^5/120",
    "1/(4 + z1^2)",
    "-(z1^2)/2 + z1^3/6",
    "sin(cos(z1) + z2)",
]


@pytest.mark.parametrize("text", _SAFE_EXPRS)
@settings(max_examples=20, deadline=None, derandomize=True)
@given(data=st.data())
def test_derivative_matches_finite_difference(text, data):
    e = ex.parse(text, ["z1", "z2"])
    x = [data.draw(st.floats(-2.0, 2.0)), data.draw(st.floats(-2.0, 2.0))]
    for i in range(2):
        d = ex.differentiate(e, i)
        exact = ex.evaluate(d, x)
        fd = _fd_derivative(e, i, x)
        scale = max(1.0, abs(exact), abs(fd))
        assert abs(exact - fd) / scale < 1e-7, (text, i, x)


def test_example_fd_tolerance():
    e = ex.parse("sin(z1*z2)", ["z1", "z2"])
    d = ex.differentiate(e, 0)
    x = [0.3, 0.7]
    assert abs(ex.evaluate(d, x) - _fd_derivative(e, 0, x)) < 1e-8


@pytest.mark.parametrize("text", _SAFE_EXPRS)
def test_mixed_partials_commute(text):
    e = ex.parse(text, ["z1", "z2"])
    d01 = ex.differentiate(ex.differentiate(e, 0), 1)
    d10 = ex.differentiate(ex.differentiate(e, 1), 0)
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.uniform(-2, 2, 2)
        a, b = ex.evaluate(d01, x), ex.evaluate(d10, x)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


@pytest.mark.parametrize("text", _SAFE_EXPRS)
def test_round_trip(text):
    e = ex.parse(text, ["z1", "z2"])
    for order in range(3):  # include derivative trees in the round trip
        back = ex.parse(ex.to_string(e), [f"x{i}" for i in (1, 2)])
        rng = np.random.default_rng(11)
        for _ in range(8):
            x = rng.uniform(-2, 2, 2)
            assert ex.evaluate(back, x) == ex.evaluate(e, x)
        e = ex.differentiate(e, order % 2)


def test_fourth_derivative_closed_form():
    e = ex.parse("sin(z1)", ["z1"])
    d4 = e
    for _ in range(4):
        d4 = ex.differentiate(d4, 0)
    for x in np.linspace(-3, 3, 7):
        assert ex.evaluate(d4, [x]) == pytest.approx(math.sin(x), abs=1e-14)


def test_empty_and_whitespace():
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse("", ["z1"])
    e = ex.parse("  z1   +  1 ", ["z1"])
    assert ex.evaluate(e, [2.0]) == 3.0


def test_tape_matches_evaluate():
    exprs = [ex.parse(t, ["z1", "z2"]) for t in _SAFE_EXPRS]
    exprs += [ex.differentiate(e, i) for e in exprs for i in range(2)]
    tape = compile_tape(exprs, 2)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-2, 2, 2)
        got = tape.eval_floats(x)
        want = [ex.evaluate(e, x) for e in exprs]
        np.testing.assert_allclose(got, want, rtol=0, atol=0)
    X = rng.uniform(-2, 2, (40, 2))
    batch = tape.eval_batch(X)
    for k, x in enumerate(X):
        np.testing.assert_allclose(batch[k], [ex.evaluate(e, x) for e in exprs],
                                   rtol=1e-15, atol=1e-300)


def test_tape_power_lowering():
    e = ex.parse("z1^13", ["z1"])
    tape = compile_tape([e], 1)
    assert tape.eval_floats([1.5])[0] == pytest.approx(1.5**13, rel=1e-15)

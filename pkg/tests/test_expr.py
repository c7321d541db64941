import numpy as np
import pytest

from fbsde_lab.expr import ExpressionError, parse_expression


def test_evaluates_elementwise():
    e = parse_expression("-2*y + sin(y)")
    y = np.array([0.0, 1.0, -3.0])
    np.testing.assert_allclose(e(y=y), -2 * y + np.sin(y))
    assert e.names == {"y"} and not e.is_constant


def test_power_and_functions():
    e = parse_expression("x^2 + exp(-t) * abs(cos(x))")
    np.testing.assert_allclose(e(x=np.array([2.0]), t=np.array([1.0])), 4 + np.exp(-1) * abs(np.cos(2)))
    assert parse_expression("2^3^2")() == 2.0**9  # right associative, like **


def test_numbers_are_constant_expressions():
    e = parse_expression(3)
    assert e.is_constant and e() == 3.0
    assert parse_expression("1.5e-1")() == pytest.approx(0.15)


@pytest.mark.parametrize(
    "src,pos",
    [
        ("x + foo", 4),
        ("sqrt(x)", 0),
        ("x ^ ", None),
        ("  y + q", 6),
        ("x ^ 2 + w", 8),
    ],
)
def test_error_positions(src, pos):
    with pytest.raises(ExpressionError) as info:
        parse_expression(src)
    if pos is not None:
        assert info.value.position == pos
        assert "^" in str(info.value)


@pytest.mark.parametrize(
    "src",
    ["x.real", "x[0]", "__import__('os')", "x if x else y", "lambda: 1", "x % 2", "x == y", "sin(x, y)",
     "'a'", "True", "exp(x=1)", ""],
)
def test_disallowed_constructs(src):
    with pytest.raises(ExpressionError):
        parse_expression(src)


def test_missing_variable_and_bad_type():
    with pytest.raises(ExpressionError, match="missing"):
        parse_expression("x + y")(x=1.0)
    with pytest.raises(ExpressionError):
        parse_expression([1, 2])
    with pytest.raises(ExpressionError):
        parse_expression(True)

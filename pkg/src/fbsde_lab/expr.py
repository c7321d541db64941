"""A small arithmetic expression language for scenario coefficients.

Identifiers: ``t, x, y, z, r, f, regime``.  Operators: ``+ - * / ^``
(``^`` is power).  Functions: ``sin, cos, exp, abs``.  Numbers are decimal
literals.  Expressions are parsed with :mod:`ast`, checked against this
whitelist and evaluated elementwise with numpy.

``z`` and ``f`` denote the first component of the corresponding vector.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np

__all__ = ["ExpressionError", "Expression", "parse_expression", "VARIABLES", "FUNCTIONS"]

VARIABLES = ("t", "x", "y", "z", "r", "f", "regime")
FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_UNOPS = (ast.UAdd, ast.USub)


class ExpressionError(ValueError):
    """Parse or validation failure; ``position`` is the 0-based column in the source."""

    def __init__(self, message: str, source: str, position: int | None):
        self.source = source
        self.position = position
        where = ""
        if position is not None:
            where = f" at position {position}\n  {source}\n  {' ' * position}^"
        super().__init__(f"{message}{where}")


def _original_offset(source: str, col: int) -> int:
    """Map a column in the ``^ -> **`` rewritten string back to ``source``."""
    shift = 0
    pos = 0
    for ch in source:
        if pos + shift >= col:
            break
        if ch == "^":
            shift += 1
        pos += 1
    return pos


def _check(node: ast.AST, source: str) -> set:
    names: set = set()

    def fail(msg, n):
        col = getattr(n, "col_offset", None)
        raise ExpressionError(msg, source, None if col is None else _original_offset(source, col))

    def visit(n):
        if isinstance(n, ast.Expression):
            visit(n.body)
        elif isinstance(n, ast.BinOp):
            if not isinstance(n.op, _BINOPS):
                fail(f"operator {type(n.op).__name__} is not allowed", n)
            visit(n.left)
            visit(n.right)
        elif isinstance(n, ast.UnaryOp):
            if not isinstance(n.op, _UNOPS):
                fail(f"operator {type(n.op).__name__} is not allowed", n)
            visit(n.operand)
        elif isinstance(n, ast.Call):
            if not isinstance(n.func, ast.Name) or n.func.id not in FUNCTIONS:
                fail("unknown function", n)
            if len(n.args) != 1 or n.keywords:
                fail(f"{n.func.id} takes exactly one argument", n)
            visit(n.args[0])
        elif isinstance(n, ast.Name):
            if n.id not in VARIABLES:
                fail(f"unknown identifier {n.id!r}", n)
            names.add(n.id)
        elif isinstance(n, ast.Constant):
            if not isinstance(n.value, (int, float)) or isinstance(n.value, bool):
                fail("only numeric literals are allowed", n)
        else:
            fail(f"{type(n).__name__} is not allowed", n)

    visit(node)
    return names


@dataclass(frozen=True)
class Expression:
    """A validated expression; call it with keyword arrays for the variables it uses."""

    source: str
    names: frozenset
    _code: object

    def __call__(self, **env) -> np.ndarray:
        missing = self.names - env.keys()
        if missing:
            raise ExpressionError(f"missing values for {sorted(missing)}", self.source, None)
        scope = {**FUNCTIONS, **{k: env[k] for k in self.names}}
        return np.asarray(eval(self._code, {"__builtins__": {}}, scope), dtype=float)  # noqa: S307

    @property
    def is_constant(self) -> bool:
        return not self.names

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


def parse_expression(source) -> Expression:
    """Parse ``source`` (a string or a number) into an :class:`Expression`."""
    if isinstance(source, bool):
        raise ExpressionError("booleans are not expressions", str(source), None)
    if isinstance(source, (int, float)):
        source = repr(float(source))
    if not isinstance(source, str):
        raise ExpressionError(f"expected a string or number, got {type(source).__name__}", str(source), None)
    if not source.strip():
        raise ExpressionError("empty expression", source, 0)
    rewritten = source.replace("^", "**")
    try:
        tree = ast.parse(rewritten.strip(), mode="eval")
    except SyntaxError as exc:
        lead = len(rewritten) - len(rewritten.lstrip())
        col = (exc.offset or 1) - 1 + lead
        raise ExpressionError(f"syntax error: {exc.msg}", source, _original_offset(source, col)) from None
    if lead := len(rewritten) - len(rewritten.lstrip()):
        for n in ast.walk(tree):
            if hasattr(n, "col_offset"):
                n.col_offset += lead
    names = _check(tree, source)
    return Expression(source=source, names=frozenset(names), _code=compile(tree, "<expression>", "eval"))

"""Right-hand sides: named presets and a small arithmetic expression language.

Expressions use ``x1``, ``x2``, numbers, ``pi``, ``+ - * /``, ``^`` (or ``**``)
for powers and the functions ``sin`` and ``cos``.
"""

from __future__ import annotations

import ast
import operator
from typing import Callable

import numpy as np

from ..errors import ConfigError

PRESETS = {
    "const_minus_one": "-1",
    "poly_x1p4_x2p3": "x1^4 - x2^3 + 1",
    "zero": "0",
}

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"sin": np.sin, "cos": np.cos}
_NAMES = {"pi": np.pi}


def _compile(node):
    if isinstance(node, ast.Expression):
        return _compile(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        value = float(node.value)
        return lambda x1, x2: value
    if isinstance(node, ast.Name):
        if node.id == "x1":
            return lambda x1, x2: x1
        if node.id == "x2":
            return lambda x1, x2: x2
        if node.id in _NAMES:
            value = _NAMES[node.id]
            return lambda x1, x2: value
        raise ConfigError(f"unknown name {node.id!r} in right-hand side")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op, left, right = _BINOPS[type(node.op)], _compile(node.left), _compile(node.right)
        return lambda x1, x2: op(left(x1, x2), right(x1, x2))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        op, arg = _UNARY[type(node.op)], _compile(node.operand)
        return lambda x1, x2: op(arg(x1, x2))
    if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
        fn, arg = _FUNCS[node.func.id], _compile(node.args[0])
        return lambda x1, x2: fn(arg(x1, x2))
    raise ConfigError(f"unsupported syntax in right-hand side: {ast.dump(node)[:60]}")


def parse_expression(text: str) -> Callable:
    """Compile an expression into a vectorized ``f(x1, x2)``."""
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse right-hand side {text!r}: {exc.msg}") from exc
    body = _compile(tree)

    def f(x1, x2):
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        return np.broadcast_to(np.asarray(body(x1, x2), dtype=np.float64),
                               np.broadcast(x1, x2).shape)

    f.expression = text
    return f


def resolve_rhs(source) -> tuple[Callable, str]:
    """Preset name, expression string or ``{"expression": ...}`` -> (callable, canonical text)."""
    if isinstance(source, dict):
        if "expression" not in source:
            raise ConfigError("rhs mapping needs an 'expression' key")
        source = source["expression"]
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        source = repr(float(source))
    if not isinstance(source, str):
        raise ConfigError(f"invalid right-hand side {source!r}")
    text = PRESETS.get(source, source)
    return parse_expression(text), text


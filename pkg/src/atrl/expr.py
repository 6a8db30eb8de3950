"""Closed-form scalar expressions stored as text and evaluated with numpy.

Only arithmetic, numeric constants, named variables and a fixed set of
functions are accepted, so a spec file can never execute arbitrary code.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "sigmoid": _sigmoid,
    "max": np.maximum,
    "min": np.minimum,
}
CONSTANTS = {"pi": np.pi, "e": np.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class Expr:
    text: str
    _tree: ast.AST = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        try:
            tree = ast.parse(self.text.replace("^", "**"), mode="eval").body
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.text!r}: {exc.msg}") from None
        _validate(tree, self.text)
        object.__setattr__(self, "_tree", tree)

    @property
    def variables(self) -> set[str]:
        return {n.id for n in ast.walk(self._tree) if isinstance(n, ast.Name) and n.id not in CONSTANTS and n.id not in FUNCTIONS}

    def __call__(self, **env) -> np.ndarray:
        missing = self.variables - set(env)
        if missing:
            raise ExpressionError(f"{self.text!r} needs variables {sorted(missing)}")
        with np.errstate(all="ignore"):
            return np.asarray(_eval(self._tree, env), dtype=float)

    def __str__(self) -> str:
        return self.text


def _validate(node: ast.AST, text: str) -> None:
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {text!r}")
        _validate(node.left, text)
        _validate(node.right, text)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError(f"unary {type(node.op).__name__} not allowed in {text!r}")
        _validate(node.operand, text)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS or node.keywords:
            raise ExpressionError(f"only calls to {sorted(FUNCTIONS)} are allowed in {text!r}")
        for a in node.args:
            _validate(a, text)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"constant {node.value!r} not allowed in {text!r}")
    elif isinstance(node, ast.Name):
        if node.id in FUNCTIONS:
            raise ExpressionError(f"function {node.id} used as a variable in {text!r}")
    else:
        raise ExpressionError(f"{type(node).__name__} not allowed in {text!r}")


def _eval(node, env):
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        return FUNCTIONS[node.func.id](*(_eval(a, env) for a in node.args))
    if isinstance(node, ast.Constant):
        return float(node.value)
    if node.id in CONSTANTS:
        return CONSTANTS[node.id]
    return env[node.id]

"""Safe evaluation of scalar field expressions over coordinate arrays.

Scenario files specify potentials and field profiles as plain math
expressions ("0.5*x**2", "2.0*cos(z)").  Only arithmetic, a whitelist of
numpy functions, and the declared coordinate names are allowed.
"""

from __future__ import annotations

import ast

import numpy as np

_ALLOWED_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
    "arctan": np.arctan,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "where": np.where,
    "heaviside": np.heaviside,
}

_ALLOWED_CONSTS = {"pi": np.pi, "e": np.e}

_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.Mod,
    ast.USub,
    ast.UAdd,
    ast.Compare,
    ast.Lt,
    ast.Gt,
    ast.LtE,
    ast.GtE,
    ast.Tuple,
)


class ExpressionError(ValueError):
    """Raised when a scenario expression fails validation or evaluation."""


def compile_expression(source: str, coordinate_names: tuple[str, ...]):
    """Compile ``source`` into ``f(**coords) -> ndarray``.

    Coordinate arrays are broadcast by the caller; the expression may use
    any of `coordinate_names`, whitelisted numpy functions, pi and e.
    """
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"syntax error in expression {source!r}: {exc.msg}") from exc

    names = set(coordinate_names)
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ExpressionError(
                f"disallowed construct {type(node).__name__!r} in expression {source!r}"
            )
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_FUNCS:
                raise ExpressionError(f"disallowed function call in expression {source!r}")
            if node.keywords:
                raise ExpressionError(f"keyword arguments not allowed in expression {source!r}")
        if isinstance(node, ast.Name):
            if node.id not in names and node.id not in _ALLOWED_FUNCS and node.id not in _ALLOWED_CONSTS:
                raise ExpressionError(f"unknown name {node.id!r} in expression {source!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant in expression {source!r}")

    code = compile(tree, "<scenario-expression>", "eval")
    env = dict(_ALLOWED_FUNCS)
    env.update(_ALLOWED_CONSTS)

    def evaluate(**coords):
        scope = dict(env)
        scope.update(coords)
        out = eval(code, {"__builtins__": {}}, scope)  # noqa: S307  validated AST above
        return np.asarray(out, dtype=float)

    evaluate.source = source
    return evaluate


def evaluate_on_grid(source: str, grids: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate an expression on meshgrid arrays, broadcasting constants."""
    fn = compile_expression(source, tuple(grids))
    out = fn(**grids)
    shape = np.broadcast_shapes(*(g.shape for g in grids.values()))
    return np.broadcast_to(out, shape).copy() if out.shape != shape else out

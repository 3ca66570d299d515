"""Restricted arithmetic expressions for map definitions in config files.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = factor { ("*" | "/") factor } ;
    factor  = ("+" | "-") factor | power ;
    power   = atom [ ("**" | "^") factor ] ;
    atom    = number | name | call | "(" expr ")" ;
    call    = ("sin" | "cos" | "exp") "(" expr ")" ;
    name    = "p" | "p" digit+ | "x" | "x" digit+ | "a" digit+ | "pi" ;

Exponents must reduce to an integer constant.  ``p`` is an alias of ``p1``
and ``x`` of ``x1``.  ``aK`` is the letter at position ``K`` of the fiber
address.  Text is parsed with :mod:`ast` and every node is checked against a
whitelist, so nothing is ever executed.

Parsed expressions evaluate on anything supporting ``+ - * /`` and integer
powers: numpy arrays, mpmath numbers, and :class:`~blenderlab.taylor.TaylorSeries`.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError

_NAME = re.compile(r"^(p|x)(\d*)$|^a(\d+)$|^pi$")
_FUNCS = ("sin", "cos", "exp")


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple = ()
    value: object = None

    def __repr__(self):
        return to_text(self)


def num(v) -> Node:
    return Node("num", (), float(v))


ZERO = num(0.0)
ONE = num(1.0)


def _canon_name(name: str) -> str:
    m = _NAME.match(name)
    if not m:
        raise ConfigError(f"unknown name {name!r} in expression")
    if m.group(1):
        idx = m.group(2) or "1"
        if int(idx) < 1:
            raise ConfigError(f"variable indices start at 1: {name!r}")
        return f"{m.group(1)}{int(idx)}"
    return name


def _convert(node) -> Node:
    if isinstance(node, ast.Expression):
        return _convert(node.body)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ConfigError(f"unsupported constant {node.value!r}")
        return num(node.value)
    if isinstance(node, ast.Name):
        name = _canon_name(node.id)
        if name == "pi":
            return num(math.pi)
        return Node("var", (), name)
    if isinstance(node, ast.UnaryOp):
        arg = _convert(node.operand)
        if isinstance(node.op, ast.UAdd):
            return arg
        if isinstance(node.op, ast.USub):
            return Node("neg", (arg,))
    if isinstance(node, ast.BinOp):
        left, right = _convert(node.left), _convert(node.right)
        ops = {ast.Add: "add", ast.Sub: "sub", ast.Mult: "mul", ast.Div: "div"}
        for cls, name in ops.items():
            if isinstance(node.op, cls):
                return Node(name, (left, right))
        if isinstance(node.op, ast.Pow):
            exponent = _constant_value(right)
            if exponent is None or exponent != int(exponent):
                raise ConfigError("exponents must be integer constants")
            return Node("pow", (left,), int(exponent))
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ConfigError("only sin, cos and exp may be called")
        if len(node.args) != 1 or node.keywords:
            raise ConfigError(f"{node.func.id} takes exactly one argument")
        return Node(node.func.id, (_convert(node.args[0]),))
    raise ConfigError(f"unsupported syntax: {ast.dump(node)[:60]}")


def _constant_value(node: Node):
    if node.op == "num":
        return node.value
    if node.op == "neg":
        v = _constant_value(node.args[0])
        return None if v is None else -v
    return None


def parse(text: str) -> "Expression":
    """Parse ``text`` into an :class:`Expression`; raises ConfigError on bad input."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError("empty expression")
    try:
        # "^" is XOR to Python and binds too loosely, so spell it as a power first
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None
    return Expression(_convert(tree), text.strip())


# numpy-style function table; other backends pass their own
NUMPY_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}


def evaluate(node: Node, env: dict, funcs=None):
    funcs = NUMPY_FUNCS if funcs is None else funcs
    op = node.op
    if op == "num":
        return node.value
    if op == "var":
        try:
            return env[node.value]
        except KeyError:
            raise ConfigError(f"variable {node.value!r} not bound") from None
    if op == "neg":
        return -evaluate(node.args[0], env, funcs)
    if op in ("add", "sub", "mul", "div"):
        a = evaluate(node.args[0], env, funcs)
        b = evaluate(node.args[1], env, funcs)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        return a / b
    if op == "pow":
        base = evaluate(node.args[0], env, funcs)
        k = node.value
        if k >= 0:
            return base**k
        return 1.0 / base ** (-k)
    return funcs[op](evaluate(node.args[0], env, funcs))


def _is_num(node, v=None):
    return node.op == "num" and (v is None or node.value == v)


def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return num(a.value + b.value)
    return Node("add", (a, b))


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return _neg(b)
    if _is_num(a) and _is_num(b):
        return num(a.value - b.value)
    return Node("sub", (a, b))


def _neg(a):
    if _is_num(a):
        return num(-a.value)
    return Node("neg", (a,))


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return ZERO
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return num(a.value * b.value)
    return Node("mul", (a, b))


def _div(a, b):
    if _is_num(a, 0.0):
        return ZERO
    if _is_num(b, 1.0):
        return a
    return Node("div", (a, b))


def _pow(a, k):
    if k == 0:
        return ONE
    if k == 1:
        return a
    return Node("pow", (a,), k)


def derivative(node: Node, var: str) -> Node:
    """Symbolic partial derivative with light constant folding."""
    op = node.op
    if op == "num":
        return ZERO
    if op == "var":
        return ONE if node.value == var else ZERO
    if op == "neg":
        return _neg(derivative(node.args[0], var))
    if op in ("add", "sub"):
        da, db = derivative(node.args[0], var), derivative(node.args[1], var)
        return _add(da, db) if op == "add" else _sub(da, db)
    if op == "mul":
        a, b = node.args
        return _add(_mul(derivative(a, var), b), _mul(a, derivative(b, var)))
    if op == "div":
        a, b = node.args
        num_ = _sub(_mul(derivative(a, var), b), _mul(a, derivative(b, var)))
        return _div(num_, _pow(b, 2))
    if op == "pow":
        (a,) = node.args
        k = node.value
        return _mul(_mul(num(k), _pow(a, k - 1)), derivative(a, var))
    (a,) = node.args
    da = derivative(a, var)
    if op == "sin":
        outer = Node("cos", (a,))
    elif op == "cos":
        outer = _neg(Node("sin", (a,)))
    else:
        outer = node
    return _mul(outer, da)


def variables(node: Node) -> frozenset:
    if node.op == "var":
        return frozenset([node.value])
    out = frozenset()
    for a in node.args:
        out |= variables(a)
    return out


def to_text(node: Node) -> str:
    op = node.op
    if op == "num":
        return repr(node.value)
    if op == "var":
        return node.value
    if op == "neg":
        return f"(-{to_text(node.args[0])})"
    sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
    if op in sym:
        return f"({to_text(node.args[0])} {sym[op]} {to_text(node.args[1])})"
    if op == "pow":
        return f"({to_text(node.args[0])} ** {node.value})"
    return f"{op}({to_text(node.args[0])})"


@dataclass(frozen=True)
class Expression:
    """A parsed expression together with its source text."""

    root: Node
    text: str = ""

    def __call__(self, funcs=None, **env):
        return evaluate(self.root, env, funcs)

    def evaluate(self, env: dict, funcs=None):
        return evaluate(self.root, env, funcs)

    def diff(self, var: str) -> "Expression":
        var = _canon_name(var)
        return Expression(derivative(self.root, var), "")

    @cached_property
    def variables(self) -> frozenset:
        return variables(self.root)

    def depends_on(self, prefix: str) -> bool:
        return any(v.startswith(prefix) for v in self.variables)

    def max_index(self, prefix: str) -> int:
        idx = [int(v[len(prefix):]) for v in self.variables if v.startswith(prefix)]
        return max(idx, default=0)

    def __str__(self):
        return self.text or to_text(self.root)

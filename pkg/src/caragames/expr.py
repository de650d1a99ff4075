"""Tiny arithmetic expression parser for user-supplied coefficient functions.

Config files describe market coefficients as strings such as
``"0.5 * sqrt(y)"`` or ``"0.2 + 0.1*exp(-t)"``.  The grammar is limited to

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

with functions ``sqrt, exp, log, pow`` and whatever variable names the
caller declares (``t, y`` for factor models, ``t, S`` for stock models).
Expressions are compiled once into closures that evaluate on numpy arrays;
no Python ``eval`` is involved.
"""

from __future__ import annotations

import re
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

_FUNCTIONS = {
    "sqrt": (np.sqrt, 1),
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "pow": (np.power, 2),
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ConfigError(f"unexpected character {text[pos]!r} in expression {text!r}")
        pos = m.end()
        for kind in ("num", "name", "op"):
            val = m.group(kind)
            if val is not None:
                tokens.append((kind, val))
                break
    tokens.append(("end", ""))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.variables = tuple(variables)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, expected: str | None = None):
        kind, val = self.tokens[self.i]
        if expected is not None and val != expected:
            raise ConfigError(
                f"expected {expected!r} but found {val or 'end of input'!r} in {self.text!r}"
            )
        self.i += 1
        return kind, val

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ConfigError(f"trailing input {self.peek()[1]!r} in {self.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return ("pow", base, self.unary())
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return ("const", float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in _FUNCTIONS:
                    raise ConfigError(f"unknown function {val!r} in {self.text!r}")
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.expr())
                self.take(")")
                _, arity = _FUNCTIONS[val]
                if len(args) != arity:
                    raise ConfigError(
                        f"function {val!r} takes {arity} argument(s), got {len(args)}"
                    )
                return ("call", val, args)
            if val not in self.variables:
                raise ConfigError(
                    f"unknown variable {val!r} in {self.text!r}; allowed: {self.variables}"
                )
            return ("var", val)
        if val == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ConfigError(f"unexpected {val or 'end of input'!r} in {self.text!r}")


def _evaluate(node, env):
    op = node[0]
    if op == "const":
        return node[1]
    if op == "var":
        return env[node[1]]
    if op == "neg":
        return -_evaluate(node[1], env)
    if op == "call":
        fn, _ = _FUNCTIONS[node[1]]
        return fn(*[_evaluate(a, env) for a in node[2]])
    a = _evaluate(node[1], env)
    b = _evaluate(node[2], env)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    if op == "pow":
        return np.power(a, b)
    raise AssertionError(f"unreachable node {op}")


def compile_expression(text: str, variables: Sequence[str]) -> Callable:
    """Compile ``text`` into ``f(*values)`` evaluating with numpy semantics.

    ``variables`` fixes both the allowed names and the positional order of
    the returned callable's arguments.  Results broadcast like numpy; scalar
    inputs give scalar-like outputs.
    """
    node = _Parser(text, variables).parse()
    names = tuple(variables)

    def fn(*values):
        if len(values) != len(names):
            raise TypeError(f"expected {len(names)} argument(s), got {len(values)}")
        out = _evaluate(node, dict(zip(names, values)))
        if np.ndim(out) == 0 and any(np.ndim(v) > 0 for v in values):
            # constant expressions still broadcast against array inputs
            out = np.full(np.broadcast_shapes(*(np.shape(v) for v in values)), float(out))
        return out

    fn.expression = text
    return fn

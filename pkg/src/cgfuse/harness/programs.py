"""Random mini-language programs for property tests and fuzzing."""
from __future__ import annotations

import numpy as np

VARIABLES = ("a", "b", "c", "x", "y", "total", "count", "_total", "sizeLimit", "maxValue")
CALLEES = ("foo", "extractList", "getValue", "computeSum")
MEMBERS = ("size", "length", "next", "value")


class _Gen:
    def __init__(self, rng: np.random.Generator, allow_control: bool):
        self.rng = rng
        self.allow_control = allow_control
        self.scopes: list[set[str]] = [set()]

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def visible(self) -> set[str]:
        return set().union(*self.scopes)

    def expr(self, depth: int = 0) -> str:
        r = self.rng.random()
        if depth >= 2 or r < 0.35:
            return self.pick(VARIABLES)
        if r < 0.5:
            return str(int(self.rng.integers(0, 100)))
        if r < 0.75:
            op = self.pick(("+", "-", "*", "/", "<", ">", "=="))
            return f"{self.expr(depth + 1)} {op} {self.expr(depth + 1)}"
        if r < 0.85:
            n = int(self.rng.integers(0, 3))
            args = " , ".join(self.expr(depth + 1) for _ in range(n))
            return f"{self.pick(CALLEES)} ( {args} )".replace("(  )", "( )")
        if r < 0.93:
            return f"{self.pick(VARIABLES)} . {self.pick(MEMBERS)} ( )"
        return f"this . {self.pick(VARIABLES)}"

    def simple_statement(self, final: bool = False) -> str:
        r = self.rng.random()
        name = self.pick(VARIABLES)
        if final or (self.allow_control and r < 0.1):
            return f"return {self.expr()} ;"
        if r < 0.45 and name not in self.visible():
            self.scopes[-1].add(name)
            if self.rng.random() < 0.15:
                return f"int {name} ;"
            return f"int {name} = {self.expr()} ;"
        return f"{name} = {self.expr()} ;"

    def block(self, depth: int) -> str:
        self.scopes.append(set())
        body = " ".join(self.statement(depth + 1) for _ in range(int(self.rng.integers(1, 4))))
        self.scopes.pop()
        return "{ " + body + " }"

    def statement(self, depth: int) -> str:
        r = self.rng.random()
        if self.allow_control and depth < 3:
            if r < 0.15:
                s = f"if ( {self.expr(1)} ) {self.block(depth)}"
                if self.rng.random() < 0.5:
                    s += f" else {self.block(depth)}"
                return s
            if r < 0.25:
                return f"while ( {self.expr(1)} ) {self.block(depth)}"
            if r < 0.3:
                return f"{self.pick(CALLEES)} ( {self.expr(1)} ) ;"
        return self.simple_statement()


def random_program(
    rng: np.random.Generator,
    *,
    control_flow: bool = True,
    method: bool = False,
    max_statements: int = 6,
) -> str:
    """Source of a random strict-parsable program.

    With ``control_flow=False`` the result is straight-line: declarations,
    assignments and a trailing optional return.
    """
    g = _Gen(rng, control_flow)
    n = int(rng.integers(1, max_statements + 1))
    stmts = [g.statement(0) for _ in range(n)]
    if rng.random() < 0.5:
        stmts.append(g.simple_statement(final=True))
    body = " ".join(stmts)
    if method:
        params = " , ".join(f"int {p}" for p in ("a", "b")[: int(rng.integers(0, 3))])
        return f"int {g.pick(CALLEES)}Impl ( {params} ) {{ {body} }}".replace("(  )", "( )")
    return body

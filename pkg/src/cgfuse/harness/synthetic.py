"""Template corpus of documented mini-language methods.

Each example pairs a one-sentence intent with a method whose identifiers
mirror the intent's words.  A few surface choices (local variable names,
``this .`` qualification, ``else`` branches) are not stated in the intent.
"""
from __future__ import annotations

import numpy as np

from .. import tensor_core as tc
from .corpus import Example

NOUNS = (
    "size", "count", "total", "value", "width", "height", "price", "index", "length", "score",
    "limit", "offset", "weight", "amount", "balance", "speed", "level", "rate", "depth", "capacity",
    "quantity", "distance", "timeout", "port", "version", "margin", "radius", "age", "year", "step",
    "item", "node", "page", "row", "column", "buffer", "frame", "cost", "tax", "bonus",
)
NUMERIC_TYPES = ("int", "long", "double")
LOCALS = ("result", "sum", "acc", "tmp", "out", "res")
COUNTERS = ("n", "k", "steps", "counter")


def _cap(word: str) -> str:
    return word[:1].upper() + word[1:]


class _Templates:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def coin(self, p: float = 0.5) -> bool:
        return bool(self.rng.random() < p)

    def field(self) -> tuple[str, str]:
        """(camelCase identifier, space-separated words)."""
        words = [self.pick(NOUNS)]
        if self.coin(0.4):
            second = self.pick(NOUNS)
            if second != words[0]:
                words.append(second)
        return words[0] + "".join(_cap(w) for w in words[1:]), " ".join(words)

    def distinct_fields(self, k: int) -> list[tuple[str, str]]:
        out: list[tuple[str, str]] = []
        while len(out) < k:
            f = self.field()
            if all(f[0] != g[0] for g in out):
                out.append(f)
        return out

    # one method per template -------------------------------------------

    def getter(self):
        (f, w), t = self.field(), self.pick(NUMERIC_TYPES)
        body = f"return this . {f} ;" if self.coin() else f"return {f} ;"
        return f"returns the {w} .", f"{t} get{_cap(f)} ( ) {{ {body} }}"

    def setter(self):
        (f, w), t = self.field(), self.pick(NUMERIC_TYPES)
        return f"sets the {w} .", f"void set{_cap(f)} ( {t} {f} ) {{ this . {f} = {f} ; }}"

    def sum_loop(self):
        (f, w), acc = self.field(), self.pick(LOCALS)
        return (f"computes the sum of numbers below {w} .",
                f"int sumTo{_cap(f)} ( int {f} ) {{ int {acc} = 0 ; int i = 0 ; "
                f"while ( i < {f} ) {{ {acc} = {acc} + i ; i = i + 1 ; }} return {acc} ; }}")

    def maximum(self):
        (a, wa), (b, wb) = self.distinct_fields(2)
        head = f"int max{_cap(a)} ( int {a} , int {b} ) {{ "
        if self.coin():
            r = self.pick(LOCALS)
            body = f"int {r} = {b} ; if ( {a} > {b} ) {{ {r} = {a} ; }} return {r} ; }}"
        elif self.coin():
            body = f"if ( {a} > {b} ) {{ return {a} ; }} else {{ return {b} ; }} }}"
        else:
            body = f"if ( {a} > {b} ) {{ return {a} ; }} return {b} ; }}"
        return f"returns the larger of {wa} and {wb} .", head + body

    def difference(self):
        (a, wa), (b, wb) = self.distinct_fields(2)
        r = self.pick(LOCALS)
        return (f"returns the difference between {wa} and {wb} .",
                f"int diff{_cap(a)} ( int {a} , int {b} ) {{ int {r} = {a} - {b} ; return {r} ; }}")

    def chained_total(self):
        (f, w), (g, wg) = self.distinct_fields(2)
        return (f"calculate the total {w} of the {wg} list .",
                f"int calcTotal{_cap(f)} ( ) {{ _total = extract{_cap(g)}List ( ) . {f} ( ) ; return _total ; }}")

    def arithmetic(self):
        (a, wa), (b, wb), (c, wc) = self.distinct_fields(3)
        r = self.pick(LOCALS)
        return (f"returns {wa} multiplied by {wb} plus {wc} .",
                f"int compute{_cap(a)} ( int {a} , int {b} , int {c} ) {{ int {r} = {a} * {b} ; "
                f"{r} = {r} + {c} ; return {r} ; }}")

    def is_zero(self):
        f, w = self.field()
        return f"checks whether the {w} is zero .", f"boolean is{_cap(f)}Zero ( ) {{ return this . {f} == 0 ; }}"

    def increase(self):
        (f, w), (g, wg) = self.distinct_fields(2)
        return (f"increases the {w} by {wg} .",
                f"void increase{_cap(f)} ( int {g} ) {{ this . {f} = this . {f} + {g} ; }}")

    def clamp(self):
        (f, w), (g, wg) = self.distinct_fields(2)
        return (f"returns the {w} limited to {wg} .",
                f"int clamp{_cap(f)} ( int {f} , int {g} ) {{ if ( {f} > {g} ) {{ {f} = {g} ; }} return {f} ; }}")

    def average(self):
        (a, wa), (b, wb) = self.distinct_fields(2)
        r = self.pick(LOCALS)
        return (f"returns the average of {wa} and {wb} .",
                f"double average{_cap(a)} ( double {a} , double {b} ) {{ double {r} = {a} + {b} ; "
                f"return {r} / 2 ; }}")

    def count_down(self):
        (f, w), c = self.field(), self.pick(COUNTERS)
        return (f"counts down the {w} to zero .",
                f"int countDown{_cap(f)} ( int {f} ) {{ int {c} = 0 ; while ( {f} > 0 ) {{ "
                f"{f} = {f} - 1 ; {c} = {c} + 1 ; }} return {c} ; }}")

    def delegate(self):
        (f, w), (g, wg) = self.distinct_fields(2)
        return (f"returns the {w} of the {wg} .",
                f"int get{_cap(g)}{_cap(f)} ( ) {{ return get{_cap(g)} ( ) . {f} ( ) ; }}")

    ALL = ("getter", "setter", "sum_loop", "maximum", "chained_total", "arithmetic",
           "is_zero", "increase", "clamp", "average", "count_down", "delegate", "difference")


TEMPLATES = _Templates.ALL


def generate_synthetic(n: int, seed: int = 0) -> list[Example]:
    """``n`` examples; identical for identical (n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = tc.rng_for(seed, "synthetic")
    gen = _Templates(rng)
    out = []
    for _ in range(n):
        nl, code = getattr(gen, gen.pick(TEMPLATES))()
        out.append(Example(nl, code))
    return out

"""Exact match, corpus BLEU and a four-part CodeBLEU for the mini-language."""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .code_graph import Relation, build_code_graph
from .frontend import KEYWORDS, Ast, InvalidCharacter, parse, tokenize

KEYWORD_WEIGHT = 5.0
SUBTREE_DEPTH = 3
_FALLBACK = re.compile(r"\w+|[^\w\s]")


class LengthMismatch(ValueError):
    pass


def _check(hyps: Sequence[str], refs: Sequence[str]) -> None:
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")


def normalize(text: str) -> str:
    return " ".join(text.split())


def code_tokens(text: str) -> list[str]:
    """Code-token texts; characters outside the language fall back to a generic split."""
    try:
        return [t.text for t in tokenize(text)]
    except InvalidCharacter:
        return _FALLBACK.findall(text)


def exact_match(hyps: Sequence[str], refs: Sequence[str]) -> float:
    _check(hyps, refs)
    if not refs:
        return 0.0
    return 100.0 * sum(normalize(h) == normalize(r) for h, r in zip(hyps, refs)) / len(refs)


# ---------------------------------------------------------------------------
# n-gram scores


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def _combine(nums: list[float], dens: list[float], hyp_len: int, ref_len: int) -> float:
    """Geometric mean of precisions times brevity penalty, as a percentage.

    When any numerator is zero, orders n >= 2 use (num + 1) / (den + 1).
    """
    if hyp_len == 0 or nums[0] == 0:
        return 0.0
    smooth = any(x == 0 for x in nums)
    logs = []
    for n, (num, den) in enumerate(zip(nums, dens), 1):
        if smooth and n > 1:
            num, den = num + 1, den + 1
        if den == 0:
            continue
        logs.append(math.log(num / den))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / len(nums))


def _ngram_score(hyp_toks, ref_toks, max_n: int, weight=None) -> float:
    nums, dens = [0.0] * max_n, [0.0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyp_toks, ref_toks):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            w = weight if (weight is not None and n == 1) else (lambda g: 1.0)
            nums[n - 1] += sum(min(c, rc[g]) * w(g) for g, c in hc.items())
            dens[n - 1] += sum(c * w(g) for g, c in hc.items())
    return _combine(nums, dens, hyp_len, ref_len)


def bleu(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU over code tokens, in [0, 100]."""
    _check(hyps, refs)
    return _ngram_score([code_tokens(h) for h in hyps], [code_tokens(r) for r in refs], max_n)


def _keyword_weight(gram: tuple[str, ...]) -> float:
    return KEYWORD_WEIGHT if gram[0] in KEYWORDS else 1.0


def weighted_ngram(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    """BLEU with keyword unigrams counted ``KEYWORD_WEIGHT`` times."""
    _check(hyps, refs)
    return _ngram_score([code_tokens(h) for h in hyps], [code_tokens(r) for r in refs], max_n,
                        weight=_keyword_weight)


# ---------------------------------------------------------------------------
# structure scores


def _tolerant_ast(text: str) -> Ast | None:
    try:
        return parse(tokenize(text), tolerant=True)
    except InvalidCharacter:
        return None


def _shape(ast: Ast, i: int, depth: int) -> tuple:
    node = ast.nodes[i]
    if depth == 1 or not node.children:
        return (node.kind,)
    return (node.kind, tuple(_shape(ast, c, depth - 1) for c in node.children))


def subtree_shapes(ast: Ast, depth: int = SUBTREE_DEPTH) -> Counter:
    """Multiset of kind-labelled shapes, cut at ``depth``, rooted at syntax nodes."""
    return Counter(_shape(ast, i, depth) for i, node in enumerate(ast.nodes)
                   if node.token is None and i != ast.root)


def dataflow_facts(ast: Ast) -> Counter:
    """Multiset of (variable, variable, relation) for every comingFrom/calculatedBy edge."""
    g = build_code_graph(ast)
    text = {nid: tok.text for nid, tok in g.terminal_nodes}
    return Counter((text[s], text[d], r.value) for s, d, r in g.edges if r is not Relation.P)


def _match(hyp: Counter | None, ref: Counter) -> tuple[int, int]:
    total = sum(ref.values())
    if hyp is None:
        return 0, total
    return sum(min(c, hyp[k]) for k, c in ref.items()), total


@dataclass
class EvalReport:
    bleu: float
    codebleu: float
    ngram: float
    weighted_ngram: float
    syntax: float
    dataflow: float
    em: float
    per_example: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {"bleu": self.bleu, "codebleu": self.codebleu, "em": self.em, "ngram": self.ngram,
                "weighted_ngram": self.weighted_ngram, "syntax": self.syntax, "dataflow": self.dataflow}

    def to_text(self) -> str:
        return "\n".join(f"{k}\t{v:.4f}" for k, v in self.summary().items()) + "\n"


def _pct(matched: int, total: int) -> float:
    return 100.0 if total == 0 else 100.0 * matched / total


def codebleu(hyps: Sequence[str], refs: Sequence[str]) -> EvalReport:
    """All metrics at once; CodeBLEU is the mean of its four components."""
    _check(hyps, refs)
    ng = bleu(hyps, refs)
    wng = weighted_ngram(hyps, refs)
    syn_m = syn_t = df_m = df_t = 0
    per = []
    for h, r in zip(hyps, refs):
        h_ast, r_ast = _tolerant_ast(h), _tolerant_ast(r)
        ref_shapes = subtree_shapes(r_ast) if r_ast else Counter()
        ref_facts = dataflow_facts(r_ast) if r_ast else Counter()
        sm, st = _match(subtree_shapes(h_ast) if h_ast else None, ref_shapes)
        dm, dt = _match(dataflow_facts(h_ast) if h_ast else None, ref_facts)
        if h_ast is None:
            st, dt = max(st, 1), max(dt, 1)
        syn_m, syn_t, df_m, df_t = syn_m + sm, syn_t + st, df_m + dm, df_t + dt
        per.append({"em": float(normalize(h) == normalize(r)), "syntax": _pct(sm, st), "dataflow": _pct(dm, dt)})
    syntax, dataflow = _pct(syn_m, syn_t), _pct(df_m, df_t)
    return EvalReport(
        bleu=ng, codebleu=0.25 * (ng + wng + syntax + dataflow), ngram=ng, weighted_ngram=wng,
        syntax=syntax, dataflow=dataflow, em=exact_match(hyps, refs), per_example=per,
    )


def evaluate(hyps: Sequence[str], refs: Sequence[str]) -> EvalReport:
    return codebleu(hyps, refs)


def format_table(rows: Sequence[tuple[str, dict[str, float]]], columns: Sequence[str]) -> str:
    """Plain-text table with one row per model and right-aligned numbers."""
    header = ["model"] + list(columns)
    body = [[name] + [("-" if c not in vals else f"{vals[c]:.2f}") for c in columns] for name, vals in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for k, r in enumerate([header] + body):
        cells = [r[0].ljust(widths[0])] + [x.rjust(w) for x, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

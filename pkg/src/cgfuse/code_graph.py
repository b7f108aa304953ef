"""Code graphs: AST hierarchy plus comingFrom / calculatedBy dataflow edges.

Node ids are AST node ids (pre-order).  Leaves become terminal nodes, every
other AST node is a syntax node.  Dataflow edges only connect terminals:

* ``CO`` points from an identifier use to each definition that may reach it.
* ``CA`` points from a defined variable to every identifier in its value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .frontend import Ast, CodeToken, TokenKind


class Relation(str, Enum):
    P = "p"
    CO = "co"
    CA = "ca"


class FormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


Edge = tuple[int, int, Relation]


@dataclass
class CodeGraph:
    syntax_nodes: list[tuple[int, str]] = field(default_factory=list)
    terminal_nodes: list[tuple[int, CodeToken]] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.syntax_nodes) + len(self.terminal_nodes)

    def edges_of(self, rel: Relation) -> list[tuple[int, int]]:
        return [(s, d) for s, d, r in self.edges if r is rel]

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for s, d, r in self.edges:
            if r is Relation.P:
                out.setdefault(s, []).append(d)
        return out

    def terminal_index(self) -> dict[int, int]:
        """Node id -> position of the terminal in source order."""
        return {nid: k for k, (nid, _) in enumerate(self.terminal_nodes)}


def _identifier_leaves(ast: Ast, i: int) -> list[int]:
    out, stack = [], [i]
    while stack:
        j = stack.pop()
        node = ast.nodes[j]
        if node.token is not None:
            if ast.tokens[node.token].kind is TokenKind.IDENTIFIER:
                out.append(j)
        else:
            stack.extend(reversed(node.children))
    return sorted(out)


class _Dataflow:
    """Structured may-reach analysis.

    The environment maps a variable identity to the set of terminal ids that
    may define it; ``None`` marks code after a ``return``.  Loops run the
    body twice, the second time seeded with the first pass's exit state.
    """

    def __init__(self, ast: Ast):
        self.ast = ast
        self.co: set[tuple[int, int]] = set()
        self.ca: set[tuple[int, int]] = set()
        self.unresolved = 0
        self.scopes: list[dict[str, tuple]] = [{}]

    # -- helpers ----------------------------------------------------------
    def syn(self, i: int) -> list[int]:
        return [c for c in self.ast.nodes[i].children if self.ast.nodes[c].token is None]

    def kind(self, i: int) -> str:
        return self.ast.nodes[i].kind

    def text(self, leaf: int) -> str:
        return self.ast.tokens[self.ast.nodes[leaf].token].text

    def resolve(self, name: str) -> tuple:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        return (name, "global")

    @staticmethod
    def join(a, b):
        if a is None:
            return None if b is None else dict(b)
        if b is None:
            return dict(a)
        out = dict(a)
        for k, v in b.items():
            out[k] = out.get(k, frozenset()) | v
        return out

    # -- expressions ------------------------------------------------------
    def read(self, expr: int, env) -> None:
        stack = [expr]
        while stack:
            i = stack.pop()
            if self.kind(i) == "NameExpr":
                leaf = self.ast.nodes[i].children[0]
                defs = (env or {}).get(self.resolve(self.text(leaf)), frozenset())
                if not defs:
                    self.unresolved += 1
                for d in defs:
                    self.co.add((leaf, d))
            else:
                stack.extend(reversed(self.syn(i)))

    def define(self, target_leaf: int, values: list[int]) -> None:
        for v in values:
            for t in _identifier_leaves(self.ast, v):
                self.ca.add((target_leaf, t))

    # -- statements -------------------------------------------------------
    def block(self, stmts: Iterable[int], env):
        self.scopes.append({})
        for s in stmts:
            env = self.stmt(s, env)
        declared = self.scopes.pop()
        if env is not None:
            env = {k: v for k, v in env.items() if k not in declared.values()}
        return env

    def stmt(self, i: int, env):
        k = self.kind(i)
        live = {} if env is None else dict(env)
        if k == "Block":
            return self.block(self.syn(i), env)
        if k == "LocalVarDecl":
            for d in self.syn(i):
                if self.kind(d) != "VarDeclarator":
                    continue
                parts = self.ast.nodes[d].children
                if not parts:
                    continue
                name_leaf = self.ast.nodes[parts[0]].children[0]
                values = [c for c in parts[1:] if self.ast.nodes[c].token is None]
                for v in values:
                    self.read(v, env)
                self.define(name_leaf, values)
                ident = (self.text(name_leaf), d)
                self.scopes[-1][self.text(name_leaf)] = ident
                has_eq = any(self.ast.nodes[c].token is not None for c in parts)
                live[ident] = frozenset({name_leaf}) if has_eq else frozenset()
            return live
        if k == "AssignStmt":
            assign = self.syn(i)[0]
            target, *values = self.syn(assign)
            if self.kind(target) != "NameExpr":
                self.read(target, env)
            for v in values:
                self.read(v, env)
            if self.kind(target) == "NameExpr":
                leaf = self.ast.nodes[target].children[0]
                self.define(leaf, values)
                live[self.resolve(self.text(leaf))] = frozenset({leaf})
                return live
            return env
        if k == "ExprStmt":
            for e in self.syn(i):
                self.read(e, env)
            return env
        if k == "ReturnStmt":
            for e in self.syn(i):
                self.read(e, env)
            return None
        if k == "IfStmt":
            parts = self.syn(i)
            for c in parts:
                if self.kind(c) == "Condition":
                    for e in self.syn(c):
                        self.read(e, env)
            then_env = env
            for c in parts:
                if self.kind(c) not in ("Condition", "ElseClause"):
                    then_env = self.block([c], env)
            else_env = env
            for c in parts:
                if self.kind(c) == "ElseClause":
                    else_env = self.block(self.syn(c), env)
            return self.join(then_env, else_env)
        if k == "WhileStmt":
            parts = self.syn(i)
            conds = [c for c in parts if self.kind(c) == "Condition"]
            body = [c for c in parts if self.kind(c) != "Condition"]
            head = env
            out = env
            for _ in range(2):
                for c in conds:
                    for e in self.syn(c):
                        self.read(e, head)
                out = self.block(body, head)
                head = self.join(env, out)
            return head
        return env  # Incomplete

    def run(self) -> None:
        root = self.ast.root
        if self.kind(root) == "MethodDecl":
            env: dict | None = {}
            for c in self.syn(root):
                if self.kind(c) == "ParamList":
                    for p in self.syn(c):
                        for nm in self.syn(p):
                            if self.kind(nm) == "Name":
                                leaf = self.ast.nodes[nm].children[0]
                                ident = (self.text(leaf), p)
                                self.scopes[-1][self.text(leaf)] = ident
                                env[ident] = frozenset()
                elif self.kind(c) == "Block":
                    env = self.stmt(c, env)
        else:
            env = {}
            for c in self.syn(root):
                env = self.stmt(c, env)


def dataflow_edges(ast: Ast) -> list[Edge]:
    flow = _Dataflow(ast)
    flow.run()
    edges = [(s, d, Relation.CO) for s, d in flow.co] + [(s, d, Relation.CA) for s, d in flow.ca]
    return sorted(edges, key=_edge_key)


def unresolved_uses(ast: Ast) -> int:
    """Number of identifier reads with no visible definition."""
    flow = _Dataflow(ast)
    flow.run()
    return flow.unresolved


_REL_ORDER = {Relation.P: 0, Relation.CO: 1, Relation.CA: 2}


def _edge_key(e: Edge):
    return (_REL_ORDER[e[2]], e[0], e[1])


def build_code_graph(ast: Ast) -> CodeGraph:
    g = CodeGraph()
    for i, node in enumerate(ast.nodes):
        if node.token is None:
            g.syntax_nodes.append((i, node.kind))
        else:
            g.terminal_nodes.append((i, ast.tokens[node.token]))
        for c in node.children:
            g.edges.append((i, c, Relation.P))
    g.terminal_nodes.sort(key=lambda t: t[1].span)
    g.edges.extend(dataflow_edges(ast))
    g.edges.sort(key=_edge_key)
    return g


def context_subgraph(g: CodeGraph, visible_terminal_count: int) -> CodeGraph:
    """Keep the first ``k`` terminals, their ancestors, and edges among them.

    Node ids are compacted, preserving their relative order.
    """
    k = visible_terminal_count
    if not 0 <= k <= len(g.terminal_nodes):
        raise ValueError(f"visible_terminal_count {k} outside [0, {len(g.terminal_nodes)}]")
    keep = {nid for nid, _ in g.terminal_nodes[:k]}
    parent = {d: s for s, d, r in g.edges if r is Relation.P}
    for nid in list(keep):
        while nid in parent and parent[nid] not in keep:
            nid = parent[nid]
            keep.add(nid)
    remap = {old: new for new, old in enumerate(sorted(keep))}
    return CodeGraph(
        syntax_nodes=[(remap[i], kind) for i, kind in g.syntax_nodes if i in keep],
        terminal_nodes=[(remap[i], tok) for i, tok in g.terminal_nodes if i in keep],
        edges=[(remap[s], remap[d], r) for s, d, r in g.edges if s in keep and d in keep],
    )


# ---------------------------------------------------------------------------
# serialisation

FORMAT_VERSION = 1


def to_json(g: CodeGraph) -> dict:
    return {
        "v": FORMAT_VERSION,
        "syntax": [[i, kind] for i, kind in g.syntax_nodes],
        "terminals": [[i, t.text, t.kind.value, t.span[0], t.span[1]] for i, t in g.terminal_nodes],
        "edges": [[s, d, r.value] for s, d, r in g.edges],
    }


def from_json(obj) -> CodeGraph:
    try:
        if obj["v"] != FORMAT_VERSION:
            raise FormatError(f"unsupported graph format version {obj['v']!r}")
        g = CodeGraph(
            syntax_nodes=[(int(i), str(kind)) for i, kind in obj["syntax"]],
            terminal_nodes=[
                (int(i), CodeToken(str(text), TokenKind(kind), (int(a), int(b))))
                for i, text, kind, a, b in obj["terminals"]
            ],
            edges=[(int(s), int(d), Relation(r)) for s, d, r in obj["edges"]],
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed graph: {exc}") from exc
    ids = sorted([i for i, _ in g.syntax_nodes] + [i for i, _ in g.terminal_nodes])
    if ids != list(range(len(ids))):
        raise FormatError("node ids must be exactly 0..n-1")
    if any(not (0 <= s < len(ids) and 0 <= d < len(ids)) for s, d, _ in g.edges):
        raise FormatError("edge endpoint out of range")
    return g


def serialize(g: CodeGraph) -> bytes:
    return json.dumps(to_json(g), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def deserialize(data: bytes) -> CodeGraph:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a serialized graph: {exc}") from exc
    return from_json(obj)


# ---------------------------------------------------------------------------
# alignment

TerminalAlignment = dict[int, tuple[int, int]]


def align_terminals(
    g: CodeGraph,
    token_of_subtoken: Sequence[int | None],
    offset: int = 0,
    strict: bool = True,
) -> TerminalAlignment:
    """Map each terminal to the half-open range of its subtoken positions.

    ``token_of_subtoken[p]`` is the source code-token index that produced
    subtoken ``p`` (``None`` for positions with no code token).  ``offset`` is
    added to every position, e.g. 1 for a leading BOS.  Terminal ``k`` (source
    order) corresponds to code token ``k``.  Non-strict mode silently skips
    terminals without subtokens instead of raising.
    """
    positions: dict[int, list[int]] = {}
    for p, tok in enumerate(token_of_subtoken):
        if tok is not None:
            positions.setdefault(tok, []).append(p)
    out: TerminalAlignment = {}
    for k, (nid, tok) in enumerate(g.terminal_nodes):
        pos = positions.get(k)
        if not pos:
            if strict:
                raise AlignmentError(f"terminal {nid} ({tok.text!r}) has no subtokens")
            continue
        if pos[-1] - pos[0] + 1 != len(pos):
            raise AlignmentError(f"subtokens of terminal {nid} ({tok.text!r}) are not contiguous")
        out[nid] = (pos[0] + offset, pos[-1] + 1 + offset)
    return out

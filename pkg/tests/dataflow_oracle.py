"""Reference reaching-definitions analysis used to check the graph builder.

The AST is compiled to a flat instruction list (USE / DEF / KILL with explicit
jumps) and reaching definitions are solved by plain fixpoint iteration over
that list.  Nothing here is shared with ``cgfuse.code_graph``.
"""
from __future__ import annotations

from cgfuse.frontend import Ast, TokenKind


def _leaf_tokens(ast: Ast, i: int) -> list[int]:
    node = ast.nodes[i]
    if node.token is not None:
        return [i]
    out = []
    for c in node.children:
        out.extend(_leaf_tokens(ast, c))
    return out


class _Compiler:
    def __init__(self, ast: Ast):
        self.ast = ast
        self.code: list[tuple] = []
        self.scopes: list[dict[str, tuple]] = [{}]
        self.ca: set[tuple[int, int]] = set()

    def kids(self, i):
        return [self.ast.nodes[c] for c in self.ast.nodes[i].children], self.ast.nodes[i].children

    def kind(self, i):
        return self.ast.nodes[i].kind

    def ident(self, name: str) -> tuple:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        return (name, "global")

    def emit(self, *ins) -> int:
        self.code.append(ins)
        return len(self.code) - 1

    def uses(self, expr: int) -> None:
        """USE events for every NameExpr identifier, left to right."""
        if self.kind(expr) == "NameExpr":
            leaf = self.ast.nodes[expr].children[0]
            name = self.ast.tokens[self.ast.nodes[leaf].token].text
            self.emit("USE", self.ident(name), leaf)
            return
        for c in self.ast.nodes[expr].children:
            if self.ast.nodes[c].token is None:
                self.uses(c)

    def identifiers(self, expr: int) -> list[int]:
        return [
            leaf for leaf in _leaf_tokens(self.ast, expr)
            if self.ast.tokens[self.ast.nodes[leaf].token].kind is TokenKind.IDENTIFIER
        ]

    def name_leaf(self, name_node: int) -> tuple[str, int]:
        leaf = self.ast.nodes[name_node].children[0]
        return self.ast.tokens[self.ast.nodes[leaf].token].text, leaf

    def scoped(self, fn, *args):
        self.scopes.append({})
        fn(*args)
        self.scopes.pop()

    def stmt(self, i: int) -> None:
        k = self.kind(i)
        ch = self.ast.nodes[i].children
        syn = [c for c in ch if self.ast.nodes[c].token is None]
        if k == "Block":
            self.scoped(lambda: [self.stmt(c) for c in syn])
        elif k == "LocalVarDecl":
            decl = [c for c in syn if self.kind(c) == "VarDeclarator"]
            if not decl:
                return
            d = decl[0]
            dch = self.ast.nodes[d].children
            if not dch:
                return
            name, leaf = self.name_leaf(dch[0])
            has_eq = any(self.ast.nodes[c].token is not None for c in dch)
            inits = [c for c in dch[1:] if self.ast.nodes[c].token is None]
            for e in inits:
                self.uses(e)
                for t in self.identifiers(e):
                    self.ca.add((leaf, t))
            ident = (name, d)
            self.scopes[-1][name] = ident
            if has_eq:
                self.emit("DEF", ident, leaf)
            else:
                self.emit("KILL", ident)
        elif k == "AssignStmt":
            a = syn[0]
            ach = [c for c in self.ast.nodes[a].children if self.ast.nodes[c].token is None]
            target, rhs = ach[0], ach[1:]
            if self.kind(target) != "NameExpr":
                self.uses(target)
            for e in rhs:
                self.uses(e)
            if self.kind(target) == "NameExpr":
                leaf = self.ast.nodes[target].children[0]
                name = self.ast.tokens[self.ast.nodes[leaf].token].text
                for e in rhs:
                    for t in self.identifiers(e):
                        self.ca.add((leaf, t))
                self.emit("DEF", self.ident(name), leaf)
        elif k in ("ExprStmt",):
            for e in syn:
                self.uses(e)
        elif k == "ReturnStmt":
            for e in syn:
                self.uses(e)
            self.emit("RET")
        elif k == "IfStmt":
            cond = [c for c in syn if self.kind(c) == "Condition"]
            rest = [c for c in syn if self.kind(c) not in ("Condition", "ElseClause")]
            els = [c for c in syn if self.kind(c) == "ElseClause"]
            for c in cond:
                for e in self.ast.nodes[c].children:
                    if self.ast.nodes[e].token is None:
                        self.uses(e)
            br = self.emit("BR", None, None)
            then_start = len(self.code)
            for s in rest:
                self.scoped(self.stmt, s)
            jmp = self.emit("JMP", None)
            else_start = len(self.code)
            for e in els:
                for s in self.ast.nodes[e].children:
                    if self.ast.nodes[s].token is None:
                        self.scoped(self.stmt, s)
            end = len(self.code)
            self.code[br] = ("BR", then_start, else_start)
            self.code[jmp] = ("JMP", end)
        elif k == "WhileStmt":
            head = len(self.code)
            for c in syn:
                if self.kind(c) == "Condition":
                    for e in self.ast.nodes[c].children:
                        if self.ast.nodes[e].token is None:
                            self.uses(e)
            br = self.emit("BR", None, None)
            body_start = len(self.code)
            for s in syn:
                if self.kind(s) != "Condition":
                    self.scoped(self.stmt, s)
            self.emit("JMP", head)
            self.code[br] = ("BR", body_start, len(self.code))
        # Incomplete and anything else: no dataflow

    def unit(self) -> None:
        root = self.ast.root
        if self.kind(root) == "MethodDecl":
            for c in self.ast.nodes[root].children:
                if self.kind(c) == "ParamList":
                    for p in self.ast.nodes[c].children:
                        if self.kind(p) == "Param":
                            names = [x for x in self.ast.nodes[p].children if self.kind(x) == "Name"]
                            for nm in names:
                                name, _ = self.name_leaf(nm)
                                ident = (name, p)
                                self.scopes[-1][name] = ident
                                self.emit("KILL", ident)
                elif self.kind(c) == "Block":
                    self.stmt(c)
        else:
            for c in self.ast.nodes[root].children:
                self.stmt(c)


def oracle_dataflow(ast: Ast) -> tuple[set[tuple[int, int]], set[tuple[int, int]]]:
    """Return (CO edges, CA edges) as sets of (src node id, dst node id)."""
    comp = _Compiler(ast)
    comp.unit()
    code = comp.code
    n = len(code)

    def succ(i):
        ins = code[i]
        if ins[0] == "RET":
            return []
        if ins[0] == "JMP":
            return [ins[1]]
        if ins[0] == "BR":
            return [ins[1], ins[2]]
        return [i + 1]

    preds: list[list[int]] = [[] for _ in range(n + 1)]
    for i in range(n):
        for j in succ(i):
            preds[j].append(i)
    IN = [frozenset() for _ in range(n + 1)]
    OUT = [frozenset() for _ in range(n)]
    changed = True
    while changed:
        changed = False
        for i in range(n):
            new_in = frozenset().union(*(OUT[p] for p in preds[i])) if preds[i] else frozenset()
            ins = code[i]
            if ins[0] == "DEF":
                new_out = frozenset(d for d in new_in if d[0] != ins[1]) | {(ins[1], ins[2])}
            elif ins[0] == "KILL":
                new_out = frozenset(d for d in new_in if d[0] != ins[1])
            else:
                new_out = new_in
            if new_in != IN[i] or new_out != OUT[i]:
                IN[i], OUT[i] = new_in, new_out
                changed = True
    co = set()
    for i, ins in enumerate(code):
        if ins[0] == "USE":
            for ident, term in IN[i]:
                if ident == ins[1]:
                    co.add((ins[2], term))
    return co, comp.ca

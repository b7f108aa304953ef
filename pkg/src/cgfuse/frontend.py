"""Lexer and recursive-descent parser for a small Java-like language.

Grammar (one method, or a bare statement list)::

    unit      := method | stmt*
    method    := type IDENT '(' [param {',' param}] ')' block
    param     := type IDENT
    type      := PRIMITIVE | IDENT
    block     := '{' stmt* '}'
    stmt      := block | 'return' [expr] ';'
               | 'if' '(' expr ')' stmt ['else' stmt]
               | 'while' '(' expr ')' stmt
               | type IDENT ['=' expr] ';'
               | expr '=' expr ';' | expr ';'
    expr      := equality with the usual left-associative precedence
                 ('==' < '<' '>' < '+' '-' < '*' '/'), postfix '.' IDENT and
                 call '(' args ')', primaries IDENT, literal, 'this', '(' expr ')'

Tolerant mode never raises.  Running out of tokens closes every open
construct as a partial node; an unexpected token stops parsing and the rest of
the input is attached as leaves of an ``Incomplete`` node under the root.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class TokenKind(str, Enum):
    IDENTIFIER = "Identifier"
    KEYWORD = "Keyword"
    LITERAL = "Literal"
    OPERATOR = "Operator"
    PUNCT = "Punct"


PRIMITIVE_TYPES = frozenset({"int", "long", "double", "boolean", "char", "void"})
KEYWORDS = PRIMITIVE_TYPES | {"return", "if", "else", "while", "this"}
LITERAL_WORDS = frozenset({"true", "false", "null"})
OPERATORS = ("==", "+", "-", "*", "/", "<", ">", "=")
PUNCTUATION = "(){};,."


@dataclass(frozen=True)
class CodeToken:
    text: str
    kind: TokenKind
    span: tuple[int, int]  # byte offsets into the UTF-8 source


class InvalidCharacter(ValueError):
    def __init__(self, offset: int, char: str = ""):
        super().__init__(f"invalid character {char!r} at byte offset {offset}")
        self.offset = offset


class ParseError(SyntaxError):
    """Strict-mode parse failure."""

    def __init__(self, offset: int, expected: frozenset[str]):
        super().__init__(f"at byte offset {offset}: expected one of {sorted(expected)}")
        self.offset = offset
        self.expected = expected


_WS = re.compile(rb"[ \t\r\n]+")
_WORD = re.compile(rb"[A-Za-z_$][A-Za-z0-9_$]*")
_NUMBER = re.compile(rb"[0-9]+(?:\.[0-9]+)?[lLdDfF]?")
_STRING = re.compile(rb'"(?:[^"\\\n]|\\.)*"')
_CHAR = re.compile(rb"'(?:[^'\\\n]|\\.)'")


def tokenize(source: str) -> list[CodeToken]:
    data = source.encode("utf-8")
    out: list[CodeToken] = []
    pos, n = 0, len(data)
    while pos < n:
        m = _WS.match(data, pos)
        if m:
            pos = m.end()
            continue
        m = _WORD.match(data, pos)
        if m:
            text = m.group().decode()
            if text in KEYWORDS:
                kind = TokenKind.KEYWORD
            elif text in LITERAL_WORDS:
                kind = TokenKind.LITERAL
            else:
                kind = TokenKind.IDENTIFIER
            out.append(CodeToken(text, kind, (pos, m.end())))
            pos = m.end()
            continue
        m = _NUMBER.match(data, pos) or _STRING.match(data, pos) or _CHAR.match(data, pos)
        if m:
            out.append(CodeToken(m.group().decode("utf-8"), TokenKind.LITERAL, (pos, m.end())))
            pos = m.end()
            continue
        for op in OPERATORS:
            if data.startswith(op.encode(), pos):
                out.append(CodeToken(op, TokenKind.OPERATOR, (pos, pos + len(op))))
                pos += len(op)
                break
        else:
            ch = chr(data[pos])
            if ch in PUNCTUATION:
                out.append(CodeToken(ch, TokenKind.PUNCT, (pos, pos + 1)))
                pos += 1
            else:
                bad = data[pos:pos + 4].decode("utf-8", errors="replace")[:1]
                raise InvalidCharacter(pos, bad)
    return out


# ---------------------------------------------------------------------------
# AST

LEAF_KINDS = {
    TokenKind.IDENTIFIER: "IdentifierLeaf",
    TokenKind.KEYWORD: "KeywordLeaf",
    TokenKind.LITERAL: "LiteralLeaf",
    TokenKind.OPERATOR: "OperatorLeaf",
    TokenKind.PUNCT: "PunctLeaf",
}

SYNTAX_KINDS = (
    "Program", "MethodDecl", "ParamList", "Param", "PrimitiveType", "ClassType", "Name",
    "Block", "LocalVarDecl", "VarDeclarator", "AssignStmt", "AssignExpr", "ExprStmt",
    "ReturnStmt", "IfStmt", "ElseClause", "WhileStmt", "Condition", "BinaryExpr",
    "CallExpr", "ArgList", "FieldAccess", "NameExpr", "LiteralExpr", "ThisExpr",
    "ParenExpr", "Incomplete",
)
NODE_KINDS = SYNTAX_KINDS + tuple(LEAF_KINDS.values())


@dataclass
class AstNode:
    kind: str
    children: list[int] = field(default_factory=list)
    token: int | None = None  # index into Ast.tokens, leaves only


@dataclass
class Ast:
    nodes: list[AstNode]
    root: int
    tokens: list[CodeToken]

    def leaves(self) -> list[int]:
        """Leaf node ids in source (pre-order) order."""
        out, stack = [], [self.root]
        while stack:
            i = stack.pop()
            node = self.nodes[i]
            if node.token is not None:
                out.append(i)
            stack.extend(reversed(node.children))
        return out

    def parent_map(self) -> dict[int, int]:
        return {c: i for i, node in enumerate(self.nodes) for c in node.children}

    def shape(self, i: int | None = None) -> tuple:
        """Nested (kind, token text, children) tuple, for structural comparison."""
        i = self.root if i is None else i
        node = self.nodes[i]
        text = self.tokens[node.token].text if node.token is not None else None
        return (node.kind, text, tuple(self.shape(c) for c in node.children))


class _Eof(Exception):
    """Tolerant parsing ran out of tokens."""


class _Stop(Exception):
    """Tolerant parsing met a token it cannot place."""


class _Parser:
    """Every node is linked into its parent when created, so an interrupted
    parse leaves a well-formed partial tree behind."""

    _LEVELS = (("==",), ("<", ">"), ("+", "-"), ("*", "/"))

    def __init__(self, tokens: list[CodeToken], tolerant: bool):
        self.toks = tokens
        self.tolerant = tolerant
        self.pos = 0
        self.nodes: list[AstNode] = []
        self.parent: list[int] = []

    # -- helpers ----------------------------------------------------------
    def node(self, kind: str, parent: int) -> int:
        self.nodes.append(AstNode(kind))
        self.parent.append(parent)
        i = len(self.nodes) - 1
        if parent >= 0:
            self.nodes[parent].children.append(i)
        return i

    def wrap(self, inner: int, kind: str) -> int:
        """Insert a new ``kind`` node between ``inner`` and its parent."""
        par = self.parent[inner]
        self.nodes.append(AstNode(kind, [inner]))
        self.parent.append(par)
        w = len(self.nodes) - 1
        siblings = self.nodes[par].children
        siblings[siblings.index(inner)] = w
        self.parent[inner] = w
        return w

    def peek(self, k: int = 0) -> CodeToken | None:
        i = self.pos + k
        return self.toks[i] if i < len(self.toks) else None

    def at(self, *texts: str) -> bool:
        t = self.peek()
        return t is not None and t.kind is not TokenKind.IDENTIFIER \
            and t.kind is not TokenKind.LITERAL and t.text in texts

    def fail(self, expected: set[str]):
        if self.tolerant:
            raise _Eof() if self.peek() is None else _Stop()
        tok = self.peek()
        offset = tok.span[0] if tok else (self.toks[-1].span[1] if self.toks else 0)
        raise ParseError(offset, frozenset(expected))

    def leaf(self, parent: int) -> int:
        tok = self.toks[self.pos]
        i = self.node(LEAF_KINDS[tok.kind], parent)
        self.nodes[i].token = self.pos
        self.pos += 1
        return i

    def expect(self, parent: int, text: str) -> None:
        if not self.at(text):
            self.fail({text})
        self.leaf(parent)

    def _is_primitive(self, t: CodeToken | None) -> bool:
        return t is not None and t.kind is TokenKind.KEYWORD and t.text in PRIMITIVE_TYPES

    def is_decl_start(self) -> bool:
        t, nxt = self.peek(), self.peek(1)
        if self._is_primitive(t):
            return True
        return (t is not None and t.kind is TokenKind.IDENTIFIER
                and nxt is not None and nxt.kind is TokenKind.IDENTIFIER)

    def is_method_start(self) -> bool:
        t0, t1, t2 = self.peek(), self.peek(1), self.peek(2)
        if t0 is None or t1 is None or t2 is None:
            return False
        is_type = self._is_primitive(t0) or t0.kind is TokenKind.IDENTIFIER
        return is_type and t1.kind is TokenKind.IDENTIFIER and t2.kind is TokenKind.PUNCT and t2.text == "("

    # -- declarations -----------------------------------------------------
    def type_(self, parent: int) -> None:
        t = self.peek()
        if self._is_primitive(t):
            self.leaf(self.node("PrimitiveType", parent))
        elif t is not None and t.kind is TokenKind.IDENTIFIER:
            self.leaf(self.node("ClassType", parent))
        else:
            self.fail({"<type>"})

    def name(self, parent: int) -> None:
        t = self.peek()
        if t is None or t.kind is not TokenKind.IDENTIFIER:
            self.fail({"<identifier>"})
        self.leaf(self.node("Name", parent))

    def method_body(self, m: int) -> None:
        self.type_(m)
        self.name(m)
        plist = self.node("ParamList", m)
        self.expect(plist, "(")
        if not self.at(")"):
            self.param(plist)
            while self.at(","):
                self.leaf(plist)
                self.param(plist)
        self.expect(plist, ")")
        self.block(m)

    def param(self, parent: int) -> None:
        p = self.node("Param", parent)
        self.type_(p)
        self.name(p)

    # -- statements -------------------------------------------------------
    def block(self, parent: int) -> None:
        if not self.at("{"):
            self.fail({"{"})
        b = self.node("Block", parent)
        self.leaf(b)
        while not self.at("}"):
            if self.peek() is None:
                self.fail({"}"})
            self.statement(b)
        self.leaf(b)

    def statement(self, parent: int) -> None:
        if self.peek() is None:
            self.fail({"<statement>"})
        if self.at("{"):
            self.block(parent)
        elif self.at("return"):
            s = self.node("ReturnStmt", parent)
            self.leaf(s)
            if not self.at(";"):
                self.expr(s)
            self.expect(s, ";")
        elif self.at("if"):
            s = self.node("IfStmt", parent)
            self.leaf(s)
            self.condition(s)
            self.statement(s)
            if self.at("else"):
                e = self.node("ElseClause", s)
                self.leaf(e)
                self.statement(e)
        elif self.at("while"):
            s = self.node("WhileStmt", parent)
            self.leaf(s)
            self.condition(s)
            self.statement(s)
        elif self.is_decl_start():
            s = self.node("LocalVarDecl", parent)
            self.type_(s)
            d = self.node("VarDeclarator", s)
            self.name(d)
            if self.at("="):
                self.leaf(d)
                self.expr(d)
            self.expect(s, ";")
        else:
            self.expression_statement(parent)

    def expression_statement(self, parent: int) -> None:
        s = self.node("ExprStmt", parent)
        first = self.expr(s)
        assignable = self.nodes[first].kind in ("NameExpr", "FieldAccess")
        if self.at("=") or (assignable and self.tolerant and self.peek() is None):
            # at end of input a bare name is read as a pending assignment target
            if not assignable:
                self.fail({";"})
            self.nodes[s].kind = "AssignStmt"
            a = self.wrap(first, "AssignExpr")
            if self.peek() is None:
                self.fail({"="})
            self.leaf(a)
            self.expr(a)
        self.expect(s, ";")

    def condition(self, parent: int) -> None:
        c = self.node("Condition", parent)
        self.expect(c, "(")
        self.expr(c)
        self.expect(c, ")")

    # -- expressions ------------------------------------------------------
    def expr(self, parent: int) -> int:
        return self.binary(parent, 0)

    def binary(self, parent: int, level: int) -> int:
        if level == len(self._LEVELS):
            return self.postfix(parent)
        left = self.binary(parent, level + 1)
        while self.at(*self._LEVELS[level]):
            b = self.wrap(left, "BinaryExpr")
            self.leaf(b)
            self.binary(b, level + 1)
            left = b
        return left

    def postfix(self, parent: int) -> int:
        e = self.primary(parent)
        while True:
            if self.at("."):
                e = self.wrap(e, "FieldAccess")
                self.leaf(e)
                self.name(e)
            elif self.at("("):
                e = self.wrap(e, "CallExpr")
                args = self.node("ArgList", e)
                self.leaf(args)
                if not self.at(")"):
                    self.expr(args)
                    while self.at(","):
                        self.leaf(args)
                        self.expr(args)
                self.expect(args, ")")
            else:
                return e

    def primary(self, parent: int) -> int:
        t = self.peek()
        if t is None:
            self.fail({"<expression>"})
        if t.kind is TokenKind.IDENTIFIER:
            e = self.node("NameExpr", parent)
        elif t.kind is TokenKind.LITERAL:
            e = self.node("LiteralExpr", parent)
        elif self.at("this"):
            e = self.node("ThisExpr", parent)
        elif self.at("("):
            e = self.node("ParenExpr", parent)
            self.leaf(e)
            self.expr(e)
            self.expect(e, ")")
            return e
        else:
            self.fail({"<expression>"})
        self.leaf(e)
        return e

    # -- entry ------------------------------------------------------------
    def parse(self, start: str) -> Ast:
        method = start == "method" or (start == "auto" and self.is_method_start())
        root = self.node("MethodDecl" if method else "Program", -1)
        try:
            if method:
                self.method_body(root)
            else:
                while self.peek() is not None:
                    self.statement(root)
            if self.peek() is not None:
                self.fail({"<end of input>"})
        except _Eof:
            pass
        except _Stop:
            inc = self.node("Incomplete", root)
            while self.pos < len(self.toks):
                self.leaf(inc)
        return _canonical(self.nodes, root, self.toks)


def _canonical(nodes: list[AstNode], root: int, tokens: list[CodeToken]) -> Ast:
    """Renumber in pre-order, children by source position, dropping syntax
    nodes that ended up with no tokens beneath them."""
    first_tok: dict[int, int] = {}

    def first(i: int) -> int:
        if i not in first_tok:
            node = nodes[i]
            if node.token is not None:
                first_tok[i] = node.token
            else:
                first_tok[i] = min((f for f in map(first, node.children) if f >= 0), default=-1)
        return first_tok[i]

    order: list[int] = []
    stack = [root]
    while stack:
        i = stack.pop()
        order.append(i)
        kids = sorted((c for c in nodes[i].children if first(c) >= 0), key=first)
        nodes[i].children = kids
        stack.extend(reversed(kids))
    remap = {old: new for new, old in enumerate(order)}
    out = [AstNode(nodes[i].kind, [remap[c] for c in nodes[i].children], nodes[i].token) for i in order]
    return Ast(out, 0, list(tokens))


def parse(tokens: list[CodeToken], tolerant: bool = False, start: str = "auto") -> Ast:
    """Parse a token list.

    ``start`` is ``"method"``, ``"statements"`` or ``"auto"`` (a method when the
    input opens with ``type name (``).
    """
    if not tokens and not tolerant:
        raise ParseError(0, frozenset({"<statement>"}))
    return _Parser(list(tokens), tolerant).parse(start)


def parse_source(source: str, tolerant: bool = False, start: str = "auto") -> Ast:
    return parse(tokenize(source), tolerant=tolerant, start=start)

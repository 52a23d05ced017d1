"""Context-free grammar, typed ASTs and the two-action transition system.

A derivation is built top-down, left to right.  ``ApplyRule(p)`` expands the
frontier nonterminal with production ``p``; ``GenToken(tok)`` appends a token
to the frontier token field, and ``GenToken(END)`` closes it.  Sequence
fields (``Type*``) are desugared into generated cons/nil productions so no
third action kind is needed.

Grammar file format, one production per line::

    Lhs -> Constructor(field:Type, items:Type*, name:token)   # comment

The first production's left-hand side is the root.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

TOKEN = "token"
END = "</t>"

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_LINE_RE = re.compile(rf"^\s*({_IDENT})\s*->\s*({_IDENT})\s*(?:\((.*)\))?\s*$")
_FIELD_RE = re.compile(rf"^\s*({_IDENT})\s*:\s*({_IDENT})(\*?)\s*$")


class GrammarError(ValueError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, lineno, msg):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class UndefinedNonterminalError(GrammarError):
    pass


class DuplicateConstructorError(GrammarError):
    pass


class IllTypedAstError(ValueError):
    def __init__(self, path, msg):
        super().__init__(f"at {'/'.join(path) or '<root>'}: {msg}")
        self.path = tuple(path)


class IllegalActionError(ValueError):
    def __init__(self, step, expected, got):
        super().__init__(f"step {step}: expected an action for {expected}, got {got}")
        self.step = step
        self.expected = expected


class IncompleteDerivationError(ValueError):
    pass


class TrailingActionsError(ValueError):
    pass


class CodeParseError(ValueError):
    def __init__(self, offset, msg):
        super().__init__(f"offset {offset}: {msg}")
        self.offset = offset


class Field(NamedTuple):
    name: str
    type: str
    is_sequence: bool = False


@dataclass(frozen=True)
class Production:
    id: int
    lhs: str
    constructor: str
    fields: tuple[Field, ...]
    synthetic: bool = False  # generated cons/nil production of a sequence type

    def __str__(self):
        args = ", ".join(f"{f.name}:{f.type}{'*' if f.is_sequence else ''}" for f in self.fields)
        return f"{self.lhs} -> {self.constructor}({args})"


def seq_type(elem: str) -> str:
    return elem + "*"


class Grammar:
    def __init__(self, productions: list[Production], root: str):
        self.productions = list(productions)
        self.root = root
        self.end_token = END
        self.nonterminals = []
        self.by_lhs: dict[str, list[int]] = {}
        for p in self.productions:
            if p.lhs not in self.by_lhs:
                self.nonterminals.append(p.lhs)
                self.by_lhs[p.lhs] = []
            self.by_lhs[p.lhs].append(p.id)
        self.by_constructor = {p.constructor: p for p in self.productions if not p.synthetic}
        self.cons_id: dict[str, int] = {}
        self.nil_id: dict[str, int] = {}
        for p in self.productions:
            if p.synthetic:
                elem = p.lhs[:-1]
                (self.cons_id if p.fields else self.nil_id)[elem] = p.id
        self.token_fields = {(p.id, f.name) for p in self.productions for f in p.fields if f.type == TOKEN}
        self._min_size = self._productive_sizes()

    def __len__(self):
        return len(self.productions)

    def production(self, pid: int) -> Production:
        return self.productions[pid]

    def is_nonterminal(self, name):
        return name in self.by_lhs

    def hash64(self) -> int:
        text = "\n".join(str(p) for p in self.productions)
        return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")

    def _productive_sizes(self):
        # smallest derivation length per nonterminal; undefined means non-productive
        size: dict[str, int] = {}
        changed = True
        while changed:
            changed = False
            for p in self.productions:
                total = 1
                for f in p.fields:
                    if f.type == TOKEN:
                        total += 2
                    elif f.type in size:
                        total += size[f.type]
                    else:
                        break
                else:
                    if total < size.get(p.lhs, 1 << 60):
                        size[p.lhs] = total
                        changed = True
        return size

    def min_derivation_length(self, slot_type: str) -> int:
        if slot_type == TOKEN:
            return 2
        return self._min_size[slot_type]


def load_grammar(text: str) -> Grammar:
    raw = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise GrammarSyntaxError(lineno, f"cannot parse production {line!r}")
        lhs, ctor, args = m.group(1), m.group(2), m.group(3)
        fields = []
        if args and args.strip():
            for part in args.split(","):
                fm = _FIELD_RE.match(part)
                if not fm:
                    raise GrammarSyntaxError(lineno, f"bad field {part.strip()!r}")
                name, ftype, star = fm.groups()
                if ftype == TOKEN and star:
                    raise GrammarSyntaxError(lineno, "token fields are already sequences; 'token*' is not allowed")
                fields.append(Field(name, ftype, bool(star)))
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise GrammarSyntaxError(lineno, f"duplicate field name in {ctor}")
        raw.append((lineno, lhs, ctor, fields))
    if not raw:
        raise GrammarSyntaxError(0, "grammar has no productions")

    declared = {lhs for _, lhs, _, _ in raw}
    seen_ctor = {}
    for lineno, lhs, ctor, fields in raw:
        if ctor in seen_ctor:
            raise DuplicateConstructorError(f"line {lineno}: constructor {ctor!r} already defined on line {seen_ctor[ctor]}")
        seen_ctor[ctor] = lineno
        for f in fields:
            if f.type != TOKEN and f.type not in declared:
                raise UndefinedNonterminalError(f"line {lineno}: field {f.name!r} of {ctor} has undeclared type {f.type!r}")

    prods = [Production(i, lhs, ctor, tuple(fields)) for i, (_, lhs, ctor, fields) in enumerate(raw)]
    elems = []
    for p in prods:
        for f in p.fields:
            if f.is_sequence and f.type not in elems:
                elems.append(f.type)
    for elem in elems:
        st = seq_type(elem)
        prods.append(Production(len(prods), st, f"Cons[{elem}]", (Field("head", elem), Field("tail", st)), True))
        prods.append(Production(len(prods), st, f"Nil[{elem}]", (), True))
    g = Grammar(prods, raw[0][1])
    dead = [nt for nt in g.nonterminals if nt not in g._min_size]
    if dead:
        raise GrammarError(f"nonterminals with no finite derivation: {', '.join(dead)}")
    return g


# ------------------------------------------------------------------- AST


@dataclass(frozen=True)
class AstNode:
    """Internal node (``production`` set) or terminal leaf (``tokens`` set).

    Children hold one slot per field: an AstNode, or a tuple of AstNodes for
    a sequence field.
    """

    production: int | None = None
    children: tuple = ()
    tokens: tuple[str, ...] | None = None

    @classmethod
    def leaf(cls, tokens) -> "AstNode":
        if isinstance(tokens, str):
            tokens = tokens.split()
        return cls(tokens=tuple(tokens))

    @property
    def is_leaf(self):
        return self.tokens is not None

    def pretty(self, g: Grammar) -> str:
        if self.is_leaf:
            return repr(" ".join(self.tokens))
        p = g.production(self.production)
        parts = []
        for f, c in zip(p.fields, self.children):
            if f.is_sequence:
                parts.append("[" + ", ".join(x.pretty(g) for x in c) + "]")
            else:
                parts.append(c.pretty(g))
        return f"{p.constructor}({', '.join(parts)})"


@dataclass(frozen=True)
class ApplyRule:
    production: int


@dataclass(frozen=True)
class GenToken:
    token: str


Action = Union[ApplyRule, GenToken]


def action_key(a: Action):
    """Total order over actions used for deterministic tie-breaking."""
    return (0, a.production, "") if isinstance(a, ApplyRule) else (1, 0, a.token)


def check_ast(ast: AstNode, g: Grammar, expected: str | None = None, path=()):
    expected = g.root if expected is None else expected
    if ast.is_leaf:
        raise IllTypedAstError(path, f"expected a {expected} node, found a token leaf")
    if not 0 <= (ast.production or 0) < len(g) or ast.production is None:
        raise IllTypedAstError(path, f"unknown production id {ast.production}")
    p = g.production(ast.production)
    if p.synthetic:
        raise IllTypedAstError(path, f"{p.constructor} cannot appear as a stored node")
    if p.lhs != expected:
        raise IllTypedAstError(path, f"{p.constructor} builds {p.lhs}, expected {expected}")
    if len(ast.children) != len(p.fields):
        raise IllTypedAstError(path, f"{p.constructor} takes {len(p.fields)} children, got {len(ast.children)}")
    for f, c in zip(p.fields, ast.children):
        sub = path + (f"{p.constructor}.{f.name}",)
        if f.type == TOKEN:
            if not isinstance(c, AstNode) or not c.is_leaf:
                raise IllTypedAstError(sub, "expected a token leaf")
            if not c.tokens:
                raise IllTypedAstError(sub, "token leaf is empty")
            if END in c.tokens:
                raise IllTypedAstError(sub, "end token inside a leaf")
        elif f.is_sequence:
            if not isinstance(c, tuple):
                raise IllTypedAstError(sub, "expected a sequence of nodes")
            for i, x in enumerate(c):
                check_ast(x, g, f.type, sub + (str(i),))
        else:
            if not isinstance(c, AstNode):
                raise IllTypedAstError(sub, "expected a node")
            check_ast(c, g, f.type, sub)


def map_leaves(ast: AstNode, fn) -> AstNode:
    """Copy of ``ast`` with every leaf token ``t`` replaced by ``fn(t)``."""
    if ast.is_leaf:
        return AstNode(tokens=tuple(fn(t) for t in ast.tokens))
    kids = tuple(tuple(map_leaves(x, fn) for x in c) if isinstance(c, tuple) else map_leaves(c, fn)
                 for c in ast.children)
    return AstNode(ast.production, kids)


def ast_to_actions(ast: AstNode, g: Grammar) -> list[Action]:
    check_ast(ast, g)
    out: list[Action] = []

    def visit(node):
        out.append(ApplyRule(node.production))
        p = g.production(node.production)
        for f, c in zip(p.fields, node.children):
            if f.type == TOKEN:
                out.extend(GenToken(t) for t in c.tokens)
                out.append(GenToken(END))
            elif f.is_sequence:
                for x in c:
                    out.append(ApplyRule(g.cons_id[f.type]))
                    visit(x)
                out.append(ApplyRule(g.nil_id[f.type]))
            else:
                visit(c)

    visit(ast)
    return out


def actions_to_ast(actions, g: Grammar) -> AstNode:
    actions = list(actions)
    pos = 0

    def take(expected):
        nonlocal pos
        if pos >= len(actions):
            raise IncompleteDerivationError(f"derivation incomplete after {len(actions)} actions; next slot is {expected}")
        a = actions[pos]
        pos += 1
        return a

    def node(expected):
        a = take(expected)
        if not isinstance(a, ApplyRule) or not 0 <= a.production < len(g) or g.production(a.production).lhs != expected:
            raise IllegalActionError(pos - 1, expected, a)
        p = g.production(a.production)
        children = []
        for f in p.fields:
            if f.type == TOKEN:
                toks = []
                while True:
                    t = take(TOKEN)
                    if not isinstance(t, GenToken):
                        raise IllegalActionError(pos - 1, TOKEN, t)
                    if t.token == END:
                        if not toks:
                            raise IllegalActionError(pos - 1, "first token of a field", t)
                        break
                    toks.append(t.token)
                children.append(AstNode(tokens=tuple(toks)))
            elif f.is_sequence:
                items = []
                st = seq_type(f.type)
                while True:
                    a2 = take(st)
                    if a2 == ApplyRule(g.cons_id[f.type]):
                        items.append(node(f.type))
                    elif a2 == ApplyRule(g.nil_id[f.type]):
                        break
                    else:
                        raise IllegalActionError(pos - 1, st, a2)
                children.append(tuple(items))
            else:
                children.append(node(f.type))
        return AstNode(production=p.id, children=tuple(children))

    ast = node(g.root)
    if pos != len(actions):
        raise TrailingActionsError(f"{len(actions) - pos} actions remain after the derivation completed at step {pos}")
    return ast


# ----------------------------------------------------------- frontier state


class Slot(NamedTuple):
    type: str  # nonterminal name or TOKEN
    parent: int  # step index of the ApplyRule that created the slot; -1 at the root


class FrontierState:
    """Pending slots of a partial derivation; the top is the leftmost one."""

    __slots__ = ("stack", "t", "ntok")

    def __init__(self, stack=(), t=0, ntok=0):
        self.stack = stack  # tuple, top at the end
        self.t = t
        self.ntok = ntok  # tokens already emitted into the top token field

    @classmethod
    def initial(cls, g: Grammar) -> "FrontierState":
        return cls((Slot(g.root, -1),), 0, 0)

    @property
    def complete(self):
        return not self.stack

    @property
    def top(self) -> Slot:
        return self.stack[-1]

    def apply(self, a: Action, g: Grammar) -> "FrontierState":
        if self.complete:
            raise TrailingActionsError(f"derivation already complete at step {self.t}")
        slot = self.stack[-1]
        rest = self.stack[:-1]
        if slot.type == TOKEN:
            if not isinstance(a, GenToken):
                raise IllegalActionError(self.t, TOKEN, a)
            if a.token == END:
                if self.ntok == 0:
                    raise IllegalActionError(self.t, "first token of a field", a)
                return FrontierState(rest, self.t + 1, 0)
            return FrontierState(self.stack, self.t + 1, self.ntok + 1)
        if not isinstance(a, ApplyRule) or not 0 <= a.production < len(g) or g.production(a.production).lhs != slot.type:
            raise IllegalActionError(self.t, slot.type, a)
        p = g.production(a.production)
        new = tuple(Slot(seq_type(f.type) if f.is_sequence else f.type, self.t) for f in reversed(p.fields))
        return FrontierState(rest + new, self.t + 1, 0)


# ------------------------------------------------------------- action space


class ActionSpace:
    """Index layout ``[rules P][vocab K][end][copy max_input_len]``.

    The vocab block holds ordinary code tokens only (no PAD/UNK/END).
    """

    def __init__(self, g: Grammar, vocab_tokens, max_input_len: int):
        self.g = g
        self.vocab_tokens = list(vocab_tokens)
        self.max_input_len = int(max_input_len)
        self.n_rules = len(g)
        self.n_vocab = len(self.vocab_tokens)
        self.vocab_offset = self.n_rules
        self.end_index = self.n_rules + self.n_vocab
        self.copy_offset = self.end_index + 1
        self.size = self.copy_offset + self.max_input_len
        self._tok_index = {t: i for i, t in enumerate(self.vocab_tokens)}

    def vocab_index(self, token) -> int | None:
        """Position of ``token`` in the vocab softmax (K means END), or None."""
        if token == END:
            return self.n_vocab
        return self._tok_index.get(token)

    def action_at(self, index: int, input_tokens) -> Action:
        if index < self.n_rules:
            return ApplyRule(index)
        if index < self.end_index:
            return GenToken(self.vocab_tokens[index - self.vocab_offset])
        if index == self.end_index:
            return GenToken(END)
        return GenToken(input_tokens[index - self.copy_offset])


def rule_mask(state: FrontierState, g: Grammar) -> np.ndarray:
    m = np.zeros(len(g), dtype=bool)
    if not state.complete and state.top.type != TOKEN:
        m[g.by_lhs[state.top.type]] = True
    return m


def legal_action_mask(state: FrontierState, space: ActionSpace, input_tokens) -> np.ndarray:
    if state.complete:
        raise ValueError("legal_action_mask: derivation is already complete")
    if len(input_tokens) > space.max_input_len:
        raise ValueError(f"input has {len(input_tokens)} tokens, more than max_input_len={space.max_input_len}")
    m = np.zeros(space.size, dtype=bool)
    if state.top.type == TOKEN:
        m[space.vocab_offset : space.end_index] = True
        m[space.end_index] = state.ntok > 0
        m[space.copy_offset : space.copy_offset + len(input_tokens)] = True
    else:
        m[: space.n_rules] = rule_mask(state, space.g)
    return m


def random_derivation(g: Grammar, rng: np.random.Generator, tokens, p_end=0.5, max_steps=200):
    """Actions of a random legal derivation, or None if ``max_steps`` ran out.

    Rules are drawn uniformly among the legal ones; inside a token field the
    field closes with probability ``p_end`` once it holds a token, otherwise a
    token is drawn uniformly from ``tokens``.
    """
    tokens = list(tokens)
    state = FrontierState.initial(g)
    actions = []
    while not state.complete:
        if len(actions) >= max_steps:
            return None
        slot = state.top
        if slot.type == TOKEN:
            if state.ntok > 0 and rng.random() < p_end:
                a = GenToken(END)
            else:
                a = GenToken(tokens[int(rng.integers(len(tokens)))])
        else:
            ids = g.by_lhs[slot.type]
            a = ApplyRule(ids[int(rng.integers(len(ids)))])
        actions.append(a)
        state = state.apply(a, g)
    return actions


# ----------------------------------------------------------- concrete syntax
#
# A node renders as ``ctor(arg, ...)``; a sequence field as ``[a, b]``; a
# token leaf as its tokens joined by single spaces.  A nonterminal with one
# production whose only field is a token field is elided to the bare leaf.

_DELIMS = set("()[],")


def _elided(g: Grammar, nt: str) -> bool:
    ids = g.by_lhs[nt]
    if len(ids) != 1:
        return False
    f = g.production(ids[0]).fields
    return len(f) == 1 and f[0].type == TOKEN


def _check_token(tok):
    if not tok or any(c in _DELIMS or c.isspace() for c in tok) or tok == END:
        raise ValueError(f"token {tok!r} cannot be rendered")


def render_code(ast: AstNode, g: Grammar) -> str:
    check_ast(ast, g)

    def leaf(node):
        for t in node.tokens:
            _check_token(t)
        return " ".join(node.tokens)

    def visit(node):
        p = g.production(node.production)
        if _elided(g, p.lhs):
            return leaf(node.children[0])
        parts = []
        for f, c in zip(p.fields, node.children):
            if f.type == TOKEN:
                parts.append(leaf(c))
            elif f.is_sequence:
                parts.append("[" + ", ".join(visit(x) for x in c) + "]")
            else:
                parts.append(visit(c))
        return f"{p.constructor}({', '.join(parts)})"

    return visit(ast)


def parse_code(code: str, g: Grammar) -> AstNode:
    n = len(code)
    pos = 0

    def ws():
        nonlocal pos
        while pos < n and code[pos].isspace():
            pos += 1

    def expect(ch):
        nonlocal pos
        ws()
        if pos >= n or code[pos] != ch:
            found = repr(code[pos]) if pos < n else "end of input"
            raise CodeParseError(pos, f"expected {ch!r}, found {found}")
        pos += 1

    def peek():
        ws()
        return code[pos] if pos < n else ""

    def leaf():
        nonlocal pos
        ws()
        toks = []
        while pos < n and code[pos] not in _DELIMS:
            start = pos
            while pos < n and code[pos] not in _DELIMS and not code[pos].isspace():
                pos += 1
            toks.append(code[start:pos])
            ws()
        if not toks:
            raise CodeParseError(pos, "expected a token")
        if END in toks:
            raise CodeParseError(pos, f"reserved token {END!r} in code")
        return AstNode(tokens=tuple(toks))

    def node(nt):
        nonlocal pos
        if _elided(g, nt):
            pid = g.by_lhs[nt][0]
            return AstNode(production=pid, children=(leaf(),))
        ws()
        start = pos
        while pos < n and (code[pos].isalnum() or code[pos] == "_"):
            pos += 1
        name = code[start:pos]
        if not name:
            raise CodeParseError(start, f"expected a constructor of {nt}")
        p = g.by_constructor.get(name)
        if p is None or p.lhs != nt:
            raise CodeParseError(start, f"{name!r} is not a constructor of {nt}")
        expect("(")
        children = []
        for i, f in enumerate(p.fields):
            if i:
                expect(",")
            if f.type == TOKEN:
                children.append(leaf())
            elif f.is_sequence:
                expect("[")
                items = []
                if peek() != "]":
                    items.append(node(f.type))
                    while peek() == ",":
                        expect(",")
                        items.append(node(f.type))
                expect("]")
                children.append(tuple(items))
            else:
                children.append(node(f.type))
        expect(")")
        return AstNode(production=p.id, children=tuple(children))

    if not code.strip():
        raise CodeParseError(0, "empty input")
    ast = node(g.root)
    ws()
    if pos != n:
        raise CodeParseError(pos, f"unexpected trailing text {code[pos:]!r}")
    return ast

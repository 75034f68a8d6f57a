"""Expression mini-language for user-defined tensor transformations.

Covers elementwise arithmetic, a fixed function vocabulary, and trailing
row reductions.  The surface syntax is function-call style:

    exp(s - reduceMax(s)) / reduceSum(exp(s - reduceMax(s)))
    s * where(kidx <= qidx, 1, 0)
    q / sqrt(dimqk)

Precedence: unary minus binds tighter than `*`/`/`, which bind tighter
than `+`/`-`.  Comparisons are only legal as the first argument of
`where`.  `inf` is a literal.  `sqrt` folds on literal (or named
constant) arguments; it is not a tensor primitive.  Division by a
lexical zero literal is rejected at parse time.

`lower` turns an AST into graph nodes against a name environment; a
context flag restricts row reductions so purely elementwise positions
(q/k/v/output/h modifications) reject them early.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import LowerError, ParseError
from .graph import Graph, Prim

# ───────────────────────────────── AST ─────────────────────────────────


@dataclass(frozen=True, slots=True)
class Literal:
    value: float


@dataclass(frozen=True, slots=True)
class Var:
    name: str


@dataclass(frozen=True, slots=True)
class Unary:
    op: str  # "-"
    operand: "Expr"


@dataclass(frozen=True, slots=True)
class Binary:
    op: str  # + - * /
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True, slots=True)
class Compare:
    op: str  # == != < <= > >=
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True, slots=True)
class Call:
    func: str
    args: tuple["Expr", ...]


Expr = Literal | Var | Unary | Binary | Compare | Call

FUNCS: dict[str, int] = {
    "exp": 1, "exp2": 1, "log": 1, "abs": 1, "tanh": 1, "sigmoid": 1,
    "relu": 1, "sqrt": 1,
    "reduceSum": 1, "reduceMax": 1, "reduceAbssum": 1,
    "max": 2, "min": 2,
    "clamp": 3, "where": 3,
}

REDUCTIONS = {"reduceSum", "reduceMax", "reduceAbssum"}

# ──────────────────────────────── lexer ────────────────────────────────


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # number | ident | func | punct | end
    text: str
    start: int
    end: int


_PUNCT2 = ("==", "!=", "<=", ">=")
_PUNCT1 = "+-*/(),<>"


def tokenize(src: str) -> list[Token]:
    """Scan source into tokens carrying byte spans; idents naming a
    known function are classified as `func` tokens."""
    toks: list[Token] = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and src[j].isdigit():
                j += 1
            if j < n and src[j] == ".":
                j += 1
                while j < n and src[j].isdigit():
                    j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k >= n or not src[k].isdigit():
                    raise ParseError("malformed exponent", offset=j)
                j = k
                while j < n and src[j].isdigit():
                    j += 1
            toks.append(Token("number", src[i:j], i, j))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            text = src[i:j]
            kind = "func" if text in FUNCS else "ident"
            toks.append(Token(kind, text, i, j))
            i = j
            continue
        two = src[i:i + 2]
        if two in _PUNCT2:
            toks.append(Token("punct", two, i, i + 2))
            i += 2
            continue
        if c in _PUNCT1:
            toks.append(Token("punct", c, i, i + 1))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", offset=i)
    toks.append(Token("end", "", n, n))
    return toks


# ─────────────────────────────── parser ───────────────────────────────


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = tokenize(src)
        self.pos = 0

    def peek(self) -> Token:
        return self.toks[self.pos]

    def next(self) -> Token:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.kind == "end" or tok.text != text:
            raise ParseError(f"expected {text!r}", offset=tok.start)
        return tok

    # cmp := sum (cmpop sum)?   (no chaining)
    def comparison(self) -> Expr:
        lhs = self.additive()
        tok = self.peek()
        if tok.kind == "punct" and tok.text in ("==", "!=", "<", "<=", ">", ">="):
            self.next()
            rhs = self.additive()
            nxt = self.peek()
            if nxt.kind == "punct" and nxt.text in ("==", "!=", "<", "<=", ">", ">="):
                raise ParseError("chained comparisons are not supported",
                                 offset=nxt.start)
            return Compare(tok.text, lhs, rhs)
        return lhs

    def additive(self) -> Expr:
        lhs = self.multiplicative()
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.text in "+-":
                self.next()
                rhs = self.multiplicative()
                lhs = Binary(tok.text, lhs, rhs)
            else:
                return lhs

    def multiplicative(self) -> Expr:
        lhs = self.unary()
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.text in "*/":
                self.next()
                rhs = self.unary()
                if tok.text == "/" and isinstance(rhs, Literal) and rhs.value == 0.0:
                    raise ParseError("division by zero literal", offset=tok.start)
                lhs = Binary(tok.text, lhs, rhs)
            else:
                return lhs

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "-":
            self.next()
            operand = self.unary()
            if isinstance(operand, Literal):
                return Literal(-operand.value)
            return Unary("-", operand)
        return self.atom()

    def atom(self) -> Expr:
        tok = self.next()
        if tok.kind == "number":
            return Literal(float(tok.text))
        if tok.kind == "ident":
            if tok.text == "inf":
                return Literal(math.inf)
            return Var(tok.text)
        if tok.kind == "func":
            name = tok.text
            self.expect("(")
            args: list[Expr] = [self.comparison()]
            while self.peek().text == "," and self.peek().kind == "punct":
                self.next()
                args.append(self.comparison())
            self.expect(")")
            if len(args) != FUNCS[name]:
                raise ParseError(
                    f"{name} takes {FUNCS[name]} argument(s), got {len(args)}",
                    offset=tok.start)
            return Call(name, tuple(args))
        if tok.kind == "punct" and tok.text == "(":
            inner = self.comparison()
            self.expect(")")
            return inner
        raise ParseError("expected an expression", offset=tok.start)


def parse(src: str) -> Expr:
    """Parse a single expression; raises ParseError with a byte offset."""
    p = _Parser(src)
    expr = p.comparison()
    tail = p.peek()
    if tail.kind != "end":
        raise ParseError("trailing input after expression", offset=tail.start)
    return expr


# ─────────────────────────────── printer ───────────────────────────────

_LEVEL_CMP, _LEVEL_ADD, _LEVEL_MUL, _LEVEL_UNARY, _LEVEL_ATOM = 0, 1, 2, 3, 4


def _fmt_number(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _render(expr: Expr, level: int) -> str:
    if isinstance(expr, Literal):
        text = _fmt_number(expr.value)
        # negative literals act like unary expressions for precedence
        mine = _LEVEL_UNARY if text.startswith("-") else _LEVEL_ATOM
        return f"({text})" if mine < level else text
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Call):
        args = ", ".join(_render(a, _LEVEL_CMP) for a in expr.args)
        return f"{expr.func}({args})"
    if isinstance(expr, Unary):
        body = f"-{_render(expr.operand, _LEVEL_UNARY)}"
        return f"({body})" if _LEVEL_UNARY < level else body
    if isinstance(expr, Binary):
        mine = _LEVEL_ADD if expr.op in "+-" else _LEVEL_MUL
        body = (f"{_render(expr.lhs, mine)} {expr.op} "
                f"{_render(expr.rhs, mine + 1)}")
        return f"({body})" if mine < level else body
    if isinstance(expr, Compare):
        body = (f"{_render(expr.lhs, _LEVEL_ADD)} {expr.op} "
                f"{_render(expr.rhs, _LEVEL_ADD)}")
        return f"({body})" if _LEVEL_CMP < level else body
    raise TypeError(f"not an expression: {expr!r}")


def to_source(expr: Expr) -> str:
    """Render an AST back to source with minimal parentheses.

    parse(to_source(parse(s))) == parse(s) for every parsable s.
    """
    return _render(expr, _LEVEL_CMP)


def free_vars(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Unary):
        return free_vars(expr.operand)
    if isinstance(expr, (Binary, Compare)):
        return free_vars(expr.lhs) | free_vars(expr.rhs)
    if isinstance(expr, Call):
        out: set[str] = set()
        for a in expr.args:
            out |= free_vars(a)
        return out
    return set()


# ─────────────────────────────── lowering ───────────────────────────────

_BINOPS = {"+": Prim.ADD, "-": Prim.SUB, "*": Prim.MUL, "/": Prim.DIV}
_CMPS = {"==": Prim.CMP_EQ, "!=": Prim.CMP_NE, "<": Prim.CMP_LT,
         "<=": Prim.CMP_LE, ">": Prim.CMP_GT, ">=": Prim.CMP_GE}
_UNARY_FUNCS = {"exp": Prim.EXP, "exp2": Prim.EXP2, "log": Prim.LOG,
                "abs": Prim.ABS, "tanh": Prim.TANH, "sigmoid": Prim.SIGMOID}
_REDUCE_FUNCS = {"reduceSum": Prim.REDUCE_SUM, "reduceMax": Prim.REDUCE_MAX,
                 "reduceAbssum": Prim.REDUCE_ABSSUM}


def _const_value(expr: Expr, graph: Graph, env: dict[str, int]) -> float | None:
    """Value of an expression that is a literal or a name bound to a
    Const node; None when it is not a compile-time scalar."""
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Unary):
        inner = _const_value(expr.operand, graph, env)
        return None if inner is None else -inner
    if isinstance(expr, Var) and expr.name in env:
        node = graph.node(env[expr.name])
        if node.op is Prim.CONST and node.attr.role != "placeholder":
            return node.params[0]
    return None


def lower(expr: Expr, graph: Graph, env: dict[str, int], *,
          allow_reduce: bool = True, rank: int = 4) -> int:
    """Lower an AST into graph nodes.  `env` maps free names to node ids.

    With allow_reduce=False any row reduction is rejected, which is how
    elementwise-only positions are enforced.  Comparisons may appear only
    as the condition of `where`.
    """
    if isinstance(expr, Compare):
        raise LowerError("comparisons are only allowed inside where()")
    return _lower(expr, graph, env, allow_reduce, rank)


def _lower(expr: Expr, graph: Graph, env: dict[str, int],
           allow_reduce: bool, rank: int) -> int:
    if isinstance(expr, Literal):
        return graph.const(expr.value, rank=rank)
    if isinstance(expr, Var):
        if expr.name not in env:
            raise LowerError(f"unknown name {expr.name!r}",
                             known=sorted(env))
        return env[expr.name]
    if isinstance(expr, Unary):
        return graph.add(Prim.NEG, _lower(expr.operand, graph, env,
                                          allow_reduce, rank))
    if isinstance(expr, Compare):
        raise LowerError("comparisons are only allowed inside where()")
    if isinstance(expr, Binary):
        lhs = _lower(expr.lhs, graph, env, allow_reduce, rank)
        rhs = _lower(expr.rhs, graph, env, allow_reduce, rank)
        return graph.add(_BINOPS[expr.op], lhs, rhs)
    if isinstance(expr, Call):
        name = expr.func
        if name in _UNARY_FUNCS:
            return graph.add(_UNARY_FUNCS[name],
                             _lower(expr.args[0], graph, env, allow_reduce, rank))
        if name in _REDUCE_FUNCS:
            if not allow_reduce:
                raise LowerError(
                    f"{name} is not allowed in an elementwise-only position")
            return graph.add(_REDUCE_FUNCS[name],
                             _lower(expr.args[0], graph, env, allow_reduce, rank))
        if name == "relu":
            x = _lower(expr.args[0], graph, env, allow_reduce, rank)
            return graph.add(Prim.MAX, x, graph.const(0.0, rank=rank))
        if name == "sqrt":
            v = _const_value(expr.args[0], graph, env)
            if v is None:
                raise LowerError("sqrt needs a literal or named constant")
            if v < 0:
                raise LowerError("sqrt of a negative constant", value=v)
            return graph.const(math.sqrt(v), rank=rank)
        if name in ("max", "min"):
            lhs = _lower(expr.args[0], graph, env, allow_reduce, rank)
            rhs = _lower(expr.args[1], graph, env, allow_reduce, rank)
            return graph.add(Prim.MAX if name == "max" else Prim.MIN, lhs, rhs)
        if name == "clamp":
            x = _lower(expr.args[0], graph, env, allow_reduce, rank)
            lo = _const_value(expr.args[1], graph, env)
            hi = _const_value(expr.args[2], graph, env)
            if lo is None or hi is None:
                raise LowerError("clamp bounds must be literal constants")
            return graph.add(Prim.CLAMP, x, params=(lo, hi))
        if name == "where":
            cond = expr.args[0]
            if not isinstance(cond, Compare):
                raise LowerError("where() condition must be a comparison")
            cl = _lower(cond.lhs, graph, env, allow_reduce, rank)
            cr = _lower(cond.rhs, graph, env, allow_reduce, rank)
            c = graph.add(_CMPS[cond.op], cl, cr)
            a = _lower(expr.args[1], graph, env, allow_reduce, rank)
            b = _lower(expr.args[2], graph, env, allow_reduce, rank)
            return graph.add(Prim.WHERE, c, a, b)
        raise LowerError(f"unknown function {name!r}")  # pragma: no cover
    raise LowerError(f"cannot lower {expr!r}")  # pragma: no cover

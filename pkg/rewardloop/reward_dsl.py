"""
The reward language candidate rewards are written in.

A program is zero or more `let` bindings followed by one body expression
over environment variables. Programs are parsed by recursive descent,
checked against a variable catalog, and evaluated either per step
(`evaluate`, plain floats) or over a whole episode at once
(`evaluate_batch`, numpy arrays).
"""

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Tuple, Union

import numpy as np

GRAMMAR = """\
program  := (let_stmt NEWLINE)* expr
let_stmt := "let" IDENT "=" expr
expr     := term (("+"|"-") term)*
term     := factor (("*"|"/") factor)*
factor   := "-" factor | NUMBER | IDENT | call | "(" expr ")"
call     := FUNC "(" args ")"   with FUNC ∈ {exp,abs,sqrt,min,max,tanh,clamp,if}
cond     := expr ("<"|"<="|">"|">="|"==") expr      (only as first arg of if)"""

FUNC_ARITY = {
    "exp": 1,
    "abs": 1,
    "sqrt": 1,
    "tanh": 1,
    "min": 2,
    "max": 2,
    "clamp": 3,
    "if": 3,
}
COMPARISONS = ("<", "<=", ">", ">=", "==")
DIVISION_EPS = 1e-9


class RewardDslError(Exception):
    """Base class of reward language errors."""


class RewardLexError(RewardDslError):
    def __init__(self, pos: int, text: str, where: str, reason: str = "unexpected character"):
        super().__init__(f"{where}: {reason} {text!r}")
        self.pos = pos
        self.text = text


class RewardSyntaxError(RewardDslError):
    def __init__(self, pos: int, expected: Tuple[str, ...], found: str, where: str):
        super().__init__(f"{where}: expected {' or '.join(expected)}, found {found!r}")
        self.pos = pos
        self.expected = expected
        self.found = found


class RewardArityError(RewardDslError):
    def __init__(self, pos: int, func: str, got: int, where: str):
        super().__init__(f"{where}: {func} takes {FUNC_ARITY[func]} argument(s), got {got}")
        self.pos = pos
        self.func = func


class UnknownVariableError(RewardDslError):
    def __init__(self, name: str, pos: int, detail: str = ""):
        super().__init__(f"unknown variable '{name}' at offset {pos}{detail}")
        self.name = name
        self.pos = pos


class DuplicateBindingError(RewardDslError):
    pass


class ShadowingError(RewardDslError):
    pass


class RewardEvaluationError(RewardDslError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class GuardedDivisionError(RewardEvaluationError):
    pass


class NonFiniteRewardError(RewardEvaluationError):
    pass


# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple["Expr", ...]
    pos: int = field(default=0, compare=False)


Expr = Union[Num, Var, Neg, BinOp, Compare, Call]


@dataclass(frozen=True)
class Binding:
    name: str
    expr: Expr
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ParsedProgram:
    bindings: Tuple[Binding, ...]
    body: Expr
    source: str = field(default="", compare=False)


@dataclass(frozen=True)
class RewardProgram:
    bindings: Tuple[Binding, ...]
    body: Expr
    source: str = field(default="", compare=False)
    referenced_vars: frozenset = field(default=frozenset(), compare=False)
    guarded_divisions: int = field(default=0, compare=False)


class VariableCatalog(Protocol):
    def variable_names(self) -> list[str]: ...


# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|[-+*/(),=<>])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # number, ident, let, op, newline, eof
    text: str
    pos: int


def _where(source: str, pos: int) -> str:
    line = source.count("\n", 0, pos) + 1
    col = pos - (source.rfind("\n", 0, pos) + 1) + 1
    return f"line {line} col {col}"


def tokenize(source: str) -> list[Token]:
    tokens = []
    depth = 0
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise RewardLexError(pos, source[pos], _where(source, pos))
        kind = m.lastgroup
        text = m.group()
        match kind:
            case "ws" | "comment":
                pass
            case "newline":
                # newlines inside parentheses are plain whitespace
                if depth == 0:
                    tokens.append(Token("newline", text, pos))
            case "ident":
                tokens.append(Token("let" if text == "let" else "ident", text, pos))
            case "op":
                if text == "(":
                    depth += 1
                elif text == ")":
                    depth = max(depth - 1, 0)
                tokens.append(Token("op", text, pos))
            case "number":
                if not math.isfinite(float(text)):
                    raise RewardLexError(pos, text, _where(source, pos), "number out of range")
                tokens.append(Token("number", text, pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(source)))
    return tokens


# parser


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, *expected: str):
        tok = self.peek()
        found = tok.text if tok.kind != "eof" else "end of input"
        if tok.kind == "newline":
            found = "newline"
        raise RewardSyntaxError(tok.pos, expected, found, _where(self.source, tok.pos))

    def expect_op(self, text: str) -> Token:
        tok = self.peek()
        if tok.kind == "op" and tok.text == text:
            return self.advance()
        self.fail(repr(text))

    def skip_newlines(self) -> None:
        while self.peek().kind == "newline":
            self.advance()

    def program(self) -> ParsedProgram:
        bindings = []
        self.skip_newlines()
        while self.peek().kind == "let":
            bindings.append(self.let_stmt())
            if self.peek().kind != "newline":
                self.fail("newline")
            self.skip_newlines()
        body = self.expr()
        self.skip_newlines()
        if self.peek().kind != "eof":
            self.fail("end of input", "operator")
        return ParsedProgram(tuple(bindings), body, self.source)

    def let_stmt(self) -> Binding:
        self.advance()  # let
        name = self.peek()
        if name.kind != "ident":
            self.fail("identifier")
        if name.text in FUNC_ARITY:
            self.fail("identifier (not a function name)")
        self.advance()
        self.expect_op("=")
        return Binding(name.text, self.expr(), name.pos)

    def expr(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.peek().kind == "op" and self.peek().text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Expr:
        tok = self.peek()
        match tok.kind:
            case "number":
                self.advance()
                return Num(float(tok.text))
            case "ident":
                self.advance()
                nxt = self.peek()
                if nxt.kind == "op" and nxt.text == "(":
                    if tok.text not in FUNC_ARITY:
                        raise RewardSyntaxError(
                            tok.pos, tuple(sorted(FUNC_ARITY)), tok.text, _where(self.source, tok.pos)
                        )
                    return self.call(tok)
                if tok.text in FUNC_ARITY:
                    self.fail("'('")
                return Var(tok.text, tok.pos)
            case "op" if tok.text == "-":
                self.advance()
                return Neg(self.factor())
            case "op" if tok.text == "(":
                self.advance()
                node = self.expr()
                self.expect_op(")")
                return node
        self.fail("number", "identifier", "function call", "'('", "'-'")

    def call(self, func: Token) -> Call:
        self.expect_op("(")
        args: list[Expr] = []
        if func.text == "if":
            args.append(self.cond())
        else:
            args.append(self.expr())
        while self.peek().kind == "op" and self.peek().text == ",":
            self.advance()
            args.append(self.expr())
        if self.peek().kind != "op" or self.peek().text != ")":
            self.fail("','", "')'")
        self.advance()
        if len(args) != FUNC_ARITY[func.text]:
            raise RewardArityError(func.pos, func.text, len(args), _where(self.source, func.pos))
        return Call(func.text, tuple(args), func.pos)

    def cond(self) -> Compare:
        left = self.expr()
        tok = self.peek()
        if tok.kind != "op" or tok.text not in COMPARISONS:
            self.fail(*(repr(c) for c in COMPARISONS))
        self.advance()
        return Compare(tok.text, left, self.expr())


def parse(source: str) -> ParsedProgram:
    return _Parser(source).program()


# checker


def _free_vars(node: Expr, out: list[Var]) -> None:
    match node:
        case Num():
            pass
        case Var():
            out.append(node)
        case Neg(operand):
            _free_vars(operand, out)
        case BinOp(_, left, right) | Compare(_, left, right):
            _free_vars(left, out)
            _free_vars(right, out)
        case Call(_, args):
            for a in args:
                _free_vars(a, out)


def _count_divisions(node: Expr) -> int:
    match node:
        case BinOp(op, left, right):
            return (op == "/") + _count_divisions(left) + _count_divisions(right)
        case Compare(_, left, right):
            return _count_divisions(left) + _count_divisions(right)
        case Neg(operand):
            return _count_divisions(operand)
        case Call(_, args):
            return sum(_count_divisions(a) for a in args)
        case _:
            return 0


def check(program: ParsedProgram, schema: VariableCatalog) -> RewardProgram:
    variables = set(schema.variable_names())
    later = {b.name for b in program.bindings}
    defined: set[str] = set()
    referenced: set[str] = set()

    def resolve(node: Expr, context: str) -> None:
        names: list[Var] = []
        _free_vars(node, names)
        for var in names:
            if var.name in defined:
                continue
            if var.name in variables:
                referenced.add(var.name)
                continue
            detail = f" in {context}"
            if var.name in later:
                detail += f" ('{var.name}' is bound later)"
            raise UnknownVariableError(var.name, var.pos, detail)

    for b in program.bindings:
        if b.name in defined:
            raise DuplicateBindingError(f"binding '{b.name}' is defined twice")
        if b.name in variables:
            raise ShadowingError(f"binding '{b.name}' shadows an environment variable")
        resolve(b.expr, f"binding '{b.name}'")
        defined.add(b.name)
    resolve(program.body, "body")

    divisions = sum(_count_divisions(b.expr) for b in program.bindings)
    divisions += _count_divisions(program.body)
    return RewardProgram(
        bindings=program.bindings,
        body=program.body,
        source=program.source,
        referenced_vars=frozenset(referenced),
        guarded_divisions=divisions,
    )


def compile_reward(source: str, schema: VariableCatalog) -> RewardProgram:
    return check(parse(source), schema)


# scalar evaluation


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteRewardError(f"{what} produced {value}")
    return value


def _eval(node: Expr, env: Mapping[str, float]) -> float:
    match node:
        case Num(value):
            return value
        case Var(name):
            try:
                return env[name]
            except KeyError:
                raise RewardEvaluationError(f"state lacks variable '{name}'")
        case Neg(operand):
            return -_eval(operand, env)
        case BinOp(op, left, right):
            a = _eval(left, env)
            b = _eval(right, env)
            match op:
                case "+":
                    return _finite(a + b, "'+'")
                case "-":
                    return _finite(a - b, "'-'")
                case "*":
                    return _finite(a * b, "'*'")
                case "/":
                    if abs(b) < DIVISION_EPS:
                        raise GuardedDivisionError(f"division by {b!r}")
                    return _finite(a / b, "'/'")
        case Call("if", (cond, then, other)):
            return _eval(then, env) if _compare(cond, env) else _eval(other, env)
        case Call(func, args):
            values = [_eval(a, env) for a in args]
            return _apply(func, values)
    raise RewardEvaluationError(f"cannot evaluate {node!r}")


def _compare(cond: Compare, env: Mapping[str, float]) -> bool:
    a = _eval(cond.left, env)
    b = _eval(cond.right, env)
    match cond.op:
        case "<":
            return a < b
        case "<=":
            return a <= b
        case ">":
            return a > b
        case ">=":
            return a >= b
        case "==":
            return a == b
    raise RewardEvaluationError(f"unknown comparison {cond.op}")


def _apply(func: str, values: list[float]) -> float:
    match func:
        case "exp":
            try:
                return math.exp(values[0])
            except OverflowError:
                raise NonFiniteRewardError(f"exp({values[0]!r}) overflows")
        case "abs":
            return abs(values[0])
        case "sqrt":
            if values[0] < 0:
                raise NonFiniteRewardError(f"sqrt of negative value {values[0]!r}")
            return math.sqrt(values[0])
        case "tanh":
            return math.tanh(values[0])
        case "min":
            return min(values[0], values[1])
        case "max":
            return max(values[0], values[1])
        case "clamp":
            x, lo, hi = values
            return min(max(x, lo), hi)
    raise RewardEvaluationError(f"unknown function {func}")


def evaluate(program: RewardProgram, state: Mapping[str, float]) -> float:
    """Reward of one step; raises instead of returning a non-finite value."""
    env = dict(state)
    for b in program.bindings:
        env[b.name] = _eval(b.expr, env)
    return _finite(_eval(program.body, env), "reward")


# batch evaluation


def _first_step(mask: np.ndarray) -> int:
    return int(np.argmax(mask))


def _check_finite_vec(values: np.ndarray, mask: np.ndarray, what: str) -> np.ndarray:
    bad = mask & ~np.isfinite(values)
    if bad.any():
        step = _first_step(bad)
        raise NonFiniteRewardError(f"{what} produced {values[step]}", step)
    return values


def _eval_vec(node: Expr, env: Mapping[str, np.ndarray], mask: np.ndarray) -> np.ndarray:
    n = mask.shape[0]
    match node:
        case Num(value):
            return np.full(n, value)
        case Var(name):
            try:
                return np.broadcast_to(np.asarray(env[name], dtype=np.float64), (n,))
            except KeyError:
                raise RewardEvaluationError(f"state lacks variable '{name}'")
        case Neg(operand):
            return -_eval_vec(operand, env, mask)
        case BinOp(op, left, right):
            a = _eval_vec(left, env, mask)
            b = _eval_vec(right, env, mask)
            with np.errstate(all="ignore"):
                match op:
                    case "+":
                        out = a + b
                    case "-":
                        out = a - b
                    case "*":
                        out = a * b
                    case "/":
                        small = np.abs(b) < DIVISION_EPS
                        bad = mask & small
                        if bad.any():
                            step = _first_step(bad)
                            raise GuardedDivisionError(f"division by {b[step]!r}", step)
                        out = a / np.where(small, 1.0, b)
            return _check_finite_vec(out, mask, f"'{op}'")
        case Call("if", (cond, then, other)):
            c = _compare_vec(cond, env, mask)
            a = _eval_vec(then, env, mask & c)
            b = _eval_vec(other, env, mask & ~c)
            return np.where(c, a, b)
        case Call(func, args):
            values = [_eval_vec(a, env, mask) for a in args]
            return _apply_vec(func, values, mask)
    raise RewardEvaluationError(f"cannot evaluate {node!r}")


def _compare_vec(cond: Compare, env: Mapping[str, np.ndarray], mask: np.ndarray) -> np.ndarray:
    a = _eval_vec(cond.left, env, mask)
    b = _eval_vec(cond.right, env, mask)
    match cond.op:
        case "<":
            return a < b
        case "<=":
            return a <= b
        case ">":
            return a > b
        case ">=":
            return a >= b
        case "==":
            return a == b
    raise RewardEvaluationError(f"unknown comparison {cond.op}")


def _apply_vec(func: str, values: list[np.ndarray], mask: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        match func:
            case "exp":
                return _check_finite_vec(np.exp(values[0]), mask, "exp")
            case "abs":
                return np.abs(values[0])
            case "sqrt":
                negative = mask & (values[0] < 0)
                if negative.any():
                    step = _first_step(negative)
                    raise NonFiniteRewardError(f"sqrt of negative value {values[0][step]!r}", step)
                return np.sqrt(np.maximum(values[0], 0.0))
            case "tanh":
                return np.tanh(values[0])
            case "min":
                return np.minimum(values[0], values[1])
            case "max":
                return np.maximum(values[0], values[1])
            case "clamp":
                return np.minimum(np.maximum(values[0], values[1]), values[2])
    raise RewardEvaluationError(f"unknown function {func}")


def evaluate_batch(program: RewardProgram, columns: Mapping[str, np.ndarray], steps: int) -> np.ndarray:
    """
    Per-step rewards for a whole episode.

    `columns` maps each variable to an array of length `steps` (or a
    scalar). Errors carry the first offending step.
    """
    mask = np.ones(steps, dtype=bool)
    env = dict(columns)
    for b in program.bindings:
        env[b.name] = _eval_vec(b.expr, env, mask)
    return _check_finite_vec(np.asarray(_eval_vec(program.body, env, mask), dtype=np.float64), mask, "reward")


# printing


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def format_expr(node: Expr) -> str:
    match node:
        case Num(value):
            return _format_number(value)
        case Var(name):
            return name
        case Neg(operand):
            return f"(-{format_expr(operand)})"
        case BinOp(op, left, right):
            return f"({format_expr(left)} {op} {format_expr(right)})"
        case Compare(op, left, right):
            return f"{format_expr(left)} {op} {format_expr(right)}"
        case Call(func, args):
            return f"{func}({', '.join(format_expr(a) for a in args)})"
    raise TypeError(f"not an expression: {node!r}")


def pretty_print(program: Union[ParsedProgram, RewardProgram]) -> str:
    """Canonical, fully parenthesized source; parse() of it gives the same tree."""
    lines = [f"let {b.name} = {format_expr(b.expr)}" for b in program.bindings]
    lines.append(format_expr(program.body))
    return "\n".join(lines)

"""Policy scenarios: parsing, invariant expansion, and evaluation.

A scenario file is line-oriented:

    policy erc20_total_supply
    standard ERC-20
    pool 3
    sym uint256 v
    sym address acc0
    let t = call transfer(acc0, v) from acc0
    assume EXPR
    check EXPR "message" class deviation
    invariant {
      let total = totalSupply()
      check sum over a in ADDRS of balanceOf(a) == total "..." class severe
    }

Expressions: integers (decimal/hex), names, `+ - * / %`, comparisons,
`&& || !`, `ovf_add(x, y)` (unsigned no-overflow predicate),
`sum over a in ADDRS of EXPR` (unrolled across the pool with pairwise
no-overflow guards), `status(NAME)` (success flag of a bound call), and
`ADDRS[i]`.  View-function calls may appear only inside invariant
blocks, where expansion turns them into observation transactions.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace as dc_replace
from itertools import product
from typing import Optional

from . import expr as ex
from .abi import AbiFunction, EncodedCall, encode_calldata, find_function
from .bytecode import Program, assemble, decode
from .expr import Expr
from .machine import Calldata, ExecState, Machine, Transaction

WORD = 256
DEFAULT_POOL_SIZE = 3
DEFAULT_SEED = int.from_bytes(b"S0LAR", "big")


class PolicyParseError(Exception):
    pass


class UnboundName(Exception):
    pass


class TypeError_(Exception):
    pass


class MissingFunction(Exception):
    """The invariant references a function the contract's ABI lacks."""

    def __init__(self, names: list[str]):
        super().__init__(f"ABI lacks function(s): {', '.join(names)}")
        self.names = names


# ---------------------------------------------------------------------------
# Expression AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class Name:
    ident: str


@dataclass(frozen=True)
class AddrIndex:
    index: int


@dataclass(frozen=True)
class Bin:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Un:
    op: str
    operand: object


@dataclass(frozen=True)
class OvfAdd:
    left: object
    right: object


@dataclass(frozen=True)
class Sum:
    var: str
    body: object


@dataclass(frozen=True)
class Status:
    name: str


@dataclass(frozen=True)
class CallRef:
    fn: str
    args: tuple


_TOKEN_RE = re.compile(r"""
    (?P<hex>0x[0-9a-fA-F]+) | (?P<num>\d+) |
    (?P<name>[A-Za-z_]\w*) |
    (?P<op>==|!=|<=|>=|&&|\|\||[-+*/%<>!(),\[\]]) |
    (?P<str>"[^"]*") |
    (?P<space>\s+)
""", re.VERBOSE)


def _tokenize(text: str) -> list[str]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise PolicyParseError(f"bad character {text[pos]!r} in {text!r}")
        pos = m.end()
        if m.lastgroup != "space":
            out.append(m.group())
    return out


class _ExprParser:
    """Precedence-climbing parser for the scenario expression grammar."""

    _PREC = {"||": 1, "&&": 2,
             "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
             "+": 4, "-": 4, "*": 5, "/": 5, "%": 5}

    def __init__(self, tokens: list[str]):
        self.toks = tokens
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expected: Optional[str] = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise PolicyParseError(f"expected {expected!r}, got {tok!r}")
        self.pos += 1
        return tok

    def parse(self) -> object:
        node = self.expr(0)
        if self.peek() is not None:
            raise PolicyParseError(f"trailing tokens: {self.toks[self.pos:]}")
        return node

    def expr(self, min_prec: int) -> object:
        left = self.unary()
        while True:
            op = self.peek()
            prec = self._PREC.get(op or "", 0)
            if prec == 0 or prec < min_prec:
                return left
            self.take()
            right = self.expr(prec + 1)
            left = Bin(op, left, right)

    def unary(self) -> object:
        tok = self.peek()
        if tok == "!":
            self.take()
            return Un("!", self.unary())
        return self.atom()

    def atom(self) -> object:
        tok = self.take()
        if tok == "(":
            inner = self.expr(0)
            self.take(")")
            return inner
        if tok.startswith("0x"):
            return Num(int(tok, 16))
        if tok.isdigit():
            return Num(int(tok))
        if not tok[0].isalpha() and tok[0] != "_":
            raise PolicyParseError(f"unexpected token {tok!r}")

        if tok == "sum":
            self.take("over")
            var = self.take()
            self.take("in")
            self.take("ADDRS")
            self.take("of")
            return Sum(var, self.expr(3))
        if tok == "ovf_add":
            self.take("(")
            a = self.expr(0)
            self.take(",")
            b = self.expr(0)
            self.take(")")
            return OvfAdd(a, b)
        if tok == "status":
            self.take("(")
            name = self.take()
            self.take(")")
            return Status(name)
        if tok == "ADDRS":
            self.take("[")
            idx = self.take()
            self.take("]")
            return AddrIndex(int(idx, 0))
        if self.peek() == "(":
            self.take("(")
            args = []
            if self.peek() != ")":
                args.append(self.expr(0))
                while self.peek() == ",":
                    self.take(",")
                    args.append(self.expr(0))
            self.take(")")
            return CallRef(tok, tuple(args))
        return Name(tok)


def parse_expr(text: str) -> object:
    return _ExprParser(_tokenize(text)).parse()


def _canon(node: object) -> str:
    """Stable textual key for observation-call argument ASTs."""
    if isinstance(node, Num):
        return str(node.value)
    if isinstance(node, AddrIndex):
        return f"ADDRS[{node.index}]"
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, CallRef):
        return f"{node.fn}({','.join(_canon(a) for a in node.args)})"
    raise TypeError_(f"call arguments must be names, integers or ADDRS[i]: {node}")


def _subst(node: object, var: str, value: object) -> object:
    if isinstance(node, Name) and node.ident == var:
        return value
    if isinstance(node, Bin):
        return Bin(node.op, _subst(node.left, var, value),
                   _subst(node.right, var, value))
    if isinstance(node, Un):
        return Un(node.op, _subst(node.operand, var, value))
    if isinstance(node, OvfAdd):
        return OvfAdd(_subst(node.left, var, value),
                      _subst(node.right, var, value))
    if isinstance(node, Sum):
        if node.var == var:
            return node
        return Sum(node.var, _subst(node.body, var, value))
    if isinstance(node, CallRef):
        return CallRef(node.fn, tuple(_subst(a, var, value) for a in node.args))
    return node


def _walk_calls(node: object, pool_size: int, out: dict[str, CallRef]) -> None:
    """Every call instance in node, with sums unrolled across the pool."""
    if isinstance(node, CallRef):
        for a in node.args:
            _walk_calls(a, pool_size, out)
        out.setdefault(_canon(node), node)
    elif isinstance(node, Bin):
        _walk_calls(node.left, pool_size, out)
        _walk_calls(node.right, pool_size, out)
    elif isinstance(node, (Un,)):
        _walk_calls(node.operand, pool_size, out)
    elif isinstance(node, OvfAdd):
        _walk_calls(node.left, pool_size, out)
        _walk_calls(node.right, pool_size, out)
    elif isinstance(node, Sum):
        for i in range(pool_size):
            _walk_calls(_subst(node.body, node.var, AddrIndex(i)),
                        pool_size, out)


def _contains_sum(node: object) -> bool:
    if isinstance(node, Sum):
        return True
    if isinstance(node, Bin):
        return _contains_sum(node.left) or _contains_sum(node.right)
    if isinstance(node, Un):
        return _contains_sum(node.operand)
    if isinstance(node, OvfAdd):
        return _contains_sum(node.left) or _contains_sum(node.right)
    if isinstance(node, CallRef):
        return any(_contains_sum(a) for a in node.args)
    return False


# ---------------------------------------------------------------------------
# Symbolic evaluation
# ---------------------------------------------------------------------------

def _to_word(e: Expr) -> Expr:
    return ex.zext(e, WORD) if e.width == 1 else e


def _to_bool(e: Expr) -> Expr:
    if e.width == 1:
        return e
    return ex.lnot(ex.cmp("eq", e, ex.mk_const(0, WORD)))


def eval_policy_expr(node: object, env: dict[str, Expr], pool: list[int],
                     phase: str = "") -> tuple[Expr, list[Expr]]:
    """Evaluate to a symbolic value plus collected no-overflow guards.

    Bound names resolve through env; call references resolve to the
    observation binding `phase.canonical_form` recorded by the runner.
    """
    guards: list[Expr] = []

    def lookup(key: str) -> Expr:
        if key not in env:
            raise UnboundName(key)
        val = env[key]
        return ex.mk_const(val, WORD) if isinstance(val, int) else val

    def ev(n: object) -> Expr:
        if isinstance(n, Num):
            return ex.mk_const(n.value, WORD)
        if isinstance(n, AddrIndex):
            if n.index >= len(pool):
                raise UnboundName(f"ADDRS[{n.index}] beyond pool size {len(pool)}")
            return ex.mk_const(pool[n.index], WORD)
        if isinstance(n, Name):
            return lookup(n.ident)
        if isinstance(n, Status):
            return lookup(n.name + "#status")
        if isinstance(n, CallRef):
            return lookup((phase + "." if phase else "") + _canon(n))
        if isinstance(n, Un):
            return ex.zext(ex.lnot(_to_bool(ev(n.operand))), WORD)
        if isinstance(n, OvfAdd):
            a, b = _to_word(ev(n.left)), _to_word(ev(n.right))
            return ex.zext(ex.cmp("ule", a, ex.binop("add", a, b)), WORD)
        if isinstance(n, Sum):
            acc: Optional[Expr] = None
            for i in range(len(pool)):
                term = _to_word(ev(_subst(n.body, n.var, AddrIndex(i))))
                if acc is None:
                    acc = term
                else:
                    total = ex.binop("add", acc, term)
                    guards.append(ex.cmp("ule", acc, total))
                    acc = total
            return acc if acc is not None else ex.mk_const(0, WORD)
        if isinstance(n, Bin):
            if n.op in ("&&", "||"):
                a, b = _to_bool(ev(n.left)), _to_bool(ev(n.right))
                op = "and" if n.op == "&&" else "or"
                return ex.zext(ex.binop(op, a, b), WORD)
            a, b = _to_word(ev(n.left)), _to_word(ev(n.right))
            if n.op == "+":
                return ex.binop("add", a, b)
            if n.op == "-":
                return ex.binop("sub", a, b)
            if n.op == "*":
                return ex.binop("mul", a, b)
            if n.op == "/":
                zero = ex.mk_const(0, WORD)
                return ex.ite(ex.cmp("eq", b, zero), zero, ex.binop("udiv", a, b))
            if n.op == "%":
                zero = ex.mk_const(0, WORD)
                return ex.ite(ex.cmp("eq", b, zero), zero, ex.binop("urem", a, b))
            flag = {"==": None, "!=": None, "<": "ult", "<=": "ule",
                    ">": None, ">=": None}[n.op]
            if n.op == "==":
                return ex.zext(ex.cmp("eq", a, b), WORD)
            if n.op == "!=":
                return ex.zext(ex.lnot(ex.cmp("eq", a, b)), WORD)
            if n.op == ">":
                return ex.zext(ex.cmp("ult", b, a), WORD)
            if n.op == ">=":
                return ex.zext(ex.cmp("ule", b, a), WORD)
            return ex.zext(ex.cmp(flag, a, b), WORD)
        raise TypeError_(f"cannot evaluate {n!r}")

    value = ev(node)
    return value, guards


# ---------------------------------------------------------------------------
# Address pool
# ---------------------------------------------------------------------------

@dataclass
class AddressPool:
    addresses: list[int]

    def __post_init__(self):
        assert len(set(self.addresses)) == len(self.addresses), \
            "pool addresses must be pairwise distinct"

    def index(self, addr: int) -> int:
        return self.addresses.index(addr)

    def __iter__(self):
        return iter(self.addresses)

    def __len__(self):
        return len(self.addresses)

    def __getitem__(self, i):
        return self.addresses[i]


MASK160 = (1 << 160) - 1


def harvest_addresses(program: Program, window: int = 5) -> list[int]:
    """PUSH20-style constants adjacent to 160-bit AND masks in the code."""
    insts = [program.insts[pc] for pc in sorted(program.insts)]
    mask_positions = [i for i, inst in enumerate(insts)
                      if inst.immediate == MASK160]
    found: list[int] = []
    for i, inst in enumerate(insts):
        if inst.opcode.mnemonic != "PUSH20" or inst.immediate == MASK160:
            continue
        if any(abs(i - m) <= window for m in mask_positions):
            if inst.immediate not in found:
                found.append(inst.immediate)
    return found


def build_address_pool(program: Optional[Program], n_random: int,
                       declared: list[int] = (),
                       seed: int = DEFAULT_SEED) -> AddressPool:
    """n_random seeded addresses, scenario-declared ones, harvested ones."""
    rng = random.Random(seed)
    addresses: list[int] = []
    while len(addresses) < n_random:
        cand = rng.getrandbits(160)
        if cand and cand not in addresses and cand not in declared:
            addresses.append(cand)
    for addr in declared:
        if addr not in addresses:
            addresses.append(addr)
    if program is not None:
        for addr in harvest_addresses(program):
            if addr not in addresses:
                addresses.append(addr)
    return AddressPool(addresses)


# ---------------------------------------------------------------------------
# Scenario declarations (parsed form)
# ---------------------------------------------------------------------------

@dataclass
class Decl:
    kind: str       # call | assume | check | let (inside invariant)
    bind: Optional[str] = None
    fn: Optional[str] = None
    args: tuple = ()
    sender: Optional[object] = None
    value: Optional[object] = None
    expr: Optional[object] = None
    message: str = ""
    classification: str = "deviation"
    check_id: str = ""
    phase: str = ""


@dataclass
class Scenario:
    name: str = "anonymous"
    standard: str = ""
    pool_size: int = DEFAULT_POOL_SIZE
    syms: list[tuple[str, str]] = field(default_factory=list)  # (type, name)
    steps: list[Decl] = field(default_factory=list)
    invariant: list[Decl] = field(default_factory=list)


_CALL_RE = re.compile(
    r"^call\s+(\w+)\s*\(([^)]*)\)\s*(?:from\s+(.+?))?(?:\s+value\s+(.+))?$")


def parse_scenario(text: str) -> Scenario:
    sc = Scenario()
    lines = text.splitlines()
    i = 0
    check_count = 0
    in_invariant = False
    while i < len(lines):
        raw = lines[i]
        i += 1
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("invariant"):
            if not line.endswith("{"):
                raise PolicyParseError("expected `invariant {`")
            in_invariant = True
            continue
        if line == "}":
            in_invariant = False
            continue

        target = sc.invariant if in_invariant else sc.steps
        head, _, rest = line.partition(" ")
        rest = rest.strip()

        if not in_invariant and head == "policy":
            sc.name = rest
        elif not in_invariant and head == "standard":
            sc.standard = rest
        elif not in_invariant and head == "pool":
            sc.pool_size = int(rest)
        elif not in_invariant and head == "sym":
            typ, name = rest.split()
            if typ not in ("uint256", "address"):
                raise PolicyParseError(f"sym type must be uint256/address: {typ}")
            sc.syms.append((typ, name))
        elif head == "let":
            bind, _, body = rest.partition("=")
            bind = bind.strip()
            body = body.strip()
            if body.startswith("call "):
                target.append(_parse_call(body, bind))
            else:
                target.append(Decl("let", bind=bind, expr=parse_expr(body)))
        elif head == "call":
            target.append(_parse_call(line, None))
        elif head == "assume":
            target.append(Decl("assume", expr=parse_expr(rest)))
        elif head == "check":
            expr_s, message, classification = _split_check(rest)
            check_count += 1
            target.append(Decl(
                "check", expr=parse_expr(expr_s), message=message,
                classification=classification, check_id=f"check{check_count}"))
        else:
            raise PolicyParseError(f"unparseable line: {raw!r}")
    return sc


def _split_check(rest: str) -> tuple[str, str, str]:
    m = re.match(r'^(.*?)\s*"([^"]*)"\s*(?:class\s+(\w+))?\s*$', rest)
    if not m:
        raise PolicyParseError(f'check needs a "message": {rest!r}')
    expr_s, message, classification = m.groups()
    return expr_s, message, classification or "deviation"


def _parse_call(text: str, bind: Optional[str]) -> Decl:
    m = _CALL_RE.match(text.strip())
    if not m:
        raise PolicyParseError(f"unparseable call: {text!r}")
    fn, args_s, sender_s, value_s = m.groups()
    args = tuple(parse_expr(a.strip())
                 for a in args_s.split(",") if a.strip())
    sender = parse_expr(sender_s.strip()) if sender_s else None
    value = parse_expr(value_s.strip()) if value_s else None
    return Decl("call", bind=bind, fn=fn, args=args, sender=sender, value=value)


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# Invariant expansion (one constraint scenario per mutating function)
# ---------------------------------------------------------------------------

def expand_invariant(sc: Scenario, abi: list[AbiFunction]) -> list[Scenario]:
    """Turn an invariant block into per-function constraint scenarios.

    For every state-mutating ABI function F: assume the invariant on the
    initial state (via view-call observations), call F with fully
    symbolic arguments from a symbolic caller, then check the invariant
    again, with the balance-sum no-overflow condition checked explicitly.
    """
    if not sc.invariant:
        return [sc]

    lets: dict[str, object] = {}
    checks: list[Decl] = []
    assumes: list[Decl] = []
    for decl in sc.invariant:
        if decl.kind == "let":
            lets[decl.bind] = _inline(decl.expr, lets)
        elif decl.kind == "check":
            checks.append(dc_replace(decl, expr=_inline(decl.expr, lets)))
        elif decl.kind == "assume":
            assumes.append(dc_replace(decl, expr=_inline(decl.expr, lets)))
        else:
            raise PolicyParseError(
                "invariant blocks may contain let/assume/check only")

    instances: dict[str, CallRef] = {}
    for decl in checks + assumes:
        _walk_calls(decl.expr, sc.pool_size, instances)

    missing = sorted({c.fn for c in instances.values()
                      if find_function(abi, c.fn) is None})
    if missing:
        raise MissingFunction(missing)
    for canon, call in instances.items():
        fn = find_function(abi, call.fn)
        if not fn.view:
            raise PolicyParseError(
                f"invariant references non-view function {call.fn}")

    out: list[Scenario] = []
    for fn in abi:
        if fn.view:
            continue
        steps: list[Decl] = []
        # observe the initial state and assume the invariant over it
        for canon, call in instances.items():
            steps.append(Decl("call", bind=f"pre.{canon}", fn=call.fn,
                              args=call.args, sender=AddrIndex(0)))
        for decl in assumes:
            steps.append(Decl("assume", expr=decl.expr, phase="pre"))
        for decl in checks:
            # assume conjoins the sum no-overflow guards automatically
            steps.append(Decl("assume", expr=decl.expr, phase="pre"))
        # the symbolic transaction under test
        steps.append(Decl("call", bind="txn", fn=fn.name, args=None,
                          sender=None))
        # observe again and check
        for canon, call in instances.items():
            steps.append(Decl("call", bind=f"post.{canon}", fn=call.fn,
                              args=call.args, sender=AddrIndex(0)))
        for decl in checks:
            if _contains_sum(decl.expr):
                steps.append(Decl(
                    "check", expr=_Guards(decl.expr), phase="post",
                    message=f"{decl.message} (sum overflows)",
                    classification=decl.classification,
                    check_id=f"{decl.check_id}-overflow"))
            steps.append(Decl(
                "check", expr=decl.expr, phase="post",
                message=decl.message, classification=decl.classification,
                check_id=decl.check_id))
        out.append(Scenario(
            name=f"{sc.name}:{fn.name}", standard=sc.standard,
            pool_size=sc.pool_size, syms=list(sc.syms), steps=steps))
    return out


@dataclass(frozen=True)
class _Guards:
    """Marker: evaluate only the no-overflow guards of the inner expr."""
    inner: object


def _inline(node: object, lets: dict[str, object]) -> object:
    for name, value in lets.items():
        node = _subst(node, name, value)
    return node


# ---------------------------------------------------------------------------
# Compilation to explorer steps
# ---------------------------------------------------------------------------

_HARNESS_ASSUME = decode(assemble("ASSUME\nSTOP"))
_HARNESS_CHECK = decode(assemble("CHECK\nSTOP"))


@dataclass
class CompiledScenario:
    name: str
    policy: str
    standard: str
    function: str                  # mutating function under test, if any
    steps: list
    env: dict[str, Expr]
    init_assumptions: list[Expr]
    pool: AddressPool
    program: Program
    registry: dict[int, Program]
    self_address: int
    lengths: tuple[int, ...]       # dynamic-array length combo of this variant


class CallStep:
    """A contract-call transaction; arguments resolve per explored path."""

    kind = "call"
    check_id = ""
    message = ""
    classification = ""

    def __init__(self, cs: CompiledScenario, fn: AbiFunction,
                 sender: object, value: object, bind: Optional[str],
                 view: bool, arg_asts: Optional[tuple] = None,
                 encoded: Optional[EncodedCall] = None):
        self.cs = cs
        self.fn = fn
        self.sender = sender        # AST node or Expr
        self.value = value          # AST node or None
        self.bind = bind
        self.view = view
        self.arg_asts = arg_asts    # explicit arguments (lazy encoding)
        self.encoded = encoded      # pre-encoded fully symbolic call
        self.label = fn.name

    def build(self, prev: Optional[ExecState], machine: Machine):
        env = dict(self.cs.env)
        if prev is not None:
            env.update(dict(prev.bindings))
        adds: list[Expr] = []
        needs_sat = False

        if self.encoded is not None:
            enc = self.encoded
        else:
            args = []
            for ast in self.arg_asts:
                if isinstance(ast, Expr):
                    args.append(ast)
                else:
                    if not _static_ast(ast, self.cs):
                        needs_sat = True  # argument depends on path bindings
                    value, guards = eval_policy_expr(ast, env, list(self.cs.pool))
                    adds.extend(guards)
                    args.append(_to_word(value))
            (enc,) = encode_calldata(self.fn, args, list(self.cs.pool),
                                     fresh_hint=self.fn.name)
        adds.extend(enc.assumptions)

        sender, g = _as_value(self.sender, env, self.cs.pool)
        adds.extend(g)
        if self.value is not None:
            callvalue, g = _as_value(self.value, env, self.cs.pool)
            adds.extend(g)
        else:
            callvalue = ex.mk_const(0, WORD)

        ts = ex.fresh_var("timestamp", WORD)
        bn = ex.fresh_var("blocknum", WORD)
        if prev is not None:
            adds.append(ex.cmp("ule", prev.env.timestamp, ts))
            adds.append(ex.cmp("ule", prev.env.blocknumber, bn))

        txn = Transaction(
            program=self.cs.program, calldata=enc.calldata, caller=sender,
            callvalue=callvalue, timestamp=ts, blocknumber=bn,
            self_address=self.cs.self_address, registry=self.cs.registry,
            addr_tagged=enc.addr_tagged, is_view=self.view, label=self.label,
            arg_views=tuple(tuple(v) if isinstance(v, list) else v
                            for v in enc.arg_views))
        return txn, adds, needs_sat

    def decode_return(self, state: ExecState) -> Expr:
        rd = state.return_data
        if rd.size == 0 or not self.fn.outputs:
            return ex.mk_const(0, WORD)
        if rd.word is not None:
            return rd.word
        parts = [rd.byte(i) for i in range(min(rd.size, 32))]
        parts += [ex.mk_const(0, 8)] * (32 - len(parts))
        return ex.concat(*parts)


class ConstraintStep:
    """assume/check clause, run as a one-instruction harness transaction.

    The expression is evaluated against the bindings accumulated along
    the path and seeded onto the initial stack of an ASSUME or CHECK
    program, exactly mirroring the core-language rules.
    """

    view = False
    bind = None

    def __init__(self, cs: CompiledScenario, kind: str, ast: object,
                 check_id: str = "", message: str = "",
                 classification: str = "deviation", phase: str = ""):
        self.cs = cs
        self.kind = kind            # assume | check
        self.ast = ast
        self.check_id = check_id
        self.message = message
        self.classification = classification
        self.phase = phase
        self.label = f"{kind}:{check_id or '-'}"

    def build(self, prev: Optional[ExecState], machine: Machine):
        env = dict(self.cs.env)
        if prev is not None:
            env.update(dict(prev.bindings))
        guards_only = isinstance(self.ast, _Guards)
        ast = self.ast.inner if guards_only else self.ast
        value, guards = eval_policy_expr(ast, env, list(self.cs.pool),
                                         phase=self.phase)
        if guards_only:
            cond = ex.TRUE
            for g in guards:
                cond = ex.binop("and", cond, g)
        else:
            cond = _to_bool(value)
            if self.kind == "assume":
                for g in guards:
                    cond = ex.binop("and", cond, g)
        program = _HARNESS_ASSUME if self.kind == "assume" else _HARNESS_CHECK
        txn = Transaction(
            program=program, calldata=Calldata.concrete(b""),
            caller=ex.mk_const(self.cs.pool[0], WORD),
            callvalue=ex.mk_const(0, WORD),
            timestamp=prev.env.timestamp if prev else ex.fresh_var("timestamp", WORD),
            blocknumber=prev.env.blocknumber if prev else ex.fresh_var("blocknum", WORD),
            self_address=self.cs.self_address, registry=self.cs.registry,
            init_stack=(ex.zext(cond, WORD),), label=self.label,
            kind=self.kind)
        return txn, [], False

    def decode_return(self, state: ExecState) -> Expr:
        return ex.mk_const(0, WORD)


def _as_value(node: object, env: dict, pool) -> tuple[Expr, list[Expr]]:
    if isinstance(node, Expr):
        return node, []
    value, guards = eval_policy_expr(node, env, list(pool))
    return _to_word(value), guards


def _static_ast(node: object, cs: "CompiledScenario") -> bool:
    """True when the expression only touches literals and declared syms
    (its pool/bound side conditions are then satisfiable by construction)."""
    if isinstance(node, (Num, AddrIndex)):
        return True
    if isinstance(node, Name):
        return node.ident in cs.env
    if isinstance(node, Bin):
        return _static_ast(node.left, cs) and _static_ast(node.right, cs)
    if isinstance(node, Un):
        return _static_ast(node.operand, cs)
    return False


def compile_scenario(sc: Scenario, abi: list[AbiFunction], program: Program,
                     registry: Optional[dict[int, Program]] = None,
                     self_address: int = 0xC0DE,
                     pool_size: Optional[int] = None,
                     seed: int = DEFAULT_SEED) -> list[CompiledScenario]:
    """Instantiate a scenario into runnable variants.

    Invariant blocks expand to one scenario per mutating ABI function;
    each then fans out into one variant per combination of dynamic-array
    argument lengths in [0, 3].
    """
    out: list[CompiledScenario] = []
    for flat in expand_invariant(sc, abi):
        out.extend(_compile_flat(flat, abi, program, registry or {},
                                 self_address, pool_size, seed))
    return out


def _compile_flat(sc: Scenario, abi, program, registry, self_address,
                  pool_size, seed) -> list[CompiledScenario]:
    pool = build_address_pool(program, pool_size or sc.pool_size, seed=seed)

    base_env: dict[str, Expr] = {}
    base_assumptions: list[Expr] = []
    for typ, name in sc.syms:
        var = ex.fresh_var(name, WORD,
                           role="address" if typ == "address" else None)
        base_env[name] = var
        if typ == "address":
            base_assumptions.append(_pool_membership(var, pool))

    # enumerate dynamic-array slots of fully symbolic calls
    dyn_slots: list[tuple[int, str]] = []
    for di, decl in enumerate(sc.steps):
        if decl.kind != "call":
            continue
        fn = find_function(abi, decl.fn)
        if fn is None:
            raise MissingFunction([decl.fn])
        if decl.args is None:
            for p in fn.inputs:
                if p.type.endswith("[]"):
                    dyn_slots.append((di, p.name))
        elif any(p.type.endswith("[]") for p in fn.inputs):
            raise TypeError_(
                f"{fn.name}: explicit array arguments are not supported; "
                "use a fully symbolic call")

    combos = [()] if not dyn_slots else list(
        product(range(4), repeat=len(dyn_slots)))

    results = []
    for combo in combos:
        suffix = "" if not combo else f"[{','.join(str(n) for n in combo)}]"
        cs = CompiledScenario(
            name=sc.name + suffix,
            policy=sc.name.split(":")[0], standard=sc.standard,
            function=sc.name.split(":", 1)[1] if ":" in sc.name else "",
            steps=[], env=dict(base_env),
            init_assumptions=list(base_assumptions),
            pool=pool, program=program, registry=registry,
            self_address=self_address, lengths=tuple(combo))
        for di, decl in enumerate(sc.steps):
            if decl.kind == "call":
                cs.steps.append(
                    _compile_call(cs, abi, decl, di, dyn_slots, combo))
            elif decl.kind in ("assume", "check"):
                cs.steps.append(ConstraintStep(
                    cs, decl.kind, decl.expr, decl.check_id, decl.message,
                    decl.classification, phase=decl.phase))
            elif decl.kind == "let":
                value, guards = eval_policy_expr(decl.expr, cs.env, list(pool))
                cs.env[decl.bind] = _to_word(value)
                cs.init_assumptions.extend(guards)
            else:
                raise PolicyParseError(f"unsupported step kind {decl.kind}")
        results.append(cs)
    return results


def _pool_membership(var: Expr, pool) -> Expr:
    member = ex.FALSE
    for addr in pool:
        member = ex.binop("or", ex.cmp("eq", var, ex.mk_const(addr, WORD)),
                          member)
    return member


def _compile_call(cs: CompiledScenario, abi, decl: Decl, decl_index: int,
                  dyn_slots, combo) -> CallStep:
    fn = find_function(abi, decl.fn)
    if decl.args is not None:
        if len(decl.args) != len(fn.inputs):
            raise TypeError_(
                f"{fn.name}: {len(decl.args)} args, ABI wants {len(fn.inputs)}")
        sender = decl.sender if decl.sender is not None else AddrIndex(0)
        return CallStep(cs, fn, sender, decl.value, decl.bind, fn.view,
                        arg_asts=tuple(decl.args))

    # fully symbolic call from a symbolic caller
    caller = ex.fresh_var("caller", WORD, role="address")
    cs.init_assumptions.append(_pool_membership(caller, cs.pool))
    my_lengths = tuple(n for (di, _), n in zip(dyn_slots, combo)
                       if di == decl_index)
    variants = encode_calldata(fn, [None] * len(fn.inputs), list(cs.pool),
                               fresh_hint=fn.name)
    chosen = None
    for v in variants:
        if tuple(v.lengths.values()) == my_lengths:
            chosen = v
            break
    assert chosen is not None, "no calldata variant matches the length combo"
    return CallStep(cs, fn, caller, decl.value, decl.bind, fn.view,
                    encoded=chosen)

"""SMT backend: QF_ABV translation and external solver process driver.

One persistent solver process per analysis.  The asserted conjuncts are
kept in sync with the path constraint being queried via push/pop scopes,
one scope per conjunct, which makes DFS exploration incremental: moving
to a sibling path pops back to the common prefix.

Any SMT-LIB v2 solver that supports QF_ABV and the `echo` command works;
the command is configurable (`--solver` / EVMSYM_SOLVER).
"""

from __future__ import annotations

import os
import selectors
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from typing import Optional

from .expr import Expr, PathConstraint, cmp, lnot, mk_const

DEFAULT_TIMEOUT_MS = 10_000
ENUM_LIMIT = 16

_SENTINEL = "%%done%%"


class SolverCrashed(Exception):
    """Solver process died; carries a stderr excerpt."""


class ProtocolError(Exception):
    """Solver emitted something the protocol does not expect."""


class LimitExceeded(Exception):
    """enumerate_values hit its cap with further values still satisfiable."""

    def __init__(self, limit: int):
        super().__init__(f"more than {limit} satisfying values")
        self.limit = limit


@dataclass
class SolverVerdict:
    status: str  # sat | unsat | unknown
    model: Optional[dict[str, int]] = None
    elapsed_ms: float = 0.0


@dataclass
class QueryCache:
    """Verdict cache keyed on the exact canonical conjunct sequence."""

    entries: dict[tuple, str] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def get(self, key: tuple) -> Optional[str]:
        status = self.entries.get(key)
        if status is not None:
            self.hits += 1
        return status

    def put(self, key: tuple, status: str) -> None:
        self.misses += 1
        self.entries[key] = status


# ---------------------------------------------------------------------------
# SMT-LIB emission
# ---------------------------------------------------------------------------

def _bv_literal(value: int, width: int) -> str:
    if width % 4 == 0:
        return f"#x{value:0{width // 4}x}"
    return f"#b{value:0{width}b}"


def _sort(width: int) -> str:
    return f"(_ BitVec {width})"


def _array_sort(elem_width: int) -> str:
    return f"(Array (_ BitVec 256) (_ BitVec {elem_width}))"


_SMT_OP = {
    "add": "bvadd", "sub": "bvsub", "mul": "bvmul",
    "udiv": "bvudiv", "sdiv": "bvsdiv", "urem": "bvurem", "srem": "bvsrem",
    "and": "bvand", "or": "bvor", "xor": "bvxor",
    "shl": "bvshl", "lshr": "bvlshr", "ashr": "bvashr",
    "not": "bvnot",
}
_SMT_CMP = {"ult": "bvult", "ule": "bvule", "slt": "bvslt", "sle": "bvsle"}


class Emitter:
    """Serializes expression DAGs, naming each compound node once.

    Emission state mirrors the solver's scope stack so that definitions
    made inside a popped scope are re-emitted when needed again.
    """

    def __init__(self) -> None:
        self.frames: list[set[int]] = [set()]
        self.known: set[int] = set()

    def push(self) -> None:
        self.frames.append(set())

    def pop(self) -> None:
        for node_id in self.frames.pop():
            self.known.discard(node_id)

    def reset(self) -> None:
        self.frames = [set()]
        self.known = set()

    def ref(self, e: Expr, out: list[str]) -> str:
        """Emit any missing declarations/definitions for e; return its name."""
        stack = [(e, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in self.known:
                continue
            if not expanded:
                stack.append((node, True))
                for a in node.args:
                    stack.append((a, False))
                continue
            self.known.add(id(node))
            self.frames[-1].add(id(node))
            out.append(self._define(node))
        return _name(e)

    def _define(self, e: Expr) -> str:
        k = e.kind
        if k == "var":
            return f"(declare-const {_name(e)} {_sort(e.width)})"
        if k == "array":
            return f"(declare-const {_name(e)} {_array_sort(e.elem_width)})"
        if k == "const_array":
            sort = _array_sort(e.elem_width)
            lit = _bv_literal(e.aux, e.elem_width)
            return f"(define-fun {_name(e)} () {sort} ((as const {sort}) {lit}))"
        if k == "const":
            body = _bv_literal(e.aux, e.width)
            return f"(define-fun {_name(e)} () {_sort(e.width)} {body})"
        if k in ("store", "load"):
            sort = _array_sort(e.elem_width) if k == "store" else _sort(e.width)
            op = "store" if k == "store" else "select"
            inner = " ".join(_name(a) for a in e.args)
            return f"(define-fun {_name(e)} () {sort} ({op} {inner}))"
        return f"(define-fun {_name(e)} () {_sort(e.width)} {_body(e)})"


def _name(e: Expr) -> str:
    if e.kind == "var" or e.kind == "array":
        return e.aux[0]
    return f".t{id(e):x}"


def _body(e: Expr) -> str:
    k = e.kind
    a = [_name(x) for x in e.args]
    if k in _SMT_OP:
        return f"({_SMT_OP[k]} {' '.join(a)})"
    if k in _SMT_CMP:
        return f"(ite ({_SMT_CMP[k]} {a[0]} {a[1]}) #b1 #b0)"
    if k == "eq":
        return f"(ite (= {a[0]} {a[1]}) #b1 #b0)"
    if k == "ite":
        return f"(ite (= {a[0]} #b1) {a[1]} {a[2]})"
    if k == "zext":
        return f"((_ zero_extend {e.aux}) {a[0]})"
    if k == "sext":
        return f"((_ sign_extend {e.aux}) {a[0]})"
    if k == "extract":
        hi, lo = e.aux
        return f"((_ extract {hi} {lo}) {a[0]})"
    if k == "concat":
        body = a[-1]
        for part in reversed(a[:-1]):
            body = f"(concat {part} {body})"
        return body
    raise ProtocolError(f"cannot serialize node kind {k}")


def to_smtlib(pc: PathConstraint) -> str:
    """A self-contained script for the given constraint (debug printer)."""
    emitter = Emitter()
    lines = ["(set-option :produce-models true)", "(set-logic QF_ABV)"]
    for term in pc:
        name = emitter.ref(term, lines)
        lines.append(f"(assert (= {name} #b1))")
    lines.append("(check-sat)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# S-expression reading for solver responses
# ---------------------------------------------------------------------------

def _tokenize(text: str) -> list[str]:
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in "()":
            out.append(c)
            i += 1
        elif c.isspace():
            i += 1
        elif c == '"':
            j = text.index('"', i + 1)
            out.append(text[i:j + 1])
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            out.append(text[i:j])
            i = j
    return out


def _parse_sexp(tokens: list[str], pos: int = 0):
    if tokens[pos] != "(":
        return tokens[pos], pos + 1
    items = []
    pos += 1
    while tokens[pos] != ")":
        item, pos = _parse_sexp(tokens, pos)
        items.append(item)
    return items, pos + 1


def _parse_value(sexp) -> int:
    if isinstance(sexp, str):
        if sexp.startswith("#x"):
            return int(sexp[2:], 16)
        if sexp.startswith("#b"):
            return int(sexp[2:], 2)
        raise ProtocolError(f"unparseable value {sexp!r}")
    if len(sexp) == 3 and sexp[0] == "_" and sexp[1].startswith("bv"):
        return int(sexp[1][2:])
    raise ProtocolError(f"unparseable value {sexp!r}")


def parse_get_value(text: str) -> list[int]:
    """Values from a `(get-value (...))` response, in request order."""
    tokens = _tokenize(text)
    sexp, _ = _parse_sexp(tokens)
    return [_parse_value(pair[1]) for pair in sexp]


# ---------------------------------------------------------------------------
# The solver process
# ---------------------------------------------------------------------------

def default_solver_command() -> Optional[list[str]]:
    """Resolve a usable solver: EVMSYM_SOLVER, then PATH, then the bundled
    z3 WASM pipe if its checkout is present."""
    env = os.environ.get("EVMSYM_SOLVER")
    if env:
        return shlex.split(env)
    for cand in (["boolector", "--smt2", "--incremental"],
                 ["z3", "-in"],
                 ["bitwuzla", "--lang", "smt2"],
                 ["cvc5", "--incremental", "--lang", "smt2"]):
        if shutil.which(cand[0]):
            return cand
    here = os.path.dirname(os.path.abspath(__file__))
    for up in range(2, 6):
        root = os.path.abspath(os.path.join(here, *[".."] * up))
        pipe = os.path.join(root, "tools", "z3pipe.mjs")
        if os.path.exists(pipe) and shutil.which("node"):
            return ["node", pipe]
    return None


class SolverBackend:
    """Drives one external SMT process; queries are synchronous."""

    def __init__(self, command: Optional[list[str]] = None,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS,
                 dump_dir: Optional[str] = None,
                 cache: Optional[QueryCache] = None):
        if command is None:
            command = default_solver_command()
        if command is None:
            raise SolverCrashed(
                "no SMT solver found: set --solver or EVMSYM_SOLVER, or run "
                "`npm install` under tools/z3wasm for the bundled z3 pipe")
        self.command = command
        self.timeout_ms = timeout_ms
        self.dump_dir = dump_dir
        self.cache = cache if cache is not None else QueryCache()
        self.proc: Optional[subprocess.Popen] = None
        self.emitter = Emitter()
        self.scope: list[Expr] = []  # one asserted conjunct per scope level
        self._rbuf = b""
        self._dump_count = 0
        self._sent = 0
        self.solver_ms = 0.0
        self.queries = 0

    # -- process management -------------------------------------------------

    def _spawn(self) -> None:
        try:
            self.proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, bufsize=0)
        except OSError as exc:
            raise SolverCrashed(f"cannot start solver {self.command}: {exc}")
        self._rbuf = b""
        self.emitter.reset()
        self.scope = []
        preamble = self._exchange(
            ["(set-option :produce-models true)", "(set-logic QF_ABV)"],
            timeout_ms=60_000)
        if "(error" in preamble:
            raise ProtocolError(f"solver rejected preamble: {preamble[:300]}")

    def close(self) -> None:
        if self.proc is not None:
            try:
                self.proc.stdin.close()
                self.proc.kill()
            except OSError:
                pass
            self.proc = None

    def _restart(self) -> None:
        self.close()  # respawned lazily on next query

    def _write(self, text: str) -> None:
        try:
            self.proc.stdin.write(text.encode() + b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise SolverCrashed(self._stderr_excerpt(str(exc)))

    def _stderr_excerpt(self, fallback: str) -> str:
        try:
            os.set_blocking(self.proc.stderr.fileno(), False)
            return (self.proc.stderr.read() or fallback.encode()).decode()[:500]
        except Exception:
            return fallback

    def _exchange(self, lines: list[str], timeout_ms: Optional[int] = None) -> str:
        """Send commands plus a sentinel echo; read until the sentinel."""
        if self.proc is None:
            self._spawn()
        self._sent += 1
        sent = f"{_SENTINEL}{self._sent}"
        payload = "\n".join(lines + [f'(echo "{sent}")'])
        if self.dump_dir:
            self._dump(payload)
        self._write(payload)

        deadline = time.monotonic() + (timeout_ms or self.timeout_ms) / 1000.0
        fd = self.proc.stdout.fileno()
        sel = selectors.DefaultSelector()
        sel.register(fd, selectors.EVENT_READ)
        try:
            while True:
                # the sentinel may arrive quoted (some solvers echo verbatim)
                for marker in (sent.encode(), b'"' + sent.encode() + b'"'):
                    pos = self._rbuf.find(marker)
                    if pos >= 0:
                        reply = self._rbuf[:pos].decode(errors="replace")
                        nl = self._rbuf.find(b"\n", pos)
                        self._rbuf = b"" if nl < 0 else self._rbuf[nl + 1:]
                        return reply.strip()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._restart()
                    raise _QueryTimeout()
                if not sel.select(remaining):
                    continue
                chunk = os.read(fd, 65536)
                if not chunk:
                    raise SolverCrashed(self._stderr_excerpt("solver closed stdout"))
                self._rbuf += chunk
        finally:
            sel.close()

    def _dump(self, payload: str) -> None:
        os.makedirs(self.dump_dir, exist_ok=True)
        self._dump_count += 1
        path = os.path.join(self.dump_dir, f"query_{self._dump_count:05d}.smt2")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("; incremental replay fragment\n")
            fh.write(payload + "\n")

    # -- scope synchronization ----------------------------------------------

    def _sync(self, pc: PathConstraint) -> list[str]:
        """Commands aligning the asserted scope stack with pc's conjuncts."""
        if self.proc is None:
            self._spawn()
        target = list(pc.terms)
        common = 0
        while (common < len(target) and common < len(self.scope)
               and target[common] is self.scope[common]):
            common += 1
        cmds: list[str] = []
        for _ in range(len(self.scope) - common):
            cmds.append("(pop 1)")
            self.emitter.pop()
            self.scope.pop()
        for term in target[common:]:
            cmds.append("(push 1)")
            self.emitter.push()
            name = self.emitter.ref(term, cmds)
            cmds.append(f"(assert (= {name} #b1))")
            self.scope.append(term)
        return cmds

    # -- queries -------------------------------------------------------------

    def check_sat(self, pc: PathConstraint,
                  timeout_ms: Optional[int] = None) -> SolverVerdict:
        """Satisfiability of the conjunction; unknown on timeout; cached."""
        if pc.has_false():
            return SolverVerdict("unsat")
        if not len(pc):
            return SolverVerdict("sat")
        key = ("sat",) + pc.key()
        hit = self.cache.get(key)
        if hit is not None:
            return SolverVerdict(hit)
        verdict = self._check(pc, [], timeout_ms)
        if verdict.status in ("sat", "unsat"):
            self.cache.put(key, verdict.status)
        return verdict

    def _check(self, pc: PathConstraint, extra: list[Expr],
               timeout_ms: Optional[int] = None) -> SolverVerdict:
        start = time.monotonic()
        self.queries += 1
        try:
            cmds = self._sync(pc)
            if extra:
                cmds.append("(push 1)")
                self.emitter.push()
                for term in extra:
                    name = self.emitter.ref(term, cmds)
                    cmds.append(f"(assert (= {name} #b1))")
            cmds.append("(check-sat)")
            reply = self._exchange(cmds, timeout_ms)
            if "(error" in reply:
                raise ProtocolError(reply[:300])
            lines = reply.splitlines()
            status = lines[-1].strip() if lines else ""
            if extra:
                self._write("(pop 1)")
                self.emitter.pop()
            if status not in ("sat", "unsat", "unknown"):
                raise ProtocolError(f"unexpected check-sat reply {status!r}")
            return SolverVerdict(status, elapsed_ms=self._lap(start))
        except _QueryTimeout:
            return SolverVerdict("unknown", elapsed_ms=self._lap(start))

    def _lap(self, start: float) -> float:
        ms = (time.monotonic() - start) * 1000.0
        self.solver_ms += ms
        return ms

    def _values(self, terms: list[Expr]) -> list[int]:
        """get-value for terms; caller must have just received `sat`."""
        if not terms:
            return []
        cmds: list[str] = []
        names = [self.emitter.ref(t, cmds) for t in terms]
        cmds.append(f"(get-value ({' '.join(names)}))")
        reply = self._exchange(cmds)
        if "error" in reply:
            raise ProtocolError(reply[:300])
        return parse_get_value(reply)

    def get_model(self, pc: PathConstraint, variables: list[Expr]) -> dict[str, int]:
        """Bindings for the requested variables; pc must be satisfiable."""
        verdict = self._check(pc, [])
        if verdict.status != "sat":
            raise ProtocolError(f"get_model on {verdict.status} constraint")
        values = self._values(list(variables))
        return {v.name: val for v, val in zip(variables, values)}

    def eval_under_model(self, pc: PathConstraint, terms: list[Expr]) -> list[int]:
        """Concrete values of arbitrary terms under one satisfying model."""
        verdict = self._check(pc, [])
        if verdict.status != "sat":
            raise ProtocolError(f"eval_under_model on {verdict.status} constraint")
        return self._values(terms)

    def must_equal(self, pc: PathConstraint, a: Expr, b: Expr,
                   timeout_ms: Optional[int] = None) -> bool:
        """True iff pc forces a = b; unknown counts as False."""
        if a is b:
            return True
        if a.is_const() and b.is_const():
            return a.aux == b.aux
        key = ("eq", pc.key(), id(a), id(b))
        hit = self.cache.get(key)
        if hit is not None:
            return hit == "yes"
        verdict = self._check(pc, [lnot(cmp("eq", a, b))], timeout_ms)
        if verdict.status in ("sat", "unsat"):
            self.cache.put(key, "yes" if verdict.status == "unsat" else "no")
        return verdict.status == "unsat"

    def must_differ(self, pc: PathConstraint, a: Expr, b: Expr,
                    timeout_ms: Optional[int] = None) -> bool:
        """True iff pc forces a != b; unknown counts as False."""
        if a is b:
            return False
        if a.is_const() and b.is_const():
            return a.aux != b.aux
        key = ("ne", pc.key(), id(a), id(b))
        hit = self.cache.get(key)
        if hit is not None:
            return hit == "yes"
        verdict = self._check(pc, [cmp("eq", a, b)], timeout_ms)
        if verdict.status in ("sat", "unsat"):
            self.cache.put(key, "yes" if verdict.status == "unsat" else "no")
        return verdict.status == "unsat"

    def enumerate_values(self, pc: PathConstraint, e: Expr,
                         limit: int = ENUM_LIMIT) -> list[int]:
        """Distinct satisfying values of e under pc, by iterated blocking."""
        if e.is_const():
            return [e.aux]
        found: list[int] = []
        blocked = pc
        while True:
            verdict = self._check(blocked, [])
            if verdict.status == "unsat":
                return found
            if verdict.status == "unknown":
                raise LimitExceeded(limit)
            if len(found) >= limit:
                raise LimitExceeded(limit)
            (value,) = self._values([e])
            found.append(value)
            blocked = blocked.append(lnot(cmp("eq", e, mk_const(value, e.width))))


class _QueryTimeout(Exception):
    pass

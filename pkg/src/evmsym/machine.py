"""Symbolic machine: execution state and single-step transition function.

States are cheap-to-clone values (tuples and persistent arrays); stepping
one state produces one or more successor states.  Branches extend the
path constraint, so a successor's constraint is always the parent's plus
appended conjuncts.

Storage addressing replaces compiler-emitted keccak address computations
with the collision-free compact scheme `(slot << 32) + norm(key)`, where
dynamic-object keys are bounded: array indices below 3, integer map keys
below 8, and address map keys normalized to their index in the address
pool.  A 256-bit write cache over the byte-granular volatile memory
avoids materializing extract/concat chains for whole-word round trips.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import expr as ex
from .bytecode import Instruction, Program
from .expr import Expr, PathConstraint
from .keccak import keccak256_int
from .smt import LimitExceeded, SolverBackend

STACK_LIMIT = 1024
WORD = 256
MASK160 = (1 << 160) - 1

PC_NIL = "nil"
PC_ERR = "err"


class NestingTooDeep(Exception):
    """Composed storage hashing would overflow the 256-bit address."""


@dataclass
class MachineOptions:
    gas_limit: int = 65_536
    call_depth_limit: int = 4
    jump_enum_limit: int = 16
    array_index_bound: int = 3
    int_key_bound: int = 8
    hash_nesting_limit: int = 6
    memcache: bool = True          # --no-memcache disables
    addr_scheme: bool = True       # --no-addr-opt disables
    memcache_capacity: int = 64


# ---------------------------------------------------------------------------
# Calldata
# ---------------------------------------------------------------------------

class Calldata:
    """Transaction input bytes with a word-granular overlay.

    Scenario-built calldata is a concrete selector plus 32-byte argument
    words; loading at a word boundary returns the stored expression
    without any byte slicing.  Byte-granular views are materialized only
    when something reads at odd offsets or symbolic offsets.
    """

    __slots__ = ("length", "head", "words", "arr", "_mat")

    def __init__(self, length: int, head: bytes = b"",
                 words: Optional[dict[int, Expr]] = None,
                 arr: Optional[Expr] = None):
        self.length = length
        self.head = head              # concrete prefix (the selector)
        self.words = words or {}      # absolute offset -> 256-bit word
        self.arr = arr                # free byte array (fully symbolic mode)
        self._mat: Optional[Expr] = None

    @classmethod
    def symbolic(cls, name: str, length: int) -> "Calldata":
        return cls(length, arr=ex.mk_array(name, 8))

    @classmethod
    def concrete(cls, data: bytes) -> "Calldata":
        return cls(len(data), head=bytes(data))

    def byte(self, i: int) -> Expr:
        if i >= self.length:
            return ex.mk_const(0, 8)
        if self.arr is not None:
            return ex.array_load(self.arr, ex.mk_const(i, WORD))
        if i < len(self.head):
            return ex.mk_const(self.head[i], 8)
        base = len(self.head) + ((i - len(self.head)) // 32) * 32
        word = self.words.get(base)
        if word is None:
            return ex.mk_const(0, 8)
        k = i - base
        return ex.extract(word, 255 - 8 * k, 248 - 8 * k)

    def load_word(self, offset: Expr) -> Expr:
        if offset.is_const():
            off = offset.value
            return ex.concat(*[self.byte(off + i) for i in range(32)])
        # symbolic offset: byte loads over the materialized array
        arr = self.materialize()
        parts = []
        for i in range(32):
            idx = ex.binop("add", offset, ex.mk_const(i, WORD))
            raw = ex.array_load(arr, idx)
            inside = ex.cmp("ult", idx, ex.mk_const(self.length, WORD))
            parts.append(ex.ite(inside, raw, ex.mk_const(0, 8)))
        return ex.concat(*parts)

    def materialize(self) -> Expr:
        if self._mat is None:
            arr = self.arr if self.arr is not None else ex.const_array(0, 8)
            if self.arr is None:
                for i in range(self.length):
                    arr = ex.array_store(arr, ex.mk_const(i, WORD), self.byte(i))
            self._mat = arr
        return self._mat


# ---------------------------------------------------------------------------
# Return data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ReturnData:
    size: int
    word: Optional[Expr] = None          # fast path for 32-byte returns
    data: tuple[Expr, ...] = ()          # byte expressions otherwise

    def byte(self, i: int) -> Expr:
        if i >= self.size:
            return ex.mk_const(0, 8)
        if self.word is not None:
            return ex.extract(self.word, 255 - 8 * i, 248 - 8 * i)
        return self.data[i]


EMPTY_RETURN = ReturnData(0)


# ---------------------------------------------------------------------------
# Volatile memory with the 256-bit write cache
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CacheEntry:
    addr: Expr
    value: Expr
    generation: int


@dataclass(frozen=True, slots=True)
class Memory:
    arr: Expr                      # byte array, zero-initialized
    cache: tuple[CacheEntry, ...]  # pending whole-word writes, oldest first

    @classmethod
    def empty(cls) -> "Memory":
        return cls(ex.const_array(0, 8), ())


# ---------------------------------------------------------------------------
# Transactions and environments
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Transaction:
    """One unit of Alg.-1 sequencing: a program plus its inputs.

    Contract calls carry calldata; harness constraint programs instead
    seed the initial execution stack with pre-built expressions.
    """

    program: Program
    calldata: Calldata
    caller: Expr
    callvalue: Expr
    timestamp: Expr
    blocknumber: Expr
    self_address: int
    registry: dict[int, Program] = field(default_factory=dict)
    addr_tagged: frozenset[int] = frozenset()
    init_stack: tuple[Expr, ...] = ()
    is_view: bool = False
    label: str = ""
    arg_views: tuple = ()          # argument expressions, for model extraction
    kind: str = "call"             # call | assume | check


def strip_addr_mask(e: Expr) -> Expr:
    """Peel `and(x, 2**160-1)` wrappers used for address narrowing."""
    while e.kind == "and":
        a, b = e.args
        if b.is_const() and b.value == MASK160:
            e = a
        elif a.is_const() and a.value == MASK160:
            e = b
        else:
            break
    return e


# ---------------------------------------------------------------------------
# Execution state
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ExecState:
    pc: object                     # int offset, PC_NIL, or PC_ERR
    stack: tuple[Expr, ...]        # top of stack is the last element
    memory: Memory
    storage: Expr
    psi: PathConstraint
    gas_left: int
    trace: tuple
    events: tuple
    txn_index: int                 # 1-based, per the main loop
    env: Transaction
    status: str = "run"            # run | stop | return | revert | gas
    detail: str = ""
    return_data: ReturnData = EMPTY_RETURN
    last_return: ReturnData = EMPTY_RETURN
    storage_at_txn_start: Optional[Expr] = None
    contract_storages: tuple = ()  # ((address, array), ...) for callees
    bindings: tuple = ()           # ((name, value), ...) scenario bindings
    txn_journal: tuple = ()        # Transactions materialized along this path
    depth: int = 0
    is_static: bool = False
    needs_sat: bool = False

    def bound(self, name: str):
        for k, v in self.bindings:
            if k == name:
                return v
        raise KeyError(name)

    @property
    def terminated(self) -> bool:
        return self.pc in (PC_NIL, PC_ERR)


def initial_state(txn: Transaction, storage: Expr, psi: PathConstraint,
                  gas: int, txn_index: int = 1, bindings: tuple = (),
                  contract_storages: tuple = (), txn_journal: tuple = (),
                  trace: tuple = (), events: tuple = ()) -> ExecState:
    return ExecState(
        pc=0, stack=tuple(txn.init_stack), memory=Memory.empty(),
        storage=storage, psi=psi, gas_left=gas, trace=trace, events=events,
        txn_index=txn_index, env=txn, storage_at_txn_start=storage,
        bindings=bindings, contract_storages=contract_storages,
        txn_journal=txn_journal + (txn,))


# ---------------------------------------------------------------------------
# The machine
# ---------------------------------------------------------------------------

class Machine:
    """Single-step transition function over symbolic states.

    A solver backend is optional: without one, memory-cache reasoning and
    jump-target resolution fall back to syntactic-only decisions and
    symbolic branch feasibility is left to the caller.
    """

    def __init__(self, options: Optional[MachineOptions] = None,
                 solver: Optional[SolverBackend] = None,
                 pool: Optional[list[int]] = None,
                 log: Optional[Callable[[str], None]] = None):
        self.options = options or MachineOptions()
        self.solver = solver
        self.pool = pool or []
        self.log = log or (lambda msg: None)
        self._hash_depth: dict[int, int] = {}

    # -- helpers -------------------------------------------------------------

    def _term(self, state: ExecState, status: str, detail: str = "",
              ret: ReturnData = EMPTY_RETURN, psi=None) -> ExecState:
        return replace(state, pc=PC_NIL, status=status, detail=detail,
                       return_data=ret, psi=psi if psi is not None else state.psi,
                       needs_sat=False)

    def _next(self, state: ExecState, inst: Instruction, stack, *,
              pc=None, psi=None, memory=None, storage=None, events=None,
              needs_sat=False, **kw) -> ExecState:
        return replace(
            state,
            pc=inst.offset + inst.size if pc is None else pc,
            stack=tuple(stack),
            psi=state.psi if psi is None else psi,
            memory=state.memory if memory is None else memory,
            storage=state.storage if storage is None else storage,
            events=state.events if events is None else events,
            needs_sat=needs_sat,
            **kw)

    # -- address scheme (Alg. 2, compacted) -----------------------------------

    def classify_key(self, key: Expr, env: Transaction) -> str:
        """`address` if the key can only range over the account pool."""
        core = strip_addr_mask(key)
        if core.is_const():
            return "address" if core.value in self.pool else "int"
        if id(core) in env.addr_tagged or id(key) in env.addr_tagged:
            return "address"
        if ex.contains_var_role(core, "address"):
            return "address"
        return "int"

    def hash_address(self, slot: Expr, key: Expr, kind: str
                     ) -> tuple[Expr, list[Expr]]:
        """Compact storage address plus the bounding assumptions.

        addr = (slot << 32) + norm(key).  Arrays keep the raw index bounded
        below 3; integer map keys are bounded below 8; address map keys are
        replaced by their pool index and assumed to be pool members.
        """
        depth = self._hash_depth.get(id(slot), 0) + 1
        if depth > self.options.hash_nesting_limit:
            raise NestingTooDeep(f"hash nesting depth {depth}")
        assumptions: list[Expr] = []
        if kind == "array":
            bound = ex.mk_const(self.options.array_index_bound, WORD)
            assumptions.append(ex.cmp("ult", key, bound))
            norm = key
        elif kind == "address":
            if not self.pool:
                raise NestingTooDeep("address-keyed map without an address pool")
            norm = ex.mk_const(0, WORD)
            member = ex.FALSE
            for i, addr in reversed(list(enumerate(self.pool))):
                is_i = ex.cmp("eq", key, ex.mk_const(addr, WORD))
                norm = ex.ite(is_i, ex.mk_const(i, WORD), norm)
                member = ex.binop("or", is_i, member)
            assumptions.append(member)
        else:
            bound = ex.mk_const(self.options.int_key_bound, WORD)
            assumptions.append(ex.cmp("ult", key, bound))
            norm = key
        addr = ex.binop("add", ex.binop("shl", slot, ex.mk_const(32, WORD)), norm)
        self._hash_depth[id(addr)] = depth
        assumptions = [a for a in assumptions if a is not ex.TRUE]
        return addr, assumptions

    # -- memory cache ---------------------------------------------------------

    def _disjoint(self, psi: PathConstraint, a: Expr, b: Expr,
                  b_len: int = 32) -> bool:
        """Can ranges [a, a+32) and [b, b+b_len) be proven non-overlapping?"""
        if a.is_const() and b.is_const():
            return a.value + 32 <= b.value or b.value + b_len <= a.value
        if a is b:
            return False
        if self.solver is None:
            return False
        overlap = ex.binop(
            "and",
            ex.cmp("ult", a, ex.binop("add", b, ex.mk_const(b_len, WORD))),
            ex.cmp("ult", b, ex.binop("add", a, ex.mk_const(32, WORD))))
        return self._unsat(psi, overlap)

    def _unsat(self, psi: PathConstraint, cond: Expr) -> bool:
        verdict = self.solver.check_sat(psi.append(cond))
        return verdict.status == "unsat"

    def _addr_equal(self, psi: PathConstraint, a: Expr, b: Expr) -> bool:
        if a is b:
            return True
        if a.is_const() and b.is_const():
            return a.value == b.value
        if self.solver is None:
            return False
        return self.solver.must_equal(psi, a, b)

    def _materialize(self, mem: Memory, entries=None) -> Memory:
        """Flush pending cached word writes into the byte array, in order."""
        victims = mem.cache if entries is None else entries
        if not victims:
            return mem
        arr = mem.arr
        victim_ids = {id(e) for e in victims}
        for entry in mem.cache:
            if id(entry) in victim_ids:
                arr = self._write_word_bytes(arr, entry.addr, entry.value)
        remaining = tuple(e for e in mem.cache if id(e) not in victim_ids)
        return Memory(arr, remaining)

    @staticmethod
    def _write_word_bytes(arr: Expr, addr: Expr, value: Expr) -> Expr:
        for i in range(32):
            idx = ex.binop("add", addr, ex.mk_const(i, WORD))
            arr = ex.array_store(arr, idx, ex.extract(value, 255 - 8 * i, 248 - 8 * i))
        return arr

    def mstore256(self, state: ExecState, addr: Expr, value: Expr) -> Memory:
        """Word store: caches the (addr, value) pair, evicting overlaps."""
        mem = state.memory
        if not self.options.memcache:
            return Memory(self._write_word_bytes(mem.arr, addr, value), ())
        evict = [e for e in mem.cache
                 if not self._disjoint(state.psi, addr, e.addr)]
        mem = self._materialize(mem, evict)
        cache = mem.cache + (CacheEntry(addr, value, len(state.trace)),)
        if len(cache) > self.options.memcache_capacity:
            mem = self._materialize(Memory(mem.arr, cache), cache[:1])
            cache = mem.cache
        return Memory(mem.arr, cache)

    def mstore8(self, state: ExecState, addr: Expr, value: Expr) -> Memory:
        mem = state.memory
        evict = [e for e in mem.cache
                 if not self._disjoint(state.psi, e.addr, addr, b_len=1)]
        mem = self._materialize(mem, evict)
        return Memory(ex.array_store(mem.arr, addr, ex.extract(value, 7, 0)),
                      mem.cache)

    def mload256(self, state: ExecState, addr: Expr) -> tuple[Expr, Memory]:
        """Word load: one cached entry provably at this address wins.

        Live cache entries are pairwise disjoint by construction, so a
        proven hit implies every other entry misses.  On a miss all
        entries are flushed and the word is rebuilt from byte loads.
        """
        mem = state.memory
        for entry in reversed(mem.cache):
            if self._addr_equal(state.psi, addr, entry.addr):
                return entry.value, mem
        mem = self._materialize(mem)
        return self._read_word_bytes(mem.arr, addr), mem

    @staticmethod
    def _read_word_bytes(arr: Expr, addr: Expr) -> Expr:
        parts = []
        for i in range(32):
            idx = ex.binop("add", addr, ex.mk_const(i, WORD))
            parts.append(ex.array_load(arr, idx))
        return ex.concat(*parts)

    def read_bytes(self, state: ExecState, addr: Expr, size: int
                   ) -> tuple[list[Expr], Memory]:
        """size byte expressions starting at addr; flushes the cache."""
        mem = self._materialize(state.memory)
        out = []
        for i in range(size):
            idx = ex.binop("add", addr, ex.mk_const(i, WORD))
            out.append(ex.array_load(mem.arr, idx))
        return out, mem

    # -- SHA3 classification (compiler access patterns) ------------------------

    def detect_sha3(self, state: ExecState, offset: Expr, size: Expr):
        """Classify a SHA3 by its memory operand layout.

        64-byte region = key||slot  => map access
        32-byte constant region     => array base
        anything else               => opaque (real keccak when concrete)
        """
        if not size.is_const():
            return ("opaque_symbolic", None)
        n = size.value
        if self.options.addr_scheme and n == 64:
            key, mem = self.mload256(state, offset)
            slot, mem = self.mload256(replace(state, memory=mem),
                                      ex.binop("add", offset, ex.mk_const(32, WORD)))
            return ("map", (slot, key, mem))
        if self.options.addr_scheme and n == 32:
            content, mem = self.mload256(state, offset)
            if content.is_const():
                return ("array_base", (content, mem))
            return ("opaque", (n, mem))
        return ("opaque", (n, None))

    # -- the step function ----------------------------------------------------

    def step(self, state: ExecState) -> list[ExecState]:
        """All possible successors of one instruction (Fig.-4-style rules)."""
        assert not state.terminated, "stepping a terminated state"
        program = state.env.program
        if isinstance(state.pc, int) and state.pc >= len(program.code):
            return [self._term(state, "stop")]  # running off the end halts
        inst = program.insts.get(state.pc)
        if inst is None:
            return [self._term(state, "revert", "pc inside immediate")]
        if state.gas_left <= 0:
            return [self._term(state, "gas", "gas exhausted")]

        op = inst.opcode
        if len(state.stack) < op.stack_pops:
            return [self._term(state, "revert", f"stack underflow at {op.mnemonic}")]
        if len(state.stack) - op.stack_pops + op.stack_pushes > STACK_LIMIT:
            return [self._term(state, "revert", "stack overflow")]

        state = replace(state,
                        gas_left=state.gas_left - 1,
                        trace=state.trace + ((state.txn_index, state.depth,
                                              inst.offset, op.mnemonic),))
        return self._dispatch(state, inst)

    def _dispatch(self, state: ExecState, inst: Instruction) -> list[ExecState]:
        mnem = inst.opcode.mnemonic
        stack = list(state.stack)

        if mnem.startswith("PUSH"):
            stack.append(ex.mk_const(inst.immediate, WORD))
            return [self._next(state, inst, stack)]
        if mnem.startswith("DUP"):
            n = int(mnem[3:])
            stack.append(stack[-n])
            return [self._next(state, inst, stack)]
        if mnem.startswith("SWAP"):
            n = int(mnem[4:])
            stack[-1], stack[-n - 1] = stack[-n - 1], stack[-1]
            return [self._next(state, inst, stack)]
        if mnem.startswith("LOG"):
            n = int(mnem[3:])
            del stack[-(n + 2):]
            return [self._next(state, inst, stack)]

        handler = getattr(self, f"_op_{mnem}", None)
        if handler is None:
            return [self._term(state, "revert", f"unhandled opcode {mnem}")]
        return handler(state, inst, stack)

    # -- terminators -----------------------------------------------------------

    def _op_STOP(self, state, inst, stack):
        return [self._term(state, "stop")]

    def _op_INVALID(self, state, inst, stack):
        return [self._term(state, "revert", "INVALID opcode")]

    def _op_RETURN(self, state, inst, stack):
        return self._finish(state, stack, "return")

    def _op_REVERT(self, state, inst, stack):
        return self._finish(state, stack, "revert")

    def _finish(self, state, stack, status):
        offset, size = stack[-1], stack[-2]
        if not size.is_const():
            return [self._term(state, status, "symbolic return size")]
        n = size.value
        if n == 0:
            return [self._term(state, status)]
        if n == 32:
            word, mem = self.mload256(state, offset)
            return [self._term(replace(state, memory=mem), status,
                               ret=ReturnData(32, word=word))]
        data, mem = self.read_bytes(state, offset, n)
        return [self._term(replace(state, memory=mem), status,
                           ret=ReturnData(n, data=tuple(data)))]

    # -- arithmetic and logic ----------------------------------------------------

    def _binary(self, state, inst, stack, fn):
        a, b = stack.pop(), stack.pop()
        stack.append(fn(a, b))
        return [self._next(state, inst, stack)]

    def _op_ADD(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("add", a, b))

    def _op_MUL(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("mul", a, b))

    def _op_SUB(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("sub", a, b))

    def _op_DIV(self, state, inst, stack):
        return self._binary(state, inst, stack, _evm_div)

    def _op_SDIV(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _zero_guard(b, ex.binop("sdiv", a, b)))

    def _op_MOD(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _zero_guard(b, ex.binop("urem", a, b)))

    def _op_SMOD(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _zero_guard(b, ex.binop("srem", a, b)))

    def _op_EXP(self, state, inst, stack):
        base, exp_ = stack.pop(), stack.pop()
        if not exp_.is_const():
            return [self._term(state, "revert", "symbolic exponent")]
        result = ex.mk_const(1, WORD)
        b, e = base, exp_.value
        while e:
            if e & 1:
                result = ex.binop("mul", result, b)
            e >>= 1
            if e:
                b = ex.binop("mul", b, b)
        stack.append(result)
        return [self._next(state, inst, stack)]

    def _op_LT(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _flag(ex.cmp("ult", a, b)))

    def _op_GT(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _flag(ex.cmp("ult", b, a)))

    def _op_SLT(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _flag(ex.cmp("slt", a, b)))

    def _op_SGT(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _flag(ex.cmp("slt", b, a)))

    def _op_EQ(self, state, inst, stack):
        return self._binary(state, inst, stack,
                            lambda a, b: _flag(ex.cmp("eq", a, b)))

    def _op_ISZERO(self, state, inst, stack):
        a = stack.pop()
        stack.append(_flag(ex.cmp("eq", a, ex.mk_const(0, WORD))))
        return [self._next(state, inst, stack)]

    def _op_AND(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("and", a, b))

    def _op_OR(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("or", a, b))

    def _op_XOR(self, state, inst, stack):
        return self._binary(state, inst, stack, lambda a, b: ex.binop("xor", a, b))

    def _op_NOT(self, state, inst, stack):
        a = stack.pop()
        stack.append(ex.lnot(a))
        return [self._next(state, inst, stack)]

    def _op_BYTE(self, state, inst, stack):
        i, x = stack.pop(), stack.pop()
        if i.is_const():
            if i.value >= 32:
                stack.append(ex.mk_const(0, WORD))
            else:
                lo = (31 - i.value) * 8
                stack.append(ex.zext(ex.extract(x, lo + 7, lo), WORD))
        else:
            shamt = ex.binop("mul", ex.binop("sub", ex.mk_const(31, WORD), i),
                             ex.mk_const(8, WORD))
            picked = ex.binop("and", ex.binop("lshr", x, shamt),
                              ex.mk_const(0xFF, WORD))
            inside = ex.cmp("ult", i, ex.mk_const(32, WORD))
            stack.append(ex.ite(inside, picked, ex.mk_const(0, WORD)))
        return [self._next(state, inst, stack)]

    def _op_SHL(self, state, inst, stack):
        shift, value = stack.pop(), stack.pop()
        stack.append(ex.binop("shl", value, shift))
        return [self._next(state, inst, stack)]

    def _op_SHR(self, state, inst, stack):
        shift, value = stack.pop(), stack.pop()
        stack.append(ex.binop("lshr", value, shift))
        return [self._next(state, inst, stack)]

    def _op_SAR(self, state, inst, stack):
        shift, value = stack.pop(), stack.pop()
        stack.append(ex.binop("ashr", value, shift))
        return [self._next(state, inst, stack)]

    # -- environment -------------------------------------------------------------

    def _push_env(self, state, inst, stack, value):
        stack.append(value)
        return [self._next(state, inst, stack)]

    def _op_ADDRESS(self, state, inst, stack):
        return self._push_env(state, inst, stack,
                              ex.mk_const(state.env.self_address, WORD))

    def _op_BALANCE(self, state, inst, stack):
        stack.pop()
        return self._push_env(state, inst, stack, ex.fresh_var("balance", WORD))

    def _op_CALLER(self, state, inst, stack):
        return self._push_env(state, inst, stack, state.env.caller)

    def _op_CALLVALUE(self, state, inst, stack):
        return self._push_env(state, inst, stack, state.env.callvalue)

    def _op_TIMESTAMP(self, state, inst, stack):
        return self._push_env(state, inst, stack, state.env.timestamp)

    def _op_NUMBER(self, state, inst, stack):
        return self._push_env(state, inst, stack, state.env.blocknumber)

    def _op_GAS(self, state, inst, stack):
        return self._push_env(state, inst, stack, ex.mk_const(state.gas_left, WORD))

    def _op_PC(self, state, inst, stack):
        return self._push_env(state, inst, stack, ex.mk_const(inst.offset, WORD))

    def _op_CODESIZE(self, state, inst, stack):
        return self._push_env(state, inst, stack,
                              ex.mk_const(len(state.env.program.code), WORD))

    def _op_CALLDATASIZE(self, state, inst, stack):
        return self._push_env(state, inst, stack,
                              ex.mk_const(state.env.calldata.length, WORD))

    def _op_CALLDATALOAD(self, state, inst, stack):
        offset = stack.pop()
        stack.append(state.env.calldata.load_word(offset))
        return [self._next(state, inst, stack)]

    def _op_CALLDATACOPY(self, state, inst, stack):
        dst, src, size = stack.pop(), stack.pop(), stack.pop()
        if not (size.is_const() and src.is_const()):
            return [self._term(state, "revert", "symbolic calldatacopy operands")]
        mem = state.memory
        cd = state.env.calldata
        for i in range(size.value):
            b = cd.byte(src.value + i)
            idx = ex.binop("add", dst, ex.mk_const(i, WORD))
            mem = self.mstore8(replace(state, memory=mem), idx, ex.zext(b, WORD))
        return [self._next(state, inst, stack, memory=mem)]

    def _op_RETURNDATASIZE(self, state, inst, stack):
        return self._push_env(state, inst, stack,
                              ex.mk_const(state.last_return.size, WORD))

    def _op_RETURNDATACOPY(self, state, inst, stack):
        dst, src, size = stack.pop(), stack.pop(), stack.pop()
        if not (size.is_const() and src.is_const()):
            return [self._term(state, "revert", "symbolic returndatacopy operands")]
        rd = state.last_return
        if src.value + size.value > rd.size:
            return [self._term(state, "revert", "returndatacopy out of bounds")]
        if (size.value == 32 and src.value == 0 and rd.word is not None):
            mem = self.mstore256(state, dst, rd.word)
        else:
            mem = state.memory
            for i in range(size.value):
                idx = ex.binop("add", dst, ex.mk_const(i, WORD))
                mem = self.mstore8(replace(state, memory=mem), idx,
                                   ex.zext(rd.byte(src.value + i), WORD))
        return [self._next(state, inst, stack, memory=mem)]

    # -- stack / memory / storage -------------------------------------------------

    def _op_POP(self, state, inst, stack):
        stack.pop()
        return [self._next(state, inst, stack)]

    def _op_MLOAD(self, state, inst, stack):
        addr = stack.pop()
        value, mem = self.mload256(state, addr)
        stack.append(value)
        return [self._next(state, inst, stack, memory=mem)]

    def _op_MSTORE(self, state, inst, stack):
        addr, value = stack.pop(), stack.pop()
        mem = self.mstore256(state, addr, value)
        return [self._next(state, inst, stack, memory=mem)]

    def _op_MSTORE8(self, state, inst, stack):
        addr, value = stack.pop(), stack.pop()
        mem = self.mstore8(state, addr, value)
        return [self._next(state, inst, stack, memory=mem)]

    def _op_SLOAD(self, state, inst, stack):
        addr = stack.pop()
        x = ex.fresh_var("sload", WORD)
        psi = state.psi.append(ex.cmp("eq", x, ex.array_load(state.storage, addr)))
        stack.append(x)
        events = state.events + (("sread", state.txn_index, inst.offset),)
        return [self._next(state, inst, stack, psi=psi, events=events)]

    def _op_SSTORE(self, state, inst, stack):
        addr, value = stack.pop(), stack.pop()
        if state.is_static:
            return [self._term(state, "revert", "SSTORE in static call")]
        storage = ex.array_store(state.storage, addr, value)
        events = state.events + (("swrite", state.txn_index, inst.offset),)
        return [self._next(state, inst, stack, storage=storage, events=events)]

    def _op_JUMPDEST(self, state, inst, stack):
        return [self._next(state, inst, stack)]

    # -- control flow ----------------------------------------------------------

    def _jump_to(self, state, inst, stack, target_value, psi=None, needs_sat=False):
        if target_value not in state.env.program.jumpdests:
            return self._term(state, "revert",
                              f"invalid jump target {target_value:#x}",
                              psi=psi)
        return self._next(state, inst, stack, pc=target_value, psi=psi,
                          needs_sat=needs_sat)

    def _op_JUMP(self, state, inst, stack):
        target = stack.pop()
        if target.is_const():
            return [self._jump_to(state, inst, stack, target.value)]
        return self._fork_jump(state, inst, stack, target)

    def _fork_jump(self, state, inst, stack, target, cond=None):
        """Symbolic jump target: fork once per solver-enumerated value."""
        if self.solver is None:
            return [self._term(state, "revert", "symbolic jump without solver")]
        psi = state.psi if cond is None else state.psi.append(cond)
        try:
            values = self.solver.enumerate_values(
                psi, target, self.options.jump_enum_limit)
        except LimitExceeded:
            self.log(f"unconstrained jump target at pc={inst.offset}")
            return [self._term(state, "revert", "unconstrained jump target")]
        out = []
        for v in values:
            forked = psi.append(ex.cmp("eq", target, ex.mk_const(v, WORD)))
            out.append(self._jump_to(state, inst, stack, v, psi=forked))
        return out

    def _op_JUMPI(self, state, inst, stack):
        target, cond = stack.pop(), stack.pop()
        zero = ex.mk_const(0, WORD)
        if cond.is_const():
            if cond.value == 0:
                return [self._next(state, inst, stack)]
            if target.is_const():
                return [self._jump_to(state, inst, stack, target.value)]
            return self._fork_jump(state, inst, stack, target)
        fall = self._next(state, inst, stack,
                          psi=state.psi.append(ex.cmp("eq", cond, zero)),
                          needs_sat=True)
        taken_psi = state.psi.append(ex.lnot(ex.cmp("eq", cond, zero)))
        if target.is_const():
            taken = [self._jump_to(state, inst, stack, target.value,
                                   psi=taken_psi, needs_sat=True)]
        else:
            taken = self._fork_jump(state, inst, stack, target,
                                    cond=ex.lnot(ex.cmp("eq", cond, zero)))
        # fall-through first: the explorer pops the last element, so the
        # taken branch (usually the guarded deep logic) is explored first
        return [fall] + taken

    # -- harness opcodes (constraint programs) -----------------------------------

    def _op_ASSUME(self, state, inst, stack):
        e = stack.pop()
        psi = state.psi.append(_nonzero(e))
        return [self._next(state, inst, stack, psi=psi, needs_sat=True)]

    def _op_CHECK(self, state, inst, stack):
        e = stack.pop()
        holds = self._next(state, inst, stack, psi=state.psi.append(_nonzero(e)),
                           needs_sat=True)
        fails = replace(self._next(state, inst, stack,
                                   psi=state.psi.append(_iszero(e)),
                                   needs_sat=True),
                        pc=PC_ERR)
        return [holds, fails]

    def _op_ADDROF(self, state, inst, stack):
        index, slot = stack.pop(), stack.pop()
        return self._push_hashed(state, inst, stack, slot, index, "array")

    def _op_ADDROFMAP(self, state, inst, stack):
        key, slot = stack.pop(), stack.pop()
        kind = self.classify_key(key, state.env)
        return self._push_hashed(state, inst, stack, slot, key, kind)

    def _push_hashed(self, state, inst, stack, slot, key, kind):
        try:
            addr, assumptions = self.hash_address(slot, key, kind)
        except NestingTooDeep as exc:
            return [self._term(state, "revert", str(exc))]
        stack.append(addr)
        psi = state.psi.append(*assumptions)
        return [self._next(state, inst, stack, psi=psi,
                           needs_sat=psi is not state.psi)]

    # -- SHA3 -------------------------------------------------------------------

    def _op_SHA3(self, state, inst, stack):
        offset, size = stack.pop(), stack.pop()
        shape, payload = self.detect_sha3(state, offset, size)

        if shape == "map":
            slot, key, mem = payload
            kind = self.classify_key(key, state.env)
            if not self.options.addr_scheme:
                return self._concretize_sha3(
                    replace(state, memory=mem), inst, stack, slot, key, kind)
            return self._push_hashed(replace(state, memory=mem),
                                     inst, stack, slot, key, kind)
        if shape == "array_base":
            content, mem = payload
            return self._push_hashed(replace(state, memory=mem), inst, stack,
                                     content, ex.mk_const(0, WORD), "array")
        if shape == "opaque_symbolic":
            self.log(f"SHA3 with symbolic size at pc={inst.offset}")
            stack.append(ex.fresh_var("sha3", WORD))
            return [self._next(state, inst, stack)]

        n, mem = payload
        if mem is not None:
            state = replace(state, memory=mem)
        data, mem = self.read_bytes(state, offset, n)
        state = replace(state, memory=mem)
        if all(b.is_const() for b in data):
            digest = keccak256_int(bytes(b.value for b in data))
            stack.append(ex.mk_const(digest, WORD))
            return [self._next(state, inst, stack)]
        if not self.options.addr_scheme:
            return self._concretize_sha3_bytes(state, inst, stack, data)
        self.log(f"SHA3 over symbolic {n}-byte region at pc={inst.offset}")
        stack.append(ex.fresh_var("sha3", WORD))
        return [self._next(state, inst, stack)]

    def _concretize_sha3(self, state, inst, stack, slot, key, kind):
        """Baseline mode: fork per concrete key/slot value, hash for real.

        The same boundedness assumptions as the compact scheme are applied
        first, so both modes explore the same space.
        """
        try:
            _, assumptions = self.hash_address(slot, key, kind)
        except NestingTooDeep as exc:
            return [self._term(state, "revert", str(exc))]
        psi = state.psi.append(*assumptions)
        out = []
        for key_val, key_psi in self._enum_forks(state, psi, key):
            for slot_val, slot_psi in self._enum_forks(state, key_psi, slot):
                preimage = key_val.to_bytes(32, "big") + slot_val.to_bytes(32, "big")
                digest = keccak256_int(preimage)
                st = list(stack)
                st.append(ex.mk_const(digest, WORD))
                out.append(self._next(state, inst, st, psi=slot_psi,
                                      needs_sat=False))
        if not out:
            return [self._term(state, "revert", "no feasible hash key", psi=psi)]
        return out

    def _concretize_sha3_bytes(self, state, inst, stack, data):
        word = ex.concat(*data) if len(data) > 1 else data[0]
        out = []
        for val, psi in self._enum_forks(state, state.psi, word):
            digest = keccak256_int(val.to_bytes(word.width // 8, "big"))
            st = list(stack)
            st.append(ex.mk_const(digest, WORD))
            out.append(self._next(state, inst, st, psi=psi, needs_sat=False))
        if not out:
            return [self._term(state, "revert", "no feasible hash preimage")]
        return out

    def _enum_forks(self, state, psi, e):
        """(value, psi') pairs concretizing e under psi."""
        if e.is_const():
            return [(e.value, psi)]
        if self.solver is None:
            return []
        try:
            values = self.solver.enumerate_values(psi, e,
                                                  self.options.jump_enum_limit)
        except LimitExceeded:
            self.log("hash concretization overflowed the enumeration limit")
            return []
        return [(v, psi.append(ex.cmp("eq", e, ex.mk_const(v, WORD))))
                for v in values]

    # -- calls -------------------------------------------------------------------

    def _op_CALL(self, state, inst, stack):
        (_gas, to, value, in_off, in_len,
         out_off, out_len) = [stack.pop() for _ in range(7)]
        return self._do_call(state, inst, stack, to, value, in_off, in_len,
                             out_off, out_len, static=False)

    def _op_STATICCALL(self, state, inst, stack):
        _gas, to, in_off, in_len, out_off, out_len = [stack.pop() for _ in range(6)]
        return self._do_call(state, inst, stack, to, ex.mk_const(0, WORD),
                             in_off, in_len, out_off, out_len, static=True)

    def _do_call(self, state, inst, stack, to, value, in_off, in_len,
                 out_off, out_len, static):
        if state.depth + 1 > self.options.call_depth_limit:
            return [self._term(state, "revert", "call depth exceeded")]
        callee = self._resolve_callee(state, to)
        if callee is None:
            return self._unresolved_call(state, inst, stack, out_off, out_len)
        addr, program = callee
        return self._inline_call(state, inst, stack, addr, program, value,
                                 in_off, in_len, out_off, out_len, static)

    def _resolve_callee(self, state, to):
        registry = state.env.registry
        if not registry:
            return None
        core = strip_addr_mask(to)
        if core.is_const():
            prog = registry.get(core.value)
            return (core.value, prog) if prog is not None else None
        if self.solver is None:
            return None
        try:
            values = self.solver.enumerate_values(state.psi, core, 2)
        except LimitExceeded:
            return None
        if len(values) == 1 and values[0] in registry:
            return (values[0], registry[values[0]])
        return None

    def _unresolved_call(self, state, inst, stack, out_off, out_len):
        ok = ex.fresh_var("xcall_ok", WORD)
        ret_word = ex.fresh_var("xcall_ret", WORD)
        psi = state.psi.append(ex.cmp("ult", ok, ex.mk_const(2, WORD)))
        rd = ReturnData(32, word=ret_word)
        mem = state.memory
        if out_len.is_const() and out_len.value > 0:
            n = min(out_len.value, 32)
            if n == 32:
                mem = self.mstore256(state, out_off, ret_word)
            else:
                for i in range(n):
                    idx = ex.binop("add", out_off, ex.mk_const(i, WORD))
                    mem = self.mstore8(replace(state, memory=mem), idx,
                                       ex.zext(rd.byte(i), WORD))
        stack.append(ok)
        events = state.events + (("xcall", state.txn_index, inst.offset),)
        return [self._next(state, inst, stack, psi=psi, memory=mem,
                           events=events, last_return=rd)]

    def _inline_call(self, state, inst, stack, addr, program, value,
                     in_off, in_len, out_off, out_len, static):
        if not in_len.is_const():
            return [self._term(state, "revert", "symbolic call input size")]
        in_bytes, mem = self.read_bytes(state, in_off, in_len.value)
        state = replace(state, memory=mem)
        child_env = Transaction(
            program=program,
            calldata=_calldata_from_bytes(in_bytes),
            caller=ex.mk_const(state.env.self_address, WORD),
            callvalue=value,
            timestamp=state.env.timestamp,
            blocknumber=state.env.blocknumber,
            self_address=addr,
            registry=state.env.registry,
            addr_tagged=state.env.addr_tagged,
            label=f"subcall:{addr:#x}")
        child_storage = dict(state.contract_storages).get(addr)
        if child_storage is None:
            child_storage = ex.fresh_array(f"storage_{addr:x}", WORD)
        child = ExecState(
            pc=0, stack=(), memory=Memory.empty(), storage=child_storage,
            psi=state.psi, gas_left=state.gas_left, trace=state.trace,
            events=state.events, txn_index=state.txn_index, env=child_env,
            storage_at_txn_start=child_storage,
            contract_storages=state.contract_storages,
            bindings=state.bindings, depth=state.depth + 1,
            is_static=static or state.is_static)

        out = []
        for term in self._run_frame(child):
            if term.status == "gas":
                out.append(term)  # gas is shared: the whole path aborts
                continue
            ok = term.status in ("stop", "return")
            storages = dict(state.contract_storages)
            if ok:
                storages[addr] = term.storage
            caller = replace(
                state, psi=term.psi, gas_left=term.gas_left, trace=term.trace,
                events=term.events, contract_storages=tuple(sorted(storages.items())),
                last_return=term.return_data)
            mem2 = caller.memory
            rd = term.return_data
            if ok and out_len.is_const() and out_len.value > 0 and rd.size > 0:
                n = min(out_len.value, rd.size)
                if n == 32 and rd.word is not None:
                    mem2 = self.mstore256(caller, out_off, rd.word)
                else:
                    for i in range(n):
                        idx = ex.binop("add", out_off, ex.mk_const(i, WORD))
                        mem2 = self.mstore8(replace(caller, memory=mem2), idx,
                                            ex.zext(rd.byte(i), WORD))
            st = list(stack)
            st.append(ex.mk_const(1 if ok else 0, WORD))
            out.append(self._next(caller, inst, st, memory=mem2))
        return out

    def _run_frame(self, child: ExecState) -> list[ExecState]:
        """DFS a callee frame to its terminal states, pruning unsat branches."""
        frontier = [child]
        terminals = []
        while frontier:
            st = frontier.pop()
            if st.terminated:
                terminals.append(st)
                continue
            for succ in self.step(st):
                if succ.needs_sat and self.solver is not None:
                    if self.solver.check_sat(succ.psi).status == "unsat":
                        continue
                frontier.append(replace(succ, needs_sat=False))
        return terminals


def _calldata_from_bytes(byte_exprs: list[Expr]) -> Calldata:
    if all(b.is_const() for b in byte_exprs):
        return Calldata.concrete(bytes(b.value for b in byte_exprs))
    cd = Calldata(len(byte_exprs))
    head = bytearray()
    i = 0
    while i < len(byte_exprs) and byte_exprs[i].is_const() and i < 4:
        head.append(byte_exprs[i].value)
        i += 1
    cd.head = bytes(head)
    # pack the rest into word expressions at 32-byte strides
    words = {}
    pos = len(head)
    while pos < len(byte_exprs):
        chunk = byte_exprs[pos:pos + 32]
        chunk = chunk + [ex.mk_const(0, 8)] * (32 - len(chunk))
        words[pos] = ex.concat(*chunk)
        pos += 32
    cd.words = words
    return cd


def _flag(cond: Expr) -> Expr:
    """256-bit 0/1 from a width-1 condition."""
    return ex.zext(cond, WORD)


def _nonzero(e: Expr) -> Expr:
    return ex.lnot(ex.cmp("eq", e, ex.mk_const(0, e.width)))


def _iszero(e: Expr) -> Expr:
    return ex.cmp("eq", e, ex.mk_const(0, e.width))


def _zero_guard(divisor: Expr, result: Expr) -> Expr:
    """EVM convention: division or modulo by zero yields zero."""
    zero = ex.mk_const(0, WORD)
    return ex.ite(ex.cmp("eq", divisor, zero), zero, result)


def _evm_div(a: Expr, b: Expr) -> Expr:
    return _zero_guard(b, ex.binop("udiv", a, b))

"""Concrete reference interpreter and concrete expression evaluation.

The interpreter is the differential oracle for the symbolic machine: an
independent implementation of the same instruction subset over Python
integers, with real keccak-256 for SHA3.  It can also run in `scheme`
addressing mode, where compiler map/array hash patterns are replaced by
the same compact addresses the symbolic engine uses; replaying solver
models requires that mode because model storage keys live in the compact
address space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .bytecode import Program
from .expr import Expr, PathConstraint
from .keccak import keccak256, keccak256_int

MASK256 = (1 << 256) - 1
MASK160 = (1 << 160) - 1


class ReplayError(Exception):
    """Concrete execution cannot proceed (bad model or unsupported shape)."""


# ---------------------------------------------------------------------------
# Concrete evaluation of symbolic expressions (SMT-LIB semantics)
# ---------------------------------------------------------------------------

def _sgn(v: int, w: int) -> int:
    return v - (1 << w) if v >> (w - 1) else v


def eval_expr(e: Expr, env: dict[str, int],
              arrays: Optional[dict[str, dict[int, int]]] = None,
              _memo: Optional[dict[int, int]] = None) -> int:
    """Value of e under variable bindings and array contents (default 0)."""
    arrays = arrays if arrays is not None else {}
    memo = _memo if _memo is not None else {}

    def ev(node: Expr) -> int:
        hit = memo.get(id(node))
        if hit is not None:
            return hit
        k = node.kind
        w = node.width
        mask = (1 << w) - 1
        if k == "const":
            val = node.aux
        elif k == "var":
            name = node.aux[0]
            if name not in env:
                raise ReplayError(f"unbound variable {name}")
            val = env[name] & mask
        elif k == "load":
            val = _ev_load(node)
        elif k == "ite":
            val = ev(node.args[1]) if ev(node.args[0]) else ev(node.args[2])
        elif k == "zext":
            val = ev(node.args[0])
        elif k == "sext":
            val = _sgn(ev(node.args[0]), node.args[0].width) & mask
        elif k == "extract":
            hi, lo = node.aux
            val = (ev(node.args[0]) >> lo) & mask
        elif k == "concat":
            val = 0
            for part in node.args:
                val = (val << part.width) | ev(part)
        elif k == "not":
            val = (~ev(node.args[0])) & mask
        elif k in ("ult", "ule", "slt", "sle", "eq"):
            a, b = ev(node.args[0]), ev(node.args[1])
            aw = node.args[0].width
            val = int({
                "ult": a < b, "ule": a <= b, "eq": a == b,
                "slt": _sgn(a, aw) < _sgn(b, aw),
                "sle": _sgn(a, aw) <= _sgn(b, aw)}[k])
        else:
            a, b = ev(node.args[0]), ev(node.args[1])
            val = _fold(k, a, b, w)
        memo[id(node)] = val
        return val

    def _ev_load(node: Expr) -> int:
        arr, idx = node.args
        i = ev(idx)
        cur = arr
        while cur.kind == "store":
            parent, sidx, sval = cur.args
            if ev(sidx) == i:
                return ev(sval)
            cur = parent
        if cur.kind == "const_array":
            return cur.aux
        return arrays.get(cur.aux[0], {}).get(i, 0)

    return ev(e)


def _fold(op: str, a: int, b: int, w: int) -> int:
    mask = (1 << w) - 1
    if op == "add":
        return (a + b) & mask
    if op == "sub":
        return (a - b) & mask
    if op == "mul":
        return (a * b) & mask
    if op == "udiv":
        return mask if b == 0 else a // b
    if op == "urem":
        return a if b == 0 else a % b
    if op == "sdiv":
        sa, sb = _sgn(a, w), _sgn(b, w)
        if b == 0:
            return 1 if sa < 0 else mask
        q = abs(sa) // abs(sb)
        return (-q if (sa < 0) != (sb < 0) else q) & mask
    if op == "srem":
        sa, sb = _sgn(a, w), _sgn(b, w)
        if b == 0:
            return a
        r = abs(sa) % abs(sb)
        return (-r if sa < 0 else r) & mask
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "shl":
        return 0 if b >= w else (a << b) & mask
    if op == "lshr":
        return 0 if b >= w else a >> b
    if op == "ashr":
        return (_sgn(a, w) >> min(b, w - 1)) & mask
    raise ReplayError(f"cannot evaluate operator {op}")


def check_psi(psi: PathConstraint, env: dict[str, int],
              arrays: Optional[dict[str, dict[int, int]]] = None
              ) -> tuple[bool, dict[str, int]]:
    """Forward-check a path constraint under a partial assignment.

    Conjuncts of the shape `fresh = E` with `fresh` unbound act as
    definitions and are bound from E's value; everything else must
    evaluate to true.  Returns (holds, extended assignment).
    """
    env = dict(env)
    memo: dict[int, int] = {}
    for term in psi:
        if term.kind == "eq":
            lhs, rhs = term.args
            if lhs.kind == "var" and lhs.aux[0] not in env:
                memo.clear()
                env[lhs.aux[0]] = eval_expr(rhs, env, arrays, memo)
                continue
            if rhs.kind == "var" and rhs.aux[0] not in env:
                memo.clear()
                env[rhs.aux[0]] = eval_expr(lhs, env, arrays, memo)
                continue
        try:
            ok = eval_expr(term, env, arrays, memo)
        except ReplayError:
            return False, env
        if not ok:
            return False, env
    return True, env


# ---------------------------------------------------------------------------
# The concrete interpreter
# ---------------------------------------------------------------------------

@dataclass
class ConcreteEnv:
    caller: int
    callvalue: int = 0
    timestamp: int = 1_700_000_000
    blocknumber: int = 1
    self_address: int = 0xC0DE
    registry: dict[int, Program] = field(default_factory=dict)
    pool: tuple[int, ...] = ()
    addressing: str = "keccak"      # keccak | scheme
    int_key_bound: int = 8
    gas_limit: int = 65_536


@dataclass
class ConcreteResult:
    status: str                     # stop | return | revert | gas
    stack: list[int]
    storage: dict[int, int]
    return_data: bytes
    trace: list[tuple[int, str]]
    gas_used: int

    @property
    def ok(self) -> bool:
        return self.status in ("stop", "return")


def execute_concrete(program: Program, calldata: bytes,
                     storage: Optional[dict[int, int]] = None,
                     env: Optional[ConcreteEnv] = None) -> ConcreteResult:
    """Deterministic run under the unit-cost gas model.

    Storage effects are kept only when the run ends in STOP or RETURN;
    reverted runs report the input storage unchanged.
    """
    env = env or ConcreteEnv(caller=0xA11CE)
    base = dict(storage or {})
    gas = [env.gas_limit]
    contract_storages: dict[int, dict[int, int]] = {}
    status, stack, work, ret, trace = _run_frame(
        program, calldata, base, env, gas, depth=0, static=False,
        contract_storages=contract_storages)
    final = work if status in ("stop", "return") else base
    return ConcreteResult(status, stack, final, ret, trace,
                          env.gas_limit - gas[0])


def _run_frame(program: Program, calldata: bytes, storage_in: dict[int, int],
               env: ConcreteEnv, gas: list[int], depth: int, static: bool,
               contract_storages: dict[int, dict[int, int]]):
    stack: list[int] = []
    memory = bytearray()
    storage = dict(storage_in)
    trace: list[tuple[int, str]] = []
    last_ret = b""
    pc = 0

    def mem_slice(off: int, n: int) -> bytes:
        if n == 0:
            return b""
        if off + n > len(memory):
            memory.extend(b"\x00" * (off + n - len(memory)))
        return bytes(memory[off:off + n])

    def mem_write(off: int, data: bytes) -> None:
        if not data:
            return
        if off + len(data) > len(memory):
            memory.extend(b"\x00" * (off + len(data) - len(memory)))
        memory[off:off + len(data)] = data

    def cd_word(off: int) -> int:
        chunk = calldata[off:off + 32]
        return int.from_bytes(chunk + b"\x00" * (32 - len(chunk)), "big")

    while True:
        if pc >= len(program.code):
            return "stop", stack, storage, b"", trace
        inst = program.insts.get(pc)
        if inst is None:
            return "revert", stack, storage_in, b"", trace
        if gas[0] <= 0:
            return "gas", stack, storage_in, b"", trace
        gas[0] -= 1
        op = inst.opcode
        mnem = op.mnemonic
        trace.append((pc, mnem))
        if len(stack) < op.stack_pops:
            return "revert", stack, storage_in, b"", trace

        if mnem.startswith("PUSH"):
            stack.append(inst.immediate)
        elif mnem.startswith("DUP"):
            stack.append(stack[-int(mnem[3:])])
        elif mnem.startswith("SWAP"):
            n = int(mnem[4:])
            stack[-1], stack[-n - 1] = stack[-n - 1], stack[-1]
        elif mnem.startswith("LOG"):
            del stack[-(int(mnem[3:]) + 2):]
        elif mnem == "STOP":
            return "stop", stack, storage, b"", trace
        elif mnem == "INVALID":
            return "revert", stack, storage_in, b"", trace
        elif mnem in ("RETURN", "REVERT"):
            off, n = stack.pop(), stack.pop()
            data = mem_slice(off, n)
            if mnem == "RETURN":
                return "return", stack, storage, data, trace
            return "revert", stack, storage_in, data, trace
        elif mnem in ("ADD", "MUL", "SUB", "DIV", "SDIV", "MOD", "SMOD",
                      "AND", "OR", "XOR", "BYTE", "SHL", "SHR", "SAR",
                      "LT", "GT", "SLT", "SGT", "EQ", "EXP"):
            a, b = stack.pop(), stack.pop()
            stack.append(_concrete_binop(mnem, a, b))
        elif mnem == "ISZERO":
            stack.append(int(stack.pop() == 0))
        elif mnem == "NOT":
            stack.append(~stack.pop() & MASK256)
        elif mnem == "SHA3":
            off, n = stack.pop(), stack.pop()
            stack.append(_concrete_sha3(mem_slice(off, n), env))
        elif mnem == "ADDRESS":
            stack.append(env.self_address)
        elif mnem == "BALANCE":
            stack.pop()
            stack.append(0)
        elif mnem == "CALLER":
            stack.append(env.caller)
        elif mnem == "CALLVALUE":
            stack.append(env.callvalue)
        elif mnem == "CALLDATALOAD":
            stack.append(cd_word(stack.pop()))
        elif mnem == "CALLDATASIZE":
            stack.append(len(calldata))
        elif mnem == "CALLDATACOPY":
            dst, src, n = stack.pop(), stack.pop(), stack.pop()
            chunk = calldata[src:src + n]
            mem_write(dst, chunk + b"\x00" * (n - len(chunk)))
        elif mnem == "CODESIZE":
            stack.append(len(program.code))
        elif mnem == "TIMESTAMP":
            stack.append(env.timestamp)
        elif mnem == "NUMBER":
            stack.append(env.blocknumber)
        elif mnem == "GAS":
            stack.append(gas[0])
        elif mnem == "PC":
            stack.append(pc)
        elif mnem == "POP":
            stack.pop()
        elif mnem == "MLOAD":
            stack.append(int.from_bytes(mem_slice(stack.pop(), 32), "big"))
        elif mnem == "MSTORE":
            addr, val = stack.pop(), stack.pop()
            mem_write(addr, val.to_bytes(32, "big"))
        elif mnem == "MSTORE8":
            addr, val = stack.pop(), stack.pop()
            mem_write(addr, bytes([val & 0xFF]))
        elif mnem == "SLOAD":
            stack.append(storage.get(stack.pop(), 0))
        elif mnem == "SSTORE":
            if static:
                return "revert", stack, storage_in, b"", trace
            addr, val = stack.pop(), stack.pop()
            storage[addr] = val
        elif mnem == "JUMP":
            target = stack.pop()
            if target not in program.jumpdests:
                return "revert", stack, storage_in, b"", trace
            pc = target
            continue
        elif mnem == "JUMPI":
            target, cond = stack.pop(), stack.pop()
            if cond:
                if target not in program.jumpdests:
                    return "revert", stack, storage_in, b"", trace
                pc = target
                continue
        elif mnem == "JUMPDEST":
            pass
        elif mnem == "RETURNDATASIZE":
            stack.append(len(last_ret))
        elif mnem == "RETURNDATACOPY":
            dst, src, n = stack.pop(), stack.pop(), stack.pop()
            if src + n > len(last_ret):
                return "revert", stack, storage_in, b"", trace
            mem_write(dst, last_ret[src:src + n])
        elif mnem in ("CALL", "STATICCALL"):
            if mnem == "CALL":
                _g, to, value, in_off, in_n, out_off, out_n = (
                    stack.pop(), stack.pop(), stack.pop(), stack.pop(),
                    stack.pop(), stack.pop(), stack.pop())
            else:
                _g, to, in_off, in_n, out_off, out_n = (
                    stack.pop(), stack.pop(), stack.pop(), stack.pop(),
                    stack.pop(), stack.pop())
                value = 0
            to &= MASK160
            callee = env.registry.get(to)
            if callee is None or depth + 1 > 4:
                stack.append(0)
                last_ret = b""
                continue
            sub_env = ConcreteEnv(
                caller=env.self_address, callvalue=value,
                timestamp=env.timestamp, blocknumber=env.blocknumber,
                self_address=to, registry=env.registry, pool=env.pool,
                addressing=env.addressing, int_key_bound=env.int_key_bound,
                gas_limit=env.gas_limit)
            child_store = contract_storages.setdefault(to, {})
            sub_status, _, sub_store, sub_ret, sub_trace = _run_frame(
                callee, mem_slice(in_off, in_n), child_store, sub_env, gas,
                depth + 1, static or mnem == "STATICCALL", contract_storages)
            trace.extend(sub_trace)
            if sub_status == "gas":
                return "gas", stack, storage_in, b"", trace
            ok = sub_status in ("stop", "return")
            if ok:
                contract_storages[to] = sub_store
            last_ret = sub_ret if ok else b""
            mem_write(out_off, sub_ret[:out_n])
            stack.append(int(ok))
        elif mnem in ("ASSUME", "CHECK", "ADDROF", "ADDROFMAP"):
            raise ReplayError(f"harness opcode {mnem} in concrete execution")
        else:
            raise ReplayError(f"unhandled opcode {mnem}")
        pc = inst.offset + inst.size


def _concrete_binop(mnem: str, a: int, b: int) -> int:
    if mnem == "ADD":
        return (a + b) & MASK256
    if mnem == "MUL":
        return (a * b) & MASK256
    if mnem == "SUB":
        return (a - b) & MASK256
    if mnem == "DIV":
        return 0 if b == 0 else a // b
    if mnem == "SDIV":
        sa, sb = _sgn(a, 256), _sgn(b, 256)
        if b == 0:
            return 0
        q = abs(sa) // abs(sb)
        return (-q if (sa < 0) != (sb < 0) else q) & MASK256
    if mnem == "MOD":
        return 0 if b == 0 else a % b
    if mnem == "SMOD":
        sa, sb = _sgn(a, 256), _sgn(b, 256)
        if b == 0:
            return 0
        r = abs(sa) % abs(sb)
        return (-r if sa < 0 else r) & MASK256
    if mnem == "EXP":
        return pow(a, b, 1 << 256)
    if mnem == "AND":
        return a & b
    if mnem == "OR":
        return a | b
    if mnem == "XOR":
        return a ^ b
    # shift/index ops take the shift amount (or index) from the top: a
    if mnem == "BYTE":
        return (b >> (8 * (31 - a))) & 0xFF if a < 32 else 0
    if mnem == "SHL":
        return 0 if a >= 256 else (b << a) & MASK256
    if mnem == "SHR":
        return 0 if a >= 256 else b >> a
    if mnem == "SAR":
        return (_sgn(b, 256) >> min(a, 255)) & MASK256
    if mnem == "LT":
        return int(a < b)
    if mnem == "GT":
        return int(a > b)
    if mnem == "SLT":
        return int(_sgn(a, 256) < _sgn(b, 256))
    if mnem == "SGT":
        return int(_sgn(a, 256) > _sgn(b, 256))
    if mnem == "EQ":
        return int(a == b)
    raise ReplayError(mnem)


def _concrete_sha3(data: bytes, env: ConcreteEnv) -> int:
    if env.addressing == "keccak":
        return keccak256_int(data)
    if len(data) == 64:
        key = int.from_bytes(data[:32], "big")
        slot = int.from_bytes(data[32:], "big")
        if key in env.pool:
            norm = env.pool.index(key)
        elif key < env.int_key_bound:
            norm = key
        else:
            raise ReplayError(f"map key {key:#x} not normalizable")
        return ((slot << 32) + norm) & MASK256
    if len(data) == 32:
        slot = int.from_bytes(data, "big")
        return (slot << 32) & MASK256
    return keccak256_int(data)

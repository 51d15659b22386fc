"""EVM instruction subset: decoding, assembling, disassembling.

Programs are immutable after construction and safe to share.

Four analysis-harness opcodes (ASSUME, CHECK, ADDROF, ADDROFMAP) occupy
unassigned EVM slots 0xf6-0xf9.  They never appear in compiler output;
the policy harness emits them in synthetic constraint programs, and the
assembler accepts them for hand-written fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional


class UnknownOpcode(Exception):
    def __init__(self, offset: int, byte: int):
        super().__init__(f"unknown opcode {byte:#04x} at offset {offset}")
        self.offset = offset
        self.byte = byte


class BadMnemonic(Exception):
    def __init__(self, line_no: int, text: str):
        super().__init__(f"line {line_no}: bad mnemonic in {text!r}")
        self.line_no = line_no


class ImmediateWidthMismatch(Exception):
    def __init__(self, line_no: int, text: str):
        super().__init__(f"line {line_no}: immediate does not fit in {text!r}")
        self.line_no = line_no


class UnknownLabel(Exception):
    def __init__(self, name: str):
        super().__init__(f"unknown label @{name}")
        self.name = name


@dataclass(frozen=True, slots=True)
class Opcode:
    mnemonic: str
    code: int
    immediate_bytes: int
    stack_pops: int
    stack_pushes: int


def _table() -> dict[int, Opcode]:
    ops = [
        ("STOP", 0x00, 0, 0, 0),
        ("ADD", 0x01, 0, 2, 1),
        ("MUL", 0x02, 0, 2, 1),
        ("SUB", 0x03, 0, 2, 1),
        ("DIV", 0x04, 0, 2, 1),
        ("SDIV", 0x05, 0, 2, 1),
        ("MOD", 0x06, 0, 2, 1),
        ("SMOD", 0x07, 0, 2, 1),
        ("EXP", 0x0A, 0, 2, 1),
        ("LT", 0x10, 0, 2, 1),
        ("GT", 0x11, 0, 2, 1),
        ("SLT", 0x12, 0, 2, 1),
        ("SGT", 0x13, 0, 2, 1),
        ("EQ", 0x14, 0, 2, 1),
        ("ISZERO", 0x15, 0, 1, 1),
        ("AND", 0x16, 0, 2, 1),
        ("OR", 0x17, 0, 2, 1),
        ("XOR", 0x18, 0, 2, 1),
        ("NOT", 0x19, 0, 1, 1),
        ("BYTE", 0x1A, 0, 2, 1),
        ("SHL", 0x1B, 0, 2, 1),
        ("SHR", 0x1C, 0, 2, 1),
        ("SAR", 0x1D, 0, 2, 1),
        ("SHA3", 0x20, 0, 2, 1),
        ("ADDRESS", 0x30, 0, 0, 1),
        ("BALANCE", 0x31, 0, 1, 1),
        ("CALLER", 0x33, 0, 0, 1),
        ("CALLVALUE", 0x34, 0, 0, 1),
        ("CALLDATALOAD", 0x35, 0, 1, 1),
        ("CALLDATASIZE", 0x36, 0, 0, 1),
        ("CALLDATACOPY", 0x37, 0, 3, 0),
        ("CODESIZE", 0x38, 0, 0, 1),
        ("RETURNDATASIZE", 0x3D, 0, 0, 1),
        ("RETURNDATACOPY", 0x3E, 0, 3, 0),
        ("TIMESTAMP", 0x42, 0, 0, 1),
        ("NUMBER", 0x43, 0, 0, 1),
        ("POP", 0x50, 0, 1, 0),
        ("MLOAD", 0x51, 0, 1, 1),
        ("MSTORE", 0x52, 0, 2, 0),
        ("MSTORE8", 0x53, 0, 2, 0),
        ("SLOAD", 0x54, 0, 1, 1),
        ("SSTORE", 0x55, 0, 2, 0),
        ("JUMP", 0x56, 0, 1, 0),
        ("JUMPI", 0x57, 0, 2, 0),
        ("PC", 0x58, 0, 0, 1),
        ("GAS", 0x5A, 0, 0, 1),
        ("JUMPDEST", 0x5B, 0, 0, 0),
        ("RETURN", 0xF3, 0, 2, 0),
        ("CALL", 0xF1, 0, 7, 1),
        ("ASSUME", 0xF6, 0, 1, 0),
        ("CHECK", 0xF7, 0, 1, 0),
        ("ADDROF", 0xF8, 0, 2, 1),
        ("ADDROFMAP", 0xF9, 0, 2, 1),
        ("STATICCALL", 0xFA, 0, 6, 1),
        ("REVERT", 0xFD, 0, 2, 0),
        ("INVALID", 0xFE, 0, 0, 0),
    ]
    for n in range(1, 33):
        ops.append((f"PUSH{n}", 0x60 + n - 1, n, 0, 1))
    for n in range(1, 17):
        ops.append((f"DUP{n}", 0x80 + n - 1, n, n + 1))
    for n in range(1, 17):
        ops.append((f"SWAP{n}", 0x90 + n - 1, n + 1, n + 1))
    for n in range(0, 5):
        ops.append((f"LOG{n}", 0xA0 + n, n + 2, 0))

    table = {}
    for entry in ops:
        if len(entry) == 5:
            mnem, code, imm, pops, pushes = entry
        else:
            mnem, code, pops, pushes = entry
            imm = 0
        table[code] = Opcode(mnem, code, imm, pops, pushes)
    return table


OPCODES: dict[int, Opcode] = _table()
BY_MNEMONIC: dict[str, Opcode] = {op.mnemonic: op for op in OPCODES.values()}

HARNESS_MNEMONICS = frozenset({"ASSUME", "CHECK", "ADDROF", "ADDROFMAP"})


@dataclass(frozen=True, slots=True)
class Instruction:
    offset: int
    opcode: Opcode
    immediate: Optional[int]  # PUSH family only

    @property
    def size(self) -> int:
        return 1 + self.opcode.immediate_bytes

    def text(self) -> str:
        if self.immediate is None:
            return self.opcode.mnemonic
        digits = self.opcode.immediate_bytes * 2
        return f"{self.opcode.mnemonic} 0x{self.immediate:0{digits}x}"


class Program:
    """Decoded bytecode: instruction map plus valid jump targets."""

    __slots__ = ("code", "insts", "jumpdests")

    def __init__(self, code: bytes, insts: dict[int, Instruction],
                 jumpdests: frozenset[int]):
        self.code = code
        self.insts = insts
        self.jumpdests = jumpdests

    def __len__(self) -> int:
        return len(self.code)

    def __repr__(self) -> str:
        return f"Program({len(self.code)} bytes, {len(self.insts)} insts)"


def decode(code: bytes) -> Program:
    """Decode bytecode; truncated trailing PUSH immediates are zero-padded."""
    insts: dict[int, Instruction] = {}
    jumpdests = set()
    pc = 0
    n = len(code)
    while pc < n:
        byte = code[pc]
        op = OPCODES.get(byte)
        if op is None:
            raise UnknownOpcode(pc, byte)
        imm = None
        if op.immediate_bytes:
            raw = code[pc + 1:pc + 1 + op.immediate_bytes]
            raw = raw + b"\x00" * (op.immediate_bytes - len(raw))
            imm = int.from_bytes(raw, "big")
        if op.mnemonic == "JUMPDEST":
            jumpdests.add(pc)
        insts[pc] = Instruction(pc, op, imm)
        pc += 1 + op.immediate_bytes
    return Program(bytes(code), insts, frozenset(jumpdests))


def assemble(text: str) -> bytes:
    """Assemble one instruction per line.

    Syntax: `MNEMONIC [0xIMM|DECIMAL]`, `label:` lines, and `PUSHn @label`
    references.  `#` starts a comment.
    """
    lines = text.splitlines()
    labels: dict[str, int] = {}
    parsed: list[tuple[int, Opcode, object]] = []  # (line_no, op, imm|('@', name))

    offset = 0
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.endswith(":"):
            labels[line[:-1].strip()] = offset
            continue
        parts = line.split()
        op = BY_MNEMONIC.get(parts[0].upper())
        if op is None:
            raise BadMnemonic(i, raw)
        imm: object = None
        if op.immediate_bytes:
            if len(parts) != 2:
                raise ImmediateWidthMismatch(i, raw)
            tok = parts[1]
            if tok.startswith("@"):
                imm = ("@", tok[1:])
            else:
                value = int(tok, 16) if tok.lower().startswith("0x") else int(tok)
                if value < 0 or value >= 1 << (8 * op.immediate_bytes):
                    raise ImmediateWidthMismatch(i, raw)
                imm = value
        elif len(parts) != 1:
            raise BadMnemonic(i, raw)
        parsed.append((i, op, imm))
        offset += 1 + op.immediate_bytes

    out = bytearray()
    for line_no, op, imm in parsed:
        out.append(op.code)
        if op.immediate_bytes:
            if isinstance(imm, tuple):
                name = imm[1]
                if name not in labels:
                    raise UnknownLabel(name)
                value = labels[name]
                if value >= 1 << (8 * op.immediate_bytes):
                    raise ImmediateWidthMismatch(line_no, f"@{name}")
            else:
                value = imm
            out += value.to_bytes(op.immediate_bytes, "big")
    return bytes(out)


def disassemble(program: Program) -> str:
    """Inverse of assemble, modulo labels and whitespace."""
    return "\n".join(program.insts[pc].text() for pc in sorted(program.insts))


def parse_hex(text: str) -> bytes:
    """Bytecode file format: hex text, optional 0x prefix, whitespace ignored."""
    squeezed = "".join(text.split())
    if squeezed.lower().startswith("0x"):
        squeezed = squeezed[2:]
    return bytes.fromhex(squeezed)


def load_bytecode(path: str) -> Program:
    """Load a program from a hex (.hex/.bin) or assembly (.asm) file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".asm"):
        return decode(assemble(text))
    return decode(parse_hex(text))

"""ABI descriptions, selector computation, and symbolic calldata encoding.

The native ABI file format is line-oriented structured text, one record
per function; a converter accepts the standard Ethereum ABI JSON layout.

    # comment
    fn transfer(address to, uint256 value) -> (bool)
    fn balanceOf(address owner) -> (uint256) view
    fn custom(uint256 x) -> () selector=0xdeadbeef
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import product
from typing import Optional

from . import expr as ex
from .expr import Expr
from .keccak import selector as compute_selector
from .machine import Calldata

WORD = 256

SCALAR_TYPES = {"address", "bool", "bytes32"} | {f"uint{n}" for n in range(8, 257, 8)}
ARRAY_TYPES = {"address[]", "uint256[]"}
DYNAMIC_LENGTH_BOUND = 3  # dynamic objects are bounded to three elements


class BadType(Exception):
    def __init__(self, name: str):
        super().__init__(f"unsupported ABI type {name!r}")
        self.name = name


class DuplicateSelector(Exception):
    pass


class ArityMismatch(Exception):
    pass


class TypeMismatch(Exception):
    pass


@dataclass(frozen=True, slots=True)
class AbiParam:
    name: str
    type: str


@dataclass(frozen=True, slots=True)
class AbiFunction:
    name: str
    inputs: tuple[AbiParam, ...]
    outputs: tuple[str, ...]
    selector: bytes
    view: bool = False

    @property
    def signature(self) -> str:
        return f"{self.name}({','.join(p.type for p in self.inputs)})"

    def is_mutating(self) -> bool:
        return not self.view


def _check_type(t: str) -> str:
    if t not in SCALAR_TYPES and t not in ARRAY_TYPES:
        raise BadType(t)
    return t


def make_function(name: str, inputs: list[tuple[str, str]],
                  outputs: list[str], view: bool = False,
                  selector: Optional[bytes] = None) -> AbiFunction:
    params = tuple(AbiParam(pname or f"arg{i}", _check_type(ptype))
                   for i, (ptype, pname) in enumerate(inputs))
    for t in outputs:
        _check_type(t)
    fn = AbiFunction(name, params, tuple(outputs), b"", view)
    sel = selector if selector is not None else compute_selector(fn.signature)
    return AbiFunction(name, params, tuple(outputs), sel, view)


_FN_RE = re.compile(
    r"^fn\s+(\w+)\s*\(([^)]*)\)\s*(?:->\s*\(([^)]*)\))?\s*(.*)$")


def parse_abi(text: str) -> list[AbiFunction]:
    """Parse the native structured-text format (or JSON, autodetected)."""
    stripped = text.lstrip()
    if stripped.startswith("[") or stripped.startswith("{"):
        return parse_abi_json(text)
    out: list[AbiFunction] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _FN_RE.match(line)
        if not m:
            raise BadType(f"unparseable ABI line: {raw!r}")
        name, params_s, outs_s, tail = m.groups()
        inputs = []
        for chunk in filter(None, (c.strip() for c in params_s.split(","))):
            parts = chunk.split()
            inputs.append((parts[0], parts[1] if len(parts) > 1 else ""))
        outputs = [c.strip() for c in (outs_s or "").split(",") if c.strip()]
        view = False
        sel = None
        for word in tail.split():
            if word == "view":
                view = True
            elif word.startswith("selector="):
                sel = bytes.fromhex(word.split("=", 1)[1].removeprefix("0x"))
            else:
                raise BadType(f"unknown ABI attribute {word!r}")
        out.append(make_function(name, inputs, outputs, view, sel))
    _reject_duplicates(out)
    return out


def parse_abi_json(text: str) -> list[AbiFunction]:
    """Standard Ethereum ABI JSON layout."""
    entries = json.loads(text)
    out = []
    for entry in entries:
        if entry.get("type", "function") != "function":
            continue
        view = entry.get("stateMutability") in ("view", "pure") or \
            entry.get("constant", False)
        inputs = [(p["type"], p.get("name", "")) for p in entry.get("inputs", [])]
        outputs = [p["type"] for p in entry.get("outputs", [])]
        out.append(make_function(entry["name"], inputs, outputs, view))
    _reject_duplicates(out)
    return out


def _reject_duplicates(fns: list[AbiFunction]) -> None:
    seen: dict[bytes, str] = {}
    for fn in fns:
        if fn.selector in seen:
            raise DuplicateSelector(
                f"{fn.name} and {seen[fn.selector]} share selector "
                f"0x{fn.selector.hex()}")
        seen[fn.selector] = fn.name


def load_abi(path: str) -> list[AbiFunction]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_abi(fh.read())


def find_function(abi: list[AbiFunction], name: str) -> Optional[AbiFunction]:
    for fn in abi:
        if fn.name == name:
            return fn
    return None


# ---------------------------------------------------------------------------
# Calldata encoding
# ---------------------------------------------------------------------------

@dataclass
class ArrayArg:
    """A dynamic-array argument; the length is chosen per scenario fork."""

    elem_type: str
    elements: Optional[list[Expr]] = None   # None = fully symbolic


@dataclass
class EncodedCall:
    calldata: Calldata
    assumptions: list[Expr]
    addr_tagged: frozenset[int]
    arg_views: list[object]        # Expr or list[Expr] per argument
    lengths: dict[str, int]        # dynamic arg name -> chosen length


def uint_bound(t: str) -> Optional[int]:
    if t.startswith("uint"):
        bits = int(t[4:])
        if bits < 256:
            return 1 << bits
    if t == "bool":
        return 2
    return None


def encode_calldata(fn: AbiFunction, args: list, pool: list[int],
                    fresh_hint: str = "arg") -> list[EncodedCall]:
    """Standard ABI layout: selector, head words, dynamic tails.

    Returns one encoding per combination of dynamic-array lengths in
    [0, 3].  Address-typed arguments are assumed to be pool members.
    Concrete ints, Exprs, and ArrayArg placeholders are accepted; None
    means "fresh symbolic".
    """
    if len(args) != len(fn.inputs):
        raise ArityMismatch(f"{fn.name} expects {len(fn.inputs)} args")

    dyn_positions = [i for i, p in enumerate(fn.inputs) if p.type in ARRAY_TYPES]
    length_choices: list[tuple[int, ...]] = [()]
    if dyn_positions:
        length_choices = list(product(range(DYNAMIC_LENGTH_BOUND + 1),
                                      repeat=len(dyn_positions)))

    out = []
    for lengths in length_choices:
        chosen = dict(zip(dyn_positions, lengths))
        out.append(_encode_one(fn, args, pool, chosen, fresh_hint))
    return out


def _coerce_scalar(param: AbiParam, value, pool: list[int],
                   assumptions: list[Expr], tagged: set[int],
                   fresh_hint: str) -> Expr:
    t = param.type
    if value is None:
        role = "address" if t == "address" else None
        value = ex.fresh_var(f"{fresh_hint}_{param.name}", WORD, role)
    if isinstance(value, int):
        value = ex.mk_const(value, WORD)
    if not isinstance(value, Expr):
        raise TypeMismatch(f"{param.name}: expected int or expression")
    if t == "address":
        tagged.add(id(value))
        if not (value.is_const() and value.value in pool):
            assumptions.append(_pool_member(value, pool))
    else:
        bound = uint_bound(t)
        if bound is not None and not value.is_const():
            assumptions.append(ex.cmp("ult", value, ex.mk_const(bound, WORD)))
    return value


def _pool_member(value: Expr, pool: list[int]) -> Expr:
    member = ex.FALSE
    for addr in pool:
        member = ex.binop("or", ex.cmp("eq", value, ex.mk_const(addr, WORD)),
                          member)
    return member


def _encode_one(fn: AbiFunction, args: list, pool: list[int],
                chosen: dict[int, int], fresh_hint: str) -> EncodedCall:
    assumptions: list[Expr] = []
    tagged: set[int] = set()
    head: list[Expr] = [None] * len(fn.inputs)
    tails: list[tuple[int, list[Expr]]] = []  # (head position, tail words)
    arg_views: list[object] = []
    lengths: dict[str, int] = {}

    head_size = 32 * len(fn.inputs)
    tail_cursor = head_size

    for i, param in enumerate(fn.inputs):
        value = args[i]
        if param.type in ARRAY_TYPES:
            n = chosen[i]
            lengths[param.name] = n
            elem_param = AbiParam(f"{param.name}[]",
                                  param.type.removesuffix("[]"))
            if isinstance(value, ArrayArg) and value.elements is not None:
                if len(value.elements) != n:
                    raise TypeMismatch(
                        f"{param.name}: literal length {len(value.elements)} "
                        f"vs fork length {n}")
                elems = [
                    _coerce_scalar(elem_param, v, pool, assumptions, tagged,
                                   fresh_hint) for v in value.elements]
            else:
                elems = [
                    _coerce_scalar(
                        AbiParam(f"{param.name}{k}", elem_param.type), None,
                        pool, assumptions, tagged, fresh_hint)
                    for k in range(n)]
            head[i] = ex.mk_const(tail_cursor, WORD)
            tails.append((i, [ex.mk_const(n, WORD)] + elems))
            tail_cursor += 32 * (1 + n)
            arg_views.append(elems)
        else:
            word = _coerce_scalar(param, value, pool, assumptions, tagged,
                                  fresh_hint)
            head[i] = word
            arg_views.append(word)

    words: dict[int, Expr] = {}
    offset = 4
    for word in head:
        words[offset] = word
        offset += 32
    for _, tail_words in tails:
        for word in tail_words:
            words[offset] = word
            offset += 32

    calldata = Calldata(length=4 + tail_cursor, head=fn.selector, words=words)
    return EncodedCall(calldata, assumptions, frozenset(tagged), arg_views,
                       lengths)


def encode_calldata_concrete(fn: AbiFunction, args: list) -> bytes:
    """Concrete ABI encoding (ints, lists of ints) for replay runs."""
    if len(args) != len(fn.inputs):
        raise ArityMismatch(f"{fn.name} expects {len(fn.inputs)} args")
    head = b""
    tail = b""
    tail_base = 32 * len(fn.inputs)
    for param, value in zip(fn.inputs, args):
        if param.type in ARRAY_TYPES:
            if not isinstance(value, (list, tuple)):
                raise TypeMismatch(f"{param.name}: expected a list")
            head += (tail_base + len(tail)).to_bytes(32, "big")
            tail += len(value).to_bytes(32, "big")
            for v in value:
                tail += (v & ((1 << 256) - 1)).to_bytes(32, "big")
        else:
            if not isinstance(value, int):
                raise TypeMismatch(f"{param.name}: expected an int")
            head += (value & ((1 << 256) - 1)).to_bytes(32, "big")
    return fn.selector + head + tail

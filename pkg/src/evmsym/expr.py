"""Symbolic expressions over bitvectors and arrays.

Every node is hash-consed: building the same shape twice returns the same
object, so `a is b` is equivalent to structural equality.  Widths are 1
(booleans), 8 (memory cells) and 256 (words); extract/concat create
transient intermediate widths.

Folding follows SMT-LIB bitvector semantics exactly (e.g. `bvudiv x 0`
is all-ones).  EVM's division-by-zero-is-zero convention is encoded by
the machine with an explicit ite guard, not here.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Optional


class WidthMismatch(Exception):
    """Operand widths violate the operator's width rule."""


# ---------------------------------------------------------------------------
# Node representation and interning
# ---------------------------------------------------------------------------

_BINOPS = frozenset(
    "add sub mul udiv sdiv urem srem and or xor shl lshr ashr".split()
)
_CMPOPS = frozenset("ult ule slt sle eq".split())
_UNOPS = frozenset(("not",))

_interned: dict[tuple, "Expr"] = {}
_fresh_counts: dict[str, int] = {}


class Expr:
    """A hash-consed expression node.

    kind is one of: const, var, array, store, load, ite, concat, extract,
    zext, sext, the unary op `not`, the binary ops in _BINOPS, or the
    comparisons in _CMPOPS (comparisons have width 1).
    """

    __slots__ = ("kind", "width", "args", "aux")

    def __init__(self, kind: str, width: int, args: tuple, aux):
        self.kind = kind
        self.width = width
        self.args = args
        self.aux = aux

    # Interning makes identity equality structural; keep default id-hash.

    def is_const(self) -> bool:
        return self.kind == "const"

    @property
    def value(self) -> int:
        assert self.kind == "const"
        return self.aux

    @property
    def name(self) -> str:
        assert self.kind in ("var", "array")
        return self.aux[0]

    @property
    def role(self) -> Optional[str]:
        assert self.kind == "var"
        return self.aux[1]

    @property
    def elem_width(self) -> int:
        assert self.kind in ("array", "store", "const_array")
        return self.width

    def __repr__(self) -> str:
        return pretty(self, max_depth=4)


def _mk(kind: str, width: int, args: tuple = (), aux=None) -> Expr:
    key = (kind, width, aux, tuple(id(a) for a in args))
    node = _interned.get(key)
    if node is None:
        node = Expr(kind, width, args, aux)
        _interned[key] = node
    return node


def interned_count() -> int:
    return len(_interned)


# ---------------------------------------------------------------------------
# Leaves
# ---------------------------------------------------------------------------

def mk_const(value: int, width: int) -> Expr:
    """Canonical constant; value is reduced modulo 2**width."""
    return _mk("const", width, aux=value & ((1 << width) - 1))


def mk_var(name: str, width: int, role: Optional[str] = None) -> Expr:
    return _mk("var", width, aux=(name, role))


def fresh_var(hint: str, width: int, role: Optional[str] = None) -> Expr:
    """A globally unique variable; the hint survives into solver models."""
    n = _fresh_counts.get(hint, 0)
    _fresh_counts[hint] = n + 1
    return mk_var(f"{hint}_{n}", width, role)


def mk_array(name: str, elem_width: int) -> Expr:
    """A free array from 256-bit indices to elem_width values."""
    if elem_width not in (8, 256):
        raise WidthMismatch(f"unsupported array element width {elem_width}")
    return _mk("array", elem_width, aux=(name, elem_width))


def const_array(default: int, elem_width: int) -> Expr:
    """An array mapping every index to the same constant (zeroed memory)."""
    return _mk("const_array", elem_width, aux=default & ((1 << elem_width) - 1))


def fresh_array(hint: str, elem_width: int) -> Expr:
    n = _fresh_counts.get(hint, 0)
    _fresh_counts[hint] = n + 1
    return mk_array(f"{hint}_{n}", elem_width)


TRUE = mk_const(1, 1)
FALSE = mk_const(0, 1)


# ---------------------------------------------------------------------------
# Folding helpers (SMT-LIB semantics)
# ---------------------------------------------------------------------------

def _signed(v: int, w: int) -> int:
    return v - (1 << w) if v >> (w - 1) else v


def _fold_bin(op: str, a: int, b: int, w: int) -> int:
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
        sa, sb = _signed(a, w), _signed(b, w)
        if b == 0:
            return 1 if sa < 0 else mask
        q = abs(sa) // abs(sb)
        if (sa < 0) != (sb < 0):
            q = -q
        return q & mask
    if op == "srem":
        sa, sb = _signed(a, w), _signed(b, w)
        if b == 0:
            return a
        r = abs(sa) % abs(sb)
        if sa < 0:
            r = -r
        return r & mask
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
        sa = _signed(a, w)
        return (sa >> min(b, w - 1)) & mask
    raise AssertionError(op)


def _fold_cmp(op: str, a: int, b: int, w: int) -> bool:
    if op == "ult":
        return a < b
    if op == "ule":
        return a <= b
    if op == "slt":
        return _signed(a, w) < _signed(b, w)
    if op == "sle":
        return _signed(a, w) <= _signed(b, w)
    if op == "eq":
        return a == b
    raise AssertionError(op)


# ---------------------------------------------------------------------------
# Operator constructors with local rewrites
# ---------------------------------------------------------------------------

def _is_zero(e: Expr) -> bool:
    return e.kind == "const" and e.aux == 0


def _is_ones(e: Expr) -> bool:
    return e.kind == "const" and e.aux == (1 << e.width) - 1


def _is_one(e: Expr) -> bool:
    return e.kind == "const" and e.aux == 1


def binop(op: str, a: Expr, b: Expr) -> Expr:
    if op not in _BINOPS:
        raise WidthMismatch(f"unknown binary operator {op}")
    if a.width != b.width:
        raise WidthMismatch(f"{op}: {a.width} vs {b.width}")
    w = a.width
    if a.kind == "const" and b.kind == "const":
        return mk_const(_fold_bin(op, a.aux, b.aux, w), w)

    if op == "add":
        if _is_zero(b):
            return a
        if _is_zero(a):
            return b
    elif op == "sub":
        if _is_zero(b):
            return a
        if a is b:
            return mk_const(0, w)
    elif op == "mul":
        if _is_one(b):
            return a
        if _is_one(a):
            return b
        if _is_zero(a) or _is_zero(b):
            return mk_const(0, w)
    elif op == "and":
        if _is_zero(a) or _is_zero(b):
            return mk_const(0, w)
        if _is_ones(b) or a is b:
            return a
        if _is_ones(a):
            return b
    elif op == "or":
        if _is_zero(b) or a is b:
            return a
        if _is_zero(a):
            return b
        if _is_ones(a) or _is_ones(b):
            return mk_const((1 << w) - 1, w)
    elif op == "xor":
        if a is b:
            return mk_const(0, w)
        if _is_zero(b):
            return a
        if _is_zero(a):
            return b
    elif op == "udiv":
        # division by a constant power of two is a logical shift
        if b.kind == "const" and b.aux != 0 and b.aux & (b.aux - 1) == 0:
            return binop("lshr", a, mk_const(b.aux.bit_length() - 1, w))
    elif op in ("shl", "lshr", "ashr"):
        if _is_zero(b):
            return a
        if op == "lshr" and b.kind == "const" and a.kind == "concat":
            # dropping exactly the low part of a concat keeps the high part
            low_width = sum(x.width for x in a.args[1:])
            if b.aux == low_width:
                return zext(a.args[0], w)
    return _mk(op, w, (a, b))


def cmp(op: str, a: Expr, b: Expr) -> Expr:
    if op not in _CMPOPS:
        raise WidthMismatch(f"unknown comparison {op}")
    if a.width != b.width:
        raise WidthMismatch(f"{op}: {a.width} vs {b.width}")
    if a.kind == "const" and b.kind == "const":
        return TRUE if _fold_cmp(op, a.aux, b.aux, a.width) else FALSE
    if a is b:
        return TRUE if op in ("eq", "ule", "sle") else FALSE
    return _mk(op, 1, (a, b))


def lnot(a: Expr) -> Expr:
    if a.width == 1:
        if a is TRUE:
            return FALSE
        if a is FALSE:
            return TRUE
    if a.kind == "const":
        return mk_const(~a.aux, a.width)
    if a.kind == "not":
        return a.args[0]
    return _mk("not", a.width, (a,))


def ite(c: Expr, a: Expr, b: Expr) -> Expr:
    if c.width != 1:
        raise WidthMismatch("ite condition must have width 1")
    if a.width != b.width:
        raise WidthMismatch(f"ite arms: {a.width} vs {b.width}")
    if c is TRUE:
        return a
    if c is FALSE:
        return b
    if a is b:
        return a
    return _mk("ite", a.width, (c, a, b))


def zext(a: Expr, width: int) -> Expr:
    if width < a.width:
        raise WidthMismatch(f"zext to {width} from {a.width}")
    if width == a.width:
        return a
    if a.kind == "const":
        return mk_const(a.aux, width)
    return _mk("zext", width, (a,), aux=width - a.width)


def sext(a: Expr, width: int) -> Expr:
    if width < a.width:
        raise WidthMismatch(f"sext to {width} from {a.width}")
    if width == a.width:
        return a
    if a.kind == "const":
        return mk_const(_signed(a.aux, a.width), width)
    return _mk("sext", width, (a,), aux=width - a.width)


def extract(a: Expr, hi: int, lo: int) -> Expr:
    if not (0 <= lo <= hi < a.width):
        raise WidthMismatch(f"extract [{hi}:{lo}] of width {a.width}")
    w = hi - lo + 1
    if w == a.width:
        return a
    if a.kind == "const":
        return mk_const(a.aux >> lo, w)
    if a.kind == "extract":
        ihi, ilo = a.aux
        return extract(a.args[0], ilo + hi, ilo + lo)
    if a.kind == "zext":
        inner = a.args[0]
        if lo >= inner.width:
            return mk_const(0, w)
        if hi < inner.width:
            return extract(inner, hi, lo)
    if a.kind == "concat":
        # narrow into the parts the slice actually touches
        parts = []
        pos = a.width
        for part in a.args:
            p_hi, p_lo = pos - 1, pos - part.width
            pos = p_lo
            s_hi, s_lo = min(hi, p_hi), max(lo, p_lo)
            if s_hi >= s_lo:
                parts.append(extract(part, s_hi - p_lo, s_lo - p_lo))
        if len(parts) == 1:
            return parts[0]
        return concat(*parts)
    return _mk("extract", w, (a,), aux=(hi, lo))


def concat(*parts: Expr) -> Expr:
    """Big-endian concatenation; flattens and merges adjacent slices."""
    flat: list[Expr] = []
    for p in parts:
        if p.kind == "concat":
            flat.extend(p.args)
        else:
            flat.append(p)
    if not flat:
        raise WidthMismatch("concat of nothing")

    merged: list[Expr] = []
    for p in flat:
        prev = merged[-1] if merged else None
        if prev is not None and prev.kind == "const" and p.kind == "const":
            merged[-1] = mk_const((prev.aux << p.width) | p.aux, prev.width + p.width)
            continue
        if (
            prev is not None
            and prev.kind == "extract"
            and p.kind == "extract"
            and prev.args[0] is p.args[0]
            and prev.aux[1] == p.aux[0] + 1
        ):
            merged[-1] = extract(p.args[0], prev.aux[0], p.aux[1])
            continue
        merged.append(p)
    if len(merged) == 1:
        return merged[0]
    width = sum(p.width for p in merged)
    return _mk("concat", width, tuple(merged))


# ---------------------------------------------------------------------------
# Arrays
# ---------------------------------------------------------------------------

def array_store(arr: Expr, idx: Expr, val: Expr) -> Expr:
    """Persistent store; the input array is unchanged."""
    if arr.kind not in ("array", "store", "const_array"):
        raise WidthMismatch("store target is not an array")
    if idx.width != 256:
        raise WidthMismatch(f"store index width {idx.width}")
    if val.width != arr.elem_width:
        raise WidthMismatch(f"store value width {val.width} != {arr.elem_width}")
    if arr.kind == "store" and arr.args[1] is idx:
        arr = arr.args[0]  # overwrite of the identical index
    return _mk("store", arr.elem_width, (arr, idx, val))


def array_load(arr: Expr, idx: Expr) -> Expr:
    """Load with read-over-write on syntactically decidable indices."""
    if arr.kind not in ("array", "store", "const_array"):
        raise WidthMismatch("load target is not an array")
    if idx.width != 256:
        raise WidthMismatch(f"load index width {idx.width}")
    cur = arr
    while cur.kind == "store":
        _, sidx, sval = cur.args
        if sidx is idx:
            return sval
        if sidx.kind == "const" and idx.kind == "const":
            cur = cur.args[0]  # provably different, skip this write
            continue
        break
    if cur.kind == "const_array":
        return mk_const(cur.aux, cur.elem_width)
    return _mk("load", cur.elem_width, (cur, idx))


def base_array(arr: Expr) -> Expr:
    """The free array at the bottom of a store chain."""
    while arr.kind == "store":
        arr = arr.args[0]
    return arr


# ---------------------------------------------------------------------------
# Generic dispatcher (named-operator surface)
# ---------------------------------------------------------------------------

def mk_op(op: str, args: list[Expr] | tuple[Expr, ...]) -> Expr:
    """Build `op` applied to args, folding constants and local rewrites."""
    args = tuple(args)
    if op in _BINOPS:
        if len(args) != 2:
            raise WidthMismatch(f"{op} expects 2 operands")
        return binop(op, *args)
    if op in _CMPOPS:
        if len(args) != 2:
            raise WidthMismatch(f"{op} expects 2 operands")
        return cmp(op, *args)
    if op in ("ugt", "uge", "sgt", "sge"):
        flipped = {"ugt": "ult", "uge": "ule", "sgt": "slt", "sge": "sle"}[op]
        return cmp(flipped, args[1], args[0])
    if op == "ne":
        return lnot(cmp("eq", *args))
    if op == "not":
        (a,) = args
        return lnot(a)
    if op == "ite":
        return ite(*args)
    if op == "concat":
        return concat(*args)
    raise WidthMismatch(f"unknown operator {op}")


# ---------------------------------------------------------------------------
# Path constraints
# ---------------------------------------------------------------------------

class PathConstraint:
    """An append-only conjunction of width-1 terms.

    Extending returns a new object sharing the prefix, so a child state's
    constraint is always its parent's plus appended conjuncts.  Appending
    a conjunct already present (same interned node) is a no-op.
    """

    __slots__ = ("terms", "_ids")

    def __init__(self, terms: tuple[Expr, ...] = (),
                 _ids: Optional[frozenset] = None):
        self.terms = terms
        self._ids = _ids if _ids is not None else \
            frozenset(id(t) for t in terms)

    def append(self, *conds: Expr) -> "PathConstraint":
        new = list(self.terms)
        ids = set(self._ids)
        for c in conds:
            if c.width != 1:
                raise WidthMismatch("path constraint term must have width 1")
            if c is TRUE or id(c) in ids:
                continue
            ids.add(id(c))
            new.append(c)
        if len(new) == len(self.terms):
            return self
        return PathConstraint(tuple(new), frozenset(ids))

    def extends(self, other: "PathConstraint") -> bool:
        n = len(other.terms)
        return len(self.terms) >= n and self.terms[:n] == other.terms

    def has_false(self) -> bool:
        return any(t is FALSE for t in self.terms)

    def __iter__(self) -> Iterator[Expr]:
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def key(self) -> tuple:
        return tuple(id(t) for t in self.terms)

    def __repr__(self) -> str:
        return f"PathConstraint({len(self.terms)} terms)"


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------

def iter_dag(roots: Iterable[Expr]) -> Iterator[Expr]:
    """Each reachable node exactly once, children before parents."""
    seen: set[int] = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            yield node
        else:
            stack.append((node, True))
            for a in node.args:
                if id(a) not in seen:
                    stack.append((a, False))


def free_vars(roots: Iterable[Expr]) -> list[Expr]:
    return [n for n in iter_dag(roots) if n.kind == "var"]


def free_arrays(roots: Iterable[Expr]) -> list[Expr]:
    return [n for n in iter_dag(roots) if n.kind == "array"]


def loads_of(roots: Iterable[Expr]) -> list[Expr]:
    return [n for n in iter_dag(roots) if n.kind == "load"]


def contains_var_role(e: Expr, role: str) -> bool:
    return any(n.kind == "var" and n.aux[1] == role for n in iter_dag([e]))


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

def pretty(e: Expr, max_depth: int = 12) -> str:
    if max_depth == 0:
        return "..."
    k = e.kind
    if k == "const":
        return f"{e.aux:#x}:{e.width}" if e.width > 8 else f"{e.aux}:{e.width}"
    if k == "var":
        return e.aux[0]
    if k == "array":
        return e.aux[0]
    if k == "extract":
        hi, lo = e.aux
        return f"{pretty(e.args[0], max_depth - 1)}[{hi}:{lo}]"
    inner = " ".join(pretty(a, max_depth - 1) for a in e.args)
    return f"({k} {inner})"

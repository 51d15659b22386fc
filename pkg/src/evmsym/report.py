"""Error reports: schema, line-delimited serialization, pretty rendering.

One JSON record per line; the stream interleaves `violation`, `progress`
and `summary` records.  Every violation carries a full concrete model
(per-variable assignments plus per-transaction inputs), sufficient to
replay the trace through the concrete interpreter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

CLASSIFICATIONS = ("severe", "backdoor", "attackable", "deviation")


@dataclass
class TxnModel:
    fn: str
    sender: str                    # hex
    value: str                     # hex
    args: list                     # hex strings, or lists for array args
    timestamp: str
    blocknumber: str
    view: bool = False
    kind: str = "call"             # call | assume | check


@dataclass
class ErrorReport:
    contract: str
    policy: str
    scenario: str
    function: str
    check_id: str
    message: str
    classification: str
    variables: dict[str, str] = field(default_factory=dict)
    pool: list[str] = field(default_factory=list)
    initial_storage: dict[str, str] = field(default_factory=dict)
    txns: list[TxnModel] = field(default_factory=list)
    trace: list = field(default_factory=list)
    solver_ms: float = 0.0
    explore_ms: float = 0.0
    replay_ok: Optional[bool] = None
    lengths: list[int] = field(default_factory=list)
    seed: int = 0
    pool_size: int = 3

    def to_json(self) -> str:
        record = {"type": "violation", **asdict(self)}
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ErrorReport":
        record = json.loads(line)
        if record.get("type") != "violation":
            raise ValueError(f"not a violation record: {record.get('type')}")
        record.pop("type")
        txns = [TxnModel(**t) for t in record.pop("txns", [])]
        return cls(txns=txns, **record)


_REQUIRED = {
    "violation": {"contract", "policy", "scenario", "function", "check_id",
                  "message", "classification", "variables", "pool",
                  "initial_storage", "txns", "trace"},
    "progress": {"states", "frontier"},
    "summary": {"contract", "violations", "scenarios"},
    "error": {"contract", "reason"},
}


def validate_line(line: str) -> str:
    """Schema-check one stream record; returns its type or raises."""
    record = json.loads(line)
    kind = record.get("type")
    if kind not in _REQUIRED:
        raise ValueError(f"unknown record type {kind!r}")
    missing = _REQUIRED[kind] - record.keys()
    if missing:
        raise ValueError(f"{kind} record missing fields: {sorted(missing)}")
    if kind == "violation":
        if record["classification"] not in CLASSIFICATIONS:
            raise ValueError(
                f"bad classification {record['classification']!r}")
        for txn in record["txns"]:
            if not {"fn", "sender", "value", "args"} <= txn.keys():
                raise ValueError("txn model missing fields")
    return kind


def render_pretty(report: ErrorReport) -> str:
    lines = [
        f"VIOLATION [{report.classification}] {report.contract} :: "
        f"{report.policy}",
        f"  function : {report.function or '-'}",
        f"  check    : {report.check_id}  {report.message}",
        f"  replay   : "
        f"{'PASS' if report.replay_ok else 'unverified' if report.replay_ok is None else 'FAIL'}",
    ]
    if report.variables:
        lines.append("  model:")
        for name, value in sorted(report.variables.items()):
            lines.append(f"    {name} = {value}")
    for i, txn in enumerate(report.txns, start=1):
        if txn.kind != "call":
            continue
        args = ", ".join(
            f"[{', '.join(a)}]" if isinstance(a, list) else a
            for a in txn.args)
        mark = " (view)" if txn.view else ""
        lines.append(f"  txn {i}: {txn.fn}({args}) from {txn.sender}{mark}")
    if report.initial_storage:
        lines.append("  initial storage:")
        for addr, value in sorted(report.initial_storage.items()):
            lines.append(f"    [{addr}] = {value}")
    lines.append(f"  timing: solver {report.solver_ms:.0f} ms, "
                 f"explore {report.explore_ms:.0f} ms")
    return "\n".join(lines)

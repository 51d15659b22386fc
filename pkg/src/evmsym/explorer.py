"""Main exploration loop: DFS over symbolic states across transactions.

The frontier is a LIFO stack and the newest successor is explored first.
Each popped state is stepped once; successors that extend the path
constraint are kept only if satisfiable.  A state reaching pc=err is a
violation (re-verified at report time).  A normally terminated state
rolls into the next transaction of the sequence, handing over committed
storage (reverted transactions hand over the pre-transaction storage).

Satisfiability is checked at the sites that actually extend the path
constraint (branches, assumes, checks, addressing assumptions); pure
stack instructions cannot change it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol

from . import expr as ex
from .expr import Expr, PathConstraint
from .machine import (EMPTY_RETURN, ExecState, Machine, PC_ERR, PC_NIL,
                      Transaction, initial_state)


class ScenarioError(Exception):
    """The scenario itself is ill-formed (e.g. a view call writes state)."""


class Step(Protocol):
    """One unit of a transaction sequence the explorer can run."""

    bind: Optional[str]
    view: bool
    kind: str           # call | assume | check
    check_id: str
    message: str
    classification: str

    def build(self, prev: Optional[ExecState], machine: Machine
              ) -> tuple[Transaction, list[Expr], bool]:
        """Materialize the transaction for one path; may consult bindings.

        The third element says whether the appended constraints can make
        the path infeasible (constraints over fresh variables cannot)."""
        ...

    def decode_return(self, state: ExecState) -> Expr:
        ...


@dataclass
class Budget:
    wall_s: float = 1200.0          # mirrors the 20-minute per-contract budget
    max_states: int = 200_000

    def exhausted(self, started: float, states: int) -> Optional[str]:
        if time.monotonic() - started > self.wall_s:
            return f"wall clock over {self.wall_s:.0f}s"
        if states > self.max_states:
            return f"over {self.max_states} states"
        return None


@dataclass
class Violation:
    kind: str                       # check_failed | reentrancy
    check_id: str
    message: str
    classification: str
    txn_index: int
    psi: PathConstraint
    trace: tuple
    state: Optional[ExecState] = None


@dataclass
class ExploreResult:
    violations: list[Violation] = field(default_factory=list)
    completed_paths: int = 0
    states_explored: int = 0
    incomplete: Optional[str] = None  # budget exhaustion reason
    solver_ms: float = 0.0
    wall_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations and self.incomplete is None


def explore(steps: list[Step], init_storage: Expr, machine: Machine,
            budget: Optional[Budget] = None,
            init_psi: Optional[PathConstraint] = None,
            reentrancy: bool = False,
            progress: Optional[Callable[[dict], None]] = None) -> ExploreResult:
    """Run the transaction sequence, collecting violations.

    steps must be nonempty.  The first transaction starts from
    init_storage (normally a free symbolic array) under init_psi.
    """
    if not steps:
        raise ScenarioError("empty transaction sequence")
    budget = budget or Budget()
    solver = machine.solver
    result = ExploreResult()
    started = time.monotonic()
    solver_ms0 = solver.solver_ms if solver else 0.0

    txn, adds, _ = steps[0].build(None, machine)
    psi = (init_psi or PathConstraint()).append(*adds)
    first = initial_state(txn, init_storage, psi, machine.options.gas_limit)
    if solver is not None and len(psi) and solver.check_sat(psi).status == "unsat":
        result.incomplete = "initial constraints unsatisfiable"
        return result

    frontier: list[ExecState] = [first]
    seen_reentrancy: set[tuple] = set()

    while frontier:
        reason = budget.exhausted(started, result.states_explored)
        if reason:
            result.incomplete = reason
            break
        state = frontier.pop()

        if state.terminated:
            _boundary(state, steps, machine, frontier, result,
                      reentrancy, seen_reentrancy)
            continue

        result.states_explored += 1
        if progress and result.states_explored % 2000 == 0:
            progress({"states": result.states_explored,
                      "frontier": len(frontier),
                      "violations": len(result.violations)})

        for succ in machine.step(state):
            if succ.needs_sat and solver is not None:
                if solver.check_sat(succ.psi).status != "sat":
                    continue
            succ = replace(succ, needs_sat=False)
            if succ.pc == PC_ERR:
                _report_check(succ, steps, machine, result)
            else:
                frontier.append(succ)

    result.wall_ms = (time.monotonic() - started) * 1000.0
    if solver:
        result.solver_ms = solver.solver_ms - solver_ms0
    return result


def _report_check(state: ExecState, steps: list[Step], machine: Machine,
                  result: ExploreResult) -> None:
    """pc=err: a check failed on a feasible path (re-verify, then record)."""
    if machine.solver is not None:
        if machine.solver.check_sat(state.psi).status != "sat":
            return
    step = steps[state.txn_index - 1]
    result.violations.append(Violation(
        kind="check_failed",
        check_id=getattr(step, "check_id", f"txn{state.txn_index}"),
        message=getattr(step, "message", "check failed"),
        classification=getattr(step, "classification", "deviation"),
        txn_index=state.txn_index,
        psi=state.psi,
        trace=state.trace,
        state=state))


def _boundary(state: ExecState, steps: list[Step], machine: Machine,
              frontier: list[ExecState], result: ExploreResult,
              reentrancy: bool, seen: set) -> None:
    """A transaction finished: commit effects and queue the next one."""
    if state.status == "gas":
        return  # the transaction aborted; the path is abandoned silently

    idx = state.txn_index           # 1-based
    step = steps[idx - 1]
    committed = state.storage if state.status in ("stop", "return") \
        else state.storage_at_txn_start

    if step.view:
        if any(ev[0] == "swrite" and ev[1] == idx for ev in state.events):
            raise ScenarioError(
                f"view call {getattr(step, 'label', idx)} writes storage")
        committed = state.storage_at_txn_start

    bindings = state.bindings
    if step.bind:
        ok = state.status in ("stop", "return")
        value = step.decode_return(state) if ok else ex.mk_const(0, 256)
        bindings = bindings + (
            (step.bind, value),
            (step.bind + "#status", ex.mk_const(1 if ok else 0, 256)))

    if idx == len(steps):
        result.completed_paths += 1
        if reentrancy:
            _scan_reentrancy(state, result, seen)
        return

    nxt = steps[idx]
    carried = replace(state, bindings=bindings)
    txn, adds, needs_sat = nxt.build(carried, machine)
    psi = state.psi.append(*adds)
    if needs_sat and psi is not state.psi and machine.solver is not None:
        if machine.solver.check_sat(psi).status != "sat":
            return
    frontier.append(initial_state(
        txn, committed, psi, machine.options.gas_limit, txn_index=idx + 1,
        bindings=bindings, contract_storages=state.contract_storages,
        txn_journal=state.txn_journal, trace=state.trace,
        events=state.events))


def _scan_reentrancy(state: ExecState, result: ExploreResult,
                     seen: set) -> None:
    """'No write after external call': one warning per offending path."""
    pending_call: Optional[tuple] = None
    for event in state.events:
        kind = event[0]
        if kind == "xcall":
            pending_call = event
        elif (kind == "swrite" and pending_call is not None
              and pending_call[1] == event[1]):  # same transaction
            key = (pending_call[1], pending_call[2], event[1], event[2])
            if key not in seen:
                seen.add(key)
                result.violations.append(Violation(
                    kind="reentrancy",
                    check_id="reentrancy",
                    message=("persistent state written after an unresolved "
                             "external call"),
                    classification="attackable",
                    txn_index=event[1],
                    psi=state.psi,
                    trace=state.trace,
                    state=state))
            return


def detect_reentrancy(events: tuple) -> list[tuple]:
    """All (call event, write event) pairs violating the rule, in order."""
    out = []
    pending = None
    for event in events:
        if event[0] == "xcall":
            pending = event
        elif (event[0] == "swrite" and pending is not None
              and pending[1] == event[1]):
            out.append((pending, event))
    return out


# ---------------------------------------------------------------------------
# Plain transactions as steps (used by tests and the differential suite)
# ---------------------------------------------------------------------------

@dataclass
class RawStep:
    """Wraps a fully built Transaction; no bindings, no scenario sugar."""

    txn: Transaction
    bind: Optional[str] = None
    view: bool = False
    kind: str = "call"
    check_id: str = ""
    message: str = ""
    classification: str = "deviation"

    def build(self, prev, machine):
        return self.txn, [], False

    def decode_return(self, state: ExecState) -> Expr:
        rd = state.return_data
        if rd.size >= 32 and rd.word is not None:
            return rd.word
        if rd.size == 0:
            return ex.mk_const(0, 256)
        parts = [rd.byte(i) for i in range(32)]
        return ex.concat(*parts)

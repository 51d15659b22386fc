"""Analysis orchestration: scenarios in, self-verified error reports out.

analyze() expands each policy against the contract ABI, explores every
scenario variant, extracts concrete models for violations, and (by
default) replays each model through the concrete interpreter to confirm
the violated check really evaluates false on it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from . import expr as ex
from .abi import AbiFunction, encode_calldata_concrete, find_function
from .bytecode import Program
from .concrete import ConcreteEnv, ReplayError, execute_concrete
from .explorer import Budget, ExploreResult, Violation, explore
from .expr import Expr, PathConstraint
from .machine import Machine, MachineOptions, Transaction
from .report import ErrorReport, TxnModel
from .scenario import (CallStep, CompiledScenario, ConstraintStep,
                       MissingFunction, Scenario, compile_scenario,
                       eval_policy_expr, _to_word, DEFAULT_SEED)
from .smt import SolverBackend

WORD = 256


@dataclass
class AnalysisOptions:
    solver_command: Optional[list[str]] = None
    timeout_ms: int = 10_000
    gas: int = 65_536
    pool_size: int = 3
    seed: int = DEFAULT_SEED
    max_states: int = 200_000
    wall_s: float = 1200.0
    smt_dump: Optional[str] = None
    reentrancy: bool = False
    memcache: bool = True
    addr_scheme: bool = True
    verify_reports: bool = True
    self_address: int = 0xC0DE
    max_reports_per_check: int = 1


@dataclass
class ScenarioOutcome:
    scenario: str
    policy: str
    function: str
    status: str                     # clean | flagged | missing | budget
    reports: list[ErrorReport] = field(default_factory=list)
    duplicate_violations: int = 0
    result: Optional[ExploreResult] = None


@dataclass
class AnalysisOutcome:
    contract: str
    outcomes: list[ScenarioOutcome] = field(default_factory=list)
    missing: dict[str, list[str]] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return any(o.status == "flagged" for o in self.outcomes)

    def policy_status(self, policy: str) -> str:
        statuses = {o.status for o in self.outcomes if o.policy == policy}
        if policy in self.missing:
            return "missing"
        if "flagged" in statuses:
            return "flagged"
        if "budget" in statuses:
            return "budget"
        return "clean"


def analyze(contract_id: str, program: Program, abi: list[AbiFunction],
            policies: list[Scenario], options: AnalysisOptions,
            registry: Optional[dict[int, Program]] = None,
            solver: Optional[SolverBackend] = None) -> AnalysisOutcome:
    """Check every policy against the contract, one scenario at a time."""
    owns_solver = solver is None
    if solver is None:
        solver = SolverBackend(options.solver_command,
                               timeout_ms=options.timeout_ms,
                               dump_dir=options.smt_dump)
    outcome = AnalysisOutcome(contract_id)
    try:
        for policy in policies:
            try:
                compiled = compile_scenario(
                    policy, abi, program, registry=registry,
                    self_address=options.self_address,
                    pool_size=options.pool_size, seed=options.seed)
            except MissingFunction as exc:
                outcome.missing[policy.name] = exc.names
                outcome.outcomes.append(ScenarioOutcome(
                    scenario=policy.name, policy=policy.name, function="",
                    status="missing"))
                continue
            for cs in compiled:
                outcome.outcomes.append(
                    _run_scenario(contract_id, cs, options, solver))
    finally:
        if owns_solver:
            solver.close()
    return outcome


def _run_scenario(contract_id: str, cs: CompiledScenario,
                  options: AnalysisOptions,
                  solver: SolverBackend) -> ScenarioOutcome:
    machine = Machine(
        options=MachineOptions(
            gas_limit=options.gas, memcache=options.memcache,
            addr_scheme=options.addr_scheme),
        solver=solver, pool=list(cs.pool))
    init_storage = ex.fresh_array("storage", WORD)
    init_psi = PathConstraint().append(*cs.init_assumptions)
    budget = Budget(wall_s=options.wall_s, max_states=options.max_states)

    started = time.monotonic()
    result = explore(cs.steps, init_storage, machine, budget=budget,
                     init_psi=init_psi, reentrancy=options.reentrancy)
    explore_ms = (time.monotonic() - started) * 1000.0

    reports: list[ErrorReport] = []
    seen: dict[str, int] = {}
    for violation in result.violations:
        seen[violation.check_id] = seen.get(violation.check_id, 0) + 1
        if seen[violation.check_id] > options.max_reports_per_check:
            continue
        report = build_report(contract_id, cs, violation, init_storage,
                              solver, options)
        report.solver_ms = result.solver_ms
        report.explore_ms = explore_ms
        reports.append(report)

    duplicates = sum(seen.values()) - len(reports)
    if reports:
        status = "flagged"
    elif result.incomplete:
        status = "budget"
    else:
        status = "clean"
    return ScenarioOutcome(
        scenario=cs.name, policy=cs.policy,
        function=cs.function or _mutating_fn(cs), status=status,
        reports=reports, duplicate_violations=duplicates, result=result)


def _mutating_fn(cs: CompiledScenario) -> str:
    for step in cs.steps:
        if isinstance(step, CallStep) and not step.view:
            return step.fn.name
    return ""


# ---------------------------------------------------------------------------
# Model extraction
# ---------------------------------------------------------------------------

def build_report(contract_id: str, cs: CompiledScenario,
                 violation: Violation, init_storage: Expr,
                 solver: SolverBackend,
                 options: AnalysisOptions) -> ErrorReport:
    """Concrete model: declared variables, per-txn inputs, initial storage."""
    psi = violation.psi
    state = violation.state

    # terms to evaluate under one satisfying model
    terms: list[Expr] = []
    labels: list[tuple] = []
    for name, value in cs.env.items():
        if isinstance(value, Expr):
            terms.append(value)
            labels.append(("var", name))
    for ti, txn in enumerate(state.txn_journal):
        terms.append(txn.caller)
        labels.append(("txn", ti, "sender"))
        terms.append(txn.callvalue)
        labels.append(("txn", ti, "value"))
        terms.append(txn.timestamp)
        labels.append(("txn", ti, "timestamp"))
        terms.append(txn.blocknumber)
        labels.append(("txn", ti, "blocknumber"))
        for ai, view in enumerate(txn.arg_views):
            if isinstance(view, tuple):
                for ei, elem in enumerate(view):
                    terms.append(elem)
                    labels.append(("txn", ti, "arg", ai, ei))
            else:
                terms.append(view)
                labels.append(("txn", ti, "arg", ai, None))

    # initial-storage addresses read anywhere along the path
    base_name = init_storage.name
    idx_exprs: list[Expr] = []
    seen_idx: set[int] = set()
    for node in ex.iter_dag(list(psi)):
        if node.kind == "load" and ex.base_array(node.args[0]) is init_storage:
            idx = node.args[1]
            if id(idx) not in seen_idx:
                seen_idx.add(id(idx))
                idx_exprs.append(idx)
    for idx in idx_exprs:
        terms.append(idx)
        labels.append(("sidx", id(idx)))
        terms.append(ex.array_load(init_storage, idx))
        labels.append(("sval", id(idx)))

    values = solver.eval_under_model(psi, terms)
    by_label = dict(zip(labels, values))

    variables = {name: hex(by_label[("var", name)])
                 for name in cs.env if ("var", name) in by_label}
    storage_model: dict[str, str] = {}
    for idx in idx_exprs:
        addr = by_label[("sidx", id(idx))]
        val = by_label[("sval", id(idx))]
        if val:
            storage_model[hex(addr)] = hex(val)

    txns: list[TxnModel] = []
    for ti, txn in enumerate(state.txn_journal):
        args = []
        for ai, view in enumerate(txn.arg_views):
            if isinstance(view, tuple):
                args.append([hex(by_label[("txn", ti, "arg", ai, ei)])
                             for ei in range(len(view))])
            else:
                args.append(hex(by_label[("txn", ti, "arg", ai, None)]))
        txns.append(TxnModel(
            fn=txn.label, sender=hex(by_label[("txn", ti, "sender")]),
            value=hex(by_label[("txn", ti, "value")]), args=args,
            timestamp=hex(by_label[("txn", ti, "timestamp")]),
            blocknumber=hex(by_label[("txn", ti, "blocknumber")]),
            view=txn.is_view, kind=txn.kind))

    report = ErrorReport(
        contract=contract_id, policy=cs.policy, scenario=cs.name,
        function=cs.function or _mutating_fn(cs),
        check_id=violation.check_id, message=violation.message,
        classification=violation.classification,
        variables=variables,
        pool=[hex(a) for a in cs.pool],
        initial_storage=storage_model,
        txns=txns,
        trace=[[t[0], t[2], t[3]] for t in violation.trace],
        lengths=list(cs.lengths), seed=options.seed,
        pool_size=options.pool_size)
    if options.verify_reports:
        report.replay_ok = replay_report(report, cs)
    return report


# ---------------------------------------------------------------------------
# Replay: run the model through the concrete interpreter
# ---------------------------------------------------------------------------

def replay_report(report: ErrorReport, cs: CompiledScenario) -> bool:
    """True iff the model drives execution to the violated check with the
    check expression evaluating false (and every earlier step agreeing)."""
    try:
        return _replay(report, cs)
    except (ReplayError, KeyError, ValueError, IndexError):
        return False


def _replay(report: ErrorReport, cs: CompiledScenario) -> bool:
    pool = [int(a, 16) for a in report.pool]
    storage = {int(k, 16): int(v, 16) for k, v in report.initial_storage.items()}
    env_vals: dict[str, int] = {}
    for name, value in report.variables.items():
        env_vals[name] = int(value, 16)

    # declared-name bindings resolve through the scenario env
    bindings: dict[str, int] = {}
    for name, var in cs.env.items():
        if isinstance(var, Expr) and name in env_vals:
            bindings[name] = env_vals[name]

    ti = 0
    for step in cs.steps:
        if ti >= len(report.txns):
            return False
        model = report.txns[ti]
        ti += 1
        if isinstance(step, CallStep):
            args = []
            for a in model.args:
                args.append([int(v, 16) for v in a] if isinstance(a, list)
                            else int(a, 16))
            calldata = encode_calldata_concrete(step.fn, args)
            env = ConcreteEnv(
                caller=int(model.sender, 16),
                callvalue=int(model.value, 16),
                timestamp=int(model.timestamp, 16),
                blocknumber=int(model.blocknumber, 16),
                self_address=cs.self_address,
                registry=cs.registry, pool=tuple(pool),
                addressing="scheme")
            run = execute_concrete(cs.program, calldata, storage, env)
            if run.status == "gas":
                return False
            if not step.view and run.ok:
                storage = run.storage
            if step.bind:
                ret = 0
                if run.ok and step.fn.outputs and len(run.return_data) >= 32:
                    ret = int.from_bytes(run.return_data[:32], "big")
                bindings[step.bind] = ret
                bindings[step.bind + "#status"] = 1 if run.ok else 0
        elif isinstance(step, ConstraintStep):
            ok = _eval_concrete(step, bindings, pool)
            if step.kind == "assume":
                if not ok:
                    return False    # the model breaks its own assumptions
            else:
                if step.check_id == report.check_id:
                    return not ok   # the violated check must evaluate false
                if not ok:
                    return False    # an earlier check fails unexpectedly
    return False                     # never reached the violated check


def _eval_concrete(step: ConstraintStep, bindings: dict[str, int],
                   pool: list[int]) -> bool:
    from .scenario import _Guards  # local: marker type
    env = {name: ex.mk_const(v, WORD) for name, v in bindings.items()}
    guards_only = isinstance(step.ast, _Guards)
    ast = step.ast.inner if guards_only else step.ast
    value, guards = eval_policy_expr(ast, env, pool, phase=step.phase)
    if not value.is_const() or not all(g.is_const() for g in guards):
        raise ReplayError("constraint did not fold to a constant")
    if guards_only:
        return all(g.value == 1 for g in guards)
    if step.kind == "assume":
        return value.value != 0 and all(g.value == 1 for g in guards)
    return value.value != 0


# ---------------------------------------------------------------------------
# Replay from a serialized report (no analysis context)
# ---------------------------------------------------------------------------

def replay_from_file(report: ErrorReport, program: Program,
                     abi: list[AbiFunction], policy: Scenario,
                     registry: Optional[dict[int, Program]] = None,
                     self_address: int = 0xC0DE) -> bool:
    """Reconstruct the scenario variant named in the report and replay."""
    compiled = compile_scenario(policy, abi, program, registry=registry,
                                self_address=self_address,
                                pool_size=report.pool_size, seed=report.seed)
    for cs in compiled:
        if cs.name == report.scenario:
            return replay_report(report, cs)
    raise ReplayError(f"scenario {report.scenario!r} not found in policy")

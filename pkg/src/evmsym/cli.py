"""Command-line front end.

Subcommands: analyze (policies vs one contract), replay (re-run a report
model concretely), corpus (manifest of contracts with expected verdicts),
asm / disasm (fixture tooling), exec (concrete interpreter).

Exit codes for analyze: 0 no violations, 1 violations found, 2 usage or
infrastructure error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

from . import bytecode
from .abi import load_abi
from .concrete import ConcreteEnv, execute_concrete
from .report import ErrorReport, render_pretty, validate_line
from .runner import AnalysisOptions, analyze, replay_from_file
from .scenario import DEFAULT_SEED, Scenario, load_scenario, parse_scenario
from .smt import SolverCrashed, default_solver_command

SHIPPED_POLICIES = ("erc20_total_supply", "erc20_transfer", "erc20_approval",
                    "erc721_approval")


def _load_policy(name_or_path: str) -> Scenario:
    if os.path.exists(name_or_path):
        return load_scenario(name_or_path)
    if name_or_path in SHIPPED_POLICIES:
        text = resources.files("evmsym.policies").joinpath(
            name_or_path + ".pol").read_text()
        return parse_scenario(text)
    raise FileNotFoundError(f"policy {name_or_path!r}: not a file and not one "
                            f"of the shipped policies {SHIPPED_POLICIES}")


def _options(args) -> AnalysisOptions:
    solver = None
    if args.solver:
        solver = args.solver.split()
    return AnalysisOptions(
        solver_command=solver,
        timeout_ms=args.timeout_ms,
        gas=args.gas,
        pool_size=args.pool,
        seed=args.seed,
        max_states=args.max_states,
        wall_s=args.wall_s,
        smt_dump=args.smt_dump,
        reentrancy=args.reentrancy == "on",
        memcache=not args.no_memcache,
        addr_scheme=not args.no_addr_opt)


def _load_registry(specs: list[str]) -> dict[int, "bytecode.Program"]:
    registry = {}
    for spec in specs or []:
        addr_s, _, path = spec.partition("=")
        registry[int(addr_s, 16)] = bytecode.load_bytecode(path)
    return registry


def _emit(args, record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def cmd_analyze(args) -> int:
    try:
        program = bytecode.load_bytecode(args.bytecode)
        abi = load_abi(args.abi)
        policies = [_load_policy(p) for p in args.policy]
        registry = _load_registry(args.registry)
    except (OSError, ValueError, bytecode.UnknownOpcode) as exc:
        print(json.dumps({"type": "error", "contract": args.bytecode,
                          "reason": f"load: {exc}"}), file=sys.stderr)
        return 2

    options = _options(args)
    contract = os.path.basename(args.bytecode)
    try:
        outcome = analyze(contract, program, abi, policies, options,
                          registry=registry)
    except SolverCrashed as exc:
        print(json.dumps({"type": "error", "contract": contract,
                          "reason": f"solver: {exc}"}), file=sys.stderr)
        return 2

    n_violations = 0
    for sc in outcome.outcomes:
        for report in sc.reports:
            n_violations += 1
            if args.format == "pretty":
                print(render_pretty(report))
                print()
            else:
                print(report.to_json(), flush=True)
        if sc.result is not None and sc.result.incomplete:
            _emit(args, {"type": "error", "contract": contract,
                         "reason": f"budget: {sc.result.incomplete}",
                         "scenario": sc.scenario})
    summary = {
        "type": "summary", "contract": contract, "violations": n_violations,
        "scenarios": len(outcome.outcomes),
        "missing": {k: v for k, v in outcome.missing.items()},
        "policies": {p.name: outcome.policy_status(p.name) for p in policies},
    }
    if args.format == "pretty":
        print(f"summary: {summary['policies']} "
              f"({n_violations} violation(s))")
    else:
        _emit(args, summary)
    return 1 if n_violations else 0


def cmd_replay(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    reports = [ErrorReport.from_json(l) for l in lines
               if json.loads(l).get("type") == "violation"]
    if not reports:
        print("no violation records in report file", file=sys.stderr)
        return 2
    program = bytecode.load_bytecode(args.bytecode)
    abi = load_abi(args.abi)
    policy = _load_policy(args.policy)
    registry = _load_registry(args.registry)
    all_ok = True
    for report in reports:
        ok = replay_from_file(report, program, abi, policy,
                              registry=registry)
        print(f"{'PASS' if ok else 'FAIL'} {report.scenario} "
              f"{report.check_id}: {report.message}")
        all_ok &= ok
    return 0 if all_ok else 1


def _corpus_entry(entry: dict, base: str, args) -> dict:
    """Run one manifest entry in-process (used by worker processes)."""
    path = lambda p: os.path.join(base, p)
    program = bytecode.load_bytecode(path(entry["bytecode"]))
    abi = load_abi(path(entry["abi"]))
    options = _options(args)
    results = {}
    times = {}
    for policy_name in entry["policies"]:
        policy = _load_policy(
            policy_name if policy_name in SHIPPED_POLICIES
            else path(policy_name))
        registry = _load_registry(
            [f"{a}={path(p)}" for a, p in entry.get("registry", {}).items()])
        outcome = analyze(entry["id"], program, abi, [policy], options,
                          registry=registry)
        status = outcome.policy_status(policy.name)
        results[policy.name] = status
        ms = sum(sc.result.wall_ms for sc in outcome.outcomes
                 if sc.result is not None)
        first_error = [sc.result.wall_ms for sc in outcome.outcomes
                       if sc.reports and sc.result is not None]
        times[policy.name] = {
            "total_ms": ms,
            "first_error_ms": min(first_error) if first_error else None,
        }
    return {"id": entry["id"], "results": results, "times": times,
            "expect": entry.get("expect", {})}


def cmd_corpus(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(args.manifest))
    entries = manifest["entries"]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_corpus_entry, entries,
                                 [base] * len(entries),
                                 [args] * len(entries)))
    else:
        rows = [_corpus_entry(e, base, args) for e in entries]

    diffs = []
    counts = {"flagged": 0, "clean": 0, "missing": 0, "budget": 0}
    first_error_times = []
    header = f"{'entry':24} {'policy':22} {'verdict':8} {'expected':8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        for policy_name, verdict in row["results"].items():
            expected = row["expect"].get(policy_name, "")
            mark = ""
            if expected and expected != verdict:
                mark = "  <-- MISMATCH"
                diffs.append((row["id"], policy_name, verdict, expected))
            counts[verdict] = counts.get(verdict, 0) + 1
            t = row["times"][policy_name]["first_error_ms"]
            if t is not None:
                first_error_times.append(t)
            print(f"{row['id']:24} {policy_name:22} {verdict:8} "
                  f"{expected:8}{mark}")
    print("-" * len(header))
    avg = (sum(first_error_times) / len(first_error_times) / 1000.0
           if first_error_times else 0.0)
    print(f"totals: {counts}; avg time-to-first-error {avg:.2f}s")
    for contract, policy_name, verdict, expected in diffs:
        print(f"DIFF {contract} {policy_name}: got {verdict}, "
              f"expected {expected}", file=sys.stderr)
    return 1 if diffs else 0


def cmd_asm(args) -> int:
    with open(args.input, "r", encoding="utf-8") as fh:
        code = bytecode.assemble(fh.read())
    print(code.hex())
    return 0


def cmd_disasm(args) -> int:
    program = bytecode.load_bytecode(args.input)
    print(bytecode.disassemble(program))
    return 0


def cmd_exec(args) -> int:
    program = bytecode.load_bytecode(args.bytecode)
    calldata = bytes.fromhex(args.calldata.removeprefix("0x")) \
        if args.calldata else b""
    storage = {}
    if args.storage:
        with open(args.storage, "r", encoding="utf-8") as fh:
            storage = {int(k, 16): int(v, 16)
                       for k, v in json.load(fh).items()}
    env = ConcreteEnv(caller=int(args.sender, 16), gas_limit=args.gas)
    result = execute_concrete(program, calldata, storage, env)
    print(json.dumps({
        "status": result.status,
        "stack": [hex(v) for v in result.stack],
        "storage": {hex(k): hex(v) for k, v in result.storage.items()},
        "return_data": result.return_data.hex(),
        "gas_used": result.gas_used}, indent=2, sort_keys=True))
    return 0


def cmd_checkreports(args) -> int:
    """Validate every line of a report stream against the schema."""
    bad = 0
    with open(args.report, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                validate_line(line)
            except ValueError as exc:
                print(f"line {i}: {exc}", file=sys.stderr)
                bad += 1
    return 1 if bad else 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver", default=os.environ.get("EVMSYM_SOLVER", ""),
                   help="solver command (default: autodetect; "
                        "EVMSYM_SOLVER env var as fallback)")
    p.add_argument("--timeout-ms", type=int, default=10_000)
    p.add_argument("--gas", type=int, default=65_536)
    p.add_argument("--pool", type=int, default=3)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-states", type=int, default=200_000)
    p.add_argument("--wall-s", type=float, default=1200.0)
    p.add_argument("--smt-dump", default=None)
    p.add_argument("--reentrancy", choices=("on", "off"), default="off")
    p.add_argument("--no-memcache", action="store_true",
                   help="debug: disable the volatile-memory word cache")
    p.add_argument("--no-addr-opt", action="store_true",
                   help="debug: concretize hash-based storage addresses "
                        "instead of the compact address scheme")
    p.add_argument("--format", choices=("json", "pretty"), default="json")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="evmsym",
        description="Symbolic policy checker for EVM bytecode")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="check policies against a contract")
    p.add_argument("bytecode")
    p.add_argument("abi")
    p.add_argument("policy", nargs="+")
    p.add_argument("--registry", action="append", default=[],
                   metavar="ADDR=FILE", help="register a callee contract")
    _add_common(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("replay", help="re-run a report's model concretely")
    p.add_argument("report")
    p.add_argument("bytecode")
    p.add_argument("abi")
    p.add_argument("policy")
    p.add_argument("--registry", action="append", default=[])
    _add_common(p)
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("corpus", help="run a manifest of contracts")
    p.add_argument("manifest")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    _add_common(p)
    p.set_defaults(fn=cmd_corpus)

    p = sub.add_parser("asm", help="assemble mnemonics to hex")
    p.add_argument("input")
    p.set_defaults(fn=cmd_asm)

    p = sub.add_parser("disasm", help="disassemble hex or .asm")
    p.add_argument("input")
    p.set_defaults(fn=cmd_disasm)

    p = sub.add_parser("exec", help="run the concrete interpreter")
    p.add_argument("bytecode")
    p.add_argument("--calldata", default="")
    p.add_argument("--sender", default="0xa11ce")
    p.add_argument("--storage", default=None, help="JSON file {hex: hex}")
    p.add_argument("--gas", type=int, default=65_536)
    p.set_defaults(fn=cmd_exec)

    p = sub.add_parser("check-reports", help="schema-validate a report stream")
    p.add_argument("report")
    p.set_defaults(fn=cmd_checkreports)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

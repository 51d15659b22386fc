"""evmsym: symbolic execution and standard-conformance checking for EVM
bytecode.

The package splits into: bytecode (decode/assemble), expr (symbolic
terms), smt (solver process), machine (symbolic transition function),
concrete (reference interpreter), explorer (path exploration), abi and
scenario (the policy harness), runner (analysis orchestration), report
and cli (front end).
"""

from .bytecode import Program, assemble, decode, disassemble
from .explorer import Budget, ExploreResult, Violation, explore
from .expr import PathConstraint, fresh_var, mk_const, mk_op
from .machine import ExecState, Machine, MachineOptions, Transaction
from .runner import AnalysisOptions, analyze
from .scenario import Scenario, compile_scenario, parse_scenario
from .smt import SolverBackend

__all__ = [
    "Program", "assemble", "decode", "disassemble",
    "Budget", "ExploreResult", "Violation", "explore",
    "PathConstraint", "fresh_var", "mk_const", "mk_op",
    "ExecState", "Machine", "MachineOptions", "Transaction",
    "AnalysisOptions", "analyze",
    "Scenario", "compile_scenario", "parse_scenario",
    "SolverBackend",
]

__version__ = "0.1.0"

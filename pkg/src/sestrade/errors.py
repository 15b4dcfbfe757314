"""Exception hierarchy. Each class carries the CLI error category and exit code."""

from __future__ import annotations


class SesTradeError(Exception):
    category = "error"
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"category": self.category, "message": str(self), "details": self.details}


class ScenarioError(SesTradeError, ValueError):
    category = "scenario-invalid"
    exit_code = 1


class InfeasibleAllocationError(SesTradeError):
    """Raised when the proportional allocation rule cannot honour the user bounds."""

    category = "allocation-infeasible"
    exit_code = 2


class LeaderInfeasibleError(SesTradeError):
    category = "leader-infeasible"
    exit_code = 2


class SolverError(SesTradeError):
    category = "solver-failed"
    exit_code = 3


class MechanismError(SesTradeError):
    category = "mechanism-infeasible"
    exit_code = 2


class LoadValidationError(SesTradeError):
    category = "load-invalid"
    exit_code = 2


class RepairError(SesTradeError):
    category = "complementarity-repair"
    exit_code = 2


class NonConvergenceError(SesTradeError):
    category = "non-convergence"
    exit_code = 3


class CertificateError(SesTradeError):
    category = "certificate-failed"
    exit_code = 4

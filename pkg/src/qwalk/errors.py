"""Exception hierarchy shared by the library and the CLI.

Every error carries a machine-readable ``kind`` so the command line can
emit ``{"kind": ..., "detail": ..., "at": ...}`` without string matching.
"""

from __future__ import annotations


class QwalkError(Exception):
    kind = "error"

    def __init__(self, detail: str, at: str | None = None):
        super().__init__(detail if at is None else f"{detail} (at {at})")
        self.detail = detail
        self.at = at

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "detail": self.detail}
        if self.at is not None:
            out["at"] = self.at
        return out


class InvalidScaleError(QwalkError, ValueError):
    kind = "invalid-scale"


class InvalidPolicyError(QwalkError, ValueError):
    kind = "invalid-policy"


class InvalidValueError(QwalkError, ValueError):
    kind = "invalid-value"


class ExprSyntaxError(QwalkError, ValueError):
    kind = "syntax-error"

    def __init__(self, detail: str, offset: int):
        super().__init__(detail, at=f"offset {offset}")
        self.offset = offset


class UnknownFunctionError(ExprSyntaxError):
    kind = "unknown-function"


class EvalError(QwalkError, ArithmeticError):
    kind = "eval-error"


class DivisionByZero(EvalError):
    kind = "division-by-zero"


class NegativeSqrt(EvalError):
    kind = "sqrt-of-negative"


class UnboundParameter(EvalError):
    kind = "unbound-parameter"


class NonFiniteResult(EvalError):
    kind = "non-finite"


class SpecError(QwalkError, ValueError):
    kind = "spec-invalid"


class SpecNotFound(SpecError):
    kind = "spec-not-found"


class SimulationError(QwalkError, RuntimeError):
    kind = "simulation-error"

    def __init__(self, detail: str, path_id: int, step: int, t: float, x: float):
        super().__init__(detail, at=f"path_id={path_id} step={step} t={t!r} x={x!r}")
        self.path_id = path_id
        self.step = step
        self.t = t
        self.x = x


class ConfigError(QwalkError, ValueError):
    kind = "config-error"


class InsufficientDataError(QwalkError, ValueError):
    kind = "insufficient-data"

"""Exception types raised across the package."""


class PosDynError(Exception):
    """Base class for every error raised by posdyn."""


class InvalidParameterError(PosDynError, ValueError):
    pass


class InvalidDistributionError(InvalidParameterError):
    pass


class EmptyInputError(PosDynError, ValueError):
    pass


class InvalidRangeError(PosDynError, ValueError):
    pass


class ShapeError(PosDynError, ValueError):
    pass


class RewardOverflowError(PosDynError, OverflowError):
    def __init__(self, step: int, value: float):
        super().__init__(f"reward is not finite at step {step} (got {value!r})")
        self.step = step
        self.value = value


class FeasibilityError(PosDynError, ValueError):
    def __init__(self, constraint: str, step: int, detail: str = ""):
        msg = f"constraint {constraint} violated at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.constraint = constraint
        self.step = step


class PreconditionError(PosDynError, ValueError):
    pass


class NoCrossingError(PosDynError, ValueError):
    pass


class NumericalError(PosDynError, ArithmeticError):
    pass


class GridError(NumericalError):
    def __init__(self, message: str, required_dt: float):
        super().__init__(f"{message}; required dt <= {required_dt:.6g}")
        self.required_dt = required_dt


class BoundaryEscapeError(NumericalError):
    def __init__(self, escaped: float):
        super().__init__(f"density pushed against the boundary: blocked outflow {escaped:.3e} "
                         "(cumulative)")
        self.escaped = escaped


class SupplyExhaustedError(NumericalError):
    def __init__(self, t: float, z: float, n: float):
        super().__init__(
            f"investor holdings left (0, N(t)) at t={t:.6g}: Z={z:.6g}, N={n:.6g}"
        )
        self.t = t
        self.z = z


class ConfigError(PosDynError, ValueError):
    """Carries every violation found, not just the first."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)

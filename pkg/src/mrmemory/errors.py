"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class OutOfDomainError(DomainError):
    """A position lies outside the spatial domain of a flow field."""

    def __init__(self, coordinate, domain):
        self.coordinate = coordinate
        self.domain = domain
        super().__init__(f"position {coordinate!r} outside domain {domain!r}")


class CapabilityError(RuntimeError):
    """A required derivative block or bound constant is not available."""


class OracleFailure(RuntimeError):
    """A numerical oracle did not converge."""


class StepFailure(RuntimeError):
    """The fixed-point closure at a time node did not converge."""

    def __init__(self, node, residual):
        self.node = node
        self.residual = residual
        super().__init__(f"fixed-point iteration failed at node {node} (residual {residual:.3e})")


class BlowUpError(RuntimeError):
    """The state became non-finite."""

    def __init__(self, node):
        self.node = node
        super().__init__(f"non-finite state at node {node}")

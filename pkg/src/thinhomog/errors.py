"""Exception hierarchy shared by all thinhomog modules."""


class ThinHomogError(Exception):
    pass


# -- expressions --------------------------------------------------------------

class ExprError(ThinHomogError):
    pass


class ExpressionSyntaxError(ExprError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.message = message
        self.position = position


class UnknownIdentifier(ExprError):
    def __init__(self, name, position=None):
        where = "" if position is None else f" at position {position}"
        super().__init__(f"unknown identifier {name!r}{where}")
        self.name = name
        self.position = position


class UnboundVariable(ExprError):
    def __init__(self, name):
        super().__init__(f"variable {name!r} is not bound")
        self.name = name


class DomainError(ExprError, ArithmeticError):
    pass


class NonDifferentiable(ExprError):
    pass


# -- geometry -----------------------------------------------------------------

class GeometryError(ThinHomogError):
    pass


class EmptySection(GeometryError):
    pass


class MultiComponent(GeometryError):
    pass


class UnboundedSection(GeometryError):
    """The positivity set reaches the edge of the search bracket."""


class DegenerateSection(GeometryError):
    pass


class DegenerateMap(GeometryError):
    pass


# -- fem / solvers ------------------------------------------------------------

class SolverError(ThinHomogError):
    pass


class NoConvergence(SolverError):
    def __init__(self, iterations, residual, message=None):
        msg = message or (f"CG did not converge in {iterations} iterations "
                          f"(relative residual {residual:.3e})")
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class NonSPD(SolverError):
    pass


class ConflictingConstraints(ThinHomogError):
    pass


class CrossCheckFailure(SolverError):
    pass


class OutOfDomain(ThinHomogError, ValueError):
    pass


class ResolutionError(SolverError):
    pass


class ConfigError(ThinHomogError):
    pass


class ValidationFailure(ThinHomogError):
    pass

"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a scalar kernel."""


class InputError(ValueError):
    """Invalid problem data (potential, initial density, configuration)."""


class MeshError(ValueError):
    """A mesh could not be constructed or is not admissible.

    ``diagnostics`` holds the failed check names mapped to a message
    describing the first offending entity.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NumericalError(ArithmeticError):
    """An iterative solve failed to converge.

    Parameters
    ----------
    message : str
        Human readable description.
    residual : float, optional
        Last residual norm reached.
    history : sequence of float, optional
        Residual norms per iteration.
    step : int, optional
        Time-step index, filled in by the trajectory driver.
    """

    def __init__(self, message, residual=None, history=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history or [])
        self.step = step

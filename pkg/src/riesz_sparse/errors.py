"""Exception types shared across the package."""


class RejectedInstanceError(ValueError):
    """An ensemble failed one of the hypotheses an experiment relies on."""

    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = f"rejected instance: {invariant}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class RejectedSelectorError(ValueError):
    """A sparsity selector asked for data not available at its stopping time."""


class UnsupportedInstanceError(TypeError):
    pass


class CensoringError(RuntimeError):
    """Too many background paths were still alive at the time horizon."""

    def __init__(self, fraction, bound):
        self.fraction = fraction
        self.bound = bound
        super().__init__(
            f"censored fraction {fraction:.3g} exceeds bound {bound:.3g}")

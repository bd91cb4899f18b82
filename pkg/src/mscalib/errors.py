"""Exception hierarchy shared by all modules."""


class MscalibError(Exception):
    """Base class for every error raised by the package."""


class MalformedHistory(MscalibError):
    def __init__(self, subject_id, reason=""):
        self.subject_id = subject_id
        super().__init__(f"malformed history for subject {subject_id!r}: {reason}")


class IllegalTransition(MscalibError):
    def __init__(self, subject_id, from_state, to_state):
        self.subject_id = subject_id
        self.from_state = from_state
        self.to_state = to_state
        super().__init__(
            f"subject {subject_id!r}: transition {from_state}->{to_state} not in structure"
        )


class CovariateConflict(MscalibError):
    def __init__(self, subject_id):
        self.subject_id = subject_id
        super().__init__(f"subject {subject_id!r}: covariates differ between rows")


class InvalidStructure(MscalibError):
    pass


class EmptyCohort(MscalibError):
    pass


class NoRiskSet(MscalibError):
    pass


class DimensionMismatch(MscalibError):
    pass


class FitSingular(MscalibError):
    pass


class FitDiverged(MscalibError):
    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class DivergedToInfinity(FitDiverged):
    """Maximum likelihood estimate does not exist (separation)."""

    def __init__(self, message, direction=None, trace=None):
        self.direction = direction
        super().__init__(message, trace)


class TooFewDistinct(MscalibError):
    pass


class GroupTooSmall(MscalibError):
    pass


class BootstrapUnstable(MscalibError):
    pass


class ToleranceNotMet(MscalibError):
    pass


class EmptyBand(MscalibError):
    pass

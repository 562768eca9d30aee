"""Exception hierarchy shared by all merinda modules."""


class MerindaError(Exception):
    """Base class for every error raised by this package."""


class IntegrationDiverged(MerindaError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class UnknownSystem(MerindaError, KeyError):
    def __init__(self, name: str, valid):
        self.name = name
        self.valid = tuple(valid)
        super().__init__(f"unknown system {name!r}; valid names: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]


class LibraryTooLarge(MerindaError):
    pass


class TrajectoryTooShort(MerindaError, ValueError):
    pass


class RankDeficient(MerindaError):
    pass


class GradientOverflow(MerindaError):
    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")


class TrainingFailed(MerindaError):
    pass


class UndefinedCorrelation(MerindaError):
    pass


class CostOverflow(MerindaError, OverflowError):
    pass

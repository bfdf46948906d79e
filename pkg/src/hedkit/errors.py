"""Exception hierarchy shared across hedkit."""


class HedError(Exception):
    """Base class for every error raised by hedkit."""


class DesignError(HedError):
    pass


class SimulationError(HedError):
    pass


class DataIntegrityError(HedError):
    pass


class UnsupportedScopeError(HedError):
    pass


class ModelSpecError(HedError):
    pass


class EstimationError(HedError):
    pass


class RankDeficientError(EstimationError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("design matrix is rank deficient; offending columns: " + ", ".join(self.columns))


class ConvergenceError(EstimationError):
    pass


class SeparationError(EstimationError):
    pass


class EstimandError(HedError):
    pass


class PowerAbortError(HedError):
    pass


class ConfigError(HedError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))

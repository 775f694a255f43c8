"""Exception hierarchy. Each class carries a machine-readable ``category``."""


class LppvError(Exception):
    category = "error"


class IntegrationError(LppvError):
    category = "stiffness"


class NotALimitCycleError(LppvError):
    category = "not-a-limit-cycle"


class ConvergenceError(LppvError):
    category = "convergence"


class SingularLatitudeError(LppvError, ValueError):
    category = "singular-latitude"


class DegenerateFlowError(LppvError):
    category = "degenerate-flow"


class DegenerateCenterError(LppvError):
    category = "degenerate-center"


class NonTransversalSurfaceError(LppvError):
    category = "non-transversal-surface"


class OutOfNeighborhoodError(LppvError):
    category = "out-of-neighborhood"


class WellPosednessError(LppvError):
    category = "well-posedness"


class DatasetDegenerateError(LppvError):
    category = "dataset-degenerate"


class DimensionMismatchError(LppvError, ValueError):
    category = "dimension-mismatch"


class NumericalError(LppvError):
    category = "numerical"


class OracleUnreliableError(LppvError):
    category = "oracle-unreliable"


class NoClosedOrbitError(LppvError):
    category = "no-closed-orbit"


class RiccatiDivergenceError(LppvError):
    category = "riccati-divergence"


class ConfigError(LppvError, ValueError):
    category = "config"


class MissingArtifactError(LppvError):
    category = "missing-artifact"

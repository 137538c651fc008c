"""Exception hierarchy.

Every error raised on purpose by the package derives from
``ShrinkerLabError`` so the CLI can map them to a non-zero exit code.
"""


class ShrinkerLabError(Exception):
    pass


# geometry
class DegenerateGeometry(ShrinkerLabError):
    pass


class AxisCollision(ShrinkerLabError):
    pass


class UnsupportedForImmersed(ShrinkerLabError):
    pass


# shrinkers
class NoSolutionInWindow(ShrinkerLabError):
    pass


class ShootingBracketFailure(ShrinkerLabError):
    pass


# spectral
class NotAShrinker(ShrinkerLabError):
    pass


class EigenSolveFailure(ShrinkerLabError):
    pass


class PerturbationTooLarge(ShrinkerLabError):
    pass


# flow
class NumericalBlowup(ShrinkerLabError):
    pass


class InsufficientHistory(ShrinkerLabError):
    pass


# diagnostics
class MixedSign(ShrinkerLabError):
    pass


class NotDisjoint(ShrinkerLabError):
    pass


class ProbeContaminated(ShrinkerLabError):
    pass


# harness
class AbortNotGeneric(ShrinkerLabError):
    pass


class EmptyInput(ShrinkerLabError):
    pass


class RegressionFailure(ShrinkerLabError):
    pass


class ConfigError(ShrinkerLabError):
    pass

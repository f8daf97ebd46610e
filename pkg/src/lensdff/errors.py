"""Exception types shared across the package.

Every error carries a stable CLI exit code so the command layer can map
exceptions to process status without a lookup table.
"""


class LensDFFError(Exception):
    exit_code = 1


class DegenerateInput(LensDFFError):
    pass


class TooFewPoints(LensDFFError):
    pass


class DegenerateCloud(LensDFFError):
    pass


class DegenerateAxes(LensDFFError):
    pass


class ZeroLanguageFeature(LensDFFError):
    pass


class DimensionMismatch(LensDFFError):
    pass


class EmptyInput(LensDFFError):
    pass


class EmptyCloud(LensDFFError):
    pass


class MalformedFile(LensDFFError):
    pass


class CacheMismatch(MalformedFile):
    pass


class NoDemoForPrimitive(LensDFFError):
    exit_code = 3


class NonFiniteEnergy(LensDFFError):
    exit_code = 4


class AllSeedsFailed(LensDFFError):
    exit_code = 4


class ConfigError(LensDFFError):
    exit_code = 2

"""Exception hierarchy.

Every error carries a stable ``exit_code`` so the command-line front end can
map failures to process status without string matching.
"""


class GoldenDieError(Exception):
    exit_code = 1


class ConfigError(GoldenDieError, ValueError):
    """Bad configuration value, unknown key, or invalid argument."""

    exit_code = 2


class DataError(GoldenDieError):
    """Missing, undecodable, or inconsistent dataset files."""

    exit_code = 3


class DimensionError(DataError, ValueError):
    """Arrays that must share a shape do not."""

    exit_code = 4


class RegionError(GoldenDieError, ValueError):
    """A patch region that does not fit inside its raster."""

    exit_code = 5


class TrainingError(GoldenDieError, RuntimeError):
    exit_code = 6


class EvaluationError(GoldenDieError, ValueError):
    """A metric that is undefined for its input (e.g. AP without positives)."""

    exit_code = 7

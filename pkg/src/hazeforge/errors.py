"""Exception types. Each carries a short machine-parsable code used by the CLI."""


class HazeError(Exception):
    code = "E_GENERIC"


class DimensionError(HazeError, ValueError):
    code = "E_DIMENSION"


class DegenerateInputError(HazeError, ValueError):
    code = "E_DEGENERATE"


class NonFiniteError(HazeError, FloatingPointError):
    code = "E_NONFINITE"


class BackwardError(HazeError, RuntimeError):
    code = "E_BACKWARD"


class FormatError(HazeError, ValueError):
    code = "E_FORMAT"


class MissingFileError(HazeError, FileNotFoundError):
    code = "E_MISSING_FILE"


class ConfigError(HazeError, ValueError):
    code = "E_CONFIG"

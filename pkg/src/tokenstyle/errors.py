"""Error categories shared by the library and the command line.

Each CLI-facing category carries an exit code; lower-level errors subclass
the category they surface as.
"""


class ToolError(Exception):
    exit_code = 1
    category = "error"


class UsageError(ToolError):
    exit_code = 2
    category = "usage"


class ConfigError(ToolError, ValueError):
    exit_code = 3
    category = "config"


class DependencyError(ToolError):
    exit_code = 4
    category = "dependency"


class NumericError(ToolError, ArithmeticError):
    exit_code = 5
    category = "numeric"


class ArtifactIOError(ToolError, OSError):
    exit_code = 6
    category = "io"


class DimensionError(ConfigError):
    """Shape mismatch; the message names the offending operation."""


class VocabularyError(ConfigError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__("words outside vocabulary: " + ", ".join(self.words))


class TrainingError(NumericError):
    pass


class PreconditionError(DependencyError):
    pass

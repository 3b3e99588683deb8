"""Exception types raised across the package."""


class DeskDiffError(Exception):
    """Base class; ``kind`` is the short tag the CLI prints."""

    kind = "error"


class ShapeError(DeskDiffError, ValueError):
    kind = "shape"


class ContractError(DeskDiffError, ValueError):
    kind = "contract"


class ParameterError(DeskDiffError, ValueError):
    kind = "parameter"


class DomainError(DeskDiffError, ValueError):
    kind = "domain"


class NonFiniteError(DeskDiffError, FloatingPointError):
    kind = "nonfinite"


class ConfigError(DeskDiffError, ValueError):
    kind = "config"


class VocabularyError(DeskDiffError, KeyError):
    kind = "vocabulary"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(DeskDiffError, ValueError):
    kind = "format"


class SamplingError(DeskDiffError, RuntimeError):
    kind = "sampling"

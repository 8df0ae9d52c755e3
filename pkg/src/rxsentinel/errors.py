"""Exception types shared across the package."""


class RxError(Exception):
    """Base class for all rxsentinel errors."""


class ParseError(RxError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ReferentialError(RxError):
    """An order references a hospitalization that was never declared."""


class ConfigError(RxError):
    pass


class EmptyCorpusError(RxError):
    pass


class DimensionError(RxError):
    pass


class NumericError(RxError):
    pass


class ModeCollapseError(RxError):
    pass


class DegenerateDistributionError(RxError):
    pass


class ClassificationError(RxError):
    """Score cannot be classified (e.g. department missing from the threshold set)."""


class VocabularyMismatchError(RxError):
    pass


class ArtifactVersionError(RxError):
    pass

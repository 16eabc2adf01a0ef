"""Exception hierarchy; the CLI maps each class to an exit code."""


class TsmQualError(Exception):
    exit_code = 2


class AudioError(TsmQualError):
    """Unreadable, unsupported or degenerate audio."""


class DataError(TsmQualError):
    """Malformed manifests, tables or model files."""


class SchemaError(DataError):
    """Feature schema of a table or model does not match."""


class FeatureError(TsmQualError):
    """A single feature could not be computed for a pair."""

    def __init__(self, feature, message):
        super().__init__(f"{feature}: {message}")
        self.feature = feature


class NumericError(TsmQualError):
    exit_code = 3

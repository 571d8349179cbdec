class ExpandNetError(Exception):
    """Base error. `detail` is the message shown to the user, `exit_code` the CLI status"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(ExpandNetError):
    exit_code = 2


class ShapeError(ExpandNetError, ValueError):
    exit_code = 2


class DataFormatError(ExpandNetError, ValueError):
    exit_code = 2


class MetricUnavailableError(ExpandNetError):
    exit_code = 2


class PruneError(ExpandNetError):
    exit_code = 2


class NumericError(ExpandNetError):
    exit_code = 3

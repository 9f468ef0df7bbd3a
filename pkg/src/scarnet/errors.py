"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class ScarNetError(Exception):
    exit_code = 1


class ConfigError(ScarNetError, ValueError):
    exit_code = 2


class GeometryError(ConfigError):
    """Phantom geometry violates radius ordering or bounds."""


class ShapeError(ScarNetError, ValueError):
    exit_code = 2


class DataError(ScarNetError):
    exit_code = 3


class DatasetFormatError(DataError):
    def __init__(self, path, field, detail=""):
        self.path = str(path)
        self.field = field
        msg = f"{self.path}: bad or missing field '{field}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class LabelError(DataError, ValueError):
    pass


class CheckpointError(ScarNetError):
    exit_code = 4


class PairingError(ScarNetError):
    exit_code = 5

    def __init__(self, unmatched):
        self.unmatched = sorted(unmatched)
        super().__init__("unmatched sample ids: " + ", ".join(self.unmatched) if self.unmatched
                         else "no samples to pair")


class NumericError(ScarNetError, FloatingPointError):
    pass


class DatasetNotFoundError(DataError, FileNotFoundError):
    pass

"""Exception hierarchy shared across the package."""


class SingularTrajectoryError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SingularTrajectoryError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(SingularTrajectoryError, ValueError):
    pass


class ConfigError(SingularTrajectoryError, ValueError):
    pass


class ShapeError(SingularTrajectoryError, ValueError):
    pass


class BuildError(SingularTrajectoryError, ValueError):
    pass


class ClusteringError(SingularTrajectoryError, ValueError):
    pass


class MapError(SingularTrajectoryError, ValueError):
    pass


class TrainingError(SingularTrajectoryError, RuntimeError):
    pass


class CheckpointError(SingularTrajectoryError, FileNotFoundError):
    pass

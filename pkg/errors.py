# Exceptions used across the package
# Each class carries the exit code the CLI returns for it


class OctreeLatentError(Exception):
    """Base class for every error raised by this package"""

    exit_code = 5


class UsageError(OctreeLatentError):
    """Bad or missing command-line arguments"""

    exit_code = 2


class FormatError(OctreeLatentError):
    """Malformed input file (bad magic, truncated payload, bad values)"""

    exit_code = 3

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(OctreeLatentError):
    """Run configuration is inconsistent"""

    exit_code = 4


class ShapeError(OctreeLatentError):
    """Operand extents do not agree"""


class NumericError(OctreeLatentError):
    """A computation produced NaN or infinity"""


class StructureError(OctreeLatentError):
    """Octree / dual graph structure is malformed"""


class ConditioningError(OctreeLatentError):
    """A completion or extension request cannot be satisfied"""


class GraphError(OctreeLatentError):
    """Computation graph misuse (unbound leaf, unknown parameter)"""

"""Error types shared across the toolkit.

Everything deriving from ShapeEvadeError is an expected domain failure: the CLI
maps these to exit code 1 with a machine-readable JSON payload on stderr.
Programming errors (bad argument types, out-of-range scalars) raise the usual
ValueError/TypeError instead.
"""


class ShapeEvadeError(Exception):
    """Base class for expected domain failures."""

    code = "error"


class ImageFormatError(ShapeEvadeError):
    """Unreadable, unsupported, or undersized raster data."""

    code = "image-format"


class DimensionMismatchError(ShapeEvadeError):
    """Two rasters or point sets that must share a shape do not."""

    code = "dimension-mismatch"


class DegenerateViewError(ShapeEvadeError):
    """A joint fell behind the camera near plane."""

    code = "degenerate-view"


class InfeasibleConfigError(ShapeEvadeError):
    """Subject sampling could not satisfy visibility within the retry budget."""

    code = "infeasible-config"


class NumericFailureError(ShapeEvadeError):
    """A non-finite value appeared where finite math was required."""

    code = "numeric-failure"


class TrainingFailureError(ShapeEvadeError):
    """Detector training diverged."""

    code = "training-failure"


class CheckpointFormatError(ShapeEvadeError):
    """Detector checkpoint file is truncated, corrupt, or incompatible."""

    code = "checkpoint-format"


class NothingToAttackError(ShapeEvadeError):
    """Local attack requested on a keypoint that is not detected."""

    code = "nothing-to-attack"


class FitFailureError(ShapeEvadeError):
    """Every fitter restart diverged."""

    code = "fit-failure"


class DegenerateGeometryError(ShapeEvadeError):
    """Point set too degenerate for similarity alignment."""

    code = "degenerate-geometry"

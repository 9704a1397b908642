"""Exception types raised across the package."""


class QuadmapError(Exception):
    """Base class for all library errors."""


class NotAnEllipsoid(QuadmapError):
    pass


class DegenerateConic(QuadmapError):
    pass


class ProjectionDegenerate(QuadmapError):
    """The ellipsoid does not project to a bounded ellipse in front of the camera."""


class TooFewViews(QuadmapError):
    pass


class InsufficientParallax(QuadmapError):
    pass


class TooFewPlanes(QuadmapError):
    pass


class RankDeficient(QuadmapError):
    pass


class InvalidShape(QuadmapError):
    pass


class InitFailure(QuadmapError):
    """Initialization failed; ``__cause__`` holds the underlying error."""


class NoActiveResiduals(QuadmapError):
    pass


class EmptyResults(QuadmapError):
    pass


class ObjectNotVisible(QuadmapError):
    pass


class ConfigError(QuadmapError):
    pass


class IngestionError(QuadmapError):
    pass

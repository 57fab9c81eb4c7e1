class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class DegenerateNeighborhoodError(ValueError):
    """All k neighbor distances are equal, so the LID estimate is undefined."""


class DuplicatePointError(ValueError):
    """A neighbor sits at distance zero from the query."""


class InsufficientDataError(ValueError):
    pass


class ConfigError(ValueError):
    """Bad or inconsistent experiment configuration."""

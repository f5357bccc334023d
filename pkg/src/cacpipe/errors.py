"""Exception types shared across the pipeline."""


class CacError(Exception):
    """Base class for all cacpipe errors."""


class MetaImageError(CacError):
    """Malformed or unsupported MetaImage file; `key` names the offending header key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class GridMismatchError(CacError):
    """Two volumes do not share a grid; `field` names the first differing field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NonBinaryMaskError(CacError):
    """A mask volume contains values other than 0 and 1."""


class EmptyMaskError(CacError):
    """An operation requires a nonempty mask."""


class OstiaFileError(CacError):
    """Malformed ostia JSON; `field` names the missing or invalid entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class SingleOstiumError(CacError):
    """Geometric ostia search found fewer than two vessel clusters."""


class DegenerateFitError(CacError):
    """Separation-plane support set is too small for a stable fit."""


class GraphError(CacError):
    """Vessel-graph construction or traversal failed."""


class ConfigError(CacError):
    """Bad key or value in a pipeline config file."""


class PipelineError(CacError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage

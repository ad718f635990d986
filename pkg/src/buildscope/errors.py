"""Exception hierarchy shared by every subsystem."""


class BuildscopeError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(BuildscopeError, ValueError):
    """An input lies outside the domain of an operation."""


class ConfigError(BuildscopeError):
    pass


class TransportError(BuildscopeError):
    """HTTP failure after the retry budget was spent."""

    def __init__(self, message, status=None, attempts=0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class NotFoundError(BuildscopeError):
    def __init__(self, message, query=None):
        super().__init__(message)
        self.query = query


class ParseError(BuildscopeError):
    """A response document could not be interpreted.

    ``excerpt`` carries the leading part of the offending document.
    """

    def __init__(self, message, excerpt=""):
        super().__init__(f"{message}: {excerpt!r}" if excerpt else message)
        self.excerpt = excerpt


class ReplayMissError(BuildscopeError):
    def __init__(self, signature, canonical, nearest=None, message=None):
        msg = message or f"no recorded response for {canonical} (signature {signature[:12]})"
        if nearest:
            msg += f"; nearest recorded request: {nearest}"
        super().__init__(msg)
        self.signature = signature
        self.canonical = canonical
        self.nearest = nearest


class CapabilityError(BuildscopeError):
    pass


class PipelineError(BuildscopeError):
    def __init__(self, message, asset_id=None):
        super().__init__(message)
        self.asset_id = asset_id


class IntakeError(BuildscopeError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class FixtureMissError(BuildscopeError, LookupError):
    def __init__(self, key, space_id=None):
        where = f" in space {space_id}" if space_id else ""
        super().__init__(f"no fixture vector for key {key!r}{where}")
        self.key = key
        self.space_id = space_id

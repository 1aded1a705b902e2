class HSkipError(Exception):
    """Base class for every error raised by hskip."""


class LevelOverflow(HSkipError, IndexError):
    """A bit-stream query reached past the stream's cap."""


class UnknownNode(HSkipError, KeyError):
    """A node id is not part of the view or world being queried."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "unknown node"


class InvalidBandwidth(HSkipError, ValueError):
    pass


class NoRoute(HSkipError, LookupError):
    """A lookup could not be forwarded: the topology is illegal or the target is gone."""


class BadDistribution(HSkipError, ValueError):
    pass


class BadFraction(HSkipError, ValueError):
    pass


class ConfigParse(HSkipError, ValueError):
    pass


class DumpParseError(HSkipError, ValueError):
    pass


class QueueOverflow(HSkipError, RuntimeError):
    """Total queued messages passed the configured ceiling (a divergence signal)."""

"""Exception types raised across the pruning engine."""


class PruneError(Exception):
    """Base class for all engine errors."""


class InputDomainError(PruneError, ValueError):
    """An argument lies outside the operation's domain (empty batch, bad id, ...)."""


class ShapeError(PruneError, ValueError):
    """Matrix or vector dimensions do not compose."""


class FormatError(PruneError, ValueError):
    """A wire frame, checkpoint or spec file is malformed."""


class NumericalError(PruneError, ArithmeticError):
    """A numerical routine failed (singular system, divergence, non-finite values)."""


class ProtocolError(PruneError):
    """Clients and server disagree about the shape of exchanged payloads."""

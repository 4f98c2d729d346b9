"""
Error types raised by the simulator.

Every error derives from IolwSimError so callers (the CLI in particular) can catch
the whole family in one place. Errors that reject bad input also derive from
ValueError.
"""


class IolwSimError(Exception):
    """Base class for all simulator errors."""


# =============================================================================
# protocol-core / hopping
# =============================================================================


class CapacityExceeded(IolwSimError, ValueError):
    """Too many masters, tracks, slots or slot units in a cell."""


class DuplicateId(IolwSimError, ValueError):
    """A master_id or device_uid occurs more than once."""


class UnknownTrack(IolwSimError, KeyError):
    """The referenced (master_id, track_id) does not exist."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown track"


class MalformedFrame(IolwSimError, ValueError):
    """A frame does not fit its layout (length mismatch, reserved bits set, oversize payload)."""


class ChannelOutOfRange(IolwSimError, ValueError):
    """A channel index outside 1..80."""


class TooFewChannels(IolwSimError, ValueError):
    """Not enough usable channels left to build a hopping table."""


# =============================================================================
# secure-channel
# =============================================================================


class WeakSecret(IolwSimError, ValueError):
    """Shared secret shorter than 16 bytes."""


class LinkInFailState(IolwSimError):
    """The link is locked out and needs a reconfiguration."""


class CounterExhausted(IolwSimError):
    """The 32-bit transmit counter would wrap."""


class AuthFailure(IolwSimError):
    """Tag verification failed."""

    def __init__(self, message: str = "authentication tag mismatch", locked_out: bool = False):
        super().__init__(message)
        self.locked_out = locked_out


class ReplayRejected(IolwSimError):
    """Counter not above the receive high-water mark."""


class NotInFailState(IolwSimError):
    """reconfigure() called on an active link."""


class InvalidParams(IolwSimError, ValueError):
    """Numeric parameters out of range."""


# =============================================================================
# pairing
# =============================================================================


class NotInServiceMode(IolwSimError):
    """Pairing, scan or roaming attempted while the track is not in ServiceMode."""


class PortOccupied(IolwSimError):
    """The W-Port already has a paired device."""


class OOBUnavailable(IolwSimError):
    """The out-of-band commissioning channel cannot be used."""


class PortNotPreconfigured(IolwSimError):
    """Button pairing to a port without a matching slot configuration."""


class NotAllowlisted(IolwSimError):
    """Device is not on the target master's roaming allowlist."""


class LeaseActiveElsewhere(IolwSimError):
    """Device already holds an active roaming lease."""


# =============================================================================
# simulation, adversary, analysis, cli
# =============================================================================


class InvalidScenario(IolwSimError, ValueError):
    """Scenario content is inconsistent with the cell."""


class PrerequisiteUnmet(IolwSimError):
    """An attack was asked to run without its prerequisites."""

    def __init__(self, message: str, missing: tuple[str, ...] = ()):
        super().__init__(message)
        self.missing = missing


class IncompleteTrace(IolwSimError, ValueError):
    """The trace did not run to its horizon."""


class ConfigInvalid(IolwSimError, ValueError):
    """Scenario file failed validation."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


class IOFailure(IolwSimError, OSError):
    """Artifact could not be read or written."""

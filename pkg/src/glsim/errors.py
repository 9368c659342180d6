"""Exception types shared across the simulator."""


class GlsimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(GlsimError):
    """Invalid or inconsistent configuration (bad value, dimension mismatch)."""


class InputError(GlsimError):
    """Invalid runtime input (out-of-range token, empty user data, bad file)."""


class ProtocolError(GlsimError):
    """Secure-aggregation round cannot proceed (missing participant, roster mismatch)."""


class PlanningError(GlsimError):
    """A malicious round cannot be planned (e.g. not enough sybils in pure mode)."""

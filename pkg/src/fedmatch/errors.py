"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates an invariant."""


class CorruptDeltaError(ValueError):
    """A sparse delta fails its structural invariants (bad indices, lengths)."""


class NoHelpersError(RuntimeError):
    """Raised when a consistency term is requested with an empty helper set."""


class NotEmbeddedError(KeyError):
    """Raised when a helper query names a client with no stored embedding."""


class LabelAccessError(RuntimeError):
    """Raised when client code asks a label-free data handle for labels."""

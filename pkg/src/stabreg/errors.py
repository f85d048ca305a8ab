class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""


class OutsideRegionError(ValueError):
    """A demand point lies outside the stability region."""


class EnumerationCapError(ValueError):
    """Joint I-SFR enumeration would exceed the configured cap."""

"""Exception types shared across the package."""


class KervarError(Exception):
    """Base class for kervar-specific failures."""


class UnsupportedKernelError(KervarError, ValueError):
    """Kernel family cannot be used in the requested role."""


class DegenerateKernelError(KervarError, ValueError):
    """Kernel parameters make the kernel trivial on the stated domain."""


class ResourceLimitError(KervarError, RuntimeError):
    """An enumeration or expansion would exceed the configured budget."""


class NumericalError(KervarError, RuntimeError):
    """A numerical routine failed to converge or lost too much accuracy."""


class SimulationDivergedError(KervarError, RuntimeError):
    """A simulated chain produced non-finite values."""


class ConfigError(KervarError, ValueError):
    """A CLI configuration file is malformed or inconsistent."""

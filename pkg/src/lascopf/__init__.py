"""Look-ahead security-constrained DC OPF by distributed proximal message passing."""

__version__ = "0.1.0"

"""Exceptions shared across the key, authentication and ledger layers."""
from __future__ import annotations


class KeyExhausted(RuntimeError):
    """A pool or peer-key set cannot supply the requested key material."""


class OneTimeViolation(RuntimeError):
    """An OTP key was presented for a second use."""


class NonMonotonicCounter(ValueError):
    """A reservation index does not equal the stream head."""


class KeyErased(LookupError):
    """Key material was erased, disclosed, retired or never generated."""


class StratificationViolation(RuntimeError):
    """Consensus-stratum material was routed towards disclosure."""


class DisclosureRefused(RuntimeError):
    """Evidence extraction was requested before the block was final."""


class Unauditable(RuntimeError):
    """No evidence payload exists for the block under audit."""

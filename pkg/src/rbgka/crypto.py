"""Modular arithmetic, Diffie-Hellman blinding and the symmetric envelope.

Group elements and exponents are plain Python ints.  ``GroupParams`` owns
validation so that the protocol modules never have to re-check ranges.
"""

from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

NONCE_SIZE = 12
KEY_SIZE = 32


class AuthenticationError(Exception):
    """Ciphertext failed its integrity check (wrong key or tampering)."""


@functools.lru_cache(maxsize=64)
def _is_probable_prime(n: int) -> bool:
    from sympy import isprime

    return bool(isprime(n))


@dataclass(frozen=True)
class GroupParams:
    """Public Diffie-Hellman domain: generator ``g`` modulo prime ``p``."""

    g: int
    p: int

    def __post_init__(self):
        if self.p < 5 or not _is_probable_prime(self.p):
            raise ValueError(f"modulus {self.p} is not prime")
        if not 1 < self.g < self.p:
            raise ValueError(f"generator must satisfy 1 < g < p, got g={self.g}")

    @property
    def order(self) -> int:
        # exponents only matter modulo p-1 (Fermat)
        return self.p - 1

    def share(self, value: int) -> int:
        """Normalise a private share into ``[2, p-2]``.

        Values above ``p-2`` are reduced modulo ``p-1``, which leaves every
        ``x ** share mod p`` unchanged.  The worked demo shares (e.g. 76182
        with p=32713) rely on this.
        """
        if value < 2:
            raise ValueError(f"private share must be >= 2, got {value}")
        reduced = value % self.order
        if reduced < 2:
            raise ValueError(f"private share {value} is degenerate modulo p-1")
        return reduced

    def element(self, value: int) -> int:
        if not 1 <= value < self.p:
            raise ValueError(f"{value} is not a group element mod {self.p}")
        return value


DEMO_PARAMS = GroupParams(g=5, p=32713)


def mod_exp(base: int, exp: int, params: GroupParams) -> int:
    """Return ``base ** exp mod p`` (builtin three-argument ``pow``)."""
    params.element(base)
    if exp < 0:
        raise ValueError("exponent must be non-negative")
    return pow(base, exp, params.p)


def blind(k: int, params: GroupParams) -> int:
    """Blinded (public) value of a secret exponent: ``g ** k mod p``."""
    return mod_exp(params.g, k, params)


def int_to_bytes(n: int) -> bytes:
    """Canonical big-endian, minimal-length encoding (0 encodes as b'')."""
    if n < 0:
        raise ValueError("cannot encode negative integers")
    return n.to_bytes((n.bit_length() + 7) // 8, "big")


def int_from_bytes(data: bytes) -> int:
    if data[:1] == b"\x00":
        raise ValueError("non-canonical integer encoding (leading zero octet)")
    return int.from_bytes(data, "big")


def derive_symmetric_key(k: int) -> bytes:
    """32-byte symmetric key from an agreed group element."""
    if k < 1:
        raise ValueError("key value must be a group element")
    return hashlib.sha256(b"rbgka-key\x00" + int_to_bytes(k)).digest()


def key_digest(k: int | None) -> str | None:
    """Short public fingerprint of a key value, for traces."""
    if k is None:
        return None
    return hashlib.sha256(derive_symmetric_key(k)).hexdigest()[:16]


def seal(key: bytes, plaintext: bytes, nonce: bytes | None = None) -> bytes:
    """AES-256-GCM encrypt; the result is ``nonce || ciphertext || tag``."""
    if len(key) != KEY_SIZE:
        raise ValueError("symmetric key must be 32 bytes")
    if nonce is None:
        nonce = os.urandom(NONCE_SIZE)
    elif len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 bytes")
    return nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def unseal(key: bytes, sealed: bytes) -> bytes:
    """Inverse of :func:`seal`; raises :class:`AuthenticationError`."""
    if len(key) != KEY_SIZE:
        raise ValueError("symmetric key must be 32 bytes")
    if len(sealed) < NONCE_SIZE + 16:
        raise AuthenticationError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(sealed[:NONCE_SIZE], sealed[NONCE_SIZE:], None)
    except InvalidTag:
        raise AuthenticationError("authentication tag mismatch") from None

"""Cipher schemes used by the protocol messages.

Two scheme contracts, each with one well-vetted reference instantiation:

* asymmetric (``HybridAsymmetric``): ``decrypt_with_private`` inverts
  ``encrypt_with_public`` for arbitrary byte strings, and
  ``verify_with_public`` recovers exactly what ``sign_with_private`` was
  given, raising on any forgery.  Backed by X25519 + HKDF-SHA256 + AES-GCM
  for encryption and Ed25519 for signatures.
* symmetric (``AuthenticatedSymmetric``): ``open(k, seal(k, m)) == m`` and
  any wrong key or flipped bit fails detectably (AES-GCM).

All randomness (ephemeral keys, nonces, key generation) is drawn from a
caller-supplied ``random.Random`` so simulation runs are reproducible
byte-for-byte under a seed.  Pass a ``random.SystemRandom()`` for real use.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

_NONCE_LEN = 12
_KEY_LEN = 32
_HKDF_INFO = b"p4qs hybrid v1"


class DecryptError(Exception):
    """Ciphertext failed to authenticate or decode."""


class SignatureError(Exception):
    """Signature envelope failed verification."""


def _raw_public(pub) -> bytes:
    return pub.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _derive_key(shared: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=_KEY_LEN, salt=None, info=_HKDF_INFO
    ).derive(shared)


class AuthenticatedSymmetric:
    """AES-256-GCM with the nonce carried in front of the ciphertext."""

    def new_key(self, rng: random.Random) -> bytes:
        return rng.randbytes(_KEY_LEN)

    def seal(self, key: bytes, plaintext: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(_NONCE_LEN)
        return nonce + AESGCM(key).encrypt(nonce, plaintext, None)

    def open(self, key: bytes, blob: bytes) -> bytes:
        if len(blob) < _NONCE_LEN + 16:
            raise DecryptError("sealed blob too short")
        try:
            return AESGCM(key).decrypt(blob[:_NONCE_LEN], blob[_NONCE_LEN:], None)
        except InvalidTag as exc:
            raise DecryptError("authentication failed") from exc


class HybridAsymmetric:
    """X25519 key agreement wrapping AES-GCM, plus Ed25519 signature envelopes."""

    def encrypt_with_public(self, public: x25519.X25519PublicKey, plaintext: bytes,
                            rng: random.Random) -> bytes:
        eph = x25519.X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        key = _derive_key(eph.exchange(public))
        nonce = rng.randbytes(_NONCE_LEN)
        ct = AESGCM(key).encrypt(nonce, plaintext, None)
        return _raw_public(eph.public_key()) + nonce + ct

    def decrypt_with_private(self, private: x25519.X25519PrivateKey, blob: bytes) -> bytes:
        if len(blob) < 32 + _NONCE_LEN + 16:
            raise DecryptError("hybrid blob too short")
        try:
            eph_pub = x25519.X25519PublicKey.from_public_bytes(blob[:32])
        except ValueError as exc:
            raise DecryptError("malformed ephemeral key") from exc
        key = _derive_key(private.exchange(eph_pub))
        nonce = blob[32:32 + _NONCE_LEN]
        try:
            return AESGCM(key).decrypt(nonce, blob[32 + _NONCE_LEN:], None)
        except InvalidTag as exc:
            raise DecryptError("authentication failed") from exc

    def sign_with_private(self, private: ed25519.Ed25519PrivateKey, message: bytes) -> bytes:
        return private.sign(message) + message

    def verify_with_public(self, public: ed25519.Ed25519PublicKey, envelope: bytes) -> bytes:
        if len(envelope) < 64:
            raise SignatureError("signature envelope too short")
        sig, message = envelope[:64], envelope[64:]
        try:
            public.verify(sig, message)
        except InvalidSignature as exc:
            raise SignatureError("bad signature") from exc
        return message


ASYM = HybridAsymmetric()
SYM = AuthenticatedSymmetric()


@dataclass(frozen=True)
class ServerPublic:
    """The server key halves pre-installed on every peer."""

    enc: x25519.X25519PublicKey
    sign: ed25519.Ed25519PublicKey


@dataclass(frozen=True)
class ServerKeys:
    """Full server key material (encryption + signing pairs)."""

    enc_private: x25519.X25519PrivateKey
    sign_private: ed25519.Ed25519PrivateKey

    @classmethod
    def generate(cls, rng: random.Random) -> "ServerKeys":
        return cls(
            enc_private=x25519.X25519PrivateKey.from_private_bytes(rng.randbytes(32)),
            sign_private=ed25519.Ed25519PrivateKey.from_private_bytes(rng.randbytes(32)),
        )

    @property
    def public(self) -> ServerPublic:
        return ServerPublic(
            enc=self.enc_private.public_key(),
            sign=self.sign_private.public_key(),
        )

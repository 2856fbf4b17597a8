"""Transcript-bound session keys and MAC key confirmation.

Transcript encoding (tags in this order, each ``tag | len32 | value``)::

    0x01 version          1 byte
    0x02 verifier nonce   16 bytes
    0x03 prover nonce     16 bytes
    0x04 schedule id      UTF-8 bytes
    0x05 digests          each digest as len32 | bytes, concatenated
    0x06 m                uint32 big-endian
    0x07 k                uint32 big-endian
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from . import tlv
from .errors import ValidationError
from .extract import FeatureVector
from .kdf import hkdf

NONCE_LEN = 16
TAG_LEN = 16
SESSION_INFO = b"QSA-session-v1"
ROLE_LABELS = {"verifier": b"V", "prover": b"P"}

_VERSION, _VNONCE, _PNONCE, _SCHEDULE, _DIGESTS, _M, _K = range(1, 8)


@dataclass(frozen=True)
class Transcript:
    version: int
    verifier_nonce: bytes
    prover_nonce: bytes
    schedule_id: str
    digests: tuple[bytes, ...]
    m: int
    k: int

    def __post_init__(self):
        object.__setattr__(self, "digests", tuple(bytes(d) for d in self.digests))
        for name in ("verifier_nonce", "prover_nonce"):
            if len(getattr(self, name)) != NONCE_LEN:
                raise ValidationError(f"{name} must be {NONCE_LEN} bytes")
        if not 0 <= self.version <= 0xFF:
            raise ValidationError("version must fit in one byte")


def encode_transcript(t: Transcript) -> bytes:
    return tlv.encode(
        [
            (_VERSION, bytes([t.version])),
            (_VNONCE, t.verifier_nonce),
            (_PNONCE, t.prover_nonce),
            (_SCHEDULE, t.schedule_id.encode()),
            (_DIGESTS, tlv.encode_list(t.digests)),
            (_M, tlv.u32(t.m)),
            (_K, tlv.u32(t.k)),
        ]
    )


def decode_transcript(data: bytes) -> Transcript:
    fields = tlv.decode(data)
    tags = [tag for tag, _ in fields]
    if tags != list(range(1, 8)):
        raise ValidationError(f"transcript fields out of order or missing: {tags}")
    v = [value for _, value in fields]
    if len(v[0]) != 1:
        raise ValidationError("version field must be one byte")
    return Transcript(
        v[0][0], v[1], v[2], v[3].decode(), tuple(tlv.decode_list(v[4])), tlv.read_u32(v[5]), tlv.read_u32(v[6])
    )


@dataclass(frozen=True)
class SessionKey:
    key: bytes
    context: bytes = SESSION_INFO

    @property
    def bits(self) -> int:
        return 8 * len(self.key)


def derive_key(features: FeatureVector | bytes, t: Transcript, bits: int = 256) -> SessionKey:
    if bits not in (128, 256):
        raise ValidationError("key length must be 128 or 256 bits")
    if isinstance(features, FeatureVector):
        if features.k != t.k or features.m != t.m:
            raise ValidationError(f"feature vector has k={features.k}, m={features.m}; transcript expects k={t.k}, m={t.m}")
        ikm = features.pack()
    else:
        ikm = bytes(features)
    salt = hashlib.sha256(encode_transcript(t)).digest()
    return SessionKey(hkdf(ikm, salt, SESSION_INFO, bits // 8))


def confirm_tag(key: SessionKey | bytes, role: str, nonce: bytes) -> bytes:
    if role not in ROLE_LABELS:
        raise ValidationError(f"role must be one of {sorted(ROLE_LABELS)}")
    k = key.key if isinstance(key, SessionKey) else key
    return hmac.new(k, ROLE_LABELS[role] + nonce, hashlib.sha256).digest()[:TAG_LEN]


def verify_confirmation(key: SessionKey | bytes, role: str, nonce: bytes, tag: bytes) -> bool:
    expected = confirm_tag(key, role, nonce)
    # compare_digest is constant time for equal lengths; pad short tags so the
    # comparison still runs over the full width
    padded = bytes(tag[:TAG_LEN]).ljust(TAG_LEN, b"\0")
    return hmac.compare_digest(expected, padded) and len(tag) == TAG_LEN


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    attempt: int
    locked: bool


class ConfirmationGate:
    """Counts confirmation attempts and refuses everything after ``max_attempts``."""

    def __init__(self, key: SessionKey | bytes, role: str, nonce: bytes, max_attempts: int = 1):
        self._key, self._role, self._nonce = key, role, nonce
        self.max_attempts = max_attempts
        self.attempts = 0
        self.accepted = False

    def check(self, tag: bytes) -> Verdict:
        self.attempts += 1
        if self.attempts > self.max_attempts:
            return Verdict(False, self.attempts, True)
        ok = verify_confirmation(self._key, self._role, self._nonce, tag)
        self.accepted = self.accepted or ok
        return Verdict(ok, self.attempts, self.attempts >= self.max_attempts and not ok)

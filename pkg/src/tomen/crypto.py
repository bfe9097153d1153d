"""Per-hop key agreement, key derivation, layer cipher and running digests.

Primitive choices live here and nowhere else:

* ephemeral key agreement: X25519
* relay identity signatures: Ed25519
* key derivation: HKDF-SHA256 (extract then expand, one label per output)
* layer cipher: AES-128 in counter mode, one 505-byte payload per counter value
* running digest: SHA-256, truncated to 4 bytes when written into a cell
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from tomen.cellwire import (
    CELL_PAYLOAD_SIZE,
    DIGEST_OFFSET,
    DIGEST_SIZE,
    RelayPayload,
    encode_relay_payload,
)

ELEMENT_SIZE = 32
TAG_SIZE = 32
SIGNATURE_SIZE = 64
CREATE_SIZE = ELEMENT_SIZE
CREATED_SIZE = ELEMENT_SIZE + TAG_SIZE + SIGNATURE_SIZE

KEY_SIZE = 16
DIGEST_SEED_SIZE = 32
KDF_SALT = b"tomen-v1 hop keys"
CONFIRM_LABEL = b"tomen-v1 key confirmation"
SIGN_LABEL = b"tomen-v1 handshake"
MAX_COUNTER = 2**64 - 1

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw


class HandshakeError(Exception):
    pass


class IdentityMismatchError(HandshakeError):
    pass


class KeyMismatchError(HandshakeError):
    pass


class CounterExhaustedError(Exception):
    """The layer counter wrapped; the circuit must be torn down."""


@dataclass(frozen=True)
class KeyPair:
    """A private scalar and its public element, both as raw 32-byte strings.

    ``kind`` is ``"dh"`` for ephemeral X25519 pairs and ``"sign"`` for
    Ed25519 identity keys.
    """

    private: bytes = field(repr=False)
    public: bytes
    kind: str = "dh"


def _rand32(rng: random.Random) -> bytes:
    return rng.randbytes(32)


def gen_keypair(rng: random.Random) -> KeyPair:
    priv = X25519PrivateKey.from_private_bytes(_rand32(rng))
    return KeyPair(
        priv.private_bytes_raw(), priv.public_key().public_bytes(_RAW, _RAW_PUB), "dh"
    )


def gen_identity(rng: random.Random) -> KeyPair:
    priv = Ed25519PrivateKey.from_private_bytes(_rand32(rng))
    return KeyPair(
        priv.private_bytes_raw(), priv.public_key().public_bytes(_RAW, _RAW_PUB), "sign"
    )


def fingerprint(identity_pubkey: bytes) -> str:
    return hashlib.sha256(identity_pubkey).hexdigest()[:40]


def _sign(identity: KeyPair, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(identity.private).sign(message)


def _verify(identity_pub: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(identity_pub).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def _exchange(own: KeyPair, peer_public: bytes) -> bytes:
    if len(peer_public) != ELEMENT_SIZE:
        raise HandshakeError(f"group element must be {ELEMENT_SIZE} bytes")
    try:
        return X25519PrivateKey.from_private_bytes(own.private).exchange(
            X25519PublicKey.from_public_bytes(peer_public)
        )
    except ValueError as exc:
        # all-zero shared secret: the peer sent a small-order point
        raise HandshakeError(f"malformed group element: {exc}") from None


def confirmation_tag(shared_secret: bytes) -> bytes:
    return hashlib.sha256(CONFIRM_LABEL + shared_secret).digest()


class RunningDigest:
    """SHA-256 over everything absorbed so far, seeded from key material."""

    def __init__(self, seed: bytes = b"", _h=None):
        self._h = _h if _h is not None else hashlib.sha256(seed)

    def copy(self) -> RunningDigest:
        return RunningDigest(_h=self._h.copy())

    def absorb(self, data: bytes) -> None:
        self._h.update(data)

    def value(self) -> bytes:
        return self._h.digest()[:DIGEST_SIZE]

    def full(self) -> bytes:
        return self._h.digest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunningDigest):
            return NotImplemented
        return self.full() == other.full()

    def __repr__(self) -> str:
        return f"RunningDigest({self.full().hex()[:16]}...)"


@dataclass
class HopKeys:
    forward_key: bytes
    backward_key: bytes
    forward_digest_state: RunningDigest
    backward_digest_state: RunningDigest


def _hkdf(shared_secret: bytes, label: bytes, length: int) -> bytes:
    return HKDF(hashes.SHA256(), length, KDF_SALT, label).derive(shared_secret)


def derive_hop_keys(shared_secret: bytes) -> HopKeys:
    if not shared_secret:
        raise ValueError("shared secret must be non-empty")
    return HopKeys(
        forward_key=_hkdf(shared_secret, b"fwd-key", KEY_SIZE),
        backward_key=_hkdf(shared_secret, b"bwd-key", KEY_SIZE),
        forward_digest_state=RunningDigest(_hkdf(shared_secret, b"fwd-dig", DIGEST_SEED_SIZE)),
        backward_digest_state=RunningDigest(_hkdf(shared_secret, b"bwd-dig", DIGEST_SEED_SIZE)),
    )


def client_create_payload(client_eph: KeyPair) -> bytes:
    return client_eph.public


def relay_respond(
    create_payload: bytes, relay_identity: KeyPair, rng: random.Random
) -> tuple[bytes, HopKeys]:
    if len(create_payload) != CREATE_SIZE:
        raise HandshakeError(f"create payload must be {CREATE_SIZE} bytes")
    eph = gen_keypair(rng)
    shared = _exchange(eph, create_payload)
    signature = _sign(relay_identity, SIGN_LABEL + create_payload + eph.public)
    created = eph.public + confirmation_tag(shared) + signature
    return created, derive_hop_keys(shared)


def client_finish(client_eph: KeyPair, created_payload: bytes, expected_identity: bytes) -> HopKeys:
    if len(created_payload) != CREATED_SIZE:
        raise HandshakeError(f"created payload must be {CREATED_SIZE} bytes")
    relay_eph = created_payload[:ELEMENT_SIZE]
    tag = created_payload[ELEMENT_SIZE:ELEMENT_SIZE + TAG_SIZE]
    signature = created_payload[ELEMENT_SIZE + TAG_SIZE:]
    if not _verify(expected_identity, signature, SIGN_LABEL + client_eph.public + relay_eph):
        raise IdentityMismatchError("handshake not signed by the expected relay identity")
    shared = _exchange(client_eph, relay_eph)
    if tag != confirmation_tag(shared):
        raise KeyMismatchError("key confirmation tag does not match")
    return derive_hop_keys(shared)


@dataclass
class LayerCipherState:
    key: bytes
    counter: int = 0

    def clone(self) -> LayerCipherState:
        return LayerCipherState(self.key, self.counter)


def keystream(key: bytes, counter: int, n: int = CELL_PAYLOAD_SIZE) -> bytes:
    # counter occupies the high 8 bytes of the CTR block; 32 blocks never carry into it
    iv = counter.to_bytes(8, "big") + bytes(8)
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(bytes(n))


def apply_layer(state: LayerCipherState, payload: bytes) -> bytes:
    """XOR one keystream block into ``payload``. Adds or removes a layer."""
    if state.counter > MAX_COUNTER:
        raise CounterExhaustedError("layer counter exhausted")
    ks = keystream(state.key, state.counter, len(payload))
    state.counter += 1
    return (int.from_bytes(payload, "big") ^ int.from_bytes(ks, "big")).to_bytes(
        len(payload), "big"
    )


def _zero_digest(encoded: bytes) -> bytes:
    return encoded[:DIGEST_OFFSET] + bytes(DIGEST_SIZE) + encoded[DIGEST_OFFSET + DIGEST_SIZE:]


def update_and_seal_digest(digest_state: RunningDigest, rp: RelayPayload) -> RelayPayload:
    encoded = _zero_digest(encode_relay_payload(rp))
    digest_state.absorb(encoded)
    return RelayPayload(
        relay_command=rp.relay_command,
        data=rp.data,
        stream_id=rp.stream_id,
        recognized=rp.recognized,
        digest=digest_state.value(),
    )


def verify_digest(digest_state: RunningDigest, rp: RelayPayload) -> bool:
    """Check ``rp`` against the running digest; the state advances only on a match."""
    trial = digest_state.copy()
    trial.absorb(_zero_digest(encode_relay_payload(rp)))
    if trial.value() != rp.digest:
        return False
    digest_state._h = trial._h
    return True

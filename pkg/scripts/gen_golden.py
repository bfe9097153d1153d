#!/usr/bin/env python3
"""Regenerate tests/golden/*.hex from first principles.

Deliberately shares no code with the ``tomen`` package: cells are packed
byte by byte, HKDF is written out with ``hmac``, the layer keystream is built
from single AES block encryptions, and digests are plain ``hashlib`` calls.
Only the curve arithmetic comes from ``cryptography``.

Run from the repository root: ``python3 scripts/gen_golden.py``.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"

SALT = b"tomen-v1 hop keys"
CONFIRM = b"tomen-v1 key confirmation"
SIGN = b"tomen-v1 handshake"


def hkdf(secret: bytes, info: bytes, length: int) -> bytes:
    prk = hmac.new(SALT, secret, hashlib.sha256).digest()
    okm, block, i = b"", b"", 1
    while len(okm) < length:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        okm += block
        i += 1
    return okm[:length]


def hop_keys(secret: bytes) -> dict[str, bytes]:
    return {
        "forward_key": hkdf(secret, b"fwd-key", 16),
        "backward_key": hkdf(secret, b"bwd-key", 16),
        "forward_digest_seed": hkdf(secret, b"fwd-dig", 32),
        "backward_digest_seed": hkdf(secret, b"bwd-dig", 32),
    }


def keystream(key: bytes, counter: int, n: int = 505) -> bytes:
    ecb = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    out = b""
    block = 0
    while len(out) < n:
        out += ecb.update(counter.to_bytes(8, "big") + block.to_bytes(8, "big"))
        block += 1
    return out[:n]


def xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def cell(circ: int, command: int, payload: bytes) -> bytes:
    return (circ.to_bytes(4, "big") + bytes([command]) + len(payload).to_bytes(2, "big")
            + payload + bytes(505 - len(payload)))


def relay_payload(command: int, data: bytes, stream_id: int = 0, digest: bytes = bytes(4)) -> bytes:
    return (bytes(2) + stream_id.to_bytes(2, "big") + digest + len(data).to_bytes(2, "big")
            + bytes([command]) + data + bytes(494 - len(data)))


def write(name: str, rows: list[tuple[str, bytes]], comment: str) -> None:
    lines = [f"# {comment}", "# regenerate with scripts/gen_golden.py"]
    lines += [f"{k}: {v.hex()}" for k, v in rows]
    (OUT / name).write_text("\n".join(lines) + "\n")


def cells() -> None:
    write("cells.hex", [
        ("create_empty", cell(0, 1, b"")),
        ("relay_hi", cell(7, 4, b"hi")),
        ("destroy_max_circ", cell(0xFFFFFFFF, 3, b"")),
        ("relay_payload_data_tx", relay_payload(5, b"tx")),
        ("relay_payload_end_stream9", relay_payload(6, b"done", 9, b"\xde\xad\xbe\xef")),
    ], "encoded cells and relay payloads")


def kdf() -> None:
    keys = hop_keys(bytes(32))
    write("hop_keys_zero_secret.hex", list(keys.items()), "hop keys for a shared secret of 32 zero bytes")


def handshake() -> None:
    client_rng, relay_rng, ident_rng = random.Random(1001), random.Random(2002), random.Random(3003)
    client = X25519PrivateKey.from_private_bytes(client_rng.randbytes(32))
    identity = Ed25519PrivateKey.from_private_bytes(ident_rng.randbytes(32))
    relay = X25519PrivateKey.from_private_bytes(relay_rng.randbytes(32))
    raw = lambda k: k.public_key().public_bytes_raw()  # noqa: E731
    client_pub, relay_pub, ident_pub = raw(client), raw(relay), raw(identity)
    shared = relay.exchange(X25519PublicKey.from_public_bytes(client_pub))
    created = relay_pub + hashlib.sha256(CONFIRM + shared).digest() + identity.sign(SIGN + client_pub + relay_pub)
    keys = hop_keys(shared)

    # first DATA cell from client to this hop, sealed and layered once
    body = relay_payload(5, b"coffee", 1)
    digest = hashlib.sha256(keys["forward_digest_seed"] + body).digest()[:4]
    sealed = relay_payload(5, b"coffee", 1, digest)
    layered = xor(sealed, keystream(keys["forward_key"], 0))
    write("handshake.hex", [
        ("client_public", client_pub),
        ("identity_public", ident_pub),
        ("relay_public", relay_pub),
        ("shared_secret", shared),
        ("created_payload", created),
        *keys.items(),
        ("sealed_data_payload", sealed),
        ("layered_data_cell", cell(0x01020304, 4, layered)),
    ], "client rng Random(1001), relay ephemeral Random(2002), relay identity Random(3003)")


def layers() -> None:
    keys = [bytes(range(i, i + 16)) for i in (0, 16, 32)]
    payload = relay_payload(5, b"layered", 3)
    wrapped = payload
    for k in reversed(keys):
        wrapped = xor(wrapped, keystream(k, 0))
    write("layers.hex", [
        ("key_guard", keys[0]), ("key_middle", keys[1]), ("key_exit", keys[2]),
        ("plain", payload),
        ("keystream_guard_counter0", keystream(keys[0], 0)),
        ("keystream_guard_counter1", keystream(keys[0], 1)),
        ("wrapped", wrapped),
    ], "three layers at counter 0, added exit first")


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    cells()
    kdf()
    handshake()
    layers()
    print(f"wrote {len(list(OUT.glob('*.hex')))} files to {OUT}")


if __name__ == "__main__":
    main()

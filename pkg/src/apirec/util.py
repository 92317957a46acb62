"""Small shared helpers: stable seeding and content hashing."""

import hashlib
from pathlib import Path


def derive_seed(*parts) -> int:
    """Derive a stable 32-bit seed from arbitrary string/int parts.

    Unlike ``hash()``, the result does not vary between interpreter runs,
    so parallel and serial pipelines sample identically.
    """
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def atomic_write_text(path, text: str) -> None:
    """Write a file via a temp sibling + rename so readers never see partial content."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)

"""Word-level text preprocessing shared by the linker and the generator."""

import re

_WORD_RE = re.compile(r"[A-Za-z0-9_]+")


def word_tokens(text: str) -> list[str]:
    """Lowercase word split on whitespace and punctuation. No stemming."""
    return [w.lower() for w in _WORD_RE.findall(text)]

"""Character set and text normalisation."""

import logging
from dataclasses import dataclass
from typing import List

logger = logging.getLogger(__name__)

PAD = "<pad>"
DEFAULT_CHARSET = [PAD, " ", "!", "'", ",", "-", ".", "?"] + [chr(c) for c in range(ord("a"), ord("z") + 1)]


@dataclass
class CharacterSequence:
    ids: List[int]
    normalized_text: str


def load_charset(path):
    """One symbol per line (UTF-8); a line holding a single space is the space symbol."""
    with open(path, encoding="utf-8") as f:
        symbols = [line.rstrip("\n") for line in f]
    symbols = [s for s in symbols if s != ""]
    if "." not in symbols:
        raise ValueError("charset must contain '.'")
    if len(set(symbols)) != len(symbols):
        raise ValueError("charset has duplicate symbols")
    return symbols


def save_charset(charset, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join(s + "\n" for s in charset))


def default_normalizer(text):
    return " ".join(text.lower().split())


def normalize_and_encode_text(text, charset=DEFAULT_CHARSET, normalizer=default_normalizer):
    """Lower-case, drop unknown symbols and make sure the text ends with '.'."""
    if not text or not text.strip():
        raise ValueError("empty text")
    table = {s: i for i, s in enumerate(charset)}
    kept = []
    dropped = set()
    for ch in normalizer(text):
        if ch in table and ch != PAD:
            kept.append(ch)
        else:
            dropped.add(ch)
    if dropped:
        logger.warning("dropped characters outside the charset: %s", "".join(sorted(dropped)))
    norm = "".join(kept).strip()
    if not norm.replace(".", "").strip():
        raise ValueError(f"text {text!r} is empty after normalisation")
    if not norm.endswith("."):
        norm += "."
    return CharacterSequence([table[c] for c in norm], norm)

"""Text normalization and the whitespace/punctuation tokenizer shared by every module."""

import re
import unicodedata

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """NFC-compose, trim, collapse whitespace runs and lowercase Latin letters.

    Hangul has no case, so ``str.lower`` only affects cased scripts.
    """
    text = unicodedata.normalize("NFC", text)
    text = _WS.sub(" ", text.strip())
    return text.lower()


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    for word in normalize(text).split(" "):
        if not word:
            continue
        start, end = 0, len(word)
        while start < end and _is_punct(word[start]):
            start += 1
        while end > start and _is_punct(word[end - 1]):
            end -= 1
        tokens.extend(word[:start])
        if start < end:
            tokens.append(word[start:end])
        tokens.extend(word[end:])
    return tokens


def detokenize(tokens) -> str:
    return " ".join(tokens)

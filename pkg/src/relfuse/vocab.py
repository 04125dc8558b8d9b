"""Token inventories, cross-tokenizer token matching, and anchor selection.

Tokens from different tokenizers are matched by exact byte equality after
canonicalization: marker characters (sentencepiece "▁", byte-level BPE
"Ġ"-style alphabets) and byte-fallback escapes are rewritten into the raw
bytes they denote.  No fuzzy or substring matching is attempted.
"""

from __future__ import annotations

import base64
import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import ArgumentError, ConfigError, EnsembleError, TokenizationError

logger = logging.getLogger(__name__)

_SP_MARKER = "▁"  # "▁", denotes a space in sentencepiece vocabularies
_BYTE_ESCAPE = re.compile(r"^<0x([0-9a-fA-F]{2})>$")


def _byte_bpe_table() -> dict[str, int]:
    # Byte-level BPE vocabularies store each byte as a printable character:
    # printable latin-1 bytes map to themselves, the rest are shifted up by
    # 256 in the order of their byte value ("Ġ" = 0x20, "Ċ" = 0x0A, ...).
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    table = {chr(b): b for b in printable}
    shift = 0
    for b in range(256):
        if b not in table.values():
            table[chr(256 + shift)] = b
            shift += 1
    return table


_BYTE_BPE_DECODER = _byte_bpe_table()


def _canon_plain(surface: str) -> bytes:
    return surface.encode("utf-8")


def _canon_sentencepiece(surface: str) -> bytes:
    escape = _BYTE_ESCAPE.match(surface)
    if escape:
        return bytes([int(escape.group(1), 16)])
    return surface.replace(_SP_MARKER, " ").encode("utf-8")


def _canon_byte_bpe(surface: str) -> bytes:
    out = bytearray()
    for ch in surface:
        b = _BYTE_BPE_DECODER.get(ch)
        if b is None:
            # Not part of the byte alphabet (e.g. a special token): keep
            # the character's own bytes so canonicalization stays total.
            out.extend(ch.encode("utf-8"))
        else:
            out.append(b)
    return bytes(out)


CONVENTIONS: dict[str, Callable[[str], bytes]] = {
    "plain": _canon_plain,
    "sentencepiece": _canon_sentencepiece,
    "byte-bpe": _canon_byte_bpe,
}


def canonicalize(surface: str | bytes, convention: str) -> bytes:
    """Map a raw token surface to canonical bytes under a marker convention.

    Two tokens denoting the same surface text under different conventions
    canonicalize to equal bytes, which is what cross-tokenizer matching
    relies on.
    """
    try:
        fn = CONVENTIONS[convention]
    except KeyError:
        known = ", ".join(sorted(CONVENTIONS))
        raise ConfigError(
            f"unknown tokenizer convention {convention!r} (known: {known})"
        ) from None
    if isinstance(surface, bytes):
        if convention == "plain":
            return surface
        surface = surface.decode("utf-8")
    return fn(surface)


@dataclass(frozen=True)
class Token:
    """One vocabulary entry: id, canonical byte surface, display string."""

    id: int
    surface: bytes
    display: str


class Vocabulary:
    """Ordered token inventory with surface lookup.

    Ids are contiguous from 0.  If several tokens canonicalize to the same
    surface, the lowest id represents that surface; the others are kept in
    the inventory but dropped from intersection candidacy (warned once).
    """

    def __init__(self, tokens: Sequence[Token], name: str = ""):
        self.name = name
        self.tokens = list(tokens)
        for i, tok in enumerate(self.tokens):
            if tok.id != i:
                raise ArgumentError(
                    f"vocabulary {name!r}: token ids must be contiguous from 0, "
                    f"got id {tok.id} at position {i}"
                )
        self._surface_to_id: dict[bytes, int] = {}
        self.dropped_ids: set[int] = set()
        collisions = 0
        for tok in self.tokens:
            if tok.surface in self._surface_to_id:
                self.dropped_ids.add(tok.id)
                collisions += 1
            else:
                self._surface_to_id[tok.surface] = tok.id
        if collisions:
            logger.warning(
                "vocabulary %r: %d token(s) collide on canonical surface after "
                "canonicalization; keeping lowest ids",
                name,
                collisions,
            )

    @classmethod
    def from_raw(
        cls, surfaces: Iterable[str], convention: str, name: str = ""
    ) -> "Vocabulary":
        tokens = [
            Token(i, canonicalize(s, convention), s) for i, s in enumerate(surfaces)
        ]
        return cls(tokens, name=name)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_for(self, surface: bytes) -> int | None:
        return self._surface_to_id.get(surface)

    def surface_of(self, token_id: int) -> bytes:
        return self.tokens[token_id].surface

    def surfaces(self) -> set[bytes]:
        """Canonical surfaces eligible for cross-model matching."""
        return set(self._surface_to_id)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    """Write a vocabulary as JSON-lines, one record per token, in id order."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            rec = {
                "id": tok.id,
                "bytes": base64.b64encode(tok.surface).decode("ascii"),
                "display": tok.display,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_vocabulary(path: str | Path, name: str = "") -> Vocabulary:
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tok = Token(
                    int(rec["id"]),
                    base64.b64decode(rec["bytes"]),
                    str(rec["display"]),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(
                    f"{path}: bad vocabulary record on line {lineno + 1}: {exc}"
                ) from exc
            tokens.append(tok)
    if not tokens:
        raise ConfigError(f"{path}: empty vocabulary file")
    return Vocabulary(tokens, name=name or Path(path).stem)


class GreedyTokenizer:
    """Greedy longest-match tokenizer over a vocabulary's canonical surfaces."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._max_len = max((len(s) for s in vocab.surfaces()), default=0)

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else text
        ids: list[int] = []
        i = 0
        n = len(data)
        while i < n:
            for length in range(min(self._max_len, n - i), 0, -1):
                tid = self.vocab.id_for(data[i : i + length])
                if tid is not None:
                    ids.append(tid)
                    i += length
                    break
            else:
                raise TokenizationError(
                    f"vocabulary {self.vocab.name!r} cannot tokenize byte "
                    f"{data[i:i + 1]!r} at offset {i} of {data[:64]!r}..."
                )
        return ids

    def decode(self, ids: Sequence[int]) -> bytes:
        return b"".join(self.vocab.surface_of(i) for i in ids)


def common_tokens(vocabularies: Sequence[Vocabulary]) -> set[bytes]:
    """Canonical surfaces present in every vocabulary.

    Order-independent of the input order.  An empty intersection makes the
    ensemble impossible and is fatal.
    """
    if len(vocabularies) < 2:
        raise ArgumentError("common_tokens needs at least 2 vocabularies")
    common = vocabularies[0].surfaces()
    for vocab in vocabularies[1:]:
        common &= vocab.surfaces()
    if not common:
        names = [v.name or "?" for v in vocabularies]
        raise EnsembleError(
            f"vocabulary intersection of {names} is empty; ensemble impossible"
        )
    return common


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchor surfaces plus their per-model vocabulary ids.

    Anchor order is identical for all models and sorted lexicographically
    by canonical surface bytes so that matrices are reproducible.
    """

    anchors: tuple[bytes, ...]
    per_model_ids: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return len(self.anchors)


def select_anchors(
    common: set[bytes],
    vocabularies: Sequence[Vocabulary],
    strategy: str = "full",
    k: int | None = None,
    seed: int | None = None,
) -> AnchorSet:
    """Choose anchor tokens from the common set and resolve per-model ids.

    strategy "full" takes every common token; "sample" draws k surfaces
    uniformly without replacement, reproducibly under a fixed seed.  Either
    way the result is sorted by canonical bytes.
    """
    ordered = sorted(common)
    if strategy == "full":
        chosen = ordered
    elif strategy == "sample":
        if k is None:
            raise ArgumentError("sample strategy requires k")
        if not 1 <= k <= len(ordered):
            raise ArgumentError(
                f"sample size k={k} out of range 1..{len(ordered)}"
            )
        rng = random.Random(seed)
        chosen = sorted(rng.sample(ordered, k))
    else:
        raise ArgumentError(f"unknown anchor strategy {strategy!r}")

    per_model = []
    for vocab in vocabularies:
        ids = []
        for surface in chosen:
            tid = vocab.id_for(surface)
            if tid is None:
                raise ArgumentError(
                    f"anchor {surface!r} missing from vocabulary {vocab.name!r}"
                )
            ids.append(tid)
        per_model.append(tuple(ids))
    return AnchorSet(anchors=tuple(chosen), per_model_ids=tuple(per_model))


def parse_anchor_strategy(text: str) -> tuple[str, int | None]:
    """Parse CLI anchor syntax: "full" or "sample:K"."""
    if text == "full":
        return "full", None
    if text.startswith("sample:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad anchor strategy {text!r}: K must be an integer")
        return "sample", k
    raise ConfigError(f"bad anchor strategy {text!r} (expected full or sample:K)")

"""Tokenization, chunking, chunk sampling and weighted corpus mixing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ConfigError

BOS_ID, EOS_ID, PAD_ID = 256, 257, 258
BYTE_VOCAB = 259


class ShortageError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerSpec:
    """Byte-level by default; ``external_vocab`` maps symbols to ids with greedy longest match."""

    mode: str = "byte_level"
    vocab: dict[str, int] | None = None
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    pad_id: int = PAD_ID

    def __post_init__(self):
        if self.mode not in ("byte_level", "external_vocab"):
            raise ConfigError(f"unknown tokenizer mode {self.mode!r}")

    @classmethod
    def from_vocab_file(cls, path, **specials) -> TokenizerSpec:
        vocab = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls("external_vocab", {str(k): int(v) for k, v in vocab.items()}, **specials)

    @property
    def special_ids(self) -> set[int]:
        return {self.bos_id, self.eos_id, self.pad_id}


BYTE_LEVEL = TokenizerSpec()


def tokenize(text: bytes | str, spec: TokenizerSpec = BYTE_LEVEL, add_bos: bool = True,
             add_eos: bool = False) -> list[int]:
    ids = [spec.bos_id] if add_bos else []
    if spec.mode == "byte_level":
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids.extend(text)
    else:
        if spec.vocab is None:
            raise ConfigError("external_vocab tokenizer needs a loaded vocabulary")
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        longest = max((len(s) for s in spec.vocab), default=0)
        i = 0
        while i < len(text):
            for n in range(min(longest, len(text) - i), 0, -1):
                tid = spec.vocab.get(text[i:i + n])
                if tid is not None:
                    ids.append(tid)
                    i += n
                    break
            else:
                raise KeyError(f"no vocabulary symbol matches {text[i:i + 10]!r} at offset {i}")
    if add_eos:
        ids.append(spec.eos_id)
    return ids


def detokenize(ids: Iterable[int], spec: TokenizerSpec = BYTE_LEVEL) -> bytes:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    ids = [int(t) for t in ids if int(t) not in spec.special_ids]
    if spec.mode == "byte_level":
        return bytes(ids)
    inv = {v: k for k, v in spec.vocab.items()}
    return "".join(inv[t] for t in ids).encode("utf-8")


@dataclass
class Chunk:
    tokens: list[int]
    source: str = ""
    doc: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "source": self.source, "doc": self.doc}


def chunk_stream(documents, max_chunk_len: int, source: str = "") -> list[Chunk]:
    """Greedy sequential split of each document; chunks never cross documents.

    ``documents`` is an iterable of token lists or of ``(doc_id, tokens)`` pairs.
    """
    if max_chunk_len < 1:
        raise ConfigError(f"max_chunk_len must be >= 1, got {max_chunk_len}")
    out = []
    for i, doc in enumerate(documents):
        if isinstance(doc, tuple):
            doc_id, toks = doc
        else:
            doc_id, toks = str(i), doc
        toks = list(toks)
        for start in range(0, len(toks), max_chunk_len):
            out.append(Chunk(toks[start:start + max_chunk_len], source, str(doc_id)))
    return out


def sample_chunks(chunks: list, n: int, seed) -> list:
    """Seeded uniform sample without replacement, in sampled order."""
    if n < 0:
        raise ValueError(f"sample size must be non-negative, got {n}")
    if n > len(chunks):
        raise ShortageError(f"requested {n} chunks but only {len(chunks)} available "
                            f"(short by {n - len(chunks)})")
    idx = np.random.default_rng(seed).permutation(len(chunks))[:n]
    return [chunks[i] for i in idx]


def apportion(weights, n_total: int) -> list[int]:
    """Largest-remainder apportionment of ``n_total``; ties go to the lower index."""
    ws = [Fraction(w) for w in weights]
    if any(w < 0 for w in ws) or sum(ws) == 0:
        raise ConfigError(f"weights must be non-negative with a positive sum, got {list(weights)}")
    total = sum(ws)
    quotas = [w / total * n_total for w in ws]
    counts = [int(q) for q in quotas]
    rest = n_total - sum(counts)
    order = sorted(range(len(ws)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class CorpusSource:
    name: str
    path: str
    keep_fraction: float = 1.0
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"{self.name}: keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.weight < 0:
            raise ConfigError(f"{self.name}: weight must be non-negative")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def read_documents(path) -> list[tuple[str, str]]:
    return [(str(r.get("id", i)), r["text"]) for i, r in enumerate(read_jsonl(path))]


def undersample(docs: list, keep_fraction: float, seed) -> list:
    """Keep each document independently with probability ``keep_fraction``."""
    if keep_fraction >= 1.0:
        return list(docs)
    u = np.random.default_rng(seed).random(len(docs))
    return [d for d, x in zip(docs, u) if x < keep_fraction]


@dataclass
class MixResult:
    chunks: list[Chunk]
    report: dict = field(default_factory=dict)


def mix_corpora(sources: list[CorpusSource], n_total: int, max_chunk_len: int, seed: int,
                tokenizer: TokenizerSpec = BYTE_LEVEL) -> MixResult:
    """Undersample, tokenize and chunk each source, then draw apportioned chunk counts."""
    counts = apportion([s.weight for s in sources], n_total)
    picked: list[Chunk] = []
    per_source = {}
    for si, (src, need) in enumerate(zip(sources, counts)):
        docs = undersample(read_documents(src.path), src.keep_fraction, [seed, si, 0])
        tokens = [(doc_id, tokenize(text, tokenizer, add_bos=True, add_eos=True))
                  for doc_id, text in docs]
        chunks = chunk_stream(tokens, max_chunk_len, src.name)
        if len(chunks) < need:
            raise ShortageError(f"source {src.name!r} yields {len(chunks)} chunks but {need} are "
                                f"needed (deficit {need - len(chunks)})")
        chosen = sample_chunks(chunks, need, [seed, si, 1])
        picked.extend(chosen)
        per_source[src.name] = {"chunks": len(chosen), "tokens": sum(len(c) for c in chosen)}
    order = np.random.default_rng([seed, len(sources), 2]).permutation(len(picked))
    picked = [picked[i] for i in order]
    total_tokens = sum(v["tokens"] for v in per_source.values())
    for v in per_source.values():
        v["share"] = v["tokens"] / total_tokens if total_tokens else 0.0
    report = {"per_source": per_source, "total_chunks": len(picked), "total_tokens": total_tokens}
    return MixResult(picked, report)


def write_dataset(path, chunks: Iterable[Chunk]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for c in chunks:
            f.write(json.dumps(c.to_json()) + "\n")


def read_dataset(path) -> list[Chunk]:
    return [Chunk(list(r["tokens"]), r.get("source", ""), str(r.get("doc", "")))
            for r in read_jsonl(path)]

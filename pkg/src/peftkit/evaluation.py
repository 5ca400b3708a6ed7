"""k-shot summarisation evaluation: prompts, greedy decoding, ROUGE-L, embedding-match F1."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import BYTE_LEVEL, EOS_ID, TokenizerSpec, detokenize, tokenize
from .model import ContextLengthError, KVCache
from .tensor import ConfigError, ShapeError, no_grad


class Score(NamedTuple):
    precision: float
    recall: float
    f1: float


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metric_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace; no stemming."""
    return text.lower().split()


# prompts -----------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str = "Summarise the article in one paragraph.\n\n"
    article_marker: str = "### Article:\n"
    summary_marker: str = "\n### Summary:\n"
    demo_separator: str = "\n\n"

    def __post_init__(self):
        if not self.article_marker or not self.summary_marker:
            raise ConfigError("prompt markers must be non-empty")
        if self.article_marker == self.summary_marker:
            raise ConfigError("article and summary markers must differ")


def build_prompt(template: PromptTemplate, demos: Sequence[tuple[str, str]], article: str) -> str:
    t = template
    parts = [t.instruction]
    for demo_article, demo_summary in demos:
        parts += [t.article_marker, demo_article, t.summary_marker, demo_summary, t.demo_separator]
    parts += [t.article_marker, article, t.summary_marker]
    return "".join(parts)


# decoding ----------------------------------------------------------------------


def _prefix_len(model) -> int:
    return getattr(getattr(model, "hooks", None), "prefix_len", 0)


def generate_greedy(model, prompt: Sequence[int], max_new: int, stop: int | None = EOS_ID,
                    use_cache: bool = True) -> list[int]:
    """Argmax decoding (lowest id wins ties) until ``stop`` or ``max_new`` tokens."""
    prompt = [int(t) for t in prompt]
    budget = model.config.max_positions - _prefix_len(model)
    if len(prompt) + max_new > budget:
        raise ContextLengthError(
            f"prompt of {len(prompt)} tokens plus {max_new} new tokens exceeds the usable "
            f"context of {budget} positions")
    out: list[int] = []
    with no_grad():
        cache = KVCache.for_model(model) if use_cache else None
        feed = prompt
        for _ in range(max_new):
            if use_cache:
                logits = model(feed, cache).data
            else:
                logits = model(prompt + out).data
            nxt = int(np.argmax(logits[-1]))
            if stop is not None and nxt == stop:
                break
            out.append(nxt)
            feed = [nxt]
    return out


# metrics -----------------------------------------------------------------------


def lcs_lengths(A, B, block: int = 1024) -> np.ndarray:
    """LCS lengths for every pair of rows of two integer arrays, shaped (N, la) and (M, lb).

    Standard row-by-row dynamic programme, vectorised over all N x M pairs.
    """
    A, B = np.asarray(A), np.asarray(B)
    if A.ndim != 2 or B.ndim != 2:
        raise ShapeError(f"lcs_lengths expects 2-D arrays, got {A.shape} and {B.shape}")
    (N, la), (M, lb) = A.shape, B.shape
    dt = np.int8 if min(la, lb) < 127 else np.int32
    out = np.zeros((N, M), dtype=dt)
    if la == 0 or lb == 0:
        return out
    for s in range(0, N, block):
        a = A[s:s + block]
        prev = [np.zeros((len(a), M), dtype=dt) for _ in range(lb + 1)]
        for i in range(la):
            ai = a[:, i, None]
            cur = [prev[0]]
            for j in range(lb):
                c = np.maximum(prev[j + 1], cur[j])
                np.copyto(c, prev[j] + 1, where=ai == B[None, :, j])
                cur.append(c)
            prev = cur
        out[s:s + len(a)] = prev[lb]
    return out


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    ids: dict = {}
    ca = np.array([[ids.setdefault(x, len(ids)) for x in a]])
    cb = np.array([[ids.setdefault(y, len(ids)) for y in b]])
    return int(lcs_lengths(ca, cb)[0, 0])


def rouge_l(candidate: Sequence, reference: Sequence) -> Score:
    """LCS-based precision, recall and F1 over token sequences."""
    n = lcs_length(candidate, reference)
    p = n / len(candidate) if candidate else 0.0
    r = n / len(reference) if reference else 0.0
    return Score(p, r, _f1(p, r))


def _unit(token: str, vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError(f"zero-norm embedding for token {token!r}")
    return v / norm


def embed_match_f1(candidate: Sequence[str], reference: Sequence[str],
                   embedder: Callable[[str], np.ndarray]) -> Score:
    """Greedy max-cosine matching in both directions; no idf weights, no rescaling.

    Per-token similarities are clipped to [0, 1].
    """
    if not candidate or not reference:
        return Score(0.0, 0.0, 0.0)
    c = np.stack([_unit(t, embedder(t)) for t in candidate])
    r = np.stack([_unit(t, embedder(t)) for t in reference])
    sim = np.clip(c @ r.T, 0.0, 1.0)
    p = float(sim.max(axis=1).mean())
    rec = float(sim.max(axis=0).mean())
    return Score(p, rec, _f1(p, rec))


class ModelEmbedder:
    """Mean of the model's input-embedding rows over a word's byte tokens."""

    def __init__(self, model, tokenizer: TokenizerSpec = BYTE_LEVEL):
        self.table = model.params["embed"].data.astype(np.float64)
        self.tokenizer = tokenizer

    def __call__(self, token: str) -> np.ndarray:
        ids = tokenize(token, self.tokenizer, add_bos=False)
        return self.table[ids].mean(axis=0)


class TableEmbedder:
    """Token -> vector lookup loaded from JSONL ``{"token": ..., "vector": [...]}`` rows."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = table

    @classmethod
    def from_jsonl(cls, path) -> TableEmbedder:
        table = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                table[row["token"]] = np.asarray(row["vector"], dtype=np.float64)
        return cls(table)

    def __call__(self, token: str) -> np.ndarray:
        try:
            return self.table[token]
        except KeyError:
            raise KeyError(f"token {token!r} missing from the embedding table") from None


# evaluation run ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    k: int = 0
    max_new_tokens: int = 64
    demo_selection_seed: int = 0
    embedding_provider: str = "model_embeddings"
    embedding_table: str | None = None
    truncate_articles: bool = False

    def __post_init__(self):
        if self.k < 0 or self.max_new_tokens < 0:
            raise ConfigError("k and max_new_tokens must be non-negative")
        if self.embedding_provider not in ("model_embeddings", "external_table"):
            raise ConfigError(f"unknown embedding provider {self.embedding_provider!r}")
        if self.embedding_provider == "external_table" and not self.embedding_table:
            raise ConfigError("external_table provider needs 'embedding_table'")


@dataclass
class MetricReport:
    per_example: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    dropped: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _valid(row) -> bool:
    return (isinstance(row, dict) and isinstance(row.get("article"), str) and row["article"].strip() != ""
            and isinstance(row.get("summary"), str) and row["summary"].strip() != "")


def _fit_prompt(model, template, demos, article, cfg, tokenizer) -> list[int]:
    budget = model.config.max_positions - _prefix_len(model) - cfg.max_new_tokens
    ids = tokenize(build_prompt(template, demos, article), tokenizer)
    if len(ids) <= budget:
        return ids
    if not cfg.truncate_articles:
        raise ContextLengthError(
            f"{len(demos)}-shot prompt of {len(ids)} tokens plus {cfg.max_new_tokens} new tokens "
            f"exceeds max_positions {model.config.max_positions}")
    lo, hi = 0, len(article)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if len(tokenize(build_prompt(template, demos, article[:mid]), tokenizer)) <= budget:
            lo = mid
        else:
            hi = mid - 1
    ids = tokenize(build_prompt(template, demos, article[:lo]), tokenizer)
    if len(ids) > budget:
        raise ContextLengthError(f"prompt scaffolding alone ({len(ids)} tokens) exceeds the budget")
    return ids


def run_eval(model, rows, template: PromptTemplate, cfg: EvalConfig, demo_pool=None,
             tokenizer: TokenizerSpec = BYTE_LEVEL, embedder=None) -> MetricReport:
    """Generate a summary per row and score it with ROUGE-L and embedding-match F1.

    Demonstrations come from ``demo_pool`` (default: the other valid rows) and
    never include the scored row.
    """
    rows = list(rows)
    valid = [r for r in rows if _valid(r)]
    dropped = len(rows) - len(valid)
    if not valid:
        raise ValueError(f"all {len(rows)} rows dropped (missing article or summary)")
    pool = valid if demo_pool is None else [r for r in demo_pool if _valid(r)]
    if embedder is None:
        embedder = (TableEmbedder.from_jsonl(cfg.embedding_table)
                    if cfg.embedding_provider == "external_table" else ModelEmbedder(model, tokenizer))

    report = MetricReport(config={**asdict(cfg), "metric_tokenization": "lowercase+whitespace",
                                  "template": asdict(template)}, dropped=dropped)
    for i, row in enumerate(valid):
        candidates = [j for j, d in enumerate(pool)
                      if not (d is row or (d["article"] == row["article"]
                                           and d["summary"] == row["summary"]))]
        if len(candidates) < cfg.k:
            raise ValueError(f"demo pool has {len(candidates)} usable rows, need k={cfg.k}")
        rng = np.random.default_rng([cfg.demo_selection_seed, i])
        picks = rng.choice(len(candidates), size=cfg.k, replace=False) if cfg.k else []
        demos = [(pool[candidates[j]]["article"], pool[candidates[j]]["summary"]) for j in picks]
        ids = _fit_prompt(model, template, demos, row["article"], cfg, tokenizer)
        gen = generate_greedy(model, ids, cfg.max_new_tokens, stop=tokenizer.eos_id)
        text = detokenize(gen, tokenizer).decode("utf-8", errors="replace")
        cand, ref = metric_tokens(text), metric_tokens(row["summary"])
        rl = rouge_l(cand, ref)
        em = embed_match_f1(cand, ref, embedder)
        report.per_example.append({"rouge_l": rl._asdict(), "embed_f1": em._asdict(),
                                   "generated": text})
    n = len(report.per_example)
    report.means = {
        metric: {part: math.fsum(ex[metric][part] for ex in report.per_example) / n
                 for part in Score._fields}
        for metric in ("rouge_l", "embed_f1")
    }
    return report

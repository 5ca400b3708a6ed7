"""Desk-scale language-adaptation experiment.

A byte-level model is pre-trained on an English-like synthetic corpus, then
adapted with feed-forward LoRA to a second synthetic corpus written in a
disjoint pseudo-language (accented letters, different word shapes and
sentence patterns). Held-out perplexity on the second corpus is measured
before and after adaptation for several ranks and seeds.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import LoraConfig, attach_adapter
from .data import chunk_stream, tokenize
from .model import DESK, Model, ModelConfig, init_model
from .train import TrainConfig, fit, perplexity, train_adapter

_EN_NOUNS = ("cat dog house river city garden teacher child market road window table letter "
             "forest village doctor farmer story morning winter summer bridge boat train").split()
_EN_VERBS = ("sees finds likes builds opens carries paints visits follows watches helps "
             "writes reads crosses leaves").split()
_EN_ADJS = "old small green quiet bright tall busy cold warm happy narrow".split()
_EN_PLACES = "near the hill|by the sea|in the town|under the tree|at the station".split("|")

_IS_ONSETS = ["þ", "ð", "hv", "kn", "fj", "sk", "gl", "br", "st", "v", "h", "m", "s", "l", "r"]
_IS_VOWELS = ["á", "é", "í", "ó", "ú", "ý", "æ", "ö", "au", "ei", "a", "i", "u"]
_IS_CODAS = ["ur", "nn", "ll", "ð", "st", "r", "gg", "kk", "n", ""]


def _english_sentence(rng: np.random.Generator) -> str:
    pick = lambda xs: xs[rng.integers(len(xs))]
    form = rng.integers(3)
    if form == 0:
        s = f"the {pick(_EN_ADJS)} {pick(_EN_NOUNS)} {pick(_EN_VERBS)} the {pick(_EN_NOUNS)}"
    elif form == 1:
        s = f"a {pick(_EN_NOUNS)} {pick(_EN_VERBS)} a {pick(_EN_ADJS)} {pick(_EN_NOUNS)} {pick(_EN_PLACES)}"
    else:
        s = f"every {pick(_EN_NOUNS)} {pick(_EN_VERBS)} the {pick(_EN_NOUNS)} {pick(_EN_PLACES)}"
    return s.capitalize() + "."


def _pseudo_lexicon(rng: np.random.Generator, n: int) -> list[str]:
    words = set()
    while len(words) < n:
        syl = int(rng.integers(1, 4))
        w = "".join(_IS_ONSETS[rng.integers(len(_IS_ONSETS))] + _IS_VOWELS[rng.integers(len(_IS_VOWELS))]
                    for _ in range(syl)) + _IS_CODAS[rng.integers(len(_IS_CODAS))]
        words.add(w)
    return sorted(words)


def _pseudo_sentence(rng: np.random.Generator, lex: dict[str, list[str]]) -> str:
    pick = lambda k: lex[k][rng.integers(len(lex[k]))]
    form = rng.integers(2)
    if form == 0:
        s = f"{pick('noun')}inn {pick('verb')} {pick('adj')}a {pick('noun')}, segir {pick('name')}"
    else:
        s = f"Í dag {pick('verb')} {pick('name')} {pick('noun')}um {pick('adj')}um"
    return s[0].upper() + s[1:] + "."


def english_corpus(n_docs: int, seed: int = 0, sentences=(4, 9)) -> list[str]:
    rng = np.random.default_rng([seed, 11])
    return [" ".join(_english_sentence(rng) for _ in range(rng.integers(*sentences)))
            for _ in range(n_docs)]


def pseudo_language_corpus(n_docs: int, seed: int = 0, sentences=(3, 7)) -> list[str]:
    lex_rng = np.random.default_rng(1234)  # the language itself is fixed across seeds
    words = _pseudo_lexicon(lex_rng, 120)
    lex = {"noun": words[:40], "verb": words[40:70], "adj": words[70:95], "name": words[95:]}
    rng = np.random.default_rng([seed, 22])
    return [" ".join(_pseudo_sentence(rng, lex) for _ in range(rng.integers(*sentences)))
            for _ in range(n_docs)]


def to_chunks(texts: list[str], max_len: int) -> list[list[int]]:
    docs = [tokenize(t, add_bos=True, add_eos=True) for t in texts]
    return [c.tokens for c in chunk_stream(docs, max_len) if len(c) >= 2]


@dataclass
class ExperimentConfig:
    model: ModelConfig = DESK
    max_seq: int = 128
    pretrain_docs: int = 600
    pretrain_steps: int = 600
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 8
    adapt_docs: int = 160
    heldout_docs: int = 40
    adapt_steps: int = 150
    adapt_lr: float = 2e-3
    adapt_batch: int = 4
    ranks: tuple[int, ...] = (1, 4, 16)
    seeds: tuple[int, ...] = (0, 1, 2)
    targets: str = "ff_all"
    model_seed: int = 0


@dataclass
class ExperimentResult:
    config: dict
    base_ppl_heldout: float
    base_ppl_source: float
    runs: list[dict] = field(default_factory=list)
    mean_ppl_by_rank: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def pretrain(cfg: ExperimentConfig, log_every: int = 0) -> tuple[Model, list[list[int]]]:
    model = init_model(cfg.model, cfg.model_seed)
    corpus = to_chunks(english_corpus(cfg.pretrain_docs, seed=0), cfg.max_seq)
    tc = TrainConfig(total_steps=cfg.pretrain_steps, base_lr=cfg.pretrain_lr, schedule="cosine",
                     batch_size=cfg.pretrain_batch, max_seq=cfg.max_seq, seed=cfg.model_seed)
    fit(model, corpus, tc, log_every)
    return model, corpus


def run_adaptation_experiment(cfg: ExperimentConfig | None = None, log=print) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    start = time.perf_counter()
    base, source = pretrain(cfg)
    target = to_chunks(pseudo_language_corpus(cfg.adapt_docs, seed=0), cfg.max_seq)
    heldout = to_chunks(pseudo_language_corpus(cfg.heldout_docs, seed=1), cfg.max_seq)
    result = ExperimentResult(
        config=asdict(cfg),
        base_ppl_heldout=perplexity(base, heldout),
        base_ppl_source=perplexity(base, source[:64]),
    )
    log(f"base model: source ppl {result.base_ppl_source:.3f}, target held-out ppl "
        f"{result.base_ppl_heldout:.3f}")
    for rank in cfg.ranks:
        ppls = []
        for seed in cfg.seeds:
            model = base.copy()
            attach_adapter(model, LoraConfig(rank, targets=cfg.targets, init_seed=seed))
            tc = TrainConfig(total_steps=cfg.adapt_steps, base_lr=cfg.adapt_lr, schedule="linear",
                             batch_size=cfg.adapt_batch, max_seq=cfg.max_seq, seed=seed)
            report = train_adapter(model, target, tc)
            ppl = perplexity(model, heldout)
            ppls.append(ppl)
            result.runs.append({"rank": rank, "seed": seed, "trainable": model.num_trainable(),
                                "final_loss": report.losses[-1], "heldout_ppl": ppl,
                                "drop": 1.0 - ppl / result.base_ppl_heldout})
            log(f"rank {rank:3d} seed {seed}: trainable {model.num_trainable():6d}  "
                f"held-out ppl {ppl:.3f}")
        result.mean_ppl_by_rank[str(rank)] = float(np.mean(ppls))
    result.wall_clock = time.perf_counter() - start
    return result


def dump(result: ExperimentResult, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.to_json(), f, indent=2, default=str)

"""Deterministic desk-scale worlds for exercising the ensemble pipeline.

Everything here is seed-driven and reproducible: word-chain corpora,
heterogeneous vocabularies in three surface conventions, n-gram backends
with co-occurrence embeddings, and evaluation datasets.  The module also
writes a self-contained workspace (vocabularies, embeddings, corpora,
datasets, run config) that the command line tool operates on:

    python3 -m relfuse.toykit OUT_DIR --seed 0
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import ModelBackend, NGramModel, TableModel, ngram_from_text
from .harness import EvalItem, save_dataset
from .relspace import EmbeddingTable, save_embeddings
from .vocab import GreedyTokenizer, Vocabulary, save_vocabulary

WORD_BANK = [
    "the", "cat", "sat", "on", "mat", "dog", "ran", "far", "sun", "sky",
    "bird", "song", "tree", "leaf", "wind", "rain", "snow", "cold", "warm", "day",
    "night", "moon", "star", "lake", "fish", "swim", "deep", "blue", "red", "green",
    "hill", "path", "walk", "run", "jump", "play", "ball", "game", "win", "lose",
    "home", "door", "open", "shut", "key", "lock", "room", "wall", "floor", "roof",
    "bread", "milk", "eat", "drink", "cup", "plate", "table", "chair", "sit", "stand",
    "book", "page", "read", "write", "pen", "ink", "word", "line", "tale", "end",
    "boy", "girl", "man", "woman", "child", "friend", "smile", "laugh", "cry", "call",
    "hand", "foot", "head", "eye", "ear", "nose", "mouth", "hair", "arm", "leg",
    "fire", "smoke", "ash", "stone", "sand", "dust", "clay", "mud", "grass", "seed",
    "river", "bank", "boat", "sail", "wave", "tide", "shore", "cliff", "cave", "hole",
    "wolf", "bear", "fox", "deer", "hare", "owl", "crow", "duck", "goose", "swan",
    "north", "south", "east", "west", "left", "right", "up", "down", "near", "here",
]

# words whose most likely continuation is the end of the sentence
PRE_TERMINAL = frozenset(WORD_BANK[-20:])

OUTLIER_BANK = [
    "zex", "qov", "vyn", "wug", "fep", "jid", "kob", "lus", "nid", "pom",
    "quv", "ryx", "suv", "tiz", "vob", "wix", "yud", "zem", "blik", "crag",
    "drub", "flin", "grop", "plik", "snib", "trev",
]

CHARS = [chr(c) for c in range(ord("a"), ord("z") + 1)] + [" ", "."]

STOP_SENTENCE = " ."


@dataclass
class ToyWorld:
    """A ready-to-run bundle: models, eval items, decoding settings."""

    backends: list[ModelBackend]
    dev: list[EvalItem]
    test: list[EvalItem]
    stop_surfaces: tuple[str, ...] = (STOP_SENTENCE,)
    max_tokens: int = 8
    corpora: dict[str, str] = field(default_factory=dict)


class WordChain:
    """First-order chain over the word bank with sentence termination.

    Pre-terminal words mostly end the sentence; every other word has a
    dominant successor plus two alternatives, so the argmax continuation
    is well defined and learnable from samples.
    """

    def __init__(self, words: list[str], seed: int, p_main: float = 0.72):
        self.words = list(words)
        rng = random.Random(seed)
        self.successors: dict[str, list[tuple[str, float]]] = {}
        for word in self.words:
            if word in PRE_TERMINAL:
                alt = rng.choice([w for w in self.words if w != word])
                self.successors[word] = [(".", 0.8), (alt, 0.2)]
            else:
                picks = rng.sample([w for w in self.words if w != word], 3)
                self.successors[word] = [
                    (picks[0], p_main),
                    (picks[1], 0.9 - p_main),
                    (picks[2], 0.1),
                ]

    def argmax_next(self, word: str) -> str:
        return self.successors[word][0][0]

    def _draw(self, word: str, rng: random.Random) -> str:
        roll = rng.random()
        acc = 0.0
        for nxt, prob in self.successors[word]:
            acc += prob
            if roll < acc:
                return nxt
        return self.successors[word][-1][0]

    def sample_sentence(self, rng: random.Random, max_words: int = 12) -> list[str]:
        words = [rng.choice(self.words)]
        while len(words) < max_words:
            nxt = self._draw(words[-1], rng)
            if nxt == ".":
                break
            words.append(nxt)
        return words

    def sample_corpus(
        self, seed: int, sentences: int, per_line: int = 1
    ) -> str:
        """Rendered text, one group of sentences per line, every word
        carrying its leading space so the surfaces match the vocabularies."""
        rng = random.Random(seed)
        lines = []
        group: list[str] = []
        for _ in range(sentences):
            words = self.sample_sentence(rng)
            group.append(" " + " ".join(words) + STOP_SENTENCE)
            if len(group) == per_line:
                lines.append("".join(group))
                group = []
        if group:
            lines.append("".join(group))
        return "\n".join(lines) + "\n"


def _word_pieces(words, convention: str) -> list[str]:
    if convention == "sentencepiece":
        return ["▁" + w.replace(" ", "▁") for w in words]
    if convention == "byte-bpe":
        return ["Ġ" + w.replace(" ", "Ġ") for w in words]
    return [" " + w for w in words]


def _char_pieces(convention: str) -> list[str]:
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    if convention == "sentencepiece":
        return letters + ["▁", "."]
    if convention == "byte-bpe":
        return letters + ["Ġ", "."]
    return letters + [" ", "."]


def _standard_vocab(
    name: str,
    convention: str,
    dropped: list[str],
    merges: list[tuple[str, str]],
) -> Vocabulary:
    words = [w for w in WORD_BANK if w not in dropped]
    pieces = _word_pieces(words, convention)
    pieces += _char_pieces(convention)
    pieces += _word_pieces([f"{a} {b}" for a, b in merges], convention)
    if convention == "sentencepiece":
        pieces.append("▁.")
    elif convention == "byte-bpe":
        pieces.append("Ġ.")
    else:
        pieces.append(" .")
    return Vocabulary.from_raw(pieces, convention, name=name)


def standard_world(
    seed: int = 0,
    sentences: int = 500,
    dim: int = 24,
    items_per_split: int = 100,
) -> ToyWorld:
    """Three n-gram models in different surface conventions over one chain.

    The corpora are separate samples of the same word chain, so the models
    agree on the broad statistics but differ in the particulars; each
    vocabulary drops two bank words (spelled through characters instead)
    and owns a few merged two-word pieces the others lack.
    """
    chain = WordChain(WORD_BANK, seed=seed)
    merge_words = [w for w in WORD_BANK[:8] if w not in PRE_TERMINAL]
    specs = [
        ("sp", "sentencepiece", [WORD_BANK[10], WORD_BANK[55]],
         [(w, chain.argmax_next(w)) for w in merge_words[:4]]),
        ("bb", "byte-bpe", [WORD_BANK[20], WORD_BANK[77]],
         [(w, chain.argmax_next(w)) for w in merge_words[4:8]]),
        ("pl", "plain", [WORD_BANK[30], WORD_BANK[99]], []),
    ]
    backends = []
    corpora = {}
    for offset, (name, convention, dropped, merges) in enumerate(specs):
        vocab = _standard_vocab(name, convention, dropped, merges)
        text = chain.sample_corpus(seed * 101 + offset + 1, sentences)
        corpora[name] = text
        backends.append(
            ngram_from_text(
                vocab, text, order=3, delta=0.1, name=name, dim=dim, window=2
            )
        )
    dev = _chain_items(chain, seed * 101 + 51, items_per_split)
    test = _chain_items(chain, seed * 101 + 52, items_per_split)
    return ToyWorld(
        backends=backends,
        dev=dev,
        test=test,
        stop_surfaces=(STOP_SENTENCE,),
        max_tokens=8,
        corpora=corpora,
    )


def _chain_items(
    chain: WordChain, seed: int, total: int, em_fraction: float = 0.6
) -> list[EvalItem]:
    """Evaluation items harvested from fresh chain samples.

    Exact-match items ask for the dominant continuation at a point where
    it ends the sentence (a single pre-terminal word); multiple-choice
    items offer the dominant successor against the runner-up and one
    unrelated word.  A chain without pre-terminal words can only supply
    multiple-choice items, so pass em_fraction=0 for those.
    """
    rng = random.Random(seed)
    n_em = int(total * em_fraction)
    em_items: list[EvalItem] = []
    mc_items: list[EvalItem] = []
    seen_prompts = set()
    while len(em_items) < n_em or len(mc_items) < total - n_em:
        words = chain.sample_sentence(rng)
        for i in range(1, len(words)):
            prompt = " " + " ".join(words[: i + 1])
            if prompt in seen_prompts:
                continue
            best = chain.argmax_next(words[i])
            if best == ".":
                continue
            if len(em_items) < n_em and best in PRE_TERMINAL and i >= 1:
                seen_prompts.add(prompt)
                em_items.append(EvalItem(kind="em", prompt=prompt, answer=best))
                continue
            if len(mc_items) < total - n_em and i >= 1:
                second = chain.successors[words[i]][1][0]
                if second == ".":
                    continue
                pool = [w for w in chain.words if w not in (best, second, words[i])]
                distractor = rng.choice(pool)
                options = [" " + best, " " + second, " " + distractor]
                order = rng.sample(range(3), 3)
                shuffled = [options[j] for j in order]
                gold = shuffled.index(" " + best)
                seen_prompts.add(prompt)
                mc_items.append(
                    EvalItem(
                        kind="mc",
                        prompt=prompt,
                        options=tuple(shuffled),
                        gold=gold,
                    )
                )
    items = em_items + mc_items
    rng.shuffle(items)
    return items


def consistency_tables(
    seed_a: int, seed_b: int, chain_seed: int = 7, sentences: int = 600, dim: int = 24
) -> tuple[Vocabulary, EmbeddingTable, EmbeddingTable]:
    """Two embedding tables from independent samples of one chain.

    Same vocabulary, same generating process, different draws: the pair
    stands in for two separately trained models whose relative geometry
    should agree on shared tokens.
    """
    vocab = _standard_vocab("cons", "plain", [], [])
    chain = WordChain(WORD_BANK, seed=chain_seed)
    tables = []
    for sample_seed in (seed_a, seed_b):
        text = chain.sample_corpus(sample_seed, sentences)
        model = ngram_from_text(
            vocab, text, order=2, delta=0.1, name=f"s{sample_seed}", dim=dim
        )
        tables.append(model.embeddings)
    return vocab, tables[0], tables[1]


SHARED_WORDS = WORD_BANK[:20]


def shared_vocab_world(
    seed: int = 0, sentences: int = 600, per_line: int = 8
) -> ToyWorld:
    """Two models over one shared single-token-per-word vocabulary.

    Both backends use the same embedding table, so the relative matrix is
    identical and square; elementwise prediction averaging is exactly
    representable, which makes this the reference world for comparing the
    search against the vanilla average.
    """
    pieces = [" " + w for w in SHARED_WORDS] + [STOP_SENTENCE]
    vocab = Vocabulary.from_raw(pieces, "plain", name="shared")
    chain = WordChain(SHARED_WORDS, seed=seed)
    text_a = chain.sample_corpus(seed * 31 + 1, sentences, per_line=per_line)
    text_b = chain.sample_corpus(seed * 31 + 2, sentences, per_line=per_line)
    table = ngram_from_text(
        vocab,
        text_a + text_b,
        order=3,
        delta=0.1,
        name="shared",
        dim=vocab.size,
        window=2,
    ).embeddings
    model_a = ngram_from_text(
        vocab, text_a, order=3, delta=0.1, name="a", dim=None
    )
    model_b = ngram_from_text(
        vocab, text_b, order=3, delta=0.1, name="b", dim=None
    )
    model_a.embeddings = table
    model_b.embeddings = table
    dev = _chain_items(chain, seed * 31 + 9, 10, em_fraction=0.0)
    return ToyWorld(
        backends=[model_a, model_b],
        dev=dev,
        test=dev,
        stop_surfaces=(),
        max_tokens=300,
        corpora={"a": text_a, "b": text_b},
    )


OUTLIER_START = "now"
OUTLIER_CORE = WORD_BANK[:30]


def _outlier_embeddings(
    words_with_outliers: bool, rng: np.random.Generator
) -> EmbeddingTable:
    """Constructed geometry: clustered core words, isolated outliers.

    Core words live near one of four anti-correlated cluster centers in
    an 8-dimensional subspace; each outlier word sits on its own axis.
    The outlier rows therefore have no close neighbor, which is the
    regime where raw cosine rows carry almost no anchor signal.
    """
    n_out = len(OUTLIER_BANK)
    dim = 8 + n_out
    centers = np.zeros((4, dim))
    centers[0, 0] = 1.0
    centers[1, 0] = -1.0
    centers[2, 1] = 1.0
    centers[3, 1] = -1.0
    rows = []
    # token order: start word, then core words, then (optionally) outliers
    for i in range(1 + len(OUTLIER_CORE)):
        row = centers[i % 4].copy()
        row[:8] += 0.25 * rng.normal(size=8)
        rows.append(row)
    if words_with_outliers:
        for j in range(n_out):
            row = 0.05 * rng.normal(size=dim)
            row[8 + j] += 1.0
            rows.append(row)
    return EmbeddingTable(np.stack(rows))


def outlier_world(seed: int) -> ToyWorld:
    """Main model distracted by isolated rare words, helper that knows better.

    The main model's vocabulary contains the outlier tokens and its
    distributions lean toward a wrong outlier; the helper lacks those
    tokens entirely (they are not in the common set and thus never
    anchors) and confidently backs the correct core word.
    """
    rng = np.random.default_rng(seed)
    pick = random.Random(seed * 17 + 3)
    pieces_a = (
        [OUTLIER_START]
        + [" " + w for w in OUTLIER_CORE]
        + [" " + o for o in OUTLIER_BANK]
    )
    pieces_b = [OUTLIER_START] + [" " + w for w in OUTLIER_CORE]
    vocab_a = Vocabulary.from_raw(pieces_a, "plain", name="wide")
    vocab_b = Vocabulary.from_raw(pieces_b, "plain", name="narrow")
    emb_a = _outlier_embeddings(True, rng)
    emb_b = _outlier_embeddings(False, rng)

    shifted = OUTLIER_CORE[7:] + OUTLIER_CORE[:7]
    correct = dict(zip(OUTLIER_CORE, shifted))
    wrong_outlier = {w: pick.choice(OUTLIER_BANK) for w in OUTLIER_CORE}

    tok_a = GreedyTokenizer(vocab_a)
    tok_b = GreedyTokenizer(vocab_b)
    table_a = {}
    table_b = {}
    items = []
    for w in OUTLIER_CORE:
        prompt = f"{OUTLIER_START} {w}"
        da = np.full(vocab_a.size, 0.36 / (vocab_a.size - 2))
        da[vocab_a.id_for((" " + wrong_outlier[w]).encode())] = 0.34
        da[vocab_a.id_for((" " + correct[w]).encode())] = 0.30
        da /= da.sum()
        table_a[tuple(tok_a.encode(prompt))] = da
        db = np.full(vocab_b.size, 0.20 / (vocab_b.size - 1))
        db[vocab_b.id_for((" " + correct[w]).encode())] = 0.80
        db /= db.sum()
        table_b[tuple(tok_b.encode(prompt))] = db
        items.append(EvalItem(kind="em", prompt=prompt, answer=correct[w]))
    model_a = TableModel(
        vocab_a,
        table=table_a,
        default=[1.0 / vocab_a.size] * vocab_a.size,
        name="wide",
        embeddings=emb_a,
    )
    model_b = TableModel(
        vocab_b,
        table=table_b,
        default=[1.0 / vocab_b.size] * vocab_b.size,
        name="narrow",
        embeddings=emb_b,
    )
    return ToyWorld(
        backends=[model_a, model_b],
        dev=items,
        test=items,
        stop_surfaces=(),
        max_tokens=1,
    )


def copy_world(seed: int = 0) -> ToyWorld:
    """Tiny two-model world on a repetition task, for pinned decode traces.

    One model sees single characters only; the other owns a merged " ab"
    piece, so the two segment the same text differently while agreeing on
    what comes next.
    """
    text = ("".join([" ab"] * 8) + " .\n") * 30
    vocab_fine = Vocabulary.from_raw(
        ["a", "b", " ", "."], "plain", name="fine"
    )
    vocab_coarse = Vocabulary.from_raw(
        ["a", "b", " ", ".", " ab"], "plain", name="coarse"
    )
    fine = ngram_from_text(
        vocab_fine, text, order=4, delta=0.05, name="fine", dim=4, window=2
    )
    coarse = ngram_from_text(
        vocab_coarse, text, order=3, delta=0.05, name="coarse", dim=4, window=2
    )
    return ToyWorld(
        backends=[fine, coarse],
        dev=[],
        test=[],
        stop_surfaces=(),
        max_tokens=12,
        corpora={"fine": text, "coarse": text},
    )


def write_workspace(out_dir: str | Path, seed: int = 0) -> Path:
    """Materialize the standard world as files plus a run config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = standard_world(seed=seed)
    model_entries = []
    for backend in world.backends:
        name = backend.name
        save_vocabulary(backend.vocabulary, out / f"{name}.vocab.jsonl")
        save_embeddings(backend.embeddings, out / f"{name}.emb.dpe")
        (out / f"{name}.corpus.txt").write_text(
            world.corpora[name], encoding="utf-8"
        )
        model_entries.append(
            {
                "name": name,
                "vocabulary": f"{name}.vocab.jsonl",
                "embeddings": f"{name}.emb.dpe",
                "backend": {
                    "kind": "ngram",
                    "corpus": f"{name}.corpus.txt",
                    "order": 3,
                    "delta": 0.1,
                },
            }
        )
    save_dataset(world.dev, out / "dev.jsonl")
    save_dataset(world.test, out / "test.jsonl")
    config = {
        "seed": seed,
        "models": model_entries,
        "anchors": "full",
        "fusion": {"eta": 0.1, "steps": 5, "main": "auto", "weights": None},
        "decode": {
            "max_tokens": world.max_tokens,
            "stop_surfaces": list(world.stop_surfaces),
        },
        "datasets": {"dev": "dev.jsonl", "test": "test.jsonl"},
        "output_dir": "reports",
    }
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    return out / "config.json"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python3 -m relfuse.toykit",
        description="Write a self-contained demo workspace.",
    )
    parser.add_argument("out_dir", help="directory to create the workspace in")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    config_path = write_workspace(args.out_dir, seed=args.seed)
    print(f"workspace ready: {config_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic bilingual corpora, a closed whitespace vocabulary, and readers for
CoNLL column files and label<TAB>text document files.

Both synthetic languages share one concept inventory. Language A writes
concept ``i`` as ``a{i}``, language B as ``b{i}``; anchor concepts are written
``s{i}`` in both. A document in B is always a translation of a document
sampled from A's distribution: concept-wise substitution followed by a bounded
local reordering.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

PAD, UNK = "<pad>", "<unk>"
SOURCE_LANG, TARGET_LANG = 1, 0
ENTITY_TYPES = ("PER", "LOC", "ORG", "MISC")
TAGS = ("O",) + tuple(f"{p}-{t}" for t in ENTITY_TYPES for p in ("B", "I"))
MLDOC_LABELS = ("CCAT", "ECAT", "GCAT", "MCAT")


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class LabeledDoc:
    doc_id: str
    tokens: tuple[str, ...]
    label: int | None
    lang: int


@dataclass(frozen=True)
class TaggedSentence:
    doc_id: str
    tokens: tuple[str, ...]
    tags: tuple[str, ...] | None
    lang: int
    repaired: bool = False


@dataclass(frozen=True)
class ParallelPair:
    pair_id: str
    source: LabeledDoc | TaggedSentence
    target: LabeledDoc | TaggedSentence

    @property
    def label(self):
        if isinstance(self.source, LabeledDoc):
            return self.source.label
        return self.source.tags


class Vocab:
    """Closed token->id map; id 0 is padding, id 1 is the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def dumps(self) -> str:
        return "\n".join(self.itos) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if lines[:2] != [PAD, UNK]:
            raise CorpusError("vocab file must start with the pad and unknown tokens")
        return cls(lines[2:])


def tokenize(text: str) -> list[str]:
    return text.split()


# ---------------------------------------------------------------- spec


@dataclass(frozen=True)
class CorpusSpec:
    num_classes: int = 4
    vocab_size: int = 400
    anchor_fraction: float = 0.2
    keyword_rate: float = 0.3
    keywords_per_class: int = 20
    min_len: int = 16
    max_len: int = 32
    entity_density: float = 0.2
    entity_pool_size: int = 20
    local_shuffle_window: int = 2
    n_train: int = 1000
    n_dev: int = 200
    n_unlabeled: int = 1000
    n_test: int = 400
    n_pairs: int = 200
    seed: int = 0

    def validate(self, task: str = "classification"):
        if self.num_classes < 2:
            raise CorpusError("num_classes must be >= 2")
        if not 0.0 <= self.anchor_fraction <= 1.0:
            raise CorpusError("anchor_fraction must lie in [0, 1]")
        if not 0.0 <= self.keyword_rate <= 1.0:
            raise CorpusError("keyword_rate must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.local_shuffle_window < 0:
            raise CorpusError("local_shuffle_window must be >= 0")
        if task == "classification":
            if self.keywords_per_class < 1 or self.num_classes * self.keywords_per_class >= self.vocab_size:
                raise CorpusError(
                    f"vocab_size {self.vocab_size} too small for {self.num_classes} keyword pools "
                    f"of {self.keywords_per_class}"
                )
            for n in ("n_train", "n_dev", "n_test"):
                if getattr(self, n) % self.num_classes:
                    raise CorpusError(f"{n}={getattr(self, n)} is not a multiple of num_classes")
        elif task == "ner":
            if self.entity_pool_size < 2 or len(ENTITY_TYPES) * self.entity_pool_size >= self.vocab_size:
                raise CorpusError(f"vocab_size {self.vocab_size} too small for entity pools")
            if not 0.0 <= self.entity_density < 1.0:
                raise CorpusError("entity_density must lie in [0, 1)")
            for L in range(self.min_len, self.max_len + 1):
                n = round(self.entity_density * L)
                if n and n + math.ceil(n / 3) - 1 > L:
                    raise CorpusError(
                        f"entity_density {self.entity_density} cannot fit separated spans in length {L}"
                    )
        else:
            raise CorpusError(f"unknown task {task!r}")


# ---------------------------------------------------------------- lexicon


@dataclass
class Lexicon:
    """Concept inventory with pools, anchors and the A->B surface mapping."""

    size: int
    anchors: frozenset[int]
    pools: list[np.ndarray]
    filler: np.ndarray

    def surface(self, concept: int, lang: int) -> str:
        if concept in self.anchors:
            return f"s{concept}"
        return f"a{concept}" if lang == SOURCE_LANG else f"b{concept}"

    def mapping(self) -> dict[str, str]:
        """Source-language token -> target-language token (anchors fixed)."""
        return {self.surface(c, SOURCE_LANG): self.surface(c, TARGET_LANG) for c in range(self.size)}

    def vocab(self) -> Vocab:
        v = Vocab(self.surface(c, SOURCE_LANG) for c in range(self.size))
        for c in range(self.size):
            v.add(self.surface(c, TARGET_LANG))
        return v


def build_lexicon(spec: CorpusSpec, pool_count: int, pool_size: int, rng: np.random.Generator) -> Lexicon:
    order = rng.permutation(spec.vocab_size)
    pools = [np.sort(order[i * pool_size:(i + 1) * pool_size]) for i in range(pool_count)]
    filler = np.sort(order[pool_count * pool_size:])
    anchors: set[int] = set()
    # stratified so every pool keeps its share of shared tokens
    for group in pools + [filler]:
        k = int(round(spec.anchor_fraction * len(group)))
        anchors.update(int(c) for c in rng.choice(group, size=k, replace=False))
    return Lexicon(spec.vocab_size, frozenset(anchors), pools, filler)


# ---------------------------------------------------------------- translation


def local_shuffle(units: Sequence, window: int, rng: np.random.Generator) -> list:
    """Reorder so every unit moves at most ``window`` positions.

    Sorting on ``index + U[0, window + 1)`` bounds each displacement by
    ``window``; ties are impossible almost surely and broken stably anyway.
    """
    if window == 0 or len(units) < 2:
        return list(units)
    keys = np.arange(len(units)) + rng.uniform(0.0, window + 1, size=len(units))
    return [units[i] for i in np.argsort(keys, kind="stable")]


def _map_tokens(tokens: Sequence[str], mapping: dict[str, str]) -> list[str]:
    out = []
    for t in tokens:
        if t not in mapping:
            raise CorpusError(f"token {t!r} outside the translation mapping")
        out.append(mapping[t])
    return out


def translate(doc, mapping: dict[str, str], window: int, seed: int = 0, doc_id: str | None = None):
    """Token-wise substitution into language B, then a bounded local shuffle.

    For tagged sentences each entity span moves as one unit, so tags travel
    with their tokens and spans stay contiguous.
    """
    rng = np.random.default_rng(seed)
    new_id = doc_id or doc.doc_id
    mapped = _map_tokens(doc.tokens, mapping)
    if isinstance(doc, TaggedSentence):
        if doc.tags is None:
            units = [[(t, None)] for t in mapped]
        else:
            units = [[(mapped[s], doc.tags[s]) for s in range(a, b + 1)] for a, b in _units(doc.tags)]
        flat = [x for u in local_shuffle(units, window, rng) for x in u]
        tags = None if doc.tags is None else tuple(t for _, t in flat)
        return TaggedSentence(new_id, tuple(t for t, _ in flat), tags, TARGET_LANG)
    return LabeledDoc(new_id, tuple(local_shuffle(mapped, window, rng)), doc.label, TARGET_LANG)


def _units(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Split a BIO sequence into shuffle units: single O tokens and whole spans."""
    units, i = [], 0
    while i < len(tags):
        j = i
        if tags[i] != "O":
            kind = tags[i][2:]
            while j + 1 < len(tags) and tags[j + 1] == f"I-{kind}":
                j += 1
        units.append((i, j))
        i = j + 1
    return units


# ---------------------------------------------------------------- generation


@dataclass
class Corpus:
    task: str
    spec: CorpusSpec
    vocab: Vocab
    label_names: tuple[str, ...]
    train: list
    dev: list
    unlabeled: list
    test: list
    pairs: list[ParallelPair]
    mapping: dict[str, str] = field(default_factory=dict)

    SPLITS = ("train", "dev", "unlabeled", "test", "pairs")


def _class_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(k), n // k))


def _sample_doc(lex: Lexicon, spec: CorpusSpec, label: int, rng: np.random.Generator) -> list[int]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    is_kw = rng.random(length) < spec.keyword_rate
    kw = rng.choice(lex.pools[label], size=length)
    fill = rng.choice(lex.filler, size=length)
    return [int(c) for c in np.where(is_kw, kw, fill)]


def _child_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def gen_classification_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate("classification")
    K = spec.num_classes
    lex = build_lexicon(spec, K, spec.keywords_per_class, _child_rng(spec.seed, 0))
    mapping = lex.mapping()
    rng = _child_rng(spec.seed, 1)
    win = spec.local_shuffle_window

    def source_docs(prefix, n, balanced=True):
        labels = _class_labels(n, K, rng) if balanced else rng.integers(0, K, size=n)
        docs = []
        for i, y in enumerate(labels):
            concepts = _sample_doc(lex, spec, int(y), rng)
            toks = tuple(lex.surface(c, SOURCE_LANG) for c in concepts)
            docs.append(LabeledDoc(f"{prefix}-{i:05d}", toks, int(y), SOURCE_LANG))
        return docs

    train = source_docs("train", spec.n_train)
    dev = source_docs("dev", spec.n_dev)
    held_unl = source_docs("unlabeled", spec.n_unlabeled, balanced=spec.n_unlabeled % K == 0)
    held_test = source_docs("test", spec.n_test)
    pair_src = source_docs("pair", spec.n_pairs, balanced=spec.n_pairs % K == 0)

    def tr(doc, stream):
        return translate(doc, mapping, win, seed=int(_child_rng(spec.seed, 2, stream).integers(2**63)))

    unlabeled = [replace(tr(d, i), label=None) for i, d in enumerate(held_unl)]
    test = [tr(d, 10**6 + i) for i, d in enumerate(held_test)]
    pairs = [ParallelPair(d.doc_id, d, tr(d, 2 * 10**6 + i)) for i, d in enumerate(pair_src)]
    names = MLDOC_LABELS if K == 4 else tuple(f"C{i}" for i in range(K))
    return Corpus("classification", spec, lex.vocab(), names, train, dev, unlabeled, test, pairs, mapping)


def _sample_sentence(lex: Lexicon, spec: CorpusSpec, rng: np.random.Generator) -> tuple[list[int], list[str]]:
    L = int(rng.integers(spec.min_len, spec.max_len + 1))
    n_ent = int(round(spec.entity_density * L))
    if n_ent == 0:
        return [int(c) for c in rng.choice(lex.filler, size=L)], ["O"] * L
    k = int(rng.integers(math.ceil(n_ent / 3), min(n_ent, L - n_ent + 1) + 1))
    lengths = np.ones(k, dtype=int)
    for _ in range(n_ent - k):
        open_ = np.flatnonzero(lengths < 3)
        lengths[rng.choice(open_)] += 1
    # O tokens: k-1 mandatory separators, the rest spread over k+1 gaps
    spare = L - n_ent - (k - 1)
    gaps = np.bincount(rng.integers(0, k + 1, size=spare), minlength=k + 1)
    gaps[1:k] += 1
    concepts, tags = [], []
    for g in range(k + 1):
        concepts.extend(int(c) for c in rng.choice(lex.filler, size=gaps[g]))
        tags.extend(["O"] * gaps[g])
        if g < k:
            t = int(rng.integers(len(ENTITY_TYPES)))
            kind = ENTITY_TYPES[t]
            # first half of a type pool opens spans, second half continues them
            half = len(lex.pools[t]) // 2
            concepts.append(int(rng.choice(lex.pools[t][:half])))
            concepts.extend(int(c) for c in rng.choice(lex.pools[t][half:], size=lengths[g] - 1))
            tags.extend([f"B-{kind}"] + [f"I-{kind}"] * (lengths[g] - 1))
    return concepts, tags


def gen_ner_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate("ner")
    lex = build_lexicon(spec, len(ENTITY_TYPES), spec.entity_pool_size, _child_rng(spec.seed, 0))
    mapping = lex.mapping()
    rng = _child_rng(spec.seed, 1)
    win = spec.local_shuffle_window

    def source_sents(prefix, n):
        out = []
        for i in range(n):
            concepts, tags = _sample_sentence(lex, spec, rng)
            toks = tuple(lex.surface(c, SOURCE_LANG) for c in concepts)
            out.append(TaggedSentence(f"{prefix}-{i:05d}", toks, tuple(tags), SOURCE_LANG))
        return out

    train = source_sents("train", spec.n_train)
    dev = source_sents("dev", spec.n_dev)
    held_unl = source_sents("unlabeled", spec.n_unlabeled)
    held_test = source_sents("test", spec.n_test)
    pair_src = source_sents("pair", spec.n_pairs)

    def tr(doc, stream):
        return translate(doc, mapping, win, seed=int(_child_rng(spec.seed, 2, stream).integers(2**63)))

    unlabeled = [replace(tr(d, i), tags=None) for i, d in enumerate(held_unl)]
    test = [tr(d, 10**6 + i) for i, d in enumerate(held_test)]
    pairs = [ParallelPair(d.doc_id, d, tr(d, 2 * 10**6 + i)) for i, d in enumerate(pair_src)]
    return Corpus("ner", spec, lex.vocab(), TAGS, train, dev, unlabeled, test, pairs, mapping)


def generate(task: str, spec: CorpusSpec) -> Corpus:
    if task == "classification":
        return gen_classification_corpus(spec)
    if task == "ner":
        return gen_ner_corpus(spec)
    raise CorpusError(f"unknown task {task!r}")


# ---------------------------------------------------------------- serialization
#
# Split files hold one record per line, four tab-separated fields:
#   id <TAB> lang <TAB> labels <TAB> tokens
# lang is 1 (source) or 0 (target). labels is a class name for documents, a
# space-joined tag sequence for sentences, or "-" when withheld. tokens are
# space-joined. Pair files hold:
#   id <TAB> source labels <TAB> target labels <TAB> source tokens <TAB> target tokens


def _label_field(doc, label_names) -> str:
    if isinstance(doc, TaggedSentence):
        return "-" if doc.tags is None else " ".join(doc.tags)
    return "-" if doc.label is None else label_names[doc.label]


def write_records(fh: TextIO, docs: Iterable, label_names: Sequence[str]):
    for d in docs:
        fh.write(f"{d.doc_id}\t{d.lang}\t{_label_field(d, label_names)}\t{' '.join(d.tokens)}\n")


def write_pairs(fh: TextIO, pairs: Iterable[ParallelPair], label_names: Sequence[str]):
    for p in pairs:
        fh.write(
            f"{p.pair_id}\t{_label_field(p.source, label_names)}\t{_label_field(p.target, label_names)}"
            f"\t{' '.join(p.source.tokens)}\t{' '.join(p.target.tokens)}\n"
        )


def _make_record(task, doc_id, lang, labels, tokens, label_names, lineno):
    toks = tuple(tokens.split())
    if task == "ner":
        tags = None if labels == "-" else tuple(labels.split())
        if tags is not None and len(tags) != len(toks):
            raise CorpusError(f"line {lineno}: {len(tags)} tags for {len(toks)} tokens")
        return TaggedSentence(doc_id, toks, tags, lang)
    if labels == "-":
        return LabeledDoc(doc_id, toks, None, lang)
    if labels not in label_names:
        raise CorpusError(f"line {lineno}: unknown label {labels!r}")
    return LabeledDoc(doc_id, toks, label_names.index(labels), lang)


def read_records(fh: TextIO, task: str, label_names: Sequence[str]) -> list:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        doc_id, lang, labels, tokens = parts
        out.append(_make_record(task, doc_id, int(lang), labels, tokens, list(label_names), lineno))
    return out


def read_pairs(fh: TextIO, task: str, label_names: Sequence[str]) -> list[ParallelPair]:
    out = []
    for lineno, line in enumerate(fh, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise CorpusError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        pid, src_lab, tgt_lab, src_tok, tgt_tok = parts
        names = list(label_names)
        src = _make_record(task, pid, SOURCE_LANG, src_lab, src_tok, names, lineno)
        tgt = _make_record(task, pid, TARGET_LANG, tgt_lab, tgt_tok, names, lineno)
        out.append(ParallelPair(pid, src, tgt))
    return out


def corpus_files(corpus: Corpus) -> dict[str, str]:
    """Render every split (plus the vocabulary) to file contents."""
    files = {}
    for split in ("train", "dev", "unlabeled", "test"):
        buf = io.StringIO()
        write_records(buf, getattr(corpus, split), corpus.label_names)
        files[f"{split}.tsv"] = buf.getvalue()
    buf = io.StringIO()
    write_pairs(buf, corpus.pairs, corpus.label_names)
    files["pairs.tsv"] = buf.getvalue()
    files["vocab.txt"] = corpus.vocab.dumps()
    return files


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def spec_dict(spec: CorpusSpec) -> dict:
    return asdict(spec)


# ---------------------------------------------------------------- real-data readers


def repair_bio(tags: Sequence[str]) -> tuple[list[str], bool]:
    """Turn every orphan ``I-X`` (after O, another type, or at the start) into ``B-X``."""
    out, changed, prev = [], False, "O"
    for t in tags:
        if t.startswith("I-") and prev[2:] != t[2:]:
            t = "B-" + t[2:]
            changed = True
        out.append(t)
        prev = t
    return out, changed


def is_valid_bio(tags: Sequence[str]) -> bool:
    return repair_bio(tags)[1] is False


def parse_conll(stream: Iterable[str], lang: int = SOURCE_LANG) -> list[TaggedSentence]:
    """Read CoNLL column format: token first, BIO tag last, blank line between
    sentences. ``-DOCSTART-`` lines are skipped."""
    sentences: list[TaggedSentence] = []
    toks: list[str] = []
    tags: list[str] = []

    def flush():
        if toks:
            fixed, changed = repair_bio(tags)
            sentences.append(TaggedSentence(f"sent-{len(sentences):05d}", tuple(toks), tuple(fixed), lang, changed))
            toks.clear()
            tags.clear()

    for lineno, line in enumerate(stream, 1):
        cols = line.split()
        if not cols:
            flush()
            continue
        if cols[0] == "-DOCSTART-":
            flush()
            continue
        if len(cols) < 2:
            raise CorpusError(f"line {lineno}: expected at least 2 columns, got {len(cols)}")
        tag = cols[-1]
        if tag != "O" and not (tag[:2] in ("B-", "I-") and len(tag) > 2):
            raise CorpusError(f"line {lineno}: {tag!r} is not a BIO tag")
        toks.append(cols[0])
        tags.append(tag)
    flush()
    return sentences


def parse_mldoc_tsv(
    stream: Iterable[str],
    label_set: Sequence[str] = MLDOC_LABELS,
    vocab: Vocab | None = None,
    lang: int = SOURCE_LANG,
) -> list[LabeledDoc]:
    """Read ``label<TAB>text`` lines. With a vocabulary, out-of-vocabulary
    tokens are replaced by the unknown token."""
    docs = []
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"line {lineno}: no tab between label and text")
        label, text = line.split("\t", 1)
        if label not in label_set:
            raise CorpusError(f"line {lineno}: unknown label {label!r}")
        toks = tokenize(text)
        if vocab is not None:
            toks = [t if t in vocab else UNK for t in toks]
        docs.append(LabeledDoc(f"doc-{lineno:05d}", tuple(toks), list(label_set).index(label), lang))
    return docs


def iter_tokens(docs: Iterable) -> Iterator[str]:
    for d in docs:
        yield from d.tokens

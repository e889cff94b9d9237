"""Language-adversarial fine-tuning.

Each cycle applies three sequential Adam updates, in this order:

* task step on the encoder plus the task head, from labeled source batches;
* discriminator step on ``{w_D, b_D}`` only, from fresh unlabeled source and
  target batches;
* generator step on the encoder only, using the label-flipped discriminator
  loss on another fresh pair of batches.

Every (loss, parameter) pair owns its own Adam moments, so the encoder keeps
separate moments for the task and generator steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Parameter, Tensor
from .corpus import SOURCE_LANG, TARGET_LANG, TAGS, Corpus, LabeledDoc, TaggedSentence, Vocab
from .encoder import EncoderConfig, EncoderParameters, TokenBatch, encode, mean_pool
from .evaluation import accuracy, corpus_span_f1

log = logging.getLogger(__name__)

# reference rates for document classification: task 2e-6, generator 2e-8, discriminator 5e-5
GEN_RATIO = 0.01
DISC_RATIO = 25.0


class TrainingDiverged(ArithmeticError):
    def __init__(self, step: int, loss: str, run: int | None = None):
        where = f"run {run}, " if run is not None else ""
        super().__init__(f"{where}cycle {step}: {loss} loss is not finite")
        self.step = step
        self.loss = loss
        self.run = run


@dataclass
class TrainerConfig:
    lr_task: float = 5e-4
    lr_gen: float | None = None
    lr_disc: float | None = None
    batch_size: int = 32
    total_cycles: int = 300
    eval_every: int = 15
    adversarial: bool = True
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr_gen is None:
            self.lr_gen = self.lr_task * GEN_RATIO
        if self.lr_disc is None:
            self.lr_disc = self.lr_task * DISC_RATIO
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_cycles < 1 or self.eval_every < 1:
            raise ValueError("total_cycles and eval_every must be >= 1")
        if self.lr_task <= 0:
            raise ValueError("lr_task must be positive")
        if self.adversarial and (self.lr_gen < 0 or self.lr_disc <= 0):
            raise ValueError("adversarial training needs lr_disc > 0 and lr_gen >= 0")


# ---------------------------------------------------------------- model


class AdversarialModel:
    """Encoder, task head and language discriminator for one task."""

    def __init__(self, task: str, vocab: Vocab, encoder: EncoderParameters, head: obj.TaskHead, disc: obj.Discriminator):
        if task not in ("classification", "ner"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.vocab = vocab
        self.encoder = encoder
        self.head = head
        self.disc = disc

    @classmethod
    def init(cls, task: str, vocab: Vocab, num_labels: int, config: EncoderConfig) -> "AdversarialModel":
        if config.vocab_size != len(vocab):
            raise ValueError(f"encoder vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        rng = np.random.default_rng(config.seed)
        enc = EncoderParameters.init(config, rng)
        return cls(task, vocab, enc, obj.TaskHead.init(num_labels, config.hidden, rng), obj.Discriminator.init(config.hidden, rng))

    # parameter subsets
    @property
    def theta(self) -> list[Parameter]:
        return list(self.encoder)

    def subset(self, name: str) -> list[Parameter]:
        if name == "task":
            return self.theta + self.head.parameters
        if name == "discriminator":
            return self.disc.parameters
        if name == "generator":
            return self.theta
        raise KeyError(name)

    @property
    def parameters(self) -> list[Parameter]:
        return self.theta + self.head.parameters + self.disc.parameters

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters}

    def load(self, arrays: dict[str, np.ndarray]):
        for p in self.parameters:
            if p.name not in arrays:
                raise KeyError(f"missing tensor {p.name!r}")
            if arrays[p.name].shape != p.shape:
                raise ValueError(f"tensor {p.name!r}: shape {arrays[p.name].shape} != {p.shape}")
            p.data[...] = arrays[p.name]

    # forward helpers
    def batch(self, docs: Sequence) -> TokenBatch:
        L = self.encoder.config.max_len
        return TokenBatch.from_sequences([self.vocab.encode(d.tokens[:L]) for d in docs])

    def pooled(self, docs: Sequence) -> Tensor:
        b = self.batch(docs)
        return mean_pool(encode(self.encoder, b), b.mask)

    def embed(self, docs: Sequence, chunk: int = 128) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate([self.pooled(docs[i:i + chunk]).data for i in range(0, len(docs), chunk)])

    def task_loss(self, docs: Sequence, reduction: str = "mean") -> Tensor:
        b = self.batch(docs)
        states = encode(self.encoder, b)
        if self.task == "classification":
            pred = obj.classify_doc(self.head, mean_pool(states, b.mask))
            return obj.task_loss_doc(pred, [d.label for d in docs], reduction)
        L = self.encoder.config.max_len
        labels = [[TAGS.index(t) for t in d.tags[:L]] for d in docs]
        return obj.task_loss_seq(states, self.head, labels, b.mask, reduction)

    def predict(self, docs: Sequence, chunk: int = 128) -> list:
        out: list = []
        L = self.encoder.config.max_len
        with ad.no_grad():
            for i in range(0, len(docs), chunk):
                part = docs[i:i + chunk]
                b = self.batch(part)
                states = encode(self.encoder, b)
                if self.task == "classification":
                    out.extend(int(k) for k in self.head.logits(mean_pool(states, b.mask)).data.argmax(-1))
                else:
                    best = self.head.logits(states).data.argmax(-1)
                    for row, d in enumerate(part):
                        tags = [TAGS[k] for k in best[row, : min(len(d.tokens), L)]]
                        out.append(tags)
        return out

    def metric(self, docs: Sequence) -> float:
        """Accuracy for classification, micro span F1 for tagging."""
        preds = self.predict(docs)
        if self.task == "classification":
            return accuracy(preds, [d.label for d in docs])
        L = self.encoder.config.max_len
        return corpus_span_f1(preds, [list(d.tags[:L]) for d in docs])[2]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """Moments for one loss, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, subset: Sequence[Parameter], lr: float) -> None:
    """One bias-corrected Adam update of ``subset``, then zero its gradients."""
    for p in subset:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p in subset:
        g = p.grad
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------- data


class DataIterator:
    """Endless batches over ``docs``, reshuffled every epoch."""

    def __init__(self, docs: Sequence, batch_size: int, rng: np.random.Generator):
        if not docs:
            raise ValueError("cannot iterate over an empty corpus split")
        self.docs = list(docs)
        self.batch_size = batch_size
        self.rng = rng
        self._order: list[int] = []

    def __iter__(self):
        return self

    def __next__(self) -> list:
        batch = []
        while len(batch) < self.batch_size:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.docs)))
            batch.append(self.docs[self._order.pop()])
        return batch


# ---------------------------------------------------------------- training


@dataclass
class CycleLosses:
    task: float
    disc: float | None = None
    gen: float | None = None


@dataclass
class TrainState:
    model: AdversarialModel
    config: TrainerConfig
    adam: dict[str, AdamState]
    counts: dict[str, int] = field(default_factory=lambda: {"task": 0, "discriminator": 0, "generator": 0})
    cycle: int = 0
    lr_log: list[tuple[float, float, float]] = field(default_factory=list)

    @classmethod
    def create(cls, model: AdversarialModel, config: TrainerConfig) -> "TrainState":
        adam = {k: AdamState(config.beta1, config.beta2, config.eps) for k in ("task", "discriminator", "generator")}
        return cls(model, config, adam)


def _clear(params: Sequence[Parameter]):
    for p in params:
        p.grad = None


def _checked(value: Tensor, state: TrainState, name: str) -> float:
    x = value.item()
    if not math.isfinite(x):
        raise TrainingDiverged(state.cycle, name)
    return x


def _language_probs(model: AdversarialModel, src_docs, tgt_docs, through_encoder: bool) -> tuple[Tensor, np.ndarray]:
    if through_encoder:
        pooled = ad.concat([model.pooled(src_docs), model.pooled(tgt_docs)], axis=0)
    else:
        with ad.no_grad():
            pooled = Tensor(np.concatenate([model.pooled(src_docs).data, model.pooled(tgt_docs).data]))
    lang = np.array([SOURCE_LANG] * len(src_docs) + [TARGET_LANG] * len(tgt_docs))
    return obj.discriminate(model.disc, pooled), lang


def train_cycle(state: TrainState, en_labeled: Iterator, en_text: Iterator, tgt_text: Iterator) -> CycleLosses:
    """One task, one discriminator and one generator update, in that order.

    ``en_labeled``, ``en_text`` and ``tgt_text`` yield batches; the two text
    iterators are drawn twice, giving the discriminator and generator steps
    their own fresh batches. Returned losses are the pre-update values.
    """
    model, cfg = state.model, state.config
    everything = model.parameters
    state.cycle += 1

    _clear(everything)
    loss_t = model.task_loss(next(en_labeled), reduction="mean")
    out = CycleLosses(_checked(loss_t, state, "task"))
    ad.backward(loss_t)
    adam_step(state.adam["task"], model.subset("task"), cfg.lr_task)
    state.counts["task"] += 1
    if not cfg.adversarial:
        _clear(everything)
        state.lr_log.append((cfg.lr_task, 0.0, 0.0))
        return out

    # discriminator: the encoder is a constant here
    _clear(everything)
    src, tgt = next(en_text), next(tgt_text)
    p_src, lang = _language_probs(model, src, tgt, through_encoder=False)
    loss_d = obj.discriminator_loss(p_src, lang, reduction="mean", batch_size=len(src))
    out.disc = _checked(loss_d, state, "discriminator")
    ad.backward(loss_d)
    adam_step(state.adam["discriminator"], model.subset("discriminator"), cfg.lr_disc)
    state.counts["discriminator"] += 1

    _clear(everything)
    src, tgt = next(en_text), next(tgt_text)
    p_src, lang = _language_probs(model, src, tgt, through_encoder=True)
    loss_g = obj.generator_loss(p_src, lang, reduction="mean", batch_size=len(src))
    out.gen = _checked(loss_g, state, "generator")
    ad.backward(loss_g)
    adam_step(state.adam["generator"], model.subset("generator"), cfg.lr_gen)
    state.counts["generator"] += 1
    _clear(everything)
    state.lr_log.append((cfg.lr_task, cfg.lr_disc, cfg.lr_gen))
    return out


@dataclass
class Checkpoint:
    step: int
    task_loss: float
    disc_loss: float | None
    gen_loss: float | None
    src_dev: float
    tgt_test: float


METRIC_COLUMNS = ("step", "task_loss", "disc_loss", "gen_loss", "src_dev", "tgt_test")


@dataclass
class RunResult:
    config: dict
    checkpoints: list[Checkpoint]
    best: Checkpoint
    final: Checkpoint
    counts: dict[str, int]
    best_params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def metrics_tsv(self) -> str:
        def cell(x):
            if x is None:
                return "-"
            if isinstance(x, int):
                return str(x)
            return repr(float(x))

        lines = ["\t".join(METRIC_COLUMNS)]
        for c in self.checkpoints:
            lines.append("\t".join(cell(getattr(c, k)) for k in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict[str, float]:
        return {"src_dev": self.best.src_dev, "tgt_test": self.best.tgt_test, "best_step": float(self.best.step)}


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


def train(config: TrainerConfig, corpus: Corpus, model: AdversarialModel) -> RunResult:
    """Run ``total_cycles`` cycles, evaluating every ``eval_every``.

    The reported checkpoint is the one with the best source-language dev
    metric (ties go to the later checkpoint); target-language test scores
    are recorded but never used for selection.
    """
    for split in ("train", "dev", "test"):
        if not getattr(corpus, split):
            raise ValueError(f"corpus split {split!r} is empty")
    if config.adversarial and not corpus.unlabeled:
        raise ValueError("adversarial training needs unlabeled target-language text")
    ss = np.random.SeedSequence([config.seed, 7])
    r_lab, r_src, r_tgt = (np.random.default_rng(s) for s in ss.spawn(3))
    en_labeled = DataIterator(corpus.train, config.batch_size, r_lab)
    en_text = DataIterator(corpus.train, config.batch_size, r_src)
    tgt_text = DataIterator(corpus.unlabeled or corpus.train, config.batch_size, r_tgt)

    state = TrainState.create(model, config)
    checkpoints: list[Checkpoint] = []
    best: Checkpoint | None = None
    best_params: dict[str, np.ndarray] = {}
    window: list[CycleLosses] = []
    for _ in range(config.total_cycles):
        window.append(train_cycle(state, en_labeled, en_text, tgt_text))
        if state.cycle % config.eval_every == 0 or state.cycle == config.total_cycles:
            ck = Checkpoint(
                state.cycle,
                _mean(w.task for w in window),
                _mean(w.disc for w in window),
                _mean(w.gen for w in window),
                model.metric(corpus.dev),
                model.metric(corpus.test),
            )
            window = []
            checkpoints.append(ck)
            log.info("cycle %d  L_T %.4f  dev %.4f  test %.4f", ck.step, ck.task_loss, ck.src_dev, ck.tgt_test)
            if best is None or ck.src_dev >= best.src_dev:
                best = ck
                best_params = model.snapshot()
    return RunResult(asdict(config), checkpoints, best, checkpoints[-1], dict(state.counts), best_params)

"""Config-driven experiment runner.

One INI file drives every subcommand::

    [experiment]
    task = classification        ; or ner
    runs = 4
    seed = 0
    output_dir = out
    source_name = A
    target_name = B

    [corpus]                     ; CorpusSpec fields
    [encoder]                    ; EncoderConfig fields except vocab_size and seed
    [trainer]                    ; TrainerConfig fields except adversarial and seed

Missing keys take the library defaults. ``LANGADV_OUTPUT_DIR`` overrides
``output_dir``. Layout under the output directory::

    corpus/{train,dev,unlabeled,test,pairs}.tsv, vocab.txt, manifest.json
    runs/{baseline,adversarial}/run{i}/{metrics.tsv,model.ckpt}
    runs/{baseline,adversarial}/{averaged.tsv,curve.tsv}
    reports/{transfer.tsv,curve_stats.tsv,eval.tsv,alignment.tsv,alignment_detail.tsv}
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import (
    Corpus,
    CorpusError,
    CorpusSpec,
    Vocab,
    corpus_files,
    digest,
    generate,
    read_pairs,
    read_records,
    spec_dict,
)
from .encoder import EncoderConfig, read_checkpoint, write_checkpoint
from .evaluation import (
    alignment_report,
    alignment_table,
    average_runs,
    curve_stats,
    format_table,
    transfer_table,
)
from .trainer import AdversarialModel, TrainerConfig, TrainingDiverged, train

log = logging.getLogger("langadv")

OUTPUT_ENV = "LANGADV_OUTPUT_DIR"
MODES = {False: "baseline", True: "adversarial"}
ROW_NAMES = {False: "Source labels", True: "Source labels + Adv."}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "classification"
    runs: int = 4
    seed: int = 0
    output_dir: Path = Path("out")
    source_name: str = "A"
    target_name: str = "B"
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    encoder: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.task not in ("classification", "ner"):
            raise ConfigError(f"unknown task {self.task!r}")

    @property
    def corpus_dir(self) -> Path:
        return self.output_dir / "corpus"

    @property
    def reports_dir(self) -> Path:
        return self.output_dir / "reports"

    def mode_dir(self, adversarial: bool) -> Path:
        return self.output_dir / "runs" / MODES[adversarial]

    def encoder_config(self, vocab_size: int, seed: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, seed=seed, **self.encoder)

    def trainer_config(self, adversarial: bool, seed: int) -> TrainerConfig:
        return TrainerConfig(adversarial=adversarial, seed=seed, **self.trainer)


def _coerce(cls, section: configparser.SectionProxy, skip=()) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in section.items():
        if key in skip or key not in fields:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        kind = str(fields[key].type).split("|")[0].strip()
        try:
            if raw.strip().lower() == "none" and "None" in str(fields[key].type):
                out[key] = None
            elif kind == "bool":
                out[key] = section.getboolean(key)
            elif kind == "int":
                out[key] = int(raw)
            elif kind == "float":
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return out


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path, encoding="utf-8")
    for name in cp.sections():
        if name not in ("experiment", "corpus", "encoder", "trainer"):
            raise ConfigError(f"unknown section [{name}]")
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    corpus = _coerce(CorpusSpec, cp["corpus"]) if cp.has_section("corpus") else {}
    encoder = _coerce(EncoderConfig, cp["encoder"], skip=("vocab_size", "seed")) if cp.has_section("encoder") else {}
    # absent learning rates fall back to the fixed ratios in TrainerConfig
    trainer = _coerce(TrainerConfig, cp["trainer"], skip=("adversarial", "seed")) if cp.has_section("trainer") else {}
    base = path.parent
    out = Path(os.environ.get(OUTPUT_ENV) or exp.get("output_dir", "out"))
    try:
        return ExperimentConfig(
            task=exp.get("task", "classification"),
            runs=int(exp.get("runs", 4)),
            seed=int(exp.get("seed", 0)),
            output_dir=out if out.is_absolute() else base / out,
            source_name=exp.get("source_name", "A"),
            target_name=exp.get("target_name", "B"),
            corpus=CorpusSpec(**corpus),
            encoder=encoder,
            trainer=trainer,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- file helpers


def _atomic_write(path: Path, data: str | bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    d = cfg.corpus_dir
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusError(f"no corpus manifest at {manifest_path}; run `gen` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    texts = {}
    for name, want in manifest["digests"].items():
        p = d / name
        if not p.is_file():
            raise CorpusError(f"missing corpus file {p}")
        texts[name] = p.read_text(encoding="utf-8")
        if digest(texts[name]) != want:
            raise CorpusError(f"{p} does not match its manifest digest")
    task, names = manifest["task"], tuple(manifest["label_names"])
    splits = {s: read_records(io.StringIO(texts[f"{s}.tsv"]), task, names) for s in ("train", "dev", "unlabeled", "test")}
    pairs = read_pairs(io.StringIO(texts["pairs.tsv"]), task, names)
    return Corpus(task, CorpusSpec(**manifest["spec"]), Vocab.loads(texts["vocab.txt"]), names, pairs=pairs, **splits)


def load_model(cfg: ExperimentConfig, corpus: Corpus, checkpoint: Path) -> tuple[AdversarialModel, dict]:
    with open(checkpoint, "rb") as fh:
        enc_cfg, arrays, meta = read_checkpoint(fh)
    want = cfg.encoder_config(len(corpus.vocab), enc_cfg.seed)
    if enc_cfg.hidden != want.hidden:
        raise ConfigError(f"checkpoint hidden size {enc_cfg.hidden} != config hidden size {want.hidden}")
    if enc_cfg.vocab_size != len(corpus.vocab):
        raise ConfigError(f"checkpoint vocabulary {enc_cfg.vocab_size} != corpus vocabulary {len(corpus.vocab)}")
    model = AdversarialModel.init(corpus.task, corpus.vocab, len(corpus.label_names), enc_cfg)
    model.load(arrays)
    return model, meta


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: ExperimentConfig) -> dict:
    d = cfg.corpus_dir
    # a stale manifest must never describe new files
    (d / "manifest.json").unlink(missing_ok=True)
    corpus = generate(cfg.task, cfg.corpus)
    files = corpus_files(corpus)
    for name, text in files.items():
        _atomic_write(d / name, text)
    manifest = {
        "task": cfg.task,
        "spec": spec_dict(cfg.corpus),
        "label_names": list(corpus.label_names),
        "digests": {name: digest(text) for name, text in files.items()},
    }
    _atomic_write(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote corpus to %s", d)
    return manifest


def _averaged_tsv(avg: dict) -> str:
    runs = avg["runs"]
    header = ["metric", "mean"] + [f"run{i}" for i in range(len(runs))]
    lines = ["\t".join(header)]
    for k in runs[0]:
        lines.append("\t".join([k, repr(avg[k])] + [repr(r[k]) for r in runs]))
    return "\n".join(lines) + "\n"


def _curve_tsv(results) -> str:
    steps = [c.step for c in results[0].checkpoints]
    header = ["step"] + [f"run{i}" for i in range(len(results))] + ["mean"]
    lines = ["\t".join(header)]
    for j, step in enumerate(steps):
        vals = [r.checkpoints[j].tgt_test for r in results]
        lines.append("\t".join([str(step)] + [repr(v) for v in vals] + [repr(math.fsum(vals) / len(vals))]))
    return "\n".join(lines) + "\n"


def _read_averaged(path: Path) -> dict | None:
    if not path.is_file():
        return None
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        parts = line.split("\t")
        out[parts[0]] = float(parts[1])
    return out


def _read_curve(path: Path) -> list[tuple[int, list[float]]]:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        parts = line.split("\t")
        rows.append((int(parts[0]), [float(x) for x in parts[1:-1]]))
    return rows


def write_reports(cfg: ExperimentConfig):
    """Rebuild the transfer table and curve statistics from whatever modes exist."""
    rows, stats = {}, []
    for adv in (False, True):
        d = cfg.mode_dir(adv)
        avg = _read_averaged(d / "averaged.tsv")
        if avg is None:
            continue
        rows[ROW_NAMES[adv]] = {cfg.source_name: avg["src_dev"], cfg.target_name: avg["tgt_test"]}
        curve = _read_curve(d / "curve.tsv")
        if len(curve) >= 4:
            steps = [s for s, _ in curve]
            per_run = [curve_stats(steps, [v[i] for _, v in curve]) for i in range(len(curve[0][1]))]
            stats.append(
                [MODES[adv], math.fsum(c.tail_mean for c in per_run) / len(per_run),
                 math.fsum(c.tail_std for c in per_run) / len(per_run), per_run[0].tail_count]
            )
    if rows:
        _atomic_write(cfg.reports_dir / "transfer.tsv", transfer_table(cfg.source_name, cfg.target_name, rows))
    if stats:
        _atomic_write(
            cfg.reports_dir / "curve_stats.tsv",
            format_table(["mode", "tail_mean", "tail_std", "tail_checkpoints"], stats),
        )


def cmd_train(cfg: ExperimentConfig, adversarial: bool = True) -> list:
    corpus = load_corpus(cfg)
    if corpus.task != cfg.task:
        raise ConfigError(f"corpus task {corpus.task!r} != config task {cfg.task!r}")
    mode_dir = cfg.mode_dir(adversarial)
    results = []
    for i in range(cfg.runs):
        seed = cfg.seed + i
        tcfg = cfg.trainer_config(adversarial, seed)
        model = AdversarialModel.init(
            corpus.task, corpus.vocab, len(corpus.label_names), cfg.encoder_config(len(corpus.vocab), seed)
        )
        log.info("%s run %d (seed %d)", MODES[adversarial], i, seed)
        try:
            result = train(tcfg, corpus, model)
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.step, exc.loss, run=i) from exc
        results.append(result)
        run_dir = mode_dir / f"run{i}"
        _atomic_write(run_dir / "metrics.tsv", result.metrics_tsv())
        model.load(result.best_params)
        buf = io.BytesIO()
        meta = {"task": corpus.task, "adversarial": adversarial, "run": i, "seed": seed, "step": result.best.step}
        write_checkpoint(buf, model.encoder.config, model.parameters, meta)
        _atomic_write(run_dir / "model.ckpt", buf.getvalue())
    _atomic_write(mode_dir / "averaged.tsv", _averaged_tsv(average_runs([r.summary() for r in results])))
    _atomic_write(mode_dir / "curve.tsv", _curve_tsv(results))
    write_reports(cfg)
    return results


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path) -> dict:
    corpus = load_corpus(cfg)
    model, meta = load_model(cfg, corpus, checkpoint)
    row = {"checkpoint": str(checkpoint), "src_dev": model.metric(corpus.dev), "tgt_test": model.metric(corpus.test)}
    _atomic_write(
        cfg.reports_dir / "eval.tsv",
        format_table(["checkpoint", "mode", cfg.source_name, cfg.target_name],
                     [[checkpoint, MODES[bool(meta.get("adversarial"))], row["src_dev"], row["tgt_test"]]]),
    )
    return row


def cmd_align(cfg: ExperimentConfig, checkpoints: list[Path]) -> str:
    corpus = load_corpus(cfg)
    if not corpus.pairs:
        raise CorpusError("parallel pair file is empty")
    medians: dict[bool, float] = {}
    detail = []
    pair_name = f"{cfg.source_name}-{cfg.target_name}"
    for ck in checkpoints:
        model, meta = load_model(cfg, corpus, ck)
        adv = bool(meta.get("adversarial"))
        if adv in medians:
            raise ConfigError(f"two {MODES[adv]} checkpoints given; pass at most one per mode")
        rep = alignment_report(model.embed, corpus.pairs, pair_name)
        medians[adv] = rep.median
        detail.append([ck, MODES[adv], rep.median, rep.q1, rep.q3, rep.count, rep.excluded])
    table = alignment_table(cfg.source_name, cfg.target_name, medians.get(False), medians.get(True))
    _atomic_write(cfg.reports_dir / "alignment.tsv", table)
    _atomic_write(
        cfg.reports_dir / "alignment_detail.tsv",
        format_table(["checkpoint", "mode", "median", "q1", "q3", "count", "excluded"], detail),
    )
    return table


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="langadv", description="Language-adversarial transfer experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic corpus")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train", help="train seeded runs and write metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--no-adversarial", action="store_true")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="score a checkpoint on both languages")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, type=Path)

    p = sub.add_parser("align", help="cosine alignment report for parallel pairs")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, type=Path, action="append")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "gen":
            manifest = cmd_gen(cfg)
            print(f"wrote {len(manifest['digests'])} files to {cfg.corpus_dir}")
        elif args.command == "train":
            if args.runs is not None:
                cfg = replace(cfg, runs=args.runs)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            cmd_train(cfg, adversarial=not args.no_adversarial)
            print((cfg.reports_dir / "transfer.tsv").read_text(encoding="utf-8"), end="")
        elif args.command == "eval":
            row = cmd_eval(cfg, args.checkpoint)
            print(f"{cfg.source_name}\t{row['src_dev']:.4f}\n{cfg.target_name}\t{row['tgt_test']:.4f}")
        else:
            print(cmd_align(cfg, args.checkpoint), end="")
    except (ConfigError, CorpusError, TrainingDiverged, OSError, ValueError, KeyError, configparser.Error) as exc:
        print(f"langadv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

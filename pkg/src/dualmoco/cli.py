"""Command-line entry point wiring generation, training, embedding, and
evaluation into reproducible runs.

Every command validates its configuration before touching the filesystem,
writes outputs only under the requested paths, and drops a resolved-config
JSON next to them so any run can be replayed bit-for-bit.

Exit codes: 0 success, 2 invalid arguments or config, 3 I/O failure,
4 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen, evaluation, trainer
from .encoder import EncoderParams, Pooling, encode_batch, load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    CorpusParseError,
    DualMocoError,
    EmptyCorpusError,
    NumericalFailureError,
)

logger = logging.getLogger(__name__)

PARALLEL_FILE = "parallel.tsv"
STS_FILE = "sts.tsv"
NLI_FILE = "nli.tsv"
MINING_VAL_FILE = "mining_validation.json"
MINING_TEST_FILE = "mining_test.json"
GEN_CONFIG_FILE = "gen_config.json"


def _config_from_dict(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return cls(**doc)


def _config_from_file(cls, path: str):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return _config_from_dict(cls, doc)


def _write_json(path: str | Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_resolved_config(out_dir: Path, command: str, config) -> None:
    _write_json(out_dir / f"{command.replace('-', '_')}_config.json", dataclasses.asdict(config))


@dataclass
class GenConfig:
    """Resolved parameters for one dataset directory."""

    seed: int = 0
    concepts: int = 380
    noise_tokens: int = 20
    train_pairs: int = 5000
    val_pairs: int = 500
    test_pairs: int = 1000
    len_min: int = 3
    len_max: int = 10
    noise_rate: float = 0.1
    reorder_b: str = "reverse"
    sts_pairs: int = 500
    nli_triples: int = 1200
    mining_side_a: int = 400
    mining_side_b: int = 400
    mining_parallel_fraction: float = 0.1
    out_dir: str = "data"


@dataclass
class RunConfig:
    """Resolved parameters for one training run (mirrors TrainConfig plus paths)."""

    data_dir: str = "data"
    out_dir: str = "run"
    epochs: int = 10
    batch_size: int = 64
    lr_max: float = 1e-2
    warmup_steps: int = 50
    queue_capacity: int = 1024
    temperature: float = 0.04
    momentum: float = 0.99
    grad_clip: float = 10.0
    weight_decay: float = 1e-4
    seed: int = 0
    pooling: str = "mean"
    d_emb: int = 32
    d_out: int = 32
    nli_enabled: bool = False
    nli_weight: float = 0.1
    nli_batch_size: int = 128
    nli_dropout: float = 0.1
    ablation_no_momentum: bool = False

    def to_train_config(self) -> trainer.TrainConfig:
        cfg = trainer.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_max=self.lr_max,
            warmup_steps=self.warmup_steps,
            queue_capacity=self.queue_capacity,
            temperature=self.temperature,
            momentum=self.momentum,
            grad_clip=self.grad_clip,
            weight_decay=self.weight_decay,
            seed=self.seed,
            pooling=Pooling(self.pooling),
            d_emb=self.d_emb,
            d_out=self.d_out,
            nli_weight=self.nli_weight,
            nli_batch_size=self.nli_batch_size,
            nli_dropout=self.nli_dropout,
            ablation_no_momentum=self.ablation_no_momentum,
        )
        cfg.validate()
        return cfg


def _apply_overrides(config, args: argparse.Namespace, mapping: dict[str, str]):
    for attr, field_name in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(config, field_name, value)
    return config


def _setup_logging() -> None:
    level_name = os.environ.get("DMC_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"DMC_LOG_LEVEL must be one of error, info, debug (got {level_name!r})")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def _threaded_encode(
    params: EncoderParams, batch: Sequence, pooling: Pooling, threads: int
) -> np.ndarray:
    """Chunked read-only encoding; chunk order keeps the output deterministic."""
    if threads <= 1 or len(batch) < 2 * threads:
        return encode_batch(params, batch, pooling)
    chunks = np.array_split(np.arange(len(batch)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(
            pool.map(lambda ids: encode_batch(params, [batch[i] for i in ids], pooling), chunks)
        )
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _config_from_file(GenConfig, args.config) if args.config else GenConfig()
    _apply_overrides(
        config,
        args,
        {
            "seed": "seed",
            "concepts": "concepts",
            "noise_tokens": "noise_tokens",
            "train_pairs": "train_pairs",
            "val_pairs": "val_pairs",
            "test_pairs": "test_pairs",
            "len_min": "len_min",
            "len_max": "len_max",
            "noise_rate": "noise_rate",
            "sts_pairs": "sts_pairs",
            "nli_triples": "nli_triples",
            "mining_side_a": "mining_side_a",
            "mining_side_b": "mining_side_b",
            "mining_parallel_fraction": "mining_parallel_fraction",
            "out": "out_dir",
        },
    )
    lexicon = datagen.make_lexicon(config.concepts, config.noise_tokens, seed=config.seed)
    len_range = (config.len_min, config.len_max)
    corpus = datagen.gen_parallel_corpus(
        lexicon,
        n_train=config.train_pairs,
        n_val=config.val_pairs,
        n_test=config.test_pairs,
        len_range=len_range,
        noise_rate=config.noise_rate,
        seed=config.seed + 1,
        reorder_b=config.reorder_b,
    )
    sts = datagen.gen_sts_pairs(lexicon, config.sts_pairs, seed=config.seed + 2)
    nli = datagen.gen_nli_triples(lexicon, config.nli_triples, seed=config.seed + 3)
    mining_val = datagen.gen_mining_corpus(
        lexicon,
        config.mining_side_a,
        config.mining_side_b,
        config.mining_parallel_fraction,
        seed=config.seed + 4,
        len_range=len_range,
        noise_rate=config.noise_rate,
        reorder_b=config.reorder_b,
    )
    mining_test = datagen.gen_mining_corpus(
        lexicon,
        config.mining_side_a,
        config.mining_side_b,
        config.mining_parallel_fraction,
        seed=config.seed + 5,
        len_range=len_range,
        noise_rate=config.noise_rate,
        reorder_b=config.reorder_b,
    )

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datagen.save_tsv(corpus, str(out / PARALLEL_FILE))
    datagen.save_sts_tsv(sts, str(out / STS_FILE))
    datagen.save_nli_tsv(nli, str(out / NLI_FILE))
    datagen.save_mining_json(mining_val, str(out / MINING_VAL_FILE))
    datagen.save_mining_json(mining_test, str(out / MINING_TEST_FILE))
    resolved = dataclasses.asdict(config)
    resolved["vocab_size_a"] = lexicon.vocab_size_a
    resolved["vocab_size_b"] = lexicon.vocab_size_b
    _write_json(out / GEN_CONFIG_FILE, resolved)
    logger.info("wrote dataset with %d pairs to %s", len(corpus), out)
    return 0


def _load_vocab_sizes(data_dir: Path) -> tuple[int | None, int | None]:
    path = data_dir / GEN_CONFIG_FILE
    if not path.exists():
        return None, None
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return doc.get("vocab_size_a"), doc.get("vocab_size_b")


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_file(RunConfig, args.config) if args.config else RunConfig()
    _apply_overrides(
        config,
        args,
        {
            "data": "data_dir",
            "out": "out_dir",
            "epochs": "epochs",
            "batch_size": "batch_size",
            "lr": "lr_max",
            "warmup_steps": "warmup_steps",
            "queue_size": "queue_capacity",
            "temperature": "temperature",
            "momentum": "momentum",
            "grad_clip": "grad_clip",
            "weight_decay": "weight_decay",
            "seed": "seed",
            "pooling": "pooling",
            "d_emb": "d_emb",
            "d_out": "d_out",
            "nli": "nli_enabled",
            "nli_weight": "nli_weight",
            "nli_batch_size": "nli_batch_size",
            "no_momentum": "ablation_no_momentum",
        },
    )
    train_config = config.to_train_config()

    data_dir = Path(config.data_dir)
    corpus = datagen.load_tsv(str(data_dir / PARALLEL_FILE))
    sts_path = data_dir / STS_FILE
    sts = datagen.load_sts_tsv(str(sts_path)) if sts_path.exists() else None
    nli = None
    if config.nli_enabled:
        nli = datagen.load_nli_tsv(str(data_dir / NLI_FILE))
    vocab_a, vocab_b = _load_vocab_sizes(data_dir)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.train(
        train_config, corpus, nli_data=nli, sts_pairs=sts, vocab_size_a=vocab_a, vocab_size_b=vocab_b
    )

    save_checkpoint(str(out / "checkpoint.bin"), result.params_a, result.params_b)
    steps_per_epoch = len(result.step_records) // max(1, len(result.epoch_records))
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for epoch, epoch_record in enumerate(result.epoch_records):
            for record in result.step_records[
                epoch * steps_per_epoch : (epoch + 1) * steps_per_epoch
            ]:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.write(json.dumps(epoch_record, sort_keys=True) + "\n")
    _write_resolved_config(out, "train", config)
    final = result.epoch_records[-1]
    print(
        f"trained {train_config.epochs} epochs: "
        f"acc_ab={final['retrieval_acc_ab']:.4f} acc_ba={final['retrieval_acc_ba']:.4f}"
    )
    return 0


@dataclass
class EmbedConfig:
    checkpoint: str = "run/checkpoint.bin"
    data_dir: str = "data"
    split: str = "test"
    pooling: str = "mean"
    threads: int = 1
    out_dir: str = "embeddings"


def _embed_split(config: EmbedConfig) -> tuple[Path, Path, int]:
    params_a, params_b = load_checkpoint(config.checkpoint)
    corpus = datagen.load_tsv(str(Path(config.data_dir) / PARALLEL_FILE))
    pairs = corpus.split(config.split)
    if not pairs:
        raise EmptyCorpusError(f"split {config.split!r} has no pairs")
    pooling = Pooling(config.pooling)
    embs_a = _threaded_encode(params_a, [p.tokens_a for p in pairs], pooling, config.threads)
    embs_b = _threaded_encode(params_b, [p.tokens_b for p in pairs], pooling, config.threads)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = str(Path(config.data_dir) / PARALLEL_FILE)
    path_a = out / f"{config.split}_a.emb"
    path_b = out / f"{config.split}_b.emb"
    evaluation.save_embeddings(str(path_a), embs_a, source_corpus=f"{source}#{config.split}/a")
    evaluation.save_embeddings(str(path_b), embs_b, source_corpus=f"{source}#{config.split}/b")
    return path_a, path_b, len(pairs)


def _embed_config_from_args(args: argparse.Namespace) -> EmbedConfig:
    config = _config_from_file(EmbedConfig, args.config) if args.config else EmbedConfig()
    return _apply_overrides(
        config,
        args,
        {
            "checkpoint": "checkpoint",
            "data": "data_dir",
            "split": "split",
            "pooling": "pooling",
            "threads": "threads",
            "out": "out_dir",
        },
    )


def cmd_embed(args: argparse.Namespace) -> int:
    config = _embed_config_from_args(args)
    path_a, path_b, count = _embed_split(config)
    _write_resolved_config(Path(config.out_dir), "embed", config)
    print(f"wrote {count} embeddings per side: {path_a} {path_b}")
    return 0


def cmd_dump_embeddings(args: argparse.Namespace) -> int:
    """Like embed, plus a manifest of pair concepts for external plotting."""
    config = _embed_config_from_args(args)
    path_a, path_b, count = _embed_split(config)
    corpus = datagen.load_tsv(str(Path(config.data_dir) / PARALLEL_FILE))
    pairs = corpus.split(config.split)
    manifest = {
        "split": config.split,
        "count": count,
        "embeddings_a": path_a.name,
        "embeddings_b": path_b.name,
        "concepts": [list(p.concepts) for p in pairs],
    }
    _write_json(Path(config.out_dir) / f"{config.split}_manifest.json", manifest)
    _write_resolved_config(Path(config.out_dir), "dump_embeddings", config)
    print(f"dumped {count} labelled embedding pairs to {config.out_dir}")
    return 0


@dataclass
class RetrievalConfig:
    src: str = "embeddings/test_a.emb"
    tgt: str = "embeddings/test_b.emb"
    out: str = "retrieval.json"


def cmd_eval_retrieval(args: argparse.Namespace) -> int:
    config = _config_from_dict(
        RetrievalConfig, {k: v for k, v in (("src", args.src), ("tgt", args.tgt), ("out", args.out)) if v is not None}
    )
    embs_a = evaluation.load_embeddings(config.src)
    embs_b = evaluation.load_embeddings(config.tgt)
    acc_ab, acc_ba = evaluation.retrieval_accuracy(embs_a, embs_b)
    doc = {"acc_forward": acc_ab, "acc_backward": acc_ba, "count": embs_a.shape[0]}
    _write_json(config.out, doc)
    _write_json(Path(config.out).with_suffix("").as_posix() + "_config.json", dataclasses.asdict(config))
    print(f"retrieval accuracy: forward={acc_ab:.4f} backward={acc_ba:.4f}")
    return 0


@dataclass
class MineConfig:
    checkpoint: str = "run/checkpoint.bin"
    data_dir: str = "data"
    k: int = 3
    variant: str = "distance"
    pooling: str = "mean"
    threads: int = 1
    out: str = "mining.json"


def cmd_mine(args: argparse.Namespace) -> int:
    config = _config_from_file(MineConfig, args.config) if args.config else MineConfig()
    _apply_overrides(
        config,
        args,
        {
            "checkpoint": "checkpoint",
            "data": "data_dir",
            "k": "k",
            "variant": "variant",
            "pooling": "pooling",
            "threads": "threads",
            "out": "out",
        },
    )
    if config.variant not in ("distance", "ratio"):
        raise ConfigError(f"variant must be 'distance' or 'ratio' (got {config.variant!r})")
    params_a, params_b = load_checkpoint(config.checkpoint)
    pooling = Pooling(config.pooling)
    data_dir = Path(config.data_dir)
    val = datagen.load_mining_json(str(data_dir / MINING_VAL_FILE))
    test = datagen.load_mining_json(str(data_dir / MINING_TEST_FILE))

    def embed_sides(corpus: datagen.MiningCorpus) -> tuple[np.ndarray, np.ndarray]:
        return (
            _threaded_encode(params_a, corpus.side_a, pooling, config.threads),
            _threaded_encode(params_b, corpus.side_b, pooling, config.threads),
        )

    val_a, val_b = embed_sides(val)
    val_result = evaluation.mine_bitext(val_a, val_b, k=config.k, variant=config.variant)
    lam, val_f1 = evaluation.search_threshold(val_result.scored, val.gold_pairs)

    test_a, test_b = embed_sides(test)
    test_result = evaluation.mine_bitext(
        test_a, test_b, k=config.k, variant=config.variant, threshold=lam
    )
    precision, recall, score = evaluation.f1(test_result.accepted, test.gold_pairs)
    doc = {
        "lambda": lam,
        "validation_f1": val_f1,
        "precision": precision,
        "recall": recall,
        "f1": score,
        "pairs": [list(p) for p in test_result.accepted],
    }
    _write_json(config.out, doc)
    _write_json(Path(config.out).with_suffix("").as_posix() + "_config.json", dataclasses.asdict(config))
    print(f"mining ({config.variant}): f1={score:.4f} precision={precision:.4f} recall={recall:.4f}")
    return 0


@dataclass
class StsConfig:
    checkpoint: str = "run/checkpoint.bin"
    data_dir: str = "data"
    pooling: str = "mean"
    out: str = "sts.json"


def cmd_eval_sts(args: argparse.Namespace) -> int:
    config = _config_from_file(StsConfig, args.config) if args.config else StsConfig()
    _apply_overrides(
        config,
        args,
        {"checkpoint": "checkpoint", "data": "data_dir", "pooling": "pooling", "out": "out"},
    )
    params_a, _ = load_checkpoint(config.checkpoint)
    pairs = datagen.load_sts_tsv(str(Path(config.data_dir) / STS_FILE))
    rho = evaluation.sts_eval(params_a, pairs, Pooling(config.pooling))
    _write_json(config.out, {"spearman": rho, "count": len(pairs)})
    _write_json(Path(config.out).with_suffix("").as_posix() + "_config.json", dataclasses.asdict(config))
    print(f"similarity correlation: spearman={rho:.4f} over {len(pairs)} pairs")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmoco", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic bilingual dataset directory")
    g.add_argument("--config", default=None, help="JSON file of GenConfig fields")
    g.add_argument("--out", default=None, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--concepts", type=int, default=None)
    g.add_argument("--noise-tokens", type=int, dest="noise_tokens", default=None)
    g.add_argument("--train-pairs", type=int, dest="train_pairs", default=None)
    g.add_argument("--val-pairs", type=int, dest="val_pairs", default=None)
    g.add_argument("--test-pairs", type=int, dest="test_pairs", default=None)
    g.add_argument("--len-min", type=int, dest="len_min", default=None)
    g.add_argument("--len-max", type=int, dest="len_max", default=None)
    g.add_argument("--noise-rate", type=float, dest="noise_rate", default=None)
    g.add_argument("--sts-pairs", type=int, dest="sts_pairs", default=None)
    g.add_argument("--nli-triples", type=int, dest="nli_triples", default=None)
    g.add_argument("--mining-side-a", type=int, dest="mining_side_a", default=None)
    g.add_argument("--mining-side-b", type=int, dest="mining_side_b", default=None)
    g.add_argument(
        "--mining-parallel-fraction", type=float, dest="mining_parallel_fraction", default=None
    )
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the dual towers on a dataset directory")
    t.add_argument("--config", default=None, help="JSON file of RunConfig fields")
    t.add_argument("--data", default=None, help="dataset directory from gen-data")
    t.add_argument("--out", default=None, help="run output directory")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--warmup-steps", type=int, dest="warmup_steps", default=None)
    t.add_argument("--queue-size", type=int, dest="queue_size", default=None)
    t.add_argument("--temperature", type=float, default=None)
    t.add_argument("--momentum", type=float, default=None)
    t.add_argument("--grad-clip", type=float, dest="grad_clip", default=None)
    t.add_argument("--weight-decay", type=float, dest="weight_decay", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--pooling", choices=[p.value for p in Pooling], default=None)
    t.add_argument("--d-emb", type=int, dest="d_emb", default=None)
    t.add_argument("--d-out", type=int, dest="d_out", default=None)
    t.add_argument("--nli", action="store_true", dest="nli", default=None,
                   help="enable the multitask inference head")
    t.add_argument("--nli-weight", type=float, dest="nli_weight", default=None)
    t.add_argument("--nli-batch-size", type=int, dest="nli_batch_size", default=None)
    t.add_argument("--no-momentum", action="store_true", dest="no_momentum", default=None,
                   help="share parameters between base and momentum towers")
    t.set_defaults(func=cmd_train)

    for name, func, extra_help in (
        ("embed", cmd_embed, "encode one split of the parallel corpus to binary dumps"),
        ("dump-embeddings", cmd_dump_embeddings, "embed plus a concept manifest for plotting"),
    ):
        e = sub.add_parser(name, help=extra_help)
        e.add_argument("--config", default=None)
        e.add_argument("--checkpoint", default=None)
        e.add_argument("--data", default=None)
        e.add_argument("--split", choices=list(datagen.SPLITS), default=None)
        e.add_argument("--pooling", choices=[p.value for p in Pooling], default=None)
        e.add_argument("--threads", type=int, default=None)
        e.add_argument("--out", default=None, help="output directory")
        e.set_defaults(func=func)

    r = sub.add_parser("eval-retrieval", help="rank-1 accuracy between two embedding dumps")
    r.add_argument("--src", default=None)
    r.add_argument("--tgt", default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_eval_retrieval)

    m = sub.add_parser("mine", help="margin-based mining with validation-tuned threshold")
    m.add_argument("--config", default=None)
    m.add_argument("--checkpoint", default=None)
    m.add_argument("--data", default=None)
    m.add_argument("--k", type=int, default=None)
    m.add_argument("--variant", choices=["distance", "ratio"], default=None)
    m.add_argument("--pooling", choices=[p.value for p in Pooling], default=None)
    m.add_argument("--threads", type=int, default=None)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_mine)

    s = sub.add_parser("eval-sts", help="rank correlation against gold similarity")
    s.add_argument("--config", default=None)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--pooling", choices=[p.value for p in Pooling], default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval_sts)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CorpusParseError, EmptyCorpusError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalFailureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except DualMocoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()

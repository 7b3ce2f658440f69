"""
Command Line Engine

One entry point with the subcommands `pretrain-ae`, `train`, `evaluate`,
`generate`, `analyze` and `ablate`. Every TrainConfig field is also a flag;
the effective config is defaults, then the `--config` file, then flags.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or training failure.
"""
import argparse
import difflib
import json
import logging
import re
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from src.analysis import (
    AnalysisError, confusion, distribution_kl, emit_report, length_profile, residue_distribution,
)
from src.checkpoint import CheckpointError, save_checkpoint
from src.config import PRETRAINED, RANDOM, ConfigError, TrainConfig, is_published_default
from src.contextual_ae import TransferError, ae_pretrain
from src.data_ingest import (
    BackboneRecord, CorpusError, RecordError, ResidueAlphabet, SplitError, load_splits, make_batches, parse_corpus,
)
from src.evaluation import (
    EvaluationError, evaluate_corpus, read_fasta, read_name_list, record_rows, report_from_rows, table_one,
    write_fasta,
)
from src.geometry import FrameError, GraphError, dump_features
from src.gvp_core import LayerShapeError
from src.objectives import LossError, NonFiniteLossError
from src.pipeline import (
    MissingCheckpointError, TrainingAbort, ablate, load_mmdesign, resume, run_step1, run_step2,
)
from src.utils import configure_logging, seed_everything, sha256_file, torch_generator

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (CorpusError, RecordError, SplitError, GraphError, FrameError, CheckpointError, TransferError,
               MissingCheckpointError, ConfigError, AnalysisError, OSError)
NUMERIC_ERRORS = (NonFiniteLossError, TrainingAbort, LayerShapeError, LossError, EvaluationError)

# flags with their own syntax instead of the generated one
SPECIAL_FIELDS = {"psm", "pcm", "psm_checkpoint", "pcm_checkpoint"}
ALIASES = {
    "cac_weight": ["--lambda"],
    "distill_temperature": ["--temperature"],
    "expce_reduction": ["--expce"],
}
CHOICES = {
    "expce_reduction": ["paper_sum", "stable_mean"],
    "kl_direction": ["struc_seq", "seq_struc"],
    "dtype": ["float32", "float64"],
    "optimizer": ["sgd"],
}


class UsageError(ValueError):
    """Raised for unknown subcommands, unknown flags and malformed flag values."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises instead of exiting, with a did-you-mean hint."""

    def error(self, message: str):
        raise UsageError(message + _suggestion(self, message))


def _known_words(parser: argparse.ArgumentParser) -> list[str]:
    words = []
    for action in parser._actions:
        words.extend(action.option_strings)
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                words.append(name)
                words.extend(_known_words(sub))
    return words


def _suggestion(parser: argparse.ArgumentParser, message: str) -> str:
    choice = re.search(r"invalid choice: '([^']+)'", message)
    candidates = [choice.group(1)] if choice else [w for w in message.split() if w.startswith("--")]
    known = sorted(set(_known_words(parser)))
    for word in candidates:
        match = difflib.get_close_matches(word.split("=", 1)[0], known, n=1)
        if match:
            return f" (did you mean '{match[0]}'?)"
    return ""


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration")
    for f in fields(TrainConfig):
        if f.name in SPECIAL_FIELDS:
            continue
        marker = "" if is_published_default(f.name) else " [artifact default]"
        help_text = f"{f.metadata['help']} (default: {f.default}){marker}"
        flags = [f"--{f.name.replace('_', '-')}"] + ALIASES.get(f.name, [])
        if isinstance(f.default, bool):
            group.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=help_text)
        else:
            group.add_argument(*flags, dest=f.name, type=type(f.default), choices=CHOICES.get(f.name),
                               default=argparse.SUPPRESS, help=help_text)
    group.add_argument("--psm", default=argparse.SUPPRESS, metavar="{pretrained,random,PATH}",
                       help="structural module weights (default: pretrained)")
    group.add_argument("--pcm", default=argparse.SUPPRESS, metavar="{pretrained,random,PATH}",
                       help="contextual module: pretrained runs Step 1 or loads PATH (default: pretrained)")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--corpus", action="append", required=True,
                        metavar="[LABEL=]PATH", help="line-delimited corpus; repeat with labels such as Ts50=ts50.jsonl")
    parser.add_argument("--splits", type=Path, help="JSON split file with train/validation/test names")
    parser.add_argument("--out", type=Path, default=Path("runs/latest"), help="run directory")
    parser.add_argument("--strict", action="store_true", help="fail on the first malformed corpus line")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    _add_config_flags(parser)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="mmdesign", description="Fixed-backbone protein sequence design.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = commands.add_parser("pretrain-ae", help="Step 1: pretrain the contextual autoencoder")
    _add_common(p)

    p = commands.add_parser("train", help="Steps 1 and 2: train the joint model")
    _add_common(p)
    p.add_argument("--resume", type=Path, help="resumable checkpoint (last.ckpt) to continue from")

    p = commands.add_parser("evaluate", help="perplexity and recovery report")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--single-chain", type=Path, help="file with one single-chain record name per line")
    p.add_argument("--rollout", action="store_true", help="also score left-to-right greedy designs")
    p.add_argument("--fasta", type=Path, help="write designed sequences of the first corpus")

    p = commands.add_parser("generate", help="design sequences for every record")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fasta", type=Path, help="output FASTA (default: <out>/designs.fasta)")
    p.add_argument("--logits", type=Path, help="write per-position logits as .npz")
    p.add_argument("--dump-features", type=Path, help="write featurized graphs as line-delimited JSON")

    p = commands.add_parser("analyze", help="residue distributions, KL, confusion and length profile")
    _add_common(p)
    p.add_argument("--fasta", action="append", required=True, metavar="NAME=PATH",
                   help="designed sequences of a model; repeat to compare models")
    p.add_argument("--eval-rows", action="append", default=[], metavar="NAME=CSV",
                   help="per-record evaluation table of a model, for the length profile")

    p = commands.add_parser("ablate", help="pretrained/random module matrix")
    _add_common(p)
    return parser


def _labelled(entry: str, default: str) -> tuple[str, Path]:
    if "=" in entry and not Path(entry).exists():
        label, path = entry.split("=", 1)
        return label, Path(path)
    return default, Path(entry)


def effective_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if f.name not in SPECIAL_FIELDS and hasattr(args, f.name)}
    for module in ("psm", "pcm"):
        value = getattr(args, module, None)
        if value is None:
            continue
        if value in (PRETRAINED, RANDOM):
            overrides[module] = value
        else:
            overrides[module] = PRETRAINED
            overrides[f"{module}_checkpoint"] = value
    return config.replace(**overrides)


def _write_run_config(out: Path, config: TrainConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    (out / "command.json").write_text(json.dumps({"command": command, "seed": config.seed}, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _corpora(args, config: TrainConfig, alphabet: ResidueAlphabet) -> dict[str, tuple[Path, list[BackboneRecord]]]:
    corpora = {}
    for i, entry in enumerate(args.corpus or []):
        label, path = _labelled(entry, "All" if i == 0 else f"corpus{i}")
        corpora[label] = (path, parse_corpus(path, alphabet, strict=args.strict, workers=config.workers))
    return corpora


def _splits(args, records: list[BackboneRecord]) -> dict[str, list[BackboneRecord]]:
    if args.splits:
        return load_splits(args.splits).select(records)
    logger.warning("No --splits given: every record is used for training, validation and test")
    return {"train": list(records), "validation": list(records), "test": list(records)}


def _first_corpus(args, config, alphabet) -> tuple[str, Path, list[BackboneRecord]]:
    label, (path, records) = next(iter(_corpora(args, config, alphabet).items()))
    return label, path, records


def cmd_pretrain_ae(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    _, _, records = _first_corpus(args, config, alphabet)
    splits = _splits(args, records)
    _, checkpoint, history = ae_pretrain(splits["train"], config, alphabet)
    save_checkpoint(checkpoint, args.out / "ae.ckpt")
    with open(args.out / "ae_metrics.jsonl", "w", encoding="utf-8") as handle:
        for entry in history:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")


def cmd_train(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    _, _, records = _first_corpus(args, config, alphabet)
    splits = _splits(args, records)
    if args.resume:
        result = resume(args.resume, config, splits, alphabet, args.out).fit()
    else:
        step1 = run_step1(splits, config, alphabet, args.out)
        result = run_step2(step1, splits, config, alphabet, args.out)
    logger.info("Best checkpoint: %s (step %d)", args.out / "best.ckpt", result.checkpoint.step)


def cmd_evaluate(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    model, _, _ = load_mmdesign(args.checkpoint, alphabet)
    single_chain = read_name_list(args.single_chain) if args.single_chain else None
    checkpoint_hash = sha256_file(args.checkpoint)
    reports, first_rows, texts = {}, None, []
    for i, (label, (path, records)) in enumerate(_corpora(args, config, alphabet).items()):
        if i == 0 and args.splits:
            records = load_splits(args.splits).select(records)["test"]
        metadata = {"checkpoint_sha256": checkpoint_hash, "corpus_sha256": sha256_file(path), "corpus": str(path)}
        if i == 0 and label == "All":
            found = evaluate_corpus(model, records, alphabet, single_chain, args.rollout, metadata, config.batch_size)
            rows = found["All"].rows
        else:
            rows = record_rows(model, records, alphabet, config.batch_size, rollout=args.rollout)
            found = {label: report_from_rows(rows, label, metadata)}
        if i == 0:
            first_rows = rows
        for name, report in found.items():
            reports[name] = report
            texts.append(report.to_text())
            report.rows.to_csv(args.out / f"records__{name}.csv", index=False, float_format="%.10g",
                               lineterminator="\n")
    table = table_one(reports)
    table.to_csv(args.out / "table.csv", float_format="%.10g", lineterminator="\n")
    (args.out / "report.txt").write_text("".join(texts), encoding="utf-8")
    logger.info("Evaluation:\n%s", table.to_string())
    if args.fasta:
        write_fasta(first_rows, args.fasta, "rollout_designed" if args.rollout else "designed")


def cmd_generate(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    model, _, _ = load_mmdesign(args.checkpoint, alphabet)
    _, _, records = _first_corpus(args, config, alphabet)
    generator = torch_generator(config.seed, "design sampling")
    names, designs, logits = [], [], {}
    with torch.no_grad():
        for batch in make_batches(records, max_tokens=0, batch_size=config.batch_size, alphabet=alphabet,
                                  shuffle=False):
            out = model.design(batch, config.sample_temperature, generator)
            for b, record in enumerate(batch.records):
                n = len(record)
                names.append(record.name)
                designs.append(alphabet.decode(out.tokens[b, :n].tolist()))
                logits[record.name] = out.logits[b, :n].double().numpy()
    write_fasta(pd.DataFrame({"name": names, "designed": designs}), args.fasta or args.out / "designs.fasta")
    if args.logits:
        np.savez(args.logits, **logits)
        logger.info("Wrote per-position logits of %d records to %s", len(logits), args.logits)
    if args.dump_features:
        dump_features([model.graph(r) for r in records], args.dump_features)


def cmd_analyze(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    label, _, records = _first_corpus(args, config, alphabet)
    if args.splits:
        records = load_splits(args.splits).select(records)["test"]
    natives = {r.name: r for r in records}
    distributions = {"base": residue_distribution((r.sequence for r in records), alphabet)}
    confusions, profiles = {}, {}
    for entry in args.fasta:
        model, path = _labelled(entry, Path(entry).stem)
        designs = read_fasta(path)
        paired = [name for name in designs if name in natives]
        if not paired:
            raise AnalysisError(f"No design in {path} matches a record of the corpus.")
        distributions[model] = residue_distribution((designs[n] for n in paired), alphabet)
        confusions[model] = confusion([natives[n].sequence for n in paired], [designs[n] for n in paired],
                                      alphabet, masks=[natives[n].frame_mask for n in paired], names=paired)
        logger.info("%s: KL to native %.4f over %d residues", model,
                    distribution_kl(distributions[model], distributions["base"]), distributions[model].total)
    for entry in args.eval_rows:
        model, path = _labelled(entry, Path(entry).stem)
        profiles[model] = length_profile(pd.read_csv(path))
    emit_report(args.out, label, distributions, confusions, profiles)


def cmd_ablate(args, config: TrainConfig, alphabet: ResidueAlphabet) -> None:
    _, _, records = _first_corpus(args, config, alphabet)
    table = ablate(_splits(args, records), config, args.out, alphabet)
    table.to_csv(args.out / "ablation.csv", index=False, float_format="%.10g", lineterminator="\n")


COMMANDS = {
    "pretrain-ae": cmd_pretrain_ae,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    """Parses `argv`, runs the subcommand and returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mmdesign: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (None, 0) else EXIT_USAGE

    configure_logging(args.log_level, args.out / "run.log")
    try:
        config = effective_config(args)
        _write_run_config(args.out, config, args.command)
        seed_everything(config.seed)
        COMMANDS[args.command](args, config, ResidueAlphabet())
    except NUMERIC_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    return EXIT_OK

"""Command-line entry point: ``cgfuse <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import tensor_core as tc
from .code_graph import AlignmentError, FormatError as GraphFormatError, build_code_graph, to_json
from .frontend import InvalidCharacter, ParseError, parse, tokenize
from .fusion import FusedModel, FusionPlan, MissingGraph, expert_for_site, fused_generate, fused_train, site_prefix
from .gnn import DimensionMismatch, EmptyCorpus, GnnConfig, GraphExpert, pretrain_nodes
from .harness.corpus import Example, FormatError as CorpusFormatError, load_corpus
from .harness.experiment import (
    ExperimentError, ExperimentSpec, Prepared, evaluate_model, load_spec, prepare, results_table, run_experiment,
    VariantResult,
)
from .plm import Plm, Site, TooLong, TrainConfig, train_plm
from .tokenizer import CorpusEmpty, Vocab, decode, encode_ids, train_vocab

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _spec(args) -> ExperimentSpec:
    try:
        spec = load_spec(args.config) if getattr(args, "config", None) else ExperimentSpec()
    except (configparser.Error, ValueError) as exc:
        raise DataError(f"bad config {args.config}: {exc}") from exc
    if getattr(args, "seed", None) is not None:
        spec.seed = args.seed
    if getattr(args, "corpus", None):
        spec.train_path = args.corpus
    return spec


def _out(args) -> Path | None:
    out = getattr(args, "out", None)
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need_out(args) -> Path:
    out = _out(args)
    if out is None:
        raise UsageError("--out is required for this command")
    return out


def _plan_to_json(plan: FusionPlan) -> dict:
    return {"lam": plan.lam, "sites": [str(s) for s in plan.sites], "gnn": asdict(plan.gnn), "mode": plan.mode,
            "warmup_epochs": plan.warmup_epochs, "stride": plan.stride}


def _plan_from_json(obj: dict) -> FusionPlan:
    return FusionPlan(obj["lam"], tuple(Site.parse(s) for s in obj["sites"]), GnnConfig(**obj["gnn"]),
                      obj["mode"], obj["warmup_epochs"], obj["stride"])


def save_model_dir(out: Path, model: Plm | FusedModel, vocab: Vocab) -> None:
    """Checkpoint, vocabulary and (for fused models) the fusion plan."""
    model.save(out / "model.ckpt")
    vocab.save(out / "vocab.txt")
    if isinstance(model, FusedModel):
        (out / "plan.json").write_text(json.dumps(_plan_to_json(model.plan), indent=2) + "\n")


def load_model_dir(path: Path) -> tuple[Plm | FusedModel, Vocab]:
    ckpt = path / "model.ckpt"
    if not ckpt.exists():
        raise DataError(f"no model checkpoint in {path}")
    vocab = Vocab.load(path / "vocab.txt")
    plm = Plm.load(ckpt)
    plan_file = path / "plan.json"
    if not plan_file.exists():
        return plm, vocab
    plan = _plan_from_json(json.loads(plan_file.read_text()))
    raw = tc.load_checkpoint(ckpt)
    experts = {}
    for site in plan.resolved_sites(plm):
        prefix = site_prefix(site)
        params = {k: tc.parameter(v, k) for k, v in raw.items() if k.startswith(prefix)}
        experts[site] = GraphExpert(plan.gnn, prefix=prefix, params=params)
    return FusedModel(plm, plan, experts), vocab


def _variant(spec: ExperimentSpec, name: str | None):
    if name is None:
        return None
    for v in spec.variants:
        if v.name == name:
            return v
    raise UsageError(f"no variant {name!r} in config (have: {', '.join(v.name for v in spec.variants) or 'none'})")


def _pretrain(data: Prepared, spec: ExperimentSpec, gnn: GnnConfig, log):
    emb = Plm(spec.plm_config(data.vocab.size), tc.rng_for(spec.seed, "plm-init")).token_embedding.data
    return pretrain_nodes([it.graph for it in data.train_items], [it.subtokens for it in data.train_items], emb, gnn,
                          mask_ratio=spec.mask_ratio, epochs=spec.pretrain_epochs, seed=spec.seed, log=log)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# verbs


def cmd_graph_extract(args) -> int:
    src = Path(args.input)
    out = _out(args)
    if src.suffix == ".jsonl":
        lines, skipped = [], 0
        for ex in load_corpus(src):
            try:
                lines.append(json.dumps(to_json(build_code_graph(parse(tokenize(ex.code)))), separators=(",", ":")))
            except (InvalidCharacter, ParseError):
                lines.append("null")
                skipped += 1
        text = "\n".join(lines) + ("\n" if lines else "")
        _log(f"extracted {len(lines) - skipped} graphs, skipped {skipped} unparsable")
    else:
        try:
            g = build_code_graph(parse(tokenize(src.read_text(encoding="utf-8")), tolerant=args.tolerant))
        except (InvalidCharacter, ParseError) as exc:
            raise DataError(f"{src}: {exc}") from exc
        text = json.dumps(to_json(g), indent=1) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        (out / ("graphs.jsonl" if src.suffix == ".jsonl" else "graph.json")).write_text(text)
    return EXIT_OK


def cmd_tokenizer_train(args) -> int:
    examples = load_corpus(args.corpus)
    vocab = train_vocab([e.nl for e in examples] + [e.code for e in examples], args.vocab_size)
    out = _need_out(args)
    vocab.save(out / "vocab.txt")
    _log(f"vocabulary of {vocab.size} written to {out / 'vocab.txt'}")
    return EXIT_OK


def cmd_gnn_pretrain(args) -> int:
    spec = _spec(args)
    gnn = GnnConfig(args.arch.upper(), args.layers, spec.hidden_dim, args.relational, args.epsilon)
    if args.epochs is not None:
        spec.pretrain_epochs = args.epochs
    out = _need_out(args)
    data = prepare(spec, _log)
    expert, report = _pretrain(data, spec, gnn, _log)
    tc.save_checkpoint(out / "gnn.ckpt", expert.params)
    (out / "pretrain.txt").write_text(report.to_text())
    print(f"masked_accuracy\t{report.final_accuracy:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec(args)
    variant = _variant(spec, args.variant)
    out = _need_out(args)
    data = prepare(spec, _log)
    plm = Plm(spec.plm_config(data.vocab.size), tc.rng_for(spec.seed, "plm-init"))
    cfg = spec.train_config()
    if variant is None:
        log = train_plm(plm, data.train_pairs, cfg, log=_log)
        model: Plm | FusedModel = plm
    else:
        plan = variant.plan
        pre, _ = _pretrain(data, spec, plan.gnn, _log)
        model = FusedModel(plm, plan, {s: expert_for_site(pre, s) for s in plan.resolved_sites(plm)})
        if plan.lam == 0.0:
            model.plan = FusionPlan(0.0, plan.sites, plan.gnn, plan.mode, 0, plan.stride)
        cfg = TrainConfig(cfg.epochs + model.plan.warmup_epochs, cfg.batch_size, cfg.lr, cfg.clip, cfg.seed)
        log = fused_train(model, data.train_pairs, data.train_items, cfg, log=_log)
    save_model_dir(out, model, data.vocab)
    print(f"final_loss\t{log.epochs[-1]['loss']:.4f}" if log.epochs else "final_loss\tnan")
    return EXIT_OK


def _eval_data(args, vocab: Vocab, spec: ExperimentSpec) -> Prepared:
    from .fusion import graph_item
    from .harness.experiment import extract_graph, load_examples

    if args.corpus:
        test = load_corpus(args.corpus)
    else:
        _, test = load_examples(spec)
    kept, pairs, items = [], [], []
    for e in test:
        g = extract_graph(e.code)
        src, tgt = encode_ids(e.nl, vocab), encode_ids(e.code, vocab)
        if g is None or len(src) > spec.max_len or len(tgt) > spec.max_len - 1:
            continue
        kept.append(e)
        pairs.append((src, tgt))
        items.append(graph_item(e.code, vocab, g))
    if not kept:
        raise DataError("no usable evaluation examples")
    return Prepared(vocab, [], kept, [], pairs, [], items, len(test) - len(kept))


def cmd_eval(args) -> int:
    spec = _spec_no_corpus(args)
    model, vocab = load_model_dir(Path(args.model))
    spec.max_len = (model.plm if isinstance(model, FusedModel) else model).cfg.max_len
    data = _eval_data(args, vocab, spec)
    tf, gen = evaluate_model(data, model, spec, args.generate)
    table = results_table([VariantResult(Path(args.model).name or "model", tf, gen)])
    out = _out(args)
    if out is not None:
        (out / "eval.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def _spec_no_corpus(args) -> ExperimentSpec:
    corpus, args.corpus = getattr(args, "corpus", None), None
    spec = _spec(args)
    args.corpus = corpus
    return spec


def cmd_generate(args) -> int:
    model, vocab = load_model_dir(Path(args.model))
    plm = model.plm if isinstance(model, FusedModel) else model
    inputs = [e.nl for e in load_corpus(args.input)] if args.input else [args.nl]
    if inputs == [None]:
        raise UsageError("give an intent text or --input CORPUS")
    lines = []
    for nl in inputs:
        src = encode_ids(nl, vocab)
        if len(src) > plm.cfg.max_len:
            raise DataError(f"intent longer than max_len={plm.cfg.max_len} subtokens")
        if isinstance(model, FusedModel):
            ids = fused_generate(model, src, vocab, args.max_steps, args.beam)
        else:
            ids = plm.generate(src, "greedy" if args.beam == 1 else "beam", args.beam, args.max_steps)
        lines.append(decode(ids, vocab))
    text = "\n".join(lines) + "\n"
    out = _out(args)
    if out is not None:
        (out / "generated.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment_run(args) -> int:
    spec = _spec(args)
    if getattr(args, "out", None):
        spec.out_dir = args.out
    if args.no_generate:
        spec.generate = False
    if args.workers is not None:
        spec.workers = args.workers
    result = run_experiment(spec, _log)
    sys.stdout.write(result.table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="override the experiment seed", **d)
    p.add_argument("--config", help="experiment config file (INI sections)", **d)
    p.add_argument("--out", help="output directory", **d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cgfuse", description="Code-graph fusion for NL-to-code transformers.")
    _globals(parser, suppress=False)
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    graph = verbs.add_parser("graph", help="code graph tools").add_subparsers(dest="action", required=True,
                                                                                parser_class=_Parser)
    p = graph.add_parser("extract", help="build code graphs from a corpus (.jsonl) or a source file")
    p.add_argument("input")
    p.add_argument("--tolerant", action="store_true", help="accept incomplete source")
    _globals(p, True)
    p.set_defaults(func=cmd_graph_extract)

    tok = verbs.add_parser("tokenizer", help="subword vocabulary").add_subparsers(dest="action", required=True,
                                                                                    parser_class=_Parser)
    p = tok.add_parser("train", help="learn a vocabulary from a corpus")
    p.add_argument("corpus")
    p.add_argument("--vocab-size", type=int, default=2000)
    _globals(p, True)
    p.set_defaults(func=cmd_tokenizer_train)

    gnn = verbs.add_parser("gnn", help="graph experts").add_subparsers(dest="action", required=True,
                                                                        parser_class=_Parser)
    p = gnn.add_parser("pretrain", help="masked node-kind pre-training")
    p.add_argument("corpus", nargs="?", help="training corpus; synthetic data when omitted")
    p.add_argument("--arch", default="GIN", choices=["GIN", "SAGE", "RGCN", "gin", "sage", "rgcn"])
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--relational", action="store_true")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--epochs", type=int)
    _globals(p, True)
    p.set_defaults(func=cmd_gnn_pretrain)

    p = verbs.add_parser("train", help="train the baseline or one fused variant")
    p.add_argument("corpus", nargs="?", help="training corpus; synthetic data when omitted")
    p.add_argument("--variant", help="variant name from the config; baseline when omitted")
    _globals(p, True)
    p.set_defaults(func=cmd_train)

    p = verbs.add_parser("eval", help="evaluate a trained model directory")
    p.add_argument("--model", required=True, help="directory written by 'train'")
    p.add_argument("corpus", nargs="?", help="test corpus; synthetic test split when omitted")
    p.add_argument("--generate", action="store_true", help="also score free decoding")
    _globals(p, True)
    p.set_defaults(func=cmd_eval)

    p = verbs.add_parser("generate", help="decode code for intents")
    p.add_argument("--model", required=True, help="directory written by 'train'")
    p.add_argument("nl", nargs="?", help="intent text")
    p.add_argument("--input", help="corpus whose nl fields are decoded")
    p.add_argument("--max-steps", type=int, default=96)
    p.add_argument("--beam", type=int, default=1)
    _globals(p, True)
    p.set_defaults(func=cmd_generate)

    exp = verbs.add_parser("experiment", help="baseline-versus-fused experiments").add_subparsers(
        dest="action", required=True, parser_class=_Parser)
    p = exp.add_parser("run", help="run every variant in the config")
    p.add_argument("--no-generate", action="store_true", help="skip free-decoding evaluation")
    p.add_argument("--workers", type=int, help="run fused variants in this many worker processes")
    _globals(p, True)
    p.set_defaults(func=cmd_experiment_run)
    return parser


_DATA_ERRORS = (OSError, CorpusFormatError, GraphFormatError, CorpusEmpty, EmptyCorpus, InvalidCharacter,
                ParseError, TooLong, tc.CheckpointError, json.JSONDecodeError, DataError)
_INTERNAL_ERRORS = (tc.ShapeMismatch, tc.NotScalar, DimensionMismatch, AlignmentError, MissingGraph, AssertionError)


def _classify(exc: BaseException) -> int:
    if isinstance(exc, ExperimentError):
        return _classify(exc.cause)
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, _INTERNAL_ERRORS):
        return EXIT_INTERNAL
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = _classify(exc)
        kind = "data error" if code == EXIT_DATA else "internal error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

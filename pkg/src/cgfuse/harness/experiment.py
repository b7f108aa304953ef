"""Baseline-versus-fused experiments and their INI configuration."""
from __future__ import annotations

import configparser
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor_core as tc
from ..code_graph import CodeGraph, build_code_graph
from ..frontend import InvalidCharacter, ParseError, parse, tokenize
from ..fusion import FusedModel, FusionPlan, GraphItem, expert_for_site, fused_generate, fused_train, graph_item, \
    teacher_forced_ids
from ..gnn import GnnConfig, GraphExpert, pretrain_nodes
from ..metrics import EvalReport, codebleu, format_table
from ..plm import Plm, PlmConfig, Site, TrainConfig, train_plm
from ..tokenizer import Vocab, decode, encode_ids, train_vocab
from .corpus import Example, load_corpus
from .synthetic import generate_synthetic

TABLE_COLUMNS = ("tf_bleu", "tf_codebleu", "tf_em", "gen_bleu", "gen_codebleu", "gen_em")
GAIN_COLUMNS = ("d_tf_bleu", "d_tf_codebleu")


class ExperimentError(RuntimeError):
    def __init__(self, variant: str, cause: Exception):
        super().__init__(f"variant {variant!r}: {cause}")
        self.variant = variant
        self.cause = cause


@dataclass
class Variant:
    name: str
    plan: FusionPlan


@dataclass
class ExperimentSpec:
    train_path: str | None = None
    test_path: str | None = None
    synthetic_train: int = 2000
    synthetic_test: int = 200
    data_seed: int = 0
    vocab_size: int = 2000
    enc_layers: int = 4
    dec_layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 256
    dropout: float = 0.1
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    pretrain_epochs: int = 3
    mask_ratio: float = 0.15
    generate: bool = True
    max_steps: int = 96
    beam: int = 1
    out_dir: str | None = None
    workers: int = 1
    variants: list[Variant] = field(default_factory=list)

    def plm_config(self, vocab_size: int) -> PlmConfig:
        return PlmConfig(vocab_size, self.enc_layers, self.dec_layers, self.hidden_dim, self.heads,
                         self.ffn_dim, self.max_len, self.dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, 1.0, self.seed)


# ---------------------------------------------------------------------------
# INI config

_SCALARS = {
    "data": ("train_path", "test_path", "synthetic_train", "synthetic_test", "data_seed", "vocab_size"),
    "model": ("enc_layers", "dec_layers", "hidden_dim", "heads", "ffn_dim", "max_len", "dropout"),
    "train": ("epochs", "batch_size", "lr", "seed", "workers"),
    "gnn": ("pretrain_epochs", "mask_ratio"),
    "eval": ("generate", "max_steps", "beam"),
    "output": ("out_dir",),
}


def _coerce(default, text: str):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip() or None


def parse_variant(name: str, section) -> Variant:
    gnn = GnnConfig(
        arch=section.get("arch", "GIN").upper(),
        num_layers=int(section.get("layers", "1")),
        hidden_dim=int(section.get("hidden_dim", "128")),
        use_relational=section.get("use_relational", "false").lower() in ("1", "true", "yes", "on"),
        epsilon=float(section.get("epsilon", "0.0")),
    )
    sites = tuple(Site.parse(s) for s in section.get("sites", "").split(",") if s.strip())
    plan = FusionPlan(lam=float(section.get("lam", "1.0")), sites=sites, gnn=gnn,
                      mode=section.get("mode", "gold"), warmup_epochs=int(section.get("warmup_epochs", "2")),
                      stride=int(section.get("stride", "1")))
    return Variant(name, plan)


def spec_from_config(text: str) -> ExperimentSpec:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    spec = ExperimentSpec()
    defaults = asdict(ExperimentSpec())
    for sec, keys in _SCALARS.items():
        if not cp.has_section(sec):
            continue
        for key in cp[sec]:
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in [{sec}]")
            value = defaults[key]
            probe = value if value is not None else ""
            setattr(spec, key, _coerce(probe, cp[sec][key]))
    for sec in cp.sections():
        if sec.startswith("variant "):
            name = sec[len("variant "):].strip()
            spec.variants.append(parse_variant(name, cp[sec]))
        elif sec not in _SCALARS:
            raise ValueError(f"unknown section [{sec}]")
    hd = spec.hidden_dim
    for v in spec.variants:
        v.plan.gnn.hidden_dim = hd
    return spec


def load_spec(path) -> ExperimentSpec:
    return spec_from_config(Path(path).read_text())


def spec_to_config(spec: ExperimentSpec) -> str:
    cp = configparser.ConfigParser()
    for sec, keys in _SCALARS.items():
        cp[sec] = {k: "" if getattr(spec, k) is None else str(getattr(spec, k)).lower()
                   if isinstance(getattr(spec, k), bool) else str(getattr(spec, k)) for k in keys}
    for v in spec.variants:
        p = v.plan
        cp[f"variant {v.name}"] = {
            "arch": p.gnn.arch, "layers": str(p.gnn.num_layers), "use_relational": str(p.gnn.use_relational).lower(),
            "epsilon": str(p.gnn.epsilon), "lam": str(p.lam), "mode": p.mode,
            "warmup_epochs": str(p.warmup_epochs), "stride": str(p.stride),
            "sites": ",".join(str(s) for s in p.sites),
        }
    out = []
    for sec in cp.sections():
        out.append(f"[{sec}]")
        out += [f"{k} = {v}" for k, v in cp[sec].items()]
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# data


@dataclass
class Prepared:
    vocab: Vocab
    train: list[Example]
    test: list[Example]
    train_pairs: list[tuple[list[int], list[int]]]
    test_pairs: list[tuple[list[int], list[int]]]
    train_items: list[GraphItem]
    test_items: list[GraphItem]
    skipped: int


def extract_graph(code: str) -> CodeGraph | None:
    try:
        return build_code_graph(parse(tokenize(code)))
    except (InvalidCharacter, ParseError):
        return None


def load_examples(spec: ExperimentSpec) -> tuple[list[Example], list[Example]]:
    if spec.train_path:
        train = load_corpus(spec.train_path)
        test = load_corpus(spec.test_path) if spec.test_path else []
        return train, test
    pool = generate_synthetic(spec.synthetic_train + 2 * spec.synthetic_test, spec.data_seed)
    train = pool[:spec.synthetic_train]
    seen = {(e.nl, e.code) for e in train}
    test = [e for e in pool[spec.synthetic_train:] if (e.nl, e.code) not in seen][:spec.synthetic_test]
    return train, test


def prepare(spec: ExperimentSpec, log=None) -> Prepared:
    train, test = load_examples(spec)
    vocab = train_vocab([e.nl for e in train] + [e.code for e in train], spec.vocab_size)
    limit = spec.max_len - 1

    def build(examples):
        kept, pairs, items, skipped = [], [], [], 0
        for e in examples:
            g = extract_graph(e.code)
            src, tgt = encode_ids(e.nl, vocab), encode_ids(e.code, vocab)
            if g is None or len(src) > spec.max_len or len(tgt) > limit:
                skipped += 1
                continue
            kept.append(e)
            pairs.append((src, tgt))
            items.append(graph_item(e.code, vocab, g))
        return kept, pairs, items, skipped

    train, train_pairs, train_items, s1 = build(train)
    test, test_pairs, test_items, s2 = build(test)
    if log:
        log(f"data: {len(train)} train, {len(test)} test, {s1 + s2} skipped, vocab {vocab.size}")
    return Prepared(vocab, train, test, train_pairs, test_pairs, train_items, test_items, s1 + s2)


# ---------------------------------------------------------------------------
# running


@dataclass
class VariantResult:
    name: str
    tf: EvalReport
    gen: EvalReport | None
    gnn_accuracy: float | None = None

    def row(self) -> dict[str, float]:
        out = {"tf_bleu": self.tf.bleu, "tf_codebleu": self.tf.codebleu, "tf_em": self.tf.em}
        if self.gen is not None:
            out.update(gen_bleu=self.gen.bleu, gen_codebleu=self.gen.codebleu, gen_em=self.gen.em)
        return out


@dataclass
class ExperimentResult:
    results: list[VariantResult]
    table: str

    def to_json(self) -> str:
        obj = []
        for r in self.results:
            obj.append({"name": r.name, "teacher_forced": r.tf.summary(),
                        "generated": r.gen.summary() if r.gen else None, "gnn_masked_accuracy": r.gnn_accuracy})
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def evaluate_model(data: Prepared, model: Plm | FusedModel, spec: ExperimentSpec,
                   generate: bool) -> tuple[EvalReport, EvalReport | None]:
    refs = [e.code for e in data.test]
    plm = model.plm if isinstance(model, FusedModel) else model
    tf_ids: list[list[int]] = []
    for k in range(0, len(data.test_pairs), 64):
        pairs = data.test_pairs[k:k + 64]
        hooks = model.hooks(data.test_items[k:k + 64]) if isinstance(model, FusedModel) else None
        tf_ids += teacher_forced_ids(plm, pairs, hooks)
    tf = codebleu([decode(i, data.vocab) for i in tf_ids], refs)
    gen = None
    if generate:
        hyps = []
        for src, _ in data.test_pairs:
            if isinstance(model, FusedModel):
                ids = fused_generate(model, src, data.vocab, spec.max_steps, spec.beam)
            else:
                ids = plm.generate(src, "greedy" if spec.beam == 1 else "beam", spec.beam, spec.max_steps)
            hyps.append(decode(ids, data.vocab))
        gen = codebleu(hyps, refs)
    return tf, gen


def _gnn_key(cfg: GnnConfig) -> tuple:
    return (cfg.arch, cfg.num_layers, cfg.use_relational, cfg.epsilon, cfg.activation, cfg.hidden_dim)


def _pretrain_for(spec: ExperimentSpec, data: Prepared, gnn: GnnConfig, init_emb: np.ndarray):
    expert, rep = pretrain_nodes(
        [it.graph for it in data.train_items], [it.subtokens for it in data.train_items], init_emb,
        gnn, mask_ratio=spec.mask_ratio, epochs=spec.pretrain_epochs, seed=spec.seed)
    return expert, rep.final_accuracy


def _run_variant(spec: ExperimentSpec, data: Prepared, v: Variant, pre: GraphExpert, acc: float,
                 log: Callable[[str], None]) -> tuple[VariantResult, FusedModel]:
    plan = v.plan
    plm = Plm(spec.plm_config(data.vocab.size), tc.rng_for(spec.seed, "plm-init"))
    model = FusedModel(plm, plan, {s: expert_for_site(pre, s) for s in plan.resolved_sites(plm)})
    if plan.lam == 0.0:
        # nothing to warm up: the fused model is the plain PLM
        model.plan = FusionPlan(0.0, plan.sites, plan.gnn, plan.mode, 0, plan.stride)
    # warmup epochs come on top, so the PLM sees as many updates as the baseline
    base = spec.train_config()
    cfg = TrainConfig(base.epochs + model.plan.warmup_epochs, base.batch_size, base.lr, base.clip, base.seed)
    fused_train(model, data.train_pairs, data.train_items, cfg, log=lambda s: log(f"{v.name} " + s))
    tf, gen = evaluate_model(data, model, spec, spec.generate)
    return VariantResult(v.name, tf, gen, acc), model


def _variant_worker(spec: ExperimentSpec, data: Prepared, v: Variant) -> VariantResult:
    """One variant in a worker process: pre-trains its own expert from the shared seed."""
    try:
        init_emb = Plm(spec.plm_config(data.vocab.size), tc.rng_for(spec.seed, "plm-init")).token_embedding.data
        pre, acc = _pretrain_for(spec, data, v.plan.gnn, init_emb)
        result, model = _run_variant(spec, data, v, pre, acc, lambda s: None)
        if spec.out_dir:
            model.save(Path(spec.out_dir) / f"{v.name}.ckpt")
        return result
    except Exception as exc:  # noqa: BLE001 - re-raised with the variant name
        raise ExperimentError(v.name, exc) from exc


def run_experiment(spec: ExperimentSpec, log: Callable[[str], None] | None = None,
                   data: Prepared | None = None) -> ExperimentResult:
    """Train and evaluate the baseline and every fused variant.

    With ``spec.workers > 1`` fused variants run in separate processes; every
    variant derives its randomness from ``spec.seed`` alone, so the table is
    the same as a sequential run.
    """
    log = log or (lambda s: None)
    data = data or prepare(spec, log)
    plm_cfg = spec.plm_config(data.vocab.size)

    log("baseline: training")
    base = Plm(plm_cfg, tc.rng_for(spec.seed, "plm-init"))
    train_plm(base, data.train_pairs, spec.train_config(), log=lambda s: log("baseline " + s))
    tf, gen = evaluate_model(data, base, spec, spec.generate)
    results = [VariantResult("baseline", tf, gen)]
    if spec.out_dir:
        Path(spec.out_dir).mkdir(parents=True, exist_ok=True)
        base.save(Path(spec.out_dir) / "baseline.ckpt")

    if spec.workers > 1 and len(spec.variants) > 1:
        log(f"running {len(spec.variants)} variants on {spec.workers} workers")
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = [pool.submit(_variant_worker, spec, data, v) for v in spec.variants]
            results += [f.result() for f in futures]
    else:
        experts: dict[tuple, tuple[GraphExpert, float]] = {}
        init_emb = Plm(plm_cfg, tc.rng_for(spec.seed, "plm-init")).token_embedding.data
        for v in spec.variants:
            try:
                key = _gnn_key(v.plan.gnn)
                if key not in experts:
                    log(f"{v.name}: pre-training {v.plan.gnn.arch} x{v.plan.gnn.num_layers}")
                    experts[key] = _pretrain_for(spec, data, v.plan.gnn, init_emb)
                    log(f"{v.name}: masked node accuracy {experts[key][1]:.4f}")
                result, model = _run_variant(spec, data, v, *experts[key], log)
                results.append(result)
                if spec.out_dir:
                    model.save(Path(spec.out_dir) / f"{v.name}.ckpt")
            except Exception as exc:  # noqa: BLE001 - re-raised with the variant name
                raise ExperimentError(v.name, exc) from exc

    table = results_table(results)
    if spec.out_dir:
        out = Path(spec.out_dir)
        (out / "results.txt").write_text(table)
        (out / "results.json").write_text(ExperimentResult(results, table).to_json())
    return ExperimentResult(results, table)


def results_table(results: list[VariantResult]) -> str:
    cols = [c for c in TABLE_COLUMNS if any(c in r.row() for r in results)]
    rows = [(r.name, r.row()) for r in results]
    if len(results) > 1:
        base = results[0].row()
        for name, vals in rows[1:]:
            vals["d_tf_bleu"] = vals["tf_bleu"] - base["tf_bleu"]
            vals["d_tf_codebleu"] = vals["tf_codebleu"] - base["tf_codebleu"]
        cols += list(GAIN_COLUMNS)
    return format_table(rows, cols)

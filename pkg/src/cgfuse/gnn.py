"""Graph experts (R-GCN, GraphSAGE, GIN) over code graphs, and their
masked node-kind pre-training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .code_graph import CodeGraph, Relation
from .frontend import LEAF_KINDS, SYNTAX_KINDS
from .tensor_core import Tensor

ARCHS = ("RGCN", "SAGE", "GIN")
# stored relations followed by their inverses
RELATIONS = (Relation.P, Relation.CO, Relation.CA)
NUM_RELATIONS = 2 * len(RELATIONS)
SYNTAX_INDEX = {k: i for i, k in enumerate(SYNTAX_KINDS)}
TERMINAL_LABELS = tuple("T-" + k.value for k in LEAF_KINDS)
NODE_LABELS = SYNTAX_KINDS + TERMINAL_LABELS
LABEL_INDEX = {k: i for i, k in enumerate(NODE_LABELS)}


class DimensionMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


@dataclass
class GnnConfig:
    arch: str = "GIN"
    num_layers: int = 1
    hidden_dim: int = 128
    use_relational: bool = False  # GraphSAGE only; R-GCN is always relational
    epsilon: float = 0.0  # GIN only
    activation: str = "gelu"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown GNN architecture {self.arch!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.activation not in ("gelu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class GraphBatch:
    """Disjoint union of graphs with everything needed for message passing."""

    num_nodes: int
    offsets: list[int]
    syn_rows: np.ndarray  # global node ids of syntax nodes
    syn_kind: np.ndarray
    term_rows: np.ndarray  # global node ids of terminal nodes
    term_sub_ids: np.ndarray  # flat subtoken ids of all terminals
    term_sub_seg: np.ndarray  # which terminal (0..T-1) each subtoken belongs to
    term_inv_count: np.ndarray  # (T, 1) 1/number of subtokens
    src: np.ndarray  # message edges, inverses included
    dst: np.ndarray
    rel: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        # per-edge 1/|N_r(dst)| and 1/|N(dst)|
        n = self.num_nodes
        self.rel_norm = np.zeros(len(self.dst))
        self.all_norm = np.zeros(len(self.dst))
        deg_all = np.bincount(self.dst, minlength=n) if len(self.dst) else np.zeros(n, dtype=int)
        for r in range(NUM_RELATIONS):
            sel = self.rel == r
            deg = np.bincount(self.dst[sel], minlength=n)
            self.rel_norm[sel] = 1.0 / deg[self.dst[sel]]
        if len(self.dst):
            self.all_norm = 1.0 / deg_all[self.dst]


def terminal_subtokens_from_encoding(g: CodeGraph, provenance: Sequence[tuple[int, int | None]]) -> list[list[int]]:
    """Group subtoken ids by terminal using an encoding's provenance."""
    per_tok: dict[int, list[int]] = {}
    for tid, tok in provenance:
        if tok is not None:
            per_tok.setdefault(tok, []).append(tid)
    return [per_tok.get(k, []) for k in range(len(g.terminal_nodes))]


def make_batch(graphs: Sequence[CodeGraph], terminal_subtokens: Sequence[Sequence[Sequence[int]]],
               unk_id: int = 3) -> GraphBatch:
    syn_rows, syn_kind, term_rows, sub_ids, sub_seg, inv_count = [], [], [], [], [], []
    src, dst, rel, labels, offsets = [], [], [], [], []
    base = 0
    for g, subs in zip(graphs, terminal_subtokens):
        offsets.append(base)
        if len(subs) != len(g.terminal_nodes):
            raise DimensionMismatch("terminal_subtokens must list every terminal")
        lab = np.empty(g.num_nodes, dtype=np.int64)
        for nid, kind in g.syntax_nodes:
            syn_rows.append(base + nid)
            syn_kind.append(SYNTAX_INDEX[kind])
            lab[nid] = LABEL_INDEX[kind]
        for (nid, tok), ids in zip(g.terminal_nodes, subs):
            t = len(term_rows)
            term_rows.append(base + nid)
            ids = list(ids) or [unk_id]
            sub_ids.extend(ids)
            sub_seg.extend([t] * len(ids))
            inv_count.append(1.0 / len(ids))
            lab[nid] = LABEL_INDEX["T-" + tok.kind.value]
        labels.append(lab)
        for s, d, r in g.edges:
            ri = RELATIONS.index(r)
            src += [base + s, base + d]
            dst += [base + d, base + s]
            rel += [ri, ri + len(RELATIONS)]
        base += g.num_nodes
    i64 = lambda x: np.asarray(x, dtype=np.int64)
    return GraphBatch(
        num_nodes=base, offsets=offsets,
        syn_rows=i64(syn_rows), syn_kind=i64(syn_kind), term_rows=i64(term_rows),
        term_sub_ids=i64(sub_ids), term_sub_seg=i64(sub_seg),
        term_inv_count=np.asarray(inv_count, dtype=np.float64).reshape(-1, 1),
        src=i64(src), dst=i64(dst), rel=i64(rel),
        labels=np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
    )


def _linear(rng, name: str, fan_in: int, fan_out: int, params: dict) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params[name + ".W"] = tc.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)), name + ".W")
    params[name + ".b"] = tc.parameter(np.zeros(fan_out), name + ".b")


def init_gnn_params(cfg: GnnConfig, rng: np.random.Generator, prefix: str = "gnn.") -> dict[str, Tensor]:
    d = cfg.hidden_dim
    p: dict[str, Tensor] = {}
    p[prefix + "syntax_table"] = tc.parameter(tc.init_normal(rng, (len(SYNTAX_KINDS), d), 0.02))
    p[prefix + "mask"] = tc.parameter(tc.init_normal(rng, (d,), 0.02))
    for layer in range(cfg.num_layers):
        base = f"{prefix}layer{layer}."
        if cfg.arch == "RGCN":
            _linear(rng, base + "self", d, d, p)
            bound = 1.0 / math.sqrt(d)
            for r in range(NUM_RELATIONS):
                p[f"{base}rel{r}.W"] = tc.parameter(rng.uniform(-bound, bound, (d, d)))
        elif cfg.arch == "SAGE":
            _linear(rng, base + "combine", 2 * d, d, p)
        else:
            _linear(rng, base + "mlp1", d, d, p)
            _linear(rng, base + "mlp2", d, d, p)
    return p


def node_init(batch: GraphBatch, token_embedding: Tensor, syntax_table: Tensor,
              mask_embedding: Tensor | None = None, masked: np.ndarray | None = None) -> Tensor:
    """h^0: mean subtoken embedding for terminals, kind embedding for syntax
    nodes, and the mask vector for masked nodes."""
    d = token_embedding.shape[1]
    if syntax_table.shape[1] != d:
        raise DimensionMismatch(f"syntax table width {syntax_table.shape[1]} != embedding width {d}")
    n_syn, n_term = len(batch.syn_rows), len(batch.term_rows)
    parts = [tc.embedding_lookup(syntax_table, batch.syn_kind)]
    if n_term:
        sub = tc.embedding_lookup(token_embedding, batch.term_sub_ids)
        summed = tc.scatter_add_rows(sub, batch.term_sub_seg, n_term)
        inv = batch.term_inv_count.astype(summed.data.dtype)
        parts.append(tc.mul(summed, inv))
    order = np.empty(batch.num_nodes, dtype=np.int64)
    order[batch.syn_rows] = np.arange(n_syn)
    order[batch.term_rows] = n_syn + np.arange(n_term)
    if masked is not None and masked.any():
        if mask_embedding is None:
            raise ValueError("masked nodes need a mask embedding")
        parts.append(tc.reshape(mask_embedding, (1, d)))
        order[masked] = n_syn + n_term
    return tc.embedding_lookup(tc.concat(parts, axis=0), order)


def _act(cfg: GnnConfig):
    return tc.gelu if cfg.activation == "gelu" else tc.identity


def _aggregate(h: Tensor, batch: GraphBatch, sel: np.ndarray | None, norm: np.ndarray | None) -> Tensor:
    src = batch.src if sel is None else batch.src[sel]
    dst = batch.dst if sel is None else batch.dst[sel]
    msgs = tc.embedding_lookup(h, src)
    if norm is not None:
        w = norm if sel is None else norm[sel]
        msgs = tc.mul(msgs, w.reshape(-1, 1).astype(h.data.dtype))
    return tc.scatter_add_rows(msgs, dst, batch.num_nodes)


def gnn_forward(batch: GraphBatch, h0: Tensor, cfg: GnnConfig, params: dict[str, Tensor],
                prefix: str = "gnn.") -> Tensor:
    if h0.shape != (batch.num_nodes, cfg.hidden_dim):
        raise DimensionMismatch(f"node features {h0.shape}, expected ({batch.num_nodes}, {cfg.hidden_dim})")
    act = _act(cfg)
    h = h0
    for layer in range(cfg.num_layers):
        base = f"{prefix}layer{layer}."
        if cfg.arch == "RGCN":
            out = tc.add(tc.matmul(h, params[base + "self.W"]), params[base + "self.b"])
            for r in range(NUM_RELATIONS):
                sel = batch.rel == r
                if not sel.any():
                    continue
                agg = _aggregate(h, batch, sel, batch.rel_norm)
                out = tc.add(out, tc.matmul(agg, params[f"{base}rel{r}.W"]))
            h = act(out)
        elif cfg.arch == "SAGE":
            if cfg.use_relational:
                agg = tc.zeros(h.shape)
                agg = Tensor(agg.data.astype(h.data.dtype))
                for r in range(NUM_RELATIONS):
                    sel = batch.rel == r
                    if sel.any():
                        agg = tc.add(agg, _aggregate(h, batch, sel, batch.rel_norm))
            else:
                agg = _aggregate(h, batch, None, batch.all_norm)
            cat = tc.concat([h, agg], axis=1)
            h = act(tc.add(tc.matmul(cat, params[base + "combine.W"]), params[base + "combine.b"]))
        else:
            x = tc.add(tc.mul_scalar(h, 1.0 + cfg.epsilon), _aggregate(h, batch, None, None))
            x = act(tc.add(tc.matmul(x, params[base + "mlp1.W"]), params[base + "mlp1.b"]))
            h = tc.add(tc.matmul(x, params[base + "mlp2.W"]), params[base + "mlp2.b"])
    return h


class GraphExpert:
    """A GNN with its parameters under one name prefix."""

    def __init__(self, cfg: GnnConfig, rng: np.random.Generator | None = None,
                 prefix: str = "gnn.", params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.prefix = prefix
        self.params = params if params is not None else init_gnn_params(cfg, rng, prefix)

    def init_nodes(self, batch: GraphBatch, token_embedding: Tensor, masked=None) -> Tensor:
        return node_init(batch, token_embedding, self.params[self.prefix + "syntax_table"],
                         self.params[self.prefix + "mask"], masked)

    def __call__(self, batch: GraphBatch, token_embedding: Tensor, masked=None) -> Tensor:
        return gnn_forward(batch, self.init_nodes(batch, token_embedding, masked), self.cfg,
                           self.params, self.prefix)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainReport:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1]["masked_accuracy"] if self.epochs else float("nan")

    def to_text(self) -> str:
        lines = ["epoch\tloss\tmasked_accuracy"]
        for e in self.epochs:
            lines.append(f"{e['epoch']}\t{e['loss']:.6f}\t{e['masked_accuracy']:.6f}")
        return "\n".join(lines) + "\n"


def sample_mask(batch: GraphBatch, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Mask up to max(1, round(ratio * n)) nodes of every graph in the batch.

    Candidates are visited in random order and skipped when a neighbour is
    already masked, so every masked node keeps a visible neighbourhood.
    """
    masked = np.zeros(batch.num_nodes, dtype=bool)
    order = np.argsort(batch.src, kind="stable")
    starts = np.searchsorted(batch.src[order], np.arange(batch.num_nodes + 1))
    nbrs = batch.dst[order]
    bounds = batch.offsets + [batch.num_nodes]
    for a, b in zip(bounds, bounds[1:]):
        n = b - a
        if n == 0:
            continue
        k = max(1, int(round(ratio * n)))
        taken = 0
        for v in a + rng.permutation(n):
            if taken == k:
                break
            if masked[nbrs[starts[v]:starts[v + 1]]].any():
                continue
            masked[v] = True
            taken += 1
    return masked


def node_classification_loss(expert: GraphExpert, head: dict[str, Tensor], batch: GraphBatch,
                             token_embedding: Tensor, masked: np.ndarray) -> tuple[Tensor, np.ndarray]:
    h = expert(batch, token_embedding, masked)
    rows = np.flatnonzero(masked)
    logits = tc.add(tc.matmul(tc.embedding_lookup(h, rows), head["head.W"]), head["head.b"])
    return tc.cross_entropy(logits, batch.labels[rows]), logits.data


def pretrain_nodes(
    graphs: Sequence[CodeGraph],
    terminal_subtokens: Sequence[Sequence[Sequence[int]]],
    token_embedding: np.ndarray,
    cfg: GnnConfig,
    *,
    mask_ratio: float = 0.15,
    epochs: int = 3,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 32,
    holdout: float = 0.1,
    prefix: str = "gnn.",
    log=None,
) -> tuple[GraphExpert, PretrainReport]:
    """Masked node-kind classification with frozen token embeddings."""
    if not graphs:
        raise EmptyCorpus("no graphs to pre-train on")
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    if token_embedding.shape[1] != cfg.hidden_dim:
        raise DimensionMismatch("token embedding width must equal hidden_dim")
    expert = GraphExpert(cfg, tc.rng_for(seed, "gnn-init"), prefix)
    head_rng = tc.rng_for(seed, "gnn-head")
    head: dict[str, Tensor] = {}
    _linear(head_rng, "head", cfg.hidden_dim, len(NODE_LABELS), head)
    emb = Tensor(np.asarray(token_embedding, dtype=tc.default_dtype()))

    order = tc.rng_for(seed, "gnn-split").permutation(len(graphs))
    n_eval = int(round(holdout * len(graphs))) if len(graphs) > 1 else 0
    eval_idx, train_idx = sorted(order[:n_eval]), sorted(order[n_eval:])
    eval_batches = [
        make_batch([graphs[i] for i in eval_idx[k:k + 256]], [terminal_subtokens[i] for i in eval_idx[k:k + 256]])
        for k in range(0, len(eval_idx), 256)
    ]
    eval_masks = [sample_mask(b, mask_ratio, tc.rng_for(seed, "gnn-eval-mask", k))
                  for k, b in enumerate(eval_batches)]

    params = dict(expert.params)
    params.update(head)
    state = tc.AdamState()
    report = PretrainReport()
    for epoch in range(1, epochs + 1):
        rng = tc.rng_for(seed, "gnn-epoch", epoch)
        perm = [train_idx[i] for i in rng.permutation(len(train_idx))]
        total, steps = 0.0, 0
        for k in range(0, len(perm), batch_size):
            ids = perm[k:k + batch_size]
            batch = make_batch([graphs[i] for i in ids], [terminal_subtokens[i] for i in ids])
            masked = sample_mask(batch, mask_ratio, rng)
            with tc.Tape():
                loss, _ = node_classification_loss(expert, head, batch, emb, masked)
                grads = tc.backward(loss, list(params.values()))
            named = {name: grads[t] for name, t in params.items()}
            tc.adam_step(params, named, state, lr)
            total += loss.item()
            steps += 1
        correct = seen = 0
        with tc.no_grad():
            for b, m in zip(eval_batches, eval_masks):
                _, logits = node_classification_loss(expert, head, b, emb, m)
                correct += int((logits.argmax(axis=1) == b.labels[m]).sum())
                seen += int(m.sum())
        acc = correct / seen if seen else float("nan")
        report.epochs.append({"epoch": epoch, "loss": total / max(steps, 1), "masked_accuracy": acc})
        if log is not None:
            log(f"gnn pretrain epoch {epoch}: loss {total / max(steps, 1):.4f} masked acc {acc:.4f}")
    expert.head = head
    return expert, report

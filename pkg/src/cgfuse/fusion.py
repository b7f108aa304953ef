"""Adding graph-expert node vectors to transformer hidden states.

A terminal's GNN output is added, scaled by ``lam``, to the decoder
positions holding its subtokens.  Two ways of choosing the graph:

* ``gold``: the full target-code graph, at every aligned position.  Future
  tokens leak into earlier positions through message passing.
* ``causal``: terminal ``k`` is evaluated on ``context_subgraph(g, k + 1)``
  and its vector goes to the first position after its last subtoken.  Only
  there is the terminal known to be complete during decoding, so training
  and generation see the same graph terms and nothing from the future.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .code_graph import AlignmentError, CodeGraph, TerminalAlignment, align_terminals, build_code_graph, context_subgraph
from .frontend import CodeToken, InvalidCharacter, TokenKind, parse, tokenize
from .gnn import GnnConfig, GraphExpert, make_batch, terminal_subtokens_from_encoding
from .plm import HookMeta, Plm, Site, TrainConfig, decoder_io, fit, pad_batch
from .tensor_core import Tensor
from .tokenizer import EOS, Vocab, decode_bytes, encode, subtoken_char_spans

MODES = ("gold", "causal")


class MissingGraph(KeyError):
    def __init__(self, example_id: int):
        super().__init__(f"no code graph for example {example_id}")
        self.example_id = example_id


@dataclass
class FusionPlan:
    lam: float = 1.0
    sites: tuple[Site, ...] = ()  # empty: last decoder layer
    gnn: GnnConfig = field(default_factory=GnnConfig)
    mode: str = "gold"
    warmup_epochs: int = 2
    stride: int = 1  # graph rebuild period during generation

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        self.sites = tuple(self.sites)

    def resolved_sites(self, plm: Plm) -> tuple[Site, ...]:
        return self.sites or (Site("dec", plm.cfg.dec_layers - 1),)


@dataclass
class GraphItem:
    """One example's graph with its subtokens and decoder alignment."""

    graph: CodeGraph
    subtokens: list[list[int]]  # per terminal, source order
    alignment: TerminalAlignment  # node id -> [start, end) decoder positions
    _prefixes: list | None = None

    def prefixes(self) -> list[tuple[CodeGraph, list[list[int]], int, int]]:
        """(subgraph, its subtokens, terminal node id in it, causal position) per aligned terminal."""
        if self._prefixes is None:
            out = []
            for k, (nid, _) in enumerate(self.graph.terminal_nodes):
                if nid not in self.alignment:
                    continue
                sub = context_subgraph(self.graph, k + 1)
                out.append((sub, self.subtokens[:k + 1], sub.terminal_nodes[k][0], self.alignment[nid][1]))
            self._prefixes = out
        return self._prefixes


def graph_item(code: str, vocab: Vocab, graph: CodeGraph | None = None, offset: int = 1) -> GraphItem:
    """Build (or reuse) the code graph and align it to ``[BOS] + encode(code)``."""
    if graph is None:
        graph = build_code_graph(parse(tokenize(code), start="auto"))
    prov = encode(code, vocab, with_provenance=True)
    subs = terminal_subtokens_from_encoding(graph, prov)
    return GraphItem(graph, subs, align_terminals(graph, [t for _, t in prov], offset=offset))


def graph_contribution(items: Sequence[GraphItem | None], expert: GraphExpert, token_embedding: Tensor,
                       batch: int, width: int, mode: str) -> Tensor | None:
    """Unscaled graph term (B, T, D), or None when no position receives one."""
    graphs, subs, rows, pos = [], [], [], []
    base = 0
    for b, item in enumerate(items):
        if item is None:
            continue
        if mode == "gold":
            if not item.graph.num_nodes:
                continue
            graphs.append(item.graph)
            subs.append(item.subtokens)
            for nid, (s, e) in item.alignment.items():
                if e > width:
                    raise AlignmentError(f"terminal {nid} aligned to [{s}, {e}) beyond length {width}")
                rows += [base + nid] * (e - s)
                pos += [b * width + p for p in range(s, e)]
            base += item.graph.num_nodes
        else:
            for sub, sub_subs, nid, p in item.prefixes():
                if p > width:
                    raise AlignmentError(f"position {p} beyond length {width}")
                if p == width:  # the sequence ends with this terminal
                    continue
                graphs.append(sub)
                subs.append(sub_subs)
                rows.append(base + nid)
                pos.append(b * width + p)
                base += sub.num_nodes
    if not rows:
        return None
    h = expert(make_batch(graphs, subs), token_embedding)
    picked = tc.embedding_lookup(h, np.asarray(rows))
    flat = tc.scatter_add_rows(picked, np.asarray(pos), batch * width)
    return tc.reshape(flat, (batch, width, h.shape[1]))


def fuse_states(h_theta: Tensor, items: Sequence[GraphItem | None], expert: GraphExpert,
                plan: FusionPlan, token_embedding: Tensor) -> Tensor:
    """h_f = h_theta + lam * h_g at aligned positions."""
    if plan.lam == 0.0:
        return h_theta
    if h_theta.shape[2] != expert.cfg.hidden_dim:
        raise tc.ShapeMismatch(f"site width {h_theta.shape[2]} != GNN width {expert.cfg.hidden_dim}")
    b, t, _ = h_theta.shape
    c = graph_contribution(items, expert, token_embedding, b, t, plan.mode)
    if c is None:
        return h_theta
    return tc.add(h_theta, tc.mul_scalar(c, plan.lam))


class FusedModel:
    """A PLM with one graph expert per fusion site."""

    def __init__(self, plm: Plm, plan: FusionPlan, experts: dict[Site, GraphExpert] | None = None,
                 rng: np.random.Generator | None = None):
        self.plm = plm
        self.plan = plan
        self.sites = plan.resolved_sites(plm)
        if plan.gnn.hidden_dim != plm.cfg.hidden_dim:
            raise tc.ShapeMismatch("GNN hidden_dim must equal the PLM hidden_dim")
        if experts is None:
            experts = {s: GraphExpert(plan.gnn, rng, prefix=site_prefix(s)) for s in self.sites}
        self.experts = experts

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.plm.params)
        for e in self.experts.values():
            out.update(e.params)
        return out

    def hooks(self, items: Sequence[GraphItem | None], mode: str | None = None):
        plan = self.plan if mode is None else _with_mode(self.plan, mode)
        emb = self.plm.token_embedding

        def make(site):
            def hook(x: Tensor, meta: HookMeta) -> Tensor:
                return fuse_states(x, items, self.experts[site], plan, emb)
            return hook

        return {s: make(s) for s in self.sites if s.stack == "dec"}

    def loss(self, pairs, items, rng=None) -> Tensor:
        return self.plm.loss(pairs, self.hooks(items), rng)

    def save(self, path) -> None:
        self.plm.save(path)
        tc.save_checkpoint(path, self.params)


def site_prefix(site: Site) -> str:
    return f"gnn.{site}."


def _with_mode(plan: FusionPlan, mode: str) -> FusionPlan:
    return FusionPlan(plan.lam, plan.sites, plan.gnn, mode, plan.warmup_epochs, plan.stride)


def expert_for_site(pretrained: GraphExpert, site: Site) -> GraphExpert:
    """Copy pre-trained GNN weights under the site's name prefix."""
    params = {}
    for name, t in pretrained.params.items():
        new = site_prefix(site) + name[len(pretrained.prefix):]
        params[new] = tc.parameter(t.data.copy(), new)
    return GraphExpert(pretrained.cfg, prefix=site_prefix(site), params=params)


def fused_train(model: FusedModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                items: Sequence[GraphItem | None], cfg: TrainConfig, log=None):
    """Warmup epochs train only GNN parameters; later epochs train everything."""
    for i, item in enumerate(items):
        if item is None:
            raise MissingGraph(i)
    warm = model.plan.warmup_epochs

    def trainable(name: str, epoch: int) -> bool:
        return epoch > warm or name.startswith("gnn.")

    def loss_fn(idx, rng):
        return model.loss([pairs[i] for i in idx], [items[i] for i in idx], rng)

    return fit(model.params, loss_fn, len(pairs), cfg, trainable, log=log)


# ---------------------------------------------------------------------------
# generation with graphs rebuilt from the hypothesis


def hypothesis_item(ids: Sequence[int], vocab: Vocab, offset: int = 1, final: bool = False) -> GraphItem | None:
    """Tolerant-parse the detokenised hypothesis and align by byte spans.

    Unless ``final``, a last token that runs to the end of the text is left
    unaligned: the next subtoken may still extend it.
    """
    data = decode_bytes(ids, vocab)
    try:
        text = data.decode("utf-8")
        tokens = tokenize(text)
    except (UnicodeDecodeError, InvalidCharacter):
        return None
    if not tokens:
        return None
    g = build_code_graph(parse(tokens, tolerant=True, start="method"))
    spans = subtoken_char_spans(ids, vocab)
    owner: list[int | None] = []
    k = 0
    for a, b in spans:
        while k < len(tokens) and tokens[k].span[1] <= a:
            k += 1
        owner.append(k if k < len(tokens) and tokens[k].span[0] < b else None)
    subs = [[] for _ in tokens]
    for tid, o in zip(ids, owner):
        if o is not None:
            subs[o].append(tid)
    try:
        alignment = align_terminals(g, owner, offset=offset, strict=False)
    except AlignmentError:
        return None
    if not final:
        for k in _open_tokens(tokens, len(data)):
            alignment.pop(g.terminal_nodes[k][0], None)
    return GraphItem(g, subs, alignment)


def _open_tokens(tokens: Sequence[CodeToken], end: int) -> range:
    """Indices of trailing tokens that more text could still change."""
    if tokens[-1].span[1] < end:
        return range(0)
    first = len(tokens) - 1
    # "1." may still become "1.5"
    if (tokens[-1].text == "." and first > 0 and tokens[-2].kind is TokenKind.LITERAL
            and tokens[-2].text[-1].isdigit() and tokens[-2].span[1] == tokens[-1].span[0]):
        first -= 1
    return range(first, len(tokens))


def fused_generate(model: FusedModel, src: Sequence[int], vocab: Vocab, max_steps: int = 64,
                   beam: int = 1) -> list[int]:
    """Decode with the graph term computed causally from the hypothesis so far."""
    if model.plan.lam == 0.0:
        return model.plm.generate(src, "greedy" if beam == 1 else "beam", beam, max_steps)
    stride = model.plan.stride
    cache: dict[int, tuple[int, GraphItem | None]] = {}

    def step_hook(prefix: list[int]):
        n = len(prefix)
        key = id(prefix) if beam > 1 else 0
        last = cache.get(key)
        if last is None or n - last[0] >= stride or beam > 1:
            item = hypothesis_item(prefix, vocab) if n else None
            cache[key] = (n, item)
        else:
            item = last[1]
        return model.hooks([item], mode="causal")

    return model.plm.generate(src, "greedy" if beam == 1 else "beam", beam, max_steps, step_hook)


# ---------------------------------------------------------------------------
# teacher-forced predictions


def teacher_forced_ids(plm: Plm, pairs, hooks=None) -> list[list[int]]:
    """Arg-max prediction at every gold position, cut at the first EOS."""
    src = [s for s, _ in pairs]
    tgt_in, _ = decoder_io([t for _, t in pairs])
    with tc.no_grad():
        logits = plm.decode_train(tgt_in, plm.encode(src), hooks).data
    out = []
    for b, (_, t) in enumerate(pairs):
        pred = logits[b, :len(t) + 1].argmax(axis=1).tolist()
        out.append(pred[:pred.index(EOS)] if EOS in pred else pred)
    return out

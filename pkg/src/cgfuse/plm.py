"""A small pre-LN encoder-decoder transformer with hookable layer outputs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor
from .tokenizer import BOS, EOS, PAD


class TooLong(ValueError):
    pass


@dataclass
class PlmConfig:
    vocab_size: int
    enc_layers: int = 4
    dec_layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if min(self.enc_layers, self.dec_layers) < 0:
            raise ValueError("layer counts must be non-negative")

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "PlmConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class Site:
    """A layer boundary: the output of encoder or decoder layer ``index``."""

    stack: str  # "enc" | "dec"
    index: int

    def __str__(self) -> str:
        return f"{self.stack}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Site":
        text = text.strip()
        for stack in ("enc", "dec"):
            if text.startswith(stack) and text[len(stack):].lstrip("-").isdigit():
                return cls(stack, int(text[len(stack):]))
        raise ValueError(f"bad layer site {text!r}")


def encoder_layer_out(i: int) -> Site:
    return Site("enc", i)


def decoder_layer_out(i: int) -> Site:
    return Site("dec", i)


@dataclass
class HookMeta:
    site: Site
    valid: np.ndarray  # (B, T) True at non-pad positions


Hook = Callable[[Tensor, HookMeta], Tensor]


@dataclass
class EncoderOutput:
    states: list[Tensor]  # embeddings, then every layer output
    memory: Tensor  # final-normalised states consumed by cross-attention
    valid: np.ndarray


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def _lin(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return tc.add(tc.matmul(x, params[name + ".W"]), params[name + ".b"])


class Plm:
    def __init__(self, cfg: PlmConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init(rng)

    # -- parameters ---------------------------------------------------------

    def _init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.cfg
        d = c.hidden_dim
        p: dict[str, Tensor] = {}

        def normal(name, shape):
            p[name] = tc.parameter(tc.init_normal(rng, shape, 0.02), name)

        def linear(name, fan_in, fan_out):
            normal(name + ".W", (fan_in, fan_out))
            p[name + ".b"] = tc.parameter(np.zeros(fan_out), name + ".b")

        def norm(name):
            p[name + ".g"] = tc.parameter(np.ones(d), name + ".g")
            p[name + ".b"] = tc.parameter(np.zeros(d), name + ".b")

        def attention(name):
            for part in ("q", "k", "v", "o"):
                linear(f"{name}.{part}", d, d)

        normal("plm.tok_emb", (c.vocab_size, d))
        normal("plm.enc_pos", (c.max_len, d))
        normal("plm.dec_pos", (c.max_len, d))
        for i in range(c.enc_layers):
            base = f"plm.enc{i}"
            norm(base + ".ln1")
            attention(base + ".self")
            norm(base + ".ln2")
            linear(base + ".ff1", d, c.ffn_dim)
            linear(base + ".ff2", c.ffn_dim, d)
        for i in range(c.dec_layers):
            base = f"plm.dec{i}"
            norm(base + ".ln1")
            attention(base + ".self")
            norm(base + ".ln2")
            attention(base + ".cross")
            norm(base + ".ln3")
            linear(base + ".ff1", d, c.ffn_dim)
            linear(base + ".ff2", c.ffn_dim, d)
        norm("plm.enc_ln")
        norm("plm.dec_ln")
        return p

    @property
    def embed_scale(self) -> float:
        return math.sqrt(self.cfg.hidden_dim)

    @property
    def token_embedding(self) -> Tensor:
        """Input token vectors as the first layer sees them (table scaled by sqrt(d))."""
        return tc.mul_scalar(self.params["plm.tok_emb"], self.embed_scale)

    # -- building blocks ----------------------------------------------------

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _drop(self, x: Tensor, rng) -> Tensor:
        if rng is None or self.cfg.dropout == 0.0:
            return x
        return tc.dropout(x, self.cfg.dropout, rng)

    def _attention(self, name: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        """Multi-head attention; ``mask`` is (B, Tq, Tk) with True = may attend."""
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.cfg.heads
        dh = d // h

        def heads(x, t):
            return tc.reshape(tc.transpose(tc.reshape(x, (b, t, h, dh)), (0, 2, 1, 3)), (b * h, t, dh))

        q = heads(_lin(self.params, name + ".q", xq), tq)
        k = heads(_lin(self.params, name + ".k", xkv), tk)
        v = heads(_lin(self.params, name + ".v", xkv), tk)
        scores = tc.mul_scalar(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        probs = tc.softmax(scores, axis=-1, mask=np.repeat(mask, h, axis=0))
        out = tc.matmul(probs, v)
        out = tc.reshape(tc.transpose(tc.reshape(out, (b, h, tq, dh)), (0, 2, 1, 3)), (b, tq, d))
        return _lin(self.params, name + ".o", out)

    def _ffn(self, base: str, x: Tensor, rng) -> Tensor:
        return self._drop(_lin(self.params, base + ".ff2", tc.gelu(_lin(self.params, base + ".ff1", x))), rng)

    def _embed(self, ids: np.ndarray, table: str) -> Tensor:
        t = ids.shape[1]
        tok = tc.mul_scalar(tc.embedding_lookup(self.params["plm.tok_emb"], ids), self.embed_scale)
        pos = tc.slice_(self.params[table], 0, t, axis=0)
        return tc.add(tok, _broadcast_rows(pos, ids.shape[0]))

    # -- public API ---------------------------------------------------------

    def encode(self, src: Sequence[Sequence[int]], hooks: dict[Site, Hook] | None = None,
               rng: np.random.Generator | None = None) -> EncoderOutput:
        if any(len(s) > self.cfg.max_len for s in src):
            raise TooLong(f"source longer than max_len={self.cfg.max_len}")
        ids, valid = pad_batch(src)
        hooks = hooks or {}
        x = self._drop(self._embed(ids, "plm.enc_pos"), rng)
        states = [x]
        mask = np.broadcast_to(valid[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        for i in range(self.cfg.enc_layers):
            base = f"plm.enc{i}"
            y = self._norm(base + ".ln1", x)
            x = tc.add(x, self._drop(self._attention(base + ".self", y, y, mask), rng))
            x = tc.add(x, self._ffn(base, self._norm(base + ".ln2", x), rng))
            site = Site("enc", i)
            if site in hooks:
                x = _checked(hooks[site](x, HookMeta(site, valid)), x)
            states.append(x)
        return EncoderOutput(states, self._norm("plm.enc_ln", x), valid)

    def decode_states(self, tgt_in: Sequence[Sequence[int]], enc: EncoderOutput,
                      hooks: dict[Site, Hook] | None = None,
                      rng: np.random.Generator | None = None) -> list[Tensor]:
        """Decoder embeddings followed by every decoder layer's output."""
        if any(len(s) > self.cfg.max_len for s in tgt_in):
            raise TooLong(f"target longer than max_len={self.cfg.max_len}")
        ids, valid = pad_batch(tgt_in)
        hooks = hooks or {}
        b, t = ids.shape
        causal = np.tril(np.ones((t, t), dtype=bool))[None] & valid[:, None, :]
        cross = np.broadcast_to(enc.valid[:, None, :], (b, t, enc.valid.shape[1]))
        x = self._drop(self._embed(ids, "plm.dec_pos"), rng)
        states = [x]
        for i in range(self.cfg.dec_layers):
            base = f"plm.dec{i}"
            y = self._norm(base + ".ln1", x)
            x = tc.add(x, self._drop(self._attention(base + ".self", y, y, causal), rng))
            y = self._norm(base + ".ln2", x)
            x = tc.add(x, self._drop(self._attention(base + ".cross", y, enc.memory, cross), rng))
            x = tc.add(x, self._ffn(base, self._norm(base + ".ln3", x), rng))
            site = Site("dec", i)
            if site in hooks:
                x = _checked(hooks[site](x, HookMeta(site, valid)), x)
            states.append(x)
        return states

    def logits_from_state(self, x: Tensor) -> Tensor:
        h = self._norm("plm.dec_ln", x)
        return tc.matmul(h, tc.transpose(self.params["plm.tok_emb"], (1, 0)))

    def decode_train(self, tgt_in: Sequence[Sequence[int]], enc: EncoderOutput,
                     hooks: dict[Site, Hook] | None = None,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced logits (B, T, V) for decoder inputs ``tgt_in``."""
        return self.logits_from_state(self.decode_states(tgt_in, enc, hooks, rng)[-1])

    def loss(self, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
             hooks: dict[Site, Hook] | None = None, rng: np.random.Generator | None = None) -> Tensor:
        """Mean next-subtoken cross-entropy over (source ids, code ids) pairs."""
        src = [s for s, _ in pairs]
        tgt_in, tgt_out = decoder_io([t for _, t in pairs])
        enc = self.encode(src, hooks, rng)
        logits = self.decode_train(tgt_in, enc, hooks, rng)
        out, _ = pad_batch(tgt_out)
        flat = tc.reshape(logits, (-1, logits.shape[-1]))
        return tc.cross_entropy(flat, out.reshape(-1), ignore_index=PAD)

    def generate(self, src: Sequence[int], mode: str = "greedy", beam: int = 1, max_steps: int = 64,
                 step_hook: Callable[[list[int]], dict[Site, Hook] | None] | None = None) -> list[int]:
        """Decode subtoken ids (without BOS/EOS) for one source sequence."""
        if max_steps <= 0:
            return []
        max_steps = min(max_steps, self.cfg.max_len - 1)
        with tc.no_grad():
            enc = self.encode([src])
            if mode == "greedy" or beam == 1:
                return self._greedy(enc, max_steps, step_hook)
            return self._beam(enc, beam, max_steps, step_hook)

    def _step_logp(self, enc: EncoderOutput, prefixes: list[list[int]], step_hook) -> np.ndarray:
        rows = []
        if step_hook is None:
            tiled = EncoderOutput(enc.states, _tile(enc.memory, len(prefixes)), np.repeat(enc.valid, len(prefixes), 0))
            logits = self.decode_train([[BOS] + p for p in prefixes], tiled)
            rows = [logits.data[i, len(p)] for i, p in enumerate(prefixes)]
        else:
            for p in prefixes:
                hooks = step_hook(list(p))
                logits = self.decode_train([[BOS] + p], enc, hooks)
                rows.append(logits.data[0, len(p)])
        x = np.stack(rows).astype(np.float64)
        x -= x.max(axis=1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    def _greedy(self, enc, max_steps, step_hook) -> list[int]:
        out: list[int] = []
        for _ in range(max_steps):
            nxt = int(np.argmax(self._step_logp(enc, [out], step_hook)[0]))
            if nxt == EOS:
                break
            out.append(nxt)
        return out

    def _beam(self, enc, k, max_steps, step_hook) -> list[int]:
        live: list[tuple[float, list[int]]] = [(0.0, [])]
        done: list[tuple[float, list[int]]] = []
        for _ in range(max_steps):
            logp = self._step_logp(enc, [p for _, p in live], step_hook)
            cands = []
            for (score, p), row in zip(live, logp):
                # stable top-k: highest score, then smallest id
                for tid in np.lexsort((np.arange(len(row)), -row))[:k]:
                    cands.append((score + float(row[tid]), p, int(tid)))
            cands.sort(key=lambda c: (-c[0], c[1] + [c[2]]))
            live = []
            for score, p, tid in cands:
                if tid == EOS:
                    done.append((score, p))
                else:
                    live.append((score, p + [tid]))
                if len(live) == k:
                    break
            if not live or (len(done) >= k and max(s for s, _ in done) >= live[0][0]):
                break
        pool = done or live
        return max(pool, key=lambda c: (c[0], [-i for i in c[1]]))[1]

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        tc.save_checkpoint(path, self.params)
        Path(str(path) + ".config").write_text(self.cfg.to_text() + "\n")

    @classmethod
    def load(cls, path) -> "Plm":
        cfg = PlmConfig.from_text(Path(str(path) + ".config").read_text())
        raw = tc.load_checkpoint(path)
        params = {k: tc.parameter(v, k) for k, v in raw.items() if k.startswith("plm.")}
        return cls(cfg, params=params)


def _broadcast_rows(pos: Tensor, batch: int) -> Tensor:
    """(T, D) position table -> (B, T, D) by repeated concatenation."""
    t, d = pos.shape
    return tc.reshape(tc.concat([tc.reshape(pos, (1, t, d))] * batch, axis=0), (batch, t, d))


def _tile(x: Tensor, n: int) -> Tensor:
    return x if n == 1 else tc.concat([x] * n, axis=0)


def _checked(out: Tensor, ref: Tensor) -> Tensor:
    if out.shape != ref.shape:
        raise tc.ShapeMismatch(f"hook returned {out.shape}, expected {ref.shape}")
    return out


def decoder_io(codes: Iterable[Sequence[int]]) -> tuple[list[list[int]], list[list[int]]]:
    """Decoder inputs [BOS]+code and targets code+[EOS]; code subtoken j sits at input position j+1."""
    codes = [list(c) for c in codes]
    return [[BOS] + c for c in codes], [c + [EOS] for c in codes]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 1.0
    seed: int = 0


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled mini-batches; depends only on (n, batch_size, seed, epoch)."""
    perm = tc.rng_for(seed, "order", epoch).permutation(n)
    return [sorted(perm[k:k + batch_size].tolist()) for k in range(0, n, batch_size)]


def fit(params: dict[str, Tensor], loss_fn: Callable[[list[int], np.random.Generator], Tensor],
        n: int, cfg: TrainConfig, trainable: Callable[[str, int], bool] = lambda name, epoch: True,
        state: tc.AdamState | None = None, log=None) -> TrainLog:
    """Generic mini-batch Adam loop; ``loss_fn(batch_indices, rng)`` builds the loss."""
    state = state or tc.AdamState()
    out = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        active = {k: v for k, v in params.items() if trainable(k, epoch)}
        total, steps = 0.0, 0
        for bi, idx in enumerate(batch_order(n, cfg.batch_size, cfg.seed, epoch)):
            rng = tc.rng_for(cfg.seed, "dropout", epoch, bi)
            with tc.Tape():
                loss = loss_fn(idx, rng)
                grads = tc.backward(loss, list(active.values()))
            named = {k: grads[t] for k, t in active.items()}
            if cfg.clip:
                tc.clip_grad_norm(named, cfg.clip)
            tc.adam_step(active, named, state, cfg.lr)
            total += loss.item()
            steps += 1
        out.epochs.append({"epoch": epoch, "loss": total / max(steps, 1)})
        if log is not None:
            log(f"epoch {epoch}: loss {total / max(steps, 1):.4f}")
    return out


def train_plm(model: Plm, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], cfg: TrainConfig,
              log=None) -> TrainLog:
    return fit(model.params, lambda idx, rng: model.loss([pairs[i] for i in idx], rng=rng),
               len(pairs), cfg, log=log)

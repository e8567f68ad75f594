"""Predicting verb attributes from word embeddings and dictionary definitions.

Encoders map a verb (and optionally one of its definitions) to a fixed-width
vector; per-attribute linear heads turn that vector into a sigmoid (binary)
or softmax (categorical) distribution.  Encoder kinds:

``emb``            the verb's word embedding
``bow``            set-of-words indicator over a frequency vocabulary
``nbow``           mean of the definition's word embeddings
``bgru``           bidirectional GRU over the definition tokens
``<def>+emb``      concatenation of a definition encoding and the embedding
"""

from __future__ import annotations

import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import gru
from .numkernel import AdamState, adam_step, cosine, cosine_grad, log_sigmoid, log_softmax, sigmoid, softmax
from .prng import Prng
from .schema import AttributeSchema

log = logging.getLogger(__name__)

ENCODER_KINDS = ("emb", "bow", "nbow", "bgru", "bow+emb", "nbow+emb", "bgru+emb")
UNK = "<unk>"

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


class EmbeddingTable:
    """Token -> vector lookup; absent tokens give the zero vector and count a miss."""

    def __init__(self, tokens: Sequence[str], vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
            raise ValueError(f"{len(tokens)} tokens but vectors of shape {vectors.shape}")
        self.tokens = list(tokens)
        self.vectors = vectors
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.misses = 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def get(self, token: str) -> np.ndarray:
        i = self.index.get(token)
        if i is None:
            self.misses += 1
            return np.zeros(self.dim)
        return self.vectors[i]

    def verb_vector(self, template: str) -> np.ndarray:
        """Embedding of a verb template.

        An exact row (``"put up"`` or ``"put_up"``) wins; otherwise the mean of
        the known token vectors is used.
        """
        for key in (template, template.replace(" ", "_")):
            if key in self.index:
                return self.vectors[self.index[key]]
        parts = template.split()
        known = [p for p in parts if p in self.index]
        if not known:
            raise KeyError(f"no embedding for verb {template!r} (tokens {parts})")
        self.misses += len(parts) - len(known)
        return np.mean([self.vectors[self.index[p]] for p in known], axis=0)


class DefinitionCorpus(dict):
    """verb template -> ordered list of tokenized definitions (most relevant first)."""

    def first(self, verb: str) -> list[str]:
        defs = self.get(verb)
        if not defs:
            raise KeyError(f"no definitions for verb {verb!r}")
        return defs[0]


class Vocab:
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("vocabulary contains duplicates")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, w: str) -> bool:
        return w in self.index

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]], size: int, reserve: Sequence[str] = ()):
        """Top ``size`` tokens by frequency (ties alphabetical), after ``reserve``."""
        counts = Counter(t for toks in token_lists for t in toks)
        for r in reserve:
            counts.pop(r, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        n = max(0, size - len(reserve))
        return cls(list(reserve) + [w for w, _ in ranked[:n]])


def encode_bow(tokens: Sequence[str], vocab: Vocab) -> np.ndarray:
    out = np.zeros(len(vocab))
    for t in tokens:
        i = vocab.index.get(t)
        if i is not None:
            out[i] = 1.0
    return out


def encode_nbow(tokens: Sequence[str], embeddings: EmbeddingTable) -> np.ndarray:
    if not tokens:
        raise ValueError("cannot average an empty definition")
    return np.mean([embeddings.get(t) for t in tokens], axis=0)


def encode_emb(verb: str, embeddings: EmbeddingTable) -> np.ndarray:
    return embeddings.verb_vector(verb)


def fuse(encodings: Sequence[np.ndarray]) -> np.ndarray:
    if not encodings:
        raise ValueError("nothing to fuse")
    return np.concatenate([np.asarray(e, dtype=np.float64) for e in encodings], axis=-1)


def split_fused(encoding: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    cuts = np.cumsum(widths)[:-1]
    return np.split(encoding, cuts, axis=-1)


# ---------------------------------------------------------------------------
# BGRU encoder


@dataclass
class BGRUEncoder:
    """Bidirectional GRU over token embeddings; output is ``h_fwd[T] || h_bwd[1]``.

    Gate blocks in ``wx_*``/``u_*``/``b_*`` are ordered reset, update, candidate.
    """

    vocab: Vocab
    embed: np.ndarray
    wx_f: np.ndarray
    u_f: np.ndarray
    b_f: np.ndarray
    wx_b: np.ndarray
    u_b: np.ndarray
    b_b: np.ndarray
    max_len: int = 32
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        vocab: Vocab,
        hidden: int,
        embed_dim: int,
        rng: np.random.Generator,
        embeddings: EmbeddingTable | None = None,
        max_len: int = 32,
    ) -> "BGRUEncoder":
        embed = rng.normal(0.0, 0.1, size=(len(vocab), embed_dim))
        if embeddings is not None:
            if embeddings.dim != embed_dim:
                raise ValueError(f"embedding dim {embeddings.dim} != {embed_dim}")
            for i, w in enumerate(vocab.words):
                if w in embeddings:
                    embed[i] = embeddings.vectors[embeddings.index[w]]
        s = 1.0 / np.sqrt(hidden)
        mk = lambda *shape: rng.uniform(-s, s, size=shape)  # noqa: E731
        return cls(
            vocab, embed,
            mk(3 * hidden, embed_dim), mk(3 * hidden, hidden), np.zeros(3 * hidden),
            mk(3 * hidden, embed_dim), mk(3 * hidden, hidden), np.zeros(3 * hidden),
            max_len=max_len,
        )

    @property
    def hidden(self) -> int:
        return self.u_f.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def gru_params(self) -> list[np.ndarray]:
        return [self.wx_f, self.u_f, self.b_f, self.wx_b, self.u_b, self.b_b]

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        if not tokens:
            raise ValueError("BGRU needs at least one token")
        unk = self.vocab.index.get(UNK, 0)
        return [self.vocab.index.get(t, unk) for t in tokens[: self.max_len]]

    def forward(self, batch: Sequence[Sequence[str]]):
        ids_list = [self.token_ids(toks) for toks in batch]
        B = len(ids_list)
        lengths = np.array([len(x) for x in ids_list], dtype=np.int64)
        T = int(lengths.max()) if B else 0
        ids = np.zeros((B, T), dtype=np.int64)
        rev = np.zeros((B, T), dtype=np.int64)
        for i, x in enumerate(ids_list):
            ids[i, : len(x)] = x
            rev[i, : len(x)] = x[::-1]
        xf = self.embed[ids]
        xb = self.embed[rev]
        cf = gru.gru_forward(xf @ self.wx_f.T + self.b_f, lengths, self.u_f)
        cb = gru.gru_forward(xb @ self.wx_b.T + self.b_b, lengths, self.u_b)
        out = np.concatenate([cf[0][:, T], cb[0][:, T]], axis=1)
        return out, (ids, rev, lengths, xf, xb, cf, cb)

    def encode(self, batch: Sequence[Sequence[str]]) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(self, dout: np.ndarray, cache, embed_grad: bool = False) -> list[np.ndarray]:
        """Gradients for :meth:`gru_params` (plus ``embed`` when requested)."""
        ids, rev, lengths, xf, xb, cf, cb = cache
        H = self.hidden
        dgx_f, du_f = gru.gru_backward(dout[:, :H], lengths, self.u_f, *cf)
        dgx_b, du_b = gru.gru_backward(dout[:, H:], lengths, self.u_b, *cb)
        E = self.embed.shape[1]
        dwx_f = dgx_f.reshape(-1, 3 * H).T @ xf.reshape(-1, E)
        dwx_b = dgx_b.reshape(-1, 3 * H).T @ xb.reshape(-1, E)
        grads = [dwx_f, du_f, dgx_f.sum(axis=(0, 1)), dwx_b, du_b, dgx_b.sum(axis=(0, 1))]
        if embed_grad:
            dembed = np.zeros_like(self.embed)
            # padded steps have zero dgx, so the pad id receives nothing
            np.add.at(dembed, ids.reshape(-1), (dgx_f @ self.wx_f).reshape(-1, E))
            np.add.at(dembed, rev.reshape(-1), (dgx_b @ self.wx_b).reshape(-1, E))
            grads.append(dembed)
        return grads

    def copy(self) -> "BGRUEncoder":
        return BGRUEncoder(
            Vocab(self.vocab.words), self.embed.copy(),
            *(p.copy() for p in self.gru_params()), max_len=self.max_len,
            history=list(self.history),
        )


# ---------------------------------------------------------------------------
# attribute heads


def head_probs(logits: np.ndarray, schema: AttributeSchema) -> np.ndarray:
    """Per-block probabilities: softmax for categorical blocks, sigmoid for binary."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    out = np.empty_like(logits)
    for k, s in enumerate(schema.specs):
        sl = schema.block(k)
        out[:, sl] = sigmoid(logits[:, sl]) if s.binary else softmax(logits[:, sl], axis=1)
    return out


def probs_to_labels(probs: np.ndarray, schema: AttributeSchema) -> np.ndarray:
    probs = np.atleast_2d(probs)
    out = np.zeros((probs.shape[0], schema.K), dtype=np.int64)
    for k, s in enumerate(schema.specs):
        sl = schema.block(k)
        if s.binary:
            out[:, k] = (probs[:, sl][:, 0] > 0.5).astype(np.int64)
        else:
            out[:, k] = np.argmax(probs[:, sl], axis=1)
    return out


def head_loss(logits: np.ndarray, labels: np.ndarray, schema: AttributeSchema):
    """Summed per-attribute cross-entropy, averaged over rows, and its logit gradient."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_2d(labels)
    N = logits.shape[0]
    loss = 0.0
    d = np.empty_like(logits)
    rows = np.arange(N)
    for k, s in enumerate(schema.specs):
        sl = schema.block(k)
        y = labels[:, k]
        if s.binary:
            x = logits[:, sl][:, 0]
            loss -= np.sum(y * log_sigmoid(x) + (1 - y) * log_sigmoid(-x))
            d[:, sl] = (sigmoid(x) - y)[:, None]
        else:
            lp = log_softmax(logits[:, sl], axis=1)
            loss -= np.sum(lp[rows, y])
            g = np.exp(lp)
            g[rows, y] -= 1.0
            d[:, sl] = g
    return loss / N, d / N


def predict_attributes(encoding, model: "AttrModel") -> list[np.ndarray]:
    """Distribution over values for every attribute of one encoding.

    Binary attributes are returned as ``[1 - p, p]``.
    """
    enc = np.asarray(encoding, dtype=np.float64)
    if enc.shape != (model.in_dim,):
        raise ValueError(f"encoding width {enc.shape} does not match head width {model.in_dim}")
    probs = head_probs(model.W @ enc + model.b, model.schema)[0]
    out = []
    for k, s in enumerate(model.schema.specs):
        block = probs[model.schema.block(k)]
        out.append(np.array([1.0 - block[0], block[0]]) if s.binary else block)
    return out


@dataclass
class AttrModel:
    kind: str
    schema: AttributeSchema
    W: np.ndarray
    b: np.ndarray
    emb_dim: int = 0
    bow_vocab: Vocab | None = None
    bgru: BGRUEncoder | None = None
    dropout: float = 0.0
    history: list[float] = field(default_factory=list)

    @property
    def definition_kind(self) -> str | None:
        head = self.kind.split("+")[0]
        return None if head == "emb" else head

    @property
    def uses_emb(self) -> bool:
        return "emb" in self.kind.split("+")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def block_widths(self) -> list[int]:
        widths = []
        dk = self.definition_kind
        if dk == "bow":
            widths.append(len(self.bow_vocab))
        elif dk == "nbow":
            widths.append(self.emb_dim)
        elif dk == "bgru":
            widths.append(self.bgru.out_dim)
        if self.uses_emb:
            widths.append(self.emb_dim)
        return widths

    def trainable(self) -> list[np.ndarray]:
        params = [self.W, self.b]
        if self.bgru is not None:
            params += self.bgru.gru_params()
        return params

    def _static(self, instances, embeddings) -> list[np.ndarray]:
        blocks = []
        dk = self.definition_kind
        if dk == "bow":
            blocks.append(np.array([encode_bow(toks, self.bow_vocab) for _, toks in instances]))
        elif dk == "nbow":
            blocks.append(np.array([encode_nbow(toks, embeddings) for _, toks in instances]))
        if self.uses_emb:
            blocks.append(np.array([encode_emb(v, embeddings) for v, _ in instances]))
        return blocks

    def encode(self, instances: Sequence[tuple[str, Sequence[str] | None]], embeddings=None,
               rng: np.random.Generator | None = None):
        """Encode ``(verb, definition tokens)`` pairs; ``rng`` turns on dropout."""
        static = self._static(instances, embeddings)
        cache = None
        mask = None
        if self.definition_kind == "bgru":
            hb, cache = self.bgru.forward([toks for _, toks in instances])
            if rng is not None and self.dropout > 0:
                keep = 1.0 - self.dropout
                mask = (rng.random(hb.shape) < keep) / keep
                hb = hb * mask
            static = [hb] + static
        F = np.concatenate(static, axis=1) if static else np.zeros((len(instances), 0))
        return F, (cache, mask)

    def logits(self, instances, embeddings=None) -> np.ndarray:
        F, _ = self.encode(instances, embeddings)
        return F @ self.W.T + self.b

    def loss_and_grads(self, instances, labels, embeddings=None, rng=None, l2: float = 0.0):
        F, (cache, mask) = self.encode(instances, embeddings, rng)
        logits = F @ self.W.T + self.b
        loss, dlog = head_loss(logits, labels, self.schema)
        gW = dlog.T @ F
        gb = dlog.sum(axis=0)
        grads = [gW, gb]
        if l2:
            loss += 0.5 * l2 * float(np.sum(self.W * self.W))
            gW += l2 * self.W
        if self.bgru is not None:
            H2 = self.bgru.out_dim
            dF = dlog @ self.W
            dh = dF[:, :H2]
            if mask is not None:
                dh = dh * mask
            ggru = self.bgru.backward(dh, cache)
            if l2:
                loss += 0.5 * l2 * sum(float(np.sum(p * p)) for p in (self.bgru.wx_f, self.bgru.u_f,
                                                                       self.bgru.wx_b, self.bgru.u_b))
                for gi in (0, 1, 3, 4):
                    ggru[gi] = ggru[gi] + l2 * self.bgru.gru_params()[gi]
            grads += ggru
        return loss, grads

    def predict_probs(self, instances, embeddings=None) -> np.ndarray:
        return head_probs(self.logits(instances, embeddings), self.schema)

    def predict_labels(self, instances, embeddings=None) -> np.ndarray:
        return probs_to_labels(self.predict_probs(instances, embeddings), self.schema)

    def predict_verbs(self, verbs: Sequence[str], embeddings=None, definitions=None) -> dict[str, np.ndarray]:
        """Hard labels per verb, using only the first definition of each verb."""
        insts = eval_instances(verbs, definitions if self.definition_kind else None)
        if not insts:
            return {}
        labels = self.predict_labels(insts, embeddings)
        return {v: labels[i] for i, v in enumerate(verbs)}

    # serialization hooks used by dataio.save_model
    def to_state(self):
        meta = {"kind": self.kind, "emb_dim": self.emb_dim, "dropout": self.dropout}
        arrays = {"W": self.W, "b": self.b}
        if self.bow_vocab is not None:
            meta["bow_vocab"] = self.bow_vocab.words
        if self.bgru is not None:
            meta.update(encoder_meta(self.bgru))
            arrays.update(encoder_arrays(self.bgru))
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays, schema):
        bgru_enc = encoder_from_state(meta, arrays) if "bgru_vocab" in meta else None
        bow = Vocab(meta["bow_vocab"]) if "bow_vocab" in meta else None
        return cls(meta["kind"], schema, arrays["W"], arrays["b"], meta["emb_dim"], bow, bgru_enc,
                   meta.get("dropout", 0.0))


def encoder_meta(enc: BGRUEncoder) -> dict:
    return {"bgru_vocab": enc.vocab.words, "max_len": enc.max_len}


def encoder_arrays(enc: BGRUEncoder) -> dict[str, np.ndarray]:
    names = ["wx_f", "u_f", "b_f", "wx_b", "u_b", "b_b"]
    out = {f"bgru.{n}": p for n, p in zip(names, enc.gru_params())}
    out["bgru.embed"] = enc.embed
    return out


def encoder_from_state(meta, arrays) -> BGRUEncoder:
    g = lambda n: arrays[f"bgru.{n}"]  # noqa: E731
    return BGRUEncoder(Vocab(meta["bgru_vocab"]), g("embed"), g("wx_f"), g("u_f"), g("b_f"),
                       g("wx_b"), g("u_b"), g("b_b"), max_len=meta["max_len"])


# ---------------------------------------------------------------------------
# training


def eval_instances(verbs: Sequence[str], definitions: Mapping[str, list] | None):
    if definitions is None:
        return [(v, None) for v in verbs]
    missing = [v for v in verbs if not definitions.get(v)]
    if missing:
        raise KeyError(f"no definitions for verb {missing[0]!r}")
    return [(v, definitions[v][0]) for v in verbs]


def oversample_definitions(corpus: Mapping[str, list], verbs: Sequence[str], seed: int = 0):
    """Every verb contributes ``M`` instances, ``M`` the largest definition count.

    Each verb keeps all of its own definitions; shortfalls are filled by
    drawing from that verb's definitions with replacement.
    """
    counts = []
    for v in verbs:
        defs = corpus.get(v) or []
        if not defs:
            raise ValueError(f"verb {v!r} has no definitions")
        counts.append(len(defs))
    if not counts:
        return []
    M = max(counts)
    rng = Prng(seed)
    out = []
    for v, n in zip(verbs, counts):
        defs = corpus[v]
        out.extend((v, d) for d in defs)
        out.extend((v, defs[rng.randint(n)]) for _ in range(M - n))
    return out


@dataclass
class AttrTrainConfig:
    kind: str = "emb"
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    eps: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    l2: float = 1e-4
    dropout: float = 0.5
    hidden: int = 300
    bow_size: int = 5000
    vocab_size: int = 30000
    max_len: int = 32
    seed: int = 0


def build_attr_model(config: AttrTrainConfig, schema: AttributeSchema, train_verbs, *,
                     embeddings: EmbeddingTable | None = None, definitions=None,
                     encoder: BGRUEncoder | None = None, rng: np.random.Generator | None = None) -> AttrModel:
    if config.kind not in ENCODER_KINDS:
        raise ValueError(f"unknown encoder kind {config.kind!r}; choose from {ENCODER_KINDS}")
    rng = rng if rng is not None else Prng(config.seed).numpy_generator()
    parts = config.kind.split("+")
    if ("emb" in parts or parts[0] == "nbow") and embeddings is None:
        raise ValueError(f"encoder {config.kind!r} needs an embedding table")
    emb_dim = embeddings.dim if embeddings is not None else 0
    bow_vocab = None
    bgru_enc = None
    width = 0
    train_defs = None
    if parts[0] != "emb":
        if definitions is None:
            raise ValueError(f"encoder {config.kind!r} needs definitions")
        train_defs = [d for v in train_verbs for d in definitions.get(v, [])]
    if parts[0] == "bow":
        bow_vocab = Vocab.build(train_defs, config.bow_size)
        width += len(bow_vocab)
    elif parts[0] == "nbow":
        width += emb_dim
    elif parts[0] == "bgru":
        if encoder is not None:
            bgru_enc = encoder.copy()
        else:
            vocab = Vocab.build(train_defs, config.vocab_size, reserve=[UNK])
            edim = emb_dim if embeddings is not None else config.hidden
            bgru_enc = BGRUEncoder.init(vocab, config.hidden, edim, rng, embeddings, config.max_len)
        width += bgru_enc.out_dim
    if "emb" in parts:
        width += emb_dim
    W = np.zeros((schema.width, width))
    b = np.zeros(schema.width)
    dropout = config.dropout if parts[0] == "bgru" else 0.0
    return AttrModel(config.kind, schema, W, b, emb_dim, bow_vocab, bgru_enc, dropout)


def train_attr_model(train_verbs: Sequence[str], gold: Mapping[str, np.ndarray], schema: AttributeSchema,
                     config: AttrTrainConfig, *, embeddings: EmbeddingTable | None = None,
                     definitions=None, encoder: BGRUEncoder | None = None) -> AttrModel:
    """Fit encoder + heads by Adam on the summed per-attribute cross-entropy.

    Definition encoders train on oversampled definitions; token embeddings of
    a BGRU stay frozen.  ``model.history`` holds the mean training loss before
    training followed by one entry per epoch.
    """
    train_verbs = list(train_verbs)
    if not train_verbs:
        raise ValueError("empty training set")
    prng = Prng(config.seed)
    rng = prng.numpy_generator()
    model = build_attr_model(config, schema, train_verbs, embeddings=embeddings,
                             definitions=definitions, encoder=encoder, rng=rng)
    if model.definition_kind is None:
        instances = [(v, None) for v in train_verbs]
    else:
        instances = oversample_definitions(definitions, train_verbs, seed=prng.next_u64())
    labels = np.array([schema.validate(gold[v], f"{v}: ") for v, _ in instances])
    if model.definition_kind in ("bow", "nbow") or model.definition_kind is None:
        # encoder has no parameters: encode once, train the heads on fixed features
        F, _ = model.encode(instances, embeddings)
        step = lambda idx, r: _fixed_loss(model, F[idx], labels[idx], config.l2)  # noqa: E731
        full = lambda: _fixed_loss(model, F, labels, config.l2)[0]  # noqa: E731
    else:
        step = lambda idx, r: model.loss_and_grads([instances[i] for i in idx], labels[idx],  # noqa: E731
                                                   embeddings, rng=r, l2=config.l2)
        full = lambda: _batched_eval_loss(model, instances, labels, embeddings, config)  # noqa: E731
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    params = model.trainable()
    model.history = [full()]
    N = len(instances)
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        for start in range(0, N, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grads = step(idx, rng)
            adam_step(params, grads, state)
        model.history.append(full())
        log.debug("epoch %d loss %.6f", epoch + 1, model.history[-1])
    return model


def _fixed_loss(model: AttrModel, F, labels, l2):
    logits = F @ model.W.T + model.b
    loss, dlog = head_loss(logits, labels, model.schema)
    gW = dlog.T @ F
    if l2:
        loss += 0.5 * l2 * float(np.sum(model.W * model.W))
        gW = gW + l2 * model.W
    return loss, [gW, dlog.sum(axis=0)]


def _batched_eval_loss(model, instances, labels, embeddings, config, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(instances), chunk):
        part = instances[s : s + chunk]
        loss, _ = head_loss(model.logits(part, embeddings), labels[s : s + chunk], model.schema)
        total += loss * len(part)
    reg = 0.5 * config.l2 * float(np.sum(model.W * model.W)) if config.l2 else 0.0
    return total / len(instances) + reg


# ---------------------------------------------------------------------------
# dictionary pretraining


def ranking_loss(w, w_hat, w_neg, margin: float = 0.1) -> float:
    """``max(0, margin - cos(w, w_hat) + cos(w, w_neg))``."""
    return max(0.0, margin - cosine(w, w_hat) + cosine(w, w_neg))


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 64
    eps: float = 1e-8
    margin: float = 0.1
    hidden: int = 300
    vocab_size: int = 30000
    max_len: int = 32
    train_embeddings: bool = True
    seed: int = 0


def pretraining_loss(encoder: BGRUEncoder, w_emb: np.ndarray, batch, targets, negatives,
                     margin: float = 0.1, embed_grad: bool = True):
    """Mean hinge over a batch and gradients for ``[*gru_params, (embed), w_emb]``."""
    f, cache = encoder.forward(batch)
    w_hat = f @ w_emb.T
    B = len(batch)
    d_hat = np.zeros_like(w_hat)
    loss = 0.0
    for i in range(B):
        if not np.any(w_hat[i]):
            l_i = margin - 0.0 + cosine(targets[i], negatives[i])
            loss += max(0.0, l_i)
            continue
        l_i = margin - cosine(targets[i], w_hat[i]) + cosine(targets[i], negatives[i])
        if l_i > 0:
            loss += l_i
            d_hat[i] = -cosine_grad(targets[i], w_hat[i])
    d_hat /= B
    grads = encoder.backward(d_hat @ w_emb, cache, embed_grad=embed_grad)
    grads.append(d_hat.T @ f)
    return loss / B, grads


def pretrain_definition_encoder(pairs: Sequence[tuple[str, Sequence[str]]], embeddings: EmbeddingTable,
                                config: PretrainConfig, encoder: BGRUEncoder | None = None) -> BGRUEncoder:
    """Train a BGRU to map a word's definition near the word's own embedding.

    ``pairs`` are ``(word, definition tokens)``.  A fresh negative word is
    drawn for every instance in every epoch.  The projection onto embedding
    space is discarded; ``encoder.history`` records the mean loss per epoch,
    starting with the loss before training.
    """
    pairs = [(w, list(t)) for w, t in pairs if t]
    if not pairs:
        raise ValueError("empty dictionary")
    words = sorted({w for w, _ in pairs})
    if len(words) < 2:
        raise ValueError("pretraining needs at least two distinct dictionary words")
    target = {w: embeddings.verb_vector(w) for w in words}
    prng = Prng(config.seed)
    rng = prng.numpy_generator()
    if encoder is None:
        vocab = Vocab.build([t for _, t in pairs] + [[w] for w in words], config.vocab_size, reserve=[UNK])
        encoder = BGRUEncoder.init(vocab, config.hidden, embeddings.dim, rng, embeddings, config.max_len)
    else:
        encoder = encoder.copy()
    s = 1.0 / np.sqrt(encoder.out_dim)
    w_emb = rng.uniform(-s, s, size=(embeddings.dim, encoder.out_dim))
    params = encoder.gru_params() + ([encoder.embed] if config.train_embeddings else []) + [w_emb]
    state = AdamState(lr=config.lr, eps=config.eps)

    def draw_negatives():
        negs = []
        for w, _ in pairs:
            while True:
                cand = words[prng.randint(len(words))]
                if cand != w:
                    break
            negs.append(target[cand])
        return negs

    def mean_loss(negs):
        tot = 0.0
        for s0 in range(0, len(pairs), 256):
            chunk = pairs[s0 : s0 + 256]
            f = encoder.encode([t for _, t in chunk])
            for (w, _), fh, neg in zip(chunk, f @ w_emb.T, negs[s0 : s0 + 256]):
                c_hat = cosine(target[w], fh) if np.any(fh) else 0.0
                tot += max(0.0, config.margin - c_hat + cosine(target[w], neg))
        return tot / len(pairs)

    negs = draw_negatives()
    encoder.history = [mean_loss(negs)]
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grads = pretraining_loss(
                encoder, w_emb, [pairs[i][1] for i in idx], [target[pairs[i][0]] for i in idx],
                [negs[i] for i in idx], config.margin, embed_grad=config.train_embeddings,
            )
            adam_step(params, grads, state)
        encoder.history.append(mean_loss(negs))
        negs = draw_negatives()
    return encoder

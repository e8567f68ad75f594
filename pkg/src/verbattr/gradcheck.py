"""Finite-difference checks for every trainable component at toy shapes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numkernel import grad_check
from .schema import AttributeSchema, build_schema
from .textattr import (
    UNK, AttrTrainConfig, BGRUEncoder, EmbeddingTable, Vocab, build_attr_model, pretraining_loss,
)
from .zeroshot import ZeroShotHead, dap_objective, devise_loss, eszl_gradient, eszl_objective, zeroshot_loss

TOLERANCE = 1e-4
ATTR_ENCODERS = ("emb", "bow", "nbow", "bgru", "bgru+emb")

_WORDS = ["run", "walk", "hit", "fast", "slow", "move", "object", "the", "legs", "hand"]
_DEFS = {
    "run": [["move", "fast", "legs"]],
    "walk": [["move", "slow"]],
    "hit": [["hand"]],
    "kick": [["hit", "object", "legs"]],
}


@dataclass(frozen=True)
class CheckResult:
    encoder: str
    head: str
    error: float

    @property
    def name(self) -> str:
        return f"{self.encoder}/{self.head}"


def _random_labels(schema: AttributeSchema, n: int, rng) -> np.ndarray:
    return np.stack([rng.integers(0, a, size=n) for a in schema.arities], axis=1)


def _toy_embeddings(rng, dim: int = 5) -> EmbeddingTable:
    words = _WORDS + ["kick"]
    return EmbeddingTable(words, rng.normal(size=(len(words), dim)))


def _corrupted(fn: Callable, active: bool) -> Callable:
    if not active:
        return fn

    def wrapped():
        loss, grads = fn()
        return loss, [1.5 * g for g in grads]

    return wrapped


def _attr_head_case(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    schema = build_schema()
    emb = _toy_embeddings(rng)
    verbs = list(_DEFS)
    cfg = AttrTrainConfig(kind=kind, hidden=5, dropout=0.5, seed=seed, max_len=3)
    model = build_attr_model(cfg, schema, verbs, embeddings=emb, definitions=_DEFS)
    model.W[...] = rng.normal(0.0, 0.5, size=model.W.shape)
    model.b[...] = rng.normal(0.0, 0.5, size=model.b.shape)
    instances = [(v, _DEFS[v][0]) for v in verbs]
    labels = _random_labels(schema, len(verbs), rng)
    mask_seed = int(rng.integers(1 << 31))

    def fn():
        # a fresh generator per call keeps the dropout mask fixed across probes
        return model.loss_and_grads(instances, labels, emb, rng=np.random.default_rng(mask_seed), l2=1e-2)

    return fn, model.trainable()


def _pretrain_case(seed: int):
    rng = np.random.default_rng(seed)
    emb = _toy_embeddings(rng)
    vocab = Vocab([UNK] + _WORDS)
    enc = BGRUEncoder.init(vocab, 5, emb.dim, rng, emb, max_len=3)
    w_emb = rng.normal(size=(emb.dim, enc.out_dim))
    verbs = list(_DEFS)
    batch = [_DEFS[v][0] for v in verbs]
    targets = [emb.verb_vector(v) for v in verbs]
    # negatives equal to targets keep every hinge active, away from its kink
    negatives = list(targets)

    def fn():
        return pretraining_loss(enc, w_emb, batch, targets, negatives, 0.1, embed_grad=True)

    return fn, enc.gru_params() + [enc.embed, w_emb]


def _zeroshot_case(mode: str, seed: int):
    rng = np.random.default_rng(seed)
    N, F, Z, A, D = 7, 6, 4, 40, 5
    G = rng.normal(size=(N, F))
    y = rng.integers(0, Z, size=N)
    S = rng.choice([-1.0, 1.0], size=(Z, A))
    E = rng.normal(size=(Z, D))
    head = ZeroShotHead(
        mode,
        rng.normal(0.0, 0.1, size=(A, F)) if mode in ("attr", "joint") else None,
        rng.normal(0.0, 0.1, size=(D, F)) if mode in ("emb", "joint") else None,
    )
    params = [p for p in (head.W_attr, head.W_emb) if p is not None]
    return (lambda: zeroshot_loss(head, G, y, S, E, l2=1e-2)), params


def _devise_case(seed: int, margin: float = 0.1, gap: float = 1e-3):
    rng = np.random.default_rng(seed)
    N, F, Z, D = 12, 4, 3, 5
    G = rng.normal(size=(N, F))
    y = rng.integers(0, Z, size=N)
    E = rng.normal(size=(Z, D))
    W = rng.normal(0.0, 0.3, size=(D, F))
    # drop images whose hinge terms sit near a kink
    S = (G @ W.T) @ E.T
    viol = margin + S - S[np.arange(N), y][:, None]
    viol[np.arange(N), y] = np.inf
    keep = np.all(np.abs(viol) > gap, axis=1)
    G, y = G[keep], y[keep]

    def fn():
        loss, g = devise_loss(W, G, y, E, margin)
        return loss, [g]

    return fn, [W]


def _dap_case(seed: int):
    rng = np.random.default_rng(seed)
    N, F, C = 9, 4, 6
    G = rng.normal(size=(N, F))
    T = (rng.random((N, C)) < 0.5).astype(np.float64)
    theta = rng.normal(0.0, 0.5, size=C * (F + 1))

    def fn():
        loss, g = dap_objective(theta, G, T, 1e-2)
        return loss, [g]

    return fn, [theta]


def _eszl_case(seed: int):
    rng = np.random.default_rng(seed)
    N, F, Z, A = 8, 4, 3, 5
    G = rng.normal(size=(N, F))
    y = rng.integers(0, Z, size=N)
    S = rng.choice([-1.0, 1.0], size=(Z, A))
    V = rng.normal(size=(F, A))
    return (lambda: (eszl_objective(V, G, y, S, 0.5, 2.0), [eszl_gradient(V, G, y, S, 0.5, 2.0)])), [V]


def cases(seed: int = 0):
    """``(encoder, head, builder)`` for every trainable component."""
    out = [(k, "attribute-head", lambda k=k: _attr_head_case(k, seed)) for k in ATTR_ENCODERS]
    out.append(("bgru", "dictionary-ranking", lambda: _pretrain_case(seed)))
    for mode in ("attr", "emb", "joint"):
        out.append(("features", f"zeroshot-{mode}", lambda m=mode: _zeroshot_case(m, seed)))
    out.append(("features", "devise-hinge", lambda: _devise_case(seed)))
    out.append(("features", "dap-logistic", lambda: _dap_case(seed)))
    out.append(("features", "eszl-objective", lambda: _eszl_case(seed)))
    return out


def run_suite(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Check every component; ``corrupt`` names one (``encoder/head``) whose gradients get scaled."""
    todo = cases(seed)
    if corrupt is not None and corrupt not in {f"{e}/{h}" for e, h, _ in todo}:
        raise ValueError(f"unknown component {corrupt!r}")
    results = []
    for encoder, head, build in todo:
        name = f"{encoder}/{head}"
        fn, params = build()
        err = grad_check(_corrupted(fn, corrupt == name), params, h=1e-5, max_entries=60, seed=seed)
        results.append(CheckResult(encoder, head, float(err)))
    return results

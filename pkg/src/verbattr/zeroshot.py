"""Zero-shot classification heads over precomputed image features.

Image features ``g`` (width ``F``) are mapped to attribute space and/or word
embedding space and scored against per-class rows:

* attribute pivot: ``score(v) = sig(v) . (W_attr g)`` with ``sig(v)`` the
  binarized +/-1 signature of class ``v``
* embedding pivot: ``score(v) = w_v . (W_emb g)``
* joint: the sum of both

Plus the DAP, ESZL and DeVISE baselines and hubness statistics.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .numkernel import AdamState, adam_step, log_sigmoid, log_softmax, sigmoid, softmax
from .prng import Prng
from .schema import LookupTable

log = logging.getLogger(__name__)

HEAD_MODES = ("attr", "emb", "joint")


@dataclass
class FeatureSet:
    """Labeled feature vectors; ``labels`` index into ``verbs``."""

    features: np.ndarray
    labels: np.ndarray
    verbs: list[str]
    split: str = ""

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} features but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.verbs)):
            raise ValueError("label index outside the verb list")

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def label_names(self) -> list[str]:
        return [self.verbs[i] for i in self.labels]

    def relabel(self, candidates: Sequence[str]) -> np.ndarray:
        """Labels re-indexed into ``candidates``; error if any class is missing."""
        pos = {v: i for i, v in enumerate(candidates)}
        used = sorted({self.verbs[i] for i in np.unique(self.labels)})
        outside = [v for v in used if v not in pos]
        if outside:
            raise ValueError(f"labels outside the candidate set: {outside[:5]}")
        remap = np.array([pos.get(v, -1) for v in self.verbs], dtype=np.int64)
        return remap[self.labels]


@dataclass
class CandidateSet:
    """Ordered candidate classes with their signature rows and/or embedding rows."""

    verbs: list[str]
    lookup: LookupTable | None = None
    emb: np.ndarray | None = None

    def __post_init__(self):
        if not self.verbs:
            raise ValueError("empty candidate set")
        if self.lookup is not None and list(self.lookup.verbs) != list(self.verbs):
            raise ValueError("lookup table rows do not match the candidate verbs")
        if self.emb is not None:
            self.emb = np.asarray(self.emb, dtype=np.float64)
            if self.emb.shape[0] != len(self.verbs):
                raise ValueError(f"{self.emb.shape[0]} embedding rows for {len(self.verbs)} candidates")

    def __len__(self) -> int:
        return len(self.verbs)

    def signatures(self) -> np.ndarray:
        if self.lookup is None:
            raise ValueError("candidate set has no attribute lookup table")
        return self.lookup.signatures()

    def restrict(self, verbs: Sequence[str]) -> "CandidateSet":
        pos = {v: i for i, v in enumerate(self.verbs)}
        rows = [pos[v] for v in verbs]
        return CandidateSet(
            list(verbs),
            self.lookup.restrict(verbs) if self.lookup is not None else None,
            self.emb[rows] if self.emb is not None else None,
        )


@dataclass
class ZeroShotHead:
    """Linear maps from image features to attribute space and embedding space."""

    mode: str
    W_attr: np.ndarray | None = None
    W_emb: np.ndarray | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in HEAD_MODES + ("devise",):
            raise ValueError(f"unknown head mode {self.mode!r}")

    @property
    def width(self) -> int:
        W = self.W_attr if self.W_attr is not None else self.W_emb
        return W.shape[1]

    def scores(self, G, candidates: CandidateSet) -> np.ndarray:
        if self.mode == "attr":
            return attr_logits(G, candidates.signatures(), self.W_attr)
        if self.mode in ("emb", "devise"):
            return emb_logits(G, candidates.emb, self.W_emb)
        return joint_logits(G, candidates.signatures(), candidates.emb, self.W_attr, self.W_emb)

    def to_state(self):
        arrays = {}
        if self.W_attr is not None:
            arrays["W_attr"] = self.W_attr
        if self.W_emb is not None:
            arrays["W_emb"] = self.W_emb
        return {"mode": self.mode}, arrays

    @classmethod
    def from_state(cls, meta, arrays, schema=None):
        return cls(meta["mode"], arrays.get("W_attr"), arrays.get("W_emb"))


def _signature_matrix(lookup) -> np.ndarray:
    if isinstance(lookup, LookupTable):
        return lookup.signatures()
    return np.asarray(lookup, dtype=np.float64)


def attr_logits(g, lookup, W_attr) -> np.ndarray:
    """``sum_k A^(k) W^(k) g``, i.e. signatures times projected features.

    ``lookup`` is a :class:`LookupTable` or a ``(V, width)`` signature matrix;
    ``g`` may be one feature vector or a batch of rows.
    """
    S = _signature_matrix(lookup)
    if S.shape[0] == 0:
        raise ValueError("empty candidate set")
    if S.shape[1] != W_attr.shape[0]:
        raise ValueError(f"signature width {S.shape[1]} != head rows {W_attr.shape[0]}")
    g = np.asarray(g, dtype=np.float64)
    return (g @ W_attr.T) @ S.T


def emb_logits(g, A_emb, W_emb) -> np.ndarray:
    if A_emb is None:
        raise ValueError("candidate set has no class embeddings")
    A = np.asarray(A_emb, dtype=np.float64)
    if A.shape[0] == 0:
        raise ValueError("empty candidate set")
    if A.shape[1] != W_emb.shape[0]:
        raise ValueError(f"class embedding width {A.shape[1]} != head rows {W_emb.shape[0]}")
    if not np.all(np.isfinite(A)):
        raise ValueError("class embedding rows must be finite")
    g = np.asarray(g, dtype=np.float64)
    return (g @ W_emb.T) @ A.T


def joint_logits(g, lookup, A_emb, W_attr, W_emb) -> np.ndarray:
    S = _signature_matrix(lookup)
    if A_emb is None or S.shape[0] != np.asarray(A_emb).shape[0]:
        raise ValueError("attribute and embedding branches score different candidate sets")
    return attr_logits(g, S, W_attr) + emb_logits(g, A_emb, W_emb)


# ---------------------------------------------------------------------------
# training the pivot heads


@dataclass
class ZeroShotConfig:
    mode: str = "joint"
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    eps: float = 1e-8
    l2: float = 1e-4
    seed: int = 0


def _ce(logits, y):
    lp = log_softmax(logits, axis=1)
    N = logits.shape[0]
    loss = -lp[np.arange(N), y].sum() / N
    d = np.exp(lp)
    d[np.arange(N), y] -= 1.0
    return loss, d / N


def zeroshot_loss(head: ZeroShotHead, G, y, S, A, l2: float = 0.0):
    """Training objective and gradients ``[W_attr?, W_emb?]``.

    Joint mode sums three equally weighted cross-entropies: attribute-only,
    embedding-only, and on the summed logits.
    """
    G = np.atleast_2d(G)
    loss = 0.0
    gA = gE = None
    if head.mode in ("attr", "joint"):
        U = G @ head.W_attr.T
        la = U @ S.T
    if head.mode in ("emb", "joint"):
        P = G @ head.W_emb.T
        le = P @ A.T
    d_attr = d_emb = 0.0
    if head.mode in ("attr", "joint"):
        l, d = _ce(la, y)
        loss += l
        d_attr = d_attr + d
    if head.mode in ("emb", "joint"):
        l, d = _ce(le, y)
        loss += l
        d_emb = d_emb + d
    if head.mode == "joint":
        l, d = _ce(la + le, y)
        loss += l
        d_attr = d_attr + d
        d_emb = d_emb + d
    grads = []
    if head.W_attr is not None:
        gA = (d_attr @ S).T @ G
        if l2:
            loss += 0.5 * l2 * float(np.sum(head.W_attr**2))
            gA = gA + l2 * head.W_attr
        grads.append(gA)
    if head.W_emb is not None:
        gE = (d_emb @ A).T @ G
        if l2:
            loss += 0.5 * l2 * float(np.sum(head.W_emb**2))
            gE = gE + l2 * head.W_emb
        grads.append(gE)
    return loss, grads


def train_zeroshot(train: FeatureSet, candidates: CandidateSet, config: ZeroShotConfig) -> ZeroShotHead:
    """Fit an attribute, embedding or joint head on the training classes.

    Weights start at zero, so ``epochs=0`` yields a constant-logit scorer.
    """
    if config.mode not in HEAD_MODES:
        raise ValueError(f"unknown zero-shot mode {config.mode!r}")
    y = train.relabel(candidates.verbs)
    G = train.features
    F = G.shape[1]
    S = candidates.signatures() if config.mode in ("attr", "joint") else None
    A = candidates.emb if config.mode in ("emb", "joint") else None
    if config.mode in ("emb", "joint") and A is None:
        raise ValueError("embedding branch needs class embeddings")
    head = ZeroShotHead(
        config.mode,
        np.zeros((S.shape[1], F)) if S is not None else None,
        np.zeros((A.shape[1], F)) if A is not None else None,
    )
    params = [p for p in (head.W_attr, head.W_emb) if p is not None]
    rng = Prng(config.seed).numpy_generator()
    state = AdamState(lr=config.lr, eps=config.eps)
    head.history = [zeroshot_loss(head, G, y, S, A, config.l2)[0]]
    N = len(y)
    for _ in range(config.epochs):
        order = rng.permutation(N)
        for s in range(0, N, config.batch_size):
            idx = order[s : s + config.batch_size]
            _, grads = zeroshot_loss(head, G[idx], y[idx], S, A, config.l2)
            adam_step(params, grads, state)
        head.history.append(zeroshot_loss(head, G, y, S, A, config.l2)[0])
    return head


# ---------------------------------------------------------------------------
# ranking and evaluation


def predict_topk(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` best candidates; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def true_rank(scores, labels) -> np.ndarray:
    """0-based rank of each true label under the deterministic tie-break."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    true = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    better = (scores > true) | ((scores == true) & (idx < labels[:, None]))
    return better.sum(axis=1)


def topk_accuracy(scores, labels, k: int) -> float:
    return float(np.mean(true_rank(scores, labels) < k))


def prob_product_ensemble(distributions: Sequence[np.ndarray]) -> np.ndarray:
    """Multiply per-source class distributions and renormalize (in log space)."""
    if len(distributions) < 1:
        raise ValueError("need at least one distribution")
    shapes = {np.shape(d) for d in distributions}
    if len(shapes) != 1:
        raise ValueError(f"distributions over different candidate sets: {sorted(shapes)}")
    with np.errstate(divide="ignore"):
        total = sum(np.log(np.asarray(d, dtype=np.float64)) for d in distributions)
    return softmax(total, axis=-1)


@dataclass
class HubnessStats:
    counts: np.ndarray
    top_share: float
    skewness: float


def hubness_stats(predictions, n_candidates: int) -> HubnessStats:
    """Prediction counts per class, the largest class share, and count skewness."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ValueError("no predictions")
    counts = np.bincount(pred, minlength=n_candidates).astype(np.float64)
    mu = counts.mean()
    m2 = np.mean((counts - mu) ** 2)
    m3 = np.mean((counts - mu) ** 3)
    skew = 0.0 if m2 == 0 else float(m3 / m2**1.5)
    return HubnessStats(counts.astype(np.int64), float(counts.max() / pred.size), skew)


# ---------------------------------------------------------------------------
# DeVISE


@dataclass
class DeviseConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    eps: float = 1e-8
    l2: float = 0.0
    margin: float = 0.1
    seed: int = 0


def devise_loss(W, G, y, A, margin: float = 0.1):
    """Mean over images of ``sum_{v' != v} max(0, margin + (w_v' - w_v) . W g)``."""
    G = np.atleast_2d(G)
    P = G @ W.T
    S = P @ A.T
    N = len(y)
    rows = np.arange(N)
    viol = margin + S - S[rows, y][:, None]
    viol[rows, y] = 0.0
    active = (viol > 0).astype(np.float64)
    loss = float(np.sum(viol * active)) / N
    coef = active.copy()
    coef[rows, y] = -active.sum(axis=1)
    grad = (coef @ A).T @ G / N
    return loss, grad


def devise_train(train: FeatureSet, candidates: CandidateSet, config: DeviseConfig) -> ZeroShotHead:
    if candidates.emb is None:
        raise ValueError("DeVISE needs class embeddings for every training class")
    y = train.relabel(candidates.verbs)
    A = candidates.emb
    W = np.zeros((A.shape[1], train.width))
    rng = Prng(config.seed).numpy_generator()
    state = AdamState(lr=config.lr, eps=config.eps)
    head = ZeroShotHead("devise", None, W)
    head.history = [devise_loss(W, train.features, y, A, config.margin)[0]]
    N = len(y)
    for _ in range(config.epochs):
        order = rng.permutation(N)
        for s in range(0, N, config.batch_size):
            idx = order[s : s + config.batch_size]
            _, g = devise_loss(W, train.features[idx], y[idx], A, config.margin)
            if config.l2:
                g = g + config.l2 * W
            adam_step([W], [g], state)
        head.history.append(devise_loss(W, train.features, y, A, config.margin)[0])
    return head


def devise_scores(G, W_emb, A_emb) -> np.ndarray:
    return emb_logits(G, A_emb, W_emb)


# ---------------------------------------------------------------------------
# DAP


@dataclass
class DAPModel:
    """Independent logistic classifiers, one per binarized signature column."""

    W: np.ndarray
    b: np.ndarray
    constant: np.ndarray  # NaN where a classifier was fitted, else the fixed rate
    prior: np.ndarray
    prior_correction: bool = False

    def column_probs(self, G) -> np.ndarray:
        G = np.atleast_2d(np.asarray(G, dtype=np.float64))
        p = sigmoid(G @ self.W.T + self.b)
        fixed = ~np.isnan(self.constant)
        p[:, fixed] = self.constant[fixed]
        return p

    def log_scores(self, G, signatures) -> np.ndarray:
        return dap_log_scores(self.column_probs(G), signatures,
                              self.prior if self.prior_correction else None)

    def scores(self, G, candidates: CandidateSet) -> np.ndarray:
        return self.log_scores(G, candidates.signatures())

    def to_state(self):
        return {"prior_correction": self.prior_correction}, {
            "W": self.W, "b": self.b, "constant": self.constant, "prior": self.prior}

    @classmethod
    def from_state(cls, meta, arrays, schema=None):
        return cls(arrays["W"], arrays["b"], arrays["constant"], arrays["prior"], meta["prior_correction"])


DAP_RATE_CLIP = 1e-3


def dap_objective(theta, G, T, l2: float):
    """Mean summed logistic loss of all column classifiers plus L2 on weights.

    ``theta`` packs ``W (C, F)`` row-major followed by ``b (C,)``.
    """
    N, F = G.shape
    C = T.shape[1]
    W = theta[: C * F].reshape(C, F)
    b = theta[C * F :]
    z = G @ W.T + b
    loss = -np.sum(T * log_sigmoid(z) + (1 - T) * log_sigmoid(-z)) / N
    loss += 0.5 * l2 * np.sum(W * W)
    d = (sigmoid(z) - T) / N
    gW = d.T @ G + l2 * W
    return loss, np.concatenate([gW.ravel(), d.sum(axis=0)])


def dap_train(train: FeatureSet, candidates: CandidateSet, l2: float = 1e-2,
              prior_correction: bool = False, maxiter: int = 500) -> DAPModel:
    """Fit one L2-regularized logistic regression per signature column.

    A column whose target never varies over the training images gets the
    empirical rate (clipped away from 0/1) instead of a classifier.
    """
    y = train.relabel(candidates.verbs)
    S = candidates.signatures()
    T = (S[y] > 0).astype(np.float64)  # (N, width) 0/1 targets
    G = train.features
    N, F = G.shape
    C = T.shape[1]
    rate = T.mean(axis=0)
    degenerate = (rate == 0.0) | (rate == 1.0)
    constant = np.full(C, np.nan)
    for j in np.nonzero(degenerate)[0]:
        warnings.warn(f"DAP column {j} is constant over training classes; using its empirical rate",
                      stacklevel=2)
        constant[j] = np.clip(rate[j], DAP_RATE_CLIP, 1.0 - DAP_RATE_CLIP)
    live = ~degenerate
    W = np.zeros((C, F))
    b = np.zeros(C)
    if live.any():
        Tl = T[:, live]
        Cl = Tl.shape[1]
        res = minimize(dap_objective, np.zeros(Cl * (F + 1)), args=(G, Tl, l2), jac=True,
                       method="L-BFGS-B", options={"maxiter": maxiter})
        W[live] = res.x[: Cl * F].reshape(Cl, F)
        b[live] = res.x[Cl * F :]
    prior = np.clip(rate, DAP_RATE_CLIP, 1.0 - DAP_RATE_CLIP)
    return DAPModel(W, b, constant, prior, prior_correction)


def dap_log_scores(col_probs, signatures, prior=None) -> np.ndarray:
    """``log prod_j p(a_j = s_vj | g)`` per candidate, optionally over the prior."""
    P = np.atleast_2d(np.asarray(col_probs, dtype=np.float64))
    S = np.asarray(signatures, dtype=np.float64)
    pos = (S > 0).astype(np.float64)
    with np.errstate(divide="ignore"):
        lp = np.log(P)
        lq = np.log1p(-P)
    out = lp @ pos.T + lq @ (1.0 - pos).T
    if prior is not None:
        out -= np.log(prior) @ pos.T + np.log1p(-prior) @ (1.0 - pos).T
    return out


def dap_predict(G, model: DAPModel, candidates: CandidateSet) -> np.ndarray:
    """Class distribution: normalized product of attribute probabilities."""
    return softmax(model.scores(G, candidates), axis=-1)


# ---------------------------------------------------------------------------
# ESZL


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class ESZLModel:
    V: np.ndarray
    gamma: float
    lam: float

    def scores(self, G, candidates: CandidateSet) -> np.ndarray:
        return eszl_scores(G, self.V, candidates.signatures())

    def to_state(self):
        return {"gamma": self.gamma, "lam": self.lam}, {"V": self.V}

    @classmethod
    def from_state(cls, meta, arrays, schema=None):
        return cls(arrays["V"], meta["gamma"], meta["lam"])


def _one_hot(y, n):
    Y = np.zeros((len(y), n))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def _checked_solve(M, B, what: str):
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e13:
        raise SingularSystemError(f"{what} is singular (cond={cond:.3g}); use a positive regularizer")
    return np.linalg.solve(M, B)


def eszl_solve(G, y, S, gamma: float, lam: float) -> np.ndarray:
    """Closed-form bilinear map ``V = (X X' + g I)^-1 X Y S' (S S' + l I)^-1``.

    ``G`` holds features as rows ``(N, F)``, ``y`` class indices, ``S`` the
    class signatures as rows ``(Z, A)``.  Returns ``V`` of shape ``(F, A)``.
    """
    X = np.asarray(G, dtype=np.float64).T  # (F, N)
    Sc = np.asarray(S, dtype=np.float64).T  # (A, Z)
    Y = _one_hot(np.asarray(y), Sc.shape[1])
    F = X.shape[0]
    A = Sc.shape[0]
    left = _checked_solve(X @ X.T + gamma * np.eye(F), X @ Y @ Sc.T, "regularized feature Gram matrix")
    right = Sc @ Sc.T + lam * np.eye(A)
    return _checked_solve(right, left.T, "regularized signature Gram matrix").T


def eszl_objective(V, G, y, S, gamma: float, lam: float) -> float:
    """``|X'VS - Y|^2 + g|VS|^2 + l|X'V|^2 + g l |V|^2`` (squared Frobenius norms)."""
    X = np.asarray(G, dtype=np.float64).T
    Sc = np.asarray(S, dtype=np.float64).T
    Y = _one_hot(np.asarray(y), Sc.shape[1])
    VS = V @ Sc
    XV = X.T @ V
    return float(np.sum((X.T @ VS - Y) ** 2) + gamma * np.sum(VS**2) + lam * np.sum(XV**2)
                 + gamma * lam * np.sum(V**2))


def eszl_gradient(V, G, y, S, gamma: float, lam: float) -> np.ndarray:
    """Gradient of ``|X'VS - Y|^2 + g|VS|^2 + l|X'V|^2 + g l |V|^2`` in ``V``."""
    X = np.asarray(G, dtype=np.float64).T
    Sc = np.asarray(S, dtype=np.float64).T
    Y = _one_hot(np.asarray(y), Sc.shape[1])
    F, A = V.shape
    return 2.0 * ((X @ X.T + gamma * np.eye(F)) @ V @ (Sc @ Sc.T + lam * np.eye(A)) - X @ Y @ Sc.T)


def eszl_scores(G, V, S) -> np.ndarray:
    return np.asarray(G, dtype=np.float64) @ V @ np.asarray(S, dtype=np.float64).T


ESZL_GRID = tuple(10.0**e for e in range(-3, 4))


def eszl_select(train: FeatureSet, train_cands: CandidateSet, val: FeatureSet, val_cands: CandidateSet,
                grid: Sequence[float] = ESZL_GRID) -> ESZLModel:
    """Pick ``(gamma, lambda)`` by validation top-1; earlier grid points win ties."""
    y = train.relabel(train_cands.verbs)
    yv = val.relabel(val_cands.verbs)
    S = train_cands.signatures()
    Sv = val_cands.signatures()
    best = None
    for gamma in grid:
        for lam in grid:
            V = eszl_solve(train.features, y, S, gamma, lam)
            acc = topk_accuracy(eszl_scores(val.features, V, Sv), yv, 1)
            if best is None or acc > best[0]:
                best = (acc, gamma, lam, V)
    _, gamma, lam, V = best
    return ESZLModel(V, gamma, lam)

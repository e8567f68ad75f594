"""File formats, splits, seeded synthetic data and model serialization.

Formats
-------
feature file (little-endian)
    ``b"VAFT"``, u32 version (1), u32 item count, u32 width ``F``, then per
    item a u32 label index followed by ``F`` float32 values.  Verb names for
    the label indices live in ``<path>.verbs``, one per line.
split file
    sections ``[train]``, ``[val]``, ``[test]``, one verb template per line.
attribute file
    CSV with header ``verb,<attr1>,...,<attrK>``; categorical values are
    0-based indices, binary values 0/1.
definition file
    TSV ``verb<TAB>definition``; file order is definition rank.
embedding file
    ``token v1 ... vD`` per line, space separated.
model file
    ``b"VAMD"``, u32 version (1), u32 header length, UTF-8 JSON header, then
    the float64 arrays listed in the header.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .prng import Prng
from .schema import AttributeSchema, LabelError, binarize
from .textattr import AttrModel, BGRUEncoder, DefinitionCorpus, EmbeddingTable, encoder_arrays, \
    encoder_from_state, encoder_meta, tokenize
from .zeroshot import DAPModel, ESZLModel, FeatureSet, ZeroShotHead

FEATURE_MAGIC = b"VAFT"
MODEL_MAGIC = b"VAMD"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed input file; carries the path and (when known) line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class DimensionMismatchError(DataFormatError):
    pass


class FingerprintMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature files

_HEADER = struct.Struct("<4sIII")


def _verbs_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".verbs")


def write_feature_file(fs: FeatureSet, path) -> None:
    F = fs.width
    dt = np.dtype([("label", "<u4"), ("x", "<f4", (F,))])
    rec = np.empty(len(fs), dtype=dt)
    rec["label"] = fs.labels
    rec["x"] = fs.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, len(fs), F))
        fh.write(rec.tobytes())
    _verbs_path(path).write_text("".join(v + "\n" for v in fs.verbs), encoding="utf-8")


def read_feature_file(path, expected_width: int | None = None, split: str = "") -> FeatureSet:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagicError("bad magic (not a VAFT feature file)", path)
    if len(data) < _HEADER.size:
        raise TruncatedFileError("truncated header", path)
    _, version, n, F = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported feature file version {version}", path)
    if expected_width is not None and F != expected_width:
        raise DimensionMismatchError(f"feature width {F}, expected {expected_width}", path)
    need = _HEADER.size + n * (4 + 4 * F)
    if len(data) < need:
        raise TruncatedFileError(f"truncated payload: {len(data)} bytes, header implies {need}", path)
    if len(data) > need:
        raise DimensionMismatchError(f"{len(data) - need} trailing bytes after {n} items of width {F}", path)
    dt = np.dtype([("label", "<u4"), ("x", "<f4", (F,))])
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    vp = _verbs_path(path)
    if not vp.exists():
        raise DataFormatError(f"missing verb list {vp.name}", path)
    verbs = [ln.strip() for ln in vp.read_text(encoding="utf-8").splitlines() if ln.strip()]
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= len(verbs):
        raise DimensionMismatchError(f"label index {labels.max()} but only {len(verbs)} verbs", path)
    return FeatureSet(rec["x"].astype(np.float64), labels, verbs, split)


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    train: list[str]
    val: list[str]
    test: list[str]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "val", "test"):
            for v in getattr(self, name):
                if v in seen:
                    raise ValueError(f"verb {v!r} appears in both {seen[v]} and {name}")
                seen[v] = name

    def all(self) -> list[str]:
        return self.train + self.val + self.test


def write_split(split: Split, path) -> None:
    out = []
    for name in ("train", "val", "test"):
        out.append(f"[{name}]")
        out.extend(getattr(split, name))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def load_split(path, universe: Sequence[str] | None = None) -> Split:
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current = None
    where: dict[str, tuple[str, int]] = {}
    known = set(universe) if universe is not None else None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise DataFormatError(f"unknown section {line}", path, lineno)
            continue
        if current is None:
            raise DataFormatError("verb listed before any section header", path, lineno)
        if known is not None and line not in known:
            raise DataFormatError(f"unknown verb {line!r}", path, lineno)
        if line in where:
            raise DataFormatError(f"verb {line!r} already listed in [{where[line][0]}]", path, lineno)
        where[line] = (current, lineno)
        sections[current].append(line)
    return Split(sections["train"], sections["val"], sections["test"])


# ---------------------------------------------------------------------------
# attributes, definitions, embeddings


def write_attributes(labels: Mapping[str, np.ndarray], schema: AttributeSchema, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["verb", *schema.names])
    for v in labels:
        w.writerow([v, *(int(x) for x in labels[v])])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_attributes(path, schema: AttributeSchema) -> dict[str, np.ndarray]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows:
        raise DataFormatError("empty attribute file", path, 1)
    header = [h.strip() for h in rows[0]]
    if header != ["verb", *schema.names]:
        raise DataFormatError(f"header does not match schema attributes: {header[:4]}...", path, 1)
    out: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != schema.K + 1:
            raise DataFormatError(f"expected {schema.K + 1} columns, got {len(row)}", path, lineno)
        verb = row[0].strip()
        if verb in out:
            raise DataFormatError(f"duplicate verb {verb!r}", path, lineno)
        try:
            vals = np.array([int(x) for x in row[1:]], dtype=np.int64)
        except ValueError as exc:
            raise DataFormatError(f"non-integer attribute value ({exc})", path, lineno) from None
        try:
            out[verb] = schema.validate(vals)
        except LabelError as exc:
            raise DataFormatError(str(exc), path, lineno) from None
    return out


def write_definitions(corpus: Mapping[str, list], path) -> None:
    lines = []
    for v, defs in corpus.items():
        for d in defs:
            lines.append(f"{v}\t{' '.join(d)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_definitions(path) -> DefinitionCorpus:
    corpus = DefinitionCorpus()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        cols = raw.split("\t")
        if len(cols) != 2:
            raise DataFormatError(f"expected 2 tab-separated columns, got {len(cols)}", path, lineno)
        verb, text = cols[0].strip(), cols[1]
        toks = tokenize(text)
        if not verb or not toks:
            raise DataFormatError("empty verb or definition", path, lineno)
        corpus.setdefault(verb, []).append(toks)
    return corpus


def write_embeddings(table: EmbeddingTable, path) -> None:
    lines = [
        tok + " " + " ".join(format(float(x), ".17g") for x in vec)
        for tok, vec in zip(table.tokens, table.vectors)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path, dim: int | None = None) -> EmbeddingTable:
    tokens: list[str] = []
    vecs: list[list[float]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = raw.rstrip().split(" ")
        if not parts or not parts[0]:
            continue
        if dim is None:
            dim = len(parts) - 1
            if dim < 1:
                raise DataFormatError("embedding row has no values", path, lineno)
        if len(parts) - 1 != dim:
            raise DimensionMismatchError(f"expected {dim} values, got {len(parts) - 1}", path, lineno)
        try:
            vec = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise DataFormatError(f"non-numeric value ({exc})", path, lineno) from None
        if not all(np.isfinite(vec)):
            raise DataFormatError("non-finite value", path, lineno)
        tokens.append(parts[0])
        vecs.append(vec)
    if not tokens:
        raise DataFormatError("empty embedding file", path)
    if len(set(tokens)) != len(tokens):
        raise DataFormatError("duplicate tokens in embedding file", path)
    return EmbeddingTable(tokens, np.array(vecs))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_classes: int = 40
    n_test_classes: int = 8
    n_val_classes: int = 0
    per_class: int = 10
    test_per_class: int | None = None
    feature_dim: int = 32
    emb_dim: int = 16
    noise: float = 0.0
    seed: int = 0
    distinct: bool = True
    max_definitions: int = 4
    mention_rate: float = 0.6
    pool_size: int = 2
    n_fillers: int = 30

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_dim < 1 or self.emb_dim < 1:
            raise ValueError("widths must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_test_classes + self.n_val_classes >= self.n_classes:
            raise ValueError("no classes left for training")


@dataclass
class SynthData:
    schema: AttributeSchema
    verbs: list[str]
    labels: dict[str, np.ndarray]
    definitions: DefinitionCorpus
    embeddings: EmbeddingTable
    split: Split
    train: FeatureSet
    val: FeatureSet
    test: FeatureSet
    prototypes: np.ndarray = field(repr=False)


def _draw_signatures(cfg: SynthConfig, schema: AttributeSchema, rng: Prng) -> list[tuple[int, ...]]:
    arities = [s.arity for s in schema.specs]
    space = int(np.prod([float(a) for a in arities]))
    if not cfg.distinct:
        return [tuple(rng.randint(a) for a in arities) for _ in range(cfg.n_classes)]
    if cfg.n_classes > space:
        raise ValueError(f"{cfg.n_classes} distinct signatures requested but only {space} exist")
    if space <= 4 * cfg.n_classes:
        allsig = list(itertools.product(*(range(a) for a in arities)))
        rng.shuffle(allsig)
        return allsig[: cfg.n_classes]
    out: list[tuple[int, ...]] = []
    seen = set()
    while len(out) < cfg.n_classes:
        s = tuple(rng.randint(a) for a in arities)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def synth_generate(cfg: SynthConfig, schema: AttributeSchema) -> SynthData:
    """Seeded toy world where features, embeddings and text all encode attributes.

    Class prototypes are ``M @ sig(c)`` and verb embeddings ``P @ sig(c)`` for
    seeded Gaussian ``M``, ``P``; both get ``noise`` times Gaussian jitter.
    Definitions mix filler words with words drawn from per-(attribute, value)
    pools whose embeddings are aligned with the matching columns of ``P``.
    """
    rng = Prng(cfg.seed)
    sigs = _draw_signatures(cfg, schema, rng)
    verbs = [f"verb{i:03d}" for i in range(cfg.n_classes)]
    labels = {v: np.array(s, dtype=np.int64) for v, s in zip(verbs, sigs)}
    width = schema.width
    S = np.array([binarize(schema, labels[v]) for v in verbs])

    M = rng.normals((cfg.feature_dim, width)) / np.sqrt(width)
    P = rng.normals((cfg.emb_dim, width)) / np.sqrt(width)
    prototypes = S @ M.T

    # embeddings: verbs, attribute-value word pools, fillers
    tokens = list(verbs)
    vecs = [P @ s + cfg.noise * rng.normals(cfg.emb_dim) for s in S]
    pools: dict[tuple[int, int], list[str]] = {}
    for k, spec in enumerate(schema.specs):
        for i in range(spec.arity):
            words = []
            for j in range(cfg.pool_size):
                w = f"{spec.name}{i}w{j}"
                if spec.binary:
                    col, sign = schema.offsets[k], (1.0 if i == 1 else -1.0)
                else:
                    col, sign = schema.offsets[k] + i, 1.0
                tokens.append(w)
                vecs.append(sign * P[:, col] + 0.1 * rng.normals(cfg.emb_dim))
                words.append(w)
            pools[(k, i)] = words
    fillers = [f"filler{j}" for j in range(cfg.n_fillers)]
    for w in fillers:
        tokens.append(w)
        vecs.append(rng.normals(cfg.emb_dim) / np.sqrt(cfg.emb_dim))
    embeddings = EmbeddingTable(tokens, np.array(vecs))

    definitions = DefinitionCorpus()
    for v in verbs:
        n_defs = 1 + rng.randint(cfg.max_definitions)
        defs = []
        for _ in range(n_defs):
            toks = [rng.choice(pools[(k, int(labels[v][k]))]) for k in range(schema.K)
                    if rng.random() < cfg.mention_rate]
            toks += [rng.choice(fillers) for _ in range(2 + rng.randint(4))]
            rng.shuffle(toks)
            defs.append(toks)
        definitions[v] = defs

    n_test, n_val = cfg.n_test_classes, cfg.n_val_classes
    n_train = cfg.n_classes - n_test - n_val
    split = Split(verbs[:n_train], verbs[n_train : n_train + n_val], verbs[n_train + n_val :])

    def features(cls_verbs, per, tag):
        idx = [verbs.index(v) for v in cls_verbs]
        lab = np.repeat(np.arange(len(cls_verbs)), per)
        X = np.repeat(prototypes[idx], per, axis=0)
        if cfg.noise > 0:
            X = X + cfg.noise * rng.normals(X.shape)
        return FeatureSet(X, lab, list(cls_verbs), tag)

    test_per = cfg.test_per_class if cfg.test_per_class is not None else cfg.per_class
    train = features(split.train, cfg.per_class, "train")
    val = features(split.val, test_per, "val")
    test = features(split.test, test_per, "test")
    return SynthData(schema, verbs, labels, definitions, embeddings, split, train, val, test, prototypes)


def write_synth(data: SynthData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "schema": out / "schema.tsv",
        "attributes": out / "attributes.csv",
        "definitions": out / "definitions.tsv",
        "embeddings": out / "embeddings.txt",
        "split": out / "split.txt",
        "train": out / "train.vaft",
        "val": out / "val.vaft",
        "test": out / "test.vaft",
    }
    paths["schema"].write_text(data.schema.to_text(), encoding="utf-8")
    write_attributes(data.labels, data.schema, paths["attributes"])
    write_definitions(data.definitions, paths["definitions"])
    write_embeddings(data.embeddings, paths["embeddings"])
    write_split(data.split, paths["split"])
    write_feature_file(data.train, paths["train"])
    write_feature_file(data.val, paths["val"])
    write_feature_file(data.test, paths["test"])
    return paths


# ---------------------------------------------------------------------------
# model files

_MODEL_KINDS = {
    "attr_model": AttrModel,
    "zeroshot_head": ZeroShotHead,
    "dap": DAPModel,
    "eszl": ESZLModel,
}


class _EncoderState:
    @staticmethod
    def to_state(enc: BGRUEncoder):
        return encoder_meta(enc), encoder_arrays(enc)

    @staticmethod
    def from_state(meta, arrays, schema=None):
        return encoder_from_state(meta, arrays)


def _kind_of(model) -> str:
    if isinstance(model, BGRUEncoder):
        return "bgru_encoder"
    for name, cls in _MODEL_KINDS.items():
        if isinstance(model, cls):
            return name
    raise TypeError(f"cannot serialize {type(model).__name__}")


def save_model(model, path, schema: AttributeSchema | None = None, extra: dict | None = None) -> None:
    """Write a model with its schema fingerprint; byte-identical for identical input."""
    kind = _kind_of(model)
    meta, arrays = _EncoderState.to_state(model) if kind == "bgru_encoder" else model.to_state()
    if schema is None and isinstance(model, AttrModel):
        schema = model.schema
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "schema_fingerprint": schema.fingerprint() if schema is not None else "",
        "meta": meta,
        "extra": extra or {},
        "arrays": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_model_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_model(data, path)[0]


def _parse_model(data: bytes, path):
    if data[:4] != MODEL_MAGIC:
        raise BadMagicError("bad magic (not a VAMD model file)", path)
    if len(data) < 12:
        raise TruncatedFileError("truncated model header", path)
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported model version {version}", path)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    body = data[12 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise TruncatedFileError(f"array {e['name']} truncated", path)
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
    return header, arrays


def load_model(path, schema: AttributeSchema | None = None):
    """Load a model file; with ``schema``, refuse files trained on another schema."""
    header, arrays = _parse_model(Path(path).read_bytes(), path)
    fp = header["schema_fingerprint"]
    if schema is not None and fp and fp != schema.fingerprint():
        raise FingerprintMismatchError(
            f"{path}: model schema fingerprint {fp} != {schema.fingerprint()}")
    kind = header["kind"]
    if kind == "bgru_encoder":
        return _EncoderState.from_state(header["meta"], arrays)
    if kind == "attr_model" and schema is None:
        raise ValueError("loading an attribute model needs its schema")
    return _MODEL_KINDS[kind].from_state(header["meta"], arrays, schema)

"""Verb attribute taxonomy, +/-1 class-signature tables and accuracy metrics."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SCHEMA_NAME = "schema.tsv"

# effect attribute -> transitivity attribute it is conditioned on
EFFECT_GATES = {
    "intrans_moves": "intransitive",
    "intrans_world_changes": "intransitive",
    "intrans_state_changes": "intransitive",
    "intrans_no_change": "intransitive",
    "obj_moves": "transitive_object",
    "obj_world_changes": "transitive_object",
    "obj_state_changes": "transitive_object",
    "obj_no_change": "transitive_object",
    "person_moves": "transitive_person",
    "person_world_changes": "transitive_person",
    "person_state_changes": "transitive_person",
    "person_no_change": "transitive_person",
}


class SchemaError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    group: str
    values: tuple[str, ...]
    binary: bool

    @property
    def arity(self) -> int:
        return len(self.values)

    @property
    def width(self) -> int:
        """Columns this attribute occupies once binarized."""
        return 1 if self.binary else len(self.values)


class AttributeSchema:
    """Ordered collection of attributes.

    Attribute order fixes the column order of label vectors, binarized
    signatures and head weight blocks.
    """

    def __init__(self, specs: Sequence[AttributeSpec]):
        specs = tuple(specs)
        if not specs:
            raise SchemaError("schema has no attributes")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate attribute names: {dup}")
        for s in specs:
            if s.binary and s.arity != 2:
                raise SchemaError(f"binary attribute {s.name!r} must have 2 values")
            if not s.binary and s.arity < 2:
                raise SchemaError(f"categorical attribute {s.name!r} needs >= 2 values")
        self.specs = specs
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}
        groups: list[str] = []
        for s in specs:
            if s.group not in groups:
                groups.append(s.group)
        self.groups = tuple(groups)
        self.group_members = {
            g: tuple(i for i, s in enumerate(specs) if s.group == g) for g in groups
        }
        widths = [s.width for s in specs]
        self.offsets = tuple(int(x) for x in np.concatenate([[0], np.cumsum(widths)]))
        self.arities = np.array([s.arity for s in specs], dtype=np.int64)

    @property
    def K(self) -> int:
        return len(self.specs)

    @property
    def width(self) -> int:
        return self.offsets[-1]

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(self.group_members[g]) for g in self.groups)

    def index(self, name: str) -> int:
        return self._index[name]

    def block(self, k: int) -> slice:
        return slice(self.offsets[k], self.offsets[k + 1])

    def __len__(self) -> int:
        return self.K

    def __iter__(self):
        return iter(self.specs)

    def __eq__(self, other) -> bool:
        return isinstance(other, AttributeSchema) and self.specs == other.specs

    def to_text(self) -> str:
        lines = []
        for s in self.specs:
            arity = "binary" if s.binary else str(s.arity)
            lines.append(f"{s.group}\t{s.name}\t{arity}\t{','.join(s.values)}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def validate(self, labels, where: str = "") -> np.ndarray:
        lab = np.asarray(labels)
        if lab.shape != (self.K,):
            raise LabelError(f"{where}expected {self.K} attribute values, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            as_int = lab.astype(np.int64)
            if not np.array_equal(as_int, lab):
                raise LabelError(f"{where}attribute values must be integers")
            lab = as_int
        bad = np.nonzero((lab < 0) | (lab >= self.arities))[0]
        if bad.size:
            k = int(bad[0])
            raise LabelError(
                f"{where}attribute {self.names[k]!r} value {int(lab[k])} "
                f"outside arity {self.specs[k].arity}"
            )
        return lab.astype(np.int64)


def parse_schema(text: str) -> AttributeSchema:
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) != 4:
            raise SchemaError(f"line {lineno}: expected 4 tab-separated columns, got {len(cols)}")
        group, name, arity, values = (c.strip() for c in cols)
        vals = tuple(v.strip() for v in values.split(","))
        if arity == "binary":
            specs.append(AttributeSpec(name, group, vals, True))
        else:
            try:
                d = int(arity)
            except ValueError:
                raise SchemaError(f"line {lineno}: arity {arity!r} is neither an integer nor 'binary'")
            if d != len(vals):
                raise SchemaError(f"line {lineno}: arity {d} but {len(vals)} value names")
            specs.append(AttributeSpec(name, group, vals, False))
    return AttributeSchema(specs)


def load_schema(path: str | Path) -> AttributeSchema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def build_schema() -> AttributeSchema:
    """The 24-attribute verb taxonomy shipped with the package."""
    text = resources.files("verbattr").joinpath("data", DEFAULT_SCHEMA_NAME).read_text("utf-8")
    return parse_schema(text)


def binarize(schema: AttributeSchema, labels) -> np.ndarray:
    """Expand a label vector to its +/-1 signature (one-vs-rest per value)."""
    lab = schema.validate(labels)
    out = -np.ones(schema.width)
    for k, s in enumerate(schema.specs):
        if s.binary:
            out[schema.offsets[k]] = 1.0 if lab[k] == 1 else -1.0
        else:
            out[schema.offsets[k] + lab[k]] = 1.0
    return out


def debinarize(schema: AttributeSchema, signature) -> np.ndarray:
    sig = np.asarray(signature, dtype=np.float64)
    if sig.shape != (schema.width,):
        raise LabelError(f"signature width {sig.shape} != {schema.width}")
    if not np.all((sig == 1.0) | (sig == -1.0)):
        raise LabelError("signature entries must be +1 or -1")
    out = np.zeros(schema.K, dtype=np.int64)
    for k, s in enumerate(schema.specs):
        block = sig[schema.block(k)]
        if s.binary:
            out[k] = 1 if block[0] > 0 else 0
        else:
            hot = np.nonzero(block > 0)[0]
            if hot.size != 1:
                raise LabelError(f"attribute {s.name!r} block has {hot.size} +1 entries")
            out[k] = hot[0]
    return out


@dataclass
class LookupTable:
    """Per-attribute +/-1 matrices for an ordered verb list.

    ``blocks[k]`` has shape ``(len(verbs), d_k)`` for categorical attributes
    and ``(len(verbs), 1)`` for binary ones.
    """

    verbs: list[str]
    blocks: list[np.ndarray]
    schema: AttributeSchema

    def signatures(self) -> np.ndarray:
        if not self.verbs:
            return np.zeros((0, self.schema.width))
        return np.hstack(self.blocks)

    def restrict(self, verbs: Sequence[str]) -> "LookupTable":
        pos = {v: i for i, v in enumerate(self.verbs)}
        missing = [v for v in verbs if v not in pos]
        if missing:
            raise KeyError(f"verbs not in lookup table: {missing[:5]}")
        rows = [pos[v] for v in verbs]
        return LookupTable(list(verbs), [b[rows] for b in self.blocks], self.schema)

    def labels(self) -> dict[str, np.ndarray]:
        sig = self.signatures()
        return {v: debinarize(self.schema, sig[i]) for i, v in enumerate(self.verbs)}


def encode_lookup(
    verbs: Sequence[str], labels: Mapping[str, np.ndarray], schema: AttributeSchema
) -> LookupTable:
    """Build the class-signature table; warns when two verbs share a signature."""
    verbs = list(verbs)
    missing = [v for v in verbs if v not in labels]
    if missing:
        raise LabelError(f"no attribute labels for verb {missing[0]!r}")
    rows = np.array([binarize(schema, labels[v]) for v in verbs]).reshape(len(verbs), schema.width)
    blocks = [rows[:, schema.block(k)].copy() for k in range(schema.K)]
    seen: dict[bytes, str] = {}
    for v, row in zip(verbs, rows):
        key = row.tobytes()
        if key in seen:
            warnings.warn(f"verbs {seen[key]!r} and {v!r} share an attribute signature", stacklevel=2)
        else:
            seen[key] = v
    return LookupTable(verbs, blocks, schema)


@dataclass
class AccuracyReport:
    per_attribute: dict[str, float]
    per_group: dict[str, float]
    macro: float
    micro: float


def aggregate_groups(group_acc: Mapping[str, float], schema: AttributeSchema) -> tuple[float, float]:
    """Macro (mean over groups) and micro (size-weighted) from group accuracies.

    Exact when each group accuracy is the mean of its members, since the
    size-weighted mean of group means equals the mean over all attributes.
    """
    missing = [g for g in schema.groups if g not in group_acc]
    if missing:
        raise KeyError(f"missing group accuracies: {missing}")
    accs = np.array([group_acc[g] for g in schema.groups], dtype=np.float64)
    sizes = np.array(schema.group_sizes, dtype=np.float64)
    return float(accs.mean()), float((accs * sizes).sum() / sizes.sum())


def attribute_accuracy(
    pred: Mapping[str, np.ndarray],
    gold: Mapping[str, np.ndarray],
    schema: AttributeSchema,
    conditional_effects: bool = False,
) -> AccuracyReport:
    """Exact-match accuracy per attribute, averaged per group, macro and micro.

    With ``conditional_effects`` each effect attribute is scored only on verbs
    whose gold transitivity gate is 1; attributes with no eligible verbs are
    left out of the averages.
    """
    if set(pred) != set(gold):
        extra = sorted(set(pred) ^ set(gold))
        raise ValueError(f"prediction and gold verb sets differ, e.g. {extra[:5]}")
    if not gold:
        raise ValueError("no verbs to score")
    verbs = sorted(gold)
    P = np.array([schema.validate(pred[v], f"{v}: ") for v in verbs])
    G = np.array([schema.validate(gold[v], f"{v}: ") for v in verbs])
    correct = P == G
    per_attr = {}
    for k, name in enumerate(schema.names):
        mask = np.ones(len(verbs), dtype=bool)
        if conditional_effects and name in EFFECT_GATES:
            mask = G[:, schema.index(EFFECT_GATES[name])] == 1
        per_attr[name] = float(correct[mask, k].mean()) if mask.any() else float("nan")
    per_group = {}
    for g in schema.groups:
        vals = [per_attr[schema.names[k]] for k in schema.group_members[g]]
        vals = [x for x in vals if not np.isnan(x)]
        per_group[g] = float(np.mean(vals)) if vals else float("nan")
    macro = float(np.nanmean([per_group[g] for g in schema.groups]))
    micro = float(np.nanmean([per_attr[n] for n in schema.names]))
    return AccuracyReport(per_attr, per_group, macro, micro)


def majority_baseline(train_gold: Mapping[str, np.ndarray], schema: AttributeSchema) -> np.ndarray:
    """Most frequent value per attribute over the training verbs (ties -> lowest index)."""
    if not train_gold:
        raise ValueError("majority baseline needs at least one training verb")
    G = np.array([schema.validate(train_gold[v], f"{v}: ") for v in sorted(train_gold)])
    out = np.zeros(schema.K, dtype=np.int64)
    for k in range(schema.K):
        out[k] = int(np.argmax(np.bincount(G[:, k], minlength=schema.specs[k].arity)))
    return out

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from verbattr.schema import (
    EFFECT_GATES, LabelError, SchemaError, aggregate_groups, attribute_accuracy, binarize, build_schema,
    debinarize, encode_lookup, load_schema, majority_baseline, parse_schema,
)

SCHEMA = build_schema()


def label_vectors():
    return st.tuples(*[st.integers(0, int(a) - 1) for a in SCHEMA.arities]).map(np.array)


class TestBuiltinSchema:
    def test_shape(self):
        assert SCHEMA.K == 24
        assert SCHEMA.width == 40
        assert SCHEMA.groups == ("aspect", "duration", "motion", "social", "transitivity", "effects", "body")
        assert SCHEMA.group_sizes == (1, 1, 1, 1, 3, 12, 5)

    def test_offsets_cover_width(self):
        assert SCHEMA.offsets[0] == 0 and SCHEMA.offsets[-1] == 40
        assert all(b > a for a, b in zip(SCHEMA.offsets, SCHEMA.offsets[1:]))

    def test_effect_gates_refer_to_transitivity(self):
        trans = {SCHEMA.names[k] for k in SCHEMA.group_members["transitivity"]}
        effects = {SCHEMA.names[k] for k in SCHEMA.group_members["effects"]}
        assert set(EFFECT_GATES) == effects
        assert set(EFFECT_GATES.values()) == trans

    def test_text_round_trip(self, tmp_path):
        p = tmp_path / "s.tsv"
        p.write_text(SCHEMA.to_text())
        assert load_schema(p) == SCHEMA
        assert load_schema(p).fingerprint() == SCHEMA.fingerprint()

    def test_fingerprint_changes_with_content(self):
        other = parse_schema(SCHEMA.to_text().replace("torso", "chest"))
        assert other.fingerprint() != SCHEMA.fingerprint()


class TestParse:
    def test_minimal(self):
        s = parse_schema("# comment\ng\ta\t3\tx,y,z\ng\tb\tbinary\t0,1\n")
        assert s.K == 2 and s.width == 4

    @pytest.mark.parametrize("text", [
        "g\ta\t3\tx,y\n",  # arity disagrees with values
        "g\ta\tthree\tx,y,z\n",
        "g\ta\t3\n",
        "g\ta\t2\tx,y\ng\ta\t2\tx,y\n",  # duplicate name
        "g\ta\tbinary\t0,1,2\n",
        "g\ta\t1\tx\n",
        "",
    ])
    def test_malformed(self, text):
        with pytest.raises(SchemaError):
            parse_schema(text)


class TestBinarize:
    @pytest.mark.parametrize("group", SCHEMA.groups)
    def test_exhaustive_round_trip_per_group(self, group):
        members = SCHEMA.group_members[group]
        base = np.zeros(SCHEMA.K, dtype=np.int64)
        for combo in itertools.product(*[range(SCHEMA.arities[k]) for k in members]):
            lab = base.copy()
            lab[list(members)] = combo
            sig = binarize(SCHEMA, lab)
            assert set(np.unique(sig)) <= {-1.0, 1.0}
            np.testing.assert_array_equal(debinarize(SCHEMA, sig), lab)

    @given(label_vectors())
    def test_round_trip(self, lab):
        np.testing.assert_array_equal(debinarize(SCHEMA, binarize(SCHEMA, lab)), lab)

    @given(label_vectors())
    def test_one_hot_blocks(self, lab):
        sig = binarize(SCHEMA, lab)
        for k, s in enumerate(SCHEMA.specs):
            if not s.binary:
                assert (sig[SCHEMA.block(k)] > 0).sum() == 1

    def test_rejects_out_of_range(self):
        lab = np.zeros(24, dtype=int)
        lab[0] = 5
        with pytest.raises(LabelError, match="aspect"):
            binarize(SCHEMA, lab)

    def test_rejects_wrong_length(self):
        with pytest.raises(LabelError):
            binarize(SCHEMA, np.zeros(23, dtype=int))

    def test_rejects_fractional(self):
        with pytest.raises(LabelError):
            SCHEMA.validate(np.full(24, 0.5))

    def test_debinarize_rejects_two_hot(self):
        sig = binarize(SCHEMA, np.zeros(24, dtype=int))
        sig[1] = 1.0
        with pytest.raises(LabelError):
            debinarize(SCHEMA, sig)

    def test_debinarize_rejects_zero_entries(self):
        with pytest.raises(LabelError):
            debinarize(SCHEMA, np.zeros(40))


class TestLookup:
    def test_signatures_and_restrict(self):
        labels = {"a": np.zeros(24, int), "b": np.ones(24, int)}
        table = encode_lookup(["a", "b"], labels, SCHEMA)
        assert table.signatures().shape == (2, 40)
        sub = table.restrict(["b"])
        np.testing.assert_array_equal(sub.signatures()[0], binarize(SCHEMA, labels["b"]))
        np.testing.assert_array_equal(table.labels()["a"], labels["a"])

    def test_collision_warns(self):
        labels = {"a": np.zeros(24, int), "b": np.zeros(24, int)}
        with pytest.warns(UserWarning, match="share"):
            encode_lookup(["a", "b"], labels, SCHEMA)

    def test_distinct_no_warning(self):
        labels = {"a": np.zeros(24, int), "b": np.ones(24, int)}
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            encode_lookup(["a", "b"], labels, SCHEMA)

    def test_missing_verb(self):
        with pytest.raises(LabelError):
            encode_lookup(["a"], {}, SCHEMA)

    def test_restrict_unknown(self):
        table = encode_lookup(["a"], {"a": np.zeros(24, int)}, SCHEMA)
        with pytest.raises(KeyError):
            table.restrict(["z"])


class TestAccuracy:
    def test_perfect(self):
        gold = {"a": np.zeros(24, int), "b": np.ones(24, int)}
        rep = attribute_accuracy(gold, gold, SCHEMA)
        assert rep.macro == rep.micro == 1.0

    def test_macro_micro_differ(self):
        gold = {"a": np.zeros(24, int)}
        pred = {"a": np.zeros(24, int)}
        pred["a"][list(SCHEMA.group_members["effects"])] = 1
        rep = attribute_accuracy(pred, gold, SCHEMA)
        assert rep.per_group["effects"] == 0.0
        assert rep.micro == pytest.approx(12 / 24)
        assert rep.macro == pytest.approx(6 / 7)

    def test_aggregate_matches_direct(self):
        rng = np.random.default_rng(0)
        gold = {f"v{i}": rng.integers(0, SCHEMA.arities) for i in range(30)}
        pred = {v: rng.integers(0, SCHEMA.arities) for v in gold}
        rep = attribute_accuracy(pred, gold, SCHEMA)
        macro, micro = aggregate_groups(rep.per_group, SCHEMA)
        assert macro == pytest.approx(rep.macro, abs=1e-12)
        assert micro == pytest.approx(rep.micro, abs=1e-12)

    def test_conditional_effects(self):
        gold = {"a": np.zeros(24, int), "b": np.zeros(24, int)}
        gold["a"][SCHEMA.index("intransitive")] = 1
        pred = {v: g.copy() for v, g in gold.items()}
        k = SCHEMA.index("intrans_moves")
        pred["b"][k] = 1  # wrong, but b is not intransitive
        assert attribute_accuracy(pred, gold, SCHEMA).per_attribute["intrans_moves"] == 0.5
        cond = attribute_accuracy(pred, gold, SCHEMA, conditional_effects=True)
        assert cond.per_attribute["intrans_moves"] == 1.0
        assert np.isnan(cond.per_attribute["obj_moves"])

    def test_verb_mismatch(self):
        with pytest.raises(ValueError):
            attribute_accuracy({"a": np.zeros(24, int)}, {"b": np.zeros(24, int)}, SCHEMA)

    def test_empty(self):
        with pytest.raises(ValueError):
            attribute_accuracy({}, {}, SCHEMA)

    def test_aggregate_missing_group(self):
        with pytest.raises(KeyError):
            aggregate_groups({"aspect": 1.0}, SCHEMA)


class TestMajority:
    def test_mode_per_attribute(self):
        gold = {"a": np.zeros(24, int), "b": np.ones(24, int), "c": np.ones(24, int)}
        np.testing.assert_array_equal(majority_baseline(gold, SCHEMA), np.ones(24, int))

    def test_ties_go_to_lowest_value(self):
        gold = {"a": np.full(24, 1), "b": np.zeros(24, int)}
        np.testing.assert_array_equal(majority_baseline(gold, SCHEMA), np.zeros(24, int))

    def test_empty(self):
        with pytest.raises(ValueError):
            majority_baseline({}, SCHEMA)

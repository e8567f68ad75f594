import numpy as np
import pytest

from verbattr.dataio import (
    BadMagicError, DataFormatError, DimensionMismatchError, FingerprintMismatchError, Split, SynthConfig,
    TruncatedFileError, load_attributes, load_definitions, load_embeddings, load_model, load_split,
    read_feature_file, read_model_header, save_model, synth_generate, write_attributes, write_definitions,
    write_embeddings, write_feature_file, write_split, write_synth,
)
from verbattr.schema import build_schema, parse_schema
from verbattr.textattr import AttrTrainConfig, BGRUEncoder, EmbeddingTable, Vocab, build_attr_model
from verbattr.zeroshot import DAPModel, ESZLModel, FeatureSet, ZeroShotHead


@pytest.fixture
def fs():
    return FeatureSet(np.array([[1.0, 2.0, 3.0], [-0.5, 0.25, 8.0]]), [1, 0], ["walk", "run"], "train")


class TestFeatureFiles:
    def test_size_and_round_trip(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        assert p.stat().st_size == 48  # 16-byte header + 2 * (4 + 3 * 4)
        back = read_feature_file(p, expected_width=3)
        np.testing.assert_array_equal(back.features, fs.features)
        np.testing.assert_array_equal(back.labels, fs.labels)
        assert back.verbs == fs.verbs

    def test_lossless_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        fs = FeatureSet(rng.normal(size=(20, 7)), rng.integers(0, 3, 20), ["a", "b", "c"])
        p, q = tmp_path / "a.vaft", tmp_path / "b.vaft"
        write_feature_file(fs, p)
        back = read_feature_file(p)
        np.testing.assert_array_equal(back.features, fs.features.astype(np.float32))
        write_feature_file(back, q)
        assert p.read_bytes() == q.read_bytes()

    def test_bad_magic(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            read_feature_file(p)

    def test_truncated(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            read_feature_file(p)
        p.write_bytes(p.read_bytes()[:10])
        with pytest.raises(TruncatedFileError):
            read_feature_file(p)

    def test_trailing_bytes(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(DimensionMismatchError):
            read_feature_file(p)

    def test_expected_width(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        with pytest.raises(DimensionMismatchError, match="expected 4"):
            read_feature_file(p, expected_width=4)

    def test_missing_verbs(self, tmp_path, fs):
        p = tmp_path / "f.vaft"
        write_feature_file(fs, p)
        (tmp_path / "f.vaft.verbs").unlink()
        with pytest.raises(DataFormatError):
            read_feature_file(p)

    def test_error_carries_path(self, tmp_path):
        p = tmp_path / "junk.vaft"
        p.write_bytes(b"nope")
        with pytest.raises(BadMagicError, match="junk.vaft"):
            read_feature_file(p)


class TestSplits:
    def test_round_trip(self, tmp_path):
        s = Split(["a", "b"], ["c"], ["d"])
        write_split(s, tmp_path / "s.txt")
        assert load_split(tmp_path / "s.txt") == s

    @pytest.mark.parametrize("text,msg", [
        ("a\n[train]\n", "before any section"),
        ("[dev]\na\n", "unknown section"),
        ("[train]\na\n[test]\na\n", "already listed"),
        ("[train]\nzz\n", "unknown verb"),
    ])
    def test_errors(self, tmp_path, text, msg):
        p = tmp_path / "s.txt"
        p.write_text(text)
        with pytest.raises(DataFormatError, match=msg) as info:
            load_split(p, universe=["a", "b"])
        assert info.value.line is not None

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            Split(["a"], [], ["a"])


class TestTextFiles:
    def test_attributes_round_trip(self, tmp_path, schema):
        labels = {"a": np.zeros(24, int), "b": np.ones(24, int)}
        write_attributes(labels, schema, tmp_path / "a.csv")
        back = load_attributes(tmp_path / "a.csv", schema)
        assert list(back) == ["a", "b"]
        np.testing.assert_array_equal(back["b"], labels["b"])

    def test_attribute_errors(self, tmp_path, schema):
        p = tmp_path / "a.csv"
        header = "verb," + ",".join(schema.names) + "\n"
        p.write_text(header + "a," + ",".join(["0"] * 24) + "\na," + ",".join(["0"] * 24) + "\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_attributes(p, schema)
        p.write_text(header + "a," + ",".join(["9"] * 24) + "\n")
        with pytest.raises(DataFormatError, match=r"a\.csv:2:"):
            load_attributes(p, schema)
        p.write_text("verb,x\n")
        with pytest.raises(DataFormatError, match="header"):
            load_attributes(p, schema)

    def test_definitions_order_and_tokenizing(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("run\tMove fast, on foot.\nrun\tflee\nwalk\tmove slowly\n")
        corpus = load_definitions(p)
        assert corpus.first("run") == ["move", "fast", "on", "foot"]
        assert len(corpus["run"]) == 2
        write_definitions(corpus, tmp_path / "e.tsv")
        assert load_definitions(tmp_path / "e.tsv") == corpus

    def test_definitions_malformed(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("run\n")
        with pytest.raises(DataFormatError):
            load_definitions(p)

    def test_embeddings_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        t = EmbeddingTable(["a", "b_c"], rng.normal(size=(2, 5)))
        write_embeddings(t, tmp_path / "e.txt")
        back = load_embeddings(tmp_path / "e.txt")
        assert back.tokens == t.tokens
        assert back.vectors.tobytes() == t.vectors.tobytes()

    @pytest.mark.parametrize("text,exc", [
        ("a 1 2\nb 1\n", DimensionMismatchError),
        ("a 1 x\n", DataFormatError),
        ("a 1 nan\n", DataFormatError),
        ("a 1\na 2\n", DataFormatError),
        ("", DataFormatError),
    ])
    def test_embedding_errors(self, tmp_path, text, exc):
        p = tmp_path / "e.txt"
        p.write_text(text)
        with pytest.raises(exc):
            load_embeddings(p)


class TestModels:
    def _roundtrip(self, tmp_path, model, schema=None):
        p, q = tmp_path / "m.vamd", tmp_path / "n.vamd"
        save_model(model, p, schema)
        back = load_model(p, schema)
        save_model(back, q, schema)
        assert p.read_bytes() == q.read_bytes()
        return back

    def test_zeroshot_head(self, tmp_path, schema):
        rng = np.random.default_rng(0)
        head = ZeroShotHead("joint", rng.normal(size=(40, 3)), rng.normal(size=(2, 3)))
        back = self._roundtrip(tmp_path, head, schema)
        assert back.mode == "joint"
        assert back.W_attr.tobytes() == head.W_attr.tobytes()

    def test_dap_and_eszl(self, tmp_path, schema):
        rng = np.random.default_rng(1)
        const = np.full(40, np.nan)
        const[3] = 1e-3
        dap = DAPModel(rng.normal(size=(40, 3)), rng.normal(size=40), const, np.full(40, 0.5), True)
        back = self._roundtrip(tmp_path, dap, schema)
        assert back.prior_correction and back.constant[3] == 1e-3 and np.isnan(back.constant[0])
        eszl = ESZLModel(rng.normal(size=(3, 40)), 0.1, 10.0)
        assert self._roundtrip(tmp_path, eszl, schema).lam == 10.0

    def test_attr_model_with_bgru(self, tmp_path, schema):
        defs = {"a": [["x", "y"]], "b": [["y"]]}
        model = build_attr_model(AttrTrainConfig(kind="bgru", hidden=3), schema, ["a", "b"], definitions=defs)
        back = self._roundtrip(tmp_path, model, schema)
        assert back.kind == "bgru"
        np.testing.assert_array_equal(back.bgru.embed, model.bgru.embed)
        assert back.bgru.vocab.words == model.bgru.vocab.words

    def test_attr_model_bow(self, tmp_path, schema):
        defs = {"a": [["x", "y"]], "b": [["y"]]}
        model = build_attr_model(AttrTrainConfig(kind="bow"), schema, ["a", "b"], definitions=defs)
        assert self._roundtrip(tmp_path, model, schema).bow_vocab.words == model.bow_vocab.words

    def test_encoder(self, tmp_path):
        enc = BGRUEncoder.init(Vocab(["<unk>", "a"]), 2, 3, np.random.default_rng(0))
        back = self._roundtrip(tmp_path, enc)
        assert back.u_b.tobytes() == enc.u_b.tobytes()

    def test_header(self, tmp_path, schema):
        save_model(ESZLModel(np.zeros((2, 40)), 1.0, 1.0), tmp_path / "m", schema, extra={"head": "eszl"})
        h = read_model_header(tmp_path / "m")
        assert h["kind"] == "eszl" and h["extra"] == {"head": "eszl"}
        assert h["schema_fingerprint"] == schema.fingerprint()

    def test_fingerprint_mismatch(self, tmp_path, schema):
        save_model(ESZLModel(np.zeros((2, 40)), 1.0, 1.0), tmp_path / "m", schema)
        other = parse_schema(schema.to_text().replace("torso", "chest"))
        with pytest.raises(FingerprintMismatchError):
            load_model(tmp_path / "m", other)

    def test_bad_files(self, tmp_path, schema):
        p = tmp_path / "m"
        save_model(ESZLModel(np.zeros((2, 40)), 1.0, 1.0), p, schema)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(TruncatedFileError):
            load_model(p, schema)
        p.write_bytes(b"NOPE" + data[4:])
        with pytest.raises(BadMagicError):
            load_model(p, schema)

    def test_unsupported_object(self, tmp_path):
        with pytest.raises(TypeError):
            save_model(object(), tmp_path / "m")


class TestSynth:
    def test_deterministic(self, tmp_path, schema):
        cfg = SynthConfig(n_classes=12, n_test_classes=3, n_val_classes=2, per_class=2, seed=4, noise=0.1)
        a = write_synth(synth_generate(cfg, schema), tmp_path / "a")
        b = write_synth(synth_generate(cfg, schema), tmp_path / "b")
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes(), key

    def test_seed_changes_data(self, schema):
        a = synth_generate(SynthConfig(seed=1), schema)
        b = synth_generate(SynthConfig(seed=2), schema)
        assert not np.array_equal(a.train.features, b.train.features)

    def test_distinct_signatures(self, schema):
        d = synth_generate(SynthConfig(n_classes=60, n_test_classes=10), schema)
        assert len({tuple(v) for v in d.labels.values()}) == 60

    def test_split_sizes_and_shapes(self, schema):
        d = synth_generate(SynthConfig(n_classes=20, n_test_classes=5, n_val_classes=3, per_class=2,
                                       test_per_class=4, feature_dim=10), schema)
        assert (len(d.split.train), len(d.split.val), len(d.split.test)) == (12, 3, 5)
        assert d.train.features.shape == (24, 10)
        assert d.test.features.shape == (20, 10)
        assert all(d.definitions[v] for v in d.verbs)

    def test_noiseless_features_are_prototypes(self, schema):
        d = synth_generate(SynthConfig(n_classes=10, n_test_classes=2, per_class=3), schema)
        idx = [d.verbs.index(v) for v in d.train.label_names()]
        np.testing.assert_array_equal(d.train.features, d.prototypes[idx])

    @pytest.mark.parametrize("kw", [dict(n_classes=1), dict(noise=-1.0), dict(n_test_classes=40)])
    def test_bad_config(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_written_files_load(self, tmp_path, schema):
        d = synth_generate(SynthConfig(n_classes=10, n_test_classes=2, per_class=2), schema)
        paths = write_synth(d, tmp_path)
        assert build_schema() == parse_schema(paths["schema"].read_text())
        labels = load_attributes(paths["attributes"], schema)
        assert load_split(paths["split"], labels).test == d.split.test
        assert load_embeddings(paths["embeddings"]).vectors.tobytes() == d.embeddings.vectors.tobytes()
        assert read_feature_file(paths["test"]).verbs == d.test.verbs

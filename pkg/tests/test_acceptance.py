"""Acceptance criteria; run with ``pytest tests/test_acceptance.py -v``.

A per-criterion PASS/FAIL summary is printed at the end of the session.
"""

import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verbattr import gradcheck
from verbattr.cli import main
from verbattr.dataio import (
    SynthConfig, load_model, read_feature_file, save_model, synth_generate, write_feature_file,
)
from verbattr.numkernel import log_softmax, softmax
from verbattr.prng import Prng
from verbattr.schema import (
    aggregate_groups, attribute_accuracy, binarize, build_schema, debinarize, encode_lookup, majority_baseline,
    parse_schema,
)
from verbattr.textattr import AttrTrainConfig, train_attr_model
from verbattr.zeroshot import (
    CandidateSet, DAPModel, ESZLModel, ZeroShotConfig, ZeroShotHead, attr_logits, dap_predict, emb_logits,
    eszl_gradient, eszl_solve, joint_logits, prob_product_ensemble, topk_accuracy, train_zeroshot,
)

criterion = pytest.mark.criterion


@criterion(1, "group accuracies aggregate to 61.33 macro / 75.45 micro")
def test_metric_reconstruction():
    schema = build_schema()
    # majority-baseline group accuracies in percent
    row = {"body": 76.84, "duration": 76.58, "aspect": 43.67, "motion": 35.13,
           "social": 42.41, "effects": 84.97, "transitivity": 69.73}
    assert schema.group_sizes == (1, 1, 1, 1, 3, 12, 5)
    macro, micro = aggregate_groups({g: v / 100 for g, v in row.items()}, schema)
    assert f"{100 * macro:.2f}" == "61.33"
    assert f"{100 * micro:.2f}" == "75.45"


@criterion(2, "constant-logit head over 96 classes scores 1/96 top-1 and 5/96 top-5")
def test_random_baseline():
    schema = build_schema()
    data = synth_generate(SynthConfig(n_classes=128, n_test_classes=96, per_class=1, test_per_class=3,
                                      feature_dim=8, emb_dim=8, noise=0.5, seed=0), schema)
    test_verbs = data.test.verbs
    cands = CandidateSet(test_verbs, encode_lookup(test_verbs, data.labels, schema),
                         np.array([data.embeddings.verb_vector(v) for v in test_verbs]))
    train_cands = CandidateSet(data.train.verbs, encode_lookup(data.train.verbs, data.labels, schema),
                               np.array([data.embeddings.verb_vector(v) for v in data.train.verbs]))
    y = data.test.relabel(test_verbs)
    for mode in ("attr", "emb", "joint"):
        head = train_zeroshot(data.train, train_cands, ZeroShotConfig(mode=mode, epochs=0))
        scores = head.scores(data.test.features, cands)
        assert np.ptp(scores) == 0.0
        assert topk_accuracy(scores, y, 1) == 1 / 96
        assert topk_accuracy(scores, y, 5) == 5 / 96
    assert f"{100 / 96:.2f}/{500 / 96:.2f}" == "1.04/5.21"


@criterion(3, "schema has K=24, 7 groups, width 40 and binarization round-trips")
def test_schema_integrity():
    schema = build_schema()
    assert (schema.K, len(schema.groups), schema.width) == (24, 7, 40)
    base = np.zeros(schema.K, dtype=int)
    for group in schema.groups:
        idx = [schema.index(s.name) for s in schema if s.group == group]
        for combo in itertools.product(*(range(schema.arities[k]) for k in idx)):
            labels = base.copy()
            labels[idx] = combo
            sig = binarize(schema, labels)
            assert sig.shape == (40,) and set(np.unique(sig)) <= {-1.0, 1.0}
            np.testing.assert_array_equal(debinarize(schema, sig), labels)


@criterion(4, "every gradient matches central differences to 1e-4 within 30 s")
def test_gradient_suite():
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    for enc in ("emb", "bow", "nbow", "bgru", "bgru+emb"):
        assert f"{enc}/attribute-head" in names
    assert {"features/zeroshot-attr", "features/zeroshot-emb", "features/zeroshot-joint",
            "features/devise-hinge", "bgru/dictionary-ranking"} <= names
    worst = max(results, key=lambda r: r.error)
    assert worst.error <= 1e-4, worst
    assert elapsed < 30.0


def _binary_schema(n):
    return parse_schema("".join(f"g\ta{j}\tbinary\t0,1\n" for j in range(n)))


@criterion(5, "DAP, ESZL and ensemble agree with independent oracles")
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 8))
def test_dap_enumeration(seed, n_attr, n_cls):
    rng = np.random.default_rng(seed)
    schema = _binary_schema(n_attr)
    combos = list(itertools.product([0, 1], repeat=n_attr))
    n_cls = min(n_cls, len(combos))
    picks = rng.choice(len(combos), size=n_cls, replace=False)
    labels = {f"c{i}": np.array(combos[p]) for i, p in enumerate(picks)}
    cands = CandidateSet(list(labels), encode_lookup(list(labels), labels, schema))
    F = 3
    model = DAPModel(rng.normal(size=(n_attr, F)), rng.normal(size=n_attr), np.full(n_attr, np.nan),
                     np.full(n_attr, 0.5))
    g = rng.normal(size=(2, F))
    got = dap_predict(g, model, cands)
    for i, x in enumerate(g):
        p = 1.0 / (1.0 + np.exp(-(model.W @ x + model.b)))
        # sum over all attribute configurations of P(a | x) * [a is the class signature]
        joint = np.zeros(n_cls)
        for a in itertools.product([0, 1], repeat=n_attr):
            pa = np.prod([p[j] if a[j] else 1 - p[j] for j in range(n_attr)])
            for c, v in enumerate(labels):
                if tuple(labels[v]) == a:
                    joint[c] += pa
        np.testing.assert_allclose(got[i], joint / joint.sum(), rtol=1e-10, atol=1e-14)


@criterion(5, "DAP, ESZL and ensemble agree with independent oracles")
def test_eszl_oracles():
    G = np.array([[2.0, 0.0], [1.0, 1.0]])
    V = eszl_solve(G, np.array([0, 1]), np.array([[1.0], [-1.0]]), gamma=1.0, lam=2.0)
    np.testing.assert_allclose(V, [[3 / 44], [-7 / 44]], rtol=0, atol=1e-10)
    rng = np.random.default_rng(0)
    for gamma, lam in itertools.product([1e-2, 1.0, 10.0], repeat=2):
        G, y = rng.normal(size=(20, 6)), rng.integers(0, 5, 20)
        S = rng.choice([-1.0, 1.0], size=(5, 7))
        V = eszl_solve(G, y, S, gamma, lam)
        assert np.linalg.norm(eszl_gradient(V, G, y, S, gamma, lam)) < 1e-8


@criterion(5, "DAP, ESZL and ensemble agree with independent oracles")
def test_ensemble_equals_softmax_of_summed_logs():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.normal(size=(3, 9)) * 3
        dists = [softmax(z) for z in logits]
        np.testing.assert_allclose(prob_product_ensemble(dists), softmax(np.log(dists).sum(axis=0)),
                                   rtol=0, atol=1e-12)


@criterion(6, "gold-attribute pivot head recovers held-out classes")
@pytest.mark.parametrize("noise,threshold", [(0.0, 1.0), (0.5, 3 / 8)])
def test_zero_shot_recoverability(noise, threshold):
    schema = build_schema()
    data = synth_generate(SynthConfig(n_classes=40, n_test_classes=8, per_class=10, feature_dim=64,
                                      noise=noise, seed=0), schema)
    train = CandidateSet(data.split.train, encode_lookup(data.split.train, data.labels, schema))
    test = CandidateSet(data.split.test, encode_lookup(data.split.test, data.labels, schema))
    assert len(train) == 32 and len(test) == 8
    assert len({tuple(data.labels[v]) for v in data.verbs}) == 40
    head = train_zeroshot(data.train, train, ZeroShotConfig(mode="attr", epochs=100, lr=1e-3))
    acc = topk_accuracy(head.scores(data.test.features, test), data.test.relabel(test.verbs), 1)
    assert acc >= threshold if noise == 0.0 else acc > threshold


@criterion(7, "joint logits, uniform ensemble and shift invariance identities")
def test_ensemble_identities():
    rng = np.random.default_rng(2)
    S, A = rng.choice([-1.0, 1.0], size=(6, 40)), rng.normal(size=(6, 10))
    Wa, We, G = rng.normal(size=(40, 12)), rng.normal(size=(10, 12)), rng.normal(size=(15, 12))
    assert np.array_equal(joint_logits(G, S, A, Wa, We), attr_logits(G, S, Wa) + emb_logits(G, A, We))
    for _ in range(100):
        p = softmax(rng.normal(size=7) * 2)
        np.testing.assert_allclose(prob_product_ensemble([p, np.full(7, 1 / 7)]), p, rtol=0, atol=1e-12)
        z = rng.normal(size=(4, 7))
        shift = rng.normal(size=(4, 1)) * 100
        assert np.array_equal(np.argmax(z + shift, axis=1), np.argmax(z, axis=1))
        np.testing.assert_allclose(softmax(z + shift, axis=1), softmax(z, axis=1), atol=1e-12)
        np.testing.assert_allclose(log_softmax(z + shift, axis=1), log_softmax(z, axis=1), atol=1e-10)


def _run_twice(tmp_path, argv, outputs=()):
    blobs = []
    for tag in ("a", "b"):
        extra = ["--report", str(tmp_path / f"{tag}.report")]
        for flag in outputs:
            extra += [flag, str(tmp_path / f"{tag}{flag}")]
        assert main(argv + extra) == 0
        files = [tmp_path / f"{tag}.report"] + [tmp_path / f"{tag}{f}" for f in outputs]
        blobs.append([p.read_bytes() for p in files])
    assert blobs[0] == blobs[1], argv[0]


@criterion(8, "CLI, file formats and Prng are deterministic")
@pytest.mark.filterwarnings("ignore:DAP column")
def test_cli_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth = ["synth", "--classes", "20", "--test-classes", "5", "--val-classes", "3", "--per-class", "3",
             "--feature-dim", "12", "--emb-dim", "10", "--noise", "0.3", "--seed", "7"]
    assert main(synth + ["--out", str(a)]) == 0 and main(synth + ["--out", str(b)]) == 0
    for p in a.iterdir():
        assert (b / p.name).read_bytes() == p.read_bytes(), p.name
    attr = ["--attributes", str(a / "attributes.csv"), "--split", str(a / "split.txt"),
            "--embeddings", str(a / "embeddings.txt"), "--definitions", str(a / "definitions.tsv")]
    run = tmp_path / "run"
    run.mkdir()
    _run_twice(run, ["pretrain-dictionary", "--dictionary", str(a / "definitions.tsv"), "--embeddings",
                     str(a / "embeddings.txt"), "--hidden", "4", "--epochs", "2"], ["--model-out"])
    encoder = tmp_path / "encoder.vamd"
    (run / "a--model-out").rename(encoder)
    _run_twice(run, ["train-attributes", *attr, "--encoder", "bgru+emb", "--hidden", "4", "--epochs", "2",
                     "--pretrained", str(encoder)], ["--model-out"])
    attr_model = run / "attr.vamd"
    assert main(["train-attributes", *attr, "--encoder", "nbow+emb", "--epochs", "3",
                 "--model-out", str(attr_model)]) == 0
    _run_twice(run, ["eval-attributes", *attr, "--model", str(attr_model)], ["--pred-out"])
    pred = run / "a--pred-out"
    for head, extra in [("joint", ["--epochs", "3"]), ("devise", ["--epochs", "3"]), ("dap", []),
                        ("eszl", ["--val-features", str(a / "val.vaft")])]:
        _run_twice(run, ["train-zeroshot", "--features", str(a / "train.vaft"), "--head", head,
                         "--attributes", str(a / "attributes.csv"), "--embeddings", str(a / "embeddings.txt"),
                         *extra], ["--model-out"])
        _run_twice(run, ["eval-zeroshot", "--model", str(run / "a--model-out"), "--features",
                         str(a / "test.vaft"), "--embeddings", str(a / "embeddings.txt"), "--gold-attrs",
                         str(a / "attributes.csv"), "--pred-attrs", str(pred), "--ensemble-product"])
    _run_twice(run, ["gradcheck"])


@criterion(8, "CLI, file formats and Prng are deterministic")
def test_file_round_trips(tmp_path):
    schema = build_schema()
    data = synth_generate(SynthConfig(n_classes=12, n_test_classes=3, per_class=2, noise=0.4), schema)
    write_feature_file(data.train, tmp_path / "f.vaft")
    back = read_feature_file(tmp_path / "f.vaft")
    np.testing.assert_array_equal(back.features, data.train.features.astype(np.float32))
    write_feature_file(back, tmp_path / "g.vaft")
    assert (tmp_path / "f.vaft").read_bytes() == (tmp_path / "g.vaft").read_bytes()
    rng = np.random.default_rng(3)
    models = [ZeroShotHead("joint", rng.normal(size=(40, 5)), rng.normal(size=(4, 5))),
              ESZLModel(rng.normal(size=(5, 40)), 0.1, 10.0)]
    for i, m in enumerate(models):
        save_model(m, tmp_path / f"m{i}", schema)
        save_model(load_model(tmp_path / f"m{i}", schema), tmp_path / f"n{i}", schema)
        assert (tmp_path / f"m{i}").read_bytes() == (tmp_path / f"n{i}").read_bytes()


@criterion(8, "CLI, file formats and Prng are deterministic")
def test_prng_golden():
    p = Prng(42)
    assert [p.next_u64() for _ in range(5)] == [
        0x15780B2E0C2EC716, 0x6104D9866D113A7E, 0xAE17533239E499A1, 0xECB8AD4703B360A1, 0xFDE6DC7FE2EC5E64]


TEXT_SETTINGS = {
    "flat": dict(epochs=50, lr=1e-2, eps=1e-8, batch_size=32),
    "recurrent": dict(epochs=30, lr=1e-2, eps=1e-8, batch_size=32, hidden=32),
}
ENCODERS = {"emb": "flat", "bow": "flat", "nbow": "flat", "bow+emb": "flat", "nbow+emb": "flat",
            "bgru": "recurrent", "bgru+emb": "recurrent"}
FUSIONS = {"bow+emb": ("bow", "emb"), "nbow+emb": ("nbow", "emb"), "bgru+emb": ("bgru", "emb")}


@pytest.fixture(scope="module")
def text_results():
    schema = build_schema()
    data = synth_generate(SynthConfig(n_classes=200, n_test_classes=50, per_class=1, feature_dim=8, emb_dim=32,
                                      noise=1.0, seed=0, distinct=False), schema)
    gold = {v: data.labels[v] for v in data.split.test}
    majority = majority_baseline({v: data.labels[v] for v in data.split.train}, schema)
    results = {"majority": attribute_accuracy({v: majority for v in gold}, gold, schema).micro}
    for kind, setting in ENCODERS.items():
        cfg = AttrTrainConfig(kind=kind, **TEXT_SETTINGS[setting])
        model = train_attr_model(data.split.train, data.labels, schema, cfg, embeddings=data.embeddings,
                                 definitions=data.definitions)
        pred = model.predict_verbs(data.split.test, data.embeddings, data.definitions)
        results[kind] = attribute_accuracy(pred, gold, schema).micro
    print("micro accuracy: " + ", ".join(f"{k} {100 * v:.2f}" for k, v in results.items()))
    return results


@criterion(9, "definition encoders beat the majority baseline and fusion beats its parts")
@pytest.mark.parametrize("kind", [k for k in ENCODERS if k != "emb"])
def test_definition_encoder_beats_majority(text_results, kind):
    assert text_results[kind] > text_results["majority"]


@criterion(9, "definition encoders beat the majority baseline and fusion beats its parts")
@pytest.mark.parametrize("fusion", list(FUSIONS))
def test_fusion_at_least_components(text_results, fusion):
    for part in FUSIONS[fusion]:
        assert text_results[fusion] >= text_results[part], (fusion, part)

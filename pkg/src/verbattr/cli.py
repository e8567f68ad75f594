"""Command-line entry point: ``verbattr <subcommand> [options]``.

Every subcommand is a pure function of its input files and flags.  Reports
hold a human-readable table (``#``-prefixed lines, two decimals) followed by
``key=value`` lines at full precision.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .dataio import (
    SynthConfig, load_attributes, load_definitions, load_embeddings, load_model, load_split,
    read_feature_file, read_model_header, save_model, synth_generate, write_attributes, write_synth,
)
from .schema import attribute_accuracy, build_schema, encode_lookup, load_schema, majority_baseline
from .textattr import ENCODER_KINDS, AttrTrainConfig, PretrainConfig, pretrain_definition_encoder, \
    train_attr_model
from .zeroshot import (
    CandidateSet, DAPModel, DeviseConfig, ESZLModel, ZeroShotConfig, ZeroShotHead, dap_train, devise_train,
    eszl_select, eszl_solve, hubness_stats, prob_product_ensemble, topk_accuracy, true_rank, train_zeroshot,
)
from .numkernel import softmax

log = logging.getLogger("verbattr")

HEAD_KINDS = ("attr", "emb", "joint", "dap", "eszl", "devise")
_OUTPUT_KEYS = {"model_out", "report", "pred_out", "out", "func", "verbose"}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# reports


def config_hash(args: argparse.Namespace) -> str:
    items = {k: v for k, v in sorted(vars(args).items()) if k not in _OUTPUT_KEYS}
    blob = json.dumps(items, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


class Report:
    def __init__(self, command: str, args: argparse.Namespace):
        self.table: list[str] = []
        self.values: list[tuple[str, object]] = [
            ("command", command), ("seed", args.seed), ("config_hash", config_hash(args))]

    def add(self, key: str, value) -> None:
        self.values.append((key, value))

    def render(self) -> str:
        out = [f"# {line}" if line else "#" for line in self.table]
        for k, v in self.values:
            out.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(out) + "\n"

    def emit(self, path) -> None:
        for line in self.table:
            print(line)
        if path:
            Path(path).write_text(self.render(), encoding="utf-8")


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _attr_table(rows, schema) -> list[str]:
    head = f"{'model':<16} {'acc-macro':>9} {'acc-micro':>9} " + " ".join(f"{g:>12}" for g in schema.groups)
    lines = [head]
    for name, rep in rows:
        cells = " ".join(f"{100 * rep.per_group[g]:12.2f}" for g in schema.groups)
        lines.append(f"{name:<16} {100 * rep.macro:9.2f} {100 * rep.micro:9.2f} {cells}")
    return lines


def _add_attr_metrics(report: Report, prefix: str, rep, schema) -> None:
    report.add(f"{prefix}.macro", rep.macro)
    report.add(f"{prefix}.micro", rep.micro)
    for g in schema.groups:
        report.add(f"{prefix}.group.{g}", rep.per_group[g])
    for n in schema.names:
        report.add(f"{prefix}.attr.{n}", rep.per_attribute[n])


# ---------------------------------------------------------------------------
# subcommands


def _schema(args):
    return load_schema(args.schema) if args.schema else build_schema()


def cmd_synth(args) -> int:
    schema = _schema(args)
    cfg = SynthConfig(
        n_classes=args.classes, n_test_classes=args.test_classes, n_val_classes=args.val_classes,
        per_class=args.per_class, test_per_class=args.test_per_class, feature_dim=args.feature_dim,
        emb_dim=args.emb_dim, noise=args.noise, seed=args.seed, distinct=not args.no_distinct,
    )
    data = synth_generate(cfg, schema)
    paths = write_synth(data, args.out)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return 0


def _attr_inputs(args, schema):
    gold = load_attributes(args.attributes, schema)
    split = load_split(args.split, gold.keys())
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    defs = load_definitions(args.definitions) if args.definitions else None
    return gold, split, emb, defs


def cmd_train_attributes(args) -> int:
    schema = _schema(args)
    gold, split, emb, defs = _attr_inputs(args, schema)
    encoder = None
    if args.pretrained:
        if read_model_header(args.pretrained)["kind"] != "bgru_encoder":
            raise CLIError(f"{args.pretrained} is not a pretrained definition encoder")
        encoder = load_model(args.pretrained)
    cfg = AttrTrainConfig(
        kind=args.encoder, epochs=args.epochs, lr=args.lr, batch_size=args.batch, eps=args.eps, l2=args.l2,
        dropout=args.dropout, hidden=args.hidden, seed=args.seed,
    )
    model = train_attr_model(split.train, gold, schema, cfg, embeddings=emb, definitions=defs, encoder=encoder)
    if args.model_out:
        save_model(model, args.model_out, schema)
    test_gold = {v: gold[v] for v in split.test}
    pred = model.predict_verbs(split.test, emb, defs)
    rep = attribute_accuracy(pred, test_gold, schema, conditional_effects=args.conditional_effects)
    maj = majority_baseline({v: gold[v] for v in split.train}, schema)
    base = attribute_accuracy({v: maj for v in split.test}, test_gold, schema,
                              conditional_effects=args.conditional_effects)
    report = Report("train-attributes", args)
    report.table = _attr_table([("most frequent", base), (args.encoder, rep)], schema)
    report.add("encoder", args.encoder)
    report.add("n_train", len(split.train))
    report.add("n_test", len(split.test))
    report.add("final_train_loss", float(model.history[-1]))
    _add_attr_metrics(report, "baseline", base, schema)
    _add_attr_metrics(report, "model", rep, schema)
    report.emit(args.report)
    return 0


def cmd_eval_attributes(args) -> int:
    schema = _schema(args)
    gold, split, emb, defs = _attr_inputs(args, schema)
    model = load_model(args.model, schema)
    verbs = {"train": split.train, "val": split.val, "test": split.test, "all": split.all()}[args.verbs]
    pred = model.predict_verbs(verbs, emb, defs)
    if args.pred_out:
        write_attributes(pred, schema, args.pred_out)
    rep = attribute_accuracy(pred, {v: gold[v] for v in verbs}, schema,
                             conditional_effects=args.conditional_effects)
    report = Report("eval-attributes", args)
    report.table = _attr_table([(model.kind, rep)], schema)
    report.add("n_verbs", len(verbs))
    _add_attr_metrics(report, "model", rep, schema)
    report.emit(args.report)
    return 0


def cmd_pretrain_dictionary(args) -> int:
    emb = load_embeddings(args.embeddings)
    corpus = load_definitions(args.dictionary)
    pairs = [(w, d) for w, defs in corpus.items() for d in defs if w in emb]
    cfg = PretrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch, eps=args.eps,
                         hidden=args.hidden, seed=args.seed)
    enc = pretrain_definition_encoder(pairs, emb, cfg)
    if args.model_out:
        save_model(enc, args.model_out)
    report = Report("pretrain-dictionary", args)
    report.table = [f"pretraining pairs: {len(pairs)}",
                    f"loss: {enc.history[0]:.4f} -> {enc.history[-1]:.4f}"]
    report.add("n_pairs", len(pairs))
    report.add("initial_loss", float(enc.history[0]))
    report.add("final_loss", float(enc.history[-1]))
    report.emit(args.report)
    return 0


def _candidates(verbs, schema, labels=None, emb=None) -> CandidateSet:
    lookup = None
    if labels is not None:
        missing = [v for v in verbs if v not in labels]
        if missing:
            raise CLIError(f"no attributes for candidate verb {missing[0]!r}")
        lookup = encode_lookup(verbs, labels, schema)
    A = np.array([emb.verb_vector(v) for v in verbs]) if emb is not None else None
    return CandidateSet(list(verbs), lookup, A)


def cmd_train_zeroshot(args) -> int:
    schema = _schema(args)
    train = read_feature_file(args.features, split="train")
    labels = load_attributes(args.attributes, schema) if args.attributes else None
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    needs_attr = args.head in ("attr", "joint", "dap", "eszl")
    needs_emb = args.head in ("emb", "joint", "devise")
    if needs_attr and labels is None:
        raise CLIError(f"--head {args.head} needs --attributes")
    if needs_emb and emb is None:
        raise CLIError(f"--head {args.head} needs --embeddings")
    cands = _candidates(train.verbs, schema, labels if needs_attr else None, emb if needs_emb else None)
    extra = {"head": args.head}
    if args.head in ("attr", "emb", "joint"):
        model = train_zeroshot(train, cands, ZeroShotConfig(
            mode=args.head, epochs=args.epochs, lr=args.lr, batch_size=args.batch, eps=args.eps,
            l2=args.l2, seed=args.seed))
        final = float(model.history[-1])
    elif args.head == "devise":
        model = devise_train(train, cands, DeviseConfig(
            epochs=args.epochs, lr=args.lr, batch_size=args.batch, eps=args.eps, l2=args.l2, seed=args.seed))
        final = float(model.history[-1])
    elif args.head == "dap":
        model = dap_train(train, cands, prior_correction=args.dap_prior)
        final = None
    else:
        y = train.relabel(cands.verbs)
        if args.gamma is not None and args.lam is not None:
            model = ESZLModel(eszl_solve(train.features, y, cands.signatures(), args.gamma, args.lam),
                              args.gamma, args.lam)
        elif args.val_features:
            val = read_feature_file(args.val_features, split="val")
            if len(val) == 0:
                raise CLIError(f"{args.val_features} holds no items to select gamma and lambda on")
            model = eszl_select(train, cands, val, _candidates(val.verbs, schema, labels))
        else:
            raise CLIError("--head eszl needs --gamma and --lambda, or --val-features for grid selection")
        final = None
        extra.update(gamma=model.gamma, lam=model.lam)
    if args.model_out:
        save_model(model, args.model_out, schema, extra=extra)
    report = Report("train-zeroshot", args)
    report.table = [f"head {args.head} trained on {len(train)} items / {len(train.verbs)} classes"]
    report.add("head", args.head)
    report.add("n_items", len(train))
    report.add("n_classes", len(train.verbs))
    if final is not None:
        report.add("final_train_loss", final)
    report.emit(args.report)
    return 0


def cmd_eval_zeroshot(args) -> int:
    schema = _schema(args)
    header = read_model_header(args.model)
    model = load_model(args.model, schema)
    head = header.get("extra", {}).get("head") or header["kind"]
    test = read_feature_file(args.features, split="test")
    verbs = test.verbs
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    gold = load_attributes(args.gold_attrs, schema) if args.gold_attrs else None
    pred = load_attributes(args.pred_attrs, schema) if args.pred_attrs else None
    uses_attr = isinstance(model, (DAPModel, ESZLModel)) or (
        isinstance(model, ZeroShotHead) and model.mode in ("attr", "joint"))
    uses_emb = isinstance(model, ZeroShotHead) and model.mode in ("emb", "joint", "devise")
    if uses_emb and emb is None:
        raise CLIError("this head needs --embeddings")
    sources = []
    if uses_attr:
        tables = [t for t in (gold, pred) if t is not None]
        if not tables:
            raise CLIError("attribute heads need --gold-attrs and/or --pred-attrs")
        if len(tables) == 2 and not args.ensemble_product:
            raise CLIError("both --gold-attrs and --pred-attrs given; add --ensemble-product to combine them")
        sources = [_candidates(verbs, schema, t, emb if uses_emb else None) for t in tables]
    else:
        sources = [_candidates(verbs, schema, None, emb)]
    y = test.relabel(verbs)
    score_sets = [model.scores(test.features, c) for c in sources]
    if len(score_sets) > 1:
        scores = np.log(prob_product_ensemble([softmax(s, axis=1) for s in score_sets]))
    else:
        scores = score_sets[0]
    k = args.topk
    if not 1 <= k <= len(verbs):
        raise CLIError(f"--topk {k} outside [1, {len(verbs)}]")
    top1 = topk_accuracy(scores, y, 1)
    topk = topk_accuracy(scores, y, k)
    ranks = true_rank(scores, y)
    preds = np.argsort(-scores, axis=1, kind="stable")[:, 0]
    hub = hubness_stats(preds, len(verbs))
    mode = "+".join(n for n, t in (("atts(P)", pred), ("atts(G)", gold)) if t is not None and uses_attr)
    if uses_emb:
        mode = "+".join(filter(None, [mode, "emb"]))
    report = Report("eval-zeroshot", args)
    report.table = [
        f"{'model':<10} {'sources':<22} {'top-1':>7} {f'top-{k}':>7}",
        f"{head:<10} {mode:<22} {100 * top1:7.2f} {100 * topk:7.2f}",
        f"hubness: top-class share {hub.top_share:.4f}, skewness {hub.skewness:.4f}",
    ]
    report.add("head", head)
    report.add("sources", mode)
    report.add("n_items", len(test))
    report.add("n_candidates", len(verbs))
    report.add("top1", top1)
    report.add(f"top{k}", topk)
    report.add("mean_rank", float(ranks.mean()) + 1.0)
    report.add("hubness.top_share", hub.top_share)
    report.add("hubness.skewness", hub.skewness)
    report.emit(args.report)
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_suite(seed=args.seed, corrupt=args.corrupt)
    report = Report("gradcheck", args)
    report.table = [f"{'encoder':<10} {'head':<20} {'max rel err':>12}  status"]
    ok = True
    for r in rows:
        passed = r.error <= gradcheck.TOLERANCE
        ok &= passed
        report.table.append(f"{r.encoder:<10} {r.head:<20} {r.error:12.3e}  {'PASS' if passed else 'FAIL'}")
        report.add(r.name, f"{r.error:.3e}")
    report.add("status", "pass" if ok else "fail")
    report.emit(args.report)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schema", help="schema file (default: built-in 24-attribute schema)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the report to this path")
    p.add_argument("-v", "--verbose", action="store_true")


def _optim(p, epochs, lr, batch, eps, l2) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch", type=int, default=batch)
    p.add_argument("--eps", type=float, default=eps)
    if l2 is not None:
        p.add_argument("--l2", type=float, default=l2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verbattr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--test-classes", type=int, default=8)
    p.add_argument("--val-classes", type=int, default=0)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--emb-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--no-distinct", action="store_true", help="allow repeated class signatures")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-attributes", cmd_train_attributes), ("eval-attributes", cmd_eval_attributes)):
        p = sub.add_parser(name, help=f"{'train' if name.startswith('train') else 'evaluate'} a text-to-attribute model")
        _common(p)
        p.add_argument("--attributes", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--embeddings")
        p.add_argument("--definitions")
        p.add_argument("--conditional-effects", action="store_true",
                       help="score effect attributes only where the transitivity gate holds")
        if name == "train-attributes":
            p.add_argument("--encoder", choices=ENCODER_KINDS, default="emb")
            p.add_argument("--pretrained", help="pretrained BGRU encoder file")
            p.add_argument("--model-out")
            p.add_argument("--dropout", type=float, default=0.5)
            p.add_argument("--hidden", type=int, default=300)
            _optim(p, 50, 1e-4, 32, 1.0, 1e-4)
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--verbs", choices=("train", "val", "test", "all"), default="test")
            p.add_argument("--pred-out", help="write predicted attributes as an attribute file")
        p.set_defaults(func=func)

    p = sub.add_parser("pretrain-dictionary", help="pretrain a BGRU definition encoder")
    _common(p)
    p.add_argument("--dictionary", required=True, help="TSV of word<TAB>definition")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--hidden", type=int, default=300)
    p.add_argument("--model-out")
    _optim(p, 5, 1e-4, 64, 1e-8, None)
    p.set_defaults(func=cmd_pretrain_dictionary)

    p = sub.add_parser("train-zeroshot", help="train a zero-shot head on image features")
    _common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--head", choices=HEAD_KINDS, default="joint")
    p.add_argument("--attributes")
    p.add_argument("--embeddings")
    p.add_argument("--val-features")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--dap-prior", action="store_true", help="prior-corrected DAP scores")
    p.add_argument("--model-out")
    _optim(p, 100, 1e-3, 32, 1e-8, 1e-4)
    p.set_defaults(func=cmd_train_zeroshot)

    p = sub.add_parser("eval-zeroshot", help="evaluate a zero-shot head on held-out classes")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--gold-attrs", help="gold attribute file for the candidate classes")
    p.add_argument("--pred-attrs", help="predicted attribute file for the candidate classes")
    p.add_argument("--ensemble-product", action="store_true",
                   help="multiply class distributions from gold and predicted attributes")
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(func=cmd_eval_zeroshot)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable component")
    _common(p)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, KeyError, OSError) as exc:
        print(f"verbattr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

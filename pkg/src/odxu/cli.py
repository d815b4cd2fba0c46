"""Command line front end.

Exit codes: 0 success, 1 bad flags or config, 2 failure while running.
Every command that produces files also writes a manifest next to them with
the resolved configuration, input/output content hashes, and wall-clock, so
an artifacts directory is reproducible from its manifest alone.
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_bundle, save_bundle
from .data import load_csv, synth_generate
from .dec import ClusteringHead
from .evaluation import (
    REPORT_SCHEMA,
    auroc,
    classification_metrics,
    emit_report,
    osr_eval,
    render_text_report,
    tp_at_tn,
)
from .exceptions import OdxuError, StageError
from .gbt import GradientBoostedTrees
from .nn import Autoencoder
from .pipeline import (
    MANIFEST_SCHEMA,
    apply_overrides,
    load_config,
    pipeline_end_to_end,
    read_dataset,
    sha256_file,
    write_dataset,
    write_manifest,
)
from .stopping import EarlyStop
from .transfer import enumerate_cases, format_wall_clock, run_grid, run_scenario
from .uq import RECIPES, Metamodel, build_meta_set


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _parse_floats(raw: str) -> list:
    return [float(part) for part in raw.split(",") if part.strip()]


def _parse_ints(raw: str) -> list:
    return [int(part) for part in raw.split(",") if part.strip()]


def _parse_delta_pairs(raw: str) -> list:
    pairs = []
    for part in raw.split(","):
        if not part.strip():
            continue
        ae_part, sep, cluster_part = part.partition(":")
        if not sep:
            raise ValueError(f"delta pair {part!r} is not delta_ae:delta_cluster")
        pairs.append((float(ae_part), float(cluster_part)))
    return pairs


def _stop_from_args(args):
    if args.eta is None:
        return None
    return EarlyStop(eta=args.eta, delta_ae=args.delta_ae,
                     delta_cluster=args.delta_cluster)


def _add_stop_flags(p, delta_ae=0.0005, delta_cluster=0.005):
    p.add_argument("--eta", type=int, default=None,
                   help="early-stop patience in epochs (off when omitted)")
    p.add_argument("--delta-ae", type=float, default=delta_ae)
    p.add_argument("--delta-cluster", type=float, default=delta_cluster)


def _public_args(args) -> dict:
    skip = ("func", "validate", "command")
    out = {}
    for key, value in vars(args).items():
        if key in skip or callable(value):
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


def _manifest(args, t0, outputs, inputs=(), extra=None) -> dict:
    payload = {
        "schema": MANIFEST_SCHEMA,
        "command": args.command,
        "config": _public_args(args),
        "wall_clock": format_wall_clock(time.perf_counter() - t0),
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "inputs": {str(p): sha256_file(p) for p in inputs},
    }
    if extra:
        payload.update(extra)
    return payload


def _finish_file(args, t0, out_path, inputs=(), extra=None):
    manifest_path = Path(str(out_path) + ".manifest.json")
    write_manifest(manifest_path, _manifest(args, t0, [out_path], inputs, extra))


def _finish_dir(args, t0, out_dir, outputs, inputs=(), extra=None):
    write_manifest(Path(out_dir) / "manifest.json",
                   _manifest(args, t0, outputs, inputs, extra))


def _write_report(out_dir: Path, report: dict) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = emit_report(report, out_dir / "report.json")
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return [out_dir / "report.json", out_dir / "report.txt"]


# ----------------------------------------------------------------- commands

def _cmd_ingest(args):
    t0 = time.perf_counter()
    ds = load_csv(args.csv)
    write_dataset(ds, args.out)
    _finish_file(args, t0, args.out, inputs=[args.csv],
                 extra={"n_records": len(ds), "n_truncated": ds.n_truncated})
    print(f"wrote {len(ds)} records to {args.out}")


def _val_synth(args):
    if args.classes < 2:
        raise ValueError("--classes must be >= 2")
    if args.per_class < 1:
        raise ValueError("--per-class must be >= 1")
    if not (0.0 <= args.overlap <= 1.0):
        raise ValueError("--overlap must lie in [0, 1]")


def _cmd_synth(args):
    t0 = time.perf_counter()
    ds = synth_generate(args.classes, args.per_class, args.overlap, args.seed)
    write_dataset(ds, args.out)
    _finish_file(args, t0, args.out, extra={"n_records": len(ds)})
    print(f"wrote {len(ds)} records ({args.classes} classes) to {args.out}")


def _val_pretrain(args):
    if args.latent_dim < 1 or args.max_epochs < 1 or args.batch_size < 1:
        raise ValueError("latent dim, epochs, and batch size must be >= 1")
    if args.learning_rate < 0:
        raise ValueError("--learning-rate must be >= 0")
    _parse_ints(args.hidden)
    _stop_from_args(args)


def _cmd_pretrain(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.data)
    ae = Autoencoder(hidden=tuple(_parse_ints(args.hidden)),
                     latent_dim=args.latent_dim,
                     learning_rate=args.learning_rate,
                     batch_size=args.batch_size, max_epochs=args.max_epochs,
                     momentum=args.momentum, seed=args.seed,
                     stop=_stop_from_args(args))
    ae.fit(ds.features)
    save_bundle(args.out, autoencoder=ae)
    _finish_file(args, t0, args.out, inputs=[args.data],
                 extra={"epochs_run": len(ae.loss_history_),
                        "final_loss": ae.loss_history_[-1]})
    print(f"pretrained on {len(ds)} records, final loss "
          f"{ae.loss_history_[-1]:.6f}, saved to {args.out}")


def _val_cluster(args):
    if args.alpha <= 0 or args.learning_rate <= 0:
        raise ValueError("--alpha and --learning-rate must be > 0")
    if args.max_epochs < 0:
        raise ValueError("--max-epochs must be >= 0")
    _stop_from_args(args)


def _cmd_cluster(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.data)
    bundle = load_bundle(args.bundle)
    if "autoencoder" not in bundle:
        raise StageError("cluster", f"{args.bundle} has no autoencoder section")
    ae = bundle["autoencoder"]
    Z = ae.transform(ds.features)
    k = args.k if args.k > 0 else len(np.unique(ds.labels))
    head = ClusteringHead(k=k, alpha=args.alpha,
                          learning_rate=args.learning_rate,
                          max_epochs=args.max_epochs,
                          update_interval=args.update_interval,
                          seed=args.seed, stop=_stop_from_args(args))
    head.fit(Z)
    save_bundle(args.out, autoencoder=ae, clustering=head,
                classifier=bundle.get("classifier"))
    final = head.loss_history_[-1] if head.loss_history_ else float("nan")
    _finish_file(args, t0, args.out, inputs=[args.data, args.bundle],
                 extra={"k": k, "epochs_run": len(head.loss_history_),
                        "final_loss": final})
    print(f"clustered {len(ds)} records into k={k}, saved to {args.out}")


def _val_train_clf(args):
    if args.n_rounds < 1 or args.max_depth < 1:
        raise ValueError("--n-rounds and --max-depth must be >= 1")
    if args.learning_rate <= 0:
        raise ValueError("--learning-rate must be > 0")


def _cmd_train_clf(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.data)
    bundle = load_bundle(args.bundle)
    if "autoencoder" not in bundle:
        raise StageError("classifier", f"{args.bundle} has no autoencoder section")
    ae = bundle["autoencoder"]
    Z = ae.transform(ds.features)
    if args.fine_tune:
        clf = bundle.get("classifier")
        if clf is None:
            raise StageError("classifier",
                             f"--fine-tune needs a classifier section in {args.bundle}")
        clf.set_params(warm_start=True, n_rounds=args.n_rounds)
    else:
        clf = GradientBoostedTrees(n_rounds=args.n_rounds,
                                   max_depth=args.max_depth,
                                   learning_rate=args.learning_rate,
                                   reg_lambda=args.reg_lambda, gamma=args.gamma)
    clf.fit(Z, ds.labels)
    save_bundle(args.out, autoencoder=ae, clustering=bundle.get("clustering"),
                classifier=clf)
    _finish_file(args, t0, args.out, inputs=[args.data, args.bundle],
                 extra={"n_trees": len(clf.trees_),
                        "final_loss": clf.loss_history_[-1]})
    print(f"trained classifier on {len(ds)} records, saved to {args.out}")


def _val_uq_train(args):
    if args.recipe not in RECIPES:
        raise ValueError(f"--recipe must be one of {', '.join(RECIPES)}")
    if args.ratio < 1:
        raise ValueError("--ratio must be >= 1")
    if not (0.0 <= args.threshold <= 1.0):
        raise ValueError("--threshold must lie in [0, 1]")


def _cmd_uq_train(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.data)
    bundle = load_bundle(args.bundle)
    for section in ("autoencoder", "classifier"):
        if section not in bundle:
            raise StageError("uq", f"{args.bundle} has no {section} section")
    ae, clf = bundle["autoencoder"], bundle["classifier"]
    Z = ae.transform(ds.features)
    Xb, ym = build_meta_set(clf, Z, ds.labels, ratio=args.ratio, seed=args.seed)
    meta = Metamodel(recipe=args.recipe, threshold=args.threshold,
                     n_rounds=args.n_rounds, max_depth=args.max_depth)
    meta.fit(clf, Xb, ym)
    save_bundle(args.out, autoencoder=ae, clustering=bundle.get("clustering"),
                classifier=clf, metamodel=meta)
    _finish_file(args, t0, args.out, inputs=[args.data, args.bundle],
                 extra={"meta_set_size": len(ym), "meta_set_errors": int(ym.sum())})
    print(f"metamodel ({args.recipe}) fitted on {len(ym)} rows, "
          f"saved to {args.out}")


def _scenario_from_args(args):
    template = enumerate_cases()[args.case - 1]
    return replace(template, portion=args.portion, seed=args.seed,
                   stop=_stop_from_args(args))


def _val_transfer(args):
    if not (1 <= args.case <= 6):
        raise ValueError("--case must lie in 1..6")
    _scenario_from_args(args)


def _cmd_transfer(args):
    t0 = time.perf_counter()
    train = read_dataset(args.train_data)
    test = read_dataset(args.test_data)
    spec = _scenario_from_args(args)
    result = run_scenario(spec, args.source, train, test,
                          benign_class=args.benign_class)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.save(out_dir / "model.odxm")
    report = {
        "scenario": {"case": args.case,
                     "ae": spec.ae_action.value,
                     "cluster": spec.cluster_action.value,
                     "clf": spec.clf_action.value,
                     "portion": spec.portion, "seed": spec.seed},
        "classification": result.metrics,
        "phases": result.phases,
    }
    outputs = _write_report(out_dir, report) + [out_dir / "model.odxm"]
    _finish_dir(args, t0, out_dir, outputs,
                inputs=[args.source, args.train_data, args.test_data],
                extra={"scenario_wall_clock": result.wall_clock})


def _flatten_grid_rows(rows) -> list:
    flat = []
    for row in rows:
        item = {"exp": row["exp"], "eta": row["eta"],
                "delta_ae": row["delta_ae"], "delta_cluster": row["delta_cluster"]}
        for portion, acc in row["accuracy"].items():
            item[f"acc@{portion}"] = acc
        for portion, wall in row["time"].items():
            item[f"time@{portion}"] = wall
        flat.append(item)
    return flat


def _val_grid(args):
    if not (1 <= args.case <= 6):
        raise ValueError("--case must lie in 1..6")
    if not _parse_ints(args.etas):
        raise ValueError("--etas is empty")
    if not _parse_delta_pairs(args.deltas):
        raise ValueError("--deltas is empty")
    for portion in _parse_floats(args.portions):
        if not (0.0 < portion <= 1.0):
            raise ValueError(f"portion {portion} outside (0, 1]")


def _cmd_grid(args):
    t0 = time.perf_counter()
    train = read_dataset(args.train_data)
    test = read_dataset(args.test_data)
    rows = run_grid(args.case, _parse_ints(args.etas),
                    _parse_delta_pairs(args.deltas), _parse_floats(args.portions),
                    args.source, train, test, seed=args.seed,
                    benign_class=args.benign_class)
    out_dir = Path(args.out)
    outputs = _write_report(out_dir, {"grid": _flatten_grid_rows(rows)})
    _finish_dir(args, t0, out_dir, outputs,
                inputs=[args.source, args.train_data, args.test_data],
                extra={"n_experiments": len(rows)})


def _cmd_evaluate(args):
    t0 = time.perf_counter()
    ds = read_dataset(args.data)
    bundle = load_bundle(args.bundle)
    for section in ("autoencoder", "classifier"):
        if section not in bundle:
            raise StageError("evaluate", f"{args.bundle} has no {section} section")
    ae, clf = bundle["autoencoder"], bundle["classifier"]
    meta = bundle.get("metamodel")
    Z = ae.transform(ds.features)
    preds = clf.predict(Z)
    z = meta.score_samples(clf, Z) if meta is not None else None
    kwargs = {"z": z, "z_threshold": meta.threshold} if meta is not None else {}
    report = {"classification": classification_metrics(
        preds, ds.labels, args.benign_class, **kwargs)}
    if z is not None:
        errors = (preds.astype(str) != np.asarray(ds.labels).astype(str)).astype(int)
        uq = {"recipe": meta.recipe, "n_test_errors": int(errors.sum())}
        if 0 < errors.sum() < len(errors):
            uq["auroc_misclassification"] = auroc(z, errors)
            uq["tp_at_tn_95"] = tp_at_tn(z, errors, 0.95)
        report["uq"] = uq
    out_dir = Path(args.out)
    outputs = _write_report(out_dir, report)
    _finish_dir(args, t0, out_dir, outputs, inputs=[args.bundle, args.data])


def _val_osr(args):
    if not (0.0 < args.tn_target < 1.0):
        raise ValueError("--tn-target must lie in (0, 1)")


def _cmd_osr(args):
    t0 = time.perf_counter()
    known = read_dataset(args.known)
    unknown = read_dataset(args.unknown)
    bundle = load_bundle(args.bundle)
    for section in ("autoencoder", "classifier", "metamodel"):
        if section not in bundle:
            raise StageError("osr", f"{args.bundle} has no {section} section")
    ae, clf, meta = (bundle["autoencoder"], bundle["classifier"],
                     bundle["metamodel"])
    result = osr_eval(meta, clf, ae.transform(known.features),
                      ae.transform(unknown.features), seed=args.seed,
                      tn_target=args.tn_target)
    out_dir = Path(args.out)
    outputs = _write_report(out_dir, {"osr": result})
    _finish_dir(args, t0, out_dir, outputs,
                inputs=[args.bundle, args.known, args.unknown])


def _cmd_report(args):
    import json

    with open(args.json) as fh:
        report = json.load(fh)
    schema = report.get("schema")
    if schema != REPORT_SCHEMA:
        raise ValueError(f"{args.json}: unsupported report schema {schema!r}")
    print(render_text_report(report), end="")


def _val_run(args):
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set)


def _cmd_run(args):
    cfg = apply_overrides(load_config(args.config), args.set)
    out = pipeline_end_to_end(cfg, args.out)
    print((out / "report.txt").read_text(), end="")
    print(f"artifacts in {out}")


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odxu",
                     description="payload-byte intrusion detection pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert a CSV of hex payloads to the "
                                      "binary dataset format")
    p.add_argument("--csv", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_ingest, validate=None)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--overlap", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=_cmd_synth, validate=_val_synth)

    p = sub.add_parser("pretrain", help="train the autoencoder")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--hidden", default="512,128")
    p.add_argument("--latent-dim", type=int, default=12)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    _add_stop_flags(p)
    p.set_defaults(func=_cmd_pretrain, validate=_val_pretrain)

    p = sub.add_parser("cluster", help="train the clustering head on latents")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--k", type=int, default=0,
                   help="cluster count; 0 means the dataset's class count")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--update-interval", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _add_stop_flags(p)
    p.set_defaults(func=_cmd_cluster, validate=_val_cluster)

    p = sub.add_parser("train-clf", help="train the boosted-tree classifier "
                                         "on latents")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-rounds", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--learning-rate", type=float, default=0.3)
    p.add_argument("--reg-lambda", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--fine-tune", action="store_true",
                   help="continue boosting from the bundled classifier")
    p.set_defaults(func=_cmd_train_clf, validate=_val_train_clf)

    p = sub.add_parser("uq-train", help="fit the error metamodel")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--recipe", default="prob", choices=RECIPES)
    p.add_argument("--ratio", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-rounds", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_uq_train, validate=_val_uq_train)

    p = sub.add_parser("transfer", help="run one adaptation scenario")
    p.add_argument("--case", type=int, required=True)
    p.add_argument("--portion", type=float, default=1.0)
    p.add_argument("--source", type=Path, default=Path("model.odxm"))
    p.add_argument("--train-data", type=Path, default=Path("train.odxd"))
    p.add_argument("--test-data", type=Path, default=Path("test.odxd"))
    p.add_argument("--out", type=Path, default=Path("transfer-out"))
    p.add_argument("--benign-class", default="Benign")
    p.add_argument("--seed", type=int, default=0)
    _add_stop_flags(p)
    p.set_defaults(func=_cmd_transfer, validate=_val_transfer)

    p = sub.add_parser("grid", help="sweep stopping parameters over one case")
    p.add_argument("--case", type=int, default=6)
    p.add_argument("--etas", default="10,15,20")
    p.add_argument("--deltas", default="0.001:0.01,0.0005:0.005",
                   help="comma list of delta_ae:delta_cluster pairs")
    p.add_argument("--portions", default="0.10,0.25,0.50,0.75")
    p.add_argument("--source", type=Path, default=Path("model.odxm"))
    p.add_argument("--train-data", type=Path, default=Path("train.odxd"))
    p.add_argument("--test-data", type=Path, default=Path("test.odxd"))
    p.add_argument("--out", type=Path, default=Path("grid-out"))
    p.add_argument("--benign-class", default="Benign")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grid, validate=_val_grid)

    p = sub.add_parser("evaluate", help="score a bundle on a dataset")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("eval-out"))
    p.add_argument("--benign-class", default="Benign")
    p.set_defaults(func=_cmd_evaluate, validate=None)

    p = sub.add_parser("osr", help="unknown-class detection evaluation")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--known", required=True, type=Path)
    p.add_argument("--unknown", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("osr-out"))
    p.add_argument("--tn-target", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_osr, validate=_val_osr)

    p = sub.add_parser("report", help="render a JSON report as text tables")
    p.add_argument("--json", required=True, type=Path)
    p.set_defaults(func=_cmd_report, validate=None)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    p.set_defaults(func=_cmd_run, validate=_val_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version print and leave
        return int(exc.code or 0)

    if args.validate is not None:
        try:
            args.validate(args)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    try:
        args.func(args)
    except (OdxuError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

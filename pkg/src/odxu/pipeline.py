"""End-to-end pipeline driver: config file in, artifacts directory out.

A run executes ingest, splitting, autoencoder pretraining, clustering,
classifier training, error-metamodel training, and evaluation, then writes
three kinds of artifacts: a model bundle, machine/human reports, and a
manifest recording the config, seeds, output hashes, and wall-clock.  The
report JSON is a pure function of the config, so reruns are byte-identical;
anything timing-dependent lives in the manifest only.
"""

import hashlib
import json
import time
from configparser import ConfigParser, Error as ConfigParserError
from pathlib import Path

import numpy as np

from .checkpoint import save_bundle
from .data import (
    Dataset,
    SplitPlan,
    holdout_unknown,
    load_cache,
    load_csv,
    rebalance,
    save_cache,
    split_indices,
    synth_generate,
)
from .dec import ClusteringHead, cluster_purity
from .evaluation import auroc, classification_metrics, emit_report, osr_eval, tp_at_tn
from .exceptions import StageError
from .gbt import GradientBoostedTrees
from .nn import Autoencoder
from .stopping import EarlyStop
from .transfer import format_wall_clock
from .uq import Metamodel, build_meta_set

MANIFEST_SCHEMA = "odxu-manifest/1"

DEFAULT_CONFIG = {
    "data": {
        "source": "synth", "path": "", "classes": "6", "per_class": "80",
        "overlap": "0.2", "seed": "7", "benign_class": "c00",
        "train_fraction": "0.5", "meta_fraction": "0.25", "test_fraction": "0.25",
        "holdout_class": "", "benign_downsample": "0.0", "split_seed": "11",
    },
    "autoencoder": {
        "hidden": "64", "latent_dim": "12", "learning_rate": "0.05",
        "batch_size": "32", "max_epochs": "8", "momentum": "0.0", "seed": "0",
    },
    "clustering": {
        "k": "0", "alpha": "1.0", "learning_rate": "0.1", "max_epochs": "15",
        "update_interval": "5", "seed": "1",
    },
    "classifier": {
        "n_rounds": "15", "max_depth": "4", "learning_rate": "0.3",
        "reg_lambda": "1.0", "gamma": "0.0",
    },
    "uq": {
        "recipe": "prob", "ratio": "5", "threshold": "0.5", "seed": "2",
        "n_rounds": "15", "max_depth": "4", "tn_target": "0.95",
    },
    "stop": {"enabled": "false", "eta": "10", "delta_ae": "0.0005",
             "delta_cluster": "0.005"},
    "run": {"out_dir": "artifacts"},
}


def default_config() -> dict:
    return {section: dict(keys) for section, keys in DEFAULT_CONFIG.items()}


def load_config(path) -> dict:
    """Parse a sectioned key=value config file over the built-in defaults.

    Unknown sections or keys are rejected so a typo cannot silently fall
    back to a default.
    """
    parser = ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except ConfigParserError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    cfg = default_config()
    for section in parser.sections():
        if section not in cfg:
            raise ValueError(f"{path}: unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in cfg[section]:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            cfg[section][key] = value
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a parsed config."""
    out = {section: dict(keys) for section, keys in cfg.items()}
    for item in overrides or []:
        head, sep, value = item.partition("=")
        if not sep or "." not in head:
            raise ValueError(f"override {item!r} is not section.key=value")
        section, key = head.split(".", 1)
        if section not in out or key not in out[section]:
            raise ValueError(f"override {item!r} names an unknown config entry")
        out[section][key] = value
    return out


def _get(cfg, section, key, cast):
    raw = cfg[section][key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config [{section}] {key}={raw!r}: not a valid "
                         f"{cast.__name__}") from exc


def _hidden_dims(raw: str) -> tuple:
    dims = tuple(int(part) for part in raw.split(",") if part.strip())
    if not dims:
        raise ValueError("autoencoder hidden layer list is empty")
    return dims


def read_dataset(path) -> Dataset:
    """Load a dataset file, dispatching on suffix (.csv or binary cache)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_cache(path)


def _stop_from_config(cfg):
    if not _get(cfg, "stop", "enabled", bool):
        return None
    return EarlyStop(eta=_get(cfg, "stop", "eta", int),
                     delta_ae=_get(cfg, "stop", "delta_ae", float),
                     delta_cluster=_get(cfg, "stop", "delta_cluster", float))


def _stage_ingest(cfg) -> Dataset:
    source = cfg["data"]["source"]
    if source == "synth":
        return synth_generate(_get(cfg, "data", "classes", int),
                              _get(cfg, "data", "per_class", int),
                              _get(cfg, "data", "overlap", float),
                              _get(cfg, "data", "seed", int))
    if source in ("csv", "cache"):
        path = cfg["data"]["path"]
        if not path:
            raise ValueError(f"data source {source!r} requires data.path")
        return read_dataset(path)
    raise ValueError(f"unknown data source {source!r}, "
                     "expected synth, csv, or cache")


def _stage_split(cfg, ds: Dataset):
    down = _get(cfg, "data", "benign_downsample", float)
    if down > 0.0:
        plan = SplitPlan(seed=_get(cfg, "data", "split_seed", int),
                         benign_downsample=down,
                         benign_class=cfg["data"]["benign_class"])
        ds = rebalance(ds, plan)
    unknown = None
    holdout = cfg["data"]["holdout_class"]
    if holdout:
        ds, unknown = holdout_unknown(ds, holdout)
    fractions = [_get(cfg, "data", "train_fraction", float),
                 _get(cfg, "data", "meta_fraction", float),
                 _get(cfg, "data", "test_fraction", float)]
    tr, me, te = split_indices(ds.labels, fractions, stratified=True,
                               seed=_get(cfg, "data", "split_seed", int))
    return ds.subset(tr), ds.subset(me), ds.subset(te), unknown


def _stage_pretrain(cfg, train: Dataset) -> Autoencoder:
    ae = Autoencoder(hidden=_hidden_dims(cfg["autoencoder"]["hidden"]),
                     latent_dim=_get(cfg, "autoencoder", "latent_dim", int),
                     learning_rate=_get(cfg, "autoencoder", "learning_rate", float),
                     batch_size=_get(cfg, "autoencoder", "batch_size", int),
                     max_epochs=_get(cfg, "autoencoder", "max_epochs", int),
                     momentum=_get(cfg, "autoencoder", "momentum", float),
                     seed=_get(cfg, "autoencoder", "seed", int),
                     stop=_stop_from_config(cfg))
    return ae.fit(train.features)


def _stage_cluster(cfg, Z: np.ndarray, n_classes: int) -> ClusteringHead:
    k = _get(cfg, "clustering", "k", int)
    if k <= 0:
        k = n_classes
    head = ClusteringHead(k=k,
                          alpha=_get(cfg, "clustering", "alpha", float),
                          learning_rate=_get(cfg, "clustering", "learning_rate", float),
                          max_epochs=_get(cfg, "clustering", "max_epochs", int),
                          update_interval=_get(cfg, "clustering", "update_interval", int),
                          seed=_get(cfg, "clustering", "seed", int),
                          stop=_stop_from_config(cfg))
    return head.fit(Z)


def _stage_classifier(cfg, Z: np.ndarray, labels) -> GradientBoostedTrees:
    clf = GradientBoostedTrees(
        n_rounds=_get(cfg, "classifier", "n_rounds", int),
        max_depth=_get(cfg, "classifier", "max_depth", int),
        learning_rate=_get(cfg, "classifier", "learning_rate", float),
        reg_lambda=_get(cfg, "classifier", "reg_lambda", float),
        gamma=_get(cfg, "classifier", "gamma", float))
    return clf.fit(Z, labels)


def _stage_uq(cfg, clf, Z_meta: np.ndarray, labels_meta):
    Xb, ym = build_meta_set(clf, Z_meta, labels_meta,
                            ratio=_get(cfg, "uq", "ratio", int),
                            seed=_get(cfg, "uq", "seed", int))
    meta = Metamodel(recipe=cfg["uq"]["recipe"],
                     threshold=_get(cfg, "uq", "threshold", float),
                     n_rounds=_get(cfg, "uq", "n_rounds", int),
                     max_depth=_get(cfg, "uq", "max_depth", int))
    meta.fit(clf, Xb, ym)
    return meta, len(ym), int(ym.sum())


def _stage_evaluate(cfg, ae, head, clf, meta, train, test, unknown):
    benign = cfg["data"]["benign_class"]
    Z_test = ae.transform(test.features)
    preds = clf.predict(Z_test)
    z = meta.score_samples(clf, Z_test)
    classification = classification_metrics(
        preds, test.labels, benign, z=z,
        z_threshold=_get(cfg, "uq", "threshold", float))

    errors = (preds.astype(str) != np.asarray(test.labels).astype(str)).astype(int)
    uq = {"recipe": cfg["uq"]["recipe"], "n_test_errors": int(errors.sum()),
          "mean_z": float(z.mean())}
    if 0 < errors.sum() < len(errors):
        uq["auroc_misclassification"] = auroc(z, errors)
        uq["tp_at_tn_95"] = tp_at_tn(z, errors, 0.95)

    Z_train = ae.transform(train.features)
    clustering = {"k": head.k,
                  "purity": cluster_purity(head.predict(Z_train), train.labels),
                  "final_loss": head.loss_history_[-1] if head.loss_history_ else None}

    report = {
        "scenario": {"n_train": len(train), "n_test": len(test),
                     "n_classes": len(np.unique(train.labels)),
                     "benign_class": benign},
        "classification": classification,
        "clustering": clustering,
        "uq": uq,
    }
    if unknown is not None and len(unknown):
        Z_unknown = ae.transform(unknown.features)
        report["osr"] = osr_eval(meta, clf, Z_test, Z_unknown,
                                 seed=_get(cfg, "uq", "seed", int),
                                 tn_target=_get(cfg, "uq", "tn_target", float))
    return report


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, payload: dict) -> None:
    body = json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n"
    Path(path).write_text(body)


def collect_seeds(cfg) -> dict:
    return {"data": _get(cfg, "data", "seed", int),
            "split": _get(cfg, "data", "split_seed", int),
            "autoencoder": _get(cfg, "autoencoder", "seed", int),
            "clustering": _get(cfg, "clustering", "seed", int),
            "uq": _get(cfg, "uq", "seed", int)}


def pipeline_end_to_end(config_path, out_dir=None) -> Path:
    """Run every stage from a config file; returns the artifacts directory.

    On any stage failure the partially-filled manifest is still written,
    recording which stage died and why, and the failure is re-raised as a
    stage-tagged error.
    """
    cfg = load_config(config_path) if not isinstance(config_path, dict) else config_path
    out = Path(out_dir) if out_dir is not None else Path(cfg["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    manifest = {"schema": MANIFEST_SCHEMA, "command": "run", "config": cfg,
                "seeds": collect_seeds(cfg), "stages": [], "status": "running"}
    t0 = time.perf_counter()
    stage = "ingest"
    try:
        ds = _stage_ingest(cfg)
        manifest["stages"].append(stage)

        stage = "split"
        train, meta_split, test, unknown = _stage_split(cfg, ds)
        manifest["stages"].append(stage)

        stage = "pretrain"
        ae = _stage_pretrain(cfg, train)
        manifest["stages"].append(stage)

        stage = "cluster"
        Z_train = ae.transform(train.features)
        head = _stage_cluster(cfg, Z_train, len(np.unique(train.labels)))
        manifest["stages"].append(stage)

        stage = "classifier"
        clf = _stage_classifier(cfg, Z_train, train.labels)
        manifest["stages"].append(stage)

        stage = "uq"
        Z_meta = ae.transform(meta_split.features)
        meta, meta_size, meta_errors = _stage_uq(cfg, clf, Z_meta, meta_split.labels)
        manifest["stages"].append(stage)

        stage = "evaluate"
        report = _stage_evaluate(cfg, ae, head, clf, meta, train, test, unknown)
        report["uq"]["meta_set_size"] = meta_size
        report["uq"]["meta_set_errors"] = meta_errors
        manifest["stages"].append(stage)

        stage = "report"
        bundle_path = out / "model.odxm"
        save_bundle(bundle_path, autoencoder=ae, clustering=head,
                    classifier=clf, metamodel=meta)
        text = emit_report(report, out / "report.json")
        (out / "report.txt").write_text(text)
        manifest["stages"].append(stage)
    except Exception as exc:
        manifest.update(status="failed", failed_stage=stage, error=str(exc),
                        wall_clock=format_wall_clock(time.perf_counter() - t0))
        write_manifest(out / "manifest.json", manifest)
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, str(exc)) from exc

    manifest.update(
        status="ok",
        wall_clock=format_wall_clock(time.perf_counter() - t0),
        outputs={name: sha256_file(out / name)
                 for name in ("model.odxm", "report.json", "report.txt")})
    write_manifest(out / "manifest.json", manifest)
    return out


def write_dataset(ds: Dataset, path) -> None:
    save_cache(ds, path)

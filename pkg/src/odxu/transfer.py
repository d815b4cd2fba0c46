"""Six-case adaptation harness for moving a trained pipeline to new traffic.

Each pipeline stage (autoencoder, clustering head, classifier) gets one of
three treatments on the target data: kept as is, fine-tuned from its saved
state, or retrained from scratch.  Only six of the combinations make sense;
the two where a fine-tuned encoder feeds a merely fine-tuned clustering head
are rejected, since the old centroids describe a latent space that no longer
exists.
"""

import time
from dataclasses import dataclass, field, replace
from datetime import timedelta
from enum import Enum
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, take_portion
from .dec import ClusteringHead
from .evaluation import classification_metrics
from .exceptions import StageError
from .gbt import GradientBoostedTrees
from .stopping import EarlyStop, early_stop_check  # noqa: F401  (re-export)

__all__ = [
    "Action", "ScenarioSpec", "TransferResult", "enumerate_cases",
    "case_number", "run_scenario", "run_grid", "format_wall_clock",
    "EarlyStop", "early_stop_check",
]


class Action(Enum):
    AS_IS = "AsIs"
    FINE_TUNE = "FineTune"
    TRAIN = "Train"


_AE_ACTIONS = (Action.AS_IS, Action.FINE_TUNE)
_STAGE_ACTIONS = (Action.FINE_TUNE, Action.TRAIN)


def _coerce_action(value, allowed, field_name):
    action = Action(value) if not isinstance(value, Action) else value
    if action not in allowed:
        names = "/".join(a.value for a in allowed)
        raise ValueError(f"{field_name} must be one of {names}, got {action.value}")
    return action


@dataclass(frozen=True)
class ScenarioSpec:
    """One adaptation recipe: per-stage action, data portion, stopping rule."""

    ae_action: Action
    cluster_action: Action
    clf_action: Action
    portion: float = 1.0
    source_checkpoint: object = None
    stop: EarlyStop = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ae_action",
                           _coerce_action(self.ae_action, _AE_ACTIONS, "ae_action"))
        object.__setattr__(self, "cluster_action",
                           _coerce_action(self.cluster_action, _STAGE_ACTIONS,
                                          "cluster_action"))
        object.__setattr__(self, "clf_action",
                           _coerce_action(self.clf_action, _STAGE_ACTIONS,
                                          "clf_action"))
        if self.ae_action is Action.FINE_TUNE and self.cluster_action is Action.FINE_TUNE:
            raise ValueError(
                "a fine-tuned encoder invalidates saved centroids; "
                "cluster_action must be Train when ae_action is FineTune")
        if not (0.0 < self.portion <= 1.0):
            raise ValueError(f"portion must lie in (0, 1], got {self.portion}")
        if self.stop is not None and not isinstance(self.stop, EarlyStop):
            raise ValueError("stop must be an EarlyStop or None")

    def actions(self) -> tuple:
        return (self.ae_action, self.cluster_action, self.clf_action)


_CASE_TABLE = (
    (Action.FINE_TUNE, Action.TRAIN, Action.TRAIN),
    (Action.AS_IS, Action.FINE_TUNE, Action.TRAIN),
    (Action.AS_IS, Action.TRAIN, Action.TRAIN),
    (Action.FINE_TUNE, Action.TRAIN, Action.FINE_TUNE),
    (Action.AS_IS, Action.FINE_TUNE, Action.FINE_TUNE),
    (Action.AS_IS, Action.TRAIN, Action.FINE_TUNE),
)


def enumerate_cases() -> list:
    """The six valid per-stage action combinations, in case order 1..6."""
    return [ScenarioSpec(ae, cl, clf) for ae, cl, clf in _CASE_TABLE]


def case_number(spec: ScenarioSpec) -> int:
    """1-based case index of a spec's action combination."""
    return _CASE_TABLE.index(spec.actions()) + 1


def format_wall_clock(seconds: float) -> str:
    """Elapsed seconds as h:mm:ss, e.g. 1500 s -> '0:25:00'."""
    if seconds < 0:
        raise ValueError("negative duration")
    return str(timedelta(seconds=round(seconds)))


@dataclass(frozen=True)
class TransferResult:
    spec: ScenarioSpec
    models: dict
    metrics: dict
    phases: dict
    wall_clock: str
    wall_seconds: float = field(compare=False)

    def save(self, path) -> None:
        ckpt.save_bundle(path, autoencoder=self.models["autoencoder"],
                         clustering=self.models["clustering"],
                         classifier=self.models["classifier"])


def _load_source(spec: ScenarioSpec, source) -> dict:
    if source is None:
        source = spec.source_checkpoint
    if source is None:
        raise ValueError("no source bundle: pass one or set spec.source_checkpoint")
    if isinstance(source, (str, Path)):
        return ckpt.load_bundle(source)
    # an already-loaded dict: re-encode so the caller's objects are never
    # mutated by fine-tuning
    codec = {"autoencoder": (ckpt.encode_autoencoder, ckpt.decode_autoencoder),
             "clustering": (ckpt.encode_clustering, ckpt.decode_clustering),
             "classifier": (ckpt.encode_classifier, ckpt.decode_classifier)}
    out = {}
    for name, model in source.items():
        if name in codec:
            enc, dec = codec[name]
            out[name] = dec(enc(model))
    return out


def _require(bundle: dict, section: str, stage: str):
    model = bundle.get(section)
    if model is None:
        raise StageError(stage, f"source bundle is missing the {section!r} section "
                                f"required by this action")
    return model


def run_scenario(spec: ScenarioSpec, source, train, test, *,
                 benign_class: str = "Benign") -> TransferResult:
    """Adapt a saved pipeline to target data and score it on a held-out set.

    ``source`` is a bundle path or an already-loaded section dict (the
    latter is copied, never mutated).  ``train``/``test`` are target-side
    datasets; ``spec.portion`` subsamples the training side, stratified.
    Stages run in order: autoencoder, clustering on its latents, classifier
    on the same latents.  Metrics are computed on ``test``.
    """
    if not isinstance(train, Dataset) or not isinstance(test, Dataset):
        raise TypeError("train and test must be Dataset instances")
    t0 = time.perf_counter()
    bundle = _load_source(spec, source)
    used = take_portion(train, spec.portion, seed=spec.seed)
    X, y = used.features, used.labels
    phases = {}

    ae = _require(bundle, "autoencoder", "ae")
    if spec.ae_action is Action.FINE_TUNE:
        before = len(ae.loss_history_)
        ae.set_params(warm_start=True)
        if spec.stop is not None:
            ae.set_params(stop=spec.stop)
        ae.fit(X)
        phases["ae"] = {"action": "FineTune",
                        "epochs": len(ae.loss_history_) - before,
                        "loss": ae.loss_history_[before:]}
    else:
        phases["ae"] = {"action": "AsIs", "epochs": 0, "loss": []}
    Z = ae.transform(X)

    if spec.cluster_action is Action.FINE_TUNE:
        head = _require(bundle, "clustering", "cluster")
        before = len(head.loss_history_)
        head.set_params(warm_start=True)
    else:
        # fresh head: optimizer settings inherited from the source when
        # available, k sized to the target's own class count
        template = bundle.get("clustering")
        params = template.get_params() if template is not None else {}
        params.update(warm_start=False, seed=spec.seed, k=len(np.unique(y)))
        head = ClusteringHead(**params)
        before = 0
    if spec.stop is not None:
        head.set_params(stop=spec.stop)
    head.fit(Z)
    phases["cluster"] = {"action": spec.cluster_action.value,
                         "epochs": len(head.loss_history_) - before,
                         "loss": head.loss_history_[before:]}

    if spec.clf_action is Action.FINE_TUNE:
        clf = _require(bundle, "classifier", "classifier")
        rounds_before = len(clf.loss_history_)
        clf.set_params(warm_start=True)
    else:
        template = bundle.get("classifier")
        params = template.get_params() if template is not None else {}
        params.update(warm_start=False)
        clf = GradientBoostedTrees(**params)
        rounds_before = 0
    clf.fit(Z, y)
    phases["classifier"] = {"action": spec.clf_action.value,
                            "rounds": len(clf.loss_history_) - rounds_before,
                            "loss": clf.loss_history_[rounds_before:]}

    preds = clf.predict(ae.transform(test.features))
    metrics = classification_metrics(preds, test.labels, benign_class)
    metrics["n_train_used"] = len(used)
    metrics["n_test"] = len(test)

    elapsed = time.perf_counter() - t0
    models = {"autoencoder": ae, "clustering": head, "classifier": clf}
    return TransferResult(spec=spec, models=models, metrics=metrics,
                          phases=phases, wall_clock=format_wall_clock(elapsed),
                          wall_seconds=elapsed)


def run_grid(case: int, etas, deltas, portions, source, train, test, *,
             seed: int = 0, benign_class: str = "Benign") -> list:
    """Cross-product stopping-rule sweep over one case, one row per config.

    ``deltas`` is a sequence of (delta_ae, delta_cluster) pairs.  Each row
    carries the experiment number, the stopping parameters, and per-portion
    accuracy and wall-clock columns keyed by the portion written with two
    decimals.
    """
    if not (1 <= case <= len(_CASE_TABLE)):
        raise ValueError(f"case must lie in 1..{len(_CASE_TABLE)}, got {case}")
    template = enumerate_cases()[case - 1]
    rows = []
    exp = 0
    for eta in etas:
        for delta_ae, delta_cluster in deltas:
            exp += 1
            row = {"exp": exp, "eta": eta, "delta_ae": delta_ae,
                   "delta_cluster": delta_cluster, "accuracy": {}, "time": {}}
            for portion in portions:
                spec = replace(template, portion=portion, seed=seed,
                               stop=EarlyStop(eta=eta, delta_ae=delta_ae,
                                              delta_cluster=delta_cluster))
                result = run_scenario(spec, source, train, test,
                                      benign_class=benign_class)
                key = f"{portion:.2f}"
                row["accuracy"][key] = result.metrics["multiclass_accuracy"]
                row["time"][key] = result.wall_clock
            rows.append(row)
    return rows

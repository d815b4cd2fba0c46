"""Binary bundle format for trained pipeline stages.

A bundle file starts with the magic ``ODXM`` and a version word, then any
number of named sections (autoencoder, clustering, classifier, metamodel),
and ends with a CRC-32 of everything before it.  Each section payload is a
JSON descriptor followed by an optional raw block of little-endian 64-bit
floats for the bulky arrays.  JSON carries floats at full precision (the
shortest round-tripping decimal), so a save/load cycle is bitwise exact.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .dec import ClusteringHead
from .exceptions import CheckpointError
from .gbt import GradientBoostedTrees, TreeNode
from .nn import Autoencoder, DenseNet
from .stopping import EarlyStop
from .uq import Metamodel
from .validation import check_fitted

MAGIC = b"ODXM"
VERSION = 1

SECTION_NAMES = ("autoencoder", "clustering", "classifier", "metamodel")


# ---------------------------------------------------------------- container

def write_container(path, sections: dict) -> None:
    """Write named byte blobs into a single checked container file."""
    if not sections:
        raise ValueError("refusing to write an empty container")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<H", VERSION)
    for name, payload in sections.items():
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<Q", len(payload))
        body += payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def read_container(path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 2 + 4:
        raise CheckpointError(f"{path}: truncated container")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    stored_crc, = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    sections, pos, end = {}, 6, len(blob) - 4
    while pos < end:
        if pos + 2 > end:
            raise CheckpointError(f"{path}: truncated section header")
        name_len, = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos: pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 > end:
            raise CheckpointError(f"{path}: truncated section header")
        payload_len, = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + payload_len > end:
            raise CheckpointError(f"{path}: section {name!r} overruns the file")
        if name in sections:
            raise CheckpointError(f"{path}: duplicate section {name!r}")
        sections[name] = blob[pos: pos + payload_len]
        pos += payload_len
    return sections


def _pack(header: dict, tail: np.ndarray = None) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    raw = b"" if tail is None else np.ascontiguousarray(tail, dtype="<f8").tobytes()
    return struct.pack("<I", len(head)) + head + raw


def _unpack(payload: bytes):
    head_len, = struct.unpack_from("<I", payload, 0)
    header = json.loads(payload[4: 4 + head_len].decode("utf-8"))
    tail = np.frombuffer(payload[4 + head_len:], dtype="<f8")
    return header, tail


def _stop_to_json(stop):
    if stop is None:
        return None
    return {"eta": stop.eta, "delta_ae": stop.delta_ae,
            "delta_cluster": stop.delta_cluster}


def _stop_from_json(d):
    return None if d is None else EarlyStop(**d)


# ----------------------------------------------------------------- encoders

def encode_autoencoder(ae: Autoencoder) -> bytes:
    check_fitted(ae, "net_")
    dims, acts = ae.net_.architecture()
    params = ae.get_params()
    params["hidden"] = list(params["hidden"])
    params["stop"] = _stop_to_json(params["stop"])
    header = {
        "params": params,
        "dims": dims,
        "activations": acts,
        "n_encoder_layers": ae._n_encoder_layers,
        "loss_history": list(ae.loss_history_),
    }
    return _pack(header, ae.net_.param_vector())


def decode_autoencoder(payload: bytes) -> Autoencoder:
    header, vec = _unpack(payload)
    params = dict(header["params"])
    params["hidden"] = tuple(params["hidden"])
    params["stop"] = _stop_from_json(params["stop"])
    ae = Autoencoder(**params)
    net = DenseNet.build(header["dims"], header["activations"], seed=0)
    net.set_param_vector(vec)
    ae.net_ = net
    ae._n_encoder_layers = header["n_encoder_layers"]
    ae.n_features_in_ = header["dims"][0]
    ae.loss_history_ = list(header["loss_history"])
    return ae


def encode_clustering(head: ClusteringHead) -> bytes:
    check_fitted(head, "centroids_")
    params = head.get_params()
    params["stop"] = _stop_to_json(params["stop"])
    header = {
        "params": params,
        "shape": list(head.centroids_.shape),
        "loss_history": list(head.loss_history_),
    }
    return _pack(header, head.centroids_)


def decode_clustering(payload: bytes) -> ClusteringHead:
    header, vec = _unpack(payload)
    params = dict(header["params"])
    params["stop"] = _stop_from_json(params["stop"])
    head = ClusteringHead(**params)
    head.centroids_ = vec.reshape(header["shape"]).copy()
    head.loss_history_ = list(header["loss_history"])
    return head


def _flatten_tree(node: TreeNode, out: list) -> None:
    if node.is_leaf:
        out.append({"weight": node.weight, "cover": node.cover})
        return
    out.append({"feature": node.feature, "threshold": node.threshold,
                "gain": node.gain, "cover": node.cover})
    _flatten_tree(node.left, out)
    _flatten_tree(node.right, out)


def _unflatten_tree(nodes: list, pos: int = 0):
    d = nodes[pos]
    pos += 1
    if "weight" in d:
        return TreeNode.leaf(d["weight"], d["cover"]), pos
    left, pos = _unflatten_tree(nodes, pos)
    right, pos = _unflatten_tree(nodes, pos)
    node = TreeNode.split(d["feature"], d["threshold"], d["gain"],
                          left, right, d["cover"])
    return node, pos


def _classifier_state(clf: GradientBoostedTrees) -> dict:
    check_fitted(clf, "trees_")
    trees = []
    for class_index, root in clf.trees_:
        flat = []
        _flatten_tree(root, flat)
        trees.append({"class_index": int(class_index), "nodes": flat})
    return {
        "params": clf.get_params(),
        "classes": np.asarray(clf.classes_).tolist(),
        "n_features_in": int(clf.n_features_in_),
        "trees": trees,
        "feature_gain": clf.feature_gain_.tolist(),
        "loss_history": list(clf.loss_history_),
    }


def _restore_classifier(state: dict) -> GradientBoostedTrees:
    clf = GradientBoostedTrees(**state["params"])
    clf.classes_ = np.asarray(state["classes"])
    clf.n_classes_ = len(clf.classes_)
    clf.n_features_in_ = state["n_features_in"]
    clf.trees_ = [(t["class_index"], _unflatten_tree(t["nodes"])[0])
                  for t in state["trees"]]
    clf.feature_gain_ = np.asarray(state["feature_gain"], dtype=np.float64)
    clf.loss_history_ = list(state["loss_history"])
    return clf


def encode_classifier(clf: GradientBoostedTrees) -> bytes:
    return _pack(_classifier_state(clf))


def decode_classifier(payload: bytes) -> GradientBoostedTrees:
    header, _ = _unpack(payload)
    return _restore_classifier(header)


def encode_metamodel(meta: Metamodel) -> bytes:
    check_fitted(meta, "model_")
    header = {
        "params": meta.get_params(),
        "base_ref": meta.base_ref_,
        "model": _classifier_state(meta.model_),
    }
    return _pack(header)


def decode_metamodel(payload: bytes) -> Metamodel:
    header, _ = _unpack(payload)
    meta = Metamodel(**header["params"])
    meta.model_ = _restore_classifier(header["model"])
    meta.base_ref_ = header["base_ref"]
    return meta


_ENCODERS = {
    "autoencoder": encode_autoencoder,
    "clustering": encode_clustering,
    "classifier": encode_classifier,
    "metamodel": encode_metamodel,
}
_DECODERS = {
    "autoencoder": decode_autoencoder,
    "clustering": decode_clustering,
    "classifier": decode_classifier,
    "metamodel": decode_metamodel,
}


# ------------------------------------------------------------------ bundles

def save_bundle(path, *, autoencoder=None, clustering=None, classifier=None,
                metamodel=None) -> None:
    """Write the given fitted models to one container file.

    Any subset may be passed, but a metamodel without its paired classifier
    is rejected: the bundle must stay self-explanatory about which model the
    error scores describe.
    """
    models = {"autoencoder": autoencoder, "clustering": clustering,
              "classifier": classifier, "metamodel": metamodel}
    present = {name: m for name, m in models.items() if m is not None}
    if not present:
        raise ValueError("nothing to save")
    if metamodel is not None:
        if classifier is None:
            raise ValueError("a metamodel requires its paired classifier in the bundle")
        if metamodel.base_ref_ != classifier.fingerprint():
            raise CheckpointError(
                "metamodel was fitted against a different classifier than "
                "the one being bundled")
    write_container(path, {name: _ENCODERS[name](m) for name, m in present.items()})


def load_bundle(path) -> dict:
    """Read a container back into fitted model objects, keyed by section name.

    Verifies the checksum, rejects unknown sections, and refuses a bundle
    whose metamodel does not match the bundled classifier's fingerprint.
    """
    sections = read_container(path)
    unknown = set(sections) - set(SECTION_NAMES)
    if unknown:
        raise CheckpointError(f"{path}: unknown sections {sorted(unknown)}")
    models = {name: _DECODERS[name](payload) for name, payload in sections.items()}
    meta = models.get("metamodel")
    if meta is not None:
        clf = models.get("classifier")
        if clf is None:
            raise CheckpointError(f"{path}: metamodel section without its classifier")
        if meta.base_ref_ != clf.fingerprint():
            raise CheckpointError(
                f"{path}: metamodel references a different classifier "
                f"(expected {meta.base_ref_[:12]}..., "
                f"bundle has {clf.fingerprint()[:12]}...)")
    return models

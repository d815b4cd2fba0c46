import struct
import zlib

import numpy as np
import pytest

from odxu.checkpoint import (
    MAGIC,
    VERSION,
    decode_classifier,
    encode_classifier,
    encode_metamodel,
    load_bundle,
    read_container,
    save_bundle,
    write_container,
)
from odxu.dec import ClusteringHead
from odxu.exceptions import CheckpointError
from odxu.gbt import GradientBoostedTrees
from odxu.nn import Autoencoder
from odxu.stopping import EarlyStop
from odxu.uq import Metamodel, build_meta_set


@pytest.fixture(scope="module")
def models():
    rng = np.random.default_rng(0)
    X = rng.random((60, 20))
    ae = Autoencoder(hidden=(8,), latent_dim=3, max_epochs=5, seed=1).fit(X)
    Z = ae.transform(X)
    head = ClusteringHead(k=3, max_epochs=5, seed=2).fit(Z)

    centers = rng.standard_normal((3, 6)) * 2.0
    Xc = np.vstack([c + 1.2 * rng.standard_normal((80, 6)) for c in centers])
    yc = np.repeat(np.array(["Benign", "Dos", "Scan"]), 80)
    Xm = np.vstack([c + 1.2 * rng.standard_normal((80, 6)) for c in centers])
    clf = GradientBoostedTrees(n_rounds=8, max_depth=3).fit(Xc, yc)
    Xb, ym = build_meta_set(clf, Xm, yc, ratio=5, seed=3)
    meta = Metamodel(recipe="prob", n_rounds=6, max_depth=3).fit(clf, Xb, ym)
    return ae, head, clf, meta, X, Xc


class TestContainer:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.odxm"
        sections = {"alpha": b"\x00\x01binary", "beta": b""}
        write_container(path, sections)
        assert read_container(path) == sections

    def test_layout(self, tmp_path):
        path = tmp_path / "m.odxm"
        write_container(path, {"ab": b"xyz"})
        blob = path.read_bytes()
        assert blob[:4] == MAGIC
        assert struct.unpack_from("<H", blob, 4)[0] == VERSION
        assert struct.unpack_from("<H", blob, 6)[0] == 2          # name length
        assert blob[8:10] == b"ab"
        assert struct.unpack_from("<Q", blob, 10)[0] == 3         # payload length
        assert blob[18:21] == b"xyz"
        assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.odxm"
        write_container(path, {"a": b"x"})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            read_container(path)

    def test_flipped_bit_detected(self, tmp_path):
        path = tmp_path / "m.odxm"
        write_container(path, {"a": b"payload-bytes"})
        blob = bytearray(path.read_bytes())
        blob[12] ^= 0x40
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            read_container(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.odxm"
        body = MAGIC + struct.pack("<H", 99)
        body += struct.pack("<I", zlib.crc32(body))
        path.write_bytes(body)
        with pytest.raises(CheckpointError, match="version"):
            read_container(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.odxm"
        path.write_bytes(b"OD")
        with pytest.raises(CheckpointError, match="truncated"):
            read_container(path)

    def test_duplicate_section_rejected(self, tmp_path):
        path = tmp_path / "m.odxm"
        body = MAGIC + struct.pack("<H", VERSION)
        for _ in range(2):
            body += struct.pack("<H", 1) + b"a" + struct.pack("<Q", 1) + b"x"
        body += struct.pack("<I", zlib.crc32(body))
        path.write_bytes(body)
        with pytest.raises(CheckpointError, match="duplicate"):
            read_container(path)

    def test_overrunning_section_rejected(self, tmp_path):
        path = tmp_path / "m.odxm"
        body = MAGIC + struct.pack("<H", VERSION)
        body += struct.pack("<H", 1) + b"a" + struct.pack("<Q", 10 ** 6) + b"x"
        body += struct.pack("<I", zlib.crc32(body))
        path.write_bytes(body)
        with pytest.raises(CheckpointError, match="overruns"):
            read_container(path)

    def test_empty_write_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_container(tmp_path / "m.odxm", {})


class TestAutoencoderSection:
    def test_bitwise_round_trip(self, models, tmp_path):
        ae, _, _, _, X, _ = models
        path = tmp_path / "ae.odxm"
        save_bundle(path, autoencoder=ae)
        loaded = load_bundle(path)["autoencoder"]
        assert np.array_equal(loaded.net_.param_vector(), ae.net_.param_vector())
        assert np.array_equal(loaded.transform(X), ae.transform(X))
        assert np.array_equal(loaded.reconstruct(X), ae.reconstruct(X))
        assert loaded.loss_history_ == ae.loss_history_
        assert loaded.get_params() == ae.get_params()

    def test_early_stop_config_survives(self, tmp_path):
        rng = np.random.default_rng(1)
        X = rng.random((40, 10))
        stop = EarlyStop(eta=3, delta_ae=0.01, delta_cluster=0.1)
        ae = Autoencoder(hidden=(6,), latent_dim=2, max_epochs=4, stop=stop).fit(X)
        path = tmp_path / "ae.odxm"
        save_bundle(path, autoencoder=ae)
        assert load_bundle(path)["autoencoder"].stop == stop

    def test_loaded_model_can_fine_tune(self, models, tmp_path):
        ae, _, _, _, X, _ = models
        path = tmp_path / "ae.odxm"
        save_bundle(path, autoencoder=ae)
        loaded = load_bundle(path)["autoencoder"]
        before = len(loaded.loss_history_)
        loaded.set_params(warm_start=True, max_epochs=2)
        loaded.fit(X)
        assert len(loaded.loss_history_) == before + 2

    def test_unfitted_rejected(self, tmp_path):
        with pytest.raises(Exception):
            save_bundle(tmp_path / "x.odxm", autoencoder=Autoencoder())


class TestClusteringSection:
    def test_bitwise_round_trip(self, models, tmp_path):
        _, head, _, _, X, _ = models
        path = tmp_path / "c.odxm"
        save_bundle(path, clustering=head)
        loaded = load_bundle(path)["clustering"]
        assert np.array_equal(loaded.centroids_, head.centroids_)
        assert loaded.loss_history_ == head.loss_history_
        assert loaded.get_params() == head.get_params()

    def test_loaded_head_can_continue(self, models, tmp_path):
        ae, head, _, _, X, _ = models
        path = tmp_path / "c.odxm"
        save_bundle(path, clustering=head)
        loaded = load_bundle(path)["clustering"]
        loaded.set_params(warm_start=True, max_epochs=3)
        loaded.fit(ae.transform(X))
        assert len(loaded.loss_history_) == len(head.loss_history_) + 3


class TestClassifierSection:
    def test_fingerprint_preserved(self, models, tmp_path):
        _, _, clf, _, _, _ = models
        loaded = decode_classifier(encode_classifier(clf))
        assert loaded.fingerprint() == clf.fingerprint()

    def test_predictions_and_state_preserved(self, models, tmp_path):
        _, _, clf, _, _, Xc = models
        path = tmp_path / "clf.odxm"
        save_bundle(path, classifier=clf)
        loaded = load_bundle(path)["classifier"]
        assert np.array_equal(loaded.predict(Xc), clf.predict(Xc))
        assert np.array_equal(loaded.predict_proba(Xc), clf.predict_proba(Xc))
        assert np.array_equal(loaded.gain_vector(), clf.gain_vector())
        assert loaded.loss_history_ == clf.loss_history_
        assert loaded.classes_.dtype == clf.classes_.dtype

    def test_integer_classes_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        X = rng.random((50, 4))
        y = rng.integers(0, 3, size=50)
        clf = GradientBoostedTrees(n_rounds=3, max_depth=2).fit(X, y)
        loaded = decode_classifier(encode_classifier(clf))
        assert loaded.classes_.dtype.kind == "i"
        assert loaded.fingerprint() == clf.fingerprint()

    def test_loaded_classifier_can_fine_tune(self, models, tmp_path):
        _, _, clf, _, _, Xc = models
        loaded = decode_classifier(encode_classifier(clf))
        rng = np.random.default_rng(3)
        y_new = np.repeat(np.array(["Benign", "Dos", "Scan"]), 80)
        loaded.set_params(warm_start=True, n_rounds=2)
        loaded.fit(Xc + 0.01 * rng.standard_normal(Xc.shape), y_new)
        assert len(loaded.trees_) == len(clf.trees_) + 2 * 3
        # the source prefix is untouched
        for (ca, ta), (cb, tb) in zip(clf.trees_, loaded.trees_):
            assert ca == cb and ta.to_dict() == tb.to_dict()


class TestMetamodelSection:
    def test_scores_preserved(self, models, tmp_path):
        _, _, clf, meta, _, Xc = models
        path = tmp_path / "m.odxm"
        save_bundle(path, classifier=clf, metamodel=meta)
        bundle = load_bundle(path)
        z_a = meta.score_samples(clf, Xc)
        z_b = bundle["metamodel"].score_samples(bundle["classifier"], Xc)
        assert np.array_equal(z_a, z_b)
        assert bundle["metamodel"].recipe == meta.recipe

    def test_metamodel_requires_classifier_in_bundle(self, models, tmp_path):
        _, _, _, meta, _, _ = models
        with pytest.raises(ValueError, match="paired classifier"):
            save_bundle(tmp_path / "m.odxm", metamodel=meta)

    def test_mismatched_pairing_rejected_at_save(self, models, tmp_path):
        _, _, _, meta, _, Xc = models
        rng = np.random.default_rng(4)
        other = GradientBoostedTrees(n_rounds=2, max_depth=2).fit(
            Xc, rng.integers(0, 2, size=len(Xc)))
        with pytest.raises(CheckpointError, match="different classifier"):
            save_bundle(tmp_path / "m.odxm", classifier=other, metamodel=meta)

    def test_mismatched_pairing_rejected_at_load(self, models, tmp_path):
        _, _, clf, meta, _, Xc = models
        rng = np.random.default_rng(5)
        other = GradientBoostedTrees(n_rounds=2, max_depth=2).fit(
            Xc, rng.integers(0, 2, size=len(Xc)))
        path = tmp_path / "m.odxm"
        write_container(path, {
            "classifier": encode_classifier(other),
            "metamodel": encode_metamodel(meta),
        })
        with pytest.raises(CheckpointError, match="different classifier"):
            load_bundle(path)

    def test_metamodel_section_alone_rejected_at_load(self, models, tmp_path):
        _, _, _, meta, _, _ = models
        path = tmp_path / "m.odxm"
        write_container(path, {"metamodel": encode_metamodel(meta)})
        with pytest.raises(CheckpointError, match="without its classifier"):
            load_bundle(path)


class TestBundle:
    def test_full_bundle_round_trip(self, models, tmp_path):
        ae, head, clf, meta, X, _ = models
        path = tmp_path / "full.odxm"
        save_bundle(path, autoencoder=ae, clustering=head,
                    classifier=clf, metamodel=meta)
        bundle = load_bundle(path)
        assert set(bundle) == {"autoencoder", "clustering", "classifier", "metamodel"}
        assert np.array_equal(bundle["autoencoder"].transform(X), ae.transform(X))

    def test_unknown_section_rejected(self, models, tmp_path):
        path = tmp_path / "m.odxm"
        write_container(path, {"mystery": b"??"})
        with pytest.raises(CheckpointError, match="unknown"):
            load_bundle(path)

    def test_empty_bundle_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="nothing"):
            save_bundle(tmp_path / "m.odxm")

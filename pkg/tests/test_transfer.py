import numpy as np
import pytest

from odxu.checkpoint import save_bundle
from odxu.data import split_indices, synth_generate, take_portion
from odxu.dec import ClusteringHead
from odxu.exceptions import StageError
from odxu.gbt import GradientBoostedTrees
from odxu.nn import Autoencoder
from odxu.stopping import EarlyStop
from odxu.transfer import (
    Action,
    ScenarioSpec,
    case_number,
    enumerate_cases,
    format_wall_clock,
    run_grid,
    run_scenario,
)

AS_IS, FT, TRAIN = Action.AS_IS, Action.FINE_TUNE, Action.TRAIN


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    source = synth_generate(4, 60, 0.1, seed=10)
    ae = Autoencoder(hidden=(32,), latent_dim=8, learning_rate=0.05,
                     batch_size=32, max_epochs=6, seed=0).fit(source.features)
    Z = ae.transform(source.features)
    head = ClusteringHead(k=4, max_epochs=8, seed=1).fit(Z)
    clf = GradientBoostedTrees(n_rounds=6, max_depth=3).fit(Z, source.labels)

    path = tmp_path_factory.mktemp("bundle") / "source.odxm"
    save_bundle(path, autoencoder=ae, clustering=head, classifier=clf)

    target = synth_generate(4, 50, 0.15, seed=20)
    tr, te = split_indices(target.labels, [0.6, 0.4], stratified=True, seed=3)
    return {
        "path": path,
        "models": {"autoencoder": ae, "clustering": head, "classifier": clf},
        "train": target.subset(tr),
        "test": target.subset(te),
    }


class TestScenarioSpec:
    def test_both_double_finetune_combos_rejected(self):
        for clf_action in (TRAIN, FT):
            with pytest.raises(ValueError, match="invalidates saved centroids"):
                ScenarioSpec(FT, FT, clf_action)

    def test_string_actions_accepted(self):
        spec = ScenarioSpec("AsIs", "Train", "FineTune")
        assert spec.actions() == (AS_IS, TRAIN, FT)

    def test_ae_cannot_be_train(self):
        with pytest.raises(ValueError, match="ae_action"):
            ScenarioSpec(TRAIN, TRAIN, TRAIN)

    def test_downstream_cannot_be_as_is(self):
        with pytest.raises(ValueError, match="cluster_action"):
            ScenarioSpec(AS_IS, AS_IS, TRAIN)
        with pytest.raises(ValueError, match="clf_action"):
            ScenarioSpec(AS_IS, TRAIN, AS_IS)

    def test_portion_bounds(self):
        with pytest.raises(ValueError, match="portion"):
            ScenarioSpec(AS_IS, TRAIN, TRAIN, portion=0.0)
        with pytest.raises(ValueError, match="portion"):
            ScenarioSpec(AS_IS, TRAIN, TRAIN, portion=1.5)

    def test_stop_type_checked(self):
        with pytest.raises(ValueError, match="EarlyStop"):
            ScenarioSpec(AS_IS, TRAIN, TRAIN, stop=(10, 0.1, 0.1))


class TestEnumerateCases:
    def test_exact_case_order(self):
        combos = [spec.actions() for spec in enumerate_cases()]
        assert combos == [
            (FT, TRAIN, TRAIN),
            (AS_IS, FT, TRAIN),
            (AS_IS, TRAIN, TRAIN),
            (FT, TRAIN, FT),
            (AS_IS, FT, FT),
            (AS_IS, TRAIN, FT),
        ]

    def test_case_number_is_inverse(self):
        for i, spec in enumerate(enumerate_cases(), start=1):
            assert case_number(spec) == i

    def test_exactly_six_valid_combinations_exist(self):
        valid = []
        for ae in (AS_IS, FT):
            for cl in (FT, TRAIN):
                for clf in (FT, TRAIN):
                    try:
                        valid.append(ScenarioSpec(ae, cl, clf).actions())
                    except ValueError:
                        pass
        assert len(valid) == 6
        assert set(valid) == {s.actions() for s in enumerate_cases()}


class TestFormatWallClock:
    def test_minutes(self):
        assert format_wall_clock(1500.0) == "0:25:00"

    def test_seconds_rounded(self):
        assert format_wall_clock(2.4) == "0:00:02"

    def test_hours(self):
        assert format_wall_clock(3770) == "1:02:50"

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            format_wall_clock(-1.0)


class TestRunScenario:
    def test_as_is_encoder_bitwise_unchanged(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN, seed=5)
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        src = world["models"]["autoencoder"]
        out = result.models["autoencoder"]
        assert np.array_equal(out.net_.param_vector(), src.net_.param_vector())
        assert result.phases["ae"] == {"action": "AsIs", "epochs": 0, "loss": []}

    def test_fine_tuned_encoder_moves(self, world):
        spec = ScenarioSpec(FT, TRAIN, TRAIN, seed=5)
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        src = world["models"]["autoencoder"]
        out = result.models["autoencoder"]
        assert not np.array_equal(out.net_.param_vector(), src.net_.param_vector())
        assert result.phases["ae"]["epochs"] > 0
        assert len(out.loss_history_) == len(src.loss_history_) + result.phases["ae"]["epochs"]

    def test_fine_tuned_classifier_keeps_source_prefix(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, FT, seed=5)  # Case 6
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        src_trees = world["models"]["classifier"].trees_
        out_trees = result.models["classifier"].trees_
        assert len(out_trees) == len(src_trees) + 6 * 4
        for (ca, ta), (cb, tb) in zip(src_trees, out_trees):
            assert ca == cb and ta.to_dict() == tb.to_dict()

    def test_fine_tuned_clustering_continues_history(self, world):
        spec = ScenarioSpec(AS_IS, FT, TRAIN, seed=5)  # Case 2
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        src_head = world["models"]["clustering"]
        out_head = result.models["clustering"]
        assert len(out_head.loss_history_) > len(src_head.loss_history_)
        assert result.phases["cluster"]["action"] == "FineTune"
        # the saved head itself is untouched
        assert len(src_head.loss_history_) == 8

    def test_missing_section_names_it(self, world, tmp_path):
        partial = tmp_path / "partial.odxm"
        save_bundle(partial, autoencoder=world["models"]["autoencoder"])
        spec = ScenarioSpec(FT, TRAIN, FT, seed=5)  # Case 4 needs the classifier
        with pytest.raises(StageError, match="classifier"):
            run_scenario(spec, partial, world["train"], world["test"],
                         benign_class="c00")

    def test_deterministic_metrics(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN, portion=0.5, seed=9)
        a = run_scenario(spec, world["path"], world["train"], world["test"],
                         benign_class="c00")
        b = run_scenario(spec, world["path"], world["train"], world["test"],
                         benign_class="c00")
        assert a.metrics == b.metrics

    def test_portion_subsamples_training_side(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN, portion=0.25, seed=9)
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        expected = len(take_portion(world["train"], 0.25, seed=9))
        assert result.metrics["n_train_used"] == expected
        assert expected < len(world["train"])
        assert result.metrics["n_test"] == len(world["test"])

    def test_dict_source_never_mutated(self, world):
        src = world["models"]
        before = src["autoencoder"].net_.param_vector().copy()
        spec = ScenarioSpec(FT, TRAIN, TRAIN, seed=5)  # Case 1 fine-tunes the AE
        run_scenario(spec, src, world["train"], world["test"], benign_class="c00")
        assert np.array_equal(src["autoencoder"].net_.param_vector(), before)

    def test_stop_override_halts_fine_tune(self, world):
        stop = EarlyStop(eta=1, delta_ae=1e9, delta_cluster=1e9)
        spec = ScenarioSpec(FT, TRAIN, TRAIN, stop=stop, seed=5)
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        assert result.phases["ae"]["epochs"] == 2  # eta + 1

    def test_wall_clock_format(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN, seed=5)
        result = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        assert result.wall_clock.count(":") == 2
        assert result.wall_seconds >= 0

    def test_non_dataset_inputs_rejected(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN)
        with pytest.raises(TypeError):
            run_scenario(spec, world["path"], np.zeros((3, 4)), world["test"])

    def test_no_source_anywhere_rejected(self, world):
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN)
        with pytest.raises(ValueError, match="source"):
            run_scenario(spec, None, world["train"], world["test"])


class TestRunGrid:
    def test_table_shape_three_etas_two_delta_pairs(self, world):
        rows = run_grid(6, [10, 15, 20], [(0.001, 0.01), (0.0005, 0.005)], [1.0],
                        world["path"], world["train"], world["test"],
                        benign_class="c00")
        assert [r["exp"] for r in rows] == [1, 2, 3, 4, 5, 6]
        assert [(r["eta"], r["delta_ae"], r["delta_cluster"]) for r in rows] == [
            (10, 0.001, 0.01), (10, 0.0005, 0.005),
            (15, 0.001, 0.01), (15, 0.0005, 0.005),
            (20, 0.001, 0.01), (20, 0.0005, 0.005),
        ]
        assert rows[5]["eta"] == 20 and rows[5]["delta_ae"] == 0.0005

    def test_single_cell_equals_run_scenario(self, world):
        rows = run_grid(3, [2], [(0.01, 0.01)], [0.5],
                        world["path"], world["train"], world["test"],
                        benign_class="c00", seed=4)
        spec = ScenarioSpec(AS_IS, TRAIN, TRAIN, portion=0.5, seed=4,
                            stop=EarlyStop(eta=2, delta_ae=0.01, delta_cluster=0.01))
        direct = run_scenario(spec, world["path"], world["train"], world["test"],
                              benign_class="c00")
        assert rows[0]["accuracy"]["0.50"] == direct.metrics["multiclass_accuracy"]

    def test_grid_reproducible(self, world):
        args = (6, [2], [(0.01, 0.01)], [0.25, 0.75],
                world["path"], world["train"], world["test"])
        a = run_grid(*args, benign_class="c00")
        b = run_grid(*args, benign_class="c00")
        assert [r["accuracy"] for r in a] == [r["accuracy"] for r in b]

    def test_portion_columns_keyed_two_decimals(self, world):
        rows = run_grid(6, [2], [(0.01, 0.01)], [0.25, 0.75],
                        world["path"], world["train"], world["test"],
                        benign_class="c00")
        assert set(rows[0]["accuracy"]) == {"0.25", "0.75"}
        assert set(rows[0]["time"]) == {"0.25", "0.75"}

    def test_case_bounds_checked(self, world):
        with pytest.raises(ValueError, match="case"):
            run_grid(0, [2], [(0.01, 0.01)], [1.0],
                     world["path"], world["train"], world["test"])
        with pytest.raises(ValueError, match="case"):
            run_grid(7, [2], [(0.01, 0.01)], [1.0],
                     world["path"], world["train"], world["test"])

"""Training loops, checkpoint-on-best, evaluation, advisor, and probe."""

import numpy as np
import pytest

from ftengine.checkpoint import serialize, snapshot
from ftengine.data import NO_AUGMENT
from ftengine.errors import (
    InvalidHyperparameterError,
    MissingTensorError,
    ShapeMismatchError,
    UnknownLayerError,
)
from ftengine.network import ArchProfile, Network, LayerSpec, build_backbone, infer_shapes
from ftengine.synthetic import SynthSpec, generate_synthetic
from ftengine.data import load_dataset
from ftengine.tensor import Tensor
from ftengine.training import (
    TrainConfig,
    advise,
    evaluate,
    fine_tune,
    linear_probe,
    predict,
    pretrain,
    rebuild_from_checkpoint,
)

TINY = ArchProfile(
    input_shape=(16, 16, 3), block_conv_counts=(1, 1), block_filters=(4, 8), width_divisor=1
)


@pytest.fixture(scope="module")
def pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("pair")
    generate_synthetic(SynthSpec(classes=2, per_class=10, size=(16, 16), similarity=0.3), 7, root / "tr")
    generate_synthetic(SynthSpec(classes=2, per_class=6, size=(16, 16), similarity=0.3), 8, root / "va")
    return (
        load_dataset(root / "tr", (16, 16)),
        load_dataset(root / "va", (16, 16)),
    )


def tiny_cfg(**kw):
    base = dict(n_ti=20, n_vi=12, b_size=4, epochs=2, seed=3, augment=NO_AUGMENT)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_epoch_arithmetic_train_count(self):
        cfg = TrainConfig(n_ti=500, n_vi=300, b_size=10, steps_per_epoch_mode="train_count")
        assert cfg.steps_per_epoch() == 50
        assert cfg.val_steps() == 30

    def test_epoch_arithmetic_paper_literal(self):
        cfg = TrainConfig(n_ti=500, n_vi=300, b_size=10, steps_per_epoch_mode="paper_literal")
        assert cfg.steps_per_epoch() == 30
        assert cfg.val_steps() == 30

    def test_validation(self):
        with pytest.raises(InvalidHyperparameterError):
            TrainConfig(n_ti=5, b_size=10).validate()
        with pytest.raises(InvalidHyperparameterError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(InvalidHyperparameterError):
            TrainConfig(steps_per_epoch_mode="bogus").validate()


class TestPretrain:
    def test_reports_and_best_checkpoint_rule(self, pair):
        tr, va = pair
        reports = []
        best = pretrain(tiny_cfg(epochs=3), tr, va, TINY, report_fn=reports.append)
        assert len(reports) == 3
        running = np.inf
        for r in reports:
            assert 0.0 <= r.train_accuracy <= 1.0 and 0.0 <= r.val_accuracy <= 1.0
            assert r.checkpoint_written == (r.val_loss < running)
            running = min(running, r.val_loss)
        assert float(best.meta["val_loss"]) == min(r.val_loss for r in reports)
        assert best.meta["stage"] == "pretrain"
        assert best.meta["optimizer"] == "adagrad"

    def test_deterministic_checkpoint_bytes(self, pair):
        tr, va = pair
        a = pretrain(tiny_cfg(), tr, va, TINY)
        b = pretrain(tiny_cfg(), tr, va, TINY)
        assert serialize(a) == serialize(b)

    def test_deterministic_epoch_report_sequence(self, pair):
        tr, va = pair
        ra, rb = [], []
        pretrain(tiny_cfg(), tr, va, TINY, report_fn=ra.append)
        pretrain(tiny_cfg(), tr, va, TINY, report_fn=rb.append)
        for x, y in zip(ra, rb):
            assert (x.epoch, x.train_loss, x.train_accuracy, x.val_loss,
                    x.val_accuracy, x.checkpoint_written) == (
                y.epoch, y.train_loss, y.train_accuracy, y.val_loss,
                y.val_accuracy, y.checkpoint_written)

    def test_resume_hook_applies_weights(self, pair):
        tr, va = pair
        first = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        resumed = pretrain(
            tiny_cfg(epochs=1, optimizer_overrides={"lr": 0.0}),
            tr, va, TINY, resume_from=first,
        )
        for name, t in first.tensors.items():
            assert resumed.tensors[name].data.tobytes() == t.data.tobytes()

    def test_writes_checkpoint_file(self, pair, tmp_path):
        tr, va = pair
        out = tmp_path / "pre.ftw"
        pretrain(tiny_cfg(epochs=1), tr, va, TINY, checkpoint_path=out)
        assert out.exists()


class TestFineTune:
    def test_backbone_frozen_bitwise(self, pair):
        tr, va = pair
        pre = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        best = fine_tune(tiny_cfg(epochs=2), tr, va, pre, TINY)
        for name, t in pre.tensors.items():
            if name.startswith("block"):
                assert best.tensors[name].data.tobytes() == t.data.tobytes()
        assert best.meta["stage"] == "finetune"
        assert best.meta["optimizer"] == "sgd_momentum"

    def test_head_differs_from_pretrained_head(self, pair):
        tr, va = pair
        pre = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        best = fine_tune(tiny_cfg(epochs=2), tr, va, pre, TINY)
        # fresh head, then trained: not the pretext head
        assert best.tensors["head_out/w"].data.tobytes() != pre.tensors["head_out/w"].data.tobytes()

    def test_missing_backbone_tensor(self, pair):
        tr, va = pair
        pre = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        del pre.tensors["block1_conv1/w"]
        with pytest.raises(MissingTensorError):
            fine_tune(tiny_cfg(), tr, va, pre, TINY)

    def test_no_freeze_trains_backbone(self, pair):
        tr, va = pair
        pre = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        best = fine_tune(
            tiny_cfg(epochs=1, freeze_pattern=None, optimizer_overrides={"lr": 0.05}),
            tr, va, pre, TINY,
        )
        changed = any(
            best.tensors[n].data.tobytes() != pre.tensors[n].data.tobytes()
            for n in pre.tensors
            if n.startswith("block")
        )
        assert changed

    def test_random_init_baseline_runs(self, pair):
        tr, va = pair
        best = fine_tune(tiny_cfg(epochs=1), tr, va, None, TINY)
        assert best.meta["stage"] == "finetune"

    def test_rebuild_round_trip(self, pair):
        tr, va = pair
        pre = pretrain(tiny_cfg(epochs=1), tr, va, TINY)
        net, class_names = rebuild_from_checkpoint(pre)
        assert class_names == tr.class_names
        for name, t in net.params.items():
            assert t.data.tobytes() == pre.tensors[name].data.tobytes()


def _color_net():
    """GAP -> dense -> softmax with hand-set weights: picks R vs B channel."""
    layers = [
        LayerSpec("global_avg_pool", "gap"),
        LayerSpec("dense", "cls", units=2),
        LayerSpec("softmax", "out"),
    ]
    w = Tensor(np.array([[4.0, -4.0], [0.0, 0.0], [-4.0, 4.0]], dtype=np.float32),
               name="cls/w", trainable=True)
    b = Tensor(np.zeros(2, dtype=np.float32), name="cls/b", trainable=True)
    return Network(
        layers=layers,
        params={"cls/w": w, "cls/b": b},
        trainable={"cls/w": True, "cls/b": True},
        input_shape=(8, 8, 3),
    )


def _color_dataset(n_per_class=6):
    items, ids = [], []
    rng = np.random.default_rng(0)
    for i in range(n_per_class):
        red = np.zeros((8, 8, 3), dtype=np.float32)
        red[:, :, 0] = 200 + rng.integers(0, 30)
        items.append((Tensor(red), 0))
        ids.append(f"red/{i}")
        blue = np.zeros((8, 8, 3), dtype=np.float32)
        blue[:, :, 2] = 200 + rng.integers(0, 30)
        items.append((Tensor(blue), 1))
        ids.append(f"blue/{i}")
    from ftengine.data import Dataset

    return Dataset(items=items, class_names=["red", "blue"], ids=ids)


class TestEvaluate:
    def test_perfect_predictor(self):
        ds = _color_dataset()
        result = evaluate(_color_net(), ds)
        assert result["accuracy"] == 1.0
        conf = result["confusion"]
        assert conf[0, 0] == 6 and conf[1, 1] == 6
        assert conf[0, 1] == 0 and conf[1, 0] == 0

    def test_constant_predictor_on_balanced_set(self):
        net = _color_net()
        net.params["cls/w"].data[...] = 0.0
        result = evaluate(net, _color_dataset())
        assert result["accuracy"] == 0.5  # uniform rows tie-break to class 0

    def test_records_confidence_is_max_softmax(self):
        ds = _color_dataset(2)
        result = evaluate(_color_net(), ds)
        for r in result["records"]:
            assert 0.0 < r.confidence <= 1.0
        assert result["records"][0].item_id == "red/0"
        assert result["records"][0].predicted_class == "red"

    def test_class_count_mismatch(self):
        ds = _color_dataset(2)
        ds.class_names = ["a", "b", "c"]
        with pytest.raises(ShapeMismatchError):
            evaluate(_color_net(), ds)


class TestPredict:
    def test_argmax_and_confidence(self):
        net = _color_net()
        img = Tensor(np.zeros((8, 8, 3), dtype=np.float32))
        img.data[:, :, 0] = 255.0
        rec = predict(net, img, ["red", "blue"], item_id="x.ppm")
        assert rec.predicted_class == "red"
        assert 0.5 < rec.confidence <= 1.0
        assert rec.item_id == "x.ppm" and rec.correct is None

    def test_tie_breaks_to_lowest_index(self):
        net = _color_net()
        net.params["cls/w"].data[...] = 0.0
        rec = predict(net, Tensor(np.full((8, 8, 3), 100.0, dtype=np.float32)), ["a", "b"])
        assert rec.predicted_class == "a"
        assert rec.confidence == pytest.approx(0.5)

    def test_resizes_input(self):
        net = _color_net()
        big = Tensor(np.zeros((20, 14, 3), dtype=np.float32))
        big.data[:, :, 2] = 200.0
        rec = predict(net, big, ["red", "blue"])
        assert rec.predicted_class == "blue"


class TestAdvise:
    @pytest.mark.parametrize(
        "size,similarity,strategy",
        [
            ("small", "similar", "linear-probe-top"),
            ("large", "similar", "full-fine-tune"),
            ("small", "different", "linear-probe-earlier"),
            ("large", "different", "init-pretrained-full-fine-tune"),
        ],
    )
    def test_scenario_mapping(self, size, similarity, strategy):
        result = advise(size, similarity)
        assert result["strategy"] == strategy
        assert result["rationale"]

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            advise("medium", "similar")


class TestLinearProbe:
    def test_separable_clusters_reach_perfect_accuracy(self):
        net = Network(
            layers=[LayerSpec("global_avg_pool", "gap")],
            params={},
            trainable={},
            input_shape=(8, 8, 3),
        )
        tr = _color_dataset(10)
        va = _color_dataset(4)
        cfg = TrainConfig(n_ti=20, n_vi=8, b_size=10, epochs=50, seed=0,
                          optimizer_overrides={"lr": 0.5})
        result = linear_probe(net, "gap", tr, va, cfg)
        assert result["val_accuracy"] == 1.0
        assert result["feature_dim"] == 3

    def test_network_untouched(self, pair):
        tr, va = pair
        net = build_backbone(TINY, seed=0)
        before = {n: t.data.copy() for n, t in net.params.items()}
        cfg = TrainConfig(n_ti=20, n_vi=12, b_size=5, epochs=2, seed=0)
        linear_probe(net, "block2_pool", tr, va, cfg)
        for n, t in net.params.items():
            assert t.data.tobytes() == before[n].tobytes()

    def test_unknown_layer(self, pair):
        tr, va = pair
        net = build_backbone(TINY, seed=0)
        with pytest.raises(UnknownLayerError):
            linear_probe(net, "missing", tr, va, TrainConfig(n_ti=20, n_vi=12, b_size=5, epochs=1))

    def test_default_profile_block5_feature_dim_is_512(self):
        # pooled block-5 features of the full-width profile are 512-wide
        shapes = infer_shapes(build_backbone(ArchProfile(), seed=0).layers, (224, 224, 3))
        assert shapes[-1] == (7, 7, 512)

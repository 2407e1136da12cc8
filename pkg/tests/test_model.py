import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import CheckpointFormatError, ShapeError
from src.model import TwoHeadModel, load_checkpoint, save_checkpoint
from src.tensor import Tensor


class TestForward:
    def test_probabilities_lie_on_the_simplex(self, model_factory, rng):
        model = model_factory()
        p1, p2 = model.forward_probs(Tensor(rng.normal(size=(6, 3))), mode="train")
        for p in (p1, p2):
            assert p.shape == (6, 3)
            assert np.all(p.data > 0)
            assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)

    def test_train_mode_needs_two_rows(self, model_factory):
        model = model_factory()
        with pytest.raises(ShapeError):
            model.forward_probs(Tensor(np.ones((1, 3))), mode="train")
        p1, _ = model.forward_probs(Tensor(np.ones((1, 3))), mode="eval")
        assert p1.shape == (1, 3)

    def test_wrong_input_width_is_rejected(self, model_factory):
        with pytest.raises(ShapeError):
            model_factory().forward_probs(Tensor(np.ones((4, 5))))

    def test_unknown_mode_is_rejected(self, model_factory):
        with pytest.raises(ValueError):
            model_factory().features(Tensor(np.ones((4, 3))), mode="test")

    def test_heads_start_distinct(self, model_factory):
        model = model_factory()
        assert not np.array_equal(model.W1.data, model.W2.data)

    def test_same_seed_same_initialization(self, model_factory):
        assert model_factory(seed=3).checksum() == model_factory(seed=3).checksum()
        assert model_factory(seed=3).checksum() != model_factory(seed=4).checksum()

    def test_features_without_hidden_layers_or_bn_are_affine(self, model_factory, rng):
        model = model_factory(hidden=(), use_bn=False)
        x = rng.normal(size=(4, 3))
        W, b = model.layers[0]
        assert_allclose(model.features(Tensor(x), "eval").data, x @ W.data + b.data, rtol=1e-14)


class TestBatchNorm:
    def test_train_mode_normalizes_each_feature(self, model_factory, rng):
        model = model_factory(d=4)
        z = model.features(Tensor(rng.normal(size=(32, 3))), mode="train").data
        assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)

    def test_running_stats_move_only_in_train_mode(self, model_factory, rng):
        model = model_factory()
        x = Tensor(rng.normal(size=(8, 3)))
        before = model.bn.running_mean.copy()
        model.features(x, mode="eval")
        assert_array_equal(model.bn.running_mean, before)
        model.features(x, mode="train")
        assert not np.array_equal(model.bn.running_mean, before)


class TestSnapshot:
    def test_snapshot_is_frozen_and_detached(self, model_factory):
        model = model_factory()
        frozen = model.snapshot()
        assert all(not p.requires_grad for p in frozen.parameters())
        frozen.W1.data[:] = 0.0
        assert not np.all(model.W1.data == 0.0)


class TestCheckpoint:
    def test_round_trip_is_exact(self, model_factory, rng, tmp_path):
        model = model_factory()
        model.features(Tensor(rng.normal(size=(8, 3))), mode="train")
        path = tmp_path / "model.json"
        save_checkpoint(model, str(path), loss_config={"T": 0.1}, meta={"w0": 0.4})

        loaded, loss_config, meta = load_checkpoint(str(path))
        assert loss_config == {"T": 0.1}
        assert meta == {"w0": 0.4}
        assert loaded.checksum() == model.checksum()
        x = rng.normal(size=(5, 3))
        for a, b in zip(model.predict_probs(x), loaded.predict_probs(x)):
            assert_array_equal(a, b)

    def test_identical_models_give_identical_bytes(self, model_factory, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(model_factory(seed=7), str(a))
        save_checkpoint(model_factory(seed=7), str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_malformed_file_is_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(str(path))

    def test_foreign_format_is_rejected(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "something-else", "format_version": 1}')
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(str(path))

    def test_shape_mismatch_is_rejected(self, model_factory, tmp_path):
        import json
        path = tmp_path / "model.json"
        save_checkpoint(model_factory(), str(path))
        payload = json.loads(path.read_text())
        payload["W1"] = [[0.0]]
        path.write_text(json.dumps(payload))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(str(path))

    def test_missing_file_raises_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / "absent.json"))


def test_parameter_groups_partition_all_parameters(model_factory):
    model = model_factory(hidden=(5, 4))
    ids = [id(p) for p in model.parameters()]
    assert len(ids) == len(set(ids))
    assert len(model.backbone_parameters()) == 4
    assert len(model.bottleneck_parameters()) == 4  # W, b, gamma, beta
    assert [id(p) for p in model.head_parameters()] == [id(model.W1), id(model.W2)]
    assert isinstance(model, TwoHeadModel)

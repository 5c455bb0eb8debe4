import json
import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from catvac.errors import ShapeError, UserError
from catvac.services import kmeans
from catvac.services.features import FeatureConfig, FeatureTensor, prepare_features
from catvac.services.gumbel import ScheduleError, TemperatureSchedule
from catvac.services.metrics import Assignment, hungarian_accuracy, nmi, silhouette
from catvac.services.model import CategoricalVAE, ModelConfig
from catvac.services.trainer import (
    Checkpoint,
    EpochLog,
    TrainConfig,
    TrainingDivergedError,
    assign_clusters,
    derive_seed,
    embed_dataset,
    lr_at,
    predict_probs,
    train,
)
from catvac.storage.container import CheckpointError, read_container, write_container
from catvac.storage.synthetic import synthetic_clips


def _model_config(**overrides):
    values = dict(K=3, d_z=4, conv_channels=(4, 4, 4, 4), gru_hidden=8, gru_layers=1,
                  input_frames=32, input_freq_bins=64)
    values.update(overrides)
    return ModelConfig(**values)


def _train_config(**overrides):
    values = dict(epochs=3, K=3, d_z=4, batch_size=4, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def _logs_without_time(logs):
    return [log.model_dump(exclude={"wall_time"}) for log in logs]


@pytest.fixture(scope="module")
def features():
    tensors, stats = prepare_features(synthetic_clips(4, seed=3), FeatureConfig.synthetic())
    return tensors, stats


class TestTrainConfig:

    def test_lambda_alias(self):
        assert TrainConfig.model_validate({"lambda": 0.25}).lam == 0.25
        assert TrainConfig(lam=0.3).model_dump(by_alias=True)["lambda"] == 0.3

    def test_temperature_schedule_follows_epochs(self):
        config = TrainConfig(epochs=20, tau=TemperatureSchedule(tau_start=2.0, tau_end=0.5))
        assert config.tau.total_epochs == 20

    @pytest.mark.parametrize("overrides", [
        {"epochs": 0},
        {"lr_start": 1e-5, "lr_end": 1e-4},
        {"lr_start": 1e-4, "lr_end": 0.0},
        {"lambda": -1.0},
        {"batch_size": 0},
        {"grad_clip": 0.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ValidationError):
            TrainConfig.model_validate(overrides)

    def test_frozen_run_is_allowed(self):
        assert TrainConfig(lr_start=0.0, lr_end=0.0).lr_end == 0.0


class TestSchedules:

    def test_lr_endpoints_exact(self):
        config = TrainConfig()
        assert lr_at(config, 0) == 5e-4
        assert lr_at(config, 499) == 5e-5

    def test_lr_midpoint(self):
        assert lr_at(TrainConfig(), 250) == pytest.approx(5e-4 * 0.1 ** (250 / 499), rel=1e-12)
        assert lr_at(TrainConfig(), 250) == pytest.approx(1.576e-4, abs=2e-7)

    def test_lr_monotone(self):
        config = TrainConfig(epochs=40)
        values = [lr_at(config, e) for e in range(40)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_lr_out_of_range(self):
        with pytest.raises(ScheduleError):
            lr_at(TrainConfig(epochs=5), 5)

    def test_streams_are_independent(self):
        seeds = {derive_seed(0, epoch, stream) for epoch in range(3) for stream in range(3)}
        assert len(seeds) == 9
        assert derive_seed(4, 1, 2) == derive_seed(4, 1, 2)


class TestTrain:

    def test_zero_learning_rate_keeps_parameters(self, features):
        tensors, _ = features
        config = _train_config(epochs=1, lr_start=0.0, lr_end=0.0, batch_size=2)
        result = train(tensors[:2], config, _model_config())

        torch.manual_seed(config.seed)
        initial = CategoricalVAE(_model_config())
        for name, param in initial.named_parameters():
            assert torch.equal(result.checkpoint.state[name], param.detach()), name

    def test_deterministic(self, features):
        tensors, _ = features
        first = train(tensors, _train_config(), _model_config())
        second = train(tensors, _train_config(), _model_config())
        assert _logs_without_time(first.logs) == _logs_without_time(second.logs)
        for name, value in first.checkpoint.state.items():
            assert torch.equal(value, second.checkpoint.state[name]), name

    def test_run_directory(self, features, tmp_path):
        tensors, stats = features
        result = train(tensors[:8], _train_config(), _model_config(), val_dataset=tensors[8:],
                       run_dir=tmp_path, norm_stats=stats, feature_config=FeatureConfig.synthetic())
        lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
        logs = [EpochLog.model_validate_json(line) for line in lines]
        assert [log.epoch for log in logs] == [0, 1, 2]
        assert all(log.val_total is not None for log in logs)
        assert logs[0].tau == 1.0 and logs[-1].tau == 0.5
        assert (tmp_path / "last.cvck").is_file()
        assert (tmp_path / "best.cvck").is_file()

        last = Checkpoint.load(tmp_path / "last.cvck")
        assert last.epoch == 2
        assert last.norm_stats == stats
        assert result.best_checkpoint is not None
        assert result.best_checkpoint.best_loss == min(log.val_total for log in logs)

    def test_resume_matches_uninterrupted_run(self, features, tmp_path):
        tensors, _ = features
        full = train(tensors, _train_config(), _model_config())

        class Interrupt(Exception):
            pass

        def stop_after_second_epoch(log):
            if log.epoch == 1:
                raise Interrupt()

        with pytest.raises(Interrupt):
            train(tensors, _train_config(), _model_config(), run_dir=tmp_path, callback=stop_after_second_epoch)

        resumed = train(tensors, _train_config(), _model_config(), resume=Checkpoint.load(tmp_path / "last.cvck"))
        assert [log.epoch for log in resumed.logs] == [2]
        assert resumed.logs[0].total == pytest.approx(full.logs[2].total, abs=1e-6)
        for name, value in full.checkpoint.state.items():
            torch.testing.assert_close(resumed.checkpoint.state[name], value, atol=1e-6, rtol=0)

    def test_non_finite_parameters_abort(self, features, tmp_path):
        tensors, _ = features
        first = train(tensors, _train_config(epochs=1), _model_config())
        broken = first.checkpoint
        broken.state["h.out.bias"] = torch.full_like(broken.state["h.out.bias"], float("nan"))

        with pytest.raises(TrainingDivergedError):
            train(tensors, _train_config(), _model_config(), resume=broken, run_dir=tmp_path)
        dump = json.loads((tmp_path / "divergence.json").read_text())
        assert dump["epoch"] == 1
        assert math.isnan(dump["parameter_norms"]["h.out.bias"])

    def test_no_parameter_becomes_non_finite(self, features):
        tensors, _ = features
        result = train(tensors, _train_config(epochs=5), _model_config())
        for name, value in result.checkpoint.state.items():
            if value.is_floating_point():
                assert torch.isfinite(value).all(), name

    def test_shape_mismatch(self, features):
        tensors, _ = features
        with pytest.raises(ShapeError):
            train(tensors, _train_config(), _model_config(input_frames=64))

    def test_model_and_train_config_disagree(self, features):
        tensors, _ = features
        with pytest.raises(UserError):
            train(tensors, _train_config(K=4), _model_config())

    def test_empty_dataset(self):
        with pytest.raises(UserError):
            train([], _train_config(), _model_config())

    def test_non_finite_features(self):
        item = FeatureTensor(values=np.full((32, 64), np.nan, np.float32), mask=np.ones(32, np.uint8), frame_hop=480)
        with pytest.raises(UserError):
            train([item, item], _train_config(), _model_config())

    def test_trailing_single_item_batch_with_1x1_encoder(self):
        rng = np.random.default_rng(0)
        items = [FeatureTensor(values=rng.random((16, 16)).astype(np.float32), mask=np.ones(16, np.uint8), frame_hop=480)
                 for _ in range(5)]
        model_config = _model_config(input_frames=16, input_freq_bins=16)
        result = train(items, _train_config(epochs=1), model_config)
        assert math.isfinite(result.logs[0].total)

    @pytest.mark.parametrize("n_items, batch_size", [(1, 4), (4, 1)])
    def test_single_item_batches_with_1x1_encoder(self, n_items, batch_size):
        items = [FeatureTensor(values=np.full((16, 16), 0.5, np.float32), mask=np.ones(16, np.uint8), frame_hop=480)
                 for _ in range(n_items)]
        model_config = _model_config(input_frames=16, input_freq_bins=16)
        with pytest.raises(ShapeError, match="at least 2 items per batch"):
            train(items, _train_config(epochs=1, batch_size=batch_size), model_config)


class TestCheckpoint:

    def test_round_trip_is_bit_exact(self, features, tmp_path):
        tensors, stats = features
        result = train(tensors, _train_config(epochs=2), _model_config(), norm_stats=stats,
                       feature_config=FeatureConfig.synthetic())
        path = tmp_path / "model.cvck"
        result.checkpoint.save(path)
        loaded = Checkpoint.load(path)

        assert loaded.model_config == result.checkpoint.model_config
        assert loaded.train_config == result.checkpoint.train_config
        assert loaded.epoch == 1
        assert loaded.feature_config == FeatureConfig.synthetic()
        for name, value in result.checkpoint.state.items():
            assert torch.equal(loaded.state[name], value), name
        np.testing.assert_array_equal(predict_probs(tensors, loaded), predict_probs(tensors, result.checkpoint))

    def test_rejects_kmeans_container(self, tmp_path):
        path = tmp_path / "kmeans.cvck"
        kmeans.fit(np.random.default_rng(0).normal(size=(10, 2)), 2, restarts=1).save(path)
        with pytest.raises(UserError):
            Checkpoint.load(path)

    @pytest.mark.parametrize("corrupt", [
        lambda meta: meta.pop("epoch"),
        lambda meta: meta["model_config"].update(K=1),
        lambda meta: meta.update(train_config="not a config"),
    ])
    def test_malformed_metadata(self, features, tmp_path, corrupt):
        tensors, _ = features
        path = tmp_path / "model.cvck"
        train(tensors, _train_config(epochs=1), _model_config()).checkpoint.save(path)
        arrays, meta = read_container(path)
        corrupt(meta)
        write_container(path, arrays, meta)
        with pytest.raises(CheckpointError, match="malformed checkpoint metadata"):
            Checkpoint.load(path)


class TestInference:

    def test_assignments_follow_probabilities(self, features):
        tensors, _ = features
        checkpoint = train(tensors, _train_config(epochs=2), _model_config()).checkpoint
        probs = predict_probs(tensors, checkpoint)
        assert probs.shape == (len(tensors), 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-5)
        assert assign_clusters(tensors, checkpoint) == probs.argmax(axis=1).tolist()
        assert embed_dataset(tensors, checkpoint).shape == (len(tensors), 4)

    def test_shape_mismatch(self, features):
        tensors, _ = features
        checkpoint = train(tensors, _train_config(epochs=1), _model_config()).checkpoint
        other = FeatureTensor(values=np.zeros((64, 64), np.float32), mask=np.ones(64, np.uint8), frame_hop=480)
        with pytest.raises(ShapeError):
            assign_clusters([other], checkpoint)


@pytest.mark.slow
class TestSyntheticExperiment:
    """Three band-limited noise classes, K=3, 50 epochs, ten seeds."""

    def test_clusters_recover_bands(self):
        config = FeatureConfig.synthetic()
        model_config = _model_config(d_z=8, conv_channels=(8, 16, 16, 32), gru_hidden=32)
        passed, decreasing = 0, 0
        for seed in range(10):
            tensors, _ = prepare_features(synthetic_clips(100, seed=seed), config)
            labels = np.array([t.label for t in tensors])
            train_config = TrainConfig(epochs=50, K=3, d_z=8, batch_size=32, seed=seed, lam=0.5,
                                       tau=TemperatureSchedule(tau_start=1.0, tau_end=0.5))
            result = train(tensors, train_config, model_config)

            totals = [log.total for log in result.logs[:10]]
            decreasing += all(b < a for a, b in zip(totals, totals[1:]))
            for log in result.logs:
                assert math.isfinite(log.total)

            # Both partitions are scored on the same flattened features
            flat = np.stack([t.values.reshape(-1) for t in tensors]).astype(np.float64)
            ids = np.asarray(assign_clusters(tensors, result.checkpoint))
            kmeans_ids = kmeans.predict(kmeans.fit(flat, 3, seed=seed), flat)
            if np.unique(ids).size < 2:
                continue

            accuracy = hungarian_accuracy(Assignment(ids, labels))
            model_silhouette = silhouette(flat, ids)
            kmeans_silhouette = silhouette(flat, kmeans_ids)
            same_partition = nmi(Assignment(ids, kmeans_ids)) == pytest.approx(1.0)
            beats_kmeans = model_silhouette > kmeans_silhouette or same_partition
            if accuracy >= 90 and model_silhouette >= 0.5 and beats_kmeans:
                passed += 1

        assert passed >= 8
        assert decreasing >= 9

import hashlib

import numpy as np
import pytest

from uplrec.factor_model import (
    FactorModel,
    TrainConfig,
    init_model,
    l2_penalty,
    load_checkpoint,
    save_checkpoint,
    score,
)


def checksum(model):
    h = hashlib.sha256()
    h.update(model.user_factors.tobytes())
    h.update(model.item_factors.tobytes())
    return h.hexdigest()


class TestInitModel:
    def test_same_seed_identical(self):
        a = init_model(20, 30, d=8, seed=5)
        b = init_model(20, 30, d=8, seed=5)
        assert checksum(a) == checksum(b)

    def test_distinct_seeds_differ(self):
        a = init_model(20, 30, d=8, seed=5)
        b = init_model(20, 30, d=8, seed=6)
        assert checksum(a) != checksum(b)

    def test_scale_matches_sample_std(self):
        model = init_model(100, 100, d=100, seed=0, scale=0.01)
        entries = np.concatenate([model.user_factors.ravel(), model.item_factors.ravel()])
        assert len(entries) >= 10_000
        assert abs(entries.std() - 0.01) < 0.001  # within 10%

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError):
            init_model(5, 5, d=0, seed=0)


class TestScore:
    def test_orthogonal_rows(self):
        model = FactorModel(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        assert score(model, 0, 0) == 0.0

    def test_unit_vector_self_product(self):
        model = FactorModel(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert score(model, 0, 0) == 1.0

    def test_hand_arithmetic(self):
        model = FactorModel(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]))
        assert score(model, 0, 0) == pytest.approx(1.0)

    def test_index_out_of_range(self):
        model = init_model(3, 4, d=2, seed=0)
        with pytest.raises(ValueError):
            score(model, 3, 0)
        with pytest.raises(ValueError):
            score(model, 0, 4)

    def test_bilinearity_in_user_row(self):
        model = init_model(2, 2, d=6, seed=1, scale=1.0)
        base = score(model, 0, 1)
        model.user_factors[0] *= 3.5
        assert score(model, 0, 1) == pytest.approx(3.5 * base, rel=1e-12)


class TestL2Penalty:
    def test_zero_model(self):
        model = FactorModel(np.zeros((2, 3)), np.zeros((4, 3)))
        assert l2_penalty(model, [0, 1], [0, 1, 2, 3]) == 0.0

    def test_single_row(self):
        model = FactorModel(np.array([[3.0, 4.0]]), np.zeros((1, 2)))
        assert l2_penalty(model, user_rows=[0]) == 25.0

    def test_two_rows(self):
        model = FactorModel(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]))
        assert l2_penalty(model, user_rows=[0], item_rows=[0]) == 5.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = init_model(7, 9, d=4, seed=12, scale=0.3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, seed=12)
        back, seed = load_checkpoint(path)
        assert seed == 12
        assert np.array_equal(back.user_factors, model.user_factors)
        assert np.array_equal(back.item_factors, model.item_factors)

    def test_reload_is_byte_stable(self, tmp_path):
        model = init_model(3, 3, d=2, seed=0)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1)
        back, _ = load_checkpoint(p1)
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(d=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lam=-1e-3)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.001
        assert cfg.batch_size == 256

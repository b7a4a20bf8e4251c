import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdgraph.errors import ConfigError, DimensionError, LabelError
from hdgraph.gradcheck import check_oim, check_triplet, max_relative_error, numerical_gradient
from hdgraph.losses import (
    OimBank,
    TripletConfig,
    batch_hard_triplet_loss,
    batch_hard_triplets,
    oim_loss,
    oim_update_bank,
    train_projection,
    triplet_loss,
)

BANK2 = np.array([[1.0, 0.0], [0.0, 1.0]])


class TestOim:
    def test_matching_center(self):
        loss, _ = oim_loss([[1.0, 0.0]], [0], OimBank(BANK2, temperature=1.0))
        # -log(e / (e + 1)), evaluated by hand
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss == pytest.approx(0.31326, abs=1e-5)

    @pytest.mark.parametrize("label", [0, 1])
    def test_symmetric_point(self, label):
        x = [[math.sqrt(2) / 2, math.sqrt(2) / 2]]
        loss, _ = oim_loss(x, [label], OimBank(BANK2, temperature=1.0))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_low_temperature(self):
        loss, _ = oim_loss([[1.0, 0.0]], [0], OimBank(BANK2, temperature=0.1))
        assert loss == pytest.approx(math.log1p(math.exp(-10)), rel=1e-9)
        assert loss == pytest.approx(4.54e-5, rel=1e-3)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            oim_loss([[1.0, 0.0]], [2], OimBank(BANK2))

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            OimBank(BANK2, temperature=0.0)

    def test_equal_logits_give_log_c(self):
        bank = OimBank(np.eye(4), temperature=1.0)
        # orthogonal to every center: all logits zero
        loss, _ = oim_loss(np.zeros((1, 4)) + 0.0, [2], bank)
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    @settings(max_examples=25)
    @given(st.integers(0, 10**6))
    def test_nonnegative_and_gradient(self, seed):
        assert check_oim(seed) < 1e-4
        rng = np.random.default_rng(seed)
        bank = OimBank.random(5, 6, seed=seed)
        x = rng.standard_normal((4, 6))
        assert oim_loss(x, rng.integers(0, 5, 4), bank)[0] >= 0


class TestBankUpdate:
    def test_momentum_one_freezes(self):
        bank = OimBank(BANK2, momentum=1.0)
        new = oim_update_bank(bank, [[0.0, 1.0]], [0])
        np.testing.assert_array_equal(new.centers, BANK2)

    def test_momentum_zero_replaces(self):
        new = oim_update_bank(OimBank(BANK2, momentum=0.0), [[0.0, 1.0]], [0])
        np.testing.assert_allclose(new.centers[0], [0.0, 1.0])

    def test_half_momentum(self):
        new = oim_update_bank(OimBank(BANK2, momentum=0.5), [[0.0, 1.0]], [0])
        # normalize((0.5, 0.5)) by hand
        np.testing.assert_allclose(new.centers[0], [math.sqrt(2) / 2] * 2, atol=1e-15)
        np.testing.assert_array_equal(new.centers[1], BANK2[1])

    @given(st.integers(0, 10**6), st.floats(0, 1))
    def test_rows_stay_unit(self, seed, mu):
        rng = np.random.default_rng(seed)
        bank = OimBank.random(4, 5, seed=seed, momentum=mu)
        x = rng.standard_normal((6, 5))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        new = oim_update_bank(bank, x, rng.integers(0, 4, 6))
        np.testing.assert_allclose(np.linalg.norm(new.centers, axis=1), 1.0, atol=1e-9)

    def test_random_bank_is_seeded(self):
        np.testing.assert_array_equal(OimBank.random(3, 4, seed=9).centers,
                                      OimBank.random(3, 4, seed=9).centers)


class TestTriplet:
    def test_inactive_hinge(self):
        loss, grads = triplet_loss([0.0], [0.0], [1.0], TripletConfig(0.3))
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads)

    def test_equal_distances(self):
        loss, _ = triplet_loss([0.0], [1.0], [-1.0], TripletConfig(0.3))
        assert loss == pytest.approx(0.3, abs=1e-15)

    def test_hand_value(self):
        # d(a,p)=0.8, d(a,n)=0.5 on a line
        loss, _ = triplet_loss([0.0], [0.8], [0.5], TripletConfig(0.3))
        assert loss == pytest.approx(0.6, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            triplet_loss([0.0, 1.0], [0.0], [1.0])

    def test_negative_margin_rejected(self):
        with pytest.raises(ConfigError):
            TripletConfig(-0.1)

    @settings(max_examples=40)
    @given(st.integers(0, 10**6), st.sampled_from(["euclidean", "one-minus-cosine"]),
           st.floats(0, 2))
    def test_literal_form(self, seed, distance, margin):
        rng = np.random.default_rng(seed)
        a, p, n = rng.standard_normal((3, 5))
        if distance == "euclidean":
            d = lambda u, v: math.sqrt(sum((ui - vi) ** 2 for ui, vi in zip(u, v)))
        else:
            d = lambda u, v: 1 - sum(ui * vi for ui, vi in zip(u, v)) / (
                math.sqrt(sum(ui * ui for ui in u)) * math.sqrt(sum(vi * vi for vi in v)))
        expected = max(margin + d(a, p) - d(a, n), 0.0)
        loss, _ = triplet_loss(a, p, n, TripletConfig(margin, distance))
        assert abs(loss - expected) < 1e-12

    @pytest.mark.parametrize("active", [True, False])
    @pytest.mark.parametrize("distance", ["euclidean", "one-minus-cosine"])
    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed, distance, active):
        assert check_triplet(seed, active=active, distance=distance) < 1e-4


class TestBatchHard:
    def test_mining(self):
        x = np.array([[0.0], [1.0], [0.2], [3.0]])
        labels = np.array([0, 0, 1, 1])
        pos, neg = batch_hard_triplets(x, labels)
        assert pos.tolist() == [1, 0, 3, 2]
        assert neg.tolist() == [2, 2, 0, 1]

    def test_gradient_with_fixed_mining(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 4))
        labels = np.array([0, 0, 1, 1, 2, 2])
        cfg = TripletConfig(1.0)
        _, grad = batch_hard_triplet_loss(x, labels, cfg)
        num = numerical_gradient(lambda: batch_hard_triplet_loss(x, labels, cfg)[0], x)
        assert max_relative_error(grad, num) < 1e-4

    def test_projection_training_reduces_loss(self):
        rng = np.random.default_rng(0)
        centers = rng.standard_normal((4, 8))
        labels = np.repeat(np.arange(4), 6)
        x = centers[labels] + 0.5 * rng.standard_normal((24, 8))
        head, bank = train_projection(x, labels, 4, lr=0.05, epochs=40, seed=1)
        assert head.history[-1] < head.history[0]
        np.testing.assert_allclose(np.linalg.norm(head(x), axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(bank.centers, axis=1), 1.0, atol=1e-9)

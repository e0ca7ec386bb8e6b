import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from tracoco.errors import ConfigError, DomainError, NumericError, ShapeError
from tracoco.objectives import (
    CrcConfig,
    TraConfig,
    crc_loss,
    cross_entropy,
    dice_loss,
    entropy_reg,
    kl_divergence,
    kl_term,
    semi_loss,
    supervised_loss,
    total_objective,
    translation_loss,
)
from tracoco.volume import CropLattice, TranslatedCropPair


def const_field(p_bg, shape=(3, 3, 3), dtype=torch.float64):
    t = torch.empty((2,) + shape, dtype=dtype)
    t[0] = p_bg
    t[1] = 1 - p_bg
    return t


def random_field(rng, shape, lo=0.05, hi=0.95):
    fg = rng.uniform(lo, hi, size=shape)
    return np.stack([1 - fg, fg])


PAIR = TranslatedCropPair(CropLattice.from_origin((0, 0, 0), (4, 4, 4)), CropLattice.from_origin((2, 1, 0), (4, 4, 4)))


class TestCrossEntropy:
    def test_identity(self):
        assert cross_entropy(const_field(1.0), const_field(1.0)).item() <= 1e-6

    def test_half(self):
        assert cross_entropy(const_field(1.0), const_field(0.5)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_point_eight(self):
        assert cross_entropy(const_field(1.0), const_field(0.8)).item() == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_label_target(self):
        label = torch.zeros((3, 3, 3), dtype=torch.long)
        assert cross_entropy(label, const_field(0.8)).item() == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy(const_field(1.0, (2, 2, 2)), const_field(0.5))


class TestDice:
    def test_perfect(self):
        g = torch.tensor(np.random.default_rng(0).integers(0, 2, (4, 4, 4)), dtype=torch.float64)
        assert dice_loss(g.clone(), g).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint(self):
        g = torch.zeros((4, 4, 4), dtype=torch.float64)
        g[:2] = 1
        assert dice_loss(1 - g, g, eps=1e-12).item() == pytest.approx(1.0, abs=1e-9)

    def test_half(self):
        g = torch.zeros((4, 4, 4), dtype=torch.float64)
        g[:2] = 1
        p = torch.full_like(g, 0.5)
        assert dice_loss(p, g, eps=1e-12).item() == pytest.approx(0.5, abs=1e-9)

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            dice_loss(torch.zeros(3), torch.zeros(3), eps=0)


class TestSupervised:
    def test_perfect(self):
        label = torch.tensor(np.random.default_rng(0).integers(0, 2, (4, 4, 4)))
        p = torch.stack([1.0 - label, label.double()])
        assert supervised_loss(p, p.clone(), label).item() < 1e-5

    def test_perfect_and_uniform(self):
        shape = (4, 4, 4)
        n = 64
        label = torch.ones(shape, dtype=torch.long)
        perfect = const_field(0.0, shape)
        uniform = const_field(0.5, shape)
        eps = 1e-5
        expected = -math.log(1 - 1e-7) + math.log(2) + 0.0 + (1 - (n + eps) / (1.5 * n + eps))
        got = supervised_loss(perfect, uniform, label).item()
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(math.log(2) + 1 / 3, abs=1e-5)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = (torch.tensor(random_field(rng, (3, 3, 3))) for _ in range(2))
        label = torch.tensor(rng.integers(0, 2, (3, 3, 3)))
        assert supervised_loss(a, b, label).item() == supervised_loss(b, a, label).item()

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        a, b = random_field(rng, (3, 4, 5)), random_field(rng, (3, 4, 5))
        label = rng.integers(0, 2, (3, 4, 5))
        got = supervised_loss(torch.tensor(a), torch.tensor(b), torch.tensor(label)).item()
        assert got == pytest.approx(oracles.supervised(a, b, label), abs=1e-12)


class TestKL:
    def test_identical_fields(self):
        f = const_field(0.3, (4, 4, 4))
        assert kl_term((f, f, f, f), PAIR).item() == pytest.approx(0.0, abs=1e-15)

    def test_analytic(self):
        p, q = const_field(0.8, (4, 4, 4)), const_field(0.6, (4, 4, 4))
        expected = 0.8 * math.log(0.8 / 0.6) + 0.2 * math.log(0.2 / 0.4)
        assert expected == pytest.approx(0.0915, abs=1e-4)
        m2 = const_field(0.5, (4, 4, 4))
        assert kl_term((p, q, m2, m2), PAIR).item() == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = torch.tensor(random_field(rng, (3, 1, 1), 0.0, 1.0))
            q = torch.tensor(random_field(rng, (3, 1, 1), 0.0, 1.0))
            assert torch.all(kl_divergence(p, q) >= -1e-12)

    def test_asymmetric(self):
        p, q = const_field(0.9, (1, 1, 1)), const_field(0.5, (1, 1, 1))
        assert abs(kl_divergence(p, q).item() - kl_divergence(q, p).item()) > 1e-3

    def test_matches_bruteforce_overlap(self):
        rng = np.random.default_rng(3)
        fields = [random_field(rng, (4, 4, 4)) for _ in range(4)]
        got = kl_term(tuple(torch.tensor(f) for f in fields), PAIR).item()
        assert got == pytest.approx(oracles.kl_term(fields, PAIR.first.origin, PAIR.second.origin, (4, 4, 4)), abs=1e-12)

    def test_shape_checked(self):
        f = const_field(0.3, (3, 3, 3))
        with pytest.raises(ShapeError):
            kl_term((f, f, f, f), PAIR)


class TestEntropy:
    def test_max_entropy(self):
        f = const_field(0.5, (4, 4, 4))
        assert entropy_reg((f, f, f, f), PAIR).item() == pytest.approx(-4 * math.log(2), abs=1e-12)

    def test_one_hot(self):
        f = const_field(1.0, (4, 4, 4))
        assert entropy_reg((f, f, f, f), PAIR).item() == pytest.approx(0.0, abs=1e-5)

    def test_point_nine(self):
        f = const_field(0.9, (4, 4, 4))
        h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert entropy_reg((f, f, f, f), PAIR).item() == pytest.approx(-4 * h, abs=1e-12)
        assert -4 * h == pytest.approx(-1.3003, abs=1e-4)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            fields = tuple(torch.tensor(random_field(rng, (4, 4, 4), 0, 1)) for _ in range(4))
            v = entropy_reg(fields, PAIR).item()
            assert -4 * math.log(2) - 1e-12 <= v <= 0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        fields = [random_field(rng, (4, 4, 4)) for _ in range(4)]
        got = entropy_reg(tuple(torch.tensor(f) for f in fields), PAIR).item()
        assert got == pytest.approx(oracles.entropy_reg(fields, PAIR.first.origin, PAIR.second.origin, (4, 4, 4)),
                                    abs=1e-12)


class TestTranslation:
    def test_half_fields(self):
        f = const_field(0.5, (4, 4, 4))
        l_tra, l_kl, l_reg = translation_loss((f, f, f, f), PAIR, TraConfig(1.0, 0.1))
        assert l_tra.item() == pytest.approx(-0.1 * 4 * math.log(2), abs=1e-12)
        assert l_tra.item() == pytest.approx(-0.2773, abs=1e-4)

    def test_beta_zero_is_kl(self):
        rng = np.random.default_rng(5)
        fields = tuple(torch.tensor(random_field(rng, (4, 4, 4))) for _ in range(4))
        l_tra, l_kl, _ = translation_loss(fields, PAIR, TraConfig(1.0, 0.0))
        assert l_tra.item() == l_kl.item()

    def test_alpha_zero_one_hot(self):
        f = const_field(1.0, (4, 4, 4))
        assert abs(translation_loss((f, f, f, f), PAIR, TraConfig(0.0, 0.1))[0].item()) < 1e-6

    def test_sign_flag(self):
        f = const_field(0.5, (4, 4, 4))
        l_tra = translation_loss((f, f, f, f), PAIR, TraConfig(1.0, 0.1, reg_sign=-1.0))[0]
        assert l_tra.item() == pytest.approx(0.1 * 4 * math.log(2), abs=1e-12)

    def test_defaults(self):
        assert TraConfig().alpha == 1.0 and TraConfig().beta_reg == 0.1
        with pytest.raises(ConfigError):
            TraConfig(alpha=-1)


class TestCRC:
    def test_confidence_band(self):
        a, b = const_field(0.6), const_field(0.3)
        assert crc_loss(a, b, CrcConfig(0.9, 0.1)).item() == 0.0

    def test_confident_a(self):
        a, b = const_field(0.95), const_field(0.7)
        expected = 0.95 * -math.log(0.7) + 0.95 * -math.log(0.7)
        assert crc_loss(a, b).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.6777, abs=1e-4)

    def test_self_agreement(self):
        a = const_field(0.95)
        assert crc_loss(a, a.clone()).item() == pytest.approx(2 * 0.95 * -math.log(0.95), abs=1e-12)
        assert 2 * 0.95 * -math.log(0.95) == pytest.approx(0.0975, abs=1e-4)

    def test_pseudo_label_detached(self):
        a = const_field(0.95).requires_grad_(True)
        b = const_field(0.7).requires_grad_(True)
        crc_loss(a, b).backward()
        assert a.grad is None or torch.all(a.grad == 0)
        assert b.grad is not None and torch.any(b.grad != 0)

    def test_invalid_distribution(self):
        a = torch.full((2, 2, 2, 2), 0.7, dtype=torch.float64)
        with pytest.raises(DomainError):
            crc_loss(a, a)

    def test_tie_goes_to_background(self):
        # gamma below 0.5 is rejected, so a tie can never be confident with valid thresholds
        with pytest.raises(ConfigError):
            CrcConfig(gamma=0.4, beta_c=0.1)
        a = const_field(0.5)
        assert crc_loss(a, const_field(0.2)).item() == 0.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        a = random_field(rng, (4, 4, 4), 0.0, 1.0)
        b = random_field(rng, (4, 4, 4))
        got = crc_loss(torch.tensor(a), torch.tensor(b)).item()
        assert got == pytest.approx(oracles.crc(a, b), abs=1e-12)

    def test_oracles_agree(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = random_field(rng, (3, 3, 3), 0.0, 1.0)
            b = random_field(rng, (3, 3, 3))
            assert oracles.crc_vectorised(a, b) == pytest.approx(oracles.crc(a, b), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.1, 0.45))
    def test_dead_zone(self, pa, pb, beta_c):
        gamma = 1 - beta_c
        if not (beta_c <= min(pa, 1 - pa) and max(pa, 1 - pa) <= gamma):
            return
        assert crc_loss(const_field(pa, (1, 1, 1)), const_field(pb, (1, 1, 1)), CrcConfig(gamma, beta_c)).item() == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.05, 0.45))
    def test_binary_coupling(self, pa, beta_c):
        gamma = 1 - beta_c
        a = np.array([pa, 1 - pa])
        w_pos = a.max() if a.max() > gamma else 0.0
        w_neg = 1 - a.min() if a.min() < beta_c else 0.0
        assert (w_pos > 0) == (w_neg > 0)
        if w_pos > 0:
            assert w_pos == pytest.approx(w_neg, abs=1e-15)
        # the implementation weights both terms the same way
        t = torch.tensor(a, dtype=torch.float64).reshape(2, 1, 1, 1)
        b = const_field(0.3, (1, 1, 1))
        got = crc_loss(t, b, CrcConfig(gamma, beta_c)).item()
        assert got == pytest.approx(oracles.crc(a.reshape(2, 1, 1, 1), b.numpy(), gamma, beta_c), abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a = torch.tensor(random_field(rng, (3, 3, 3), 0.0, 1.0))
            b = torch.tensor(random_field(rng, (3, 3, 3), 0.0, 1.0))
            assert crc_loss(a, b).item() >= 0


class TestSemi:
    def test_band(self):
        assert semi_loss(const_field(0.6), const_field(0.4)).item() == 0.0

    def test_confident(self):
        f = const_field(0.95)
        assert semi_loss(f, f.clone()).item() == pytest.approx(4 * 0.95 * -math.log(0.95), abs=1e-12)
        assert semi_loss(f, f.clone()).item() == pytest.approx(0.1950, abs=1e-4)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = torch.tensor(random_field(rng, (4, 4, 4), 0, 1))
        b = torch.tensor(random_field(rng, (4, 4, 4), 0, 1))
        assert semi_loss(a, b).item() == semi_loss(b, a).item()

    @pytest.mark.parametrize("kind", ["mse", "kl", "ce"])
    def test_alternates_zero_on_agreement(self, kind):
        f = torch.tensor(np.stack([np.ones((2, 2, 2)), np.zeros((2, 2, 2))]))
        assert semi_loss(f, f.clone(), kind=kind).item() == pytest.approx(0.0, abs=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            semi_loss(const_field(0.5), const_field(0.5), kind="l1")


class TestTotal:
    def test_lambda_zero(self):
        br = total_objective(1.3, 0.5, -0.2, 0.0)
        assert br.total == 1.3

    def test_no_unsup(self):
        assert total_objective(0.7, 0.0, 0.0, 0.8).total == 0.7

    def test_arithmetic(self):
        br = total_objective(1.0, 0.2, -0.1, 0.5)
        assert br.total == pytest.approx(1.05, abs=1e-15)
        assert br.lam == 0.5

    def test_non_finite(self):
        with pytest.raises(NumericError):
            total_objective(float("nan"), 0.0, 0.0, 1.0)

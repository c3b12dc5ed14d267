import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ucseg.contrastive import TemperatureConfig, ic_loss, ic_loss_stages, ife_loss, ife_loss_batch, patch_tokens
from ucseg.errors import EmptyBankError, ShapeError
from ucseg.feature_bank import FeatureBank, extract_prototypes

from conftest import analytic_grad, finite_difference_grad, grads_rel_err, rel_err

D = torch.float64
INFO_TAU_HALF = 0.12692801104297249644  # -log(e^2 / (e^2 + 1)), mpmath
INFO_TAU_ONE = 0.31326168751822283405   # -log(e / (e + 1)), mpmath


def _bank_with(pos, negs, dim=2):
    bank = FeatureBank(2, dim)
    bank.push(0, torch.tensor(pos, dtype=D))
    if negs:
        bank.push(1, torch.tensor(negs, dtype=D))
    return bank


def infonce_oracle(q, pos, negs, tau):
    num = math.exp(float(np.dot(q, pos)) / tau)
    den = num + sum(math.exp(float(np.dot(q, n)) / tau) for n in negs)
    return -math.log(num / den)


class TestIFE:
    def test_scalar_case(self):
        bank = _bank_with([[1.0, 0.0]], [[0.0, 1.0]])
        q = {0: torch.tensor([1.0, 0.0], dtype=D)}
        assert ife_loss(q, bank, 0.5).item() == pytest.approx(INFO_TAU_HALF, abs=1e-12)

    def test_temperature_increases_loss(self):
        bank = _bank_with([[1.0, 0.0]], [[0.0, 1.0]])
        q = {0: torch.tensor([1.0, 0.0], dtype=D)}
        lo, hi = ife_loss(q, bank, 0.5).item(), ife_loss(q, bank, 1.0).item()
        assert hi == pytest.approx(INFO_TAU_ONE, abs=1e-12)
        assert lo < hi

    def test_no_negatives(self):
        bank = _bank_with([[1.0, 0.0]], [])
        with pytest.raises(EmptyBankError):
            ife_loss({0: torch.tensor([1.0, 0.0], dtype=D)}, bank, 0.5)

    def test_skips_unservable_classes(self, rng):
        bank = FeatureBank(3, 4)
        bank.push(0, torch.as_tensor(rng.normal(size=(3, 4))))
        bank.push(1, torch.as_tensor(rng.normal(size=(2, 4))))
        q0 = F.normalize(torch.as_tensor(rng.normal(size=4)), dim=0)
        q2 = F.normalize(torch.as_tensor(rng.normal(size=4)), dim=0)
        # class 2 has no stored positive -> skipped, mean over class 0 only
        full = ife_loss({0: q0, 2: q2}, bank, 0.5).item()
        assert full == pytest.approx(ife_loss({0: q0}, bank, 0.5).item(), abs=1e-14)

    def test_matches_oracle(self, rng):
        bank = FeatureBank(3, 6, capacity=5)
        for c in range(3):
            bank.push(c, torch.as_tensor(rng.normal(size=(4, 6))))
        qs = {c: F.normalize(torch.as_tensor(rng.normal(size=6)), dim=0) for c in range(3)}
        expected = []
        for c, q in qs.items():
            pos = bank.contents(c).numpy().mean(0)
            negs = [v for k in range(3) if k != c for v in bank.contents(k).numpy()]
            expected.append(infonce_oracle(q.numpy(), pos, negs, 0.7))
        assert ife_loss(qs, bank, 0.7).item() == pytest.approx(np.mean(expected), abs=1e-12)

    def test_batch_returns_none_on_empty_bank(self, rng):
        feats = torch.as_tensor(rng.normal(size=(2, 4, 4, 4)))
        probs = torch.softmax(torch.as_tensor(rng.normal(size=(2, 2, 8, 8))), 1)
        assert ife_loss_batch(feats, probs, FeatureBank(2, 4), 0.5) is None

    def test_batch_matches_per_sample(self, rng):
        bank = FeatureBank(3, 4)
        bank.push(0, torch.as_tensor(rng.normal(size=(3, 4))))
        bank.push(1, torch.as_tensor(rng.normal(size=(2, 4))))
        feats = torch.as_tensor(rng.normal(size=(3, 4, 4, 4)))
        probs = torch.softmax(torch.as_tensor(rng.normal(size=(3, 3, 8, 8))), 1)
        probs[1, 0] = 0.0  # sample 1 has no class-0 mass
        expected = []
        for f, p in zip(feats, probs):
            try:
                expected.append(ife_loss(extract_prototypes(f, p), bank, 0.5).item())
            except EmptyBankError:
                pass
        assert ife_loss_batch(feats, probs, bank, 0.5).item() == pytest.approx(np.mean(expected), abs=1e-12)

    def test_non_negative_when_positive_dominates(self, rng):
        for _ in range(20):
            q = F.normalize(torch.as_tensor(rng.normal(size=3)), dim=0)
            negs = F.normalize(torch.as_tensor(rng.normal(size=(4, 3))), dim=1)
            bank = FeatureBank(2, 3)
            bank.push(0, q)
            bank.push(1, negs)
            assert ife_loss({0: q}, bank, 0.5).item() >= 0

    def test_gradient(self, rng):
        bank = FeatureBank(2, 4)
        bank.push(0, torch.as_tensor(rng.normal(size=(3, 4))))
        bank.push(1, torch.as_tensor(rng.normal(size=(3, 4))))
        raw = torch.as_tensor(rng.normal(size=(2, 4)), dtype=D).requires_grad_(True)

        def fn():
            q = F.normalize(raw, dim=1)
            return ife_loss({0: q[0], 1: q[1]}, bank, 0.5)

        assert rel_err(analytic_grad(fn, [raw])[0], finite_difference_grad(fn, [raw])[0]) < 1e-4


class TestPatchTokens:
    def test_count(self):
        assert patch_tokens(torch.randn(5, 9, 9)).shape == (9, 5)

    def test_floor_grid(self):
        assert patch_tokens(torch.randn(5, 8, 8)).shape == (4, 5)

    def test_constant(self):
        t = patch_tokens(torch.ones(3, 9, 9))
        assert torch.allclose(t, t[0].expand_as(t))

    def test_brute_force_blocks(self, rng):
        f = rng.normal(size=(4, 9, 12))
        tokens = patch_tokens(torch.as_tensor(f), normalize=False).numpy()
        k = 0
        for i in range(3):
            for j in range(4):
                block = f[:, 3 * i:3 * i + 3, 3 * j:3 * j + 3].reshape(4, -1).mean(1)
                assert np.allclose(tokens[k], block, atol=1e-12)
                k += 1

    def test_normalized(self, rng):
        t = patch_tokens(torch.as_tensor(rng.normal(size=(4, 9, 9))))
        assert torch.allclose(t.norm(dim=1), torch.ones(9, dtype=D))

    def test_3d(self):
        assert patch_tokens(torch.randn(2, 6, 6, 6)).shape == (8, 2)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            patch_tokens(torch.randn(2, 2, 9))


class TestIC:
    def test_orthonormal_pair(self):
        t = torch.eye(2, dtype=D)
        assert ic_loss(t, t, 0.5).item() == pytest.approx(INFO_TAU_HALF, abs=1e-12)

    def test_single_token(self, rng):
        a = F.normalize(torch.as_tensor(rng.normal(size=(1, 3))), dim=1)
        b = F.normalize(torch.as_tensor(rng.normal(size=(1, 3))), dim=1)
        assert ic_loss(a, b, 0.5).item() == 0.0

    def test_permutation_invariant(self, rng):
        a = F.normalize(torch.as_tensor(rng.normal(size=(6, 3))), dim=1)
        b = F.normalize(torch.as_tensor(rng.normal(size=(6, 3))), dim=1)
        perm = torch.as_tensor(rng.permutation(6))
        assert ic_loss(a[perm], b[perm]).item() == pytest.approx(ic_loss(a, b).item(), abs=1e-14)

    def test_matches_oracle(self, rng):
        a = F.normalize(torch.as_tensor(rng.normal(size=(5, 3))), dim=1)
        b = F.normalize(torch.as_tensor(rng.normal(size=(5, 3))), dim=1)
        an, bn = a.numpy(), b.numpy()
        terms = []
        for i in range(5):
            num = math.exp(np.dot(an[i], bn[i]) / 0.5)
            den = sum(math.exp(np.dot(an[i], bn[j]) / 0.5) for j in range(5))
            terms.append(-math.log(num / den))
        assert ic_loss(a, b, 0.5).item() == pytest.approx(np.mean(terms), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ic_loss(torch.randn(3, 2), torch.randn(4, 2))

    def test_gradient(self, rng):
        a = torch.as_tensor(rng.normal(size=(4, 3)), dtype=D).requires_grad_(True)
        b = torch.as_tensor(rng.normal(size=(4, 3)), dtype=D).requires_grad_(True)

        def fn():
            return ic_loss(F.normalize(a, dim=1), F.normalize(b, dim=1), 0.5)

        assert grads_rel_err(analytic_grad(fn, [a, b]), finite_difference_grad(fn, [a, b])) < 1e-4

    def test_stage_coverage(self, rng):
        fa = [torch.as_tensor(rng.normal(size=(2, 4, s, s))) for s in (12, 6, 3)]
        fb = [torch.as_tensor(rng.normal(size=(2, 4, s, s))) for s in (12, 6, 3)]
        total = ic_loss_stages(fa, fb, 0.5)
        per_stage = [
            torch.stack([ic_loss(patch_tokens(a), patch_tokens(b), 0.5) for a, b in zip(x, y)]).mean()
            for x, y in zip(fa, fb)
        ]
        assert total.item() == pytest.approx(sum(p.item() for p in per_stage), abs=1e-12)
        assert ic_loss_stages(fa, fb, 0.5, n_stages=2).item() != pytest.approx(total.item())


def test_temperature_config():
    assert TemperatureConfig().tau == 0.5
    with pytest.raises(ValueError):
        TemperatureConfig(0.0)

"""
Loss Function Test Suite
Masked cross-entropy, PAL and paired InfoNCE
"""

import sys
import math
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path
parent_dir = str(Path(__file__).parent.parent)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from src.errors import NumericalError, ShapeError
from src.losses import LogitsBatch, PooledPairBatch, infonce, masked_ce, pal_loss, pal_loss_batch


def naive_infonce(r, r_syn, temp):
    """Double-loop reference over all 2B anchors"""
    z = [v / np.linalg.norm(v) for v in list(r) + list(r_syn)]
    size = len(r)
    total = 0.0
    for i in range(2 * size):
        positive = i + size if i < size else i - size
        denominator = 0.0
        for j in range(2 * size):
            if j != i:
                denominator += math.exp(float(np.dot(z[i], z[j])) / temp)
        total += -(float(np.dot(z[i], z[positive])) / temp - math.log(denominator))
    return total / (2 * size)


class TestMaskedCE(unittest.TestCase):

    def test_uniform_logits(self):
        """Uniform scores cost ln V per token"""
        batch = LogitsBatch(np.zeros((2, 3, 8)), np.ones((2, 3), dtype=int), np.ones((2, 3), dtype=bool))
        self.assertAlmostEqual(masked_ce(batch), math.log(8), places=12)

    def test_confident_prediction(self):
        logits = np.zeros((1, 2, 5))
        logits[0, 0, 3] = 50.0
        logits[0, 1, 1] = 50.0
        batch = LogitsBatch(logits, np.array([[3, 1]]), np.ones((1, 2), dtype=bool))
        self.assertLess(masked_ce(batch), 1e-9)

    def test_mixed_mask(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((2, 4, 6))
        targets = rng.integers(0, 6, size=(2, 4))
        mask = np.array([[True, True, True, False], [True, False, False, False]])
        losses = []
        for b in range(2):
            for t in range(4):
                if mask[b, t]:
                    row = logits[b, t]
                    losses.append(-(row[targets[b, t]] - math.log(np.exp(row).sum())))
        self.assertAlmostEqual(masked_ce(LogitsBatch(logits, targets, mask)), float(np.mean(losses)), places=12)

    def test_all_masked(self):
        batch = LogitsBatch(np.zeros((1, 2, 4)), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))
        with self.assertRaises(NumericalError):
            masked_ce(batch)

    def test_shape_validation(self):
        with self.assertRaises(ShapeError):
            LogitsBatch(np.zeros((1, 2, 4)), np.zeros((1, 3), dtype=int), np.ones((1, 3), dtype=bool))
        with self.assertRaises(ShapeError):
            LogitsBatch(np.zeros((1, 2, 4)), np.full((1, 2), 4), np.ones((1, 2), dtype=bool))


class TestPAL(unittest.TestCase):

    def test_identical(self):
        r = np.array([0.3, -1.0, 2.0])
        self.assertAlmostEqual(pal_loss(r, r), 0.0, places=12)

    def test_antipodal(self):
        r = np.array([0.3, -1.0, 2.0])
        self.assertAlmostEqual(pal_loss(r, -r), 2.0, places=12)

    def test_orthogonal(self):
        self.assertAlmostEqual(pal_loss(np.array([1.0, 0.0]), np.array([0.0, 5.0])), 1.0, places=12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        r, s = rng.standard_normal(4), rng.standard_normal(4)
        self.assertAlmostEqual(pal_loss(r, s), pal_loss(3.0 * r, 0.5 * s), places=12)

    def test_range_and_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            r, r_syn = rng.standard_normal(6), rng.standard_normal(6)
            value = pal_loss(r, r_syn)
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 2.0)
            self.assertAlmostEqual(value, pal_loss(r_syn, r), places=14)

    def test_zero_norm(self):
        with self.assertRaises(NumericalError):
            pal_loss(np.zeros(3), np.ones(3))

    def test_batch_mean(self):
        batch = PooledPairBatch(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        self.assertAlmostEqual(pal_loss_batch(batch), 0.5, places=12)


class TestInfoNCE(unittest.TestCase):

    def test_single_pair(self):
        """B=1: the only other vector is the positive"""
        batch = PooledPairBatch(np.array([[1.0, 2.0]]), np.array([[-0.5, 0.3]]))
        self.assertAlmostEqual(infonce(batch, 0.07), 0.0, places=12)

    def test_identical_vectors(self):
        """All four vectors equal: ln 3 regardless of temperature"""
        r = np.array([[1.0, 1.0], [1.0, 1.0]])
        for temp in (0.07, 1.0, 5.0):
            self.assertAlmostEqual(infonce(PooledPairBatch(r, r.copy()), temp), math.log(3), places=10)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(2)
        r, r_syn = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        self.assertAlmostEqual(infonce(PooledPairBatch(r, r_syn), 0.07), naive_infonce(r, r_syn, 0.07), delta=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            batch = PooledPairBatch(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
            self.assertGreaterEqual(infonce(batch), 0.0)

    def test_decreases_as_positive_similarity_rises(self):
        """
        Rotate one synthetic descriptor toward its real partner inside a plane
        orthogonal to every other descriptor: only the positive cosine moves.
        """
        basis = np.eye(4)
        r = basis[:3].copy()
        losses = []
        for angle in np.linspace(0.5 * math.pi, 0.0, 7):
            r_syn = basis[:3].copy()
            r_syn[0] = math.cos(angle) * basis[0] + math.sin(angle) * basis[3]
            losses.append(infonce(PooledPairBatch(r, r_syn), 0.07))
        self.assertTrue(all(later < earlier for earlier, later in zip(losses, losses[1:])), losses)

    def test_positive_rescaling(self):
        rng = np.random.default_rng(6)
        r, r_syn = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        scales = rng.uniform(0.1, 10.0, size=(3, 1))
        base = infonce(PooledPairBatch(r, r_syn), 0.07)
        self.assertAlmostEqual(infonce(PooledPairBatch(r * scales, r_syn), 0.07), base, delta=1e-9)
        self.assertAlmostEqual(infonce(PooledPairBatch(r, r_syn * scales[::-1]), 0.07), base, delta=1e-9)

    def test_bad_temperature(self):
        batch = PooledPairBatch(np.ones((2, 2)), np.ones((2, 2)))
        with self.assertRaises(ValueError):
            infonce(batch, 0.0)

    def test_mismatched_pairs(self):
        with self.assertRaises(ShapeError):
            PooledPairBatch(np.ones((2, 3)), np.ones((3, 3)))


if __name__ == '__main__':
    unittest.main()

"""
Joint Objective Test Suite
Loss mixing rules, term consistency, gradient linearity and finite-difference checks
"""

import sys
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path
parent_dir = str(Path(__file__).parent.parent)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from src.attnpool import aggregate_attention, retention_margin, retention_mask, topk_softmax, weighted_pool
from src.autodiff import Tape
from src.errors import TapeError
from src.losses import LogitsBatch, PooledPairBatch, infonce, masked_ce, pal_loss_batch
from src.numio import RunConfig
from src.objective import (
    VARIANTS, backward, ce_graph, combine_terms, grad_check, infonce_graph, joint_loss, pal_graph,
    parameter_function, pooled_pairs, term_grad_checks, term_gradients, variant_config,
)
from src.optim import AdamW
from src.ot import cosine_cost, sinkhorn
from src.scenes import make_samples
from src.toycap import ToyModel, collate, forward, teacher_forcing_targets


def small_model(seed=3):
    return ToyModel(seed=seed, encoder_width=12, width=16, num_layers=2, num_heads=2, ffn_width=16)


def small_batch(count=2, seed=5, with_synthetic=True):
    return collate(make_samples(count, np.random.default_rng(seed)), with_synthetic)


class TestMixingRules(unittest.TestCase):
    """How the four terms combine"""

    def setUp(self):
        self.model = small_model()
        self.batch = small_batch()
        self.cfg = RunConfig()

    def test_linear_combination(self):
        self.assertAlmostEqual(combine_terms(1.0, 0.2, 0.3, 0.4, self.cfg), 1.39, places=12)

    def test_zero_weights(self):
        """All alignment weights zero: total is CE exactly"""
        breakdown = joint_loss(self.batch, self.cfg.with_weights(0.0, 0.0, 0.0), self.model)
        self.assertEqual(breakdown.total, breakdown.ce)
        self.assertTrue(breakdown.synthetic_present)

    def test_without_synthetic(self):
        breakdown = joint_loss(self.batch.without_synthetic(), self.cfg, self.model)
        self.assertFalse(breakdown.synthetic_present)
        self.assertEqual(breakdown.total, breakdown.ce)
        self.assertEqual((breakdown.pal, breakdown.nce, breakdown.ot), (0.0, 0.0, 0.0))

    def test_total_matches_terms(self):
        breakdown = joint_loss(self.batch, self.cfg, self.model)
        expected = combine_terms(breakdown.ce, breakdown.pal, breakdown.nce, breakdown.ot, self.cfg)
        self.assertAlmostEqual(breakdown.total, expected, places=12)
        print(f"\nlosses: {breakdown.to_dict()}")

    def test_ce_on_synthetic(self):
        cfg = variant_config(self.cfg, "ce_real_syn")
        self.assertEqual((cfg.lambda_pal, cfg.alpha, cfg.beta), (0.0, 0.0, 0.0))
        real_only = joint_loss(self.batch, self.cfg.with_weights(0.0, 0.0, 0.0), self.model)
        both = joint_loss(self.batch, cfg, self.model)
        self.assertNotEqual(real_only.ce, both.ce)
        self.assertEqual(both.total, both.ce)

    def test_variants(self):
        self.assertEqual(len(VARIANTS), 7)
        cfg = variant_config(self.cfg, "pal_infonce_ot")
        self.assertEqual((cfg.lambda_pal, cfg.alpha, cfg.beta), (0.5, 0.3, 0.5))
        with self.assertRaises(ValueError):
            variant_config(self.cfg, "everything")


class TestTermConsistency(unittest.TestCase):
    """Graph terms agree with the numpy losses"""

    def setUp(self):
        self.model = small_model()
        self.batch = small_batch(count=3)
        self.cfg = RunConfig()

    def test_ce_matches_forward(self):
        breakdown = joint_loss(self.batch, self.cfg, self.model)
        self.assertAlmostEqual(breakdown.ce, masked_ce(forward(self.model, self.batch).logits), places=10)

    def test_alignment_terms_match_pooled_pairs(self):
        breakdown = joint_loss(self.batch, self.cfg, self.model)
        pairs = pooled_pairs(self.model, self.batch, self.cfg)
        self.assertAlmostEqual(breakdown.pal, pal_loss_batch(pairs), places=9)
        self.assertAlmostEqual(breakdown.nce, infonce(pairs, self.cfg.nce_temp), places=9)

    def test_ot_matches_numpy_solver(self):
        breakdown = joint_loss(self.batch, self.cfg, self.model)
        out = forward(self.model, self.batch)
        costs = []
        for index in range(self.batch.size):
            weights = []
            for stacks in (out.real_attention, out.syn_attention):
                saliency = aggregate_attention(stacks[index], self.cfg.last_k)
                weights.append(topk_softmax(saliency, self.cfg.tau_attn, self.cfg.rho))
            e, e_syn = out.real_memory[index], out.syn_memory[index]
            c = 1.0 - (e / np.linalg.norm(e, axis=1, keepdims=True)) @ \
                (e_syn / np.linalg.norm(e_syn, axis=1, keepdims=True)).T
            _, cost = sinkhorn(c, weights[0], weights[1], self.cfg.ot_eps, self.cfg.ot_iters)
            costs.append(cost)
        self.assertAlmostEqual(breakdown.ot, float(np.mean(costs)), places=9)


class TestBackward(unittest.TestCase):
    """Gradients of the joint objective"""

    def setUp(self):
        self.model = small_model()
        self.batch = small_batch()
        self.cfg = RunConfig()

    def test_gradients_cover_trainable_parameters(self):
        tape = Tape()
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=tape)
        grads = backward(tape, breakdown)
        self.assertEqual(set(grads), set(self.model.params))
        self.assertFalse(any(name.startswith("encoder") for name in grads))
        for name, grad in grads.items():
            self.assertEqual(grad.shape, self.model.params[name].shape, name)
            self.assertTrue(np.all(np.isfinite(grad)), name)

    def test_encoder_receives_no_gradient(self):
        """Backward through the full objective never touches the frozen encoder"""
        tape = Tape()
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=tape)
        weight, bias = self.model.encoder_weight.copy(), self.model.encoder_bias.copy()
        features = self.model.encode(self.batch.real_patches)
        grads = backward(tape, breakdown)
        self.assertEqual(set(tape.parameters), set(self.model.params))
        for node in tape.parameters.values():
            self.assertNotEqual(node.value.shape, self.model.encoder_weight.shape)
        AdamW(self.model.params).step(grads, lr=1.0)
        np.testing.assert_array_equal(self.model.encoder_weight, weight)
        np.testing.assert_array_equal(self.model.encoder_bias, bias)
        np.testing.assert_array_equal(self.model.encode(self.batch.real_patches), features)
        self.assertFalse(self.model.encoder_weight.flags.writeable)

    def test_tape_consumed_twice(self):
        tape = Tape()
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=tape)
        backward(tape, breakdown)
        with self.assertRaises(TapeError):
            backward(tape, breakdown)

    def test_foreign_tape(self):
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=Tape())
        other = Tape()
        joint_loss(self.batch, self.cfg, self.model, tape=other)
        with self.assertRaises(TapeError):
            backward(other, breakdown)

    def test_frozen_parameters_absent(self):
        tape = Tape()
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=tape, trainable=["bridge.bias"])
        self.assertEqual(set(backward(tape, breakdown)), {"bridge.bias"})

    def test_total_gradient_is_weighted_sum(self):
        """Total-loss gradient equals the weighted sum of per-term gradients"""
        tape = Tape()
        breakdown = joint_loss(self.batch, self.cfg, self.model, tape=tape)
        total = backward(tape, breakdown)
        terms = term_gradients(self.model, self.batch, self.cfg)
        weights = {"ce": 1.0, "pal": self.cfg.lambda_pal, "nce": self.cfg.alpha, "ot": self.cfg.beta}
        for name in total:
            combined = sum(weights[term] * terms[term][name] for term in weights)
            np.testing.assert_allclose(total[name], combined, rtol=1e-8, atol=1e-10, err_msg=name)

    def test_detached_weights_change_gradients(self):
        tape = Tape()
        attached = backward(tape, joint_loss(self.batch, self.cfg, self.model, tape=tape))
        tape = Tape()
        detached_cfg = self.cfg.merged(detach_weights=True)
        detached = backward(tape, joint_loss(self.batch, detached_cfg, self.model, tape=tape))
        self.assertFalse(np.allclose(attached["layers.1.cross.wq"], detached["layers.1.cross.wq"]))


class TestFiniteDifferences(unittest.TestCase):
    """Analytic gradients against central differences, 20 random points per term"""

    def test_pal_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            other = rng.standard_normal((1, 6))

            def fn(x):
                tape = Tape()
                r = tape.variable(x)
                out = pal_graph(tape, r, other)
                tape.backward(out)
                return float(out.value), r.grad

            result = grad_check(fn, rng.standard_normal((1, 6)), h=1e-6)
            self.assertLess(result.max_relative_error, 1e-5, f"seed {seed}")

    def test_infonce_gradient(self):
        for seed in range(20):
            point = np.random.default_rng(100 + seed).standard_normal((6, 4))

            def fn(x):
                tape = Tape()
                z = tape.variable(x)
                out = infonce_graph(tape, tape_slice(tape, z, 0, 3), tape_slice(tape, z, 3, 6), 0.07)
                tape.backward(out)
                return float(out.value), z.grad

            value, _ = fn(point)
            self.assertAlmostEqual(value, infonce(PooledPairBatch(point[:3], point[3:]), 0.07), places=10)
            result = grad_check(fn, point, h=1e-6)
            self.assertLess(result.max_relative_error, 1e-5, f"seed {seed}")

    def test_masked_ce_gradient(self):
        """Teacher-forced CE with trailing PAD, w.r.t. the logits"""
        vocab = 7
        for seed in range(20):
            rng = np.random.default_rng(200 + seed)
            lengths = rng.integers(2, 6, size=3)
            captions = np.zeros((3, 5), dtype=np.int64)
            pad_mask = np.zeros((3, 5), dtype=bool)
            for row, length in enumerate(lengths):
                captions[row, :length] = rng.integers(1, vocab, size=length)
                pad_mask[row, :length] = True
            logits = rng.standard_normal((3, 5, vocab))

            def fn(x):
                tape = Tape()
                node = tape.variable(x)
                out = ce_graph(tape, node, captions, pad_mask)
                tape.backward(out)
                return float(out.value), node.grad

            targets, target_mask = teacher_forcing_targets(captions, pad_mask)
            value, _ = fn(logits)
            self.assertAlmostEqual(value, masked_ce(LogitsBatch(logits, targets, target_mask)), places=12)
            result = grad_check(fn, logits, h=1e-6)
            self.assertLess(result.max_relative_error, 1e-5, f"seed {seed}")

    def test_ot_gradient_wrt_patch_tokens(self):
        """Unrolled Sinkhorn at eps 0.05 with 30 iterations, through the cosine cost"""
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            e_syn = rng.standard_normal((4, 3))
            a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(4))

            def fn(x):
                tape = Tape()
                e = tape.variable(x)
                cos = tape.matmul(tape.normalize(e, axis=-1), tape.transpose(tape.normalize(e_syn, axis=-1), (1, 0)))
                _, transport = tape.sinkhorn(tape.sub(1.0, cos), a, b, 0.05, 30)
                out = tape.sum(transport)
                tape.backward(out)
                return float(out.value), e.grad

            point = rng.standard_normal((5, 3))
            value, _ = fn(point)
            _, cost = sinkhorn(cosine_cost(point, e_syn), a, b, 0.05, 30)
            self.assertAlmostEqual(value, cost, places=10)
            result = grad_check(fn, point, h=1e-6)
            self.assertLess(result.max_relative_error, 1e-3, f"seed {seed}")

    def test_topk_pool_composite(self):
        """Away from retention boundaries the straight-through set is exact"""
        rng = np.random.default_rng(22)
        saliency = np.array([2.0, 1.0, 0.0, -1.0])
        e = rng.standard_normal((4, 3))
        c = rng.standard_normal(3)
        rho = 0.8
        probs = np.exp(saliency) / np.exp(saliency).sum()
        self.assertGreater(retention_margin(probs, rho), 1e-3)

        def fn(x):
            tape = Tape()
            s = tape.variable(x)
            p = tape.softmax(s)
            keep = retention_mask(p.value, rho)
            w = tape.renormalize(tape.mul(p, keep.astype(float)))
            out = tape.sum(tape.mul(tape.weighted_sum(w, e), c))
            tape.backward(out)
            return float(out.value), s.grad

        value, _ = fn(saliency)
        self.assertAlmostEqual(value, float(weighted_pool(topk_softmax(saliency, 1.0, rho), e) @ c), places=12)
        result = grad_check(fn, saliency, h=1e-6)
        self.assertLess(result.max_relative_error, 1e-5)

    def test_joint_loss_parameter(self):
        """Whole objective, including unrolled Sinkhorn, w.r.t. the bridge shift"""
        model = small_model()
        batch = small_batch()

        # rho = 1 keeps every patch, so no retention boundary exists
        result = grad_check(parameter_function(model, batch, RunConfig(rho=1.0), "bridge.ln.beta"),
                            model.params["bridge.ln.beta"], h=1e-6)
        print(f"\njoint loss grad check (rho=1): {result.to_dict()}")
        self.assertLess(result.max_relative_error, 1e-3)

        # default rho: first procedural batch whose retained sets are well clear of a boundary
        cfg = RunConfig()
        for seed in range(5, 25):
            batch = small_batch(seed=seed)
            out = forward(model, batch)
            margin = min(
                retention_margin(topk_softmax(aggregate_attention(stack, cfg.last_k), cfg.tau_attn, 1.0), cfg.rho)
                for stack in out.real_attention + out.syn_attention
            )
            if margin >= 1e-3:
                break
        self.assertGreaterEqual(margin, 1e-3, "no batch clear of a retention boundary")
        result = grad_check(parameter_function(model, batch, cfg, "bridge.ln.beta"),
                            model.params["bridge.ln.beta"], h=1e-6)
        self.assertLess(result.max_relative_error, 1e-3)

    def test_per_term_checks(self):
        model = small_model()
        batch = small_batch()
        checks = term_grad_checks(model, batch, RunConfig(rho=1.0), "bridge.ln.beta", h=1e-6)
        self.assertEqual(set(checks), {"ce", "pal", "nce", "ot"})
        self.assertLess(checks["ce"].max_relative_error, 1e-5)
        for term in ("pal", "nce", "ot"):
            self.assertLess(checks[term].max_relative_error, 1e-3, term)
        only_ce = term_grad_checks(model, batch.without_synthetic(), RunConfig(), "bridge.ln.beta", h=1e-6)
        self.assertEqual(set(only_ce), {"ce"})
        with self.assertRaises(KeyError):
            parameter_function(model, batch, RunConfig(), "bridge.bias", term="kl")

    def test_parameter_restored(self):
        model = small_model()
        before = model.params["bridge.bias"].copy()
        fn = parameter_function(model, small_batch(), RunConfig(), "bridge.bias")
        fn(before + 1.0)
        np.testing.assert_array_equal(model.params["bridge.bias"], before)
        with self.assertRaises(KeyError):
            parameter_function(model, small_batch(), RunConfig(), "encoder.weight")


def tape_slice(tape, node, start, stop):
    """Rows start:stop of a 2-D node via a selection matmul"""
    rows = node.shape[0]
    selector = np.eye(rows)[start:stop]
    return tape.matmul(selector, node)


if __name__ == '__main__':
    unittest.main()

"""
Command Line Test Suite
Every subcommand prints one JSON document; exit codes 0 / 1 / 2
"""

import io
import sys
import json
import shutil
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np

# Add parent directory to path
parent_dir = str(Path(__file__).parent.parent)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from main import main
from src.numio import CaptionPairRecord, write_embeddings, write_records, write_tensor
from src.schemas import validate_error, validate_output


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def invoke(self, *argv):
        """Run main() and return (exit code, parsed stdout)"""
        buffer = io.StringIO()
        with redirect_stdout(buffer):
            code = main([str(a) for a in argv])
        return code, json.loads(buffer.getvalue())

    def ok(self, command, *argv):
        code, payload = self.invoke(command, *argv)
        self.assertEqual(code, 0, payload)
        validate_output(command, payload)
        return payload

    def tensor(self, name, array):
        path = self.test_dir / name
        write_tensor(path, np.asarray(array, dtype=np.float64))
        return path


class TestNumericCommands(CliTestCase):

    def test_sinkhorn(self):
        cost = self.tensor("cost.tnsr", [[0.0, 1.0], [1.0, 0.0]])
        a = self.tensor("a.tnsr", [0.5, 0.5])
        b = self.tensor("b.tnsr", [0.5, 0.5])
        payload = self.ok("sinkhorn", "--cost", cost, "--a", a, "--b", b, "--eps", "0.05", "--exact")
        self.assertEqual(payload["exact_cost"], 0.0)
        self.assertLess(payload["cost"], 1e-6)
        self.assertLess(payload["marginal_residual"], 1e-9)
        plan = np.array(payload["plan"])
        self.assertEqual(plan.shape, (2, 2))
        np.testing.assert_allclose(plan, [[0.5, 0.0], [0.0, 0.5]], atol=1e-6)
        self.assertAlmostEqual(plan.sum(), 1.0, places=9)

    def test_diagnose(self):
        real = np.random.default_rng(0).standard_normal((6, 2))
        payload = self.ok("diagnose", "--real", self.tensor("real.tnsr", real),
                          "--synthetic", self.tensor("syn.tnsr", real + [3.0, 4.0]))
        self.assertAlmostEqual(payload["centroid_distance"], 5.0, places=10)
        self.assertGreater(payload["mmd"], 0.0)

    def test_bleu(self):
        candidates = self.test_dir / "cand.jsonl"
        references = self.test_dir / "ref.jsonl"
        candidates.write_text('"a a a"\n["red", "dot"]\n', encoding="utf-8")
        references.write_text('"a b"\n"red dot"\n', encoding="utf-8")
        payload = self.ok("bleu", "--candidates", candidates, "--references", references, "--max-n", 1)
        self.assertAlmostEqual(payload["scores"]["bleu_1"], 60.0, places=10)
        self.assertEqual(payload["segments"], 2)

    def test_pal_eval(self):
        payload = self.ok("pal-eval", "--count", 3)
        self.assertEqual(payload["size"], 3)
        self.assertGreaterEqual(payload["pal"], 0.0)
        self.assertLessEqual(payload["pal"], 2.0)

    def test_grad_check(self):
        payload = self.ok("grad-check", "--samples", 1, "--parameter", "bridge.ln.beta")
        self.assertEqual(payload["coordinates"], 32)
        print(f"\ngrad-check: max rel error {payload['max_relative_error']:.2e}")
        if payload["retention_margin"] >= 1e-4:
            self.assertLess(payload["max_relative_error"], 1e-3)

    def test_grad_check_per_term(self):
        payload = self.ok("grad-check", "--samples", 1, "--parameter", "bridge.ln.beta")
        self.assertEqual(set(payload["terms"]), {"ce", "pal", "nce", "ot"})
        print("\ngrad-check terms: " + ", ".join(f"{k}={v:.1e}" for k, v in payload["terms"].items()))
        for term, error in payload["terms"].items():
            self.assertTrue(np.isfinite(error), term)
            self.assertGreaterEqual(error, 0.0)
        # CE has no retention set to cross
        self.assertLess(payload["terms"]["ce"], 1e-5)
        if payload["retention_margin"] >= 1e-4:
            for term in ("pal", "nce"):
                self.assertLess(payload["terms"][term], 1e-4, term)
            self.assertLess(payload["terms"]["ot"], 1e-3)


class TestDataCommands(CliTestCase):

    def write_shard(self, name, ids, **extra):
        path = self.test_dir / name
        write_records(path, [CaptionPairRecord(i, i, f"caption {i}", f"ক্যাপশন {i}", **extra) for i in ids])
        return path

    def test_verify_pairs(self):
        records = self.write_shard("shard.csv", [1, 2, 3])
        embeddings = self.test_dir / "shard.tnsr"
        write_embeddings(embeddings, [1, 2, 3], [[1.0, 0.0]] * 3, [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out_dir = self.test_dir / "verified"
        payload = self.ok("verify-pairs", "--records", records, "--embeddings", embeddings,
                          "--output-dir", out_dir)
        self.assertEqual(payload["summary"], {"total": 3, "accepted": 2, "rejected": 1, "unverified": 0})
        self.assertTrue((out_dir / "shard.csv").exists())

    def test_merge_and_prompts(self):
        first = self.write_shard("a.csv", [1, 2, 3], similarity=0.9, valid=True)
        second = self.write_shard("b.jsonl", [3, 4], similarity=0.9, valid=True)
        merged = self.test_dir / "merged.csv"
        payload = self.ok("merge-shards", "--shards", first, second, "--output", merged)
        self.assertEqual(payload["summary"]["total"], 4)
        self.assertEqual(payload["summary"]["duplicates"], 1)
        self.assertEqual(payload["audit_inconsistencies"], 0)

        payload = self.ok("build-prompts", "--records", merged, "--versions", "t2i=v1")
        self.assertEqual(payload["count"], 4)
        sidecar = payload["prompts"][0]["sidecar"]
        self.assertEqual(sidecar["prompt"], "A photo of: caption 1. In Bengali: ক্যাপশন 1")
        self.assertEqual(sidecar["model_versions"], {"t2i": "v1"})


class TestTrainingCommands(CliTestCase):

    def test_train_toy_deterministic(self):
        argv = ["train-toy", "--epochs", 1, "--train-size", 4, "--eval-size", 2, "--batch-size", 4]
        first = self.ok(*argv)
        second = self.ok(*argv)
        self.assertEqual(first, second)
        self.assertEqual(first["steps"], 1)
        self.assertEqual(len(first["alignment"]), 2)

    def test_train_toy_checkpoint(self):
        out_dir = self.test_dir / "runs"
        payload = self.ok("train-toy", "--epochs", 1, "--train-size", 4, "--eval-size", 2,
                          "--batch-size", 4, "--output-dir", out_dir)
        self.assertTrue((Path(payload["checkpoint"]) / "manifest.json").exists())
        generated = self.ok("generate", "--checkpoint", payload["checkpoint"], "--count", 2, "--max-len", 6)
        self.assertEqual(len(generated["captions"]), 2)
        for caption in generated["captions"]:
            self.assertEqual(caption["tokens"][0], 1)
            self.assertLessEqual(len(caption["tokens"]), 6)

    def test_sweep_grid(self):
        out_dir = self.test_dir / "sweep"
        payload = self.ok("sweep", "--lambdas", 0.3, 0.5, "--rhos", 0.1, "--epochs", 1, "--train-size", 4,
                          "--eval-size", 2, "--batch-size", 4, "--output-dir", out_dir)
        self.assertEqual([(r["lambda_pal"], r["tau_attn"], r["rho"]) for r in payload["runs"]],
                         [(0.3, 1.0, 0.1), (0.5, 1.0, 0.1)])
        # same seed and scenes: the step-0 snapshot cannot depend on lambda
        self.assertEqual(payload["runs"][0]["centroid_start"], payload["runs"][1]["centroid_start"])
        self.assertTrue((out_dir / "sweep.csv").exists())
        self.assertTrue((out_dir / "sweep.json").exists())


class TestExitCodes(CliTestCase):
    """Failures still print a JSON error document"""

    def test_unknown_flag(self):
        code, payload = self.invoke("sinkhorn", "--bogus")
        self.assertEqual(code, 2)
        validate_error(payload)
        self.assertEqual(payload["error"]["type"], "UsageError")

    def test_invalid_config_value(self):
        code, payload = self.invoke("grad-check", "--rho", 2)
        self.assertEqual(code, 2)
        self.assertEqual(payload["error"]["type"], "ConfigError")

    def test_config_file_with_unknown_key(self):
        path = self.test_dir / "cfg.json"
        path.write_text(json.dumps({"rho": 0.5, "learning_rate": 1.0}), encoding="utf-8")
        code, payload = self.invoke("pal-eval", "--config", path)
        self.assertEqual(code, 2)
        self.assertIn("learning_rate", payload["error"]["message"])

    def test_missing_file(self):
        missing = self.test_dir / "nope.tnsr"
        code, payload = self.invoke("sinkhorn", "--cost", missing, "--a", missing, "--b", missing)
        self.assertEqual(code, 1)
        validate_error(payload)

    def test_bad_tensor(self):
        path = self.test_dir / "junk.tnsr"
        path.write_bytes(b"not a tensor at all")
        code, payload = self.invoke("diagnose", "--real", path, "--synthetic", path)
        self.assertEqual(code, 1)
        self.assertEqual(payload["error"]["type"], "TensorFormatError")


if __name__ == '__main__':
    unittest.main()

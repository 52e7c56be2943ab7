"""
Numeric I/O Test Suite
Tensor container, caption-pair records, embeddings and run configuration
"""

import sys
import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

# Add parent directory to path
parent_dir = str(Path(__file__).parent.parent)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from src.errors import ConfigError, RecordFormatError, TensorFormatError
from src.numio import (
    CaptionPairRecord, RunConfig, TensorFile, load_array, read_embeddings, read_records,
    read_tensor, write_embeddings, write_records, write_tensor,
)


class TestTensorFile(unittest.TestCase):
    """Binary tensor container"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_matrix_round_trip(self):
        """A 2x2 float64 matrix comes back identical"""
        matrix = np.array([[1.0, 2.0], [3.0, 4.0]])
        path = self.test_dir / "m.tnsr"
        write_tensor(path, matrix)
        loaded = read_tensor(path)
        self.assertEqual(loaded.shape, (2, 2))
        self.assertEqual(loaded.dtype, "float64")
        np.testing.assert_array_equal(loaded.to_array(), matrix)

    def test_scalar_round_trip(self):
        """Rank-0 tensors are allowed"""
        path = self.test_dir / "s.tnsr"
        write_tensor(path, np.array(7.0))
        loaded = read_tensor(path)
        self.assertEqual(loaded.rank, 0)
        self.assertEqual(float(loaded.to_array()), 7.0)

    def test_int_and_float32_round_trip(self):
        ints = np.arange(6, dtype=np.int64).reshape(2, 3)
        floats = np.linspace(0, 1, 5, dtype=np.float32)
        write_tensor(self.test_dir / "i.tnsr", ints)
        write_tensor(self.test_dir / "f.tnsr", floats)
        self.assertEqual(read_tensor(self.test_dir / "i.tnsr").dtype, "int64")
        np.testing.assert_array_equal(load_array(self.test_dir / "i.tnsr"), ints)
        loaded = load_array(self.test_dir / "f.tnsr")
        self.assertEqual(loaded.dtype, np.float32)
        np.testing.assert_array_equal(loaded, floats)

    def test_loaded_array_is_writable(self):
        path = self.test_dir / "w.tnsr"
        write_tensor(path, np.zeros(3))
        loaded = load_array(path)
        loaded[0] = 1.0
        self.assertEqual(loaded[0], 1.0)

    def test_payload_shape_mismatch(self):
        """Payload of 3 values cannot have shape [2, 2]"""
        with self.assertRaises(TensorFormatError):
            TensorFile(shape=(2, 2), dtype="float64", payload=np.zeros(3))

    def test_zero_dimension_rejected(self):
        with self.assertRaises(TensorFormatError):
            TensorFile(shape=(0, 2), dtype="float64", payload=np.zeros(0))

    def test_bad_magic(self):
        path = self.test_dir / "bad.tnsr"
        path.write_bytes(b"NOTATENSOR" + b"\x00" * 16)
        with self.assertRaises(TensorFormatError):
            read_tensor(path)

    def test_truncated_payload(self):
        path = self.test_dir / "t.tnsr"
        write_tensor(path, np.ones((2, 2)))
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(TensorFormatError):
            read_tensor(path)

    def test_embeddings_round_trip(self):
        path = self.test_dir / "emb.tnsr"
        en = np.array([[1.0, 0.0], [0.5, 0.5]])
        bn = np.array([[0.0, 1.0], [0.5, -0.5]])
        write_embeddings(path, [10, 11], en, bn)
        table = read_embeddings(path)
        self.assertEqual(sorted(table), [10, 11])
        np.testing.assert_array_equal(table[11][0], en[1])
        np.testing.assert_array_equal(table[11][1], bn[1])


class TestRecords(unittest.TestCase):
    """CSV and JSONL caption-pair records"""

    def setUp(self):
        self.test_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_csv_rows_in_order(self):
        path = self.test_dir / "r.csv"
        path.write_text(
            "caption_id,image_id,text_en,text_bn,similarity,valid\n"
            "1,10,a dog,একটি কুকুর,,\n"
            "2,11,a cat,একটি বিড়াল,0.8,true\n",
            encoding="utf-8",
        )
        records = read_records(path)
        self.assertEqual([r.caption_id for r in records], [1, 2])
        self.assertIsNone(records[0].similarity)
        self.assertIsNone(records[0].valid)
        self.assertEqual(records[1].text_bn, "একটি বিড়াল")
        self.assertTrue(records[1].valid)

    def test_similarity_without_valid(self):
        """The error names the offending line"""
        path = self.test_dir / "r.csv"
        path.write_text(
            "caption_id,image_id,text_en,text_bn,similarity,valid\n"
            "1,10,a dog,কুকুর,,\n"
            "2,11,a cat,বিড়াল,0.7,\n",
            encoding="utf-8",
        )
        with self.assertRaises(RecordFormatError) as ctx:
            read_records(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn("line 3", str(ctx.exception))

    def test_jsonl_fields(self):
        path = self.test_dir / "r.jsonl"
        row = {"caption_id": 5, "image_id": 9, "text_en": "a boat", "text_bn": "একটি নৌকা",
               "similarity": 0.61, "valid": True}
        path.write_text(json.dumps(row, ensure_ascii=False) + "\n", encoding="utf-8")
        (record,) = read_records(path)
        self.assertEqual(record.similarity, 0.61)
        self.assertIs(record.valid, True)

    def test_jsonl_unknown_field(self):
        path = self.test_dir / "r.jsonl"
        path.write_text('{"caption_id": 1, "image_id": 1, "text_en": "x", "text_bn": "y", "extra": 1}\n')
        with self.assertRaises(RecordFormatError) as ctx:
            read_records(path)
        self.assertEqual(ctx.exception.line, 1)

    def test_bad_integer(self):
        path = self.test_dir / "r.csv"
        path.write_text("caption_id,image_id,text_en,text_bn\nabc,1,x,y\n")
        with self.assertRaises(RecordFormatError):
            read_records(path)

    def test_write_then_read(self):
        records = [
            CaptionPairRecord(1, 10, "a red square", "একটি লাল বর্গ", 0.9, True),
            CaptionPairRecord(2, 11, "two dots, close", "দুটি বিন্দু", 0.2, False),
            CaptionPairRecord(3, 12, "a ring", "একটি আংটি"),
        ]
        for name in ("out.csv", "out.jsonl"):
            path = self.test_dir / name
            write_records(path, records)
            self.assertEqual(read_records(path), records, name)

    def test_record_invariant(self):
        with self.assertRaises(ValueError):
            CaptionPairRecord(1, 1, "x", "y", similarity=0.5)


class TestRunConfig(unittest.TestCase):
    """Run configuration validation and merging"""

    def test_defaults(self):
        cfg = RunConfig()
        self.assertEqual((cfg.lambda_pal, cfg.alpha, cfg.beta), (0.5, 0.3, 0.5))
        self.assertEqual((cfg.tau_attn, cfg.rho, cfg.last_k), (1.0, 0.5, 2))
        self.assertEqual((cfg.nce_temp, cfg.ot_eps, cfg.ot_iters), (0.07, 0.05, 30))
        self.assertEqual(cfg.seed, 42)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({"lambda": 1.0})

    def test_invalid_values(self):
        for bad in ({"rho": 0.0}, {"rho": 1.5}, {"nce_temp": 0.0}, {"ot_iters": 0},
                    {"alpha": -0.1}, {"retention_mode": "median"}):
            with self.assertRaises(ConfigError, msg=str(bad)):
                RunConfig.from_dict(bad)

    def test_merged_ignores_none(self):
        cfg = RunConfig().merged(rho=0.7, alpha=None)
        self.assertEqual(cfg.rho, 0.7)
        self.assertEqual(cfg.alpha, 0.3)

    def test_from_json_file(self):
        test_dir = Path(tempfile.mkdtemp())
        try:
            path = test_dir / "cfg.json"
            path.write_text(json.dumps({"beta": 0.0, "seed": 7}))
            cfg = RunConfig.from_json_file(path)
            self.assertEqual(cfg.beta, 0.0)
            self.assertEqual(cfg.seed, 7)
            path.write_text("[1, 2]")
            with self.assertRaises(ConfigError):
                RunConfig.from_json_file(path)
        finally:
            shutil.rmtree(test_dir, ignore_errors=True)


if __name__ == '__main__':
    unittest.main()

# Copyright (c) 2025, Umair Wali and Contributors
# See license.txt

import csv
import tempfile
import unittest
from pathlib import Path

from scanphf.exceptions import ValidationError
from scanphf.scanphf.assign_rank import build_mphf
from scanphf.scanphf.bench_harness import CSV_FIELDS, SweepSpec, SyntheticKeys, measure_lookups, run_cell, run_sweep
from scanphf.scanphf.test_assign_rank import build_settings


class TestSyntheticKeys(unittest.TestCase):
	def test_distinct_and_reproducible(self):
		keys = list(SyntheticKeys(5000, seed=3, batch_size=700))
		self.assertEqual(len(keys), 5000)
		self.assertEqual(len(set(keys)), 5000)
		self.assertTrue(all(len(key) == 16 for key in keys))
		self.assertEqual(keys, list(SyntheticKeys(5000, seed=3)))
		self.assertNotEqual(keys[:10], list(SyntheticKeys(10, seed=4)))
		self.assertEqual(len(SyntheticKeys(42)), 42)


class TestSweepSpec(unittest.TestCase):
	def test_validation(self):
		with self.assertRaises(ValidationError):
			SweepSpec(counts=[10, 5])
		with self.assertRaises(ValidationError):
			SweepSpec(counts=[10], algorithms=["bdz"])
		with self.assertRaises(ValidationError):
			SweepSpec(counts=[10], repetitions=0)
		self.assertEqual(SweepSpec(counts=[1]).algorithms, ["mwhc-external", "mwhc-inmemory", "hem"])


class TestRunCell(unittest.TestCase):
	def test_successful_cell(self):
		row = run_cell("mwhc-external", SyntheticKeys(2000), build_settings(), seed=1)
		self.assertEqual(row["status"], "ok")
		self.assertEqual(row["n"], 2000)
		self.assertGreater(row["rounds"], 0)
		self.assertGreaterEqual(row["retries"], 0)
		self.assertGreater(row["peak_temp_bytes"], 0)

	def test_in_memory_over_budget(self):
		# 16 MiB cannot hold the in-memory working set of a million keys
		row = run_cell("mwhc-inmemory", SyntheticKeys(10**6), build_settings(), seed=1)
		self.assertEqual(row["status"], "over-budget")

	def test_failed_cell_reports_error_type(self):
		settings = build_settings(gamma=1.05, max_build_attempts=2)
		row = run_cell("mwhc-inmemory", SyntheticKeys(5000), settings, seed=1)
		self.assertEqual(row["status"], "UnpeelableError")


class TestRunSweep(unittest.TestCase):
	def test_sweep_writes_one_row_per_cell(self):
		spec = SweepSpec(counts=[100, 300], algorithms=["mwhc-external", "hem"], repetitions=2, build_seed=7)
		with tempfile.TemporaryDirectory() as tmp:
			output = Path(tmp) / "sweep.csv"
			rows = run_sweep(spec, output, build_settings())
			with open(output, newline="") as f:
				reader = csv.DictReader(f)
				self.assertEqual(reader.fieldnames, CSV_FIELDS)
				written = list(reader)
		self.assertEqual(len(rows), 8)
		self.assertEqual(len(written), 8)
		self.assertEqual([r["repetition"] for r in written[:2]], ["0", "1"])
		self.assertTrue(all(r["status"] == "ok" for r in written))


class TestMeasureLookups(unittest.TestCase):
	def test_report(self):
		keys = list(SyntheticKeys(1000))
		mphf = build_mphf(keys, settings=build_settings(), seed=2, algorithm="mwhc-inmemory")
		report = measure_lookups(mphf, keys, batch_size=256, repetitions=3)
		self.assertEqual(report["batches"], 4)
		self.assertEqual(report["repetitions"], 3)
		self.assertGreater(report["mean_ns"], 0)
		self.assertGreaterEqual(report["rsd"], 0)

	def test_empty_queries(self):
		mphf = build_mphf([b"a"], settings=build_settings(), seed=2)
		report = measure_lookups(mphf, [])
		self.assertEqual((report["batches"], report["mean_ns"], report["rsd"]), (0, 0.0, 0.0))


if __name__ == "__main__":
	unittest.main()

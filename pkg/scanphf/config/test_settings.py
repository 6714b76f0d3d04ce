# Copyright (c) 2025, Umair Wali and Contributors
# See license.txt

import os
import unittest
from unittest.mock import patch

from scanphf.config.settings import ScanphfSettings, clear_cache, get_settings
from scanphf.exceptions import ValidationError


class TestScanphfSettings(unittest.TestCase):
	def setUp(self):
		self._env = patch.dict(os.environ, {k: v for k, v in os.environ.items() if not k.startswith("SCANPHF_")}, clear=True)
		self._env.start()
		self.addCleanup(self._env.stop)

	def test_defaults(self):
		settings = ScanphfSettings()
		self.assertEqual(settings.gamma, 1.23)
		self.assertEqual(settings.rank_period, 512)
		self.assertEqual(settings.hem_rank_period, 256)
		self.assertEqual(settings.memory_budget, 1 << 30)
		self.assertEqual(settings.workspace, "")

	def test_environment_then_overrides(self):
		os.environ["SCANPHF_GAMMA"] = "1.3"
		os.environ["SCANPHF_BUFFER_BYTES"] = "8192"
		settings = ScanphfSettings(buffer_bytes=16384, rank_period=None)
		self.assertEqual(settings.gamma, 1.3)
		self.assertEqual(settings.buffer_bytes, 16384)
		self.assertEqual(settings.rank_period, 512)

	def test_validation(self):
		for overrides in (
			{"gamma": 1.0},
			{"memory_budget": 1 << 20},
			{"buffer_bytes": 1024},
			{"rank_period": 48},
			{"hem_bucket_size": 1000},
			{"max_build_attempts": 0},
			{"nonsense": 1},
		):
			with self.assertRaises(ValidationError, msg=str(overrides)):
				ScanphfSettings(**overrides)

	def test_low_gamma_only_warns(self):
		with self.assertLogs("scanphf.config", level="WARNING"):
			self.assertEqual(ScanphfSettings(gamma=1.1).gamma, 1.1)

	def test_copy_and_cache(self):
		clear_cache()
		self.addCleanup(clear_cache)
		base = get_settings()
		self.assertIs(get_settings(), base)
		copy = base.copy(gamma=1.5)
		self.assertEqual(copy.gamma, 1.5)
		self.assertEqual(base.gamma, 1.23)
		self.assertEqual(copy.as_dict().keys(), base.as_dict().keys())


if __name__ == "__main__":
	unittest.main()

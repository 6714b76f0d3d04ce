# Copyright (c) 2025, Umair Wali and contributors
# For license information, please see license.txt

"""
Scanphf Settings
Configuration for construction, external-memory streams and HEM
"""

import json
import os
from pathlib import Path

import scanphf

SETTINGS_JSON = Path(__file__).with_name("scanphf_settings.json")
ENV_PREFIX = "SCANPHF_"
PEELING_THRESHOLD = 1.221
MIN_MEMORY_BUDGET = 16 << 20

_settings_cache = None


def _cast(fieldtype, value):
	if fieldtype in ("Int", "Check"):
		return int(value)
	if fieldtype == "Float":
		return float(value)
	return str(value)


def load_fields():
	"""Read field definitions (data fields only, no section breaks)"""
	with open(SETTINGS_JSON) as f:
		meta = json.load(f)
	return [field for field in meta["fields"] if field["fieldtype"] != "Section Break"]


class ScanphfSettings:
	"""
	Scanphf Settings - single settings record

	Values are resolved from the JSON defaults, then `SCANPHF_<FIELD>`
	environment variables, then explicit overrides.
	"""

	def __init__(self, **overrides):
		self._fieldtypes = {}
		for field in load_fields():
			fieldname = field["fieldname"]
			self._fieldtypes[fieldname] = field["fieldtype"]
			value = os.environ.get(ENV_PREFIX + fieldname.upper(), field.get("default", ""))
			setattr(self, fieldname, _cast(field["fieldtype"], value))

		for fieldname, value in overrides.items():
			if value is None:
				continue
			if fieldname not in self._fieldtypes:
				scanphf.throw(f"Unknown setting: {fieldname}")
			setattr(self, fieldname, _cast(self._fieldtypes[fieldname], value))

		self.validate()

	def validate(self):
		"""Validate settings"""
		if self.gamma <= 1.0:
			scanphf.throw("Gamma must be greater than 1.0")
		if self.gamma <= PEELING_THRESHOLD:
			scanphf.logger("config").warning(
				f"Gamma {self.gamma} is not above the peeling threshold {PEELING_THRESHOLD}; builds will fail"
			)

		if self.memory_budget < MIN_MEMORY_BUDGET:
			scanphf.throw(f"Memory Budget must be at least {MIN_MEMORY_BUDGET} bytes")

		if self.buffer_bytes < 4096 or self.memory_budget < 2 * self.buffer_bytes:
			scanphf.throw("Buffer Size must be at least 4 KiB and at most half the Memory Budget")

		if self.rank_period <= 0 or self.rank_period % 32:
			scanphf.throw("Rank Sample Period must be a positive multiple of 32")
		if self.hem_rank_period <= 0 or self.hem_rank_period % 32:
			scanphf.throw("Bucket Rank Sample Period must be a positive multiple of 32")

		if self.hem_bucket_size <= 0 or self.hem_bucket_size & (self.hem_bucket_size - 1):
			scanphf.throw("Target Bucket Size must be a power of two")

		if self.max_build_attempts < 1:
			scanphf.throw("Max Build Attempts must be at least 1")
		if self.max_sort_retries < 0:
			scanphf.throw("Max Sort Retries cannot be negative")
		if self.block_records < 1:
			scanphf.throw("Incidence Block Size must be positive")

	def as_dict(self):
		return {fieldname: getattr(self, fieldname) for fieldname in self._fieldtypes}

	def copy(self, **overrides):
		return ScanphfSettings(**{**self.as_dict(), **overrides})


def get_settings():
	"""Get the cached settings record"""
	global _settings_cache
	if _settings_cache is None:
		_settings_cache = ScanphfSettings()
	return _settings_cache


def clear_cache():
	"""Drop cached settings, e.g. after environment changes"""
	global _settings_cache
	_settings_cache = None



__version__ = "0.0.1"

import importlib
import logging
import sys

from scanphf.exceptions import ValidationError

_loggers = {}


def logger(module=None):
	"""
	Get the package logger, or a child logger for a module

	Args:
		module (str): Optional module name, e.g. "ext_peeler"

	Returns:
		logging.Logger: Configured logger
	"""
	name = f"scanphf.{module}" if module else "scanphf"
	if name in _loggers:
		return _loggers[name]

	root = logging.getLogger("scanphf")
	if not root.handlers:
		handler = logging.StreamHandler(sys.stderr)
		handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
		root.addHandler(handler)
		root.propagate = False

		# Settings import is deferred, config depends on this module
		from scanphf.config.settings import get_settings

		try:
			root.setLevel(get_settings().log_level)
		except Exception:
			root.setLevel(logging.INFO)

	_loggers[name] = logging.getLogger(name)
	return _loggers[name]


def log_error(message, module=None):
	"""Log an error with the active traceback, if any"""
	logger(module).error(message, exc_info=sys.exc_info()[0] is not None)


def throw(message, exc=ValidationError):
	"""Raise `exc` with `message`"""
	raise exc(message)


def get_attr(method_string):
	"""Resolve a dotted path like "scanphf.scanphf.hem.HemStructure.deserialize" to the object"""
	parts = method_string.split(".")
	for split in range(len(parts) - 1, 0, -1):
		try:
			obj = importlib.import_module(".".join(parts[:split]))
		except ModuleNotFoundError:
			continue
		for attr in parts[split:]:
			obj = getattr(obj, attr)
		return obj
	throw(f"Invalid method path: {method_string}")

# Copyright (c) 2025, Umair Wali and contributors
# For license information, please see license.txt


class ScanphfError(Exception):
	pass


class ValidationError(ScanphfError):
	pass


class ContractViolation(ValidationError):
	pass


class CorruptStreamError(ScanphfError):
	pass


class SortPlanError(ScanphfError):
	pass


class UnpeelableError(ScanphfError):
	pass


class DuplicateKeysError(UnpeelableError):
	pass


class FormatError(ScanphfError):
	pass


class MemoryBudgetExceeded(ScanphfError):
	pass

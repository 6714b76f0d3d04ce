"""
Command Line
build, lookup, verify, bench, stats and sweep over key files
"""

import argparse
import json
import struct
import sys
import time
from pathlib import Path

import numpy as np

import scanphf
from scanphf import throw
from scanphf.config.settings import get_settings
from scanphf.exceptions import (
	CorruptStreamError,
	FormatError,
	MemoryBudgetExceeded,
	SortPlanError,
	UnpeelableError,
	ValidationError,
)
from scanphf.hooks import key_formats, structure_builders, structure_loaders
from scanphf.scanphf.assign_rank import StaticFunction, batches, build_function, build_mphf, is_bijective
from scanphf.scanphf.bench_harness import SweepSpec, measure_lookups, run_sweep
from scanphf.scanphf.ext_peeler import LayerManifest
from scanphf.scanphf.hypergraph import is_peeling_order
from scanphf.scanphf.inmem_peeler import PeelStatus

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BUILD = 2
EXIT_VERIFY = 3
EXIT_IO = 4

LENGTH_PREFIX = struct.Struct("<I")


class CommandParser(argparse.ArgumentParser):
	"""Raises ValidationError on bad usage instead of exiting with status 2"""

	def error(self, message):
		self.print_usage(sys.stderr)
		throw(f"{self.prog}: {message}")


# Key files


class LineKeys:
	"""Newline-delimited keys; each pass re-reads the file"""

	def __init__(self, path):
		self.path = Path(path)

	def __iter__(self):
		with open(self.path, "rb") as f:
			for line in f:
				yield line[:-1] if line.endswith(b"\n") else line


class LengthPrefixedKeys:
	"""Binary records, each a little-endian u32 length followed by the key bytes"""

	def __init__(self, path):
		self.path = Path(path)

	def __iter__(self):
		with open(self.path, "rb") as f:
			offset = 0
			while prefix := f.read(LENGTH_PREFIX.size):
				if len(prefix) < LENGTH_PREFIX.size:
					throw(f"{self.path}: truncated length prefix at byte {offset}", FormatError)
				(length,) = LENGTH_PREFIX.unpack(prefix)
				key = f.read(length)
				if len(key) < length:
					throw(f"{self.path}: record at byte {offset} needs {length} bytes, {len(key)} left", FormatError)
				offset += LENGTH_PREFIX.size + length
				yield key


def open_keys(path, fmt="lines"):
	if fmt not in key_formats:
		throw(f"Unknown key format {fmt}")
	return scanphf.get_attr(key_formats[fmt])(path)


def read_values(path):
	"""Function values: a .npy array (memory-mapped) or one decimal per line"""
	path = Path(path)
	if path.suffix == ".npy":
		return np.load(path, mmap_mode="r")
	with open(path) as f:
		try:
			return np.array([int(line) for line in f if line.strip()], dtype=np.uint64)
		except (ValueError, OverflowError) as e:
			throw(f"{path}: values must be non-negative integers ({e})", FormatError)


# Builders registered in hooks.structure_builders


def build_mwhc_external(keys, settings=None, seed=None):
	return build_mphf(keys, settings=settings, seed=seed, algorithm="mwhc-external")


def build_mwhc_inmemory(keys, settings=None, seed=None):
	return build_mphf(keys, settings=settings, seed=seed, algorithm="mwhc-inmemory")


def load_structure(path):
	"""Deserialize any structure file, dispatching on its magic"""
	data = Path(path).read_bytes()
	loader = structure_loaders.get(data[:4])
	if loader is None:
		throw(f"{path}: unrecognized structure magic {data[:4]!r}", FormatError)
	return scanphf.get_attr(loader)(data)


def query(structure, keys):
	"""Index (or value) of every key, in input order"""
	lookup = structure.evaluate_many if isinstance(structure, StaticFunction) else structure.lookup_many
	for batch in batches(keys):
		yield from lookup(batch).tolist()


def emit(record):
	print(json.dumps(record), flush=True)


# Commands


def cmd_build(args):
	settings = get_settings().copy(
		gamma=args.gamma,
		memory_budget=args.memory_budget,
		workspace=args.workspace,
		buffer_bytes=args.buffer_bytes,
		rank_period=args.rank_period,
		max_build_attempts=args.max_attempts,
		keep_workspace=1 if args.keep_workspace else None,
	)
	keys = open_keys(args.input, args.format)
	start = time.perf_counter()

	if args.values:
		if args.algorithm == "hem":
			throw("HEM builds minimal perfect hash functions only; drop --values")
		values = read_values(args.values)
		sigma = args.sigma or (int(np.max(values)) + 1 if len(values) else 1)
		structure = build_function(keys, values, sigma, settings=settings, seed=args.seed, algorithm=args.algorithm)
	else:
		builder = scanphf.get_attr(structure_builders[args.algorithm])
		structure = builder(keys, settings=settings, seed=args.seed)

	Path(args.output).write_bytes(structure.serialize())
	record = {
		"output": str(args.output),
		"wall_seconds": round(time.perf_counter() - start, 6),
		**structure.build_stats.as_dict(),
	}
	emit(record)
	if args.stats:
		with open(args.stats, "a") as f:
			f.write(json.dumps(record) + "\n")
	return EXIT_OK


def cmd_lookup(args):
	structure = load_structure(args.structure)
	for index in query(structure, open_keys(args.input, args.format)):
		sys.stdout.write(f"{index}\n")
	sys.stdout.flush()
	return EXIT_OK


def _verify_manifest(path):
	manifest = LayerManifest.read(path)
	chunk = max(manifest.layer_sizes, default=1)
	layers = list(manifest.iter_layers_reversed(chunk_records=chunk))[::-1]
	ok = manifest.status == PeelStatus.PEELED and sum(map(len, layers)) == manifest.n and is_peeling_order(layers)
	emit({"manifest": str(path), "status": manifest.status.value, "layers": len(layers), "ok": ok})
	return ok


def cmd_verify(args):
	if args.manifest:
		return EXIT_OK if _verify_manifest(args.manifest) else EXIT_VERIFY
	if not (args.structure and args.input):
		throw("verify needs --structure and --input, or --manifest")

	structure = load_structure(args.structure)
	keys = open_keys(args.input, args.format)
	if isinstance(structure, StaticFunction):
		if not args.values:
			throw("Verifying a static function needs --values")
		expected = read_values(args.values)
		got = np.fromiter(query(structure, keys), dtype=np.uint64)
		ok = len(got) == len(expected) and bool(np.all(got == np.asarray(expected, dtype=np.uint64) % structure.sigma))
	else:
		ok = is_bijective(structure, keys)

	emit({"structure": str(args.structure), "n": structure.n, "ok": ok})
	if not ok:
		scanphf.logger("cli").error(f"Verification of {args.structure} failed")
		return EXIT_VERIFY
	return EXIT_OK


def cmd_bench(args):
	keys = open_keys(args.queries, args.format)
	for path in args.structures:
		report = measure_lookups(load_structure(path), keys, args.batch_size, args.repetitions)
		emit({"structure": str(path), **report})
	return EXIT_OK


def cmd_stats(args):
	path = Path(args.path)
	if path.is_dir():
		path = path / "manifest.json"
	if path.suffix == ".json":
		manifest = LayerManifest.read(path)
		emit({**manifest.to_dict(), "layer_sizes": manifest.layer_sizes})
		return EXIT_OK

	structure = load_structure(path)
	record = {
		"structure": type(structure).__name__,
		"n": structure.n,
		"seed": structure.seed,
		"bytes": len(structure.serialize()),
		"bits_per_key": structure.bits_per_key,
	}
	if hasattr(structure, "b"):
		record.update(buckets=structure.bucket_count, offsets_bits=structure.offsets_bits)
	else:
		record["m"] = structure.m
	emit(record)
	return EXIT_OK


def cmd_sweep(args):
	spec = SweepSpec(
		counts=args.counts,
		algorithms=args.algorithms,
		repetitions=args.repetitions,
		memory_budget=args.memory_budget,
		key_seed=args.key_seed,
		build_seed=args.seed,
	)
	rows = run_sweep(spec, args.output)
	emit({"output": str(args.output), "rows": len(rows), "failed": sum(row["status"] != "ok" for row in rows)})
	return EXIT_OK


def get_parser():
	parser = CommandParser(prog="scanphf", description="External-memory MWHC and MPHF construction")
	parser.add_argument("--version", action="version", version=scanphf.__version__)
	commands = parser.add_subparsers(dest="command", required=True)

	def keys_args(p, required=True):
		p.add_argument("--input", required=required, type=Path, help="Key file")
		p.add_argument("--format", choices=sorted(key_formats), default="lines")

	build = commands.add_parser("build", help="Build a structure from a key file")
	keys_args(build)
	build.add_argument("--output", required=True, type=Path)
	build.add_argument("--algorithm", choices=sorted(structure_builders), default="mwhc-external")
	build.add_argument("--gamma", type=float)
	build.add_argument("--memory-budget", type=int)
	build.add_argument("--workspace")
	build.add_argument(
		"--keep-workspace", action="store_true", help="Keep the run directory for stats and verify --manifest"
	)
	build.add_argument("--buffer-bytes", type=int, help="Distribution buffer size T")
	build.add_argument("--seed", type=int, help="Fixed first seed, for reproducible builds")
	build.add_argument("--rank-period", type=int)
	build.add_argument("--max-attempts", type=int, help="Seeds tried before giving up")
	build.add_argument("--values", type=Path, help="Build a static function storing these values")
	build.add_argument("--sigma", type=int, help="Value range; max value + 1 when omitted")
	build.add_argument("--stats", type=Path, help="Append the stats record to this JSON-lines file")
	build.set_defaults(handler=cmd_build)

	lookup = commands.add_parser("lookup", help="Print the index of every key")
	lookup.add_argument("--structure", required=True, type=Path)
	keys_args(lookup)
	lookup.set_defaults(handler=cmd_lookup)

	verify = commands.add_parser("verify", help="Check a structure against its key file")
	verify.add_argument("--structure", type=Path)
	keys_args(verify, required=False)
	verify.add_argument("--values", type=Path)
	verify.add_argument("--manifest", type=Path, help="Check the peeling order of a kept run directory instead")
	verify.set_defaults(handler=cmd_verify)

	bench = commands.add_parser("bench", help="Batched lookup latency")
	bench.add_argument("structures", nargs="+", type=Path)
	bench.add_argument("--queries", required=True, type=Path)
	bench.add_argument("--format", choices=sorted(key_formats), default="lines")
	bench.add_argument("--batch-size", type=int, default=1 << 16)
	bench.add_argument("--repetitions", type=int, default=10)
	bench.set_defaults(handler=cmd_bench)

	stats = commands.add_parser("stats", help="Statistics of a structure or a peeling manifest")
	stats.add_argument("path")
	stats.set_defaults(handler=cmd_stats)

	sweep = commands.add_parser("sweep", help="Construction sweep over synthetic keys, written as CSV")
	sweep.add_argument("--counts", required=True, type=int, nargs="+")
	sweep.add_argument("--algorithms", nargs="+", choices=sorted(structure_builders), default=sorted(structure_builders))
	sweep.add_argument("--repetitions", type=int, default=1)
	sweep.add_argument("--memory-budget", type=int)
	sweep.add_argument("--key-seed", type=int, default=0)
	sweep.add_argument("--seed", type=int)
	sweep.add_argument("--output", required=True, type=Path)
	sweep.set_defaults(handler=cmd_sweep)
	return parser


def main(argv=None):
	try:
		args = get_parser().parse_args(argv)
		return args.handler(args)
	except ValidationError as e:
		scanphf.log_error(f"Usage error: {e}", "cli")
		return EXIT_USAGE
	except (UnpeelableError, SortPlanError, MemoryBudgetExceeded) as e:
		scanphf.log_error(f"Build failed: {e}", "cli")
		return EXIT_BUILD
	except (OSError, FormatError, CorruptStreamError) as e:
		scanphf.log_error(f"I/O error: {e}", "cli")
		return EXIT_IO


if __name__ == "__main__":
	sys.exit(main())

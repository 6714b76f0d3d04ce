"""
Benchmark Harness
Key-count sweeps over the construction algorithms, written as CSV, plus
batched lookup timing.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

import scanphf
from scanphf import throw
from scanphf.config.settings import get_settings
from scanphf.exceptions import MemoryBudgetExceeded, ScanphfError
from scanphf.hooks import structure_builders
from scanphf.scanphf.assign_rank import batches
from scanphf.scanphf.hashing import vertex_count
from scanphf.scanphf.inmem_peeler import working_set_bytes

CSV_FIELDS = [
	"algorithm",
	"n",
	"repetition",
	"status",
	"wall_seconds",
	"peak_temp_bytes",
	"bits_per_key",
	"rounds",
	"retries",
]

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(x):
	# splitmix64 finalizer, a bijection on 64-bit words
	x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
	x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
	return x ^ (x >> np.uint64(31))


class SyntheticKeys:
	"""
	`count` distinct 16-character hex keys, regenerated on every iteration

	Key i is the hex form of a bijective mix of seed + i, so keys never
	collide and the same seed always gives the same keys.
	"""

	def __init__(self, count, seed=0, batch_size=1 << 16):
		self.count = count
		self.seed = seed
		self.batch_size = batch_size

	def __len__(self):
		return self.count

	def __iter__(self):
		with np.errstate(over="ignore"):
			for start in range(0, self.count, self.batch_size):
				stop = min(start + self.batch_size, self.count)
				counter = np.arange(start, stop, dtype=np.uint64) + np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
				for word in _mix(counter & _MASK).tolist():
					yield format(word, "016x").encode()


@dataclass
class SweepSpec:
	"""
	Args:
		counts (list): Key counts, ascending
		algorithms (list): Names registered in hooks.structure_builders
		repetitions (int): Builds per cell
		memory_budget (int): Overrides the configured budget
		key_seed (int): Synthetic key generator seed
		build_seed (int): First build seed; random when None
	"""

	counts: list
	algorithms: list = field(default_factory=lambda: ["mwhc-external", "mwhc-inmemory", "hem"])
	repetitions: int = 1
	memory_budget: int | None = None
	key_seed: int = 0
	build_seed: int | None = None

	def __post_init__(self):
		if list(self.counts) != sorted(self.counts):
			throw("Sweep key counts must be sorted ascending")
		unknown = set(self.algorithms) - set(structure_builders)
		if unknown:
			throw(f"Unknown algorithms: {', '.join(sorted(unknown))}")
		if self.repetitions < 1:
			throw("Repetitions must be at least 1")


def run_cell(algorithm, keys, settings, seed=None):
	"""Build once; returns a CSV row (without repetition)"""
	builder = scanphf.get_attr(structure_builders[algorithm])
	row = {"algorithm": algorithm, "n": len(keys), "status": "ok"}

	if algorithm == "mwhc-inmemory":
		needed = working_set_bytes(len(keys), vertex_count(len(keys), settings.gamma))
		if needed > settings.memory_budget:
			return {**row, "status": "over-budget"}

	start = time.perf_counter()
	try:
		structure = builder(keys, settings=settings, seed=seed)
	except MemoryBudgetExceeded:
		scanphf.log_error(f"{algorithm} over budget at n={len(keys)}", "bench_harness")
		return {**row, "status": "over-budget", "wall_seconds": time.perf_counter() - start}
	except ScanphfError as e:
		scanphf.log_error(f"{algorithm} failed at n={len(keys)}: {e}", "bench_harness")
		return {**row, "status": type(e).__name__, "wall_seconds": time.perf_counter() - start}

	stats = structure.build_stats
	return {
		**row,
		"wall_seconds": round(time.perf_counter() - start, 6),
		"peak_temp_bytes": stats.peak_temp_bytes,
		"bits_per_key": round(stats.bits_per_key, 6),
		"rounds": stats.rounds,
		"retries": stats.attempts - 1,
	}


def run_sweep(spec, output, settings=None):
	"""
	Run every (count, algorithm, repetition) cell and write one CSV row each

	Failed cells are recorded with their status and the sweep continues.

	Args:
		spec (SweepSpec): Grid to run
		output (str | Path): CSV path
		settings (ScanphfSettings): Base settings

	Returns:
		list: Row dicts as written
	"""
	settings = settings or get_settings()
	if spec.memory_budget:
		settings = settings.copy(memory_budget=spec.memory_budget)

	rows = []
	with open(output, "w", newline="") as f:
		writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, restval="")
		writer.writeheader()
		for n in spec.counts:
			keys = SyntheticKeys(n, spec.key_seed)
			for algorithm in spec.algorithms:
				for repetition in range(spec.repetitions):
					row = {**run_cell(algorithm, keys, settings, spec.build_seed), "repetition": repetition}
					writer.writerow(row)
					f.flush()
					rows.append(row)
					scanphf.logger("bench_harness").info(
						f"{algorithm} n={n} rep={repetition}: {row['status']} in {row.get('wall_seconds', 0)}s"
					)
	return rows


def measure_lookups(structure, keys, batch_size=1 << 16, repetitions=10):
	"""
	Mean lookup latency per batch of keys

	Every batch is timed `repetitions` times; the report gives each batch's
	mean, the global mean and the relative standard deviation across batches.

	Returns:
		dict: JSON-ready report
	"""
	batch_means = []
	for batch in batches(keys, batch_size):
		timings = []
		for _ in range(repetitions):
			start = time.perf_counter_ns()
			for key in batch:
				structure.lookup(key)
			timings.append((time.perf_counter_ns() - start) / len(batch))
		batch_means.append(float(np.mean(timings)))

	mean = float(np.mean(batch_means)) if batch_means else 0.0
	rsd = float(np.std(batch_means) / mean) if batch_means and mean else 0.0
	return {
		"batches": len(batch_means),
		"batch_size": batch_size,
		"repetitions": repetitions,
		"mean_ns": mean,
		"rsd": rsd,
		"batch_means_ns": batch_means,
	}

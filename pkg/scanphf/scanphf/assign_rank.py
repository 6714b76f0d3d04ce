"""
Assignment and Ranking
MWHC assignment over peeled layers, the 2-bit value array of the MPHF and
its rank directory, generic static functions, and the build loop that ties
hashing, peeling and assignment together.
"""

import secrets
import shutil
import struct
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from itertools import islice
from pathlib import Path

import numpy as np

import scanphf
from scanphf import throw
from scanphf.config.settings import PEELING_THRESHOLD, get_settings
from scanphf.exceptions import CorruptStreamError, DuplicateKeysError, FormatError, UnpeelableError
from scanphf.scanphf.ext_peeler import peel_external, remove_workspace
from scanphf.scanphf.extsort import IOCounters
from scanphf.scanphf.hashing import (
	MASK64,
	TripartiteEdgeHasher,
	hash_edges,
	hash_signature,
	next_seed,
	vertex_count,
)
from scanphf.scanphf.hypergraph import R, edge_array
from scanphf.scanphf.inmem_peeler import PeelStatus, peel_in_memory

MPHF_MAGIC = b"EMPH"
FUNCTION_MAGIC = b"ESTF"
FORMAT_VERSION = 1
MPHF_HEADER = struct.Struct("<4sHHQQQII")
FUNCTION_HEADER = struct.Struct("<4sHHQQQQII")

ALGORITHMS = ("mwhc-external", "mwhc-inmemory")
HASH_BATCH = 1 << 16

_ONE = np.uint64(1)
_PAIRS = np.uint64(0x5555555555555555)
_S33 = np.uint64(0x3333333333333333)
_S0F = np.uint64(0x0F0F0F0F0F0F0F0F)
_S01 = np.uint64(0x0101010101010101)


# Broadword counting


def rank_nonzero_pairs(word):
	"""Number of non-zero 2-bit fields in a 64-bit word"""
	t = (word | (word >> 1)) & 0x5555555555555555
	return t.bit_count()


def popcount64(words):
	"""Vectorised population count of uint64 words"""
	x = np.array(words, dtype=np.uint64)
	x = x - ((x >> _ONE) & _PAIRS)
	x = (x & _S33) + ((x >> np.uint64(2)) & _S33)
	x = (x + (x >> np.uint64(4))) & _S0F
	return (x * _S01) >> np.uint64(56)


def count_nonzero_pairs(words):
	"""rank_nonzero_pairs applied to every word of an array"""
	words = np.asarray(words, dtype=np.uint64)
	return popcount64((words | (words >> _ONE)) & _PAIRS)


# Packed values


@dataclass
class ValueArray:
	"""
	m entries of `width` bits, entry i at bit i * width, least significant bit first

	Args:
		m (int): Entry count
		width (int): Bits per entry, 0 to 64
		words (np.ndarray): uint64 storage
	"""

	m: int
	width: int
	words: np.ndarray

	@classmethod
	def from_entries(cls, entries, width):
		entries = np.asarray(entries, dtype=np.uint64)
		nwords = -(-len(entries) * width // 64)
		if width == 0:
			return cls(len(entries), 0, np.zeros(0, dtype=np.uint64))
		bits = ((entries[:, None] >> np.arange(width, dtype=np.uint64)) & _ONE).astype(np.uint8).ravel()
		bits = np.concatenate((bits, np.zeros(nwords * 64 - len(bits), dtype=np.uint8)))
		words = np.packbits(bits, bitorder="little").view("<u8").astype(np.uint64)
		return cls(len(entries), width, words)

	@property
	def nbytes(self):
		return -(-self.m * self.width // 8)

	def to_bytes(self):
		return self.words.astype("<u8").tobytes()[: self.nbytes]

	@classmethod
	def from_bytes(cls, data, m, width):
		data = bytes(data)
		data += bytes(-len(data) % 8)
		return cls(m, width, np.frombuffer(data, dtype="<u8").astype(np.uint64))

	def get(self, i):
		if self.width == 0:
			return 0
		offset = i * self.width
		word, shift = divmod(offset, 64)
		value = int(self.words[word]) >> shift
		if shift + self.width > 64:
			value |= int(self.words[word + 1]) << (64 - shift)
		return value & ((1 << self.width) - 1)

	def get_many(self, idx):
		idx = np.asarray(idx, dtype=np.uint64)
		if self.width == 0:
			return np.zeros(idx.shape, dtype=np.uint64)
		words = np.append(self.words, np.uint64(0))
		offset = idx * np.uint64(self.width)
		word = (offset >> np.uint64(6)).astype(np.int64)
		shift = offset & np.uint64(63)
		value = words[word] >> shift
		spans = (shift + np.uint64(self.width)) > np.uint64(64)
		if np.any(spans):
			value[spans] |= words[word[spans] + 1] << (np.uint64(64) - shift[spans])
		if self.width < 64:
			value &= (_ONE << np.uint64(self.width)) - _ONE
		return value

	def entries(self):
		return self.get_many(np.arange(self.m))


@dataclass
class RankDirectory:
	"""
	Cumulative non-zero entry counts of a 2-bit ValueArray, sampled every `period` entries

	Args:
		period (int): Entries per sample, a multiple of 32
		samples (np.ndarray): uint64, samples[j] counts non-zero entries before entry j * period
	"""

	period: int
	samples: np.ndarray

	@classmethod
	def build(cls, values, period):
		if period <= 0 or period % 32:
			throw("Rank sample period must be a positive multiple of 32")
		counts = count_nonzero_pairs(values.words).astype(np.uint64)
		cumulative = np.concatenate(([0], np.cumsum(counts, dtype=np.uint64))).astype(np.uint64)
		return cls(period, cumulative[np.arange(0, len(values.words), period // 32)])

	@property
	def words_per_sample(self):
		return self.period // 32

	@property
	def nbytes(self):
		return 8 * len(self.samples)

	def rank(self, words, position):
		"""Non-zero entries strictly before `position`"""
		word, entry = divmod(position, 32)
		block = word // self.words_per_sample
		r = int(self.samples[block])
		for k in range(block * self.words_per_sample, word):
			r += rank_nonzero_pairs(int(words[k]))
		return r + rank_nonzero_pairs(int(words[word]) & ((1 << (2 * entry)) - 1))

	def rank_many(self, words, positions):
		positions = np.asarray(positions, dtype=np.uint64)
		word = (positions >> np.uint64(5)).astype(np.int64)
		block = word // self.words_per_sample
		r = self.samples[block].astype(np.uint64)
		for k in range(self.words_per_sample - 1):
			idx = block * self.words_per_sample + k
			inside = idx < word
			r[inside] += count_nonzero_pairs(words[idx[inside]])
		shift = (positions & np.uint64(31)) * np.uint64(2)
		return r + count_nonzero_pairs(words[word] & ((_ONE << shift) - _ONE))


# Assignment


def assign_mphf(layers, m):
	"""
	Assign the 2-bit values of an MPHF

	Layers are processed last-peeled first. An edge stores, at its free
	vertex v0, the residue making the sum over its three vertices equal to
	the part index of v0, written as 3 when the residue is 0; unused
	vertices keep 0.

	Args:
		layers: LayerManifest or PeelResult of a Peeled run
		m (int): Vertex count

	Returns:
		ValueArray: width 2
	"""
	_require_peeled(layers)
	u = np.zeros(m, dtype=np.uint8)
	p = m // R
	for chunk in layers.iter_layers_reversed():
		v0 = chunk["v0"].astype(np.int64)
		_check_free(v0, u[v0] != 0)
		i = v0 // p
		residue = (i - u[chunk["v1"].astype(np.int64)] - u[chunk["v2"].astype(np.int64)]) % 3
		u[v0] = np.where(residue == 0, 3, residue)
	return ValueArray.from_entries(u, 2)


def assign_function(layers, m, values, sigma):
	"""
	Assign u so that (u[v0] + u[v1] + u[v2]) mod sigma = f(key) for every key

	Args:
		layers: LayerManifest or PeelResult of a Peeled run over labeled edges
		m (int): Vertex count
		values: Array-like of f-values indexed by label (np.memmap works)
		sigma (int): Value range, 1 <= sigma <= 2**63

	Returns:
		ValueArray: width ceil(log2 sigma)
	"""
	if sigma < 1 or sigma > 1 << 63:
		throw(f"Value range must be in [1, 2**63], got {sigma}")
	values = np.asarray(values)
	_require_peeled(layers)
	width = (sigma - 1).bit_length()
	u = np.zeros(m, dtype=np.uint64)
	assigned = np.zeros(m, dtype=bool)
	s = np.uint64(sigma)
	for chunk in layers.iter_layers_reversed():
		labels = chunk["label"].astype(np.int64)
		if len(labels) and int(labels.max()) >= len(values):
			throw(f"No f-value for label {int(labels.max())}")
		f = np.asarray(values[labels], dtype=np.uint64)
		if np.any(f >= s):
			throw(f"f-values must be below {sigma}")
		v0 = chunk["v0"].astype(np.int64)
		_check_free(v0, assigned[v0])
		assigned[v0] = True
		partial = (f + (s - u[chunk["v1"].astype(np.int64)])) % s
		u[v0] = (partial + (s - u[chunk["v2"].astype(np.int64)])) % s
	return ValueArray.from_entries(u, width)


def _check_free(v0, taken):
	"""Every free vertex is written once, by one edge"""
	if np.any(taken) or len(np.unique(v0)) != len(v0):
		throw("Free vertex assigned twice; the layers are not a peeling order", CorruptStreamError)


def _require_peeled(layers):
	if layers.status != PeelStatus.PEELED:
		throw("Assignment needs a fully peeled hypergraph", UnpeelableError)


# Structures


@dataclass
class BuildStats:
	"""Construction report, one JSON line per build in the CLI"""

	algorithm: str
	n: int
	m: int
	seed: int
	attempts: int = 1
	rounds: int = 0
	layer_sizes: list = field(default_factory=list)
	peak_temp_bytes: int = 0
	workspace: str = ""
	counters: dict = field(default_factory=dict)
	phase_seconds: dict = field(default_factory=dict)
	bits_per_key: float = 0.0

	def as_dict(self):
		return asdict(self)


@dataclass
class MphfStructure:
	seed: int
	n: int
	m: int
	values: ValueArray
	rank: RankDirectory
	build_stats: BuildStats = field(default=None, repr=False, compare=False)

	@property
	def hasher(self):
		return TripartiteEdgeHasher(self.seed, self.m)

	def lookup(self, key):
		"""
		Index of `key` in [0, n)

		Keys outside the construction set get an arbitrary index in range.
		"""
		if self.n == 0:
			return 0
		vertices = self.hasher.vertices(key)
		i = sum(self.values.get(v) for v in vertices) % 3
		return min(self.rank.rank(self.values.words, vertices[i]), self.n - 1)

	def lookup_many(self, keys):
		rows = hash_edges(self.hasher, keys)
		if not len(rows) or self.n == 0:
			return np.zeros(len(rows), dtype=np.int64)
		i = (self.values.get_many(rows.ravel()).reshape(-1, R).sum(axis=1) % np.uint64(3)).astype(np.int64)
		free = rows[np.arange(len(rows)), i]
		return np.minimum(self.rank.rank_many(self.values.words, free), self.n - 1).astype(np.int64)

	def serialize(self):
		header = MPHF_HEADER.pack(MPHF_MAGIC, FORMAT_VERSION, 0, self.seed, self.n, self.m, self.rank.period, 0)
		return header + self.values.to_bytes() + self.rank.samples.astype("<u8").tobytes()

	@classmethod
	def deserialize(cls, data):
		magic, version, _, seed, n, m, period, _ = _unpack_header(MPHF_HEADER, data, MPHF_MAGIC)
		check_rank_period(period)
		if n > m:
			throw(f"MPHF header claims {n} keys over only {m} vertices", FormatError)
		values_bytes = -(-2 * m // 8)
		nwords = -(-2 * m // 64)
		nsamples = -(-nwords // (period // 32))
		expected = MPHF_HEADER.size + values_bytes + 8 * nsamples
		if len(data) != expected:
			throw(f"MPHF data is {len(data)} bytes, expected {expected}", FormatError)
		values = ValueArray.from_bytes(data[MPHF_HEADER.size : MPHF_HEADER.size + values_bytes], m, 2)
		samples = np.frombuffer(bytes(data[MPHF_HEADER.size + values_bytes :]), dtype="<u8").astype(np.uint64)
		return cls(seed, n, m, values, RankDirectory(period, samples))

	@property
	def bits_per_key(self):
		return 8 * len(self.serialize()) / max(self.n, 1)


@dataclass
class StaticFunction:
	seed: int
	n: int
	m: int
	sigma: int
	values: ValueArray
	build_stats: BuildStats = field(default=None, repr=False, compare=False)

	@property
	def hasher(self):
		return TripartiteEdgeHasher(self.seed, self.m)

	def evaluate(self, key):
		return sum(self.values.get(v) for v in self.hasher.vertices(key)) % self.sigma

	def evaluate_many(self, keys):
		rows = hash_edges(self.hasher, keys)
		entries = self.values.get_many(rows.ravel()).reshape(-1, R)
		s = np.uint64(self.sigma)
		return (((entries[:, 0] + entries[:, 1]) % s) + entries[:, 2]) % s

	def serialize(self):
		header = FUNCTION_HEADER.pack(
			FUNCTION_MAGIC, FORMAT_VERSION, 0, self.seed, self.n, self.m, self.sigma, self.values.width, 0
		)
		return header + self.values.to_bytes()

	@classmethod
	def deserialize(cls, data):
		_, _, _, seed, n, m, sigma, width, _ = _unpack_header(FUNCTION_HEADER, data, FUNCTION_MAGIC)
		if sigma < 1 or width != (sigma - 1).bit_length():
			throw(f"Function header has value width {width} for range {sigma}", FormatError)
		values_bytes = -(-m * width // 8)
		if len(data) != FUNCTION_HEADER.size + values_bytes:
			throw(f"Function data is {len(data)} bytes, expected {FUNCTION_HEADER.size + values_bytes}", FormatError)
		return cls(seed, n, m, sigma, ValueArray.from_bytes(data[FUNCTION_HEADER.size :], m, width))

	@property
	def bits_per_key(self):
		return 8 * len(self.serialize()) / max(self.n, 1)


def check_rank_period(period):
	if period <= 0 or period % 32:
		throw(f"Rank sample period {period} is not a positive multiple of 32", FormatError)


def _unpack_header(header, data, magic):
	if len(data) < header.size:
		throw(f"Structure truncated: {len(data)} bytes", FormatError)
	fields = header.unpack(bytes(data[: header.size]))
	if fields[0] != magic:
		throw(f"Bad magic {fields[0]!r}, expected {magic!r}", FormatError)
	if fields[1] != FORMAT_VERSION:
		throw(f"Unsupported format version {fields[1]}", FormatError)
	return fields


# Build orchestration


@contextmanager
def phase(stats, name):
	start = time.perf_counter()
	try:
		yield
	finally:
		stats.phase_seconds[name] = stats.phase_seconds.get(name, 0.0) + time.perf_counter() - start


def batches(keys, size=HASH_BATCH):
	iterator = iter(keys)
	while batch := list(islice(iterator, size)):
		yield batch


def count_keys(keys):
	return len(keys) if hasattr(keys, "__len__") else sum(1 for _ in keys)


def _hashed_chunks(keys, hasher, labeled):
	ordinal = 0
	for batch in batches(keys):
		labels = np.arange(ordinal, ordinal + len(batch), dtype=np.uint64) if labeled else None
		ordinal += len(batch)
		yield edge_array(hash_edges(hasher, batch), labels)


def find_duplicate(keys):
	"""
	First key whose 96-bit signature repeats, or None

	Signature equality stands in for key equality; a false positive needs a
	96-bit collision.
	"""
	hi, lo, kept = [], [], []
	for batch in batches(keys):
		for key in batch:
			s = hash_signature(0, key)
			hi.append(s >> 64)
			lo.append(s & MASK64)
			kept.append(key)
	if len(kept) < 2:
		return None
	hi = np.asarray(hi, dtype=np.uint64)
	lo = np.asarray(lo, dtype=np.uint64)
	order = np.lexsort((lo, hi))
	same = (hi[order][1:] == hi[order][:-1]) & (lo[order][1:] == lo[order][:-1])
	if not np.any(same):
		return None
	return kept[int(order[int(np.argmax(same))])]


def _peel_keys(keys, n, m, settings, seed, algorithm, label_bits, stats, counters):
	"""Hash and peel with fresh seeds until the hypergraph peels; returns the layers"""
	log = scanphf.logger("assign_rank")
	last_core = 0
	kept = None
	for attempt in range(1, settings.max_build_attempts + 1):
		hasher = TripartiteEdgeHasher(seed, m)
		stats.seed, stats.attempts = seed, attempt

		if algorithm == "mwhc-inmemory":
			with phase(stats, "hashing"):
				chunks = list(_hashed_chunks(keys, hasher, label_bits > 0))
				edges = np.concatenate(chunks) if chunks else edge_array(np.zeros((0, R), dtype=np.uint64))
			with phase(stats, "peeling"):
				layers = peel_in_memory(edges, m, settings.memory_budget)
		else:
			workspace = tempfile.mkdtemp(prefix="scanphf-", dir=settings.workspace or None)
			with phase(stats, "peeling"):
				layers = peel_external(
					_hashed_chunks(keys, hasher, label_bits > 0), m, settings, workspace, label_bits, counters
				)
			stats.peak_temp_bytes = max(stats.peak_temp_bytes, layers.peak_temp_bytes)

		stats.rounds = layers.rounds if isinstance(layers.rounds, int) else len(layers.rounds)
		if layers.status == PeelStatus.PEELED:
			stats.layer_sizes = list(layers.layer_sizes)
			return layers

		last_core = layers.core_size
		if algorithm != "mwhc-inmemory":
			if settings.keep_workspace:
				# Only the most recent residual graph stays on disk
				if kept:
					shutil.rmtree(kept, ignore_errors=True)
				kept = workspace
				log.info(f"Residual graph of attempt {attempt} kept in {workspace}")
			else:
				shutil.rmtree(workspace, ignore_errors=True)
		# Duplicate keys never peel under any seed
		if attempt == 1 and (duplicate := find_duplicate(keys)) is not None:
			throw(f"The input contains duplicate keys (e.g. {duplicate!r})", DuplicateKeysError)
		log.warning(f"Attempt {attempt} with seed {seed:#x} left a 2-core of {last_core} edges, reseeding")
		seed = next_seed(seed)

	throw(
		f"Build failed after {settings.max_build_attempts} attempts (last 2-core: {last_core} edges). "
		f"Check for duplicate keys or raise gamma above {PEELING_THRESHOLD} (n={n}, m={m})"
		+ (f". Residual graph kept in {kept}" if kept else ""),
		UnpeelableError,
	)


def _release(layers, settings, stats):
	if not getattr(layers, "edges_path", ""):
		return
	if settings.keep_workspace:
		stats.workspace = str(Path(layers.edges_path).parent)
		scanphf.logger("assign_rank").info(f"Run directory kept in {stats.workspace}")
	else:
		remove_workspace(layers)


def build_mphf(keys, gamma=None, settings=None, seed=None, algorithm="mwhc-external"):
	"""
	Build a minimal perfect hash function

	Args:
		keys: Re-iterable collection of distinct byte-string keys
		gamma (float): Vertices per key; defaults to the configured gamma
		settings (ScanphfSettings): Defaults to the cached settings
		seed (int): First seed; random when omitted
		algorithm (str): "mwhc-external" or "mwhc-inmemory"

	Returns:
		MphfStructure: With `build_stats` attached
	"""
	settings = settings or get_settings()
	if gamma is not None and gamma != settings.gamma:
		settings = settings.copy(gamma=gamma)
	if algorithm not in ALGORITHMS:
		throw(f"Unknown algorithm {algorithm}; expected one of {', '.join(ALGORITHMS)}")

	n = count_keys(keys)
	m = vertex_count(n, settings.gamma)
	seed = secrets.randbits(64) if seed is None else seed & MASK64
	counters = IOCounters()
	stats = BuildStats(algorithm=algorithm, n=n, m=m, seed=seed)

	layers = _peel_keys(keys, n, m, settings, seed, algorithm, 0, stats, counters)
	try:
		with phase(stats, "assignment"):
			values = assign_mphf(layers, m)
			rank = RankDirectory.build(values, settings.rank_period)
	finally:
		_release(layers, settings, stats)

	structure = MphfStructure(stats.seed, n, m, values, rank)
	stats.counters = counters.snapshot()
	stats.bits_per_key = structure.bits_per_key
	structure.build_stats = stats
	scanphf.logger("assign_rank").info(
		f"Built MPHF over {n} keys: {stats.bits_per_key:.3f} bits/key, {stats.attempts} attempt(s), "
		f"{stats.rounds} rounds"
	)
	return structure


def build_function(keys, values, sigma, gamma=None, settings=None, seed=None, algorithm="mwhc-external"):
	"""
	Build a static function storing values[i] for the i-th key

	Args:
		keys: Re-iterable collection of distinct byte-string keys
		values: Array-like of f-values, values[i] < sigma
		sigma (int): Value range

	Returns:
		StaticFunction: With `build_stats` attached
	"""
	settings = settings or get_settings()
	if gamma is not None and gamma != settings.gamma:
		settings = settings.copy(gamma=gamma)
	if algorithm not in ALGORITHMS:
		throw(f"Unknown algorithm {algorithm}; expected one of {', '.join(ALGORITHMS)}")

	n = count_keys(keys)
	if len(values) != n:
		throw(f"{n} keys but {len(values)} values")
	m = vertex_count(n, settings.gamma)
	seed = secrets.randbits(64) if seed is None else seed & MASK64
	counters = IOCounters()
	stats = BuildStats(algorithm=algorithm, n=n, m=m, seed=seed)

	label_bits = max(1, (n - 1).bit_length())
	layers = _peel_keys(keys, n, m, settings, seed, algorithm, label_bits, stats, counters)
	try:
		with phase(stats, "assignment"):
			assigned = assign_function(layers, m, values, sigma)
	finally:
		_release(layers, settings, stats)

	function = StaticFunction(stats.seed, n, m, sigma, assigned)
	stats.counters = counters.snapshot()
	stats.bits_per_key = function.bits_per_key
	function.build_stats = stats
	return function


def is_bijective(structure, keys):
	"""True when lookups over `keys` hit every index in [0, len(keys)) exactly once"""
	indices = np.concatenate([structure.lookup_many(batch) for batch in batches(keys)] or [np.zeros(0, dtype=np.int64)])
	if len(indices) != structure.n:
		return False
	return bool(np.all(np.bincount(indices, minlength=structure.n) == 1))

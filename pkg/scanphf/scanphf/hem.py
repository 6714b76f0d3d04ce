"""
HEM
Signature bucketing baseline: keys are reduced to 96-bit signatures, sorted
and split by their top bits into small buckets, each with its own in-memory
MPHF. A first-level offsets array maps buckets to their key and bit
offsets in one concatenated blob.
"""

import math
import secrets
import shutil
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import scanphf
from scanphf import throw
from scanphf.config.settings import get_settings
from scanphf.exceptions import DuplicateKeysError, FormatError, UnpeelableError
from scanphf.scanphf.assign_rank import (
	BuildStats,
	MphfStructure,
	RankDirectory,
	ValueArray,
	assign_mphf,
	batches,
	check_rank_period,
	count_keys,
	phase,
)
from scanphf.scanphf.extsort import IOCounters, SequentialStream, SortConfig, bucket_sort
from scanphf.scanphf.hashing import (
	MASK64,
	SIGNATURE_BITS,
	TripartiteEdgeHasher,
	hash_edges,
	hash_signature,
	next_seed,
	vertex_count,
)
from scanphf.scanphf.hypergraph import edge_array
from scanphf.scanphf.inmem_peeler import PeelStatus, peel_in_memory

HEM_MAGIC = b"EHEM"
HEM_VERSION = 1
HEM_HEADER = struct.Struct("<4sHHQQIId")
SIGNATURE_DTYPE = np.dtype([("hi", "<u8"), ("lo", "<u8")])
SIGNATURE_ATTEMPTS = 4
RESIDUAL_BYTES = SIGNATURE_BITS // 8


def bucket_bits(n, bucket_size):
	"""b such that 2**b buckets hold about `bucket_size` keys each"""
	if n <= bucket_size:
		return 0
	return math.ceil(math.log2(n / bucket_size))


def _words_for(m, period):
	nwords = -(-2 * m // 64)
	return nwords, -(-nwords // (period // 32))


def _residual(signature, b):
	return (signature & ((1 << (SIGNATURE_BITS - b)) - 1)).to_bytes(RESIDUAL_BYTES, "little")


def _build_bucket(residuals, gamma, period, seed, attempts):
	"""In-memory MPHF over one bucket; returns the uint64 words stored in the blob"""
	n = len(residuals)
	m = vertex_count(n, gamma)
	for _ in range(attempts):
		edges = edge_array(hash_edges(TripartiteEdgeHasher(seed, m), residuals))
		layers = peel_in_memory(edges, m)
		if layers.status == PeelStatus.PEELED:
			values = assign_mphf(layers, m)
			rank = RankDirectory.build(values, period)
			return np.concatenate(([np.uint64(seed)], values.words, rank.samples)).astype(np.uint64)
		seed = next_seed(seed)
	throw(f"Bucket of {n} signatures did not peel after {attempts} seeds", UnpeelableError)


@dataclass
class HemStructure:
	"""
	Bucketed MPHF

	Args:
		seed (int): Signature seed
		n (int): Key count
		b (int): Bucket bits, 2**b buckets
		rank_period (int): Rank sample period of every bucket
		gamma (float): Vertices per key inside buckets
		key_offsets (np.ndarray): 2**b + 1 cumulative key counts
		bit_offsets (np.ndarray): 2**b + 1 cumulative blob bit offsets
		blob (np.ndarray): uint64 words; per bucket its seed, values and rank samples
	"""

	seed: int
	n: int
	b: int
	rank_period: int
	gamma: float
	key_offsets: np.ndarray
	bit_offsets: np.ndarray
	blob: np.ndarray
	build_stats: BuildStats = field(default=None, repr=False, compare=False)

	@property
	def bucket_count(self):
		return 1 << self.b

	def bucket_of(self, signature):
		return signature >> (SIGNATURE_BITS - self.b) if self.b else 0

	def bucket_structure(self, bucket):
		"""The MPHF of one bucket, over residual signature bytes"""
		n = int(self.key_offsets[bucket + 1] - self.key_offsets[bucket])
		start = int(self.bit_offsets[bucket]) // 64
		m = vertex_count(n, self.gamma)
		nwords, nsamples = _words_for(m, self.rank_period)
		words = self.blob[start : start + 1 + nwords + nsamples]
		return MphfStructure(
			seed=int(words[0]),
			n=n,
			m=m,
			values=ValueArray(m, 2, words[1 : 1 + nwords]),
			rank=RankDirectory(self.rank_period, words[1 + nwords :]),
		)

	def lookup(self, key):
		"""Global index of `key` in [0, n)"""
		if self.n == 0:
			return 0
		signature = hash_signature(self.seed, key)
		bucket = self.bucket_of(signature)
		base = int(self.key_offsets[bucket])
		if self.key_offsets[bucket + 1] == base:
			return min(base, self.n - 1)
		return base + self.bucket_structure(bucket).lookup(_residual(signature, self.b))

	def lookup_many(self, keys):
		return np.fromiter((self.lookup(key) for key in keys), dtype=np.int64)

	@property
	def offsets_bits(self):
		return 128 * (self.bucket_count + 1)

	def serialize(self):
		header = HEM_HEADER.pack(HEM_MAGIC, HEM_VERSION, 0, self.seed, self.n, self.b, self.rank_period, self.gamma)
		offsets = np.stack((self.key_offsets, self.bit_offsets), axis=1).astype("<u8")
		return header + offsets.tobytes() + self.blob.astype("<u8").tobytes()

	@classmethod
	def deserialize(cls, data):
		if len(data) < HEM_HEADER.size:
			throw(f"HEM data truncated: {len(data)} bytes", FormatError)
		magic, version, _, seed, n, b, period, gamma = HEM_HEADER.unpack(bytes(data[: HEM_HEADER.size]))
		if magic != HEM_MAGIC:
			throw(f"Bad magic {magic!r}, expected {HEM_MAGIC!r}", FormatError)
		if version != HEM_VERSION:
			throw(f"Unsupported HEM version {version}", FormatError)
		check_rank_period(period)
		if b and 1 << (b - 1) >= max(n, 1):
			throw(f"HEM header has {b} bucket bits for only {n} keys", FormatError)
		if not gamma > 1.0:
			throw(f"HEM header has gamma {gamma}", FormatError)

		body = bytes(data[HEM_HEADER.size :])
		offsets_bytes = 16 * ((1 << b) + 1)
		if len(body) < offsets_bytes:
			throw("HEM offsets truncated", FormatError)
		offsets = np.frombuffer(body[:offsets_bytes], dtype="<u8").astype(np.uint64).reshape(-1, 2)
		blob_words = int(offsets[-1, 1]) // 64
		if len(body) != offsets_bytes + 8 * blob_words:
			throw(f"HEM blob is {len(body) - offsets_bytes} bytes, expected {8 * blob_words}", FormatError)
		blob = np.frombuffer(body[offsets_bytes:], dtype="<u8").astype(np.uint64)
		return cls(seed, n, b, period, gamma, offsets[:, 0].copy(), offsets[:, 1].copy(), blob)

	@property
	def bits_per_key(self):
		return 8 * len(self.serialize()) / max(self.n, 1)


def _sorted_signatures(keys, seed, workspace, sort_cfg):
	"""Signature stream sorted by value; None when two keys share a signature"""
	stream = SequentialStream.create(workspace / "signatures.bin", SIGNATURE_DTYPE, counters=sort_cfg.counters)
	for batch in batches(keys):
		records = np.zeros(len(batch), dtype=SIGNATURE_DTYPE)
		signatures = [hash_signature(seed, key) for key in batch]
		records["hi"] = [s >> 32 for s in signatures]
		records["lo"] = [s & 0xFFFFFFFF for s in signatures]
		stream.append(records)

	bucket_sort(stream, lambda r: r["hi"], 1 << 64, sort_cfg, order=lambda r: (r["lo"], r["hi"]), stable=False)

	previous = None
	for chunk in stream.scan():
		hi, lo = chunk["hi"], chunk["lo"]
		same = (hi[1:] == hi[:-1]) & (lo[1:] == lo[:-1])
		if np.any(same) or (previous is not None and previous == (hi[0], lo[0])):
			stream.unlink()
			return None
		previous = (hi[-1], lo[-1])
	return stream


def build_hem(keys, settings=None, seed=None, bucket_size=None):
	"""
	Build a HEM structure

	Args:
		keys: Re-iterable collection of distinct byte-string keys
		settings (ScanphfSettings): gamma, bucket size, rank period, budgets
		seed (int): Signature seed; random when omitted
		bucket_size (int): Target average bucket size, a power of two

	Returns:
		HemStructure: With `build_stats` attached
	"""
	settings = settings or get_settings()
	bucket_size = bucket_size or settings.hem_bucket_size
	n = count_keys(keys)
	b = bucket_bits(n, bucket_size)
	seed = secrets.randbits(64) if seed is None else seed & MASK64
	counters = IOCounters()
	stats = BuildStats(algorithm="hem", n=n, m=vertex_count(n, settings.gamma), seed=seed)
	sort_cfg = SortConfig.from_settings(settings)
	sort_cfg.counters = counters
	log = scanphf.logger("hem")

	workspace = Path(tempfile.mkdtemp(prefix="scanphf-hem-", dir=settings.workspace or None))
	try:
		with phase(stats, "signatures"):
			for attempt in range(1, SIGNATURE_ATTEMPTS + 1):
				stats.seed, stats.attempts = seed, attempt
				stream = _sorted_signatures(keys, seed, workspace, sort_cfg)
				if stream is not None:
					break
				log.warning(f"Signature collision under seed {seed:#x}, reseeding")
				seed = next_seed(seed)
			else:
				throw(
					f"Signatures collided under {SIGNATURE_ATTEMPTS} seeds: the input contains duplicate keys",
					DuplicateKeysError,
				)

		key_offsets = np.zeros((1 << b) + 1, dtype=np.uint64)
		bit_offsets = np.zeros((1 << b) + 1, dtype=np.uint64)
		blob = []
		blob_words = 0

		with phase(stats, "buckets"):
			bucket_seed = next_seed(seed)
			current, residuals = 0, []

			def flush(bucket, residuals):
				nonlocal blob_words, bucket_seed
				if residuals:
					words = _build_bucket(
						residuals, settings.gamma, settings.hem_rank_period, bucket_seed, settings.max_build_attempts
					)
					blob.append(words)
					blob_words += len(words)
					bucket_seed = next_seed(bucket_seed)
				key_offsets[bucket + 1] = key_offsets[bucket] + len(residuals)
				bit_offsets[bucket + 1] = 64 * blob_words

			for chunk in stream.scan():
				for hi, lo in zip(chunk["hi"].tolist(), chunk["lo"].tolist()):
					signature = (hi << 32) | lo
					bucket = signature >> (SIGNATURE_BITS - b) if b else 0
					while current < bucket:
						flush(current, residuals)
						current, residuals = current + 1, []
					residuals.append(_residual(signature, b))
			while current < (1 << b):
				flush(current, residuals)
				current, residuals = current + 1, []
			stream.close()
	finally:
		shutil.rmtree(workspace, ignore_errors=True)

	structure = HemStructure(
		seed=seed,
		n=n,
		b=b,
		rank_period=settings.hem_rank_period,
		gamma=settings.gamma,
		key_offsets=key_offsets,
		bit_offsets=bit_offsets,
		blob=np.concatenate(blob) if blob else np.zeros(0, dtype=np.uint64),
	)
	stats.counters = counters.snapshot()
	stats.bits_per_key = structure.bits_per_key
	structure.build_stats = stats
	log.info(f"Built HEM over {n} keys in {1 << b} buckets: {stats.bits_per_key:.3f} bits/key")
	return structure

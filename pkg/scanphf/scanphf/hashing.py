"""
Seeded Hashing
Maps byte-string keys to tripartite 3-hypergraph edges and to 96-bit signatures
"""

import math
from dataclasses import dataclass

import numpy as np
import xxhash

from scanphf import throw
from scanphf.scanphf.hypergraph import R, OrientedEdge

MASK64 = (1 << 64) - 1
SIGNATURE_BITS = 96

# Tiny key sets still need a few vertices per part, or two keys are forced onto one edge
MIN_PART_SIZE = 4

# Fixed constants: serialized structures embed only the seed, so these must never change
_LANE_MIX = 0x9E3779B97F4A7C15
_SIGNATURE_SALT = 0xD6E8FEB86659FD93


def _rotl(x, r):
	return ((x << r) & MASK64) | (x >> (64 - r))


def _finalize(x):
	# splitmix64 finalizer
	x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
	x = (x ^ (x >> 27)) * 0x94D049BB133111EB & MASK64
	return x ^ (x >> 31)


def key_lanes(seed, key):
	"""Three well-mixed 64-bit lanes for `key` under `seed`"""
	digest = xxhash.xxh3_128_intdigest(key, seed & MASK64)
	lo = digest & MASK64
	hi = digest >> 64
	return lo, hi, _finalize((lo ^ _rotl(hi, 32)) + _LANE_MIX & MASK64)


def vertex_count(n, gamma):
	"""Vertex count m: ceil(gamma * n) rounded up to a multiple of 3, at least MIN_PART_SIZE per part"""
	m = max(math.ceil(gamma * n), R * MIN_PART_SIZE)
	return m + (-m) % R


@dataclass(frozen=True)
class TripartiteEdgeHasher:
	"""
	Hashes keys to edges with one vertex in each third of [0, m)

	Part i covers [i * m / 3, (i + 1) * m / 3), so the three vertices of an
	edge are always distinct and already in ascending order.
	"""

	seed: int
	m: int

	def __post_init__(self):
		if self.m < R or self.m % R:
			throw(f"Vertex count must be a positive multiple of {R}, got {self.m}")
		object.__setattr__(self, "seed", self.seed & MASK64)

	@property
	def part_size(self):
		return self.m // R

	@property
	def part_boundaries(self):
		p = self.part_size
		return tuple(i * p for i in range(R + 1))

	def vertices(self, key):
		p = self.part_size
		return tuple(((lane * p) >> 64) + i * p for i, lane in enumerate(key_lanes(self.seed, key)))

	def edge(self, key, label=0):
		v0, v1, v2 = self.vertices(key)
		return OrientedEdge(v0, v1, v2, label)


def hash_edge(hasher, key):
	"""
	Hash a key to its canonical (0-th) oriented edge

	Args:
		hasher (TripartiteEdgeHasher): Seeded hasher for m vertices
		key (bytes): Key

	Returns:
		OrientedEdge: (v0, v1, v2) with v_i in part i
	"""
	return hasher.edge(key)


def hash_edges(hasher, keys):
	"""Hash many keys; returns an (n, 3) uint64 array of canonical edges"""
	rows = [hasher.vertices(key) for key in keys]
	if not rows:
		return np.zeros((0, R), dtype=np.uint64)
	return np.asarray(rows, dtype=np.uint64)


def hash_signature(seed, key):
	"""
	96-bit signature of a key, used for HEM bucketing

	Args:
		seed (int): 64-bit seed
		key (bytes): Key

	Returns:
		int: Signature in [0, 2**96)
	"""
	return xxhash.xxh3_128_intdigest(key, (seed ^ _SIGNATURE_SALT) & MASK64) >> (128 - SIGNATURE_BITS)


def next_seed(seed):
	"""Deterministic successor seed for build retries"""
	return _finalize((seed + _LANE_MIX) & MASK64)

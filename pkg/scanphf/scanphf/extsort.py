"""
External Sorting
File-backed sequential streams with I/O instrumentation, and the in-place
bucketed sort: one counting scan, one distribution scan through per-bucket
buffers, one scan sorting each bucket in memory. Input positions ride along
in a side file so that ties keep their input order.
"""

import math
import mmap
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import scanphf
from scanphf import throw
from scanphf.exceptions import SortPlanError, ValidationError

MADVISE_AVAILABLE = hasattr(mmap, "MADV_SEQUENTIAL")

DEFAULT_BUFFER_BYTES = 1 << 20
DEFAULT_MEMORY_BUDGET = 1 << 30


@dataclass
class IOCounters:
	"""Access statistics of one or more streams"""

	bytes_read: int = 0
	bytes_written: int = 0
	scans: int = 0
	rewinds: int = 0
	random_seeks: int = 0
	sort_passes: int = 0
	sort_rewinds: int = 0
	region_switches: int = 0
	bucket_flushes: int = 0
	spills: int = 0
	header_patches: int = 0

	def snapshot(self):
		return asdict(self)


class SequentialStream:
	"""
	A memory-mapped file of fixed-width records accessed in scan order

	Reads happen through forward scans (`scan`, `reader`), writes through
	forward writers (`writer`, `append`). A read pass starting behind data
	already touched counts as a rewind; `read_at` is the only random access
	and counts as a seek.
	"""

	def __init__(self, path, dtype=np.uint8, counters=None):
		self.path = Path(path)
		self.dtype = np.dtype(dtype)
		self.counters = counters if counters is not None else IOCounters()
		self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
		self._map = None
		self._capacity = os.fstat(self._fd).st_size
		self.length = self._capacity // self.dtype.itemsize
		self._high_water = 0
		self._remap()

	@classmethod
	def create(cls, path, dtype=np.uint8, capacity=0, counters=None):
		"""Create (or truncate) a stream file preallocated for `capacity` records"""
		with open(path, "wb") as f:
			f.truncate(capacity * np.dtype(dtype).itemsize)
		stream = cls(path, dtype, counters)
		stream.length = 0
		return stream

	@property
	def itemsize(self):
		return self.dtype.itemsize

	@property
	def capacity(self):
		return self._capacity // self.itemsize

	@property
	def file_bytes(self):
		return self._capacity

	def _remap(self):
		if self._map is not None:
			self._map.close()
			self._map = None
		if self._capacity:
			self._map = mmap.mmap(self._fd, self._capacity)
			if MADVISE_AVAILABLE:
				try:
					self._map.madvise(mmap.MADV_SEQUENTIAL)
				except OSError:
					pass

	def reserve(self, records):
		"""Grow the backing file to hold at least `records` records"""
		needed = records * self.itemsize
		if needed > self._capacity:
			os.ftruncate(self._fd, needed)
			self._capacity = needed
			self._remap()

	def truncate(self, records):
		"""Set the logical length and shrink the file to it"""
		self.length = records
		self._capacity = records * self.itemsize
		if self._map is not None:
			self._map.close()
			self._map = None
		os.ftruncate(self._fd, self._capacity)
		self._remap()

	# Raw record access, used by the cursors below

	def _read(self, start, count):
		if count <= 0:
			return np.zeros(0, dtype=self.dtype)
		offset = start * self.itemsize
		data = np.frombuffer(self._map, dtype=self.dtype, count=count, offset=offset).copy()
		self.counters.bytes_read += data.nbytes
		self._high_water = max(self._high_water, offset + data.nbytes)
		return data

	def _write(self, start, records):
		records = np.ascontiguousarray(records, dtype=self.dtype)
		if not len(records):
			return
		self.reserve(start + len(records))
		offset = start * self.itemsize
		self._map[offset : offset + records.nbytes] = records.tobytes()
		self.counters.bytes_written += records.nbytes
		self._high_water = max(self._high_water, offset + records.nbytes)
		self.length = max(self.length, start + len(records))

	def _open_pass(self, start):
		self.counters.scans += 1
		if start * self.itemsize < self._high_water:
			self.counters.rewinds += 1

	# Sequential access

	def reader(self, start=0, stop=None):
		"""Forward read cursor over [start, stop)"""
		self._open_pass(start)
		return StreamReader(self, start, self.length if stop is None else stop)

	def writer(self, start=0):
		"""Forward write cursor starting at `start`"""
		return StreamWriter(self, start)

	def scan(self, start=0, stop=None, chunk_records=None):
		"""Iterate over [start, stop) in chunks"""
		cursor = self.reader(start, stop)
		chunk_records = chunk_records or max(1, DEFAULT_BUFFER_BYTES // self.itemsize)
		while not cursor.exhausted:
			yield cursor.read(chunk_records)

	def append(self, records):
		self._write(self.length, records)

	def read_at(self, start, count):
		"""Random access read; counted as a seek"""
		self.counters.random_seeks += 1
		return self._read(start, count)

	def patch(self, start, records):
		"""Overwrite a small region already written, such as a header"""
		self.counters.header_patches += 1
		self._write(start, records)

	def read_all(self):
		return np.concatenate(list(self.scan())) if self.length else np.zeros(0, dtype=self.dtype)

	def close(self):
		if self._map is not None:
			self._map.close()
			self._map = None
		if self._fd is not None:
			os.close(self._fd)
			self._fd = None

	def unlink(self):
		self.close()
		self.path.unlink(missing_ok=True)

	def __enter__(self):
		return self

	def __exit__(self, *exc):
		self.close()


class StreamReader:
	"""Forward cursor; `position` is the next record to be read"""

	def __init__(self, stream, start, stop):
		self.stream = stream
		self.position = start
		self.stop = stop

	@property
	def exhausted(self):
		return self.position >= self.stop

	def read(self, count):
		count = min(count, self.stop - self.position)
		data = self.stream._read(self.position, count)
		self.position += len(data)
		return data


class StreamWriter:
	"""Forward write cursor; `position` is the next record to be written"""

	def __init__(self, stream, start):
		self.stream = stream
		self.start = start
		self.position = start

	def write(self, records):
		if isinstance(records, (bytes, bytearray)):
			records = np.frombuffer(records, dtype=self.stream.dtype)
		self.stream._write(self.position, records)
		self.position += len(records)

	@property
	def written(self):
		return self.position - self.start


class TrailingWriter:
	"""
	Byte writer that overwrites a stream behind its own reader

	Output is written only into space the reader has already consumed.
	Bytes that do not fit yet wait in an elastic buffer; if the buffer
	grows past `elastic_limit` the rest of the pass goes to a spill file,
	copied back when the pass is closed.
	"""

	def __init__(self, stream, start, reader, elastic_limit, spill_path):
		self.stream = stream
		self.reader = reader
		self.position = start
		self.elastic_limit = elastic_limit
		self.spill_path = Path(spill_path)
		self._pending = bytearray()
		self._spill = None
		self.spilled_bytes = 0

	def _drain(self):
		room = self.reader.position - self.position
		if room > 0 and self._pending:
			size = min(room, len(self._pending))
			self.stream._write(self.position, np.frombuffer(bytes(self._pending[:size]), dtype=np.uint8))
			self.position += size
			del self._pending[:size]

	def write(self, data):
		if not data:
			return
		if self._spill is not None:
			self._spill.write(data)
			self.spilled_bytes += len(data)
			return

		self._pending += data
		self._drain()
		if len(self._pending) > self.elastic_limit:
			scanphf.logger("extsort").warning(
				f"Trailing writer overflowed its {self.elastic_limit}-byte buffer, spilling to {self.spill_path}"
			)
			self.stream.counters.spills += 1
			self._spill = open(self.spill_path, "wb")
			self._spill.write(self._pending)
			self.spilled_bytes += len(self._pending)
			self._pending = bytearray()

	def close(self):
		"""Flush everything once the reader is done; returns the end position"""
		if self._pending:
			self.stream._write(self.position, np.frombuffer(bytes(self._pending), dtype=np.uint8))
			self.position += len(self._pending)
			self._pending = bytearray()

		if self._spill is not None:
			self._spill.close()
			spill = SequentialStream(self.spill_path, np.uint8, self.stream.counters)
			try:
				for chunk in spill.scan():
					self.stream._write(self.position, chunk)
					self.position += len(chunk)
			finally:
				spill.unlink()
			self._spill = None

		return self.position


@dataclass
class SortConfig:
	"""
	Sorter parameters

	Args:
		bucket_count (int): Fixed k, or None to plan it from the data size
		buffer_bytes (int): Per-bucket distribution buffer T
		memory_budget (int): M, bounding k * T and the largest bucket
		max_retries (int): Doublings of k allowed when a bucket overflows M
	"""

	bucket_count: int | None = None
	buffer_bytes: int = DEFAULT_BUFFER_BYTES
	memory_budget: int = DEFAULT_MEMORY_BUDGET
	max_retries: int = 3
	counters: IOCounters = field(default_factory=IOCounters, repr=False)

	def __post_init__(self):
		if self.buffer_bytes <= 0 or self.memory_budget <= 0:
			throw("Sort buffer and memory budget must be positive")
		if self.bucket_count is not None:
			if self.bucket_count < 1:
				throw("Bucket count must be positive")
			if self.bucket_count * self.buffer_bytes > self.memory_budget:
				throw(
					f"{self.bucket_count} buckets of {self.buffer_bytes}-byte buffers exceed the memory budget"
				)

	@classmethod
	def from_settings(cls, settings):
		return cls(
			buffer_bytes=settings.buffer_bytes,
			memory_budget=settings.memory_budget,
			max_retries=settings.max_sort_retries,
		)


def _floor_pow2(x):
	return 1 << (x.bit_length() - 1)


def plan_buckets(data_bytes, memory_budget, buffer_bytes):
	"""
	Choose the bucket count k for sorting `data_bytes` bytes

	k is the smallest power of two >= 4 S / M, clamped to [1, M / T]. When
	the clamp binds, expected buckets up to M are accepted.

	Args:
		data_bytes (int): S
		memory_budget (int): M
		buffer_bytes (int): T

	Returns:
		int: Bucket count
	"""
	if memory_budget < 2 * buffer_bytes:
		throw(f"Memory budget {memory_budget} must be at least twice the buffer size {buffer_bytes}")
	if data_bytes <= 0:
		return 1

	k = 1 << max(0, math.ceil(4 * data_bytes / memory_budget) - 1).bit_length()
	k = min(k, _floor_pow2(memory_budget // buffer_bytes))

	if data_bytes / k > memory_budget:
		throw(
			f"Cannot sort {data_bytes} bytes with M={memory_budget}, T={buffer_bytes}: "
			f"buckets of {data_bytes // k} bytes exceed memory; the sorter requires M = Omega(sqrt(T * S))",
			SortPlanError,
		)
	return k


def _bucket_ids(keys, domain_max, k):
	width = -(-domain_max // k)
	if width >= 1 << 64:
		return np.zeros(len(keys), dtype=np.int64)
	return np.minimum(keys // np.uint64(width), k - 1).astype(np.int64)


def position_dtype(count):
	"""Smallest unsigned dtype holding the input positions of `count` records"""
	for dtype in (np.uint16, np.uint32):
		if count <= np.iinfo(dtype).max + 1:
			return np.dtype(dtype)
	return np.dtype(np.uint64)


def count_buckets(stream, key, domain_max, k, start=0, count=None, chunk_records=None):
	"""
	Counting scan: records per bucket for k evenly spaced buckets

	Args:
		stream (SequentialStream): Records to sort
		key (callable): Maps a record array to uint64 keys < domain_max
		domain_max (int): Exclusive key bound
		k (int): Bucket count

	Returns:
		np.ndarray: int64 counts per bucket
	"""
	stop = stream.length if count is None else start + count
	counts = np.zeros(k, dtype=np.int64)
	cursor = stream.reader(start, stop)
	chunk_records = chunk_records or max(1, DEFAULT_BUFFER_BYTES // stream.itemsize)
	while not cursor.exhausted:
		keys = np.asarray(key(cursor.read(chunk_records)), dtype=np.uint64)
		if len(keys) and int(keys.max()) >= domain_max:
			throw(f"Sort key {int(keys.max())} outside domain [0, {domain_max})", ValidationError)
		counts += np.bincount(_bucket_ids(keys, domain_max, k), minlength=k)
	return counts


def _distribute(stream, key, domain_max, counts, start, cfg, positions=None, record_bytes=None):
	"""
	In-place distribution: writes only into bucket space whose records were already read

	When `positions` is given, the input position of every record follows it
	to its new slot, so the per-bucket pass can restore input order on ties.
	"""
	k = len(counts)
	record_bytes = record_bytes or stream.itemsize
	buffer_records = max(1, cfg.buffer_bytes // stream.itemsize)
	stream._open_pass(start)

	ends = start + np.cumsum(counts)
	begins = ends - counts
	read_at = begins.copy()
	write_at = begins.copy()
	buffers = [[] for _ in range(k)]
	buffered = np.zeros(k, dtype=np.int64)
	last_read = start

	def flush(j):
		size = min(int(read_at[j] - write_at[j]), int(buffered[j]))
		if size <= 0:
			return
		records = np.concatenate([b[0] for b in buffers[j]])
		stream._write(int(write_at[j]), records[:size])
		if positions is not None:
			origins = np.concatenate([b[1] for b in buffers[j]])
			positions._write(int(write_at[j]) - start, origins[:size])
			rest = origins[size:]
		else:
			rest = None
		write_at[j] += size
		buffered[j] -= size
		buffers[j] = [(records[size:], rest)] if buffered[j] else []
		cfg.counters.bucket_flushes += 1

	while True:
		all_read = bool(np.all(read_at == ends))
		for j in np.flatnonzero(buffered >= (1 if all_read else buffer_records)):
			flush(j)
		if all_read:
			break

		# Read next from the unread bucket region with the most data waiting for room
		unread = read_at < ends
		source = int(np.argmax(np.where(unread, buffered, -1)))
		offset = int(read_at[source])
		if offset != last_read:
			stream.counters.region_switches += 1
		chunk = stream._read(offset, int(min(buffer_records, ends[source] - offset)))
		read_at[source] += len(chunk)
		last_read = offset + len(chunk)

		ids = _bucket_ids(np.asarray(key(chunk), dtype=np.uint64), domain_max, k)
		order = np.argsort(ids, kind="stable")
		ids, chunk = ids[order], chunk[order]
		origins = None
		if positions is not None:
			origins = (np.arange(offset - start, offset - start + len(chunk), dtype=np.uint64)[order]).astype(
				positions.dtype
			)
		cuts = np.searchsorted(ids, np.arange(k + 1))
		for j in np.flatnonzero(cuts[1:] > cuts[:-1]):
			part = slice(cuts[j], cuts[j + 1])
			buffers[j].append((chunk[part], origins[part] if origins is not None else None))
			buffered[j] += cuts[j + 1] - cuts[j]

		if int(buffered.sum()) * record_bytes > cfg.memory_budget:
			throw("Distribution buffers exceed the memory budget; input is too skewed", SortPlanError)

	if np.any(write_at != ends):
		throw("Bucket distribution lost records", SortPlanError)


def bucket_sort(stream, key, domain_max, cfg=None, start=0, count=None, order=None, stable=True):
	"""
	Sort records of a stream in place by a uint64 key

	Three scans: count bucket sizes, distribute records to their bucket
	regions, sort each bucket in memory and write it back. Every pass goes
	through the stream's counters, so a sort shows up as scans and rewinds
	(also tallied in `sort_rewinds`).

	The sort is stable: records with equal order keep their input order.
	The distribution pass moves records out of input order, so their input
	positions travel in a `<name>.pos` side file that the last pass reads
	back as the final tiebreak. Callers whose tied records are
	interchangeable pass `stable=False` and skip the side file.

	Args:
		stream (SequentialStream): Records; the region [start, start + count) is sorted
		key (callable): Record array -> uint64 keys, all < domain_max
		domain_max (int): Exclusive key bound
		cfg (SortConfig): Sorter parameters
		order (callable): Optional record array -> tuple of arrays for np.lexsort
			(last is primary); it must refine the key order
		stable (bool): Break ties by input position

	Returns:
		SequentialStream: The same stream, region sorted
	"""
	cfg = cfg or SortConfig()
	count = stream.length - start if count is None else count
	if count <= 0:
		return stream

	counters = stream.counters
	rewinds = counters.rewinds
	record_bytes = stream.itemsize + (position_dtype(count).itemsize if stable else 0)
	k = cfg.bucket_count or plan_buckets(count * record_bytes, cfg.memory_budget, cfg.buffer_bytes)

	# Pass 1: bucket sizes; a bucket that cannot be sorted in memory doubles k
	for attempt in range(cfg.max_retries + 1):
		counts = count_buckets(stream, key, domain_max, k, start, count)
		cfg.counters.sort_passes += 1
		if int(counts.max()) * record_bytes <= cfg.memory_budget:
			break
		if attempt == cfg.max_retries or 2 * k * cfg.buffer_bytes > cfg.memory_budget:
			throw(
				f"Largest bucket holds {int(counts.max())} records ({int(counts.max()) * record_bytes} bytes) "
				f"with k={k}, over the memory budget {cfg.memory_budget} after {attempt} retries",
				SortPlanError,
			)
		scanphf.logger("extsort").info(f"Bucket overflow with k={k}, retrying with k={2 * k}")
		k *= 2

	positions = None
	try:
		# Pass 2: distribution
		if k > 1:
			if stable:
				positions = SequentialStream.create(
					stream.path.with_name(stream.path.name + ".pos"), position_dtype(count), count, counters
				)
			_distribute(stream, key, domain_max, counts, start, cfg, positions, record_bytes)
			cfg.counters.sort_passes += 1

		# Pass 3: per-bucket sort, ties broken by input position
		cursor = stream.reader(start, start + count)
		origins = positions.reader(0, count) if positions is not None else None
		writer = stream.writer(start)
		offset = 0
		for size in counts.tolist():
			if not size:
				continue
			bucket = cursor.read(size)
			keys = tuple(order(bucket)) if order is not None else (np.asarray(key(bucket), dtype=np.uint64),)
			tiebreak = origins.read(size) if origins is not None else np.arange(offset, offset + size)
			writer.write(bucket[np.lexsort((tiebreak, *keys))])
			offset += size
		cfg.counters.sort_passes += 1
	finally:
		if positions is not None:
			positions.unlink()

	counters.sort_rewinds += counters.rewinds - rewinds
	scanphf.logger("extsort").debug(f"Sorted {count} records in {k} buckets")
	return stream

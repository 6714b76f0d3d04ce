"""
Stream Codecs
Elias gamma and unary codes, fixed-width fields, the compressed incidence
stream holding the live lists of a peeling round, and fixed-width packing
of oriented edges into 64-bit words.
"""

import struct
from dataclasses import dataclass

import numpy as np

from scanphf import throw
from scanphf.exceptions import ContractViolation, CorruptStreamError, FormatError, ValidationError
from scanphf.scanphf.hypergraph import EDGE_DTYPE, INCIDENCE_DTYPE

STREAM_MAGIC = b"CPLS"
STREAM_VERSION = 1
FLAG_LABELED = 0x1
HEADER = struct.Struct("<4sHHQQIB3x")
HEADER_BYTES = HEADER.size

DEFAULT_BLOCK_RECORDS = 16384
REFILL_BYTES = 1 << 16

_ONE = np.uint64(1)


# Scalar codes


def gamma_encode(j):
	"""
	Elias gamma code of j as a bit-string

	Args:
		j (int): Positive integer

	Returns:
		str: floor(log2 j) zeros followed by the binary form of j
	"""
	if j < 1:
		throw(f"Gamma code is defined for positive integers, got {j}", ContractViolation)
	binary = format(j, "b")
	return "0" * (len(binary) - 1) + binary


def gamma_decode(bits):
	"""Decode one gamma codeword; returns (value, bits consumed)"""
	zeros = bits.find("1")
	if zeros < 0 or len(bits) < 2 * zeros + 1:
		throw(f"Truncated gamma codeword: {bits!r}", CorruptStreamError)
	return int(bits[zeros : 2 * zeros + 1], 2), 2 * zeros + 1


def unary_encode(d):
	"""(d - 1) ones then a zero; d bits in total"""
	if d < 1:
		throw(f"Unary code is defined for positive integers, got {d}", ContractViolation)
	return "1" * (d - 1) + "0"


def unary_decode(bits):
	"""Decode one unary codeword; returns (value, bits consumed)"""
	end = bits.find("0")
	if end < 0:
		throw(f"Truncated unary codeword: {bits!r}", CorruptStreamError)
	return end + 1, end + 1


class BitWriter:
	"""Sequential bit writer, least-significant bit first within each byte"""

	def __init__(self):
		self._buffer = bytearray()
		self._acc = 0
		self._nbits = 0

	@property
	def position(self):
		return len(self._buffer) * 8 + self._nbits

	def write_bit(self, bit):
		self._acc |= (bit & 1) << self._nbits
		self._nbits += 1
		if self._nbits == 8:
			self._buffer.append(self._acc)
			self._acc = 0
			self._nbits = 0

	def write_bits(self, value, width):
		"""Fixed-width field, most significant bit first"""
		for shift in range(width - 1, -1, -1):
			self.write_bit((value >> shift) & 1)

	def write_bitstring(self, bits):
		for bit in bits:
			self.write_bit(bit == "1")

	def write_gamma(self, j):
		self.write_bitstring(gamma_encode(j))

	def write_unary(self, d):
		self.write_bitstring(unary_encode(d))

	def getvalue(self):
		"""Written bytes, the last one zero-padded"""
		if self._nbits:
			return bytes(self._buffer) + bytes([self._acc])
		return bytes(self._buffer)


class BitReader:
	"""Sequential bit reader over bytes written by BitWriter"""

	def __init__(self, data):
		self._data = data
		self.position = 0

	def read_bit(self):
		byte, offset = divmod(self.position, 8)
		if byte >= len(self._data):
			throw("Read past the end of the bit stream", CorruptStreamError)
		self.position += 1
		return (self._data[byte] >> offset) & 1

	def read_bits(self, width):
		value = 0
		for _ in range(width):
			value = (value << 1) | self.read_bit()
		return value

	def read_gamma(self):
		zeros = 0
		while not self.read_bit():
			zeros += 1
		return (1 << zeros) | self.read_bits(zeros)

	def read_unary(self):
		d = 1
		while self.read_bit():
			d += 1
		return d


# Vectorised helpers


def bit_length(values):
	"""Element-wise int.bit_length of a uint64 array"""
	v = np.array(values, dtype=np.uint64)
	out = np.zeros(v.shape, dtype=np.int64)
	for shift in (32, 16, 8, 4, 2, 1):
		big = v >= (_ONE << np.uint64(shift))
		out[big] += shift
		v[big] >>= np.uint64(shift)
	return out + (v > 0)


def vertex_bits(m):
	"""Width of a fixed-length vertex field, ceil(log2 m)"""
	return max(1, (m - 1).bit_length())


def _fixed_bits(values, width):
	shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
	return ((np.asarray(values, dtype=np.uint64)[:, None] >> shifts) & _ONE).astype(np.uint8).ravel()


def _fixed_values(bits, count, width):
	weights = _ONE << np.arange(width - 1, -1, -1, dtype=np.uint64)
	return (bits.reshape(count, width).astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


def gamma_section_bits(gaps):
	"""Total gamma code length of an array of positive gaps"""
	return int((2 * bit_length(gaps) - 1).sum())


# Compressed incidence stream


@dataclass
class StreamHeader:
	m: int
	count: int
	labeled: bool = False
	block_records: int = DEFAULT_BLOCK_RECORDS
	label_bits: int = 0

	def pack(self):
		flags = FLAG_LABELED if self.labeled else 0
		return HEADER.pack(
			STREAM_MAGIC, STREAM_VERSION, flags, self.m, self.count, self.block_records, self.label_bits
		)

	@classmethod
	def unpack(cls, data):
		if len(data) < HEADER_BYTES:
			throw(f"Incidence stream header truncated ({len(data)} bytes)", FormatError)
		magic, version, flags, m, count, block_records, label_bits = HEADER.unpack(bytes(data[:HEADER_BYTES]))
		if magic != STREAM_MAGIC:
			throw(f"Not an incidence stream (magic {magic!r})", FormatError)
		if version != STREAM_VERSION:
			throw(f"Unsupported incidence stream version {version}", FormatError)
		return cls(m, count, bool(flags & FLAG_LABELED), block_records, label_bits)


@dataclass
class SectionTally:
	"""Bits spent per field kind, for the compression bounds"""

	count: int = 0
	degree_sum: int = 0
	gamma_bits: int = 0
	unary_bits: int = 0
	fixed_bits: int = 0

	@property
	def total_bits(self):
		return self.gamma_bits + self.unary_bits + self.fixed_bits


class IncidenceWriter:
	"""
	Encodes packed incidence lists, sorted by v0, into a byte sink

	Records are grouped into blocks of `block_records`; within a block the
	gamma prefixes, gamma mantissas, unary degrees and fixed-width fields
	follow each other as separate bit sections. Bits run on across blocks
	and the body is padded to a byte only at the end. The header is not
	written here: `close` returns it so the caller can place it.
	"""

	def __init__(self, sink, m, labeled=False, label_bits=0, block_records=DEFAULT_BLOCK_RECORDS):
		if m < 1:
			throw(f"Vertex count must be positive, got {m}")
		if block_records < 1:
			throw("Block size must be positive")
		self.sink = sink
		self.m = m
		self.labeled = labeled
		self.width = vertex_bits(m)
		self.label_bits = max(1, label_bits) if labeled else 0
		self.block_records = block_records
		self.tally = SectionTally()
		self._prev = -1
		self._pending = []
		self._pending_count = 0
		self._carry = np.zeros(0, dtype=np.uint8)

	def write(self, lists):
		if not len(lists):
			return
		self._pending.append(lists)
		self._pending_count += len(lists)
		if self._pending_count >= self.block_records:
			pending = np.concatenate(self._pending)
			full = len(pending) - len(pending) % self.block_records
			for start in range(0, full, self.block_records):
				self._encode_block(pending[start : start + self.block_records])
			self._pending = [pending[full:]] if full < len(pending) else []
			self._pending_count = len(pending) - full

	def _validate(self, block):
		v0 = block["v0"]
		if int(v0[0]) <= self._prev or np.any(v0[1:] <= v0[:-1]):
			throw("Incidence lists must be strictly sorted by v0", ContractViolation)
		if int(v0[-1]) >= self.m:
			throw(f"Vertex {int(v0[-1])} out of range for m={self.m}", ContractViolation)
		if np.any(block["d"] < 1):
			throw("Empty incidence lists cannot be written", ContractViolation)
		limit = _ONE << np.uint64(self.width)
		if np.any(block["xv1"] >= limit) or np.any(block["xv2"] >= limit):
			throw(f"Accumulator wider than {self.width} bits", ContractViolation)
		if self.labeled and self.label_bits < 64:
			if np.any(block["xlabel"] >= (_ONE << np.uint64(self.label_bits))):
				throw(f"Label accumulator wider than {self.label_bits} bits", ContractViolation)

	def _encode_block(self, block):
		self._validate(block)
		v0 = block["v0"].astype(np.uint64)
		gaps = np.diff(v0, prepend=np.uint64(self._prev + 1))
		gaps[0] += _ONE
		self._prev = int(v0[-1])

		lengths = bit_length(gaps)
		prefix = np.zeros(int(lengths.sum()), dtype=np.uint8)
		prefix[np.cumsum(lengths) - 1] = 1

		mantissa_lengths = lengths - 1
		owner = np.repeat(np.arange(len(gaps)), mantissa_lengths)
		offset = np.arange(len(owner)) - np.repeat(np.cumsum(mantissa_lengths) - mantissa_lengths, mantissa_lengths)
		shifts = (mantissa_lengths[owner] - 1 - offset).astype(np.uint64)
		mantissa = ((gaps[owner] >> shifts) & _ONE).astype(np.uint8)

		degrees = block["d"].astype(np.int64)
		unary = np.ones(int(degrees.sum()), dtype=np.uint8)
		unary[np.cumsum(degrees) - 1] = 0

		sections = [self._carry, prefix, mantissa, unary, _fixed_bits(block["xv1"], self.width)]
		sections.append(_fixed_bits(block["xv2"], self.width))
		if self.labeled:
			sections.append(_fixed_bits(block["xlabel"], self.label_bits))

		self.tally.count += len(block)
		self.tally.degree_sum += int(degrees.sum())
		self.tally.gamma_bits += len(prefix) + len(mantissa)
		self.tally.unary_bits += len(unary)
		self.tally.fixed_bits += len(block) * (2 * self.width + self.label_bits)

		bits = np.concatenate(sections)
		whole = len(bits) - len(bits) % 8
		if whole:
			self.sink.write(np.packbits(bits[:whole], bitorder="little").tobytes())
		self._carry = bits[whole:]

	def close(self):
		"""Encode the last partial block, pad to a byte; returns the StreamHeader"""
		if self._pending_count:
			self._encode_block(np.concatenate(self._pending))
			self._pending = []
			self._pending_count = 0
		if len(self._carry):
			self.sink.write(np.packbits(self._carry, bitorder="little").tobytes())
			self._carry = np.zeros(0, dtype=np.uint8)
		return StreamHeader(self.m, self.tally.count, self.labeled, self.block_records, self.label_bits)


class _BytesSource:
	def __init__(self, data):
		self._data = np.frombuffer(bytes(data), dtype=np.uint8)
		self.position = 0

	@property
	def exhausted(self):
		return self.position >= len(self._data)

	def read(self, count):
		chunk = self._data[self.position : self.position + count]
		self.position += len(chunk)
		return chunk


class IncidenceReader:
	"""
	Decodes a compressed incidence stream block by block

	`source` yields the body bytes (anything with `read(count)` and
	`exhausted`, such as a StreamReader positioned after the header).
	"""

	def __init__(self, source, header, refill_bytes=REFILL_BYTES):
		self.source = source
		self.header = header
		self.width = vertex_bits(header.m)
		self.refill_bytes = refill_bytes
		self.remaining = header.count
		self._bits = np.zeros(0, dtype=np.uint8)
		self._pos = 0
		self._prev = -1

	def _refill(self):
		if self.source.exhausted:
			return False
		chunk = self.source.read(self.refill_bytes)
		self._bits = np.concatenate((self._bits[self._pos :], np.unpackbits(chunk, bitorder="little")))
		self._pos = 0
		return True

	def _take(self, nbits):
		while len(self._bits) - self._pos < nbits:
			if not self._refill():
				throw("Incidence stream body is truncated", CorruptStreamError)
		bits = self._bits[self._pos : self._pos + nbits]
		self._pos += nbits
		return bits

	def _take_terminated(self, terminator, count):
		"""Bits up to and including the count-th occurrence of `terminator`"""
		while True:
			hits = np.flatnonzero(self._bits[self._pos :] == terminator)
			if len(hits) >= count:
				return self._take(int(hits[count - 1]) + 1)
			if not self._refill():
				throw("Incidence stream body is truncated", CorruptStreamError)

	def read_block(self):
		"""Next block as an INCIDENCE_DTYPE array, or None at the end"""
		count = min(self.header.block_records, self.remaining)
		if count <= 0:
			return None

		prefix = self._take_terminated(1, count)
		ends = np.flatnonzero(prefix)
		lengths = np.diff(ends, prepend=-1)

		mantissa_lengths = lengths - 1
		mantissa = self._take(int(mantissa_lengths.sum())).astype(np.uint64)
		gaps = _ONE << mantissa_lengths.astype(np.uint64)
		coded = np.flatnonzero(mantissa_lengths)
		if len(coded):
			owner = np.repeat(np.arange(count), mantissa_lengths)
			starts = np.cumsum(mantissa_lengths) - mantissa_lengths
			shifts = (mantissa_lengths[owner] - 1 - (np.arange(len(owner)) - starts[owner])).astype(np.uint64)
			gaps[coded] |= np.bitwise_or.reduceat(mantissa << shifts, starts[coded])

		zeros = np.flatnonzero(self._take_terminated(0, count) == 0)
		degrees = np.diff(zeros, prepend=-1)

		block = np.zeros(count, dtype=INCIDENCE_DTYPE)
		block["v0"] = np.uint64(self._prev + 1) + np.cumsum(gaps, dtype=np.uint64) - _ONE
		block["d"] = degrees
		block["xv1"] = _fixed_values(self._take(count * self.width), count, self.width)
		block["xv2"] = _fixed_values(self._take(count * self.width), count, self.width)
		if self.header.labeled:
			bits = self.header.label_bits
			block["xlabel"] = _fixed_values(self._take(count * bits), count, bits)

		self._prev = int(block["v0"][-1])
		self.remaining -= count
		if self._prev >= self.header.m:
			throw(f"Decoded vertex {self._prev} out of range for m={self.header.m}", CorruptStreamError)
		return block

	def __iter__(self):
		while (block := self.read_block()) is not None:
			yield block


class _ByteBuffer:
	def __init__(self):
		self.data = bytearray()

	def write(self, chunk):
		self.data += chunk


def write_incidence_stream(lists, m, labeled=False, label_bits=0, block_records=DEFAULT_BLOCK_RECORDS, stream=None):
	"""
	Encode incidence lists as a complete stream (header plus body)

	Args:
		lists (np.ndarray): INCIDENCE_DTYPE, strictly sorted by v0, every d >= 1
		m (int): Vertex count
		labeled (bool): Store the label accumulator
		label_bits (int): Width of the label field when labeled
		stream (SequentialStream): Byte stream to write to; bytes are returned when omitted

	Returns:
		tuple: (bytes or the stream, SectionTally)
	"""
	lists = np.asarray(lists, dtype=INCIDENCE_DTYPE)
	if stream is None:
		sink = _ByteBuffer()
		writer = IncidenceWriter(sink, m, labeled, label_bits, block_records)
		writer.write(lists)
		header = writer.close()
		return header.pack() + bytes(sink.data), writer.tally

	cursor = stream.writer(HEADER_BYTES)
	writer = IncidenceWriter(cursor, m, labeled, label_bits, block_records)
	writer.write(lists)
	header = writer.close()
	stream.patch(0, np.frombuffer(header.pack(), dtype=np.uint8))
	stream.truncate(cursor.position)
	return stream, writer.tally


def read_incidence_stream(source):
	"""
	Decode a complete stream

	Args:
		source: bytes or a byte SequentialStream

	Returns:
		tuple: (StreamHeader, INCIDENCE_DTYPE array)
	"""
	if isinstance(source, (bytes, bytearray, memoryview)):
		body = _BytesSource(source)
		header = StreamHeader.unpack(body.read(HEADER_BYTES).tobytes())
	else:
		body = source.reader(0)
		header = StreamHeader.unpack(body.read(HEADER_BYTES).tobytes())

	blocks = list(IncidenceReader(body, header))
	lists = np.concatenate(blocks) if blocks else np.zeros(0, dtype=INCIDENCE_DTYPE)
	return header, lists


# Oriented edges as fixed-width words


class EdgePacking:
	"""
	Fixed-width layout of oriented edges

	When three vertex fields and the label fit in 64 bits, an edge is one
	uint64 word with v0 in the top bits, so word order is v0 order.
	Otherwise edges keep the wide EDGE_DTYPE records.
	"""

	def __init__(self, m, label_bits=0):
		self.m = m
		self.width = vertex_bits(m)
		self.label_bits = label_bits
		self.packed = 3 * self.width + label_bits <= 64
		self.dtype = np.dtype(np.uint64) if self.packed else EDGE_DTYPE
		self._shifts = {
			"v0": 2 * self.width + label_bits,
			"v1": self.width + label_bits,
			"v2": label_bits,
			"label": 0,
		}

	@property
	def itemsize(self):
		return self.dtype.itemsize

	def _mask(self, name):
		bits = self.label_bits if name == "label" else self.width
		return (_ONE << np.uint64(bits)) - _ONE if bits < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)

	def pack(self, edges):
		"""EDGE_DTYPE array -> stored records"""
		if not self.packed:
			return np.ascontiguousarray(edges, dtype=EDGE_DTYPE)
		if self.label_bits == 0 and len(edges) and np.any(edges["label"]):
			throw("Edges carry labels but the layout has no label field", ValidationError)
		words = np.zeros(len(edges), dtype=np.uint64)
		for name in ("v0", "v1", "v2", "label"):
			words |= edges[name].astype(np.uint64) << np.uint64(self._shifts[name])
		return words

	def column(self, records, name):
		if not self.packed:
			return records[name]
		if name == "label" and self.label_bits == 0:
			return np.zeros(len(records), dtype=np.uint64)
		return (records >> np.uint64(self._shifts[name])) & self._mask(name)

	def unpack(self, records):
		"""Stored records -> EDGE_DTYPE array"""
		if not self.packed:
			return np.asarray(records, dtype=EDGE_DTYPE)
		edges = np.zeros(len(records), dtype=EDGE_DTYPE)
		for name in ("v0", "v1", "v2", "label"):
			edges[name] = self.column(records, name)
		return edges

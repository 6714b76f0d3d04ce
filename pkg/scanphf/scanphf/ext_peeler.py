"""
External Peeling
Layered peeling of a tripartite 3-hypergraph using only scans and sorts.

Two files back a run: `E.bin`, the compressed incidence lists of the live
graph, rewritten in place every round; and `edges.bin`, the shared array
of oriented edges. Its prefix accumulates the peeled layers, and the space
after the prefix holds the degree-one, peeled and update lists of the
current round.
"""

import json
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

import scanphf
from scanphf import throw
from scanphf.config.settings import get_settings
from scanphf.exceptions import ContractViolation, CorruptStreamError
from scanphf.scanphf.codecs import (
	HEADER_BYTES,
	EdgePacking,
	IncidenceReader,
	IncidenceWriter,
	SectionTally,
	StreamHeader,
)
from scanphf.scanphf.extsort import IOCounters, SequentialStream, SortConfig, TrailingWriter, bucket_sort
from scanphf.scanphf.hypergraph import (
	EDGE_DTYPE,
	R,
	canonical_rows,
	expand_orientations,
	fold_incidence,
	orient,
)
from scanphf.scanphf.inmem_peeler import PeelStatus

MANIFEST_VERSION = 1


@dataclass
class RoundStats:
	index: int
	lists: int
	live_edges: int
	degree_ones: int = 0
	peeled: int = 0
	gamma_bits: int = 0
	unary_bits: int = 0
	fixed_bits: int = 0
	spilled_bytes: int = 0


@dataclass
class LayerRef:
	"""A peeled layer: records [start, start + count) of edges.bin"""

	round: int
	start: int
	count: int


@dataclass
class LayerManifest:
	"""
	Result of an external peeling run

	Args:
		status (PeelStatus): Peeled or TwoCore
		n (int): Edge count
		m (int): Vertex count
		label_bits (int): Width of the label field (0 when edges are unlabeled)
		layers (list): LayerRef per non-empty round, first peeled first
		core_size (int): Residual edges when TwoCore
	"""

	status: PeelStatus
	n: int
	m: int
	label_bits: int = 0
	layers: list = field(default_factory=list)
	core_size: int = 0
	rounds: list = field(default_factory=list)
	peak_temp_bytes: int = 0
	edges_path: str = ""
	counters: dict = field(default_factory=dict)

	@property
	def layer_sizes(self):
		return [layer.count for layer in self.layers]

	@property
	def layer_count(self):
		return len(self.layers)

	@property
	def packing(self):
		return EdgePacking(self.m, self.label_bits)

	def iter_layers_reversed(self, counters=None, chunk_records=1 << 16):
		"""
		EDGE_DTYPE chunks in assignment order

		Layers come last-peeled first; each layer is read forward, so a chunk
		never spans two layers.
		"""
		if not self.layers:
			return
		packing = self.packing
		stream = SequentialStream(self.edges_path, packing.dtype, counters)
		try:
			for layer in reversed(self.layers):
				for chunk in stream.scan(layer.start, layer.start + layer.count, chunk_records):
					yield packing.unpack(chunk)
		finally:
			stream.close()

	def to_dict(self):
		return {
			"version": MANIFEST_VERSION,
			"status": self.status.value,
			"n": self.n,
			"m": self.m,
			"label_bits": self.label_bits,
			"core_size": self.core_size,
			"peak_temp_bytes": self.peak_temp_bytes,
			"edges_path": self.edges_path,
			"layers": [asdict(layer) for layer in self.layers],
			"rounds": [asdict(stats) for stats in self.rounds],
			"counters": self.counters,
		}

	def write(self, path):
		with open(path, "w") as f:
			json.dump(self.to_dict(), f, indent=1)

	@classmethod
	def read(cls, path):
		with open(path) as f:
			data = json.load(f)
		return cls(
			status=PeelStatus(data["status"]),
			n=data["n"],
			m=data["m"],
			label_bits=data["label_bits"],
			layers=[LayerRef(**layer) for layer in data["layers"]],
			core_size=data["core_size"],
			rounds=[RoundStats(**stats) for stats in data["rounds"]],
			peak_temp_bytes=data["peak_temp_bytes"],
			edges_path=data["edges_path"],
			counters=data["counters"],
		)


def _lists_to_edges(lists):
	edges = np.empty(len(lists), dtype=EDGE_DTYPE)
	edges["v0"] = lists["v0"]
	edges["v1"] = lists["xv1"]
	edges["v2"] = lists["xv2"]
	edges["label"] = lists["xlabel"]
	return edges


def _apply_updates(block, updates):
	"""Delete the edges folded in `updates` from the matching lists of `block`"""
	v0 = block["v0"]
	idx = np.searchsorted(v0, updates["v0"])
	if np.any(idx >= len(block)) or np.any(v0[np.minimum(idx, len(block) - 1)] != updates["v0"]):
		throw("Degree update for a vertex without an incidence list", CorruptStreamError)
	if np.any(block["d"][idx] < updates["d"]):
		throw("Degree underflow while joining degree updates", CorruptStreamError)
	block["d"][idx] -= updates["d"].astype(block["d"].dtype)
	block["xv1"][idx] ^= updates["xv1"]
	block["xv2"][idx] ^= updates["xv2"]
	block["xlabel"][idx] ^= updates["xlabel"]
	return block[block["d"] > 0]


class ExternalPeeler:
	"""
	State of one external peeling run in a workspace directory

	Args:
		m (int): Vertex count, a multiple of 3
		workspace (str | Path): Directory for E.bin, edges.bin and manifest.json
		settings (ScanphfSettings): Budgets, buffer and block sizes
		label_bits (int): Label width; 0 for unlabeled (MPHF) edges
		counters (IOCounters): Shared instrumentation
	"""

	def __init__(self, m, workspace, settings=None, label_bits=0, counters=None):
		if m < R or m % R:
			throw(f"Vertex count must be a positive multiple of {R}, got {m}")
		self.settings = settings or get_settings()
		self.m = m
		self.workspace = Path(workspace)
		self.workspace.mkdir(parents=True, exist_ok=True)
		self.packing = EdgePacking(m, label_bits)
		self.labeled = label_bits > 0
		self.counters = counters if counters is not None else IOCounters()
		self.sort_cfg = SortConfig.from_settings(self.settings)
		self.sort_cfg.counters = self.counters
		self.block_records = self.settings.block_records
		self.chunk_records = max(1, self.settings.buffer_bytes // self.packing.itemsize)

		self.edges = SequentialStream.create(self.workspace / "edges.bin", self.packing.dtype, 0, self.counters)
		self.E = SequentialStream.create(self.workspace / "E.bin", np.uint8, 0, self.counters)

		self.n = 0
		self.live = 0
		self.lists = 0
		self.e_tally = SectionTally()
		self.layers = []
		self.layer_end = 0
		self.rounds = []
		self.peak_temp_bytes = 0

	def _observe(self):
		self.peak_temp_bytes = max(self.peak_temp_bytes, self.E.file_bytes + self.edges.file_bytes)

	def _v0_key(self, offset=0):
		packing = self.packing
		return lambda records: packing.column(records, "v0") - np.uint64(offset)

	def load_edges(self, edges):
		"""Append canonical edges (EDGE_DTYPE chunk) to edges.bin"""
		if not len(edges):
			return
		p = self.m // R
		v0, v1, v2 = edges["v0"], edges["v1"], edges["v2"]
		if np.any(v0 >= p) or np.any((v1 < p) | (v1 >= 2 * p)) or np.any((v2 < 2 * p) | (v2 >= self.m)):
			throw("Edges must be canonical tripartite orientations", ContractViolation)
		self.edges.append(self.packing.pack(edges))
		self.n += len(edges)
		self.live = self.n

	def _reorient(self, i):
		reader = self.edges.reader(0, self.n)
		writer = self.edges.writer(0)
		while not reader.exhausted:
			chunk = self.packing.unpack(reader.read(self.chunk_records))
			writer.write(self.packing.pack(orient(chunk, i)))

	def _fold_into(self, encoder):
		carry = None
		for chunk in self.edges.scan(0, self.n, self.chunk_records):
			edges = self.packing.unpack(chunk)
			if carry is not None:
				edges = np.concatenate((carry, edges))
			cut = int(np.searchsorted(edges["v0"], edges["v0"][-1], side="left"))
			encoder.write(fold_incidence(edges[:cut]))
			carry = edges[cut:]
		if carry is not None and len(carry):
			encoder.write(fold_incidence(carry))

	def _finish_E(self, encoder, end):
		header = encoder.close()
		self.E.patch(0, np.frombuffer(header.pack(), dtype=np.uint8))
		self.E.truncate(max(end, HEADER_BYTES))
		self.e_tally = encoder.tally
		self.lists = header.count
		self._observe()

	def build_E0(self):
		"""
		Build the sorted incidence stream of the whole graph

		One pass per part: orient every edge so that its part-i vertex comes
		first, sort by v0 and fold each run of equal v0 into a packed list.
		Part-i vertices all precede part-(i+1) vertices, so appending the
		passes yields a globally sorted stream while only n records are ever
		sorted at once.

		Returns:
			SectionTally: Bit usage of E0
		"""
		log = scanphf.logger("ext_peeler")
		p = self.m // R
		cursor = self.E.writer(HEADER_BYTES)
		encoder = IncidenceWriter(cursor, self.m, self.labeled, self.packing.label_bits, self.block_records)

		for i in range(R):
			if i:
				self._reorient(i)
			# Lists fold their edges by XOR, so ties on v0 may come in any order
			bucket_sort(self.edges, self._v0_key(i * p), p, self.sort_cfg, start=0, count=self.n, stable=False)
			self._fold_into(encoder)
			self._observe()
			log.info(f"E0 pass {i}: {self.n} oriented edges folded")

		self._finish_E(encoder, cursor.position)
		return self.e_tally

	def _open_E(self):
		cursor = self.E.reader(0)
		header = StreamHeader.unpack(cursor.read(HEADER_BYTES).tobytes())
		return cursor, IncidenceReader(cursor, header)

	def _collect_degree_ones(self, start):
		_, decoder = self._open_E()
		writer = self.edges.writer(start)
		for block in decoder:
			ones = block[block["d"] == 1]
			if len(ones):
				writer.write(self.packing.pack(_lists_to_edges(ones)))
		return writer.written

	def _deduplicate(self, start, count):
		"""Keep one orientation per edge, the one with the smallest free vertex"""
		reader = self.edges.reader(start, start + count)
		writer = self.edges.writer(start)
		previous = None
		while not reader.exhausted:
			chunk = self.packing.unpack(reader.read(self.chunk_records))
			rows = canonical_rows(chunk)
			first = np.ones(len(chunk), dtype=bool)
			first[1:] = np.any(rows[1:] != rows[:-1], axis=1)
			if previous is not None:
				first[0] = not np.array_equal(rows[0], previous)
			previous = rows[-1].copy()
			writer.write(self.packing.pack(chunk[first]))
		return writer.written

	def _expand_updates(self, start, count):
		writer = self.edges.writer(start + count)
		for chunk in self.edges.scan(start, start + count, self.chunk_records):
			writer.write(self.packing.pack(expand_orientations(self.packing.unpack(chunk))))
		return start + count, writer.written

	def _join(self, u_start, u_count):
		e_cursor, decoder = self._open_E()
		trailing = TrailingWriter(
			self.E, HEADER_BYTES, e_cursor, self.settings.buffer_bytes, self.workspace / "E.spill"
		)
		encoder = IncidenceWriter(trailing, self.m, self.labeled, self.packing.label_bits, self.block_records)
		updates = self.edges.reader(u_start, u_start + u_count)
		pending = np.zeros(0, dtype=EDGE_DTYPE)

		for block in decoder:
			last = block["v0"][-1]
			while not updates.exhausted and (not len(pending) or pending["v0"][-1] <= last):
				pending = np.concatenate((pending, self.packing.unpack(updates.read(self.chunk_records))))
			cut = int(np.searchsorted(pending["v0"], last, side="right"))
			if cut:
				block = _apply_updates(block, fold_incidence(pending[:cut]))
				pending = pending[cut:]
			encoder.write(block)

		if len(pending) or not updates.exhausted:
			throw("Degree updates left over after the incidence stream ended", CorruptStreamError)

		self._finish_E(encoder, trailing.close())
		return trailing.spilled_bytes

	def peel_round(self):
		"""
		Run one round of layered peeling

		1. scan E for degree-one lists, writing their edges after the layers;
		2. sort them by canonical edge and keep one orientation per edge;
		   the kept records form the new layer;
		3. write all three orientations of the layer and sort them by v0;
		4. merge-join E with these updates, rewriting E in place.

		Returns:
			RoundStats: Sizes and bit usage of the round
		"""
		start = self.layer_end
		stats = RoundStats(
			index=len(self.rounds),
			lists=self.lists,
			live_edges=self.live,
			gamma_bits=self.e_tally.gamma_bits,
			unary_bits=self.e_tally.unary_bits,
			fixed_bits=self.e_tally.fixed_bits,
		)

		stats.degree_ones = self._collect_degree_ones(start)
		self._observe()
		if stats.degree_ones:
			packing = self.packing

			def canonical_min(records):
				return np.minimum(packing.column(records, "v0"), packing.column(records, "v1"))

			def canonical_order(records):
				edges = packing.unpack(records)
				rows = canonical_rows(edges)
				return (edges["v0"], rows[:, 2], rows[:, 1], rows[:, 0])

			# canonical_order covers every field; tied records are identical
			bucket_sort(
				self.edges, canonical_min, self.m, self.sort_cfg, start, stats.degree_ones, canonical_order, stable=False
			)
			stats.peeled = self._deduplicate(start, stats.degree_ones)

		if stats.peeled:
			u_start, u_count = self._expand_updates(start, stats.peeled)
			self._observe()
			bucket_sort(self.edges, self._v0_key(), self.m, self.sort_cfg, u_start, u_count, stable=False)
			stats.spilled_bytes = self._join(u_start, u_count)
			self.layers.append(LayerRef(stats.index, start, stats.peeled))
			self.layer_end += stats.peeled
			self.live -= stats.peeled

		self.rounds.append(stats)
		scanphf.logger("ext_peeler").info(
			f"Round {stats.index}: {stats.lists} lists, {stats.live_edges} live edges, "
			f"{stats.degree_ones} degree-one, {stats.peeled} peeled"
		)
		return stats

	def run(self):
		"""
		Peel until E is empty or a round peels nothing

		Returns:
			LayerManifest: Written to manifest.json as well
		"""
		status = PeelStatus.PEELED
		core_size = 0
		if self.n:
			self.build_E0()
			while self.lists:
				stats = self.peel_round()
				if not stats.peeled:
					status = PeelStatus.TWO_CORE
					core_size = stats.unary_bits // R
					break

		self.edges.truncate(self.layer_end)
		manifest = LayerManifest(
			status=status,
			n=self.n,
			m=self.m,
			label_bits=self.packing.label_bits,
			layers=list(self.layers),
			core_size=core_size,
			rounds=list(self.rounds),
			peak_temp_bytes=self.peak_temp_bytes,
			edges_path=str(self.edges.path),
			counters=self.counters.snapshot(),
		)
		manifest.write(self.workspace / "manifest.json")
		scanphf.logger("ext_peeler").info(
			f"External peeling: {status.value} after {len(self.rounds)} rounds, {len(self.layers)} layers"
		)
		return manifest

	def close(self):
		self.E.close()
		self.edges.close()


def peel_external(edges, m, settings=None, workspace=None, label_bits=0, counters=None):
	"""
	Peel a tripartite 3-hypergraph in external memory

	Args:
		edges: Canonical edges, an EDGE_DTYPE array or an iterable of EDGE_DTYPE chunks
		m (int): Vertex count, a multiple of 3
		settings (ScanphfSettings): Defaults to the cached settings
		workspace (str | Path): Run directory; a temporary one under the
			configured workspace is created when omitted
		label_bits (int): Label width for function construction

	Returns:
		LayerManifest: Status, layers and statistics; layers stay in the workspace
	"""
	settings = settings or get_settings()
	workspace = workspace or tempfile.mkdtemp(prefix="scanphf-", dir=settings.workspace or None)
	peeler = ExternalPeeler(m, workspace, settings, label_bits, counters)
	try:
		chunks = [edges] if isinstance(edges, np.ndarray) else edges
		for chunk in chunks:
			peeler.load_edges(chunk)
		return peeler.run()
	finally:
		peeler.close()


def remove_workspace(manifest):
	"""Delete the run directory holding a manifest's layers"""
	if manifest.edges_path:
		shutil.rmtree(Path(manifest.edges_path).parent, ignore_errors=True)

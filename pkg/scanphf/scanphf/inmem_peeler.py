"""
In-Memory Peeling
Linear-time greedy peeling over packed incidence lists (Standard+XOR)
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

import scanphf
from scanphf import throw
from scanphf.exceptions import ContractViolation, MemoryBudgetExceeded
from scanphf.scanphf.hypergraph import EDGE_DTYPE, R, OrientedEdge

# Bytes per vertex (degree + three accumulators) and per peeled edge record
VERTEX_BYTES = 4 + 3 * 8
EDGE_BYTES = EDGE_DTYPE.itemsize


class PeelStatus(str, Enum):
	PEELED = "Peeled"
	TWO_CORE = "TwoCore"


@dataclass
class PeelResult:
	"""
	Outcome of a peeling run

	`order` holds peel-time orientations (free vertex first), grouped in
	generations: generation i holds the edges that had a degree-1 vertex
	after generation i - 1 was removed.
	"""

	status: PeelStatus
	order: np.ndarray
	core_size: int = 0
	layer_sizes: list = field(default_factory=list)

	@property
	def rounds(self):
		return len(self.layer_sizes)

	def layers(self):
		bounds = np.cumsum([0, *self.layer_sizes])
		return [self.order[bounds[i] : bounds[i + 1]] for i in range(len(self.layer_sizes))]

	def iter_layers_reversed(self):
		"""Layers last-peeled first, the interface the assignment phase scans"""
		yield from reversed(self.layers())


def working_set_bytes(n, m):
	"""Estimated working memory of peel_in_memory"""
	return m * VERTEX_BYTES + 2 * n * EDGE_BYTES


def _as_edge_array(edges):
	if isinstance(edges, np.ndarray) and edges.dtype == EDGE_DTYPE:
		return edges
	out = np.zeros(len(edges), dtype=EDGE_DTYPE)
	for k, e in enumerate(edges):
		e = OrientedEdge(*e)
		out[k] = (e.v0, e.v1, e.v2, e.label)
	return out


def peel_in_memory(edges, m, memory_budget=None):
	"""
	Peel a 3-hypergraph in memory

	Args:
		edges: EDGE_DTYPE array or sequence of OrientedEdge, all valid, vertices < m
		m (int): Vertex count
		memory_budget (int): Optional cap on the estimated working set

	Returns:
		PeelResult: Peeled, or TwoCore with the residual edge count
	"""
	edges = _as_edge_array(edges)
	n = len(edges)

	if memory_budget is not None and working_set_bytes(n, m) > memory_budget:
		throw(
			f"In-memory peeling of {n} edges needs ~{working_set_bytes(n, m)} bytes, budget is {memory_budget}",
			MemoryBudgetExceeded,
		)

	if n:
		v0, v1, v2 = edges["v0"], edges["v1"], edges["v2"]
		if np.any(v1 >= v2) or np.any(v0 == v1) or np.any(v0 == v2):
			throw("Input contains invalid orientations", ContractViolation)
		if max(int(v0.max()), int(v2.max())) >= m:
			throw(f"Vertex id out of range for m={m}", ContractViolation)

	# Packed incidence lists for every vertex, built from all three orientations
	rows = np.sort(np.stack([edges["v0"], edges["v1"], edges["v2"]], axis=1), axis=1)
	degree = np.zeros(m, dtype=np.int64)
	xv1 = np.zeros(m, dtype=np.uint64)
	xv2 = np.zeros(m, dtype=np.uint64)
	xlabel = np.zeros(m, dtype=np.uint64)
	for i in range(R):
		others = [j for j in range(R) if j != i]
		first = rows[:, i]
		np.add.at(degree, first, 1)
		np.bitwise_xor.at(xv1, first, rows[:, others[0]])
		np.bitwise_xor.at(xv2, first, rows[:, others[1]])
		np.bitwise_xor.at(xlabel, first, edges["label"])

	# Python lists: scalar access in the loop below is much faster than on arrays
	degree = degree.tolist()
	xv1 = xv1.tolist()
	xv2 = xv2.tolist()
	xlabel = xlabel.tolist()

	order = []
	layer_sizes = []
	frontier = [v for v, d in enumerate(degree) if d == 1]

	while frontier:
		next_frontier = []
		peeled_before = len(order)

		# Ascending order: an edge is taken from its smallest degree-1 vertex
		for v in frontier:
			if degree[v] != 1:
				continue

			a, b, label = xv1[v], xv2[v], xlabel[v]
			order.append((v, a, b, label))
			degree[v] = 0
			xv1[v] = xv2[v] = xlabel[v] = 0

			for w, other in ((a, b), (b, a)):
				lo, hi = (v, other) if v < other else (other, v)
				degree[w] -= 1
				xv1[w] ^= lo
				xv2[w] ^= hi
				xlabel[w] ^= label
				if degree[w] == 1:
					next_frontier.append(w)

		if len(order) > peeled_before:
			layer_sizes.append(len(order) - peeled_before)
		frontier = sorted(next_frontier)

	order = np.array(order, dtype=EDGE_DTYPE) if order else np.zeros(0, dtype=EDGE_DTYPE)
	core_size = sum(degree) // R

	status = PeelStatus.PEELED if core_size == 0 else PeelStatus.TWO_CORE
	scanphf.logger("inmem_peeler").debug(
		f"Peeled {len(order)} of {n} edges in {len(layer_sizes)} generations ({status.value})"
	)
	return PeelResult(status=status, order=order, core_size=core_size, layer_sizes=layer_sizes)

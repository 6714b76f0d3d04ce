"""
Hypergraph Algebra
Oriented 3-edges, packed incidence lists (the XOR trick) and their array forms
"""

from typing import NamedTuple

import numpy as np

from scanphf import throw
from scanphf.exceptions import ContractViolation, CorruptStreamError

# Edge arity. Everything below is written for 3-hypergraphs; R marks the places that depend on it.
R = 3

EDGE_DTYPE = np.dtype([("v0", "<u8"), ("v1", "<u8"), ("v2", "<u8"), ("label", "<u8")])
INCIDENCE_DTYPE = np.dtype(
	[("v0", "<u8"), ("d", "<u4"), ("xv1", "<u8"), ("xv2", "<u8"), ("xlabel", "<u8")]
)


class OrientedEdge(NamedTuple):
	"""An edge with a distinguished first vertex; valid when v1 < v2"""

	v0: int
	v1: int
	v2: int
	label: int = 0

	def is_valid(self):
		return self.v1 < self.v2 and self.v0 != self.v1 and self.v0 != self.v2


class PackedIncidenceList(NamedTuple):
	"""Incidence list of v0: degree plus positionwise XOR of the incident oriented edges"""

	v0: int
	d: int = 0
	xv1: int = 0
	xv2: int = 0
	xlabel: int = 0


def _require_valid(e):
	if not e.is_valid():
		throw(f"Not a valid orientation: {tuple(e)}", ContractViolation)


def canonical_of(e):
	"""
	Canonical (0-th) orientation: vertices in ascending order

	Args:
		e (OrientedEdge): Valid orientation

	Returns:
		OrientedEdge: Sorted orientation, label kept
	"""
	_require_valid(e)
	a, b, c = sorted((e.v0, e.v1, e.v2))
	return OrientedEdge(a, b, c, e.label)


def orientations_of(e):
	"""The 0-th, 1st and 2nd orientations of the edge of `e`; the i-th starts with its i-th smallest vertex"""
	a, b, c, label = canonical_of(e)
	return (
		OrientedEdge(a, b, c, label),
		OrientedEdge(b, a, c, label),
		OrientedEdge(c, a, b, label),
	)


def add_edge(incidence, e):
	"""
	Add an oriented edge to the incidence list of its first vertex

	Args:
		incidence (PackedIncidenceList): List of e.v0
		e (OrientedEdge): Valid orientation starting at incidence.v0

	Returns:
		PackedIncidenceList: Updated list
	"""
	_require_valid(e)
	if e.v0 != incidence.v0:
		throw(f"Edge {tuple(e)} does not start at vertex {incidence.v0}", ContractViolation)
	return PackedIncidenceList(
		incidence.v0,
		incidence.d + 1,
		incidence.xv1 ^ e.v1,
		incidence.xv2 ^ e.v2,
		incidence.xlabel ^ e.label,
	)


def delete_edge(incidence, e):
	"""Remove an oriented edge known to be in the list; a zero degree means the stream is corrupt"""
	if e.v0 != incidence.v0:
		throw(f"Edge {tuple(e)} does not start at vertex {incidence.v0}", ContractViolation)
	if incidence.d == 0:
		throw(f"Degree underflow at vertex {incidence.v0}", CorruptStreamError)
	return PackedIncidenceList(
		incidence.v0,
		incidence.d - 1,
		incidence.xv1 ^ e.v1,
		incidence.xv2 ^ e.v2,
		incidence.xlabel ^ e.label,
	)


def retrieve_edge(incidence):
	"""The only edge of a degree-1 list"""
	if incidence.d != 1:
		throw(f"Cannot retrieve an edge from a list of degree {incidence.d}", ContractViolation)
	return OrientedEdge(incidence.v0, incidence.xv1, incidence.xv2, incidence.xlabel)


def orientation_index(v0, m):
	"""Index i of the orientation whose first vertex is v0 (the part holding v0); works on arrays"""
	return v0 // (m // R)


# Array forms


def edge_array(rows, labels=None):
	"""Build an EDGE_DTYPE array from an (n, 3) vertex array"""
	rows = np.asarray(rows, dtype=np.uint64).reshape(-1, R)
	edges = np.zeros(len(rows), dtype=EDGE_DTYPE)
	edges["v0"], edges["v1"], edges["v2"] = rows[:, 0], rows[:, 1], rows[:, 2]
	if labels is not None:
		edges["label"] = labels
	return edges


def canonical_rows(edges):
	"""(n, 3) array of each edge's vertices in ascending order"""
	return np.sort(np.stack([edges["v0"], edges["v1"], edges["v2"]], axis=1), axis=1)


def orient(edges, i):
	"""The i-th orientation of every edge"""
	rows = canonical_rows(edges)
	others = [j for j in range(R) if j != i]
	out = np.empty(len(edges), dtype=EDGE_DTYPE)
	out["v0"] = rows[:, i]
	out["v1"] = rows[:, others[0]]
	out["v2"] = rows[:, others[1]]
	out["label"] = edges["label"]
	return out


def expand_orientations(edges):
	"""All three valid orientations of every edge, orientation-major"""
	if not len(edges):
		return np.zeros(0, dtype=EDGE_DTYPE)
	return np.concatenate([orient(edges, i) for i in range(R)])


def fold_incidence(oriented):
	"""
	Group oriented edges sorted by v0 into packed incidence lists

	Args:
		oriented (np.ndarray): EDGE_DTYPE array sorted by v0

	Returns:
		np.ndarray: INCIDENCE_DTYPE array, one record per distinct v0
	"""
	if not len(oriented):
		return np.zeros(0, dtype=INCIDENCE_DTYPE)

	v0 = oriented["v0"]
	starts = np.flatnonzero(np.concatenate(([True], v0[1:] != v0[:-1])))
	lists = np.zeros(len(starts), dtype=INCIDENCE_DTYPE)
	lists["v0"] = v0[starts]
	lists["d"] = np.diff(np.append(starts, len(v0)))
	lists["xv1"] = np.bitwise_xor.reduceat(oriented["v1"], starts)
	lists["xv2"] = np.bitwise_xor.reduceat(oriented["v2"], starts)
	lists["xlabel"] = np.bitwise_xor.reduceat(oriented["label"], starts)
	return lists


def is_peeling_order(layers):
	"""
	Check that consecutive layers form a peeling order

	Every edge's v0 must appear in no other edge of the same or a later layer.

	Args:
		layers (list): EDGE_DTYPE arrays, first peeled layer first

	Returns:
		bool: True when the order is triangular
	"""
	layers = [layer for layer in layers if len(layer)]
	if not layers:
		return True

	edges = np.concatenate(layers)
	layer_count = np.uint64(len(layers))
	layer_of = np.concatenate([np.full(len(layer), i, dtype=np.uint64) for i, layer in enumerate(layers)])

	# Every (vertex, layer) incidence, sorted by vertex then layer
	vertices = np.concatenate([edges["v0"], edges["v1"], edges["v2"]])
	keys = np.sort(vertices * layer_count + np.concatenate([layer_of] * R))

	own = edges["v0"] * layer_count + layer_of
	first = np.searchsorted(keys, own, side="left")
	after = np.searchsorted(keys, own, side="right")

	# The free vertex occurs once in its own layer...
	if np.any(after - first != 1):
		return False

	# ...and never in a later one
	later = after < len(keys)
	return not np.any(keys[after[later]] // layer_count == edges["v0"][later])

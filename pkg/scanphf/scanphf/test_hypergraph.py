# Copyright (c) 2025, Umair Wali and Contributors
# See license.txt

import random
import unittest
from collections import Counter

import numpy as np

from scanphf.exceptions import ContractViolation, CorruptStreamError
from scanphf.scanphf.hypergraph import (
	EDGE_DTYPE,
	OrientedEdge,
	PackedIncidenceList,
	add_edge,
	canonical_of,
	canonical_rows,
	delete_edge,
	edge_array,
	expand_orientations,
	fold_incidence,
	is_peeling_order,
	orientation_index,
	orientations_of,
	retrieve_edge,
)


def random_tripartite_edges(n, m, seed):
	rng = np.random.default_rng(seed)
	p = m // 3
	rows = np.stack([rng.integers(0, p, n), rng.integers(p, 2 * p, n), rng.integers(2 * p, m, n)], axis=1)
	return edge_array(rows, np.arange(n))


class TestOrientations(unittest.TestCase):
	def test_orientations_of(self):
		e = OrientedEdge(2, 5, 9)
		self.assertEqual(
			orientations_of(e),
			(OrientedEdge(2, 5, 9), OrientedEdge(5, 2, 9), OrientedEdge(9, 2, 5)),
		)

	def test_canonical_of(self):
		self.assertEqual(canonical_of(OrientedEdge(5, 2, 9)), OrientedEdge(2, 5, 9))
		self.assertEqual(canonical_of(OrientedEdge(2, 5, 9)), OrientedEdge(2, 5, 9))
		self.assertEqual(canonical_of(OrientedEdge(9, 2, 5, 4)), OrientedEdge(2, 5, 9, 4))

	def test_orientations_share_canonical(self):
		rng = random.Random(3)
		for _ in range(200):
			a, b, c = sorted(rng.sample(range(1000), 3))
			e = OrientedEdge(a, b, c, rng.randrange(100))
			for o in orientations_of(e):
				self.assertTrue(o.is_valid())
				self.assertEqual(canonical_of(o), e)

	def test_invalid_orientation_rejected(self):
		with self.assertRaises(ContractViolation):
			canonical_of(OrientedEdge(2, 9, 5))
		with self.assertRaises(ContractViolation):
			canonical_of(OrientedEdge(2, 2, 5))

	def test_expand_groups_three_per_edge(self):
		edges = random_tripartite_edges(500, 900, 1)
		oriented = expand_orientations(edges)
		self.assertEqual(len(oriented), 1500)
		self.assertTrue(np.all(oriented["v1"] < oriented["v2"]))
		groups = Counter(map(tuple, canonical_rows(oriented).tolist()))
		self.assertTrue(all(count % 3 == 0 for count in groups.values()))
		self.assertEqual(sum(groups.values()), 1500)

	def test_tripartite_canonical_is_identity(self):
		edges = random_tripartite_edges(100, 300, 2)
		rows = canonical_rows(edges)
		self.assertTrue(np.array_equal(rows[:, 0], edges["v0"]))
		self.assertTrue(np.array_equal(rows[:, 2], edges["v2"]))

	def test_orientation_index(self):
		self.assertEqual(orientation_index(0, 9), 0)
		self.assertEqual(orientation_index(5, 9), 1)
		self.assertEqual(orientation_index(8, 9), 2)
		self.assertTrue(np.array_equal(orientation_index(np.array([0, 3, 6], dtype=np.uint64), 9), [0, 1, 2]))


class TestPackedIncidenceList(unittest.TestCase):
	def test_add(self):
		lst = add_edge(PackedIncidenceList(7), OrientedEdge(7, 2, 5))
		self.assertEqual(lst, PackedIncidenceList(7, 1, 2, 5))
		lst = add_edge(lst, OrientedEdge(7, 3, 6))
		self.assertEqual(lst, PackedIncidenceList(7, 2, 1, 3))

	def test_delete(self):
		lst = delete_edge(PackedIncidenceList(7, 2, 1, 3), OrientedEdge(7, 3, 6))
		self.assertEqual(lst, PackedIncidenceList(7, 1, 2, 5))
		self.assertEqual(delete_edge(lst, OrientedEdge(7, 2, 5)), PackedIncidenceList(7, 0, 0, 0))

	def test_delete_underflow(self):
		with self.assertRaises(CorruptStreamError):
			delete_edge(PackedIncidenceList(7), OrientedEdge(7, 2, 5))

	def test_add_then_delete_is_identity(self):
		lst = PackedIncidenceList(7, 3, 11, 13, 4)
		e = OrientedEdge(7, 20, 30, 9)
		self.assertEqual(delete_edge(add_edge(lst, e), e), lst)

	def test_add_wrong_vertex(self):
		with self.assertRaises(ContractViolation):
			add_edge(PackedIncidenceList(1), OrientedEdge(7, 2, 5))

	def test_retrieve(self):
		self.assertEqual(retrieve_edge(PackedIncidenceList(7, 1, 2, 5)), OrientedEdge(7, 2, 5))
		with self.assertRaises(ContractViolation):
			retrieve_edge(PackedIncidenceList(7, 2, 1, 3))

	def test_retrieve_last_survivor(self):
		rng = random.Random(11)
		for _ in range(1000):
			k = rng.randrange(1, 12)
			edges = []
			for _ in range(k):
				a, b = sorted(rng.sample(range(8, 5000), 2))
				edges.append(OrientedEdge(7, a, b, rng.randrange(1 << 20)))
			lst = PackedIncidenceList(7)
			for e in edges:
				lst = add_edge(lst, e)
			survivor = edges.pop(rng.randrange(k))
			for e in edges:
				lst = delete_edge(lst, e)
			self.assertEqual(retrieve_edge(lst), survivor)

	def test_fold_matches_scalar_adds(self):
		edges = random_tripartite_edges(300, 300, 4)
		oriented = expand_orientations(edges)
		oriented = oriented[np.argsort(oriented["v0"], kind="stable")]
		lists = fold_incidence(oriented)

		expected = {}
		for row in oriented.tolist():
			e = OrientedEdge(*row)
			expected[e.v0] = add_edge(expected.get(e.v0, PackedIncidenceList(e.v0)), e)
		self.assertEqual(len(lists), len(expected))
		for record in lists.tolist():
			self.assertEqual(PackedIncidenceList(*record), expected[record[0]])
		self.assertEqual(int(lists["d"].sum()), 900)

	def test_fold_empty(self):
		self.assertEqual(len(fold_incidence(np.zeros(0, dtype=EDGE_DTYPE))), 0)


class TestPeelingOrder(unittest.TestCase):
	def test_single_edge(self):
		self.assertTrue(is_peeling_order([edge_array([[0, 3, 6]])]))

	def test_free_vertex_reused_later(self):
		first = edge_array([[0, 3, 6]])
		later = edge_array([[0, 4, 7]])
		self.assertFalse(is_peeling_order([first, later]))
		self.assertTrue(is_peeling_order([later[:0], first]))

	def test_free_vertex_shared_in_layer(self):
		self.assertFalse(is_peeling_order([edge_array([[0, 3, 6], [0, 4, 7]])]))

	def test_earlier_non_free_vertices_may_repeat(self):
		# (1, 3, 6) frees 1; its other vertices 3 and 6 are peeled later from 3
		layers = [edge_array([[1, 3, 6]]), edge_array([[3, 0, 6]])]
		self.assertTrue(is_peeling_order(layers))
		self.assertFalse(is_peeling_order(layers[::-1]))

	def test_empty(self):
		self.assertTrue(is_peeling_order([]))


if __name__ == "__main__":
	unittest.main()

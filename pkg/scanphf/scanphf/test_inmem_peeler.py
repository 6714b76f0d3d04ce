# Copyright (c) 2025, Umair Wali and Contributors
# See license.txt

import os
import unittest

import numpy as np

from scanphf.exceptions import ContractViolation, MemoryBudgetExceeded
from scanphf.scanphf.hashing import vertex_count
from scanphf.scanphf.hypergraph import OrientedEdge, canonical_rows, edge_array, is_peeling_order
from scanphf.scanphf.inmem_peeler import PeelStatus, peel_in_memory, working_set_bytes
from scanphf.scanphf.test_hypergraph import random_tripartite_edges

SLOW = os.environ.get("SCANPHF_SLOW_TESTS") == "1"


def naive_peel(rows):
	"""Repeatedly remove any edge holding a degree-1 vertex; returns the residual edge count"""
	live = [tuple(r) for r in rows]
	while True:
		degree = {}
		for e in live:
			for v in e:
				degree[v] = degree.get(v, 0) + 1
		kept = [e for e in live if all(degree[v] > 1 for v in e)]
		if len(kept) == len(live):
			return len(live)
		live = kept


class TestPeelInMemory(unittest.TestCase):
	def test_complete_graph_on_four_vertices(self):
		edges = [OrientedEdge(0, 1, 2), OrientedEdge(0, 1, 3), OrientedEdge(0, 2, 3), OrientedEdge(1, 2, 3)]
		result = peel_in_memory(edges, 4)
		self.assertEqual(result.status, PeelStatus.TWO_CORE)
		self.assertEqual(result.core_size, 4)
		self.assertEqual(len(result.order), 0)

	def test_single_edge(self):
		result = peel_in_memory(edge_array([[0, 3, 6]]), 9)
		self.assertEqual(result.status, PeelStatus.PEELED)
		self.assertEqual(result.order.tolist(), [(0, 3, 6, 0)])
		self.assertEqual(result.layer_sizes, [1])

	def test_empty(self):
		result = peel_in_memory(edge_array(np.zeros((0, 3))), 9)
		self.assertEqual(result.status, PeelStatus.PEELED)
		self.assertEqual(result.rounds, 0)

	def test_order_is_triangular(self):
		edges = random_tripartite_edges(10**4, 13500, 5)
		result = peel_in_memory(edges, 13500)
		self.assertEqual(result.status, PeelStatus.PEELED)
		self.assertEqual(len(result.order), 10**4)
		self.assertEqual(sum(result.layer_sizes), 10**4)
		self.assertTrue(is_peeling_order(result.layers()))
		# Peeled edges are the input edges, labels carried along
		self.assertEqual(
			sorted(map(tuple, canonical_rows(result.order).tolist())),
			sorted(map(tuple, canonical_rows(edges).tolist())),
		)
		self.assertEqual(sorted(result.order["label"].tolist()), list(range(10**4)))

	def test_layers_reversed(self):
		result = peel_in_memory(random_tripartite_edges(2000, 2460, 6), 2460)
		layers = result.layers()
		self.assertEqual([len(x) for x in result.iter_layers_reversed()], [len(x) for x in layers[::-1]])

	def test_agrees_with_naive_peeler(self):
		for seed in range(30):
			for gamma in (1.1, 1.23):
				n = 300
				m = int(gamma * n) // 3 * 3
				edges = random_tripartite_edges(n, m, seed)
				result = peel_in_memory(edges, m)
				residual = naive_peel(canonical_rows(edges).tolist())
				self.assertEqual(result.core_size, residual)
				self.assertEqual(result.status == PeelStatus.PEELED, residual == 0)

	def test_rejects_invalid_orientation(self):
		with self.assertRaises(ContractViolation):
			peel_in_memory([OrientedEdge(0, 6, 3)], 9)
		with self.assertRaises(ContractViolation):
			peel_in_memory([OrientedEdge(0, 3, 9)], 9)

	def test_memory_budget(self):
		edges = random_tripartite_edges(1000, 1500, 7)
		with self.assertRaises(MemoryBudgetExceeded):
			peel_in_memory(edges, 1500, memory_budget=working_set_bytes(1000, 1500) - 1)
		self.assertEqual(peel_in_memory(edges, 1500, working_set_bytes(1000, 1500)).status, PeelStatus.PEELED)


@unittest.skipUnless(SLOW, "set SCANPHF_SLOW_TESTS=1")
class TestPeelInMemoryAtScale(unittest.TestCase):
	def test_peels_almost_always_above_threshold(self):
		n = 10**5
		m = vertex_count(n, 1.23)
		peeled = 0
		for seed in range(100):
			result = peel_in_memory(random_tripartite_edges(n, m, 700 + seed), m)
			peeled += result.status == PeelStatus.PEELED
		self.assertGreaterEqual(peeled, 99)


if __name__ == "__main__":
	unittest.main()

# Copyright (c) 2025, Umair Wali and Contributors
# See license.txt

import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np

from scanphf.config.settings import ScanphfSettings
from scanphf.exceptions import ContractViolation
from scanphf.scanphf.codecs import read_incidence_stream
from scanphf.scanphf.ext_peeler import ExternalPeeler, LayerManifest, peel_external, remove_workspace
from scanphf.scanphf.extsort import IOCounters
from scanphf.scanphf.hashing import TripartiteEdgeHasher, hash_edges, vertex_count
from scanphf.scanphf.hypergraph import (
	canonical_rows,
	edge_array,
	expand_orientations,
	fold_incidence,
	is_peeling_order,
)
from scanphf.scanphf.inmem_peeler import PeelStatus, peel_in_memory
from scanphf.scanphf.test_hypergraph import random_tripartite_edges

SLOW = os.environ.get("SCANPHF_SLOW_TESTS") == "1"


def small_settings(**overrides):
	return ScanphfSettings(
		**{"memory_budget": 16 << 20, "buffer_bytes": 4096, "block_records": 256, "workspace": "", **overrides}
	)


def naive_E0(edges):
	oriented = expand_orientations(edges)
	return fold_incidence(oriented[np.argsort(oriented["v0"], kind="stable")])


def layer_sets(layers):
	return [sorted(map(tuple, layer[["v0", "v1", "v2"]].tolist())) for layer in layers]


def list_bits(stats):
	return stats.gamma_bits + stats.unary_bits + stats.fixed_bits


def scanned_bits(manifest):
	return sum(list_bits(stats) for stats in manifest.rounds)


class PeelerTestCase(unittest.TestCase):
	def setUp(self):
		self._tmp = tempfile.TemporaryDirectory()
		self.workspace = Path(self._tmp.name)
		self.settings = small_settings()

	def tearDown(self):
		self._tmp.cleanup()

	def peel(self, edges, m, label_bits=0, counters=None, name="run"):
		return peel_external(edges, m, self.settings, self.workspace / name, label_bits, counters)

	def forward_layers(self, manifest):
		chunk = max(manifest.layer_sizes, default=1)
		return list(manifest.iter_layers_reversed(chunk_records=chunk))[::-1]


class TestBuildE0(PeelerTestCase):
	def make_peeler(self, edges, m, label_bits=0):
		peeler = ExternalPeeler(m, self.workspace / "e0", self.settings, label_bits)
		self.addCleanup(peeler.close)
		peeler.load_edges(edges)
		peeler.build_E0()
		_, lists = read_incidence_stream(peeler.E)
		return peeler, lists

	def test_single_edge(self):
		_, lists = self.make_peeler(edge_array([[0, 3, 6]]), 9)
		self.assertEqual(lists["v0"].tolist(), [0, 3, 6])
		self.assertEqual(lists["d"].tolist(), [1, 1, 1])
		self.assertEqual(lists[["xv1", "xv2"]].tolist(), [(3, 6), (0, 6), (0, 3)])

	def test_matches_naive_construction(self):
		m = 12300
		edges = random_tripartite_edges(10**4, m, 21)
		peeler, lists = self.make_peeler(edges, m, label_bits=14)
		expected = naive_E0(edges)
		self.assertEqual(lists.tolist(), expected.tolist())
		self.assertEqual(int(lists["d"].sum()), 3 * 10**4)
		self.assertEqual(peeler.e_tally.unary_bits, 3 * 10**4)
		self.assertEqual(peeler.lists, len(expected))

	def test_wide_edges_without_packing(self):
		m = 3 * (1 << 22)
		edges = random_tripartite_edges(2000, m, 22)
		_, lists = self.make_peeler(edges, m, label_bits=11)
		self.assertEqual(lists.tolist(), naive_E0(edges).tolist())

	def test_rejects_non_tripartite_edges(self):
		peeler = ExternalPeeler(9, self.workspace / "bad", self.settings)
		self.addCleanup(peeler.close)
		with self.assertRaises(ContractViolation):
			peeler.load_edges(edge_array([[0, 1, 2]]))


class TestPeelExternal(PeelerTestCase):
	def test_single_edge(self):
		manifest = self.peel(edge_array([[0, 3, 6]]), 9)
		self.assertEqual(manifest.status, PeelStatus.PEELED)
		self.assertEqual(manifest.layer_sizes, [1])
		self.assertEqual(len(manifest.rounds), 1)
		self.assertEqual(self.forward_layers(manifest)[0][["v0", "v1", "v2"]].tolist(), [(0, 3, 6)])

	def test_two_core_fixed_point(self):
		# Every vertex has degree two, so no round can peel anything
		edges = edge_array([[0, 3, 6], [0, 4, 7], [1, 3, 7], [1, 4, 6]])
		manifest = self.peel(edges, 9)
		self.assertEqual(manifest.status, PeelStatus.TWO_CORE)
		self.assertEqual(manifest.core_size, 4)
		self.assertEqual(len(manifest.rounds), 1)
		self.assertEqual(manifest.layers, [])

	def test_empty_graph(self):
		manifest = self.peel(edge_array(np.zeros((0, 3))), 9)
		self.assertEqual(manifest.status, PeelStatus.PEELED)
		self.assertEqual(manifest.layer_sizes, [])

	def test_partial_peel_leaves_core(self):
		core = [[0, 3, 6], [0, 4, 7], [1, 3, 7], [1, 4, 6]]
		manifest = self.peel(edge_array([*core, [2, 5, 8]]), 9)
		self.assertEqual(manifest.status, PeelStatus.TWO_CORE)
		self.assertEqual(manifest.core_size, 4)
		self.assertEqual(manifest.layer_sizes, [1])

	def test_agrees_with_in_memory_peeler(self):
		for seed in range(12):
			gamma = (1.15, 1.23, 1.3)[seed % 3]
			n = 2000
			m = vertex_count(n, gamma)
			edges = random_tripartite_edges(n, m, 100 + seed)
			expected = peel_in_memory(edges, m)
			manifest = self.peel(edges, m, name=f"run-{seed}")
			self.assertEqual(manifest.status, expected.status, f"seed {seed}")
			self.assertEqual(manifest.layer_sizes, expected.layer_sizes, f"seed {seed}")
			layers = self.forward_layers(manifest)
			self.assertEqual(layer_sets(layers), layer_sets(expected.layers()), f"seed {seed}")
			self.assertTrue(is_peeling_order(layers))
			if manifest.status == PeelStatus.TWO_CORE:
				self.assertEqual(manifest.core_size, expected.core_size)
			remove_workspace(manifest)

	def test_labels_follow_edges(self):
		m = 6000
		edges = random_tripartite_edges(4000, m, 31)
		manifest = self.peel(edges, m, label_bits=12)
		self.assertEqual(manifest.status, PeelStatus.PEELED)
		peeled = np.concatenate(self.forward_layers(manifest))
		labels = peeled["label"].astype(np.int64)
		self.assertEqual(sorted(labels.tolist()), list(range(4000)))
		self.assertTrue(np.array_equal(canonical_rows(peeled), canonical_rows(edges[labels])))

	def test_round_statistics_and_io(self):
		n, m = 10**4, 15000
		counters = IOCounters()
		manifest = self.peel(random_tripartite_edges(n, m, 41), m, counters=counters)
		self.assertEqual(manifest.status, PeelStatus.PEELED)
		self.assertEqual(sum(manifest.layer_sizes), n)

		live = n
		for stats in manifest.rounds:
			self.assertEqual(stats.live_edges, live)
			self.assertEqual(stats.unary_bits, 3 * live)
			self.assertLessEqual(stats.gamma_bits, 2 * m)
			self.assertLessEqual(stats.unary_bits, 3 * n)
			# D holds one entry per degree-one vertex, U three per peeled edge
			self.assertLessEqual(stats.peeled, stats.degree_ones)
			self.assertLessEqual(stats.degree_ones, 3 * stats.peeled)
			live -= stats.peeled
		self.assertEqual(live, 0)
		self.assertLessEqual(sum(stats.degree_ones for stats in manifest.rounds), 3 * n)
		self.assertEqual(sum(3 * stats.peeled for stats in manifest.rounds), 3 * n)
		self.assertLessEqual(scanned_bits(manifest), 8 * list_bits(manifest.rounds[0]))

		rounds = len(manifest.rounds)
		self.assertLessEqual(rounds, 100)
		self.assertEqual(counters.random_seeks, 0)
		self.assertLessEqual(counters.rewinds - counters.sort_rewinds, 6 * rounds + 10)
		self.assertLessEqual(counters.rewinds, 11 * rounds + 14)
		bound = 1.2 * (5.46 + 11.46 * math.ceil(math.log2(m))) * n
		self.assertLessEqual(8 * manifest.peak_temp_bytes, bound)

	def test_layers_shrink_every_other_round(self):
		n = 20000
		m = vertex_count(n, 1.5)
		for seed in range(20):
			result = peel_in_memory(random_tripartite_edges(n, m, 300 + seed), m)
			self.assertEqual(result.status, PeelStatus.PEELED, f"seed {seed}")
			sizes = result.layer_sizes
			for i in range(1, len(sizes) - 2):
				if sizes[i] >= 100:
					self.assertLess(sizes[i + 2], sizes[i], f"seed {seed}, layer {i}: {sizes}")

	def test_manifest_round_trip(self):
		m = 3000
		manifest = self.peel(random_tripartite_edges(2000, m, 51), m)
		path = Path(manifest.edges_path).parent / "manifest.json"
		self.assertTrue(path.exists())
		loaded = LayerManifest.read(path)
		self.assertEqual(loaded.to_dict(), manifest.to_dict())
		remove_workspace(manifest)
		self.assertFalse(path.exists())

	def test_chunked_input(self):
		m = 3000
		edges = random_tripartite_edges(2000, m, 61)
		whole = self.peel(edges, m, name="whole")
		chunked = self.peel((edges[i : i + 300] for i in range(0, 2000, 300)), m, name="chunked")
		self.assertEqual(whole.layer_sizes, chunked.layer_sizes)
		self.assertEqual(layer_sets(self.forward_layers(whole)), layer_sets(self.forward_layers(chunked)))


@unittest.skipUnless(SLOW, "set SCANPHF_SLOW_TESTS=1")
class TestPeelExternalAtScale(PeelerTestCase):
	def test_million_keys(self):
		n = 10**6
		m = vertex_count(n, 1.23)
		keys = (f"url-{i}".encode() for i in range(n))
		edges = edge_array(hash_edges(TripartiteEdgeHasher(2024, m), keys))
		self.settings = small_settings(memory_budget=256 << 20, buffer_bytes=1 << 20, block_records=16384)
		counters = IOCounters()
		manifest = self.peel(edges, m, counters=counters)

		self.assertEqual(manifest.status, PeelStatus.PEELED)
		rounds = len(manifest.rounds)
		self.assertLessEqual(rounds, 100)
		self.assertEqual(counters.random_seeks, 0)
		self.assertLessEqual(counters.rewinds - counters.sort_rewinds, 6 * rounds + 10)
		self.assertLessEqual(counters.rewinds, 11 * rounds + 14)
		for stats in manifest.rounds:
			self.assertLessEqual(stats.gamma_bits, 2 * m)
			self.assertLessEqual(stats.unary_bits, 3 * n)
		self.assertLessEqual(scanned_bits(manifest), 40 * list_bits(manifest.rounds[0]))
		bound = 1.2 * (5.46 + 11.46 * math.ceil(math.log2(m))) * n
		self.assertLessEqual(8 * manifest.peak_temp_bytes, bound)

	def test_agrees_with_in_memory_peeler_near_threshold(self):
		n = 10**4
		m = vertex_count(n, 1.23)
		for seed in range(50):
			edges = random_tripartite_edges(n, m, 500 + seed)
			expected = peel_in_memory(edges, m)
			manifest = self.peel(edges, m, name=f"run-{seed}")
			self.assertEqual(manifest.status, expected.status, f"seed {seed}")
			self.assertEqual(manifest.core_size, expected.core_size, f"seed {seed}")
			layers = self.forward_layers(manifest)
			self.assertEqual(layer_sets(layers), layer_sets(expected.layers()), f"seed {seed}")
			remove_workspace(manifest)


if __name__ == "__main__":
	unittest.main()

// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "spell/graph.hpp"
#include "test_util.hpp"

using spell::Edge;
using spell::EdgeSet;
using spell::EdgeVariant;
using spell::ErrorKind;
using spell::FaceBox;
using testutil::kind_of;

namespace {

FaceBox face(const std::string& id, double t, const std::string& video = "v") {
  FaceBox b;
  b.video_id = video;
  b.time = t;
  b.entity_id = id;
  b.box = {0.5, 0.5, 0.1, 0.1};
  return b;
}

std::vector<FaceBox> ordered(std::vector<FaceBox> boxes) {
  return spell::order_and_chunk(std::move(boxes), 100000).front().nodes;
}

std::set<std::pair<std::uint32_t, std::uint32_t>> pair_set(const EdgeSet& s) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> out;
  for (const Edge& e : s.edges) out.insert({e.src, e.dst});
  return out;
}

}  // namespace

TEST_SUITE("graph") {
  TEST_CASE("hand example: one identity over time plus a same-frame neighbour") {
    // Sorted: A@0 (0), B@0 (1), A@0.5 (2), A@1.5 (3); node 3 is 1.0 s from node 2.
    const auto nodes =
        ordered({face("A", 0.0), face("A", 0.5), face("A", 1.5), face("B", 0.0)});
    REQUIRE(nodes[1].entity_id == "B");

    const auto und = pair_set(spell::build_edges(nodes, 0.9, EdgeVariant::kUndirected));
    const std::set<std::pair<std::uint32_t, std::uint32_t>> expect_und = {
        {0, 0}, {1, 1}, {2, 2}, {3, 3}, {0, 1}, {1, 0}, {0, 2}, {2, 0}};
    CHECK(und == expect_und);

    const auto fwd = pair_set(spell::build_edges(nodes, 0.9, EdgeVariant::kForward));
    const std::set<std::pair<std::uint32_t, std::uint32_t>> expect_fwd = {
        {0, 0}, {1, 1}, {2, 2}, {3, 3}, {0, 1}, {1, 0}, {0, 2}};
    CHECK(fwd == expect_fwd);

    const auto bwd = pair_set(spell::build_edges(nodes, 0.9, EdgeVariant::kBackward));
    const std::set<std::pair<std::uint32_t, std::uint32_t>> expect_bwd = {
        {0, 0}, {1, 1}, {2, 2}, {3, 3}, {0, 1}, {1, 0}, {2, 0}};
    CHECK(bwd == expect_bwd);
  }

  TEST_CASE("threshold boundary is inclusive and the frame tolerance applies") {
    const auto nodes = ordered({face("A", 0.0), face("A", 0.9), face("A", 1.8000001)});
    const auto und = pair_set(spell::build_edges(nodes, 0.9, EdgeVariant::kUndirected));
    CHECK(und.count({0, 1}) == 1);
    CHECK(und.count({1, 2}) == 1);
    CHECK(und.count({0, 2}) == 0);

    const auto near = ordered({face("A", 0.0), face("B", 5e-7)});
    CHECK(spell::build_edges(near, 0.0, EdgeVariant::kUndirected).size() == 4);
    const auto apart = ordered({face("A", 0.0), face("B", 1e-3)});
    CHECK(spell::build_edges(apart, 0.9, EdgeVariant::kUndirected).size() == 2);
  }

  TEST_CASE("tau = 0 keeps only same-frame edges and self-loops") {
    std::mt19937_64 rng(7);
    const auto nodes = ordered(oracle::random_boxes(rng, 120, 4));
    for (const Edge& e : spell::build_edges(nodes, 0.0, EdgeVariant::kUndirected).edges) {
      CHECK(std::abs(nodes[e.src].time - nodes[e.dst].time) <= spell::kSameFrameTolerance);
    }
  }

  TEST_CASE("edge sets equal the pairwise oracle on random box sets") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> size(1, 120);
    std::uniform_real_distribution<double> tau(0.0, 2.0);
    for (int trial = 0; trial < 40; ++trial) {
      const auto nodes = ordered(oracle::random_boxes(rng, size(rng), 5));
      const double t = trial % 5 == 0 ? 0.0 : tau(rng);
      for (EdgeVariant v : spell::kAllVariants) {
        const auto got = spell::build_edges(nodes, t, v);
        CHECK(oracle::pairs_of(got) == oracle::edges(nodes, t, v));
        CHECK(std::is_sorted(got.edges.begin(), got.edges.end()));
      }
    }
  }

  TEST_CASE("structural invariants on random chunks") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 30; ++trial) {
      spell::Chunk chunk;
      chunk.nodes = ordered(oracle::random_boxes(rng, 80, 3));
      spell::build_all_edges(chunk, 0.5);
      const auto& e = chunk.edges;
      CHECK(spell::reversed(e.forward).edges == e.backward.edges);
      CHECK(spell::merged(e.forward, e.backward, EdgeVariant::kUndirected).edges ==
            e.undirected.edges);
      for (EdgeVariant v : spell::kAllVariants) {
        CHECK(e.get(v).self_loops() == chunk.node_count());
      }
      // Undirected edges come in both directions.
      CHECK(spell::reversed(e.undirected).edges == e.undirected.edges);
    }
  }

  TEST_CASE("edge count is monotone in tau") {
    std::mt19937_64 rng(17);
    const auto nodes = ordered(oracle::random_boxes(rng, 150, 4));
    for (EdgeVariant v : spell::kAllVariants) {
      std::size_t last = 0;
      for (double tau : {0.0, 0.1, 0.3, 0.5, 0.9, 1.5, 3.0, 10.0}) {
        const std::size_t count = spell::build_edges(nodes, tau, v).size();
        CHECK(count >= last);
        last = count;
      }
    }
  }

  TEST_CASE("chunking partitions the ordered boxes") {
    std::mt19937_64 rng(19);
    auto boxes = oracle::random_boxes(rng, 103, 4);
    for (std::size_t n : {1, 7, 10, 103, 500}) {
      const auto chunks = spell::order_and_chunk(boxes, n);
      CHECK(chunks.size() == (boxes.size() + n - 1) / n);
      std::vector<std::size_t> seen;
      double last_time = -1.0;
      for (std::size_t c = 0; c < chunks.size(); ++c) {
        CHECK(chunks[c].node_count() <= n);
        if (c + 1 < chunks.size()) CHECK(chunks[c].node_count() == n);
        for (const FaceBox& b : chunks[c].nodes) {
          CHECK(b.time >= last_time);
          last_time = b.time;
          seen.push_back(b.feature_index);
        }
      }
      std::sort(seen.begin(), seen.end());
      std::vector<std::size_t> all(boxes.size());
      std::iota(all.begin(), all.end(), 0);
      CHECK(seen == all);
    }
  }

  TEST_CASE("build_graphs groups by video and never links across chunks") {
    std::vector<FaceBox> boxes;
    for (int f = 0; f < 10; ++f) {
      boxes.push_back(face("A", f * 0.04, "v2"));
      boxes.push_back(face("A", f * 0.04, "v1"));
      boxes.push_back(face("B", f * 0.04, "v1"));
    }
    const auto chunks = spell::build_graphs(boxes, 8, 0.9);
    // v1 has 20 boxes -> 3 chunks, v2 has 10 -> 2 chunks.
    REQUIRE(chunks.size() == 5);
    CHECK(chunks[0].nodes[0].video_id == "v1");
    CHECK(chunks[3].nodes[0].video_id == "v2");
    const auto stats = spell::graph_stats(chunks);
    CHECK(stats.videos == 2);
    CHECK(stats.chunks == 5);
    CHECK(stats.nodes == 30);
    CHECK(stats.self_loops == 30);
    for (const auto& c : chunks) {
      for (const Edge& e : c.edges.undirected.edges) {
        CHECK(e.src < c.node_count());
        CHECK(e.dst < c.node_count());
      }
    }
    CHECK(stats.undirected_edges ==
          stats.self_loops + stats.same_frame_edges + stats.same_identity_edges);
  }

  TEST_CASE("mixed videos in one chunking call are rejected") {
    CHECK(kind_of([] { spell::order_and_chunk({face("A", 0, "x"), face("A", 1, "y")}, 4); }) ==
          ErrorKind::kValidation);
    CHECK(kind_of([] { spell::order_and_chunk({face("A", 0)}, 0); }) ==
          ErrorKind::kValidation);
    const auto nodes = ordered({face("A", 0.0)});
    CHECK(kind_of([&] { spell::build_edges(nodes, -0.1, EdgeVariant::kForward); }) ==
          ErrorKind::kValidation);
  }

  TEST_CASE("box validation") {
    auto b = face("A", 0.0);
    CHECK_NOTHROW(spell::validate(b));
    b.box.w = 1.5;
    CHECK(kind_of([&] { spell::validate(b); }) == ErrorKind::kValidation);
    b = face("A", -1.0);
    CHECK(kind_of([&] { spell::validate(b); }) == ErrorKind::kValidation);
    b = face("A", 0.0);
    b.label = 2;
    CHECK(kind_of([&] { spell::validate(b); }) == ErrorKind::kValidation);
  }

  TEST_CASE("adjacency lists mirror the edge list") {
    std::mt19937_64 rng(23);
    const auto set = oracle::random_graph(rng, 30, 0.2);
    const auto adj = spell::make_adjacency(set, 30);
    const auto nbrs = oracle::neighbours(set, 30);
    for (std::size_t v = 0; v < 30; ++v) {
      const auto got = adj.in_neighbors(v);
      CHECK(std::vector<std::uint32_t>(got.begin(), got.end()) == nbrs[v]);
    }
    CHECK(kind_of([&] { spell::make_adjacency(set, 29); }) == ErrorKind::kValidation);
  }

  TEST_CASE("edge dropout keeps self-loops, is seeded, and drops about p") {
    std::mt19937_64 rng(29);
    const auto set = oracle::random_graph(rng, 200, 0.3);
    const std::size_t loops = set.self_loops();
    const std::size_t others = set.size() - loops;

    const auto a = spell::edge_dropout(set, 0.2, 5);
    const auto b = spell::edge_dropout(set, 0.2, 5);
    const auto c = spell::edge_dropout(set, 0.2, 6);
    CHECK(a.edges == b.edges);
    CHECK(a.edges != c.edges);
    CHECK(a.self_loops() == loops);
    CHECK(std::includes(set.edges.begin(), set.edges.end(), a.edges.begin(), a.edges.end()));

    // Kept fraction within 5 standard deviations of 0.8.
    const double kept = double(a.size() - loops) / double(others);
    const double sd = std::sqrt(0.2 * 0.8 / double(others));
    CHECK(std::abs(kept - 0.8) < 5 * sd);

    CHECK(spell::edge_dropout(set, 0.0, 1).edges == set.edges);
    CHECK(kind_of([&] { spell::edge_dropout(set, 1.0, 1); }) == ErrorKind::kValidation);
  }
}

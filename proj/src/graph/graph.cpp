// SPDX-License-Identifier: Apache-2.0
#include "spell/graph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "spell/error.hpp"

namespace spell {

void validate(const FaceBox& face) {
  const auto where = [&] {
    return "(" + face.video_id + ", " + std::to_string(face.time) + ", " +
           face.entity_id + ")";
  };
  if (!std::isfinite(face.time) || face.time < 0.0) {
    fail(ErrorKind::kValidation, "face box " + where() + ": time must be >= 0");
  }
  const Box& b = face.box;
  for (double v : {b.cx, b.cy, b.w, b.h}) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      fail(ErrorKind::kValidation,
           "face box " + where() + ": box coordinates must lie in [0, 1]");
    }
  }
  if (b.w <= 0.0 || b.h <= 0.0) {
    fail(ErrorKind::kValidation,
         "face box " + where() + ": box width and height must be positive");
  }
  if (face.label && *face.label != 0 && *face.label != 1) {
    fail(ErrorKind::kValidation, "face box " + where() + ": label must be 0 or 1");
  }
}

const char* to_string(EdgeVariant v) noexcept {
  switch (v) {
    case EdgeVariant::kForward: return "forward";
    case EdgeVariant::kBackward: return "backward";
    case EdgeVariant::kUndirected: return "undirected";
  }
  return "?";
}

std::size_t EdgeSet::self_loops() const noexcept {
  return static_cast<std::size_t>(std::count_if(
      edges.begin(), edges.end(), [](const Edge& e) { return e.src == e.dst; }));
}

void normalize(EdgeSet& set) {
  std::sort(set.edges.begin(), set.edges.end());
  set.edges.erase(std::unique(set.edges.begin(), set.edges.end()),
                  set.edges.end());
}

EdgeSet reversed(const EdgeSet& set) {
  EdgeSet out;
  switch (set.variant) {
    case EdgeVariant::kForward: out.variant = EdgeVariant::kBackward; break;
    case EdgeVariant::kBackward: out.variant = EdgeVariant::kForward; break;
    case EdgeVariant::kUndirected: out.variant = EdgeVariant::kUndirected; break;
  }
  out.edges.reserve(set.edges.size());
  for (const Edge& e : set.edges) out.edges.push_back({e.dst, e.src});
  normalize(out);
  return out;
}

EdgeSet merged(const EdgeSet& a, const EdgeSet& b, EdgeVariant variant) {
  EdgeSet out{variant, {}};
  out.edges.reserve(a.size() + b.size());
  std::set_union(a.edges.begin(), a.edges.end(), b.edges.begin(),
                 b.edges.end(), std::back_inserter(out.edges));
  normalize(out);
  return out;
}

const EdgeSet& EdgeSets::get(EdgeVariant v) const noexcept {
  switch (v) {
    case EdgeVariant::kForward: return forward;
    case EdgeVariant::kBackward: return backward;
    case EdgeVariant::kUndirected: break;
  }
  return undirected;
}

EdgeSet& EdgeSets::get(EdgeVariant v) noexcept {
  return const_cast<EdgeSet&>(std::as_const(*this).get(v));
}

namespace {

bool time_order(const FaceBox& a, const FaceBox& b) {
  if (a.time != b.time) return a.time < b.time;
  return a.entity_id < b.entity_id;
}

}  // namespace

std::vector<Chunk> order_and_chunk(std::vector<FaceBox> boxes, std::size_t n) {
  if (n == 0) fail(ErrorKind::kValidation, "chunk size n must be >= 1");
  std::vector<Chunk> chunks;
  if (boxes.empty()) return chunks;
  const std::string& video = boxes.front().video_id;
  for (const FaceBox& b : boxes) {
    if (b.video_id != video) {
      fail(ErrorKind::kValidation, "order_and_chunk: mixed video ids '" +
                                       video + "' and '" + b.video_id + "'");
    }
  }
  std::stable_sort(boxes.begin(), boxes.end(), time_order);
  const std::size_t count = (boxes.size() + n - 1) / n;
  chunks.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    Chunk chunk;
    const auto begin = boxes.begin() + static_cast<std::ptrdiff_t>(c * n);
    const auto end =
        boxes.begin() +
        static_cast<std::ptrdiff_t>(std::min(boxes.size(), (c + 1) * n));
    chunk.nodes.assign(std::make_move_iterator(begin),
                       std::make_move_iterator(end));
    chunks.push_back(std::move(chunk));
  }
  return chunks;
}

bool connects(std::span<const FaceBox> nodes, std::size_t i, std::size_t j,
              double tau, EdgeVariant variant) noexcept {
  if (i == j) return true;
  const double delta = nodes[j].time - nodes[i].time;
  const bool same_frame = std::abs(delta) <= kSameFrameTolerance;
  const bool same_identity = nodes[i].entity_id == nodes[j].entity_id;
  const double window = tau + kSameFrameTolerance;
  switch (variant) {
    case EdgeVariant::kUndirected:
      return same_frame || (same_identity && std::abs(delta) <= window);
    case EdgeVariant::kForward:
      // Same-frame pairs satisfy the time condition in both directions, so
      // cross-identity same-frame edges are bidirectional here as well.
      return (same_identity || same_frame) && delta >= -kSameFrameTolerance &&
             delta <= window;
    case EdgeVariant::kBackward:
      return (same_identity || same_frame) && -delta >= -kSameFrameTolerance &&
             -delta <= window;
  }
  return false;
}

EdgeSet build_edges(std::span<const FaceBox> nodes, double tau,
                    EdgeVariant variant) {
  if (!(tau >= 0.0)) {
    fail(ErrorKind::kValidation,
         "time threshold must be >= 0, got " + std::to_string(tau));
  }
  for (std::size_t k = 1; k < nodes.size(); ++k) {
    if (nodes[k].time < nodes[k - 1].time) {
      fail(ErrorKind::kValidation, "build_edges: nodes are not time-ordered");
    }
  }
  EdgeSet set{variant, {}};
  const double reach = std::max(tau, 0.0) + kSameFrameTolerance;
  std::size_t lo = 0;
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    const double tj = nodes[j].time;
    while (nodes[lo].time < tj - reach) ++lo;
    for (std::size_t i = lo; i < nodes.size() && nodes[i].time <= tj + reach;
         ++i) {
      if (connects(nodes, i, j, tau, variant)) {
        set.edges.push_back(
            {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
      }
    }
  }
  return set;
}

void build_all_edges(Chunk& chunk, double tau) {
  for (EdgeVariant v : kAllVariants) {
    chunk.edges.get(v) = build_edges(chunk.nodes, tau, v);
  }
}

EdgeSet edge_dropout(const EdgeSet& set, double p, std::uint64_t seed) {
  if (!(p >= 0.0) || p >= 1.0) {
    fail(ErrorKind::kValidation,
         "edge dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return set;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drop(p);
  EdgeSet out{set.variant, {}};
  out.edges.reserve(set.edges.size());
  for (const Edge& e : set.edges) {
    if (e.src == e.dst || !drop(rng)) out.edges.push_back(e);
  }
  return out;
}

std::vector<Chunk> build_graphs(std::span<const FaceBox> boxes, std::size_t n,
                                double tau) {
  std::map<std::string, std::vector<FaceBox>> by_video;
  for (const FaceBox& b : boxes) by_video[b.video_id].push_back(b);
  std::vector<Chunk> out;
  for (auto& [video, faces] : by_video) {
    for (Chunk& c : order_and_chunk(std::move(faces), n)) {
      build_all_edges(c, tau);
      out.push_back(std::move(c));
    }
  }
  return out;
}

Adjacency make_adjacency(const EdgeSet& set, std::size_t node_count) {
  Adjacency adj;
  adj.node_count = node_count;
  adj.offsets.assign(node_count + 1, 0);
  for (const Edge& e : set.edges) {
    if (e.src >= node_count || e.dst >= node_count) {
      fail(ErrorKind::kValidation,
           "graph/feature mismatch: edge (" + std::to_string(e.src) + " -> " +
               std::to_string(e.dst) + ") out of range for " +
               std::to_string(node_count) + " nodes");
    }
    ++adj.offsets[e.dst + 1];
  }
  for (std::size_t v = 0; v < node_count; ++v) {
    adj.offsets[v + 1] += adj.offsets[v];
  }
  adj.sources.resize(set.edges.size());
  std::vector<std::size_t> cursor(adj.offsets.begin(), adj.offsets.end() - 1);
  // Stable in edge order, so a (dst, src)-sorted set gives ascending sources.
  for (const Edge& e : set.edges) adj.sources[cursor[e.dst]++] = e.src;
  return adj;
}

GraphStats graph_stats(std::span<const Chunk> chunks) {
  GraphStats s;
  std::string last_video;
  for (const Chunk& c : chunks) {
    if (!c.nodes.empty() && (s.chunks == 0 || c.nodes[0].video_id != last_video)) {
      ++s.videos;
      last_video = c.nodes[0].video_id;
    }
    ++s.chunks;
    s.nodes += c.node_count();
    s.self_loops += c.edges.undirected.self_loops();
    s.forward_edges += c.edges.forward.size();
    s.backward_edges += c.edges.backward.size();
    s.undirected_edges += c.edges.undirected.size();
    for (const Edge& e : c.edges.undirected.edges) {
      if (e.src == e.dst) continue;
      const FaceBox& a = c.nodes[e.src];
      const FaceBox& b = c.nodes[e.dst];
      if (std::abs(a.time - b.time) <= kSameFrameTolerance) {
        ++s.same_frame_edges;
      } else {
        ++s.same_identity_edges;
      }
    }
  }
  return s;
}

}  // namespace spell

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace spell {

/// Timestamps closer than this are treated as the same video frame.
inline constexpr double kSameFrameTolerance = 1e-6;

struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// One detected face at one timestamp.
struct FaceBox {
  std::string video_id;
  double time = 0.0;
  std::string entity_id;
  Box box;
  std::optional<int> label;
  std::size_t feature_index = 0;
};

/// Throws kValidation if the box violates the coordinate or time ranges.
void validate(const FaceBox& face);

enum class EdgeVariant { kForward, kBackward, kUndirected };

inline constexpr std::array<EdgeVariant, 3> kAllVariants = {
    EdgeVariant::kForward, EdgeVariant::kUndirected, EdgeVariant::kBackward};

const char* to_string(EdgeVariant v) noexcept;

/// Directed edge src -> dst: dst aggregates src's message.
struct Edge {
  std::uint32_t src = 0;
  std::uint32_t dst = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge& a, const Edge& b) {
    if (a.dst != b.dst) return a.dst <=> b.dst;
    return a.src <=> b.src;
  }
};

/// Ordered-pair edge list kept sorted by (dst, src).
struct EdgeSet {
  EdgeVariant variant = EdgeVariant::kUndirected;
  std::vector<Edge> edges;

  std::size_t size() const noexcept { return edges.size(); }
  std::size_t self_loops() const noexcept;
};

/// Sorts by (dst, src) and drops duplicates.
void normalize(EdgeSet& set);

/// Same edges with every pair reversed (forward <-> backward).
EdgeSet reversed(const EdgeSet& set);

/// Union of two edge sets, normalized.
EdgeSet merged(const EdgeSet& a, const EdgeSet& b, EdgeVariant variant);

struct EdgeSets {
  EdgeSet forward{EdgeVariant::kForward, {}};
  EdgeSet backward{EdgeVariant::kBackward, {}};
  EdgeSet undirected{EdgeVariant::kUndirected, {}};

  const EdgeSet& get(EdgeVariant v) const noexcept;
  EdgeSet& get(EdgeVariant v) noexcept;
};

/// A contiguous, time-ordered run of at most n face boxes from one video.
struct Chunk {
  std::vector<FaceBox> nodes;
  EdgeSets edges;

  std::size_t node_count() const noexcept { return nodes.size(); }
};

/// Sorts by (time, entity_id) and splits into ceil(|boxes| / n) contiguous
/// chunks. Edge sets are left empty. All boxes must share one video_id.
std::vector<Chunk> order_and_chunk(std::vector<FaceBox> boxes, std::size_t n);

/// True when ordered pair (nodes[i] -> nodes[j]) belongs to `variant` under
/// threshold tau. Single source of truth for the connection criterion.
bool connects(std::span<const FaceBox> nodes, std::size_t i, std::size_t j,
              double tau, EdgeVariant variant) noexcept;

/// Builds one edge set over time-ordered nodes (self-loops included).
EdgeSet build_edges(std::span<const FaceBox> nodes, double tau,
                    EdgeVariant variant);

/// Fills all three edge sets of a chunk.
void build_all_edges(Chunk& chunk, double tau);

/// Removes each non-self-loop edge with probability p. Deterministic in seed.
EdgeSet edge_dropout(const EdgeSet& set, double p, std::uint64_t seed);

/// Groups boxes by video (sorted by video_id), chunks each video and builds
/// edges. Chunks from one video are contiguous in the result.
std::vector<Chunk> build_graphs(std::span<const FaceBox> boxes, std::size_t n,
                                double tau);

/// Compressed in-neighbour lists: sources of node v are
/// sources[offsets[v] .. offsets[v+1]), in ascending order.
struct Adjacency {
  std::size_t node_count = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> sources;

  std::span<const std::uint32_t> in_neighbors(std::size_t v) const {
    return {sources.data() + offsets[v], offsets[v + 1] - offsets[v]};
  }
};

/// Throws kValidation ("graph/feature mismatch") on an out-of-range endpoint.
Adjacency make_adjacency(const EdgeSet& set, std::size_t node_count);

struct GraphStats {
  std::size_t videos = 0;
  std::size_t chunks = 0;
  std::size_t nodes = 0;
  std::size_t self_loops = 0;
  std::size_t forward_edges = 0;
  std::size_t backward_edges = 0;
  std::size_t undirected_edges = 0;
  std::size_t same_frame_edges = 0;     // undirected, non-loop
  std::size_t same_identity_edges = 0;  // undirected, non-loop, different frame
};

GraphStats graph_stats(std::span<const Chunk> chunks);

}  // namespace spell

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spell/graph.hpp"
#include "spell/kernels.hpp"
#include "spell/matrix.hpp"

namespace spell {

struct ModelConfig {
  std::size_t visual_dim = 512;
  std::size_t audio_dim = 512;
  std::size_t spatial_dim = 4;
  std::size_t spatial_proj_dim = 64;
  // Width of the fusion outputs and every graph layer.
  std::size_t filter_dim = 64;
  // Hidden width of the EDGE-CONV message MLP; 0 means "same as filter_dim".
  std::size_t edge_mlp_hidden = 0;
  bool use_spatial = true;
  bool inception_layer2 = false;
  // Three streams (forward/undirected/backward) when set, undirected only
  // otherwise.
  bool bidirectional = true;
  // When false the graph layers are replaced by a per-node linear head.
  bool use_graph = true;

  std::size_t edge_hidden() const noexcept {
    return edge_mlp_hidden == 0 ? filter_dim : edge_mlp_hidden;
  }
  void validate() const;
};

/// Per-node inputs of one graph (or a disjoint union of graphs). Row i
/// belongs to node i of the matching edge sets.
template <typename T>
struct NodeBatch {
  Matrix<T> visual;
  Matrix<T> audio;
  Matrix<T> spatial;
  std::vector<T> labels;  // empty at inference

  std::size_t size() const noexcept { return visual.rows(); }
};

/// Stacks node batches; edge sets of the parts must be offset accordingly
/// (see concat_edges).
template <typename T>
NodeBatch<T> concat(std::span<const NodeBatch<T>* const> parts);

/// Disjoint union of edge sets; node ids of part k are shifted by the sizes
/// of parts 0..k-1. Keeps (dst, src) order.
EdgeSets concat_edges(std::span<const EdgeSets* const> parts,
                      std::span<const std::size_t> sizes);

inline constexpr std::size_t stream_index(EdgeVariant v) noexcept {
  switch (v) {
    case EdgeVariant::kForward: return 0;
    case EdgeVariant::kUndirected: return 1;
    case EdgeVariant::kBackward: return 2;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// Building blocks

/// Linear layer, optionally followed by batch norm and ReLU.
template <typename T>
struct Dense {
  ParamTensor<T> weight;
  ParamTensor<T> bias;
  std::optional<BatchNormState<T>> bn;

  struct Cache {
    LinearCache<T> linear;
    BatchNormCache<T> norm;
    ReluCache<T> act;
  };

  Dense() = default;
  Dense(const std::string& prefix, std::size_t in, std::size_t out,
        bool norm_relu);

  Matrix<T> forward(const Matrix<T>& x, Mode mode, Cache* cache);
  Matrix<T> infer(const Matrix<T>& x) const;
  /// Gradient w.r.t. input columns [input_grad_from, in).
  Matrix<T> backward(const Matrix<T>& grad_out, Cache& cache,
                     std::size_t input_grad_from = 0);
  void collect(std::vector<ParamTensor<T>*>& out);
};

/// SAGE-CONV: out[v] = sum over in-neighbours w of M x_w, plus bias. The node's
/// own feature enters only through its self-loop. Optional batch norm + ReLU.
template <typename T>
struct SageConv {
  ParamTensor<T> weight;  // [in x out]
  ParamTensor<T> bias;    // [1 x out]
  std::optional<BatchNormState<T>> bn;

  struct Cache {
    const Adjacency* adj = nullptr;
    std::optional<Matrix<T>> input;
    BatchNormCache<T> norm;
    ReluCache<T> act;
  };

  SageConv() = default;
  SageConv(const std::string& prefix, std::size_t in, std::size_t out,
           bool norm_relu);

  /// Pre-activation aggregate.
  Matrix<T> aggregate(const Matrix<T>& x, const Adjacency& adj) const;
  Matrix<T> forward(const Matrix<T>& x, const Adjacency& adj, Mode mode,
                    Cache* cache);
  Matrix<T> infer(const Matrix<T>& x, const Adjacency& adj) const;
  Matrix<T> backward(const Matrix<T>& grad_out, Cache& cache);
  void collect(std::vector<ParamTensor<T>*>& out);
};

/// EDGE-CONV: out[v] = sum over in-neighbours w of g([x_v | x_w]) with
/// g = Linear(2d -> hidden) -> ReLU -> Linear(hidden -> out), then batch norm
/// and ReLU. The first linear splits into a self half and a neighbour half,
/// and the second is pulled out of the sum, so the per-edge work is O(hidden).
template <typename T>
struct EdgeConv {
  ParamTensor<T> lin1_weight;  // [2d x hidden], rows [0,d) act on x_v
  ParamTensor<T> lin1_bias;
  ParamTensor<T> lin2_weight;  // [hidden x out]
  ParamTensor<T> lin2_bias;
  BatchNormState<T> bn;

  struct Cache {
    const Adjacency* adj = nullptr;
    std::optional<Matrix<T>> input;
    Matrix<T> proj_self;   // x A + b1
    Matrix<T> proj_nbr;    // x B
    Matrix<T> hidden_sum;  // per node, sum of relu(proj_self[v] + proj_nbr[w])
    BatchNormCache<T> norm;
    ReluCache<T> act;
  };

  EdgeConv() = default;
  EdgeConv(const std::string& prefix, std::size_t in, std::size_t hidden,
           std::size_t out);

  Matrix<T> aggregate(const Matrix<T>& x, const Adjacency& adj,
                      Cache* cache = nullptr) const;
  Matrix<T> forward(const Matrix<T>& x, const Adjacency& adj, Mode mode,
                    Cache* cache);
  Matrix<T> infer(const Matrix<T>& x, const Adjacency& adj) const;
  Matrix<T> backward(const Matrix<T>& grad_out, Cache& cache);
  void collect(std::vector<ParamTensor<T>*>& out);
};

/// Per-feature max over in-neighbours (self-loop included).
template <typename T>
Matrix<T> neighbor_maxpool(const Matrix<T>& x, const Adjacency& adj,
                           std::vector<std::uint32_t>* argmax = nullptr);

/// Graph-inception middle layer: SAGE-CONV branches of width d/4, d/2 and d
/// plus a 1-hop maxpool, concatenated and projected back to d (BN + ReLU).
template <typename T>
struct InceptionLayer {
  std::array<SageConv<T>, 3> branches;
  Dense<T> projection;

  struct Cache {
    const Adjacency* adj = nullptr;
    std::array<typename SageConv<T>::Cache, 3> branch;
    std::vector<std::uint32_t> argmax;
    std::size_t width = 0;
    typename Dense<T>::Cache projection;
  };

  InceptionLayer() = default;
  InceptionLayer(const std::string& prefix, std::size_t width);

  std::size_t concat_width() const noexcept;
  Matrix<T> forward(const Matrix<T>& x, const Adjacency& adj, Mode mode,
                    Cache* cache);
  Matrix<T> infer(const Matrix<T>& x, const Adjacency& adj) const;
  Matrix<T> backward(const Matrix<T>& grad_out, Cache& cache);
  void collect(std::vector<ParamTensor<T>*>& out);
};

// ---------------------------------------------------------------------------
// The three-stream model

/// Named non-trainable buffer (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T>* values = nullptr;
};

template <typename T>
class SpellModel {
 public:
  SpellModel(const ModelConfig& config, std::uint64_t seed);

  SpellModel(const SpellModel&) = delete;
  SpellModel& operator=(const SpellModel&) = delete;
  SpellModel(SpellModel&&) = delete;
  SpellModel& operator=(SpellModel&&) = delete;

  const ModelConfig& config() const noexcept { return config_; }

  /// Probabilities per node. Train mode updates batch-norm statistics and
  /// records everything backward() needs.
  std::vector<T> forward(const NodeBatch<T>& batch, const EdgeSets& edges,
                         Mode mode);

  /// Eval-mode forward that touches no state.
  std::vector<T> predict(const NodeBatch<T>& batch,
                         const EdgeSets& edges) const;

  /// Per-stream pre-sigmoid scores (eval mode). Streams absent from the
  /// configuration are all-zero.
  std::array<std::vector<T>, 3> stream_scores(const NodeBatch<T>& batch,
                                              const EdgeSets& edges) const;

  /// Eval-mode fused node features [N x filter_dim].
  Matrix<T> fuse_features(const NodeBatch<T>& batch) const;

  /// Accumulates d loss / d theta given d loss / d probability. Needs a
  /// train-mode forward; consumes it.
  void backward(std::span<const T> grad_prob);

  /// Streams excluded here contribute nothing to the sum (and get no
  /// gradient). Used to isolate per-stream contributions.
  void set_stream_mask(std::array<bool, 3> mask) { stream_mask_ = mask; }

  /// Trainable tensors, sorted by name.
  std::vector<ParamTensor<T>*> parameters();
  std::vector<const ParamTensor<T>*> parameters() const;
  /// Running statistics, sorted by name.
  std::vector<Buffer<T>> buffers();

  ParamTensor<T>* find(const std::string& name);

  std::size_t param_count() const;
  void zero_grad();

 private:
  struct StreamTape {
    bool active = false;
    typename EdgeConv<T>::Cache layer1;
    typename SageConv<T>::Cache layer2;
    typename InceptionLayer<T>::Cache layer2_inception;
    typename SageConv<T>::Cache layer3;
  };
  struct Tape {
    std::array<Adjacency, 3> adjacency;
    typename Dense<T>::Cache spatial;
    typename Dense<T>::Cache visual;
    typename Dense<T>::Cache audio;
    typename Dense<T>::Cache head;
    std::array<StreamTape, 3> streams;
    std::vector<T> logits;
  };

  void check_batch(const NodeBatch<T>& batch) const;
  bool stream_enabled(std::size_t s) const noexcept;
  Matrix<T> fuse(const NodeBatch<T>& batch, Mode mode, Tape* tape);
  std::vector<T> logits_eval(const NodeBatch<T>& batch, const EdgeSets& edges,
                             std::array<std::vector<T>, 3>* per_stream) const;

  ModelConfig config_;
  std::array<bool, 3> stream_mask_{true, true, true};

  std::optional<Dense<T>> spatial_proj_;
  Dense<T> visual_fuse_;
  Dense<T> audio_fuse_;
  std::array<std::optional<EdgeConv<T>>, 3> layer1_;
  std::optional<SageConv<T>> layer2_;
  std::optional<InceptionLayer<T>> layer2_inception_;
  std::array<std::optional<SageConv<T>>, 3> layer3_;
  std::optional<Dense<T>> head_;

  std::optional<Tape> tape_;
};

/// Scalar trainables of a configuration (weights, biases, BN affine).
std::size_t param_count(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: "SPELLCKPT1", then per tensor (sorted by name): u32 name
// length, name bytes, u32 rank, u32 dims, little-endian f32 data.

inline constexpr char kCheckpointMagic[] = "SPELLCKPT1";

template <typename T>
void save_checkpoint(SpellModel<T>& model, const std::filesystem::path& path);

/// Reconstructs the configuration from tensor names and shapes.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

template <typename T>
void load_checkpoint(SpellModel<T>& model, const std::filesystem::path& path);

}  // namespace spell

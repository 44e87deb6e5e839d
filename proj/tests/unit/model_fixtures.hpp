// SPDX-License-Identifier: Apache-2.0
// Random model inputs and a finite-difference gradient check over the whole
// network, shared by the unit suite and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "spell/kernels.hpp"
#include "spell/model.hpp"

namespace fixtures {

template <typename T>
spell::Matrix<T> gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  spell::Matrix<T> m(r, c);
  for (T& v : m.data()) v = static_cast<T>(normal(rng));
  return m;
}

/// One chunk of `n` random boxes with all three edge sets built.
inline spell::Chunk random_chunk(std::mt19937_64& rng, std::size_t n, double tau = 0.9,
                                 std::size_t identities = 4) {
  auto chunks = spell::order_and_chunk(oracle::random_boxes(rng, n, identities), n);
  spell::build_all_edges(chunks.front(), tau);
  return std::move(chunks.front());
}

/// Random features and 0/1 labels (both classes present) for `chunk`.
template <typename T>
spell::NodeBatch<T> random_batch(const spell::ModelConfig& cfg, const spell::Chunk& chunk,
                                 std::mt19937_64& rng) {
  const std::size_t n = chunk.node_count();
  spell::NodeBatch<T> b;
  b.visual = gaussian<T>(n, cfg.visual_dim, rng);
  b.audio = gaussian<T>(n, cfg.audio_dim, rng);
  b.spatial = spell::Matrix<T>(n, cfg.spatial_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& box = chunk.nodes[i].box;
    const double coords[4] = {box.cx, box.cy, box.w, box.h};
    for (std::size_t k = 0; k < cfg.spatial_dim; ++k) b.spatial(i, k) = T(coords[k % 4]);
    b.labels.push_back(static_cast<T>(i % 2));
  }
  return b;
}

/// Small but complete configuration for exhaustive checks.
inline spell::ModelConfig tiny_config() {
  spell::ModelConfig c;
  c.visual_dim = 6;
  c.audio_dim = 5;
  c.spatial_dim = 4;
  c.spatial_proj_dim = 3;
  c.filter_dim = 4;
  c.edge_mlp_hidden = 5;
  return c;
}

/// Adds N(0, scale) to every parameter. Freshly built models have exact
/// zero biases, which put some max and ReLU inputs exactly on a tie where
/// the loss has no derivative; a jittered point is generic.
template <typename T>
void jitter_parameters(spell::SpellModel<T>& model, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, scale);
  for (spell::ParamTensor<T>* p : model.parameters()) {
    for (T& v : p->value.data()) v = static_cast<T>(v + normal(rng));
  }
}

template <typename T>
double train_loss(spell::SpellModel<T>& model, const spell::NodeBatch<T>& batch,
                  const spell::EdgeSets& edges) {
  const std::vector<T> p = model.forward(batch, edges, spell::Mode::kTrain);
  return spell::bce_loss<T>(p, batch.labels).loss;
}

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
};

/// Compares analytic gradients with central differences (step h) for every
/// parameter tensor. Checks every entry when `per_tensor` is 0, otherwise
/// that many entries per tensor drawn without replacement.
///
/// The relative error is |a - n| / max(|a|, |n|, floor). The floor keeps
/// gradients that are analytically zero (biases feeding batch norm) from
/// being judged on rounding noise alone.
template <typename T>
std::vector<TensorCheck> gradient_check(spell::SpellModel<T>& model,
                                        const spell::NodeBatch<T>& batch,
                                        const spell::EdgeSets& edges, double h,
                                        double floor, std::size_t per_tensor,
                                        std::uint64_t seed) {
  model.zero_grad();
  const std::vector<T> p = model.forward(batch, edges, spell::Mode::kTrain);
  const auto loss = spell::bce_loss<T>(p, batch.labels);
  model.backward(loss.grad);

  std::mt19937_64 rng(seed);
  std::vector<TensorCheck> out;
  for (spell::ParamTensor<T>* param : model.parameters()) {
    std::vector<std::size_t> entries(param->size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (per_tensor != 0 && entries.size() > per_tensor) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(per_tensor);
    }
    TensorCheck check{param->name, entries.size(), 0.0};
    for (std::size_t i : entries) {
      T& value = param->value.data()[i];
      const T saved = value;
      value = static_cast<T>(saved + h);
      const double up = train_loss(model, batch, edges);
      value = static_cast<T>(saved - h);
      const double down = train_loss(model, batch, edges);
      value = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = param->grad.data()[i];
      const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
      check.max_rel_error = std::max(check.max_rel_error, std::abs(analytic - numeric) / scale);
    }
    out.push_back(check);
  }
  return out;
}

}  // namespace fixtures

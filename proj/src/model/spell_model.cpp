// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>

#include "spell/model.hpp"

namespace spell {

void ModelConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v == 0) {
      fail(ErrorKind::kValidation,
           std::string("model config: ") + name + " must be >= 1");
    }
  };
  positive(visual_dim, "visual_dim");
  positive(audio_dim, "audio_dim");
  positive(filter_dim, "filter_dim");
  positive(edge_hidden(), "edge_mlp_hidden");
  if (use_spatial) {
    positive(spatial_dim, "spatial_dim");
    positive(spatial_proj_dim, "spatial_proj_dim");
  }
  if (inception_layer2 && filter_dim < 4) {
    fail(ErrorKind::kValidation,
         "model config: inception layer needs filter_dim >= 4");
  }
}

template <typename T>
NodeBatch<T> concat(std::span<const NodeBatch<T>* const> parts) {
  NodeBatch<T> out;
  if (parts.empty()) return out;
  std::size_t rows = 0;
  for (const auto* p : parts) rows += p->size();
  const auto& first = *parts.front();
  out.visual = Matrix<T>(rows, first.visual.cols());
  out.audio = Matrix<T>(rows, first.audio.cols());
  out.spatial = Matrix<T>(rows, first.spatial.cols());
  const bool labeled = std::all_of(parts.begin(), parts.end(), [](auto* p) {
    return p->labels.size() == p->size();
  });
  std::size_t at = 0;
  const auto copy_into = [](Matrix<T>& dst, const Matrix<T>& src,
                            std::size_t row) {
    if (src.cols() != dst.cols()) {
      fail(ErrorKind::kDimension,
           "concat: feature widths differ " + src.shape() + " vs " +
               dst.shape());
    }
    std::copy(src.data().begin(), src.data().end(),
              dst.data().begin() + static_cast<std::ptrdiff_t>(row * dst.cols()));
  };
  for (const auto* p : parts) {
    copy_into(out.visual, p->visual, at);
    copy_into(out.audio, p->audio, at);
    copy_into(out.spatial, p->spatial, at);
    if (labeled) {
      out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    }
    at += p->size();
  }
  return out;
}

EdgeSets concat_edges(std::span<const EdgeSets* const> parts,
                      std::span<const std::size_t> sizes) {
  if (parts.size() != sizes.size()) {
    fail(ErrorKind::kDimension, "concat_edges: parts and sizes differ");
  }
  EdgeSets out;
  for (EdgeVariant v : kAllVariants) {
    EdgeSet& dst = out.get(v);
    std::size_t total = 0;
    for (const auto* p : parts) total += p->get(v).size();
    dst.edges.reserve(total);
    std::uint32_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      for (const Edge& e : parts[k]->get(v).edges) {
        dst.edges.push_back({e.src + offset, e.dst + offset});
      }
      offset += static_cast<std::uint32_t>(sizes[k]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<const char*, 3> kStreamNames = {"forward", "undirected",
                                                     "backward"};

template <typename T>
void init_parameters(std::vector<ParamTensor<T>*> params, std::uint64_t seed) {
  std::sort(params.begin(), params.end(),
            [](auto* a, auto* b) { return a->name < b->name; });
  std::mt19937_64 rng(seed);
  const auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (ParamTensor<T>* p : params) {
    p->zero_grad();
    if (ends_with(p->name, ".weight")) {
      const double bound = 1.0 / std::sqrt(double(p->value.rows()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (T& v : p->value.data()) v = static_cast<T>(dist(rng));
    } else if (ends_with(p->name, ".gamma")) {
      p->value.fill(T{1});
    } else {
      p->value.fill(T{0});
    }
  }
}

}  // namespace

template <typename T>
SpellModel<T>::SpellModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t f = config_.filter_dim;
  std::size_t visual_in = config_.visual_dim;
  if (config_.use_spatial) {
    spatial_proj_.emplace("spatial_proj", config_.spatial_dim,
                          config_.spatial_proj_dim, false);
    visual_in += config_.spatial_proj_dim;
  }
  visual_fuse_ = Dense<T>("visual_fuse", visual_in, f, true);
  audio_fuse_ = Dense<T>("audio_fuse", config_.audio_dim, f, true);

  if (!config_.use_graph) {
    head_.emplace("node_head", f, 1, false);
  } else {
    for (std::size_t s = 0; s < 3; ++s) {
      if (!config_.bidirectional && s != stream_index(EdgeVariant::kUndirected)) {
        continue;
      }
      const std::string name = kStreamNames[s];
      layer1_[s].emplace("edge_conv." + name, f, config_.edge_hidden(), f);
      layer3_[s].emplace("sage3." + name, f, 1, false);
    }
    if (config_.inception_layer2) {
      layer2_inception_.emplace("inception", f);
    } else {
      layer2_.emplace("sage2", f, f, true);
    }
  }
  init_parameters(parameters(), seed);
}

template <typename T>
std::vector<ParamTensor<T>*> SpellModel<T>::parameters() {
  std::vector<ParamTensor<T>*> out;
  if (spatial_proj_) spatial_proj_->collect(out);
  visual_fuse_.collect(out);
  audio_fuse_.collect(out);
  for (auto& l : layer1_) {
    if (l) l->collect(out);
  }
  if (layer2_) layer2_->collect(out);
  if (layer2_inception_) layer2_inception_->collect(out);
  for (auto& l : layer3_) {
    if (l) l->collect(out);
  }
  if (head_) head_->collect(out);
  std::sort(out.begin(), out.end(),
            [](auto* a, auto* b) { return a->name < b->name; });
  return out;
}

template <typename T>
std::vector<const ParamTensor<T>*> SpellModel<T>::parameters() const {
  auto mutable_params = const_cast<SpellModel*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
std::vector<Buffer<T>> SpellModel<T>::buffers() {
  std::vector<Buffer<T>> out;
  const auto add = [&](BatchNormState<T>& bn) {
    const std::string& gamma = bn.gamma.name;
    const std::string prefix = gamma.substr(0, gamma.rfind('.'));
    out.push_back({prefix + ".running_mean", &bn.running_mean});
    out.push_back({prefix + ".running_var", &bn.running_var});
  };
  add(*visual_fuse_.bn);
  add(*audio_fuse_.bn);
  for (auto& l : layer1_) {
    if (l) add(l->bn);
  }
  if (layer2_) add(*layer2_->bn);
  if (layer2_inception_) add(*layer2_inception_->projection.bn);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

template <typename T>
ParamTensor<T>* SpellModel<T>::find(const std::string& name) {
  for (ParamTensor<T>* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
std::size_t SpellModel<T>::param_count() const {
  std::size_t total = 0;
  for (const ParamTensor<T>* p : parameters()) total += p->size();
  return total;
}

template <typename T>
void SpellModel<T>::zero_grad() {
  for (ParamTensor<T>* p : parameters()) p->zero_grad();
}

template <typename T>
void SpellModel<T>::check_batch(const NodeBatch<T>& batch) const {
  const std::size_t n = batch.size();
  const auto expect = [&](const Matrix<T>& m, std::size_t cols,
                          const char* what) {
    if (m.rows() != n || m.cols() != cols) {
      fail(ErrorKind::kDimension,
           std::string(what) + " features " + m.shape() + ", expected " +
               Matrix<T>::shape_string(n, cols));
    }
  };
  expect(batch.visual, config_.visual_dim, "visual");
  expect(batch.audio, config_.audio_dim, "audio");
  if (config_.use_spatial) expect(batch.spatial, config_.spatial_dim, "spatial");
}

template <typename T>
bool SpellModel<T>::stream_enabled(std::size_t s) const noexcept {
  return layer1_[s].has_value() && stream_mask_[s];
}

template <typename T>
Matrix<T> SpellModel<T>::fuse(const NodeBatch<T>& batch, Mode mode,
                              Tape* tape) {
  Matrix<T> visual_in = batch.visual;
  if (spatial_proj_) {
    visual_in = hconcat(batch.visual,
                        spatial_proj_->forward(batch.spatial, mode,
                                               tape ? &tape->spatial : nullptr));
  }
  Matrix<T> fused =
      visual_fuse_.forward(visual_in, mode, tape ? &tape->visual : nullptr);
  add_inplace(fused, audio_fuse_.forward(batch.audio, mode,
                                         tape ? &tape->audio : nullptr));
  return fused;
}

template <typename T>
Matrix<T> SpellModel<T>::fuse_features(const NodeBatch<T>& batch) const {
  check_batch(batch);
  Matrix<T> visual_in = batch.visual;
  if (spatial_proj_) {
    visual_in = hconcat(batch.visual, spatial_proj_->infer(batch.spatial));
  }
  Matrix<T> fused = visual_fuse_.infer(visual_in);
  add_inplace(fused, audio_fuse_.infer(batch.audio));
  return fused;
}

template <typename T>
std::vector<T> SpellModel<T>::forward(const NodeBatch<T>& batch,
                                      const EdgeSets& edges, Mode mode) {
  if (mode == Mode::kEval) {
    tape_.reset();
    return predict(batch, edges);
  }
  check_batch(batch);
  const std::size_t n = batch.size();
  tape_.reset();
  Tape& tape = tape_.emplace();
  const Matrix<T> fused = fuse(batch, mode, &tape);

  std::vector<T> logits(n, T{0});
  if (head_) {
    const Matrix<T> out = head_->forward(fused, mode, &tape.head);
    for (std::size_t i = 0; i < n; ++i) logits[i] = out(i, 0);
  } else {
    for (std::size_t s = 0; s < 3; ++s) {
      StreamTape& st = tape.streams[s];
      st.active = stream_enabled(s);
      if (!st.active) continue;
      tape.adjacency[s] = make_adjacency(edges.get(kAllVariants[s]), n);
      const Adjacency& adj = tape.adjacency[s];
      Matrix<T> h = layer1_[s]->forward(fused, adj, mode, &st.layer1);
      h = layer2_ ? layer2_->forward(h, adj, mode, &st.layer2)
                  : layer2_inception_->forward(h, adj, mode,
                                               &st.layer2_inception);
      h = layer3_[s]->forward(h, adj, mode, &st.layer3);
      for (std::size_t i = 0; i < n; ++i) logits[i] += h(i, 0);
    }
  }
  std::vector<T> probs(n);
  for (std::size_t i = 0; i < n; ++i) probs[i] = sigmoid(logits[i]);
  tape.logits = std::move(logits);
  return probs;
}

template <typename T>
std::vector<T> SpellModel<T>::logits_eval(
    const NodeBatch<T>& batch, const EdgeSets& edges,
    std::array<std::vector<T>, 3>* per_stream) const {
  const std::size_t n = batch.size();
  const Matrix<T> fused = fuse_features(batch);
  std::vector<T> logits(n, T{0});
  if (per_stream) {
    for (auto& v : *per_stream) v.assign(n, T{0});
  }
  if (head_) {
    const Matrix<T> out = head_->infer(fused);
    for (std::size_t i = 0; i < n; ++i) logits[i] = out(i, 0);
    return logits;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    if (!stream_enabled(s)) continue;
    const Adjacency adj = make_adjacency(edges.get(kAllVariants[s]), n);
    Matrix<T> h = layer1_[s]->infer(fused, adj);
    h = layer2_ ? layer2_->infer(h, adj) : layer2_inception_->infer(h, adj);
    h = layer3_[s]->infer(h, adj);
    for (std::size_t i = 0; i < n; ++i) {
      logits[i] += h(i, 0);
      if (per_stream) (*per_stream)[s][i] = h(i, 0);
    }
  }
  return logits;
}

template <typename T>
std::vector<T> SpellModel<T>::predict(const NodeBatch<T>& batch,
                                      const EdgeSets& edges) const {
  std::vector<T> probs = logits_eval(batch, edges, nullptr);
  for (T& p : probs) p = sigmoid(p);
  return probs;
}

template <typename T>
std::array<std::vector<T>, 3> SpellModel<T>::stream_scores(
    const NodeBatch<T>& batch, const EdgeSets& edges) const {
  std::array<std::vector<T>, 3> out;
  logits_eval(batch, edges, &out);
  return out;
}

template <typename T>
void SpellModel<T>::backward(std::span<const T> grad_prob) {
  if (!tape_) {
    fail(ErrorKind::kState,
         "model backward needs a train-mode forward first (each forward "
         "supports one backward)");
  }
  Tape& tape = *tape_;
  const std::size_t n = tape.logits.size();
  if (grad_prob.size() != n) {
    fail(ErrorKind::kDimension, "model backward: " +
                                    std::to_string(grad_prob.size()) +
                                    " gradients for " + std::to_string(n) +
                                    " nodes");
  }
  Matrix<T> grad_logit(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    // sigma'(z) = sigma(z) sigma(-z), stable at both tails.
    const T z = tape.logits[i];
    grad_logit(i, 0) = grad_prob[i] * sigmoid(z) * sigmoid(-z);
  }

  Matrix<T> grad_fused(n, config_.filter_dim);
  if (head_) {
    grad_fused = head_->backward(grad_logit, tape.head);
  } else {
    for (std::size_t s = 0; s < 3; ++s) {
      StreamTape& st = tape.streams[s];
      if (!st.active) continue;
      Matrix<T> g = layer3_[s]->backward(grad_logit, st.layer3);
      g = layer2_ ? layer2_->backward(g, st.layer2)
                  : layer2_inception_->backward(g, st.layer2_inception);
      add_inplace(grad_fused, layer1_[s]->backward(g, st.layer1));
    }
  }

  // Raw inputs need no gradient; only the spatial projection slice does.
  audio_fuse_.backward(grad_fused, tape.audio, config_.audio_dim);
  const std::size_t visual_in = visual_fuse_.weight.value.rows();
  const Matrix<T> grad_spatial = visual_fuse_.backward(
      grad_fused, tape.visual, spatial_proj_ ? config_.visual_dim : visual_in);
  if (spatial_proj_) spatial_proj_->backward(grad_spatial, tape.spatial, config_.spatial_dim);
  tape_.reset();
}

std::size_t param_count(const ModelConfig& config) {
  config.validate();
  const auto dense = [](std::size_t in, std::size_t out, bool bn) {
    return in * out + out + (bn ? 2 * out : 0);
  };
  const std::size_t f = config.filter_dim;
  std::size_t total = 0;
  std::size_t visual_in = config.visual_dim;
  if (config.use_spatial) {
    total += dense(config.spatial_dim, config.spatial_proj_dim, false);
    visual_in += config.spatial_proj_dim;
  }
  total += dense(visual_in, f, true) + dense(config.audio_dim, f, true);
  if (!config.use_graph) return total + dense(f, 1, false);

  const std::size_t streams = config.bidirectional ? 3 : 1;
  const std::size_t h = config.edge_hidden();
  const std::size_t edge_conv = dense(2 * f, h, false) + dense(h, f, true);
  total += streams * (edge_conv + dense(f, 1, false));
  if (config.inception_layer2) {
    const std::size_t q = std::max<std::size_t>(1, f / 4);
    const std::size_t half = std::max<std::size_t>(1, f / 2);
    total += dense(f, q, false) + dense(f, half, false) + dense(f, f, false) +
             dense(q + half + f + f, f, true);
  } else {
    total += dense(f, f, true);
  }
  return total;
}

#define SPELL_INSTANTIATE(T)                                                 \
  template NodeBatch<T> concat(std::span<const NodeBatch<T>* const>);        \
  template class SpellModel<T>;

SPELL_INSTANTIATE(float)
SPELL_INSTANTIATE(double)

#undef SPELL_INSTANTIATE

}  // namespace spell

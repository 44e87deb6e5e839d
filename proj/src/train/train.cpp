// SPDX-License-Identifier: Apache-2.0
#include "spell/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace spell {

const char* to_string(ModalityMask m) noexcept {
  switch (m) {
    case ModalityMask::kNone: return "none";
    case ModalityMask::kVideoOnly: return "video_only";
    case ModalityMask::kAudioOnly: return "audio_only";
  }
  return "none";
}

ModalityMask parse_modality_mask(const std::string& text) {
  if (text == "none") return ModalityMask::kNone;
  if (text == "video_only") return ModalityMask::kVideoOnly;
  if (text == "audio_only") return ModalityMask::kAudioOnly;
  fail(ErrorKind::kValidation, "modality mask must be none, video_only or "
                               "audio_only, got '" + text + "'");
}

void TrainConfig::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::kValidation, "train config: " + what);
  };
  require(std::isfinite(lr_max) && std::isfinite(lr_min), "learning rates must be finite");
  require(lr_min >= 0.0, "lr_min must be >= 0");
  require(lr_max > lr_min || (lr_max == 0.0 && lr_min == 0.0),
          "lr_max must exceed lr_min");
  require(t_max >= 1, "t_max must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(std::isfinite(tau) && tau >= 0.0, "tau must be >= 0");
  require(n >= 1, "n must be >= 1");
  require(edge_dropout_p >= 0.0 && edge_dropout_p < 1.0,
          "edge_dropout_p must be in [0, 1)");
  model.validate();
}

void apply_setting(TrainConfig& c, const KeyValue& kv) {
  const std::string& k = kv.key;
  if (k == "lr_max") {
    c.lr_max = kv_real(kv);
  } else if (k == "lr_min") {
    c.lr_min = kv_real(kv);
  } else if (k == "t_max") {
    c.t_max = kv_count(kv);
  } else if (k == "warm_restarts") {
    c.warm_restarts = kv_flag(kv);
  } else if (k == "epochs") {
    c.epochs = kv_count(kv);
  } else if (k == "batch_size") {
    c.batch_size = kv_count(kv);
  } else if (k == "tau") {
    c.tau = kv_real(kv);
  } else if (k == "n") {
    c.n = kv_count(kv);
  } else if (k == "edge_dropout_p") {
    c.edge_dropout_p = kv_real(kv);
  } else if (k == "seed") {
    c.seed = kv_count(kv);
  } else if (k == "bidir") {
    c.model.bidirectional = kv_flag(kv);
  } else if (k == "modality_mask") {
    try {
      c.modality_mask = parse_modality_mask(kv.value);
    } catch (const Error& e) {
      fail(ErrorKind::kValidation,
           "line " + std::to_string(kv.line) + ": key 'modality_mask': " + e.what());
    }
  } else if (k == "filter_dim") {
    c.model.filter_dim = kv_count(kv);
  } else if (k == "edge_mlp_hidden") {
    c.model.edge_mlp_hidden = kv_count(kv);
  } else if (k == "spatial_proj_dim") {
    c.model.spatial_proj_dim = kv_count(kv);
  } else if (k == "use_spatial") {
    c.model.use_spatial = kv_flag(kv);
  } else if (k == "use_graph") {
    c.model.use_graph = kv_flag(kv);
  } else if (k == "inception_layer2") {
    c.model.inception_layer2 = kv_flag(kv);
  } else {
    fail(ErrorKind::kValidation, "line " + std::to_string(kv.line) +
                                     ": unknown config key '" + k + "'");
  }
}

TrainConfig read_train_config(const fs::path& path) {
  TrainConfig c;
  for (const KeyValue& kv : read_key_values(path)) {
    try {
      apply_setting(c, kv);
    } catch (const Error& e) {
      fail(e.kind(), path.string() + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
  return c;
}

std::vector<KeyValue> config_settings(const TrainConfig& c) {
  const auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  return {
      {"lr_max", format_number(c.lr_max), 0},
      {"lr_min", format_number(c.lr_min), 0},
      {"t_max", std::to_string(c.t_max), 0},
      {"warm_restarts", flag(c.warm_restarts), 0},
      {"epochs", std::to_string(c.epochs), 0},
      {"batch_size", std::to_string(c.batch_size), 0},
      {"tau", format_number(c.tau), 0},
      {"n", std::to_string(c.n), 0},
      {"edge_dropout_p", format_number(c.edge_dropout_p), 0},
      {"seed", std::to_string(c.seed), 0},
      {"bidir", flag(c.model.bidirectional), 0},
      {"modality_mask", to_string(c.modality_mask), 0},
      {"filter_dim", std::to_string(c.model.filter_dim), 0},
      {"edge_mlp_hidden", std::to_string(c.model.edge_mlp_hidden), 0},
      {"spatial_proj_dim", std::to_string(c.model.spatial_proj_dim), 0},
      {"use_spatial", flag(c.model.use_spatial), 0},
      {"use_graph", flag(c.model.use_graph), 0},
      {"inception_layer2", flag(c.model.inception_layer2), 0},
  };
}

double cosine_lr(std::size_t epoch, const TrainConfig& c) {
  double phase;
  if (c.warm_restarts) {
    phase = static_cast<double>(epoch % c.t_max) / static_cast<double>(c.t_max);
  } else {
    phase = static_cast<double>(std::min(epoch, c.epochs)) /
            static_cast<double>(c.epochs);
  }
  return c.lr_min +
         0.5 * (c.lr_max - c.lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
}

template <typename T>
void adam_step(std::span<ParamTensor<T>* const> params, AdamState<T>& state,
               double lr) {
  if (state.m.empty()) {
    for (const ParamTensor<T>* p : params) {
      state.m.emplace_back(p->value.rows(), p->value.cols());
      state.v.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (state.m.size() != params.size()) {
    fail(ErrorKind::kState, "adam_step: optimizer state tracks " +
                                std::to_string(state.m.size()) +
                                " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!state.m[i].same_shape(params[i]->value)) {
      fail(ErrorKind::kState, "adam_step: state shape mismatch for '" +
                                  params[i]->name + "'");
    }
    if (!all_finite(params[i]->grad)) {
      fail(ErrorKind::kNumeric,
           "non-finite gradient in tensor '" + params[i]->name + "'");
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i]->value.data();
    auto grad = params[i]->grad.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double step = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      value[j] = static_cast<T>(value[j] - step);
    }
    params[i]->zero_grad();
  }
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kDropoutStream = 0x4452;

}  // namespace

template <typename T>
std::vector<GraphSample<T>> prepare_samples(const Dataset& data, std::size_t n,
                                            double tau, ModalityMask mask) {
  if (data.features.cols() != kFeatureWidth) {
    fail(ErrorKind::kValidation, "dataset features have width " +
                                     std::to_string(data.features.cols()) +
                                     ", expected " + std::to_string(kFeatureWidth));
  }
  std::vector<FaceBox> boxes = data.boxes;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (data.boxes[i].feature_index >= data.features.rows()) {
      fail(ErrorKind::kValidation,
           "graph/feature mismatch: box " + describe(key_of(data.boxes[i])) +
               " points at feature row " +
               std::to_string(data.boxes[i].feature_index) + " of " +
               std::to_string(data.features.rows()));
    }
    boxes[i].feature_index = i;
  }
  const bool labeled = data.labeled();
  std::vector<Chunk> chunks = build_graphs(boxes, n, tau);

  std::vector<GraphSample<T>> out;
  out.reserve(chunks.size());
  for (Chunk& chunk : chunks) {
    const std::size_t rows = chunk.node_count();
    GraphSample<T> s;
    s.batch.visual = Matrix<T>(rows, kVisualWidth);
    s.batch.audio = Matrix<T>(rows, kAudioWidth);
    s.batch.spatial = Matrix<T>(rows, kSpatialWidth);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t pos = chunk.nodes[r].feature_index;
      const auto src = data.features.row(data.boxes[pos].feature_index);
      auto vis = s.batch.visual.row(r);
      auto aud = s.batch.audio.row(r);
      auto spa = s.batch.spatial.row(r);
      if (mask != ModalityMask::kAudioOnly) {
        for (std::size_t d = 0; d < kVisualWidth; ++d) vis[d] = static_cast<T>(src[d]);
        for (std::size_t d = 0; d < kSpatialWidth; ++d) {
          spa[d] = static_cast<T>(src[kVisualWidth + kAudioWidth + d]);
        }
      }
      if (mask != ModalityMask::kVideoOnly) {
        for (std::size_t d = 0; d < kAudioWidth; ++d) {
          aud[d] = static_cast<T>(src[kVisualWidth + d]);
        }
      }
      if (labeled) s.batch.labels.push_back(static_cast<T>(*chunk.nodes[r].label));
    }
    s.chunk = std::move(chunk);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
TrainResult<T> train(const Dataset& data, const TrainConfig& config,
                     const EpochHook<T>& hook) {
  config.validate();
  if (data.size() == 0) fail(ErrorKind::kValidation, "training set is empty");
  if (!data.labeled()) {
    for (const FaceBox& b : data.boxes) {
      if (!b.label) {
        fail(ErrorKind::kValidation,
             "training set has an unlabeled row " + describe(key_of(b)));
      }
    }
  }
  const auto samples =
      prepare_samples<T>(data, config.n, config.tau, config.modality_mask);

  TrainResult<T> result;
  result.model = std::make_unique<SpellModel<T>>(config.model, config.seed);
  SpellModel<T>& model = *result.model;
  auto params = model.parameters();
  AdamState<T> adam;

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, kShuffleStream));

  const bool dropout = config.edge_dropout_p > 0.0 && config.model.use_graph;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, config);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t node_sum = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const NodeBatch<T>*> parts;
      std::vector<EdgeSets> dropped;
      std::vector<std::size_t> sizes;
      dropped.reserve(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const GraphSample<T>& s = samples[order[k]];
        parts.push_back(&s.batch);
        sizes.push_back(s.batch.size());
        if (dropout) {
          EdgeSets e;
          for (EdgeVariant v : kAllVariants) {
            e.get(v) = edge_dropout(
                s.chunk.edges.get(v), config.edge_dropout_p,
                derive_seed(config.seed, kDropoutStream + stream_index(v),
                            step * 0x10000 + (k - begin)));
          }
          dropped.push_back(std::move(e));
        } else {
          dropped.push_back(s.chunk.edges);
        }
      }
      std::vector<const EdgeSets*> edge_parts;
      for (const EdgeSets& e : dropped) edge_parts.push_back(&e);

      const NodeBatch<T> batch = concat<T>(parts);
      const EdgeSets edges = concat_edges(edge_parts, sizes);
      const std::vector<T> probs = model.forward(batch, edges, Mode::kTrain);
      const BceResult<T> bce = bce_loss<T>(probs, batch.labels);
      if (!std::isfinite(bce.loss)) {
        fail(ErrorKind::kNumeric, "non-finite loss at epoch " +
                                      std::to_string(epoch) + ", step " +
                                      std::to_string(step));
      }
      model.backward(bce.grad);
      adam_step<T>(params, adam, lr);
      loss_sum += bce.loss * static_cast<double>(batch.size());
      node_sum += batch.size();
      ++step;
    }

    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(node_sum), std::nullopt};
    if (hook) rec.val_ap = hook(model, rec);
    result.history.push_back(rec);
  }
  return result;
}

template <typename T>
std::vector<double> infer_scores(const SpellModel<T>& model,
                                 std::span<const GraphSample<T>> samples,
                                 std::size_t total_nodes) {
  std::vector<double> scores(total_nodes, 0.0);
  for (const GraphSample<T>& s : samples) {
    const std::vector<T> probs = model.predict(s.batch, s.chunk.edges);
    for (std::size_t r = 0; r < probs.size(); ++r) {
      const std::size_t pos = s.chunk.nodes[r].feature_index;
      if (pos >= total_nodes) {
        fail(ErrorKind::kValidation, "graph/feature mismatch: node position " +
                                         std::to_string(pos) + " out of range");
      }
      scores[pos] = static_cast<double>(probs[r]);
    }
  }
  return scores;
}

template <typename T>
std::vector<double> infer_scores(const SpellModel<T>& model, const Dataset& data,
                                 std::size_t n, double tau, ModalityMask mask) {
  const auto samples = prepare_samples<T>(data, n, tau, mask);
  return infer_scores<T>(model, samples, data.size());
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,lr,loss,val_ap\n";
  for (const EpochRecord& r : history) {
    out << r.epoch << ',' << format_number(r.lr) << ',' << format_number(r.loss)
        << ',';
    if (r.val_ap) out << format_number(*r.val_ap);
    out << '\n';
  }
  return out.str();
}

#define SPELL_INSTANTIATE_TRAIN(T)                                               \
  template void adam_step<T>(std::span<ParamTensor<T>* const>, AdamState<T>&,   \
                             double);                                            \
  template std::vector<GraphSample<T>> prepare_samples<T>(                      \
      const Dataset&, std::size_t, double, ModalityMask);                        \
  template TrainResult<T> train<T>(const Dataset&, const TrainConfig&,          \
                                   const EpochHook<T>&);                         \
  template std::vector<double> infer_scores<T>(                                 \
      const SpellModel<T>&, std::span<const GraphSample<T>>, std::size_t);       \
  template std::vector<double> infer_scores<T>(                                 \
      const SpellModel<T>&, const Dataset&, std::size_t, double, ModalityMask);

SPELL_INSTANTIATE_TRAIN(float)
SPELL_INSTANTIATE_TRAIN(double)

}  // namespace spell

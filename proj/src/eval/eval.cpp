// SPDX-License-Identifier: Apache-2.0
#include "spell/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace spell {

namespace {

bool ranks_before(const ScoredNode& a, const ScoredNode& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.video_id != b.video_id) return a.video_id < b.video_id;
  if (a.time != b.time) return a.time < b.time;
  return a.entity_id < b.entity_id;
}

}  // namespace

double average_precision(std::span<const ScoredNode> nodes) {
  std::vector<const ScoredNode*> ranked;
  ranked.reserve(nodes.size());
  for (const ScoredNode& n : nodes) {
    if (!std::isfinite(n.score)) {
      fail(ErrorKind::kValidation, "non-finite score for " + n.video_id + "/" +
                                       n.entity_id);
    }
    if (n.label != 0 && n.label != 1) {
      fail(ErrorKind::kValidation, "label must be 0 or 1");
    }
    ranked.push_back(&n);
  }
  std::sort(ranked.begin(), ranked.end(),
            [](const ScoredNode* a, const ScoredNode* b) { return ranks_before(*a, *b); });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (ranked[k]->label == 1) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  if (hits == 0) fail(ErrorKind::kUndefinedMetric, "AP is undefined without positives");
  return sum / static_cast<double>(hits);
}

EvalReport evaluate_nodes(std::span<const ScoredNode> nodes) {
  EvalReport report;
  report.ap = average_precision(nodes);
  report.nodes = nodes.size();
  std::map<std::string, std::vector<ScoredNode>> by_video;
  for (const ScoredNode& n : nodes) {
    report.positives += n.label == 1 ? 1 : 0;
    by_video[n.video_id].push_back(n);
  }
  for (const auto& [video, list] : by_video) {
    VideoAp v{video, list.size(), 0, std::nullopt};
    v.positives = static_cast<std::size_t>(std::count_if(
        list.begin(), list.end(), [](const ScoredNode& n) { return n.label == 1; }));
    if (v.positives > 0) v.ap = average_precision(list);
    report.per_video.push_back(std::move(v));
  }
  return report;
}

EvalReport evaluate_predictions(std::span<const PredictionRow> predictions,
                                std::span<const FaceBox> tracks) {
  std::map<FeatureKey, const PredictionRow*> by_key;
  for (const PredictionRow& p : predictions) {
    FaceBox probe;
    probe.video_id = p.video_id;
    probe.time = p.time;
    probe.entity_id = p.entity_id;
    if (!by_key.emplace(key_of(probe), &p).second) {
      fail(ErrorKind::kValidation,
           "duplicate prediction for " + describe(key_of(probe)));
    }
  }
  std::vector<ScoredNode> nodes;
  nodes.reserve(tracks.size());
  for (const FaceBox& b : tracks) {
    const FeatureKey key = key_of(b);
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      fail(ErrorKind::kValidation, "no prediction for track row " + describe(key));
    }
    if (!b.label) {
      fail(ErrorKind::kValidation, "track row " + describe(key) + " has no label");
    }
    nodes.push_back({b.video_id, b.time, b.entity_id, it->second->score, *b.label});
    by_key.erase(it);
  }
  if (!by_key.empty()) {
    fail(ErrorKind::kValidation, "prediction " + describe(by_key.begin()->first) +
                                     " has no matching track row");
  }
  return evaluate_nodes(nodes);
}

template <typename T>
EvalReport evaluate(const SpellModel<T>& model, const Dataset& data,
                    std::size_t n, double tau, ModalityMask mask) {
  const std::vector<double> scores = infer_scores<T>(model, data, n, tau, mask);
  std::vector<ScoredNode> nodes;
  nodes.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const FaceBox& b = data.boxes[i];
    if (!b.label) {
      fail(ErrorKind::kValidation,
           "evaluation needs labels; row " + describe(key_of(b)) + " has none");
    }
    nodes.push_back({b.video_id, b.time, b.entity_id, scores[i], *b.label});
  }
  return evaluate_nodes(nodes);
}

template EvalReport evaluate<float>(const SpellModel<float>&, const Dataset&,
                                    std::size_t, double, ModalityMask);
template EvalReport evaluate<double>(const SpellModel<double>&, const Dataset&,
                                     std::size_t, double, ModalityMask);

std::vector<PredictionRow> to_predictions(const Dataset& data,
                                          std::span<const double> scores) {
  if (scores.size() != data.size()) {
    fail(ErrorKind::kDimension, "score count " + std::to_string(scores.size()) +
                                    " does not match " + std::to_string(data.size()) +
                                    " rows");
  }
  std::vector<PredictionRow> rows;
  rows.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const FaceBox& b = data.boxes[i];
    rows.push_back({b.video_id, b.time, b.entity_id, scores[i]});
  }
  return rows;
}

std::string eval_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "scope,video_id,nodes,positives,ap\n";
  out << "all,," << report.nodes << ',' << report.positives << ','
      << format_number(report.ap) << '\n';
  for (const VideoAp& v : report.per_video) {
    out << "video," << v.video_id << ',' << v.nodes << ',' << v.positives << ',';
    if (v.ap) out << format_number(*v.ap);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

namespace {

struct RowSpec {
  const char* name;
  bool graph, bidir, dropout, spatial;
  ModalityMask mask;
};

constexpr RowSpec kRows[] = {
    {"no_graph", false, false, false, false, ModalityMask::kNone},
    {"undirected", true, false, false, false, ModalityMask::kNone},
    {"bidir", true, true, false, false, ModalityMask::kNone},
    {"bidir_dropout", true, true, true, false, ModalityMask::kNone},
    {"full", true, true, true, true, ModalityMask::kNone},
    {"audio_only", true, true, true, true, ModalityMask::kAudioOnly},
    {"video_only", true, true, true, true, ModalityMask::kVideoOnly},
    {"both", true, true, true, true, ModalityMask::kNone},
};

constexpr double kDefaultDropout = 0.2;

double train_and_score(const Dataset& train_set, const Dataset& val,
                       const TrainConfig& config, std::size_t* params) {
  TrainResult<float> result = spell::train<float>(train_set, config);
  if (params) *params = result.model->param_count();
  return evaluate<float>(*result.model, val, config.n, config.tau,
                         config.modality_mask)
      .ap;
}

}  // namespace

const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const RowSpec& r : kRows) v.emplace_back(r.name);
    return v;
  }();
  return names;
}

std::vector<AblationRow> run_ablation(const Dataset& train_set, const Dataset& val,
                                      const TrainConfig& base,
                                      std::span<const std::string> rows) {
  for (const std::string& r : rows) {
    const auto& names = ablation_row_names();
    if (std::find(names.begin(), names.end(), r) == names.end()) {
      fail(ErrorKind::kValidation, "unknown ablation row '" + r + "'");
    }
  }
  const auto wanted = [&](const char* name) {
    return rows.empty() || std::find(rows.begin(), rows.end(), name) != rows.end();
  };
  std::vector<AblationRow> report;
  std::map<std::string, std::pair<double, std::size_t>> cache;
  for (const RowSpec& spec : kRows) {
    if (!wanted(spec.name)) continue;
    TrainConfig c = base;
    c.model.use_graph = spec.graph;
    c.model.bidirectional = spec.bidir;
    c.model.use_spatial = spec.spatial;
    c.edge_dropout_p =
        spec.dropout ? (base.edge_dropout_p > 0.0 ? base.edge_dropout_p : kDefaultDropout)
                     : 0.0;
    c.modality_mask = spec.mask;

    std::ostringstream key;
    for (const KeyValue& kv : config_settings(c)) key << kv.key << '=' << kv.value << ';';
    auto it = cache.find(key.str());
    if (it == cache.end()) {
      std::size_t params = 0;
      const double ap = train_and_score(train_set, val, c, &params);
      it = cache.emplace(key.str(), std::make_pair(ap, params)).first;
    }
    report.push_back({spec.name, spec.graph, spec.bidir, spec.dropout, spec.spatial,
                      spec.mask, it->second.second, it->second.first});
  }
  return report;
}

const char* to_string(SweepAxis axis) noexcept {
  switch (axis) {
    case SweepAxis::kTau: return "tau";
    case SweepAxis::kN: return "n";
    case SweepAxis::kFilterDim: return "filter_dim";
  }
  return "tau";
}

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "tau") return SweepAxis::kTau;
  if (text == "n") return SweepAxis::kN;
  if (text == "filter_dim") return SweepAxis::kFilterDim;
  fail(ErrorKind::kValidation,
       "sweep axis must be tau, n or filter_dim, got '" + text + "'");
}

std::vector<SweepPoint> run_sweep(const Dataset& train_set, const Dataset& val,
                                  const TrainConfig& base, SweepAxis axis,
                                  std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::kValidation, "sweep needs at least one value");
  const auto as_count = [](double v, const char* what) {
    if (!(v >= 1.0) || v != std::floor(v) || v > 1e9) {
      fail(ErrorKind::kValidation, std::string(what) +
                                       " values must be positive integers, got " +
                                       format_number(v));
    }
    return static_cast<std::size_t>(v);
  };
  std::vector<SweepPoint> points;
  for (double value : values) {
    TrainConfig c = base;
    switch (axis) {
      case SweepAxis::kTau: c.tau = value; break;
      case SweepAxis::kN: c.n = as_count(value, "n"); break;
      case SweepAxis::kFilterDim: c.model.filter_dim = as_count(value, "filter_dim"); break;
    }
    c.validate();
    const auto chunks = build_graphs(train_set.boxes, c.n, c.tau);
    const GraphStats stats = graph_stats(chunks);
    SweepPoint p;
    p.value = value;
    p.edge_count = stats.forward_edges + stats.backward_edges + stats.undirected_edges;
    p.ap = train_and_score(train_set, val, c, &p.param_count);
    points.push_back(p);
  }
  return points;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "row,graph,bidir,dropout,spatial,modality,param_count,ap\n";
  for (const AblationRow& r : rows) {
    out << r.name << ',' << int(r.graph) << ',' << int(r.bidir) << ','
        << int(r.dropout) << ',' << int(r.spatial) << ',' << to_string(r.mask) << ','
        << r.param_count << ',' << format_number(r.ap) << '\n';
  }
  return out.str();
}

std::string sweep_csv(SweepAxis axis, std::span<const SweepPoint> points) {
  std::ostringstream out;
  out << to_string(axis) << ",ap,edge_count,param_count\n";
  for (const SweepPoint& p : points) {
    out << format_number(p.value) << ',' << format_number(p.ap) << ','
        << p.edge_count << ',' << p.param_count << '\n';
  }
  return out.str();
}

}  // namespace spell

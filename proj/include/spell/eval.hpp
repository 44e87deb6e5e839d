// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spell/io.hpp"
#include "spell/train.hpp"

namespace spell {

struct ScoredNode {
  std::string video_id;
  double time = 0.0;
  std::string entity_id;
  double score = 0.0;
  int label = 0;
};

/// Non-interpolated AP: mean over positives of precision at their rank.
/// Ranked by score descending, ties by (video_id, time, entity_id).
/// Throws kUndefinedMetric without positives.
double average_precision(std::span<const ScoredNode> nodes);

struct VideoAp {
  std::string video_id;
  std::size_t nodes = 0;
  std::size_t positives = 0;
  std::optional<double> ap;  // empty when the video has no positives
};

struct EvalReport {
  double ap = 0.0;
  std::size_t nodes = 0;
  std::size_t positives = 0;
  std::vector<VideoAp> per_video;  // sorted by video_id
};

EvalReport evaluate_nodes(std::span<const ScoredNode> nodes);

/// Joins predictions with labeled tracks by key. Every track row needs
/// exactly one prediction and vice versa.
EvalReport evaluate_predictions(std::span<const PredictionRow> predictions,
                                std::span<const FaceBox> tracks);

/// One eval-mode forward per chunk over a labeled dataset.
template <typename T>
EvalReport evaluate(const SpellModel<T>& model, const Dataset& data,
                    std::size_t n, double tau, ModalityMask mask);

/// Prediction rows for every box, in dataset order.
std::vector<PredictionRow> to_predictions(const Dataset& data,
                                          std::span<const double> scores);

/// `scope,video_id,nodes,positives,ap`: one "all" row, then one per video.
std::string eval_csv(const EvalReport& report);

// ---------------------------------------------------------------------------
// Experiment harness

struct AblationRow {
  std::string name;
  bool graph = false;
  bool bidir = false;
  bool dropout = false;
  bool spatial = false;
  ModalityMask mask = ModalityMask::kNone;
  std::size_t param_count = 0;
  double ap = 0.0;
};

/// Row names, in report order: no_graph, undirected, bidir, bidir_dropout,
/// full, audio_only, video_only, both.
const std::vector<std::string>& ablation_row_names();

/// Trains and evaluates each requested row (all rows when `rows` is empty)
/// with the base config's seed. Rows differ from `base` only in their flags.
std::vector<AblationRow> run_ablation(const Dataset& train, const Dataset& val,
                                      const TrainConfig& base,
                                      std::span<const std::string> rows = {});

enum class SweepAxis { kTau, kN, kFilterDim };

const char* to_string(SweepAxis axis) noexcept;
SweepAxis parse_sweep_axis(const std::string& text);

struct SweepPoint {
  double value = 0.0;
  double ap = 0.0;
  std::size_t edge_count = 0;  // all three edge sets of the training graphs
  std::size_t param_count = 0;
};

std::vector<SweepPoint> run_sweep(const Dataset& train, const Dataset& val,
                                  const TrainConfig& base, SweepAxis axis,
                                  std::span<const double> values);

std::string ablation_csv(std::span<const AblationRow> rows);
std::string sweep_csv(SweepAxis axis, std::span<const SweepPoint> points);

}  // namespace spell

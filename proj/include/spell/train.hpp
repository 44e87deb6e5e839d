// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spell/io.hpp"
#include "spell/model.hpp"

namespace spell {

enum class ModalityMask { kNone, kVideoOnly, kAudioOnly };

const char* to_string(ModalityMask m) noexcept;
ModalityMask parse_modality_mask(const std::string& text);

struct TrainConfig {
  double lr_max = 2e-4;
  double lr_min = 0.0;
  std::size_t t_max = 10;      // epochs per cosine period
  bool warm_restarts = true;   // false: one cosine over all epochs
  std::size_t epochs = 120;
  std::size_t batch_size = 16;  // chunks per optimizer step
  double tau = 0.9;
  std::size_t n = 2000;
  double edge_dropout_p = 0.2;
  std::uint64_t seed = 0;
  ModalityMask modality_mask = ModalityMask::kNone;
  ModelConfig model;

  void validate() const;
};

/// Applies one `key = value` setting. Unknown keys and bad values throw
/// kValidation naming the key.
void apply_setting(TrainConfig& config, const KeyValue& kv);
TrainConfig read_train_config(const fs::path& path);
/// Every addressable key, in canonical order, with its current value.
std::vector<KeyValue> config_settings(const TrainConfig& config);

double cosine_lr(std::size_t epoch, const TrainConfig& config);

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
};

/// One bias-corrected Adam update over `params` (state tensors are created
/// on first use and matched by position). Zeroes gradients afterwards.
/// A non-finite gradient throws kNumeric naming the tensor, before any
/// parameter changes.
template <typename T>
void adam_step(std::span<ParamTensor<T>* const> params, AdamState<T>& state,
               double lr);

/// A chunk with its gathered node inputs.
template <typename T>
struct GraphSample {
  Chunk chunk;
  NodeBatch<T> batch;
};

/// Chunks every video, builds edges and gathers features (masked per
/// `mask`). Labels are filled when every box has one. In the returned
/// chunks, FaceBox::feature_index is the box's position in `data.boxes`.
template <typename T>
std::vector<GraphSample<T>> prepare_samples(const Dataset& data, std::size_t n,
                                            double tau, ModalityMask mask);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_ap;
};

template <typename T>
struct TrainResult {
  std::unique_ptr<SpellModel<T>> model;
  std::vector<EpochRecord> history;
};

/// Called after every epoch; a returned value is stored as that epoch's
/// validation AP.
template <typename T>
using EpochHook =
    std::function<std::optional<double>(const SpellModel<T>&, const EpochRecord&)>;

template <typename T>
TrainResult<T> train(const Dataset& data, const TrainConfig& config,
                     const EpochHook<T>& hook = {});

/// Eval-mode scores for every box of `data`, in `data.boxes` order.
template <typename T>
std::vector<double> infer_scores(const SpellModel<T>& model, const Dataset& data,
                                 std::size_t n, double tau, ModalityMask mask);

template <typename T>
std::vector<double> infer_scores(const SpellModel<T>& model,
                                 std::span<const GraphSample<T>> samples,
                                 std::size_t total_nodes);

/// Loss history as CSV text: `epoch,lr,loss,val_ap`.
std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace spell

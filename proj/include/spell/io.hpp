// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spell/graph.hpp"
#include "spell/matrix.hpp"

namespace spell {

namespace fs = std::filesystem;

inline constexpr std::size_t kVisualWidth = 512;
inline constexpr std::size_t kAudioWidth = 512;
inline constexpr std::size_t kSpatialWidth = 4;
inline constexpr std::size_t kFeatureWidth =
    kVisualWidth + kAudioWidth + kSpatialWidth;

inline constexpr char kTrackHeader[] = "video_id,time,cx,cy,w,h,entity_id,label";
inline constexpr char kIndexHeader[] = "video_id,time,entity_id,row";
inline constexpr char kPredictionHeader[] = "video_id,time,entity_id,score";
inline constexpr char kFeatureMagic[] = "SPELLFEAT1";

/// Shortest text form that parses back to the same double.
std::string format_number(double value);

/// Strict full-string parse; nullopt on any trailing garbage.
std::optional<double> parse_number(std::string_view text);

// ---------------------------------------------------------------------------
// Track files

/// Rows are returned in file order; feature_index is left at 0.
std::vector<FaceBox> read_tracks(const fs::path& path);
void write_tracks(const fs::path& path, const std::vector<FaceBox>& boxes);

// ---------------------------------------------------------------------------
// Feature store: binary matrix plus an index CSV keyed by
// (video_id, time, entity_id).

struct FeatureKey {
  std::string video_id;
  std::int64_t time_us = 0;  // microseconds, matching the same-frame tolerance
  std::string entity_id;

  friend auto operator<=>(const FeatureKey&, const FeatureKey&) = default;
};

FeatureKey key_of(const FaceBox& box);
std::string describe(const FeatureKey& key);

struct IndexEntry {
  std::string video_id;
  double time = 0.0;
  std::string entity_id;
  std::uint32_t row = 0;
};

struct FeatureStore {
  Matrix<float> features;  // [N x D]
  std::vector<IndexEntry> index;
};

/// Companion index path: "<features>.index.csv".
fs::path index_path_for(const fs::path& features_path);

FeatureStore read_feature_store(const fs::path& features_path);
void write_feature_store(const fs::path& features_path,
                         const FeatureStore& store);

// ---------------------------------------------------------------------------
// Aligned dataset

struct Dataset {
  std::vector<FaceBox> boxes;  // feature_index points into features
  Matrix<float> features;      // [N x kFeatureWidth]

  bool labeled() const noexcept;
  std::size_t size() const noexcept { return boxes.size(); }
};

/// Joins track rows with feature rows; any unmatched key is an error.
Dataset load_dataset(const fs::path& tracks_path, const fs::path& features_path);

/// Track rows only, with an empty feature matrix (graph statistics, eval).
Dataset load_tracks_only(const fs::path& tracks_path);

// ---------------------------------------------------------------------------
// Predictions

struct PredictionRow {
  std::string video_id;
  double time = 0.0;
  std::string entity_id;
  double score = 0.0;
};

void write_predictions(const fs::path& path,
                       const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions(const fs::path& path);

// ---------------------------------------------------------------------------
// key = value files (train configs, synthetic specs)

struct KeyValue {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// `#` starts a comment; blank lines are skipped; duplicate keys rejected.
std::vector<KeyValue> read_key_values(const fs::path& path);

/// Parsers that name the offending key and line on failure.
double kv_real(const KeyValue& kv);
std::uint64_t kv_count(const KeyValue& kv);
bool kv_flag(const KeyValue& kv);

// ---------------------------------------------------------------------------
// Synthetic conversations

enum class SyntheticMode { kSeparable, kContextual };

struct SyntheticSpec {
  std::size_t train_videos = 24;
  std::size_t val_videos = 12;
  std::size_t identities = 3;
  double duration = 20.0;   // seconds per video
  double frame_rate = 5.0;  // frames per second
  double mean_turn = 2.5;   // mean speaking-turn length, seconds
  double presence = 0.9;    // probability a non-speaking face is visible
  double visual_snr = 3.0;  // class separation along the signal direction
  double audio_snr = 3.0;
  // Scale of a per-frame audio offset along the audio signal direction,
  // shared by every face in the frame.
  double audio_frame_noise = 0.0;
  SyntheticMode mode = SyntheticMode::kSeparable;

  void validate() const;
};

SyntheticSpec read_synthetic_spec(const fs::path& path);

/// Named presets: "separable", "contextual", "modality".
SyntheticSpec synthetic_preset(const std::string& name);

struct SyntheticSplit {
  std::vector<FaceBox> tracks;
  FeatureStore store;
};

struct SyntheticData {
  SyntheticSplit train;
  SyntheticSplit val;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Same data as an in-memory dataset (skips the files).
Dataset to_dataset(const SyntheticSplit& split);

/// Writes train/val tracks and feature stores into `dir`:
/// {train,val}.tracks.csv and {train,val}.features.bin (+ index).
void write_synthetic(const SyntheticData& data, const fs::path& dir);

}  // namespace spell

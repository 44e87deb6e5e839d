// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "spell/io.hpp"

namespace spell {

void SyntheticSpec::validate() const {
  const auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorKind::kValidation, std::string("synthetic spec: ") + what);
  };
  require(train_videos >= 1, "train_videos must be >= 1");
  require(val_videos >= 1, "val_videos must be >= 1");
  require(identities >= 1 && identities <= 64, "identities must be in [1, 64]");
  require(std::isfinite(duration) && duration > 0, "duration must be > 0");
  require(std::isfinite(frame_rate) && frame_rate > 0, "frame_rate must be > 0");
  require(std::isfinite(mean_turn) && mean_turn > 0, "mean_turn must be > 0");
  require(presence >= 0 && presence <= 1, "presence must be in [0, 1]");
  require(std::isfinite(visual_snr) && visual_snr >= 0, "visual_snr must be >= 0");
  require(std::isfinite(audio_snr) && audio_snr >= 0, "audio_snr must be >= 0");
  require(std::isfinite(audio_frame_noise) && audio_frame_noise >= 0,
          "audio_frame_noise must be >= 0");
  require(duration * frame_rate <= 1e6, "too many frames per video");
}

SyntheticSpec read_synthetic_spec(const fs::path& path) {
  SyntheticSpec spec;
  for (const KeyValue& kv : read_key_values(path)) {
    if (kv.key == "train_videos") {
      spec.train_videos = kv_count(kv);
    } else if (kv.key == "val_videos") {
      spec.val_videos = kv_count(kv);
    } else if (kv.key == "identities") {
      spec.identities = kv_count(kv);
    } else if (kv.key == "duration") {
      spec.duration = kv_real(kv);
    } else if (kv.key == "frame_rate") {
      spec.frame_rate = kv_real(kv);
    } else if (kv.key == "mean_turn") {
      spec.mean_turn = kv_real(kv);
    } else if (kv.key == "presence") {
      spec.presence = kv_real(kv);
    } else if (kv.key == "visual_snr") {
      spec.visual_snr = kv_real(kv);
    } else if (kv.key == "audio_snr") {
      spec.audio_snr = kv_real(kv);
    } else if (kv.key == "audio_frame_noise") {
      spec.audio_frame_noise = kv_real(kv);
    } else if (kv.key == "mode") {
      if (kv.value == "separable") {
        spec.mode = SyntheticMode::kSeparable;
      } else if (kv.value == "contextual") {
        spec.mode = SyntheticMode::kContextual;
      } else {
        fail(ErrorKind::kValidation,
             path.string() + ":" + std::to_string(kv.line) +
                 ": key 'mode': expected separable or contextual, got '" +
                 kv.value + "'");
      }
    } else {
      fail(ErrorKind::kValidation, path.string() + ":" + std::to_string(kv.line) +
                                       ": unknown key '" + kv.key + "'");
    }
  }
  spec.validate();
  return spec;
}

SyntheticSpec synthetic_preset(const std::string& name) {
  SyntheticSpec spec;
  if (name == "separable") {
    spec.mode = SyntheticMode::kSeparable;
    spec.visual_snr = 4.0;
    spec.audio_snr = 4.0;
  } else if (name == "contextual") {
    spec.mode = SyntheticMode::kContextual;
    spec.train_videos = 72;
    spec.mean_turn = 3.0;
    spec.visual_snr = 1.2;
    spec.audio_snr = 1.2;
    spec.audio_frame_noise = 1.5;
  } else if (name == "modality") {
    spec.mode = SyntheticMode::kContextual;
    spec.train_videos = 72;
    spec.mean_turn = 3.0;
    spec.visual_snr = 1.4;
    spec.audio_snr = 1.0;
    spec.audio_frame_noise = 0.5;
  } else {
    fail(ErrorKind::kValidation, "unknown synthetic preset '" + name +
                                     "' (expected separable, contextual or "
                                     "modality)");
  }
  return spec;
}

namespace {

using Rng = std::mt19937_64;

std::vector<float> unit_direction(Rng& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = normal(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

struct Directions {
  std::vector<float> visual;
  std::vector<float> audio;
};

// Speaking state per (frame, identity).
std::vector<std::vector<int>> speaking_states(const SyntheticSpec& spec,
                                              std::size_t frames, Rng& rng) {
  const std::size_t k = spec.identities;
  const double switch_p =
      std::min(1.0, 1.0 / (spec.mean_turn * spec.frame_rate));
  std::bernoulli_distribution flip(switch_p);
  std::vector<std::vector<int>> state(frames, std::vector<int>(k, 0));
  if (spec.mode == SyntheticMode::kContextual) {
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    std::size_t speaker = pick(rng);
    for (std::size_t f = 0; f < frames; ++f) {
      if (f > 0 && k > 1 && flip(rng)) {
        std::uniform_int_distribution<std::size_t> other(0, k - 2);
        const std::size_t next = other(rng);
        speaker = next >= speaker ? next + 1 : next;
      }
      state[f][speaker] = 1;
    }
  } else {
    std::bernoulli_distribution start(0.5);
    std::vector<int> current(k);
    for (std::size_t i = 0; i < k; ++i) current[i] = start(rng) ? 1 : 0;
    for (std::size_t f = 0; f < frames; ++f) {
      for (std::size_t i = 0; i < k; ++i) {
        if (f > 0 && flip(rng)) current[i] = 1 - current[i];
        state[f][i] = current[i];
      }
    }
  }
  return state;
}

SyntheticSplit generate_split(const SyntheticSpec& spec, const Directions& dirs,
                              const std::string& prefix, std::size_t videos,
                              Rng& rng) {
  const std::size_t k = spec.identities;
  const auto frames = static_cast<std::size_t>(
      std::max(1.0, std::floor(spec.duration * spec.frame_rate)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution visible(spec.presence);

  SyntheticSplit split;
  std::vector<float> rows;
  for (std::size_t vid = 0; vid < videos; ++vid) {
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%03zu", prefix.c_str(), vid);
    const std::string video_id = name;
    const auto state = speaking_states(spec, frames, rng);

    std::vector<Box> seats(k);
    for (std::size_t i = 0; i < k; ++i) {
      seats[i].cx = (static_cast<double>(i) + 0.5) / static_cast<double>(k);
      seats[i].cy = 0.4 + 0.05 * normal(rng);
      seats[i].w = 0.5 / static_cast<double>(k);
      seats[i].h = 0.25 + 0.02 * normal(rng);
    }

    for (std::size_t f = 0; f < frames; ++f) {
      const double time = static_cast<double>(f) / spec.frame_rate;
      const double frame_offset = spec.audio_frame_noise * normal(rng);
      for (std::size_t i = 0; i < k; ++i) {
        const int y = state[f][i];
        if (y == 0 && !visible(rng)) continue;

        FaceBox face;
        face.video_id = video_id;
        face.time = time;
        face.entity_id = "p" + std::to_string(i);
        const auto jitter = [&](double v, double s) {
          return std::clamp(v + s * normal(rng), 0.0, 1.0);
        };
        face.box.cx = jitter(seats[i].cx, 0.01);
        face.box.cy = jitter(seats[i].cy, 0.01);
        face.box.w = std::clamp(seats[i].w + 0.005 * normal(rng), 0.01, 1.0);
        face.box.h = std::clamp(seats[i].h + 0.005 * normal(rng), 0.01, 1.0);
        face.label = y;
        face.feature_index = split.tracks.size();

        const double sign = y == 1 ? 1.0 : -1.0;
        const double v_shift = sign * spec.visual_snr / 2.0;
        const double a_shift = sign * spec.audio_snr / 2.0 + frame_offset;
        for (std::size_t d = 0; d < kVisualWidth; ++d) {
          rows.push_back(static_cast<float>(normal(rng) + v_shift * dirs.visual[d]));
        }
        for (std::size_t d = 0; d < kAudioWidth; ++d) {
          rows.push_back(static_cast<float>(normal(rng) + a_shift * dirs.audio[d]));
        }
        rows.push_back(static_cast<float>(face.box.cx));
        rows.push_back(static_cast<float>(face.box.cy));
        rows.push_back(static_cast<float>(face.box.w));
        rows.push_back(static_cast<float>(face.box.h));

        split.store.index.push_back(
            {face.video_id, face.time, face.entity_id,
             static_cast<std::uint32_t>(face.feature_index)});
        split.tracks.push_back(std::move(face));
      }
    }
  }
  split.store.features =
      Matrix<float>(split.tracks.size(), kFeatureWidth, std::move(rows));
  return split;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Directions dirs{unit_direction(rng, kVisualWidth), unit_direction(rng, kAudioWidth)};
  SyntheticData data;
  data.train = generate_split(spec, dirs, "train", spec.train_videos, rng);
  data.val = generate_split(spec, dirs, "val", spec.val_videos, rng);
  return data;
}

Dataset to_dataset(const SyntheticSplit& split) {
  Dataset ds;
  ds.boxes = split.tracks;
  ds.features = split.store.features;
  return ds;
}

void write_synthetic(const SyntheticData& data, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());
  write_tracks(dir / "train.tracks.csv", data.train.tracks);
  write_feature_store(dir / "train.features.bin", data.train.store);
  write_tracks(dir / "val.tracks.csv", data.val.tracks);
  write_feature_store(dir / "val.features.bin", data.val.store);
}

}  // namespace spell

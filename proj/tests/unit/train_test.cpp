// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"
#include "spell/eval.hpp"
#include "spell/train.hpp"
#include "test_util.hpp"

using spell::ErrorKind;
using spell::KeyValue;
using spell::Matrix;
using spell::ModalityMask;
using spell::ParamTensor;
using spell::TrainConfig;
using testutil::kind_of;

namespace {

spell::SyntheticSpec small_spec() {
  spell::SyntheticSpec s;
  s.train_videos = 8;
  s.val_videos = 2;
  s.duration = 8.0;
  s.visual_snr = 4.0;
  s.audio_snr = 4.0;
  return s;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 4;
  c.t_max = 4;
  c.lr_max = 3e-3;
  c.batch_size = 1;
  c.n = 40;
  c.model.filter_dim = 16;
  return c;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("cosine schedule with warm restarts") {
    TrainConfig c;
    c.lr_max = 1e-3;
    c.lr_min = 1e-5;
    c.t_max = 10;
    CHECK(spell::cosine_lr(0, c) == doctest::Approx(1e-3));
    CHECK(spell::cosine_lr(5, c) == doctest::Approx((1e-3 + 1e-5) / 2));
    CHECK(spell::cosine_lr(10, c) == doctest::Approx(1e-3));
    CHECK(spell::cosine_lr(13, c) == doctest::Approx(spell::cosine_lr(3, c)));
    for (std::size_t e = 1; e < 10; ++e) CHECK(spell::cosine_lr(e, c) < spell::cosine_lr(e - 1, c));
    const double expect = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1 + std::cos(std::numbers::pi * 0.7));
    CHECK(spell::cosine_lr(7, c) == doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("cosine schedule without restarts spans every epoch") {
    TrainConfig c;
    c.lr_max = 2e-4;
    c.epochs = 20;
    c.warm_restarts = false;
    CHECK(spell::cosine_lr(0, c) == doctest::Approx(2e-4));
    CHECK(spell::cosine_lr(10, c) == doctest::Approx(1e-4));
    CHECK(spell::cosine_lr(15, c) < spell::cosine_lr(14, c));
  }

  TEST_CASE("Adam matches hand-computed bias-corrected updates") {
    ParamTensor<double> p("p", 1, 2);
    p.value = Matrix<double>::from_rows({{1.0, -2.0}});
    std::vector<ParamTensor<double>*> params{&p};
    spell::AdamState<double> state;

    p.grad = Matrix<double>::from_rows({{0.5, -4.0}});
    spell::adam_step<double>(params, state, 0.1);
    // Step 1: m_hat = g, v_hat = g^2, so each entry moves by lr * sign(g).
    CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)));
    CHECK(p.value(0, 1) == doctest::Approx(-2.0 + 0.1 * 4.0 / (4.0 + 1e-8)));
    CHECK(p.grad(0, 0) == 0.0);

    p.grad = Matrix<double>::from_rows({{1.0, 0.0}});
    spell::adam_step<double>(params, state, 0.1);
    const double m = 0.9 * (0.1 * 0.5) + 0.1 * 1.0;
    const double v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
    const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
    CHECK(p.value(0, 0) == doctest::Approx(0.9 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)));
    CHECK(state.step == 2);
  }

  TEST_CASE("non-finite gradients stop the update before any change") {
    ParamTensor<float> a("a", 1, 1), b("b", 1, 1);
    a.value(0, 0) = 1.0f;
    b.value(0, 0) = 2.0f;
    a.grad(0, 0) = 1.0f;
    b.grad(0, 0) = std::nanf("");
    std::vector<ParamTensor<float>*> params{&a, &b};
    spell::AdamState<float> state;
    try {
      spell::adam_step<float>(params, state, 0.1);
      FAIL("expected a numeric error");
    } catch (const spell::Error& e) {
      CHECK(e.kind() == ErrorKind::kNumeric);
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK(a.value(0, 0) == 1.0f);
    CHECK(b.value(0, 0) == 2.0f);
  }

  TEST_CASE("config keys round trip and unknown keys are rejected") {
    TrainConfig c;
    spell::apply_setting(c, {"lr_max", "0.001", 1});
    spell::apply_setting(c, {"warm_restarts", "false", 2});
    spell::apply_setting(c, {"modality_mask", "audio_only", 3});
    spell::apply_setting(c, {"filter_dim", "32", 4});
    spell::apply_setting(c, {"bidir", "no", 5});
    CHECK(c.lr_max == 1e-3);
    CHECK_FALSE(c.warm_restarts);
    CHECK(c.modality_mask == ModalityMask::kAudioOnly);
    CHECK(c.model.filter_dim == 32);
    CHECK_FALSE(c.model.bidirectional);

    TrainConfig copy;
    for (const KeyValue& kv : spell::config_settings(c)) spell::apply_setting(copy, kv);
    CHECK(spell::config_settings(copy).size() == spell::config_settings(c).size());
    for (std::size_t i = 0; i < spell::config_settings(c).size(); ++i) {
      CHECK(spell::config_settings(copy)[i].value == spell::config_settings(c)[i].value);
    }

    CHECK(kind_of([&] { spell::apply_setting(c, {"learning_rate", "1", 1}); }) ==
          ErrorKind::kValidation);
    CHECK(kind_of([&] { spell::apply_setting(c, {"epochs", "ten", 1}); }) ==
          ErrorKind::kValidation);
    CHECK(kind_of([&] { spell::apply_setting(c, {"modality_mask", "smell", 1}); }) ==
          ErrorKind::kValidation);
  }

  TEST_CASE("config files and validation") {
    const auto dir = testutil::scratch_dir("train_cfg");
    std::ofstream(dir / "ok.cfg") << "# training\nepochs = 3\nbatch_size = 2\n\ntau = 0.5\n";
    const TrainConfig c = spell::read_train_config(dir / "ok.cfg");
    CHECK(c.epochs == 3);
    CHECK(c.batch_size == 2);
    CHECK(c.tau == 0.5);

    std::ofstream(dir / "bad.cfg") << "edge_dropout_p = 1.0\n";
    CHECK(kind_of([&] { spell::read_train_config(dir / "bad.cfg"); }) == ErrorKind::kValidation);
    std::ofstream(dir / "dup.cfg") << "epochs = 3\nepochs = 4\n";
    CHECK(kind_of([&] { spell::read_train_config(dir / "dup.cfg"); }) == ErrorKind::kFormat);

    TrainConfig bad;
    bad.batch_size = 0;
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::kValidation);
    bad = TrainConfig{};
    bad.lr_min = 1.0;
    CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::kValidation);
  }

  TEST_CASE("modality mask names") {
    CHECK(spell::parse_modality_mask("none") == ModalityMask::kNone);
    CHECK(spell::parse_modality_mask("video_only") == ModalityMask::kVideoOnly);
    CHECK(std::string(spell::to_string(ModalityMask::kAudioOnly)) == "audio_only");
  }

  TEST_CASE("prepared samples gather the right rows and apply masks") {
    const auto data = spell::generate_synthetic(small_spec(), 3);
    const spell::Dataset ds = spell::to_dataset(data.train);
    const auto samples = spell::prepare_samples<float>(ds, 50, 0.9, ModalityMask::kNone);
    std::size_t total = 0;
    for (const auto& s : samples) {
      total += s.batch.size();
      for (std::size_t r = 0; r < s.batch.size(); ++r) {
        const std::size_t pos = s.chunk.nodes[r].feature_index;
        const auto src = ds.features.row(ds.boxes[pos].feature_index);
        CHECK(s.batch.visual(r, 7) == src[7]);
        CHECK(s.batch.audio(r, 3) == src[spell::kVisualWidth + 3]);
        CHECK(s.batch.spatial(r, 2) == src[spell::kVisualWidth + spell::kAudioWidth + 2]);
        CHECK(s.batch.labels[r] == float(*ds.boxes[pos].label));
      }
    }
    CHECK(total == ds.size());

    const auto audio = spell::prepare_samples<float>(ds, 50, 0.9, ModalityMask::kAudioOnly);
    const auto video = spell::prepare_samples<float>(ds, 50, 0.9, ModalityMask::kVideoOnly);
    const auto zero = [](const Matrix<float>& m) {
      return std::all_of(m.data().begin(), m.data().end(), [](float v) { return v == 0.0f; });
    };
    CHECK(zero(audio[0].batch.visual));
    CHECK(zero(audio[0].batch.spatial));
    CHECK_FALSE(zero(audio[0].batch.audio));
    CHECK(zero(video[0].batch.audio));
    CHECK_FALSE(zero(video[0].batch.visual));
  }

  TEST_CASE("training lowers the loss and is deterministic in the seed") {
    const auto data = spell::generate_synthetic(small_spec(), 5);
    const spell::Dataset train = spell::to_dataset(data.train);
    const spell::Dataset val = spell::to_dataset(data.val);
    TrainConfig c = quick_config();

    std::size_t hook_calls = 0;
    const spell::EpochHook<float> hook = [&](const spell::SpellModel<float>& m,
                                             const spell::EpochRecord&) {
      ++hook_calls;
      return std::optional<double>(spell::evaluate(m, val, c.n, c.tau, c.modality_mask).ap);
    };
    const auto a = spell::train<float>(train, c, hook);
    const auto b = spell::train<float>(train, c, hook);
    CHECK(hook_calls == 2 * c.epochs);
    REQUIRE(a.history.size() == c.epochs);
    CHECK(a.history.back().loss < a.history.front().loss);
    CHECK(a.history.back().val_ap.value() > 0.9);
    CHECK(spell::history_csv(a.history) == spell::history_csv(b.history));
    CHECK(spell::infer_scores(*a.model, val, c.n, c.tau, c.modality_mask) ==
          spell::infer_scores(*b.model, val, c.n, c.tau, c.modality_mask));

    c.seed = 1;
    const auto other = spell::train<float>(train, c);
    CHECK(spell::history_csv(other.history) != spell::history_csv(a.history));
  }

  TEST_CASE("history CSV layout") {
    std::vector<spell::EpochRecord> h = {{0, 0.001, 0.5, std::nullopt}, {1, 0.0005, 0.25, 0.75}};
    const std::string csv = spell::history_csv(h);
    CHECK(csv.rfind("epoch,lr,loss,val_ap\n", 0) == 0);
    CHECK(csv.find("\n0,0.001,0.5,\n") != std::string::npos);
    CHECK(csv.find("\n1," + spell::format_number(0.0005) + ",0.25,0.75\n") != std::string::npos);
  }

  TEST_CASE("scores come back in dataset order") {
    const auto data = spell::generate_synthetic(small_spec(), 6);
    spell::Dataset ds = spell::to_dataset(data.val);
    spell::SpellModel<float> model(spell::ModelConfig{}, 2);
    const auto scores = spell::infer_scores(model, ds, 30, 0.9, ModalityMask::kNone);
    REQUIRE(scores.size() == ds.size());

    // Reversing the rows reverses the scores.
    spell::Dataset rev = ds;
    std::reverse(rev.boxes.begin(), rev.boxes.end());
    const auto rs = spell::infer_scores(model, rev, 30, 0.9, ModalityMask::kNone);
    for (std::size_t i = 0; i < scores.size(); ++i) CHECK(rs[scores.size() - 1 - i] == scores[i]);

    rev.boxes[0].feature_index = ds.features.rows();
    CHECK(kind_of([&] { spell::infer_scores(model, rev, 30, 0.9, ModalityMask::kNone); }) ==
          ErrorKind::kValidation);
  }
}

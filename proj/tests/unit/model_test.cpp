// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "spell/model.hpp"
#include "test_util.hpp"

using spell::Adjacency;
using spell::EdgeSets;
using spell::EdgeVariant;
using spell::ErrorKind;
using spell::Matrix;
using spell::ModelConfig;
using spell::Mode;
using spell::SpellModel;
using fixtures::gaussian;
using testutil::kind_of;

namespace {

// Largest |a - ref| / (1 + |ref|); below t means allclose(rtol=t, atol=t).
template <typename T>
double max_close_error(const Matrix<T>& a, const Matrix<T>& ref) {
  REQUIRE(a.same_shape(ref));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double r = ref.data()[i];
    worst = std::max(worst, std::abs(double(a.data()[i]) - r) / (1.0 + std::abs(r)));
  }
  return worst;
}

// Gaussian with the fan-in scaling of a freshly initialized layer.
template <typename T>
void randomize(spell::ParamTensor<T>& p, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(p.value.rows())));
  for (T& v : p.value.data()) v = static_cast<T>(normal(rng));
}

// Relabels nodes with perm: new node perm[i] is old node i.
EdgeSets permute_edges(const EdgeSets& e, const std::vector<std::uint32_t>& perm) {
  EdgeSets out;
  for (EdgeVariant v : spell::kAllVariants) {
    out.get(v).variant = v;
    for (const spell::Edge& edge : e.get(v).edges) {
      out.get(v).edges.push_back({perm[edge.src], perm[edge.dst]});
    }
    spell::normalize(out.get(v));
  }
  return out;
}

template <typename T>
Matrix<T> permute_rows(const Matrix<T>& m, const std::vector<std::uint32_t>& perm) {
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < m.cols(); ++k) out(perm[i], k) = m(i, k);
  }
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("default parameter count and filter-width ordering") {
    const ModelConfig def;
    const std::size_t count = spell::param_count(def);
    MESSAGE("default parameter count: " << count);
    CHECK(count == 112451);
    SpellModel<float> model(def, 0);
    CHECK(model.param_count() == count);

    std::size_t last = 0;
    for (std::size_t f : {16, 32, 64, 128, 256}) {
      ModelConfig c;
      c.filter_dim = f;
      const std::size_t n = spell::param_count(c);
      CHECK(n > last);
      last = n;
    }
  }

  TEST_CASE("parameter count agrees with the built model for every variant") {
    for (int mask = 0; mask < 16; ++mask) {
      ModelConfig c = fixtures::tiny_config();
      c.use_spatial = mask & 1;
      c.bidirectional = mask & 2;
      c.inception_layer2 = mask & 4;
      c.use_graph = mask & 8;
      SpellModel<double> m(c, 1);
      std::size_t scalars = 0;
      for (const auto* p : m.parameters()) scalars += p->size();
      CHECK(m.param_count() == scalars);
      CHECK(spell::param_count(c) == scalars);
    }
  }

  TEST_CASE("config validation") {
    ModelConfig c;
    c.filter_dim = 0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::kValidation);
    c = ModelConfig{};
    c.inception_layer2 = true;
    c.filter_dim = 2;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::kValidation);
  }

  TEST_CASE("SAGE aggregation examples") {
    spell::SageConv<double> sage("s", 2, 2, false);
    sage.weight.value = Matrix<double>::from_rows({{1, 0}, {0, 1}});
    const auto x = Matrix<double>::from_rows({{1, 2}, {3, 4}, {5, 6}, {7, 8}});

    spell::EdgeSet loops;
    for (std::uint32_t v = 0; v < 4; ++v) loops.edges.push_back({v, v});
    CHECK(sage.aggregate(x, spell::make_adjacency(loops, 4)) == x);

    spell::EdgeSet star = loops;
    for (std::uint32_t leaf = 1; leaf < 4; ++leaf) star.edges.push_back({leaf, 0});
    spell::normalize(star);
    const auto out = sage.aggregate(x, spell::make_adjacency(star, 4));
    CHECK(out(0, 0) == 16.0);
    CHECK(out(0, 1) == 20.0);
  }

  TEST_CASE("EDGE-CONV doubles with a duplicated neighbour") {
    std::mt19937_64 rng(3);
    spell::EdgeConv<double> conv("e", 3, 4, 2);
    randomize(conv.lin1_weight, rng);
    randomize(conv.lin1_bias, rng);
    randomize(conv.lin2_weight, rng);
    randomize(conv.lin2_bias, rng);
    Matrix<double> x = gaussian<double>(3, 3, rng);
    for (std::size_t k = 0; k < 3; ++k) x(2, k) = x(1, k);

    spell::EdgeSet one{EdgeVariant::kUndirected, {{1, 0}}};
    spell::EdgeSet two{EdgeVariant::kUndirected, {{1, 0}, {2, 0}}};
    const auto a = conv.aggregate(x, spell::make_adjacency(one, 3));
    const auto b = conv.aggregate(x, spell::make_adjacency(two, 3));
    for (std::size_t k = 0; k < 2; ++k) CHECK(b(0, k) == doctest::Approx(2 * a(0, k)));
  }

  TEST_CASE("aggregations match per-node loop oracles on random graphs") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> size(1, 50);
    std::uniform_real_distribution<double> density(0.0, 0.4);
    double worst = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t n = size(rng);
      const auto set = oracle::random_graph(rng, n, density(rng));
      const Adjacency adj = spell::make_adjacency(set, n);
      const auto nbrs = oracle::neighbours(set, n);
      const Matrix<float> x = gaussian<float>(n, 6, rng);

      spell::SageConv<float> sage("s", 6, 5, false);
      randomize(sage.weight, rng);
      randomize(sage.bias, rng);
      worst = std::max(worst, max_close_error(sage.aggregate(x, adj),
                                           oracle::sage(x, nbrs, sage.weight.value,
                                                        sage.bias.value)));

      spell::EdgeConv<float> conv("e", 6, 7, 5);
      randomize(conv.lin1_weight, rng);
      randomize(conv.lin1_bias, rng);
      randomize(conv.lin2_weight, rng);
      randomize(conv.lin2_bias, rng);
      worst = std::max(worst, max_close_error(conv.aggregate(x, adj),
                                           oracle::edge_conv(x, nbrs, conv.lin1_weight.value,
                                                             conv.lin1_bias.value,
                                                             conv.lin2_weight.value,
                                                             conv.lin2_bias.value)));

      CHECK(spell::neighbor_maxpool(x, adj) == oracle::maxpool(x, nbrs));
    }
    MESSAGE("worst aggregation error: " << worst);
    CHECK(worst < 1e-5);
  }

  TEST_CASE("out-of-range edge endpoints are a graph/feature mismatch") {
    spell::EdgeSet bad{EdgeVariant::kUndirected, {{0, 0}, {5, 0}}};
    CHECK(kind_of([&] { spell::make_adjacency(bad, 3); }) == ErrorKind::kValidation);
  }

  TEST_CASE("full gradient check on a small configuration") {
    for (int variant = 0; variant < 3; ++variant) {
      ModelConfig c = fixtures::tiny_config();
      c.inception_layer2 = variant == 1;
      c.use_graph = variant != 2;
      std::mt19937_64 rng(20 + variant);
      const auto chunk = fixtures::random_chunk(rng, 12, 0.9, 3);
      const auto batch = fixtures::random_batch<double>(c, chunk, rng);
      SpellModel<double> model(c, 11);
      fixtures::jitter_parameters(model, 0.1, rng);
      const auto checks =
          fixtures::gradient_check(model, batch, chunk.edges, 1e-5, 1e-6, 0, 1);
      for (const auto& t : checks) {
        INFO("variant " << variant << " tensor " << t.name);
        CHECK(t.max_rel_error < 1e-4);
      }
    }
  }

  TEST_CASE("backward requires a train-mode forward and matching sizes") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(9);
    const auto chunk = fixtures::random_chunk(rng, 6);
    const auto batch = fixtures::random_batch<double>(c, chunk, rng);
    SpellModel<double> model(c, 1);
    std::vector<double> g(6, 0.1);
    CHECK(kind_of([&] { model.backward(g); }) == ErrorKind::kState);
    model.forward(batch, chunk.edges, Mode::kEval);
    CHECK(kind_of([&] { model.backward(g); }) == ErrorKind::kState);
    model.forward(batch, chunk.edges, Mode::kTrain);
    std::vector<double> short_g(5, 0.1);
    CHECK(kind_of([&] { model.backward(short_g); }) == ErrorKind::kDimension);
    model.forward(batch, chunk.edges, Mode::kTrain);
    model.backward(g);
    CHECK(kind_of([&] { model.backward(g); }) == ErrorKind::kState);
  }

  TEST_CASE("feature width mismatches are dimension errors") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(10);
    const auto chunk = fixtures::random_chunk(rng, 5);
    auto batch = fixtures::random_batch<float>(c, chunk, rng);
    batch.audio = Matrix<float>(5, c.audio_dim + 1);
    SpellModel<float> model(c, 1);
    CHECK(kind_of([&] { model.predict(batch, chunk.edges); }) == ErrorKind::kDimension);
  }

  TEST_CASE("eval output is a probability and sums the stream scores") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(12);
    const auto chunk = fixtures::random_chunk(rng, 20);
    const auto batch = fixtures::random_batch<double>(c, chunk, rng);
    SpellModel<double> model(c, 3);
    const auto p = model.predict(batch, chunk.edges);
    const auto streams = model.stream_scores(batch, chunk.edges);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] > 0.0);
      CHECK(p[i] < 1.0);
      const double z = streams[0][i] + streams[1][i] + streams[2][i];
      CHECK(p[i] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
    }
    CHECK(model.forward(batch, chunk.edges, Mode::kEval) == p);
  }

  TEST_CASE("each stream reads only its own edge set") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(13);
    const auto chunk = fixtures::random_chunk(rng, 25);
    const auto batch = fixtures::random_batch<double>(c, chunk, rng);
    SpellModel<double> model(c, 4);
    const auto base = model.stream_scores(batch, chunk.edges);

    for (EdgeVariant v : spell::kAllVariants) {
      EdgeSets changed = chunk.edges;
      spell::EdgeSet& set = changed.get(v);
      for (std::uint32_t i = 0; i < chunk.node_count(); ++i) set.edges.push_back({0, i});
      spell::normalize(set);
      const auto s = model.stream_scores(batch, changed);
      for (EdgeVariant u : spell::kAllVariants) {
        const std::size_t k = spell::stream_index(u);
        if (u == v) {
          CHECK(s[k] != base[k]);
        } else {
          CHECK(s[k] == base[k]);
        }
      }
    }

    ModelConfig single = c;
    single.bidirectional = false;
    SpellModel<double> undirected_only(single, 4);
    const auto s = undirected_only.stream_scores(batch, chunk.edges);
    CHECK(std::all_of(s[0].begin(), s[0].end(), [](double x) { return x == 0.0; }));
    CHECK(std::all_of(s[2].begin(), s[2].end(), [](double x) { return x == 0.0; }));
  }

  TEST_CASE("stream mask removes a stream from the output and its gradient") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(14);
    const auto chunk = fixtures::random_chunk(rng, 15);
    const auto batch = fixtures::random_batch<double>(c, chunk, rng);
    SpellModel<double> model(c, 5);
    model.set_stream_mask({false, true, false});
    const auto streams = model.stream_scores(batch, chunk.edges);
    const auto eval = model.predict(batch, chunk.edges);
    for (std::size_t i = 0; i < eval.size(); ++i) {
      CHECK(streams[0][i] == 0.0);
      CHECK(streams[2][i] == 0.0);
      CHECK(eval[i] == doctest::Approx(1.0 / (1.0 + std::exp(-streams[1][i]))));
    }
    const auto p = model.forward(batch, chunk.edges, Mode::kTrain);
    const auto loss = spell::bce_loss<double>(p, batch.labels);
    model.zero_grad();
    model.backward(loss.grad);
    for (const auto* t : model.parameters()) {
      const bool other_stream = t->name.find(".forward.") != std::string::npos ||
                                t->name.find(".backward.") != std::string::npos;
      if (!other_stream) continue;
      INFO(t->name);
      CHECK(std::all_of(t->grad.data().begin(), t->grad.data().end(),
                        [](double g) { return g == 0.0; }));
    }
  }

  TEST_CASE("predictions are equivariant under node relabelling") {
    const ModelConfig c = fixtures::tiny_config();
    std::mt19937_64 rng(15);
    const auto chunk = fixtures::random_chunk(rng, 30);
    const auto batch = fixtures::random_batch<double>(c, chunk, rng);
    SpellModel<double> model(c, 6);
    const auto p = model.predict(batch, chunk.edges);

    std::vector<std::uint32_t> perm(30);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    spell::NodeBatch<double> shuffled;
    shuffled.visual = permute_rows(batch.visual, perm);
    shuffled.audio = permute_rows(batch.audio, perm);
    shuffled.spatial = permute_rows(batch.spatial, perm);
    const auto q = model.predict(shuffled, permute_edges(chunk.edges, perm));
    for (std::size_t i = 0; i < 30; ++i) CHECK(q[perm[i]] == doctest::Approx(p[i]).epsilon(1e-12));
  }

  TEST_CASE("same seed gives the same initial weights") {
    const ModelConfig c = fixtures::tiny_config();
    SpellModel<float> a(c, 42), b(c, 42), d(c, 43);
    const auto pa = a.parameters(), pb = b.parameters(), pd = d.parameters();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->value == pb[i]->value);
      any_diff = any_diff || pa[i]->value != pd[i]->value;
    }
    CHECK(any_diff);
  }

  TEST_CASE("concat_edges offsets node ids") {
    EdgeSets a, b;
    a.undirected.edges = {{0, 0}, {1, 0}, {1, 1}};
    b.undirected.edges = {{0, 0}, {0, 1}, {1, 1}};
    const EdgeSets* parts[] = {&a, &b};
    const std::size_t sizes[] = {2, 2};
    const EdgeSets joined = spell::concat_edges(parts, sizes);
    const std::vector<spell::Edge> expect = {{0, 0}, {1, 0}, {1, 1}, {2, 2}, {2, 3}, {3, 3}};
    CHECK(joined.undirected.edges == expect);
    const std::size_t bad[] = {2};
    CHECK(kind_of([&] { spell::concat_edges(parts, bad); }) == ErrorKind::kDimension);
  }

  TEST_CASE("checkpoint round trip restores predictions and configuration") {
    const auto dir = testutil::scratch_dir("ckpt");
    for (int variant = 0; variant < 4; ++variant) {
      ModelConfig c = fixtures::tiny_config();
      c.inception_layer2 = variant == 1;
      c.bidirectional = variant != 2;
      c.use_graph = variant != 3;
      c.use_spatial = variant != 2;
      std::mt19937_64 rng(16);
      const auto chunk = fixtures::random_chunk(rng, 20);
      const auto batch = fixtures::random_batch<float>(c, chunk, rng);
      SpellModel<float> model(c, 8);
      // Move the running statistics off their initial values.
      model.forward(batch, chunk.edges, Mode::kTrain);
      const auto path = dir / ("m" + std::to_string(variant) + ".ckpt");
      spell::save_checkpoint(model, path);

      const ModelConfig read = spell::read_checkpoint_config(path);
      CHECK(spell::param_count(read) == spell::param_count(c));
      CHECK(read.inception_layer2 == c.inception_layer2);
      CHECK(read.use_graph == c.use_graph);
      CHECK(read.use_spatial == c.use_spatial);
      CHECK(read.filter_dim == c.filter_dim);
      SpellModel<float> restored(read, 99);
      spell::load_checkpoint(restored, path);
      CHECK(restored.predict(batch, chunk.edges) == model.predict(batch, chunk.edges));
    }
  }

  TEST_CASE("corrupt or mismatched checkpoints are rejected") {
    const auto dir = testutil::scratch_dir("ckpt_bad");
    const ModelConfig c = fixtures::tiny_config();
    SpellModel<float> model(c, 1);
    const auto good = dir / "good.ckpt";
    spell::save_checkpoint(model, good);
    std::ifstream in(good, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});

    const auto write = [&](const std::string& name, const std::string& content) {
      std::ofstream(dir / name, std::ios::binary) << content;
      return dir / name;
    };
    const auto truncated = write("trunc.ckpt", bytes.substr(0, bytes.size() - 7));
    const auto magic = write("magic.ckpt", "NOTSPELL!!" + bytes.substr(10));

    SpellModel<float> target(c, 1);
    CHECK(kind_of([&] { spell::load_checkpoint(target, truncated); }) == ErrorKind::kFormat);
    CHECK(kind_of([&] { spell::load_checkpoint(target, magic); }) == ErrorKind::kFormat);
    CHECK(kind_of([&] { spell::load_checkpoint(target, dir / "missing.ckpt"); }) ==
          ErrorKind::kIo);

    ModelConfig wider = c;
    wider.filter_dim = 8;
    SpellModel<float> other(wider, 1);
    CHECK(kind_of([&] { spell::load_checkpoint(other, good); }) == ErrorKind::kFormat);
  }
}

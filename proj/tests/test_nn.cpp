#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "json.hpp"
#include "metric_lens/nn.hpp"
#include "metric_lens/tensor_io.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mlens;
using testing::code_of;
using testing::max_abs_diff;
using testing::TempDir;

namespace {

LayerSpec conv_layer(Tensor w, Tensor b = {}, int stride = 1, int padding = 0) {
  LayerSpec l;
  l.kind = LayerKind::kConv2d;
  l.weight = std::move(w);
  l.bias = std::move(b);
  l.stride = stride;
  l.padding = padding;
  return l;
}

LayerSpec plain(LayerKind kind) {
  LayerSpec l;
  l.kind = kind;
  return l;
}

LayerSpec fc_layer(Tensor w, Tensor b = {}) {
  LayerSpec l;
  l.kind = LayerKind::kFullyConnected;
  l.weight = std::move(w);
  l.bias = std::move(b);
  return l;
}

ModelManifest identity_gap_model(Index h, Index w) {
  ModelManifest m;
  m.name = "identity_gap";
  m.input_shape = {h, w, 1};
  m.layers = {conv_layer(Tensor(Shape{1, 1, 1, 1}, {1.0f})), plain(LayerKind::kGlobalAvgPool)};
  m.last_conv_index = 0;
  m.validate();
  return m;
}

}  // namespace

TEST_CASE("identity 1x1 conv passes the feature through") {
  const ModelManifest m = identity_gap_model(1, 1);
  const ForwardTrace t = forward(m, Tensor(Shape{1, 1, 1}, {2.0f}));
  CHECK(t.conv_feature == Tensor(Shape{1, 1, 1}, {2.0f}));
}

TEST_CASE("conv + GAP on a 2x2 input gives the mean") {
  const ModelManifest m = identity_gap_model(2, 2);
  const ForwardTrace t = forward(m, Tensor(Shape{2, 2, 1}, {1, 2, 3, 4}));
  CHECK(t.embedding == Tensor(Shape{1}, {2.5f}));
  CHECK(t.output == t.embedding);
  CHECK(head_forward(t.conv_feature, m) == t.embedding);
}

TEST_CASE("conv2d scalar affine and zero input") {
  const Tensor out = conv2d(Tensor(Shape{1, 1, 1}, {5}), Tensor(Shape{1, 1, 1, 1}, {3}),
                            Tensor(Shape{1}, {1}), 1, 0);
  CHECK(out == Tensor(Shape{1, 1, 1}, {16}));

  testing::Rng rng(1);
  const Tensor w = testing::random_normal({3, 3, 2, 4}, rng);
  const Tensor b(Shape{4}, {1, -2, 3, 0.5f});
  const Tensor z = conv2d(Tensor(Shape{5, 5, 2}), w, b, 1, 1);
  for (Index y = 0; y < 5; ++y)
    for (Index x = 0; x < 5; ++x)
      for (Index o = 0; o < 4; ++o) CHECK(z(y, x, o) == b[o]);
}

TEST_CASE("conv2d matches the loop oracle across stride and padding") {
  testing::Rng rng(2);
  for (int stride = 1; stride <= 2; ++stride) {
    for (int pad = 0; pad <= 2; ++pad) {
      const Tensor in = testing::random_normal({5, 5, 2}, rng);
      const Tensor w = testing::random_normal({3, 3, 2, 4}, rng);
      const Tensor b = testing::random_normal({4}, rng);
      const Tensor got = conv2d(in, w, b, stride, pad);
      const oracle::Array want = oracle::conv2d(oracle::Array::from(in), w, b, stride, pad);
      REQUIRE(got.shape() == want.shape);
      const Index expect = (5 + 2 * pad - 3) / stride + 1;
      CHECK(got.dim(0) == expect);
      for (Index k = 0; k < got.size(); ++k) {
        CHECK(got[k] == doctest::Approx(want.v[static_cast<std::size_t>(k)]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("conv2d shape errors") {
  const Tensor in(Shape{2, 2, 1});
  CHECK(code_of([&] { conv2d(in, Tensor(Shape{3, 3, 1, 1}), {}, 1, 0); }) ==
        ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { conv2d(in, Tensor(Shape{1, 1, 2, 1}), {}, 1, 0); }) ==
        ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { conv2d(in, Tensor(Shape{1, 1, 1, 1}), Tensor(Shape{2}), 1, 0); }) ==
        ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { conv2d(in, Tensor(Shape{1, 1, 1, 1}), {}, 0, 0); }) ==
        ErrorCode::kShapeMismatch);
}

TEST_CASE("global pooling examples") {
  const Tensor a(Shape{2, 2, 1}, {1, 3, 2, 0});
  CHECK(global_pool(a, PoolMode::kAvg) == Tensor(Shape{1}, {1.5f}));
  CHECK(global_pool(a, PoolMode::kMax) == Tensor(Shape{1}, {3.0f}));

  testing::Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor r = testing::random_normal({3, 4, 5}, rng);
    const Tensor avg = global_pool(r, PoolMode::kAvg);
    for (Index k = 0; k < 5; ++k) {
      double sum = 0;
      for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 4; ++j) sum += r(i, j, k);
      CHECK(avg[k] * 12.0 == doctest::Approx(sum).epsilon(1e-6));
    }
  }
  CHECK(code_of([] { global_pool(Tensor(Shape{4}), PoolMode::kAvg); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("batch norm equals the direct per-channel affine formula") {
  testing::Rng rng(4);
  BatchNormParams bn;
  bn.gamma = testing::random_uniform({3}, rng, 0.5, 1.5);
  bn.beta = testing::random_normal({3}, rng);
  bn.mean = testing::random_normal({3}, rng);
  bn.variance = testing::random_uniform({3}, rng, 0.1, 2.0);
  bn.epsilon = 1e-3f;
  const Tensor x = testing::random_normal({2, 2, 3}, rng);
  const Tensor y = batch_norm(x, bn);
  for (Index k = 0; k < x.size(); ++k) {
    const Index c = k % 3;
    const double want = bn.gamma[c] * (x[k] - bn.mean[c]) /
                            std::sqrt(static_cast<double>(bn.variance[c]) + bn.epsilon) +
                        bn.beta[c];
    CHECK(y[k] == doctest::Approx(want).epsilon(1e-6));
  }
  CHECK(code_of([&] { batch_norm(Tensor(Shape{4}), bn); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("relu, flatten, fully_connected and l2_normalize") {
  CHECK(relu(Tensor(Shape{3}, {-1, 0, 2})) == Tensor(Shape{3}, {0, 0, 2}));
  CHECK(flatten(Tensor(Shape{2, 2, 1}, {1, 2, 3, 4})) == Tensor(Shape{4}, {1, 2, 3, 4}));
  const Tensor w(Shape{2, 3}, {1, 0, 0, 0, 1, 1});
  CHECK(fully_connected(Tensor(Shape{3}, {1, 2, 3}), w, Tensor(Shape{2}, {10, 20})) ==
        Tensor(Shape{2}, {11, 25}));
  CHECK(code_of([&] { fully_connected(Tensor(Shape{1, 3}), w, {}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { fully_connected(Tensor(Shape{4}), w, {}); }) == ErrorCode::kShapeMismatch);
  const Tensor n = l2_normalize(Tensor(Shape{2}, {3, 4}));
  CHECK(n[0] == doctest::Approx(0.6));
  CHECK(n[1] == doctest::Approx(0.8));
  CHECK(code_of([] { l2_normalize(Tensor(Shape{2})); }) == ErrorCode::kDegenerateEmbedding);
}

TEST_CASE("toy models match the per-layer oracle for every head pattern") {
  for (HeadPattern head : all_head_patterns()) {
    CAPTURE(to_string(head));
    testing::Rng rng(100 + static_cast<int>(head));
    const ModelManifest m = testing::toy(head, rng);
    const Tensor image = testing::random_image(m, rng);
    const ForwardTrace t = forward(m, image);
    const oracle::Array A = oracle::features(m, image);
    const std::vector<double> E = oracle::head(m, A);
    REQUIRE(t.conv_feature.size() == A.size());
    for (Index k = 0; k < A.size(); ++k) {
      CHECK(t.conv_feature[k] == doctest::Approx(A.v[static_cast<std::size_t>(k)]).epsilon(1e-5));
    }
    REQUIRE(t.embedding.size() == static_cast<Index>(E.size()));
    for (std::size_t k = 0; k < E.size(); ++k) {
      CHECK(t.embedding[static_cast<Index>(k)] == doctest::Approx(E[k]).epsilon(1e-5));
    }
    CHECK(t.layer_outputs.size() == m.layers.size());
  }
}

TEST_CASE("head_forward equals the trace embedding exactly") {
  for (HeadPattern head : all_head_patterns()) {
    CAPTURE(to_string(head));
    testing::Rng rng(200 + static_cast<int>(head));
    const ModelManifest m = testing::toy(head, rng);
    for (int trial = 0; trial < 5; ++trial) {
      const ForwardTrace t = forward(m, testing::random_image(m, rng));
      CHECK(head_forward(t.conv_feature, m) == t.embedding);
    }
  }
}

TEST_CASE("normalized models expose both embedding and normalized output") {
  testing::Rng rng(5);
  const ModelManifest m = testing::toy(HeadPattern::kGapFcBnL2, rng);
  CHECK(m.normalizes_output());
  const ForwardTrace t = forward(m, testing::random_image(m, rng));
  CHECK(l2_norm(t.output) == doctest::Approx(1.0).epsilon(1e-6));
  const double n = l2_norm(t.embedding);
  for (Index k = 0; k < t.output.size(); ++k) {
    CHECK(t.output[k] == doctest::Approx(t.embedding[k] / n).epsilon(1e-6));
  }
}

TEST_CASE("flatten + identity FC returns the flattened feature") {
  testing::Rng rng(6);
  ModelManifest m;
  m.input_shape = {3, 3, 2};
  m.layers = {conv_layer(testing::random_normal({1, 1, 2, 2}, rng)), plain(LayerKind::kFlatten)};
  m.last_conv_index = 0;
  const Index flat = 3 * 3 * 2;
  Tensor eye(Shape{flat, flat});
  for (Index k = 0; k < flat; ++k) eye(k, k) = 1.0f;
  m.layers.push_back(fc_layer(eye, Tensor(Shape{flat})));
  m.validate();
  const Tensor f = testing::random_normal({3, 3, 2}, rng);
  CHECK(head_forward(f, m) == f.reshaped({flat}));
}

TEST_CASE("forward is deterministic") {
  testing::Rng rng(7);
  const ModelManifest m = testing::toy(HeadPattern::kFlattenFcReluFcBn, rng);
  const Tensor image = testing::random_image(m, rng);
  const ForwardTrace a = forward(m, image), b = forward(m, image);
  CHECK(a.embedding == b.embedding);
  CHECK(a.conv_feature == b.conv_feature);
}

TEST_CASE("shape mismatches name the offending layer") {
  testing::Rng rng(8);
  const ModelManifest m = testing::toy(HeadPattern::kGapFc, rng);
  try {
    forward(m, Tensor(Shape{8, 8, 2}));
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kShapeMismatch);
  }
  // Corrupt a layer after validation so the failure surfaces inside forward.
  ModelManifest broken = m;
  broken.layers[2].weight = testing::random_normal({3, 3, 4, 4}, rng);
  try {
    forward(broken, testing::random_image(m, rng));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.layer_index() == 2);
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
  CHECK(code_of([&] { head_forward(Tensor(Shape{3, 3, 4}), m); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("manifest structural validation") {
  testing::Rng rng(9);
  const ModelManifest good = testing::toy(HeadPattern::kGapFc, rng);

  ModelManifest two_pools = good;
  two_pools.layers.insert(two_pools.layers.begin() + 4, plain(LayerKind::kFlatten));
  CHECK(code_of([&] { two_pools.validate(); }) == ErrorCode::kInvalidManifest);

  ModelManifest no_pool = good;
  no_pool.layers.erase(no_pool.layers.begin() + 4);
  CHECK(code_of([&] { no_pool.validate(); }) == ErrorCode::kInvalidManifest);

  ModelManifest l2_middle = good;
  l2_middle.layers.insert(l2_middle.layers.begin() + 5, plain(LayerKind::kL2Normalize));
  CHECK(code_of([&] { l2_middle.validate(); }) == ErrorCode::kInvalidManifest);

  ModelManifest two_l2 = good;
  two_l2.layers.push_back(plain(LayerKind::kL2Normalize));
  two_l2.layers.push_back(plain(LayerKind::kL2Normalize));
  CHECK(code_of([&] { two_l2.validate(); }) == ErrorCode::kInvalidManifest);

  ModelManifest bad_index = good;
  bad_index.last_conv_index = 99;
  CHECK(code_of([&] { bad_index.validate(); }) == ErrorCode::kInvalidManifest);

  ModelManifest fc_shape = good;
  fc_shape.layers.back().weight = testing::random_normal({6, 5}, rng);
  CHECK(code_of([&] { fc_shape.validate(); }) == ErrorCode::kShapeMismatch);

  CHECK(good.feature_shape() == Shape{4, 4, 4});
  CHECK(good.embedding_length() == 6);
  CHECK(code_of([] { layer_kind_from_string("softmax"); }) == ErrorCode::kInvalidManifest);
  CHECK(layer_kind_from_string("global_max_pool") == LayerKind::kGlobalMaxPool);
}

TEST_CASE("manifest JSON round trip") {
  TempDir dir("manifest");
  for (HeadPattern head : all_head_patterns()) {
    CAPTURE(to_string(head));
    testing::Rng rng(300 + static_cast<int>(head));
    const ModelManifest m = testing::toy(head, rng);
    const auto path = dir / (std::string(to_string(head)) + ".json");
    save_manifest(m, path);
    const ModelManifest back = load_manifest(path);
    CHECK(back.name == m.name);
    CHECK(back.input_shape == m.input_shape);
    CHECK(back.last_conv_index == m.last_conv_index);
    REQUIRE(back.layers.size() == m.layers.size());
    const Tensor image = testing::random_image(m, rng);
    CHECK(forward(back, image).embedding == forward(m, image).embedding);
  }
}

TEST_CASE("manifest loading errors") {
  TempDir dir("manifest_errors");
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK(code_of([&] { load_manifest(dir / "bad.json"); }) == ErrorCode::kInvalidManifest);
  std::ofstream(dir / "missing.json") << R"({"name":"x","input_shape":[2,2,1],"last_conv_index":0,
    "layers":[{"kind":"conv2d","weights":"nope.tnsr"},{"kind":"global_avg_pool"}]})";
  CHECK(code_of([&] { load_manifest(dir / "missing.json"); }) == ErrorCode::kIoFailure);
  CHECK(code_of([&] { load_manifest(dir / "absent.json"); }) == ErrorCode::kIoFailure);

  write_tensor(Tensor(Shape{1, 1, 1, 1}, {1.0f}), dir / "w.tnsr");
  std::ofstream(dir / "ok.json") << R"({"name":"x","input_shape":[2,2,1],"last_conv_index":0,
    "layers":[{"kind":"conv2d","weights":"w.tnsr"},{"kind":"global_avg_pool"}]})";
  const ModelManifest m = load_manifest(dir / "ok.json");
  CHECK(forward(m, Tensor(Shape{2, 2, 1}, {1, 2, 3, 4})).embedding == Tensor(Shape{1}, {2.5f}));

  std::ofstream(dir / "kind.json") << R"({"name":"x","input_shape":[2,2,1],"last_conv_index":0,
    "layers":[{"kind":"conv2d","weights":"w.tnsr"},{"kind":"dropout"}]})";
  CHECK(code_of([&] { load_manifest(dir / "kind.json"); }) == ErrorCode::kInvalidManifest);
}

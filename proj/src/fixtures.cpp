#include "metric_lens/fixtures.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "metric_lens/tensor_io.hpp"

namespace mlens {

std::string_view to_string(HeadPattern pattern) {
  switch (pattern) {
    case HeadPattern::kGap: return "gap";
    case HeadPattern::kGapFc: return "gap_fc";
    case HeadPattern::kGmp: return "gmp";
    case HeadPattern::kGmpFc: return "gmp_fc";
    case HeadPattern::kGmpFcReluFc: return "gmp_fc_relu_fc";
    case HeadPattern::kFlattenFc: return "flatten_fc";
    case HeadPattern::kFlattenFcReluFc: return "flatten_fc_relu_fc";
    case HeadPattern::kFlattenFcBn: return "flatten_fc_bn";
    case HeadPattern::kFlattenFcReluFcBn: return "flatten_fc_relu_fc_bn";
    case HeadPattern::kGapFcBnL2: return "gap_fc_bn_l2";
    case HeadPattern::kBnReluGmpFc: return "bn_relu_gmp_fc";
  }
  return "unknown";
}

const std::vector<HeadPattern>& all_head_patterns() {
  static const std::vector<HeadPattern> patterns = {
      HeadPattern::kGap,         HeadPattern::kGapFc,          HeadPattern::kGmp,
      HeadPattern::kGmpFc,       HeadPattern::kGmpFcReluFc,    HeadPattern::kFlattenFc,
      HeadPattern::kFlattenFcReluFc, HeadPattern::kFlattenFcBn,
      HeadPattern::kFlattenFcReluFcBn, HeadPattern::kGapFcBnL2, HeadPattern::kBnReluGmpFc,
  };
  return patterns;
}

Tensor random_normal(const Shape& shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<float>(dist(rng));
  return t;
}

Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<float>(dist(rng));
  return t;
}

namespace {

LayerSpec conv(Index k, Index c_in, Index c_out, int stride, int padding, bool bias, Rng& rng) {
  LayerSpec layer;
  layer.kind = LayerKind::kConv2d;
  layer.weight = random_normal({k, k, c_in, c_out}, rng,
                               std::sqrt(2.0 / static_cast<double>(k * k * c_in)));
  if (bias) layer.bias = random_normal({c_out}, rng, 0.05);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

LayerSpec fc(Index in, Index out, bool bias, Rng& rng) {
  LayerSpec layer;
  layer.kind = LayerKind::kFullyConnected;
  layer.weight = random_normal({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  if (bias) layer.bias = random_normal({out}, rng, 0.1);
  return layer;
}

LayerSpec bn(Index channels, bool bias, Rng& rng) {
  LayerSpec layer;
  layer.kind = LayerKind::kBatchNorm;
  layer.bn.gamma = random_uniform({channels}, rng, 0.5, 1.5);
  layer.bn.beta = bias ? random_normal({channels}, rng, 0.1) : Tensor(Shape{channels});
  layer.bn.mean = bias ? random_normal({channels}, rng, 0.1) : Tensor(Shape{channels});
  layer.bn.variance = random_uniform({channels}, rng, 0.5, 1.5);
  layer.bn.epsilon = 1e-5f;
  return layer;
}

LayerSpec simple(LayerKind kind) {
  LayerSpec layer;
  layer.kind = kind;
  return layer;
}

}  // namespace

ModelManifest make_toy_model(const ToyModelOptions& o, Rng& rng) {
  ModelManifest model;
  model.name = "toy_" + std::string(to_string(o.head));
  model.input_shape = {o.height, o.width, o.in_channels};
  model.layers.push_back(conv(3, o.in_channels, o.hidden_channels, 1, 1, o.with_bias, rng));
  model.layers.push_back(simple(LayerKind::kRelu));
  model.layers.push_back(
      conv(3, o.hidden_channels, o.feature_channels, o.feature_stride, 1, o.with_bias, rng));
  model.layers.push_back(simple(LayerKind::kRelu));
  model.last_conv_index = 3;

  const Shape feature = model.feature_shape();
  const Index p = feature[2];
  const Index flat = shape_product(feature);
  const Index l = o.embedding_length;
  const bool b = o.with_bias;
  auto& layers = model.layers;
  switch (o.head) {
    case HeadPattern::kGap: layers.push_back(simple(LayerKind::kGlobalAvgPool)); break;
    case HeadPattern::kGapFc:
      layers.push_back(simple(LayerKind::kGlobalAvgPool));
      layers.push_back(fc(p, l, b, rng));
      break;
    case HeadPattern::kGmp: layers.push_back(simple(LayerKind::kGlobalMaxPool)); break;
    case HeadPattern::kGmpFc:
      layers.push_back(simple(LayerKind::kGlobalMaxPool));
      layers.push_back(fc(p, l, b, rng));
      break;
    case HeadPattern::kGmpFcReluFc:
      layers.push_back(simple(LayerKind::kGlobalMaxPool));
      layers.push_back(fc(p, o.hidden_units, b, rng));
      layers.push_back(simple(LayerKind::kRelu));
      layers.push_back(fc(o.hidden_units, l, b, rng));
      break;
    case HeadPattern::kFlattenFc:
      layers.push_back(simple(LayerKind::kFlatten));
      layers.push_back(fc(flat, l, b, rng));
      break;
    case HeadPattern::kFlattenFcReluFc:
      layers.push_back(simple(LayerKind::kFlatten));
      layers.push_back(fc(flat, o.hidden_units, b, rng));
      layers.push_back(simple(LayerKind::kRelu));
      layers.push_back(fc(o.hidden_units, l, b, rng));
      break;
    case HeadPattern::kFlattenFcBn:
      layers.push_back(simple(LayerKind::kFlatten));
      layers.push_back(fc(flat, l, b, rng));
      layers.push_back(bn(l, b, rng));
      break;
    case HeadPattern::kFlattenFcReluFcBn:
      layers.push_back(simple(LayerKind::kFlatten));
      layers.push_back(fc(flat, o.hidden_units, b, rng));
      layers.push_back(simple(LayerKind::kRelu));
      layers.push_back(fc(o.hidden_units, l, b, rng));
      layers.push_back(bn(l, b, rng));
      break;
    case HeadPattern::kGapFcBnL2:
      layers.push_back(simple(LayerKind::kGlobalAvgPool));
      layers.push_back(fc(p, l, b, rng));
      layers.push_back(bn(l, b, rng));
      layers.push_back(simple(LayerKind::kL2Normalize));
      break;
    case HeadPattern::kBnReluGmpFc:
      layers.push_back(bn(p, b, rng));
      layers.push_back(simple(LayerKind::kRelu));
      layers.push_back(simple(LayerKind::kGlobalMaxPool));
      layers.push_back(fc(p, l, b, rng));
      break;
  }
  model.validate();
  return model;
}

void write_demo_workspace(const std::filesystem::path& dir, HeadPattern head, std::size_t count,
                          std::uint64_t seed) {
  namespace fs = std::filesystem;
  Rng rng(seed);
  ToyModelOptions options;
  options.height = 16;
  options.width = 16;
  options.head = head;
  const ModelManifest model = make_toy_model(options, rng);
  fs::create_directories(dir / "images");
  save_manifest(model, dir / "model.json");

  std::vector<fs::path> images;
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%03zu.tnsr", i);
    images.push_back(dir / "images" / name);
    write_tensor(random_uniform(model.input_shape, rng, 0.0, 1.0), images.back());
  }

  nlohmann::json ws;
  ws["model"] = "model.json";
  ws["images"] = "images";
  ws["index"] = "index";
  std::ofstream(dir / "workspace.json") << ws.dump(2) << "\n";

  std::uniform_int_distribution<Index> corner(0, options.height / 2);
  std::uniform_real_distribution<double> angle(0.0, 360.0);
  std::ofstream pairs(dir / "pairs.jsonl");
  std::ofstream orient(dir / "orient.jsonl");
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = (i + 1) % count;
    const Index x0 = corner(rng), y0 = corner(rng);
    nlohmann::json line;
    line["query"] = fs::relative(images[i], dir).string();
    line["ref"] = fs::relative(images[j], dir).string();
    line["gt_box"] = {x0, y0, x0 + options.width / 2, y0 + options.height / 2};
    pairs << line.dump() << "\n";
    line.erase("gt_box");
    line["gt_rotation_deg"] = angle(rng);
    orient << line.dump() << "\n";
  }
}

}  // namespace mlens

#include <fstream>

#include "json.hpp"
#include "metric_lens/nn.hpp"
#include "metric_lens/tensor_io.hpp"

namespace mlens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Tensor load_ref(const json& layer, const char* key, const fs::path& base, bool required) {
  if (!layer.contains(key)) {
    if (required) {
      throw Error(ErrorCode::kInvalidManifest,
                  std::string("layer is missing '") + key + "'");
    }
    return {};
  }
  fs::path p = layer.at(key).get<std::string>();
  if (p.is_relative()) p = base / p;
  return read_tensor(p);
}

}  // namespace

// Batchnorm layers keep their four parameter vectors in one [4, C] tensor
// referenced by "weights": rows are gamma, beta, running mean, running variance.
ModelManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidManifest, path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();

  ModelManifest model;
  try {
    model.name = doc.value("name", path.stem().string());
    for (const auto& d : doc.at("input_shape")) model.input_shape.push_back(d.get<Index>());
    model.last_conv_index = doc.at("last_conv_index").get<int>();
    for (const auto& entry : doc.at("layers")) {
      LayerSpec layer;
      layer.kind = layer_kind_from_string(entry.at("kind").get<std::string>());
      switch (layer.kind) {
        case LayerKind::kConv2d:
          layer.stride = entry.value("stride", 1);
          layer.padding = entry.value("padding", 0);
          [[fallthrough]];
        case LayerKind::kFullyConnected:
          layer.weight = load_ref(entry, "weights", base, true);
          layer.bias = load_ref(entry, "bias", base, false);
          break;
        case LayerKind::kBatchNorm: {
          const Tensor packed = load_ref(entry, "weights", base, true);
          if (packed.rank() != 2 || packed.dim(0) != 4) {
            throw Error(ErrorCode::kInvalidManifest,
                        "batchnorm weights must be [4, C], got " +
                            shape_to_string(packed.shape()));
          }
          const Index c = packed.dim(1);
          auto row = [&](Index r) {
            return Tensor(Shape{c}, VectorX<float>(packed.matrix().row(r).transpose()));
          };
          layer.bn.gamma = row(0);
          layer.bn.beta = row(1);
          layer.bn.mean = row(2);
          layer.bn.variance = row(3);
          layer.bn.epsilon = entry.value("epsilon", 1e-5f);
          if ((layer.bn.variance.values().array() + layer.bn.epsilon <= 0.0f).any()) {
            throw Error(ErrorCode::kInvalidManifest, "batchnorm variance + epsilon must be > 0");
          }
          break;
        }
        default: break;
      }
      model.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidManifest, path.string() + ": " + e.what());
  }
  model.validate();
  return model;
}

void save_manifest(const ModelManifest& model, const fs::path& path) {
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  const std::string stem = path.stem().string();
  json doc;
  doc["name"] = model.name;
  doc["input_shape"] = model.input_shape;
  doc["last_conv_index"] = model.last_conv_index;
  doc["layers"] = json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& layer = model.layers[i];
    json entry;
    entry["kind"] = std::string(to_string(layer.kind));
    const std::string prefix = stem + "_l" + std::to_string(i);
    auto put = [&](const char* key, const Tensor& t, const std::string& suffix) {
      if (t.empty()) return;
      const std::string file = prefix + suffix + ".tnsr";
      write_tensor(t, dir / file);
      entry[key] = file;
    };
    switch (layer.kind) {
      case LayerKind::kConv2d:
        entry["stride"] = layer.stride;
        entry["padding"] = layer.padding;
        [[fallthrough]];
      case LayerKind::kFullyConnected:
        put("weights", layer.weight, "_w");
        put("bias", layer.bias, "_b");
        break;
      case LayerKind::kBatchNorm: {
        const Index c = layer.bn.channels();
        Tensor packed(Shape{4, c});
        packed.matrix().row(0) = layer.bn.gamma.values().transpose();
        packed.matrix().row(1) = layer.bn.beta.values().transpose();
        packed.matrix().row(2) = layer.bn.mean.values().transpose();
        packed.matrix().row(3) = layer.bn.variance.values().transpose();
        put("weights", packed, "_bn");
        entry["epsilon"] = layer.bn.epsilon;
        break;
      }
      default: break;
    }
    doc["layers"].push_back(std::move(entry));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write manifest " + path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace mlens

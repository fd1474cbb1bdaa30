#include "metric_lens/retrieval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "metric_lens/tensor_io.hpp"

namespace mlens {

namespace fs = std::filesystem;

void EmbeddingIndex::add(std::string id, std::string image_ref, Tensor embedding) {
  if (embedding.rank() != 1) throw Error(ErrorCode::kShapeMismatch, "embedding must be a vector");
  if (entries.empty() && embedding_length == 0) embedding_length = embedding.size();
  if (embedding.size() != embedding_length) {
    throw Error(ErrorCode::kEmbeddingLengthMismatch,
                "index holds length " + std::to_string(embedding_length) + ", got " +
                    std::to_string(embedding.size()));
  }
  const double norm = l2_norm(embedding);
  if (!(norm > 0.0)) throw Error(ErrorCode::kDegenerateEmbedding, "zero embedding for " + id);
  entries.push_back({std::move(id), std::move(image_ref), std::move(embedding), norm});
}

IndexBuild build_index(const ModelManifest& model, const std::vector<fs::path>& images) {
  IndexBuild out;
  out.index.embedding_length = model.embedding_length();
  for (const fs::path& path : images) {
    try {
      const ForwardTrace trace = forward(model, read_tensor(path));
      out.index.add(path.stem().string(), path.string(), trace.embedding);
    } catch (const Error& e) {
      out.failures.push_back({path.string(), e.what()});
    }
  }
  return out;
}

void save_index(const EmbeddingIndex& index, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["l"] = index.embedding_length;
  meta["ids"] = nlohmann::json::array();
  meta["image_paths"] = nlohmann::json::array();
  for (const auto& e : index.entries) {
    meta["ids"].push_back(e.id);
    meta["image_paths"].push_back(e.image_ref);
  }
  if (!index.empty()) {
    const auto n = static_cast<Index>(index.size());
    Tensor embeddings(Shape{n, index.embedding_length});
    Tensor norms(Shape{n});
    for (Index r = 0; r < n; ++r) {
      const auto& e = index.entries[static_cast<std::size_t>(r)];
      embeddings.matrix().row(r) = e.embedding.values().transpose();
      norms[r] = static_cast<float>(e.norm);
    }
    write_tensor(embeddings, dir / "embeddings.tnsr");
    write_tensor(norms, dir / "norms.tnsr");
  }
  std::ofstream out(dir / "meta.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << "\n";
}

EmbeddingIndex load_index(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + (dir / "meta.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIoFailure, "bad index metadata: " + std::string(e.what()));
  }
  EmbeddingIndex index;
  index.embedding_length = meta.at("l").get<Index>();
  const auto ids = meta.at("ids").get<std::vector<std::string>>();
  const auto paths = meta.at("image_paths").get<std::vector<std::string>>();
  if (ids.empty()) return index;
  const Tensor embeddings = read_tensor(dir / "embeddings.tnsr");
  const Tensor norms = read_tensor(dir / "norms.tnsr");
  const auto n = static_cast<Index>(ids.size());
  if (embeddings.rank() != 2 || embeddings.dim(0) != n ||
      embeddings.dim(1) != index.embedding_length || norms.size() != n ||
      paths.size() != ids.size()) {
    throw Error(ErrorCode::kShapeMismatch, "index files disagree with meta.json");
  }
  for (Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(r);
    Tensor e(Shape{index.embedding_length}, VectorX<float>(embeddings.matrix().row(r).transpose()));
    // norms.tnsr holds f32 copies; recompute in double so self-matches give S == 1.
    const double norm = l2_norm(e);
    if (!(norm > 0.0)) throw Error(ErrorCode::kDegenerateEmbedding, "zero embedding for " + ids[i]);
    index.entries.push_back({ids[i], paths[i], std::move(e), norm});
  }
  return index;
}

namespace {

std::vector<RankedEntry> rank(const EmbeddingIndex& index, const VectorX<double>& query,
                              double query_norm, std::size_t k) {
  if (index.empty()) throw Error(ErrorCode::kEmptyIndex, "index has no entries");
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be >= 1");
  if (query.size() != index.embedding_length) {
    throw Error(ErrorCode::kEmbeddingLengthMismatch, "query length differs from index");
  }
  if (!(query_norm > 0.0)) throw Error(ErrorCode::kDegenerateEmbedding, "zero query embedding");
  std::vector<RankedEntry> ranked;
  ranked.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& e = index.entries[i];
    const double s = query.dot(e.embedding.values().cast<double>()) / (query_norm * e.norm);
    ranked.push_back({e.id, s, i});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.similarity > b.similarity; });
  ranked.resize(std::min(k, ranked.size()));
  return ranked;
}

}  // namespace

std::vector<RankedEntry> retrieve_overall(const EmbeddingIndex& index,
                                          const Tensor& query_embedding, std::size_t k) {
  const VectorX<double> q = query_embedding.values().cast<double>();
  return rank(index, q, q.norm(), k);
}

VectorX<double> partial_feature(const LinearizedHead& head_q, const Tensor& A_q,
                                const std::vector<Cell>& roi) {
  if (roi.empty()) throw Error(ErrorCode::kPointOutOfRange, "empty region of interest");
  for (const Cell& c : roi) {
    if (c.row < 0 || c.row >= head_q.rows() || c.col < 0 || c.col >= head_q.cols()) {
      throw Error(ErrorCode::kPointOutOfRange,
                  "cell (" + std::to_string(c.row) + "," + std::to_string(c.col) + ") outside grid");
    }
  }
  const MatrixX<double> u = head_q.contributions(A_q);
  VectorX<double> sum = VectorX<double>::Zero(head_q.embedding_length());
  for (const Cell& c : roi) sum += u.row(c.row * head_q.cols() + c.col).transpose();
  return sum;
}

VectorX<double> partial_feature_at_pixel(const LinearizedHead& head_q, const Tensor& A_q,
                                         Index pixel_row, Index pixel_col, Index image_h,
                                         Index image_w) {
  (void)pixel_to_cell(pixel_row, pixel_col, image_h, image_w, head_q.rows(), head_q.cols());
  const MatrixX<double> u = head_q.contributions(A_q);
  const LerpTap r = lerp_tap(corner_aligned_source(pixel_row, head_q.rows(), image_h), head_q.rows());
  const LerpTap c = lerp_tap(corner_aligned_source(pixel_col, head_q.cols(), image_w), head_q.cols());
  auto row = [&](Index i, Index j) { return u.row(i * head_q.cols() + j).transpose(); };
  return (1.0 - r.frac) * ((1.0 - c.frac) * row(r.lo, c.lo) + c.frac * row(r.lo, c.hi)) +
         r.frac * ((1.0 - c.frac) * row(r.hi, c.lo) + c.frac * row(r.hi, c.hi));
}

std::vector<RankedEntry> retrieve_partial(const EmbeddingIndex& index,
                                          const VectorX<double>& partial, double query_norm,
                                          std::size_t k) {
  return rank(index, partial, query_norm, k);
}

std::vector<RankedEntry> retrieve_interactive(const EmbeddingIndex& index,
                                              const LinearizedHead& head_q, const Tensor& A_q,
                                              const std::vector<Cell>& roi, std::size_t k) {
  const VectorX<double> partial = partial_feature(head_q, A_q, roi);
  return retrieve_partial(index, partial, head_q.apply(A_q).norm(), k);
}

}  // namespace mlens

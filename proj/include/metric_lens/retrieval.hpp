#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metric_lens/decompose.hpp"
#include "metric_lens/linearize.hpp"
#include "metric_lens/nn.hpp"

namespace mlens {

/// Reference embeddings kept before normalization, with their norms cached,
/// so cosine ranking and partial-feature matching never rerun the model.
struct EmbeddingIndex {
  struct Entry {
    std::string id;
    std::string image_ref;
    Tensor embedding;  // [l], pre-normalization
    double norm = 0.0;
  };

  Index embedding_length = 0;
  std::vector<Entry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
  void add(std::string id, std::string image_ref, Tensor embedding);
};

struct IndexFailure {
  std::string image_ref;
  std::string reason;
};

struct IndexBuild {
  EmbeddingIndex index;
  std::vector<IndexFailure> failures;
};

/// Forwards every image; images that fail (wrong shape, unreadable) are
/// reported and skipped. Entry ids are file stems, in input order.
IndexBuild build_index(const ModelManifest& model,
                       const std::vector<std::filesystem::path>& images);

/// embeddings.tnsr [N,l] + norms.tnsr [N] + meta.json. An empty index writes
/// meta.json only.
void save_index(const EmbeddingIndex& index, const std::filesystem::path& dir);
EmbeddingIndex load_index(const std::filesystem::path& dir);

struct RankedEntry {
  std::string id;
  double similarity = 0.0;
  std::size_t position = 0;  // index into EmbeddingIndex::entries
};

/// Top-k entries by cosine similarity, descending; ties keep index order.
/// k larger than the index returns the full ranking.
std::vector<RankedEntry> retrieve_overall(const EmbeddingIndex& index,
                                          const Tensor& query_embedding, std::size_t k);

/// sum over `roi` of W^q_ij A^q_ij (the bias-free query contribution).
VectorX<double> partial_feature(const LinearizedHead& head_q, const Tensor& A_q,
                                const std::vector<Cell>& roi);

/// Feature of one image pixel: per-position contributions bilinearly
/// interpolated at the pixel's fractional cell position.
VectorX<double> partial_feature_at_pixel(const LinearizedHead& head_q, const Tensor& A_q,
                                         Index pixel_row, Index pixel_col, Index image_h,
                                         Index image_w);

/// Ranks the index by (partial . E_r) / (|E^q| |E_r|), where |E^q| is the norm
/// of the full query embedding.
std::vector<RankedEntry> retrieve_partial(const EmbeddingIndex& index,
                                          const VectorX<double>& partial, double query_norm,
                                          std::size_t k);

std::vector<RankedEntry> retrieve_interactive(const EmbeddingIndex& index,
                                              const LinearizedHead& head_q, const Tensor& A_q,
                                              const std::vector<Cell>& roi, std::size_t k);

}  // namespace mlens

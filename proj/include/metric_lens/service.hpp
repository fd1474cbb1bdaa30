#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "metric_lens/decompose.hpp"
#include "metric_lens/linearize.hpp"
#include "metric_lens/nn.hpp"
#include "metric_lens/retrieval.hpp"

namespace mlens {

using Json = nlohmann::json;

// One workspace image with everything the handlers need, computed at load.
struct WorkspaceImage {
  std::string id;
  std::filesystem::path path;
  Tensor image;  // [h,w,c]
  ForwardTrace trace;
  LinearizedHead head;
};

/// Reads, forwards and linearizes one image; id is the file stem.
WorkspaceImage load_image(const ModelManifest& model, const std::filesystem::path& path);

// Read-only after load_workspace returns; handlers may share it across threads.
struct Workspace {
  std::filesystem::path config_path;
  ModelManifest model;
  std::vector<WorkspaceImage> images;  // sorted by id
  EmbeddingIndex index;
  std::vector<IndexFailure> failures;  // images that could not be loaded

  const WorkspaceImage& image(const std::string& id) const;  // throws UnknownId
};

/// Config JSON: {"model": manifest path, "images": directory of .tnsr files,
/// "index": index directory}. Relative paths resolve against the config's
/// directory. When the index directory holds no meta.json the index is built
/// from the workspace images in memory.
Workspace load_workspace(const std::filesystem::path& config);

/// {h, w, values (row-major), min, max}.
Json map_payload(const ActivationMap& map);

/// S and D of two traces. Shared by the CLI and the service.
SimilarityReport trace_similarity(const ForwardTrace& query, const ForwardTrace& ref);

/// "decomposition", "gradcam" or "gradcam_nonorm". with_bias only applies to
/// decomposition.
struct PairMaps {
  ActivationMap query;
  ActivationMap ref;
};
PairMaps explain_pair(const WorkspaceImage& query, const WorkspaceImage& ref,
                      const std::string& variant, bool with_bias);

/// Nearest feature cells of image pixels (x = column, y = row), deduplicated
/// and kept in first-seen order.
std::vector<Cell> roi_cells(const std::vector<std::pair<Index, Index>>& pixels_xy,
                            Index image_h, Index image_w, Index grid_rows, Index grid_cols);

class Service {
 public:
  explicit Service(std::shared_ptr<const Workspace> workspace);

  Json images() const;
  Json explain(const Json& request) const;
  Json point(const Json& request) const;
  Json retrieve(const Json& request) const;
  /// PGM/PPM rendering of the stored tensor.
  std::string image_bytes(const std::string& id) const;

  const Workspace& workspace() const { return *workspace_; }

 private:
  std::shared_ptr<const Workspace> workspace_;
};

/// HTTP status for an error code (404 for UnknownId, 400 for bad requests).
int http_status(ErrorCode code);
Json error_body(const Error& error);

/// Serves the API on a background thread pool.
class HttpServer {
 public:
  explicit HttpServer(const Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds `host:port` (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop() is called.
  void listen();
  /// Blocks until listen() is accepting connections.
  void wait_until_ready() const;
  /// Stops accepting; in-flight requests finish.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mlens

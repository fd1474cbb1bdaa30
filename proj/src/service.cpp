#include "metric_lens/service.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "httplib.h"
#include "metric_lens/gradcam.hpp"
#include "metric_lens/tensor_io.hpp"

namespace mlens {

namespace fs = std::filesystem;

namespace {

Error bad_request(const std::string& message) { return Error(ErrorCode::kInvalidArgument, message); }

const Json& field(const Json& request, const char* key) {
  if (!request.is_object()) throw bad_request("request body must be a JSON object");
  auto it = request.find(key);
  if (it == request.end()) throw bad_request(std::string("missing field '") + key + "'");
  return *it;
}

std::string string_field(const Json& request, const char* key) {
  const Json& v = field(request, key);
  if (!v.is_string()) throw bad_request(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

Index int_field(const Json& v, const char* key) {
  if (!v.is_number_integer()) throw bad_request(std::string("field '") + key + "' must be an integer");
  return v.get<Index>();
}

bool bool_field(const Json& request, const char* key, bool fallback) {
  auto it = request.find(key);
  if (it == request.end() || it->is_null()) return fallback;
  if (!it->is_boolean()) throw bad_request(std::string("field '") + key + "' must be a boolean");
  return it->get<bool>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

Json cell_json(const Cell& c) { return Json::array({c.row, c.col}); }

}  // namespace

const WorkspaceImage& Workspace::image(const std::string& id) const {
  auto it = std::lower_bound(images.begin(), images.end(), id,
                             [](const WorkspaceImage& img, const std::string& key) { return img.id < key; });
  if (it == images.end() || it->id != id) throw Error(ErrorCode::kUnknownId, "no image '" + id + "'");
  return *it;
}

WorkspaceImage load_image(const ModelManifest& model, const fs::path& path) {
  WorkspaceImage img;
  img.id = path.stem().string();
  img.path = path;
  img.image = read_tensor(path);
  img.trace = forward(model, img.image);
  img.head = linearize_head(model, img.trace);
  return img;
}

Workspace load_workspace(const fs::path& config) {
  std::ifstream in(config);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open workspace " + config.string());
  Json cfg;
  try {
    cfg = Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kInvalidManifest, "workspace " + config.string() + ": " + e.what());
  }
  const fs::path base = config.parent_path();
  auto path_of = [&](const char* key) {
    if (!cfg.contains(key) || !cfg[key].is_string())
      throw Error(ErrorCode::kInvalidManifest, std::string("workspace needs a string '") + key + "'");
    return resolve(base, cfg[key].get<std::string>());
  };

  Workspace ws;
  ws.config_path = config;
  ws.model = load_manifest(path_of("model"));

  const fs::path image_dir = path_of("images");
  if (!fs::is_directory(image_dir)) throw Error(ErrorCode::kIoFailure, "no image directory " + image_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(image_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".tnsr") files.push_back(entry.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem().string() < b.stem().string(); });

  for (const fs::path& file : files) {
    try {
      ws.images.push_back(load_image(ws.model, file));
    } catch (const Error& e) {
      ws.failures.push_back({file.string(), e.what()});
    }
  }

  const fs::path index_dir = path_of("index");
  if (fs::exists(index_dir / "meta.json")) {
    ws.index = load_index(index_dir);
    if (!ws.index.empty() && ws.index.embedding_length != ws.model.embedding_length())
      throw Error(ErrorCode::kEmbeddingLengthMismatch, "index does not match the model");
  } else {
    ws.index.embedding_length = ws.model.embedding_length();
    for (const WorkspaceImage& img : ws.images) {
      try {
        ws.index.add(img.id, img.path.string(), img.trace.embedding);
      } catch (const Error& e) {
        ws.failures.push_back({img.path.string(), e.what()});
      }
    }
  }
  return ws;
}

Json map_payload(const ActivationMap& map) {
  const auto& v = map.values.values();
  Json values = Json::array();
  for (Index i = 0; i < v.size(); ++i) values.push_back(static_cast<double>(v[i]));
  return {{"h", map.height()},
          {"w", map.width()},
          {"values", std::move(values)},
          {"min", v.size() ? static_cast<double>(v.minCoeff()) : 0.0},
          {"max", v.size() ? static_cast<double>(v.maxCoeff()) : 0.0}};
}

SimilarityReport trace_similarity(const ForwardTrace& query, const ForwardTrace& ref) {
  return similarity(query.embedding.values(), ref.embedding.values());
}

PairMaps explain_pair(const WorkspaceImage& q, const WorkspaceImage& r, const std::string& variant,
                      bool with_bias) {
  const Tensor& Aq = q.trace.conv_feature;
  const Tensor& Ar = r.trace.conv_feature;
  PairMaps maps;
  if (variant == "decomposition") {
    const DecompositionResult d = decompose_pair(q.head, Aq, r.head, Ar);
    maps = {overall_map(d, Side::kQuery, with_bias), overall_map(d, Side::kRef, with_bias)};
  } else if (variant == "gradcam" || variant == "gradcam_nonorm") {
    if (with_bias) throw Error(ErrorCode::kVariantUnsupported, variant + " has no bias option");
    const bool normalized = variant == "gradcam";
    maps = {gradcam_metric(q.head, Aq, q.trace.embedding, r.trace.embedding, normalized),
            gradcam_metric(r.head, Ar, r.trace.embedding, q.trace.embedding, normalized)};
  } else {
    throw Error(ErrorCode::kVariantUnsupported, "unknown variant '" + variant + "'");
  }
  maps.query = upsample(maps.query, q.image.dim(0), q.image.dim(1));
  maps.ref = upsample(maps.ref, r.image.dim(0), r.image.dim(1));
  return maps;
}

std::vector<Cell> roi_cells(const std::vector<std::pair<Index, Index>>& pixels_xy, Index image_h,
                            Index image_w, Index grid_rows, Index grid_cols) {
  std::vector<Cell> cells;
  std::set<std::pair<Index, Index>> seen;
  for (const auto& [x, y] : pixels_xy) {
    const Cell c = pixel_to_cell(y, x, image_h, image_w, grid_rows, grid_cols);
    if (seen.insert({c.row, c.col}).second) cells.push_back(c);
  }
  return cells;
}

Service::Service(std::shared_ptr<const Workspace> workspace) : workspace_(std::move(workspace)) {}

Json Service::images() const {
  Json list = Json::array();
  for (const WorkspaceImage& img : workspace_->images) {
    list.push_back({{"id", img.id},
                    {"h", img.image.dim(0)},
                    {"w", img.image.dim(1)},
                    {"channels", img.image.dim(2)},
                    {"url", "/api/image/" + img.id}});
  }
  const Shape feature = workspace_->model.feature_shape();
  return {{"images", std::move(list)},
          {"feature_grid", Json::array({feature[0], feature[1]})},
          {"embedding_length", workspace_->model.embedding_length()},
          {"index_size", workspace_->index.size()}};
}

Json Service::explain(const Json& request) const {
  const WorkspaceImage& q = workspace_->image(string_field(request, "query_id"));
  const WorkspaceImage& r = workspace_->image(string_field(request, "ref_id"));
  const std::string variant = request.contains("variant") ? string_field(request, "variant") : "decomposition";
  const bool with_bias = bool_field(request, "with_bias", false);
  const SimilarityReport s = trace_similarity(q.trace, r.trace);
  const PairMaps maps = explain_pair(q, r, variant, with_bias);
  return {{"S", s.S},
          {"D", s.D},
          {"variant", variant},
          {"with_bias", with_bias},
          {"overall_query", map_payload(maps.query)},
          {"overall_ref", map_payload(maps.ref)}};
}

Json Service::point(const Json& request) const {
  const WorkspaceImage& q = workspace_->image(string_field(request, "query_id"));
  const WorkspaceImage& r = workspace_->image(string_field(request, "ref_id"));
  const Side side = request.contains("side") ? side_from_string(string_field(request, "side")) : Side::kQuery;
  const Index x = int_field(field(request, "x"), "x");
  const Index y = int_field(field(request, "y"), "y");
  const WorkspaceImage& clicked = side == Side::kQuery ? q : r;
  const WorkspaceImage& other = side == Side::kQuery ? r : q;
  const Index h = clicked.image.dim(0), w = clicked.image.dim(1);
  if (x < 0 || y < 0 || x >= w || y >= h) {
    throw Error(ErrorCode::kPointOutOfRange, "pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                                                 ") outside " + std::to_string(w) + "x" + std::to_string(h));
  }
  const DecompositionResult d = decompose_pair(q.head, q.trace.conv_feature, r.head, r.trace.conv_feature);
  const Cell cell = pixel_to_cell(y, x, h, w, clicked.head.rows(), clicked.head.cols());
  // Kept at feature resolution so the values sum to the clicked cell's
  // bias-free overall value; clients resize to image_h x image_w.
  const ActivationMap map = point_specific_map(d, side, cell);
  return {{"map", map_payload(map)},
          {"clicked_feature_cell", cell_json(cell)},
          {"side", to_string(side)},
          {"image_h", other.image.dim(0)},
          {"image_w", other.image.dim(1)}};
}

Json Service::retrieve(const Json& request) const {
  const WorkspaceImage& q = workspace_->image(string_field(request, "query_id"));
  Index k = 10;
  if (request.contains("k") && !request["k"].is_null()) k = int_field(request["k"], "k");
  if (k <= 0) throw bad_request("k must be positive");
  const auto kk = static_cast<std::size_t>(k);

  std::vector<RankedEntry> ranked;
  Json response = {{"query_id", q.id}};
  auto roi = request.find("roi");
  if (roi == request.end() || roi->is_null()) {
    ranked = retrieve_overall(workspace_->index, q.trace.embedding, kk);
    response["mode"] = "overall";
  } else {
    if (!roi->is_array()) throw bad_request("roi must be null or a list of pixels");
    std::vector<std::pair<Index, Index>> pixels;
    const Index h = q.image.dim(0), w = q.image.dim(1);
    for (const Json& p : *roi) {
      Index x = 0, y = 0;
      if (p.is_array() && p.size() == 2) {
        x = int_field(p[0], "roi x");
        y = int_field(p[1], "roi y");
      } else if (p.is_object()) {
        x = int_field(field(p, "x"), "x");
        y = int_field(field(p, "y"), "y");
      } else {
        throw bad_request("roi entries are [x, y] or {\"x\", \"y\"}");
      }
      if (x < 0 || y < 0 || x >= w || y >= h) throw Error(ErrorCode::kPointOutOfRange, "roi pixel outside the image");
      pixels.push_back({x, y});
    }
    const std::vector<Cell> cells = roi_cells(pixels, h, w, q.head.rows(), q.head.cols());
    ranked = retrieve_interactive(workspace_->index, q.head, q.trace.conv_feature, cells, kk);
    response["mode"] = "roi";
    Json cj = Json::array();
    for (const Cell& c : cells) cj.push_back(cell_json(c));
    response["roi_cells"] = std::move(cj);
  }
  Json results = Json::array();
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    results.push_back({{"rank", i + 1},
                       {"id", ranked[i].id},
                       {"similarity", ranked[i].similarity},
                       {"thumbnail", "/api/image/" + ranked[i].id}});
  }
  response["results"] = std::move(results);
  return response;
}

std::string Service::image_bytes(const std::string& id) const {
  return encode_image_preview(workspace_->image(id).image);
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownId:
      return 404;
    case ErrorCode::kVariantUnsupported:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kPointOutOfRange:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kEmbeddingLengthMismatch:
      return 400;
    case ErrorCode::kEmptyIndex:
      return 409;
    case ErrorCode::kDegenerateEmbedding:
      return 422;
    default:
      return 500;
  }
}

Json error_body(const Error& error) {
  return {{"error", to_string(error.code())}, {"message", error.detail()}};
}

struct HttpServer::Impl {
  const Service& service;
  httplib::Server server;

  explicit Impl(const Service& s) : service(s) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/api/images", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { send(res, service.images()); });
    });
    post("/api/explain", &Service::explain);
    post("/api/point", &Service::point);
    post("/api/retrieve", &Service::retrieve);
    server.Get("/api/image/:id", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        res.set_content(service.image_bytes(req.path_params.at("id")), "image/x-portable-anymap");
      });
    });
  }

  static void send(httplib::Response& res, const Json& body) { res.set_content(body.dump(), "application/json"); }

  template <typename F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      res.status = http_status(e.code());
      send(res, error_body(e));
    } catch (const std::exception& e) {
      res.status = 500;
      send(res, {{"error", "Internal"}, {"message", e.what()}});
    }
  }

  void post(const char* path, Json (Service::*handler)(const Json&) const) {
    server.Post(path, [this, handler](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        Json body;
        try {
          body = Json::parse(req.body);
        } catch (const Json::exception& e) {
          throw bad_request(std::string("invalid JSON body: ") + e.what());
        }
        send(res, (service.*handler)(body));
      });
    });
  }
};

HttpServer::HttpServer(const Service& service) : impl_(std::make_unique<Impl>(service)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error(ErrorCode::kIoFailure, "cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port))
    throw Error(ErrorCode::kIoFailure, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace mlens

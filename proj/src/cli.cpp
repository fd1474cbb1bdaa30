#include "metric_lens/cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "metric_lens/evaluate.hpp"
#include "metric_lens/fixtures.hpp"
#include "metric_lens/service.hpp"
#include "metric_lens/tensor_io.hpp"

namespace mlens {

namespace fs = std::filesystem;

namespace {

const std::vector<double> kTableThresholds = {0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};

struct DatasetLine {
  fs::path query;
  fs::path ref;
  Json raw;
};

std::vector<DatasetLine> read_dataset(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open dataset " + path.string());
  std::vector<DatasetLine> lines;
  std::string text;
  for (int number = 1; std::getline(in, text); ++number) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(text);
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("query") || !j.contains("ref"))
      throw Error(ErrorCode::kInvalidArgument,
                  path.string() + ":" + std::to_string(number) + ": needs \"query\" and \"ref\"");
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : path.parent_path() / p; };
    lines.push_back({resolve(j["query"].get<std::string>()), resolve(j["ref"].get<std::string>()), j});
  }
  return lines;
}

void write_map(const ActivationMap& map, const fs::path& stem) {
  write_tensor(map.values, fs::path(stem).concat(".tnsr"));
  write_pgm(map.values, fs::path(stem).concat(".pgm"));
}

void write_json(const Json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

HeadPattern head_from_string(const std::string& name) {
  for (HeadPattern p : all_head_patterns())
    if (to_string(p) == name) return p;
  throw Error(ErrorCode::kInvalidArgument, "unknown head pattern '" + name + "'");
}

// "x,y;x,y;..." -> pixel list.
std::vector<std::pair<Index, Index>> parse_roi(const std::string& text) {
  std::vector<std::pair<Index, Index>> pixels;
  std::stringstream all(text);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    std::stringstream pair(item);
    Index x = 0, y = 0;
    char comma = 0;
    if (!(pair >> x >> comma >> y) || comma != ',')
      throw Error(ErrorCode::kInvalidArgument, "roi entries are x,y separated by ';'");
    pixels.push_back({x, y});
  }
  if (pixels.empty()) throw Error(ErrorCode::kInvalidArgument, "empty roi");
  return pixels;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

int serve(const fs::path& workspace_path, const std::string& host, int port, std::ostream& out) {
  auto workspace = std::make_shared<const Workspace>(load_workspace(workspace_path));
  for (const auto& f : workspace->failures) out << "skipped " << f.image_ref << ": " << f.reason << "\n";
  const Service service(workspace);
  HttpServer server(service);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  sigset_t previous;
  pthread_sigmask(SIG_BLOCK, &signals, &previous);

  const int bound = server.bind(host, port);
  out << "serving " << workspace->images.size() << " images on http://" << host << ":" << bound << "\n"
      << std::flush;

  std::atomic<bool> done{false};
  std::thread waiter([&] {
    const timespec tick{0, 200'000'000};
    while (!done) {
      if (sigtimedwait(&signals, nullptr, &tick) > 0) {
        server.wait_until_ready();
        server.stop();
        return;
      }
    }
  });
  server.listen();
  done = true;
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &previous, nullptr);
  out << "stopped\n";
  return 0;
}

}  // namespace

int cli_run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Activation decomposition for metric-learning models", "metric_lens"};
  app.require_subcommand(1);

  std::string model_path, query_path, ref_path, out_dir, variant = "decomposition", side_name = "query";
  bool with_bias = false;

  auto add_pair = [&](CLI::App* cmd) {
    cmd->add_option("--model", model_path, "model manifest JSON")->required();
    cmd->add_option("--query", query_path, "query image tensor")->required();
    cmd->add_option("--ref", ref_path, "reference image tensor")->required();
  };
  auto add_variant = [&](CLI::App* cmd) {
    cmd->add_option("--variant", variant, "decomposition | gradcam | gradcam_nonorm")
        ->check(CLI::IsMember({"decomposition", "gradcam", "gradcam_nonorm"}));
    cmd->add_flag("--with-bias", with_bias, "include the bias term (decomposition only)");
  };

  auto* similarity_cmd = app.add_subcommand("similarity", "print S and D of an image pair as JSON");
  add_pair(similarity_cmd);

  auto* explain_cmd = app.add_subcommand("explain", "write overall activation maps of a pair");
  add_pair(explain_cmd);
  add_variant(explain_cmd);
  explain_cmd->add_option("--out", out_dir, "output directory")->required();

  Index px = 0, py = 0;
  auto* point_cmd = app.add_subcommand("point", "write the point-specific map for a clicked pixel");
  add_pair(point_cmd);
  point_cmd->add_option("--x", px, "pixel column")->required();
  point_cmd->add_option("--y", py, "pixel row")->required();
  point_cmd->add_option("--side", side_name, "clicked image: query | ref")->check(CLI::IsMember({"query", "ref"}));
  point_cmd->add_option("--out", out_dir, "output directory")->required();

  std::string dataset;
  std::vector<double> thresholds = kTableThresholds;
  auto* localize_cmd = app.add_subcommand("localize", "localization accuracy per threshold as CSV");
  localize_cmd->add_option("--model", model_path, "model manifest JSON")->required();
  localize_cmd->add_option("--dataset", dataset, "JSON lines with query, ref, gt_box")->required();
  localize_cmd->add_option("--thresholds", thresholds, "comma separated")->delimiter(',');
  add_variant(localize_cmd);

  std::string mode = "overall", pairs_out;
  double bin_width = 7.0;
  auto* orient_cmd = app.add_subcommand("orient", "orientation error histogram as CSV");
  orient_cmd->add_option("--model", model_path, "model manifest JSON")->required();
  orient_cmd->add_option("--dataset", dataset, "JSON lines with query, ref, gt_rotation_deg")->required();
  orient_cmd->add_option("--mode", mode, "overall | point")->check(CLI::IsMember({"overall", "point"}));
  orient_cmd->add_option("--bin-width", bin_width, "histogram bin width in degrees");
  orient_cmd->add_option("--pairs-out", pairs_out, "per-pair CSV");
  add_variant(orient_cmd);

  std::vector<std::string> image_args;
  std::string index_dir, roi_text;
  std::size_t k = 10;
  auto* index_cmd = app.add_subcommand("index", "build or query an embedding index");
  index_cmd->require_subcommand(1);
  auto* build_cmd = index_cmd->add_subcommand("build", "embed images into an index directory");
  build_cmd->add_option("--model", model_path, "model manifest JSON")->required();
  build_cmd->add_option("--images", image_args, "image tensors or directories")->required();
  build_cmd->add_option("--out", index_dir, "index directory")->required();
  auto* query_cmd = index_cmd->add_subcommand("query", "rank the index against a query image");
  query_cmd->add_option("--model", model_path, "model manifest JSON")->required();
  query_cmd->add_option("--index", index_dir, "index directory")->required();
  query_cmd->add_option("--query", query_path, "query image tensor")->required();
  query_cmd->add_option("--roi", roi_text, "pixels x,y;x,y (omit for overall retrieval)");
  query_cmd->add_option("--k", k, "number of results")->check(CLI::PositiveNumber);

  std::string workspace_path, host = "127.0.0.1";
  int port = 8787;
  auto* serve_cmd = app.add_subcommand("serve", "run the HTTP API");
  serve_cmd->add_option("--workspace", workspace_path, "workspace JSON (default $METRIC_LENS_WORKSPACE)");
  serve_cmd->add_option("--port", port, "listen port")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--host", host, "listen address");

  std::string head_name = "gap_fc";
  std::size_t count = 8;
  std::uint64_t seed = 1;
  auto* fixture_cmd = app.add_subcommand("fixture", "write a demo workspace with a random toy model");
  fixture_cmd->add_option("--out", out_dir, "output directory")->required();
  fixture_cmd->add_option("--head", head_name, "head pattern");
  fixture_cmd->add_option("--count", count, "number of images")->check(CLI::Range(2, 100000));
  fixture_cmd->add_option("--seed", seed, "random seed");

  if (argc <= 1) {
    err << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (!app.get_subcommands().empty()) {
      CLI::App* sub = app.get_subcommands().back();
      err << sub->help();
    } else {
      err << app.help();
    }
    return 2;
  }

  try {
    if (*similarity_cmd || *explain_cmd || *point_cmd) {
      const ModelManifest model = load_manifest(model_path);
      const WorkspaceImage q = load_image(model, query_path);
      const WorkspaceImage r = load_image(model, ref_path);
      const SimilarityReport s = trace_similarity(q.trace, r.trace);
      Json report = {{"S", s.S}, {"D", s.D}};
      if (*similarity_cmd) {
        out << report.dump() << "\n";
      } else if (*explain_cmd) {
        fs::create_directories(out_dir);
        const PairMaps maps = explain_pair(q, r, variant, with_bias);
        write_map(maps.query, fs::path(out_dir) / "query_map");
        write_map(maps.ref, fs::path(out_dir) / "ref_map");
        report["variant"] = variant;
        report["with_bias"] = with_bias;
        write_json(report, fs::path(out_dir) / "similarity.json");
        out << report.dump() << "\n";
      } else {
        fs::create_directories(out_dir);
        const Side side = side_from_string(side_name);
        const WorkspaceImage& clicked = side == Side::kQuery ? q : r;
        const WorkspaceImage& other = side == Side::kQuery ? r : q;
        const Index h = clicked.image.dim(0), w = clicked.image.dim(1);
        if (px < 0 || py < 0 || px >= w || py >= h)
          throw Error(ErrorCode::kPointOutOfRange, "pixel outside the clicked image");
        const DecompositionResult d = decompose_pair(q.head, q.trace.conv_feature, r.head, r.trace.conv_feature);
        const Cell cell = pixel_to_cell(py, px, h, w, clicked.head.rows(), clicked.head.cols());
        const ActivationMap map = point_specific_map(d, side, cell);
        write_map(map, fs::path(out_dir) / "point_map");
        write_map(upsample(map, other.image.dim(0), other.image.dim(1)), fs::path(out_dir) / "point_map_image");
        report["clicked_feature_cell"] = {cell.row, cell.col};
        report["side"] = side_name;
        report["map_sum"] = map.values.values().cast<double>().sum();
        write_json(report, fs::path(out_dir) / "point.json");
        out << report.dump() << "\n";
      }
      return 0;
    }

    if (*localize_cmd) {
      if (thresholds.empty()) throw Error(ErrorCode::kInvalidArgument, "no thresholds");
      const ModelManifest model = load_manifest(model_path);
      std::vector<LocalizationSample> samples;
      for (const DatasetLine& line : read_dataset(dataset)) {
        if (!line.raw.contains("gt_box")) continue;
        const auto box = line.raw["gt_box"].get<std::vector<Index>>();
        if (box.size() != 4) throw Error(ErrorCode::kInvalidArgument, "gt_box needs 4 numbers");
        const WorkspaceImage q = load_image(model, line.query);
        const WorkspaceImage r = load_image(model, line.ref);
        const ActivationMap map = explain_pair(q, r, variant, with_bias).query;
        samples.push_back({map, BBox{box[0], box[1], box[2], box[3]}, q.image.dim(0), q.image.dim(1)});
      }
      if (samples.empty()) throw Error(ErrorCode::kEmptyInput, "dataset has no gt_box lines");
      out << "threshold,accuracy\n";
      for (double t : thresholds) out << fmt(t) << "," << fmt(localization_accuracy(samples, t)) << "\n";
      return 0;
    }

    if (*orient_cmd) {
      const ModelManifest model = load_manifest(model_path);
      const OrientationMode orientation_mode = mode == "point" ? OrientationMode::kPointSpecific : OrientationMode::kOverall;
      std::vector<double> errors;
      std::ofstream pairs;
      if (!pairs_out.empty()) {
        pairs.open(pairs_out);
        if (!pairs) throw Error(ErrorCode::kIoFailure, "cannot write " + pairs_out);
        pairs << "query,ref,gt_deg,est_deg,error_deg\n";
      }
      for (const DatasetLine& line : read_dataset(dataset)) {
        if (!line.raw.contains("gt_rotation_deg")) continue;
        const double gt = line.raw["gt_rotation_deg"].get<double>();
        const WorkspaceImage q = load_image(model, line.query);
        const WorkspaceImage r = load_image(model, line.ref);
        const PairMaps maps = explain_pair(q, r, variant, with_bias);
        const DecompositionResult d = decompose_pair(q.head, q.trace.conv_feature, r.head, r.trace.conv_feature);
        const OrientationEstimate est = estimate_orientation(maps.query, maps.ref, orientation_mode, &d, Side::kQuery);
        errors.push_back(wrap_angle_error(gt, est.angle));
        if (pairs) pairs << q.id << "," << r.id << "," << fmt(gt) << "," << fmt(est.angle) << "," << fmt(errors.back()) << "\n";
      }
      if (errors.empty()) throw Error(ErrorCode::kEmptyInput, "dataset has no gt_rotation_deg lines");
      const AngleHistogram hist = angle_error_histogram(errors, bin_width);
      out << "error_deg,fraction\n";
      for (std::size_t i = 0; i < hist.centers.size(); ++i)
        out << fmt(hist.centers[i]) << "," << fmt(hist.fractions[i]) << "\n";
      return 0;
    }

    if (*build_cmd) {
      const ModelManifest model = load_manifest(model_path);
      std::vector<fs::path> files;
      for (const std::string& arg : image_args) {
        if (fs::is_directory(arg)) {
          std::vector<fs::path> found;
          for (const auto& e : fs::directory_iterator(arg))
            if (e.is_regular_file() && e.path().extension() == ".tnsr") found.push_back(e.path());
          std::sort(found.begin(), found.end());
          files.insert(files.end(), found.begin(), found.end());
        } else {
          files.emplace_back(arg);
        }
      }
      const IndexBuild built = build_index(model, files);
      save_index(built.index, index_dir);
      for (const auto& f : built.failures) err << "skipped " << f.image_ref << ": " << f.reason << "\n";
      out << "indexed " << built.index.size() << " images, " << built.failures.size() << " skipped\n";
      return 0;
    }

    if (*query_cmd) {
      const ModelManifest model = load_manifest(model_path);
      const EmbeddingIndex index = load_index(index_dir);
      const WorkspaceImage q = load_image(model, query_path);
      std::vector<RankedEntry> ranked;
      if (roi_text.empty()) {
        ranked = retrieve_overall(index, q.trace.embedding, k);
      } else {
        const Index h = q.image.dim(0), w = q.image.dim(1);
        const auto pixels = parse_roi(roi_text);
        for (const auto& [x, y] : pixels)
          if (x < 0 || y < 0 || x >= w || y >= h) throw Error(ErrorCode::kPointOutOfRange, "roi pixel outside the image");
        ranked = retrieve_interactive(index, q.head, q.trace.conv_feature,
                                      roi_cells(pixels, h, w, q.head.rows(), q.head.cols()), k);
      }
      out << "rank,id,similarity\n";
      for (std::size_t i = 0; i < ranked.size(); ++i)
        out << i + 1 << "," << ranked[i].id << "," << fmt(ranked[i].similarity) << "\n";
      return 0;
    }

    if (*serve_cmd) {
      if (workspace_path.empty()) {
        const char* env = std::getenv("METRIC_LENS_WORKSPACE");
        if (env == nullptr || *env == '\0') {
          err << "error: --workspace or METRIC_LENS_WORKSPACE is required\n";
          return 2;
        }
        workspace_path = env;
      }
      return serve(workspace_path, host, port, out);
    }

    if (*fixture_cmd) {
      write_demo_workspace(out_dir, head_from_string(head_name), count, seed);
      out << "wrote " << (fs::path(out_dir) / "workspace.json").string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mlens

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "metric_lens/cli.hpp"
#include "metric_lens/fixtures.hpp"
#include "metric_lens/tensor_io.hpp"
#include "support.hpp"

using namespace mlens;
using testing::TempDir;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "metric_lens");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

struct Demo {
  TempDir dir{"cli"};
  std::string model, img0, img1, img2;

  explicit Demo(HeadPattern head = HeadPattern::kGapFc, std::size_t count = 6) {
    REQUIRE(run({"fixture", "--out", dir.path().string(), "--head", std::string(to_string(head)), "--count",
                 std::to_string(count), "--seed", "9"})
                .code == 0);
    model = (dir / "model.json").string();
    img0 = (dir / "images" / "img_000.tnsr").string();
    img1 = (dir / "images" / "img_001.tnsr").string();
    img2 = (dir / "images" / "img_002.tnsr").string();
  }
};

}  // namespace

TEST_CASE("usage errors exit 2") {
  const Run none = run({});
  CHECK(none.code == 2);
  CHECK(none.err.find("Usage") != std::string::npos);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"similarity", "--model", "m.json"}).code == 2);
  CHECK(run({"index"}).code == 2);
  CHECK(run({"explain", "--model", "a", "--query", "b", "--ref", "c", "--out", "d", "--variant", "cam"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("domain errors exit 1") {
  TempDir dir("cli_errors");
  const Run missing = run({"similarity", "--model", (dir / "m.json").string(), "--query", "a", "--ref", "b"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("IoFailure") != std::string::npos);

  Demo demo;
  CHECK(run({"point", "--model", demo.model, "--query", demo.img0, "--ref", demo.img1, "--x", "16", "--y", "0",
             "--out", (dir / "p").string()})
            .code == 1);
  CHECK(run({"explain", "--model", demo.model, "--query", demo.img0, "--ref", demo.img1, "--out",
             (dir / "e").string(), "--variant", "gradcam", "--with-bias"})
            .code == 1);
  CHECK(run({"localize", "--model", demo.model, "--dataset", (demo.dir / "orient.jsonl").string()}).code == 1);
  CHECK(run({"fixture", "--out", (dir / "f").string(), "--head", "resnet"}).code == 1);
}

TEST_CASE("similarity and explain") {
  Demo demo(HeadPattern::kFlattenFcBn);
  const Run sim = run({"similarity", "--model", demo.model, "--query", demo.img0, "--ref", demo.img0});
  REQUIRE(sim.code == 0);
  const auto report = nlohmann::json::parse(sim.out);
  CHECK(report["S"].get<double>() == doctest::Approx(1.0).epsilon(1e-6));

  const auto out = demo.dir / "maps";
  REQUIRE(run({"explain", "--model", demo.model, "--query", demo.img0, "--ref", demo.img1, "--out", out.string(),
               "--with-bias"})
              .code == 0);
  for (const char* f : {"query_map.tnsr", "query_map.pgm", "ref_map.tnsr", "ref_map.pgm", "similarity.json"})
    CHECK(std::filesystem::exists(out / f));
  CHECK(read_tensor(out / "query_map.tnsr").shape() == Shape{16, 16});
  std::ifstream json(out / "similarity.json");
  const auto saved = nlohmann::json::parse(json);
  CHECK(saved["with_bias"] == true);
  CHECK(std::abs(saved["D"].get<double>() - (2 - 2 * saved["S"].get<double>())) <= 1e-6);
}

TEST_CASE("point writes the map of the other image") {
  Demo demo(HeadPattern::kGmpFcReluFc);
  const auto out = demo.dir / "point";
  const Run r = run({"point", "--model", demo.model, "--query", demo.img0, "--ref", demo.img1, "--x", "5", "--y",
                     "11", "--side", "ref", "--out", out.string()});
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report["side"] == "ref");
  CHECK(report["clicked_feature_cell"] == nlohmann::json::array({5, 2}));
  CHECK(read_tensor(out / "point_map.tnsr").shape() == Shape{8, 8});
  CHECK(read_tensor(out / "point_map_image.tnsr").shape() == Shape{16, 16});
}

TEST_CASE("localize prints one row per threshold") {
  Demo demo;
  const std::string dataset = (demo.dir / "pairs.jsonl").string();
  const Run r = run({"localize", "--model", demo.model, "--dataset", dataset, "--thresholds",
                     "0.15,0.2,0.3,0.4,0.5,0.6,0.7"});
  REQUIRE(r.code == 0);
  const auto rows = lines(r.out);
  REQUIRE(rows.size() == 8);
  CHECK(rows[0] == "threshold,accuracy");
  CHECK(rows[1].rfind("0.15,", 0) == 0);
  CHECK(rows[7].rfind("0.7,", 0) == 0);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double acc = std::stod(rows[i].substr(rows[i].find(',') + 1));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
  CHECK(run({"localize", "--model", demo.model, "--dataset", dataset}).out == r.out);
  CHECK(lines(run({"localize", "--model", demo.model, "--dataset", dataset, "--thresholds", "0.5", "--variant",
                   "gradcam"})
                  .out)
            .size() == 2);
}

TEST_CASE("localize scores hand-made boxes") {
  // A GAP-only model on images whose energy sits in one quadrant: the
  // decomposition map peaks there and the box must match.
  TempDir dir("cli_localize");
  Rng rng(5);
  ToyModelOptions options;
  options.height = options.width = 16;
  options.head = HeadPattern::kGap;
  ModelManifest model = make_toy_model(options, rng);
  // Identity-like positive convolutions keep energy where the input is.
  for (int layer : {0, 2}) {
    LayerSpec& conv = model.layers[static_cast<std::size_t>(layer)];
    Tensor w(conv.weight.shape());
    for (Index ci = 0; ci < w.dim(2); ++ci)
      for (Index co = 0; co < w.dim(3); ++co) w(1, 1, ci, co) = 1.0f;
    conv.weight = w;
    conv.bias = Tensor(conv.bias.shape());
  }
  save_manifest(model, dir / "model.json");
  std::ofstream pairs(dir / "pairs.jsonl");
  for (int i = 0; i < 4; ++i) {
    Tensor img(Shape{16, 16, 3});
    const Index r0 = (i / 2) * 8, c0 = (i % 2) * 8;
    for (Index r = r0; r < r0 + 8; ++r)
      for (Index c = c0; c < c0 + 8; ++c)
        for (Index k = 0; k < 3; ++k) img(r, c, k) = 1.0f;
    write_tensor(img, dir / ("q" + std::to_string(i) + ".tnsr"));
    // The first two boxes cover the bright quadrant, the last two are mirrored.
    const Index bx = (i < 2) ? c0 : 8 - c0, by = r0;
    pairs << nlohmann::json{{"query", "q" + std::to_string(i) + ".tnsr"},
                            {"ref", "q" + std::to_string(i) + ".tnsr"},
                            {"gt_box", {bx, by, bx + 8, by + 8}}}
                 .dump()
          << "\n";
  }
  pairs.close();
  const Run r = run({"localize", "--model", (dir / "model.json").string(), "--dataset",
                     (dir / "pairs.jsonl").string(), "--thresholds", "0.5"});
  REQUIRE(r.code == 0);
  CHECK(lines(r.out)[1] == "0.5,0.5");
}

TEST_CASE("orient prints a normalized histogram") {
  Demo demo(HeadPattern::kFlattenFc);
  const auto per_pair = demo.dir / "errors.csv";
  const Run r = run({"orient", "--model", demo.model, "--dataset", (demo.dir / "orient.jsonl").string(), "--mode",
                     "point", "--pairs-out", per_pair.string()});
  REQUIRE(r.code == 0);
  const auto rows = lines(r.out);
  REQUIRE(rows.size() > 1);
  CHECK(rows[0] == "error_deg,fraction");
  double total = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) total += std::stod(rows[i].substr(rows[i].find(',') + 1));
  CHECK(total == doctest::Approx(1.0));
  std::ifstream in(per_pair);
  CHECK(lines(std::string(std::istreambuf_iterator<char>(in), {})).size() == 7);
}

TEST_CASE("index build and query") {
  Demo demo(HeadPattern::kGmpFc, 5);
  const auto index = (demo.dir / "idx").string();
  const Run built = run({"index", "build", "--model", demo.model, "--images", (demo.dir / "images").string(), "--out", index});
  REQUIRE(built.code == 0);
  CHECK(built.out == "indexed 5 images, 0 skipped\n");

  const Run overall = run({"index", "query", "--model", demo.model, "--index", index, "--query", demo.img2, "--k", "3"});
  REQUIRE(overall.code == 0);
  const auto rows = lines(overall.out);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "rank,id,similarity");
  CHECK(rows[1] == "1,img_002,1");

  std::string whole;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) whole += std::to_string(x) + "," + std::to_string(y) + ";";
  const Run roi = run({"index", "query", "--model", demo.model, "--index", index, "--query", demo.img2, "--k", "10",
                       "--roi", whole});
  REQUIRE(roi.code == 0);
  CHECK(lines(roi.out).size() == 6);

  CHECK(run({"index", "query", "--model", demo.model, "--index", index, "--query", demo.img2, "--roi", "99,0"}).code == 1);
  CHECK(run({"index", "query", "--model", demo.model, "--index", index, "--query", demo.img2, "--roi", "3;4"}).code == 1);
  CHECK(run({"index", "query", "--model", demo.model, "--index", index, "--query", demo.img2, "--k", "0"}).code == 2);
}

TEST_CASE("serve needs a workspace") {
  unsetenv("METRIC_LENS_WORKSPACE");
  CHECK(run({"serve"}).code == 2);
  CHECK(run({"serve", "--workspace", "/nonexistent/workspace.json", "--port", "0"}).code == 1);
}

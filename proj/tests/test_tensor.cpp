#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <fstream>
#include <functional>
#include <random>

#include "metric_lens/tensor.hpp"
#include "metric_lens/tensor_io.hpp"
#include "support.hpp"

using namespace mlens;
using testing::code_of;
using testing::TempDir;

namespace {

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("tensor construction validates shape and data") {
  const Tensor t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t(1, 2) == 6.0f);
  CHECK(t.matrix()(1, 0) == 4.0f);
  CHECK(code_of([] { Tensor(Shape{2}, {1, 2, 3}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([] { Tensor(Shape{}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([] { Tensor(Shape{1, 1, 1, 1, 1}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([] { Tensor(Shape{0}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([] { Tensor(Shape{1}, {std::nanf("")}); }) == ErrorCode::kNonFinite);
  CHECK(code_of([] { Tensor(Shape{1}, {INFINITY}); }) == ErrorCode::kNonFinite);
}

TEST_CASE("row-major offsets, last axis fastest") {
  Tensor t(Shape{2, 3, 4});
  for (Index k = 0; k < t.size(); ++k) t[k] = static_cast<float>(k);
  CHECK(t(1, 2, 3) == 23.0f);
  CHECK(t(0, 1, 0) == 4.0f);
  CHECK(t.offset(1, 0, 0) == 12);
}

TEST_CASE("norm and inner product accumulate in double") {
  const Tensor a(Shape{2}, {3, 4});
  const Tensor b(Shape{2}, {4, 3});
  CHECK(l2_norm(a) == doctest::Approx(5.0));
  CHECK(inner(a, b) == doctest::Approx(24.0));
  CHECK(code_of([&] { inner(a, Tensor(Shape{3})); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("read_tensor decodes a hand-written file") {
  TempDir dir("tensor_read");
  const std::vector<std::uint8_t> bytes = {'T', 'N', 'S', 'R', 1, 0, 1, 2, 0, 0, 0,
                                           0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40};
  std::ofstream(dir / "t.tnsr", std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const Tensor t = read_tensor(dir / "t.tnsr");
  CHECK(t == Tensor(Shape{2}, {1.0f, 2.0f}));
}

TEST_CASE("write_tensor produces the documented byte layout") {
  TempDir dir("tensor_write");
  write_tensor(Tensor(Shape{1}, {0.0f}), dir / "zero.tnsr");
  const auto zero = file_bytes(dir / "zero.tnsr");
  REQUIRE(zero.size() == 15);
  CHECK(std::equal(zero.begin(), zero.begin() + 4, "TNSR"));
  CHECK(zero[4] == 1);
  CHECK(zero[5] == 0);
  CHECK(zero[6] == 1);
  CHECK(zero[7] == 1);
  for (std::size_t i = 11; i < 15; ++i) CHECK(zero[i] == 0);

  write_tensor(Tensor(Shape{2, 2}, {1, 2, 3, 4}), dir / "m.tnsr");
  const auto m = file_bytes(dir / "m.tnsr");
  REQUIRE(m.size() == 7 + 8 + 16);
  CHECK(m[6] == 2);
  CHECK(m[7] == 2);
  CHECK(m[11] == 2);
  CHECK(m[8] == 0);
}

TEST_CASE("decode errors carry distinct codes") {
  auto good = encode_tensor(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  auto bad_magic = good;
  std::copy_n("XXXX", 4, bad_magic.begin());
  CHECK(code_of([&] { decode_tensor(bad_magic); }) == ErrorCode::kBadMagic);
  auto bad_version = good;
  bad_version[4] = 2;
  CHECK(code_of([&] { decode_tensor(bad_version); }) == ErrorCode::kUnsupportedVersion);
  auto truncated = good;
  truncated.pop_back();
  CHECK(code_of([&] { decode_tensor(truncated); }) == ErrorCode::kTruncatedPayload);
  const std::vector<std::uint8_t> header_only = {'T', 'N', 'S', 'R', 1, 0, 2, 2, 0};
  CHECK(code_of([&] { decode_tensor(header_only); }) == ErrorCode::kTruncatedPayload);
  CHECK(code_of([] { read_tensor("/nonexistent/dir/x.tnsr"); }) == ErrorCode::kIoFailure);
  CHECK(code_of([] { write_tensor(Tensor(Shape{1}), "/nonexistent/dir/x.tnsr"); }) ==
        ErrorCode::kIoFailure);
}

TEST_CASE("serialization round trip is bit-identical for 100 random tensors") {
  TempDir dir("tensor_roundtrip");
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> rank(1, 4), extent(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    Shape shape(static_cast<std::size_t>(rank(rng)));
    for (Index& d : shape) d = extent(rng);
    Tensor t(shape);
    for (Index k = 0; k < t.size(); ++k) {
      // Random finite bit patterns, including subnormals and negative zero.
      std::uint32_t u;
      do {
        u = static_cast<std::uint32_t>(rng());
      } while (!std::isfinite(std::bit_cast<float>(u)));
      t[k] = std::bit_cast<float>(u);
    }
    const auto path = dir / ("t" + std::to_string(trial) + ".tnsr");
    write_tensor(t, path);
    const Tensor back = read_tensor(path);
    REQUIRE(back.shape() == t.shape());
    for (Index k = 0; k < t.size(); ++k) {
      REQUIRE(std::bit_cast<std::uint32_t>(back[k]) == std::bit_cast<std::uint32_t>(t[k]));
    }
    CHECK(file_bytes(path).size() == 7 + 4 * shape.size() + 4 * static_cast<std::size_t>(t.size()));
  }
}

TEST_CASE("bilinear_resize examples") {
  const Tensor one(Shape{1, 1}, {1.0f});
  CHECK(bilinear_resize(one, 3, 3) == Tensor::constant({3, 3}, 1.0f));

  const Tensor row(Shape{1, 2}, {0.0f, 1.0f});
  CHECK(bilinear_resize(row, 1, 3) == Tensor(Shape{1, 3}, {0.0f, 0.5f, 1.0f}));

  std::mt19937_64 rng(3);
  const Tensor m = testing::random_normal({4, 5}, rng);
  CHECK(bilinear_resize(m, 4, 5) == m);

  CHECK(code_of([] { bilinear_resize(Tensor(Shape{3}), 2, 2); }) == ErrorCode::kEmptyInput);
  CHECK(code_of([&] { bilinear_resize(m, 0, 2); }) == ErrorCode::kEmptyInput);
}

TEST_CASE("bilinear_resize keeps corners and value bounds") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<Index> ext(1, 7), out(1, 40);
  for (int trial = 0; trial < 200; ++trial) {
    const Index h = ext(rng), w = ext(rng), oh = out(rng), ow = out(rng);
    const Tensor m = testing::random_normal({h, w}, rng);
    const Tensor r = bilinear_resize(m, oh, ow);
    REQUIRE(r.shape() == Shape{oh, ow});
    CHECK(r.values().minCoeff() >= m.values().minCoeff());
    CHECK(r.values().maxCoeff() <= m.values().maxCoeff());
    CHECK(r(0, 0) == m(0, 0));
    if (oh > 1 && ow > 1) {
      CHECK(r(oh - 1, ow - 1) == m(h - 1, w - 1));
      CHECK(r(0, ow - 1) == m(0, w - 1));
      CHECK(r(oh - 1, 0) == m(h - 1, 0));
    }
    const Tensor c = bilinear_resize(Tensor::constant({h, w}, 2.5f), oh, ow);
    CHECK(c == Tensor::constant({oh, ow}, 2.5f));
  }
}

TEST_CASE("bilinear_resize matches a hand-evaluated interior sample") {
  // 2x2 -> 3x3: the center is the mean of the four corners.
  const Tensor m(Shape{2, 2}, {0, 2, 4, 6});
  const Tensor r = bilinear_resize(m, 3, 3);
  CHECK(r(1, 1) == doctest::Approx(3.0));
  CHECK(r(0, 1) == doctest::Approx(1.0));
  CHECK(r(1, 0) == doctest::Approx(2.0));
}

TEST_CASE("pixel to cell uses the inverse corner-aligned mapping") {
  CHECK(nearest_source_cell(0, 4, 16) == 0);
  CHECK(nearest_source_cell(15, 4, 16) == 3);
  // 4 cells over 16 pixels: pixel 7 sits at source 1.4, pixel 8 at 1.6.
  CHECK(nearest_source_cell(7, 4, 16) == 1);
  CHECK(nearest_source_cell(8, 4, 16) == 2);
  CHECK(nearest_source_cell(5, 1, 16) == 0);
}

TEST_CASE("PGM and image previews") {
  const Tensor m(Shape{2, 2}, {0, 1, 2, 3});
  const std::string pgm = encode_pgm(m);
  REQUIRE(pgm.rfind("P5\n2 2\n255\n", 0) == 0);
  const std::string px = pgm.substr(pgm.size() - 4);
  CHECK(static_cast<unsigned char>(px[0]) == 0);
  CHECK(static_cast<unsigned char>(px[3]) == 255);
  const std::string flat = encode_pgm(Tensor::constant({2, 2}, 4.0f));
  for (std::size_t i = flat.size() - 4; i < flat.size(); ++i) CHECK(flat[i] == 0);

  const std::string ppm = encode_image_preview(Tensor::constant({2, 3, 3}, 0.5f));
  CHECK(ppm.rfind("P6\n3 2\n255\n", 0) == 0);
  CHECK(ppm.size() == std::string("P6\n3 2\n255\n").size() + 18);
  CHECK(code_of([] { encode_pgm(Tensor(Shape{3})); }) == ErrorCode::kShapeMismatch);
}

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metastab/data.hpp"
#include "metastab/png_io.hpp"

using namespace metastab;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("metastab_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("png round trip preserves quantized values") {
  const Frame f = random_texture_frame(40, 32, 5);
  const auto dir = fresh_dir("png");
  save_png(dir / "x.png", f);
  const Frame g = load_png(dir / "x.png");
  REQUIRE(g.width == 40);
  REQUIRE(g.height == 32);
  for (size_t i = 0; i < f.rgb.size(); ++i) {
    const float q = std::round(std::clamp(f.rgb[i], 0.f, 1.f) * 255.f) / 255.f;
    CHECK(g.rgb[i] == doctest::Approx(q).epsilon(1e-6));
  }
}

TEST_CASE("load_sequence orders by filename index") {
  const auto dir = fresh_dir("seq");
  for (int i = 1; i <= 5; ++i) {
    char name[16];
    snprintf(name, sizeof(name), "%06d.png", i);
    Frame f = Frame::blank(32, 32, static_cast<float>(i) / 10.f);
    save_png(dir / name, f);
  }
  const FrameSequence seq = load_sequence(dir);
  CHECK(seq.size() == 5);
  for (size_t i = 0; i < 5; ++i)
    CHECK(seq[i].rgb[0] == doctest::Approx((i + 1) / 10.0).epsilon(0.01));
}

TEST_CASE("load_sequence on an empty directory reports no frames") {
  const auto dir = fresh_dir("empty");
  CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("no frames"),
                       std::runtime_error);
}

TEST_CASE("load_sequence reports the missing index on a gap") {
  const auto dir = fresh_dir("gap");
  save_png(dir / "000001.png", Frame::blank(32, 32));
  save_png(dir / "000003.png", Frame::blank(32, 32));
  CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("gap at 2"),
                       std::runtime_error);
}

TEST_CASE("load_sequence rejects mixed resolutions") {
  const auto dir = fresh_dir("mixed");
  save_png(dir / "000001.png", Frame::blank(32, 32));
  save_png(dir / "000002.png", Frame::blank(48, 32));
  CHECK_THROWS_WITH_AS(load_sequence(dir), doctest::Contains("mixed resolutions"),
                       std::runtime_error);
}

TEST_CASE("pad_boundary_frames") {
  FrameSequence seq;
  for (int i = 0; i < 5; ++i) {
    Frame f = Frame::blank(32, 32, static_cast<float>(i));
    f.index = i;
    seq.frames.push_back(f);
  }
  const FrameSequence padded = pad_boundary_frames(seq, 2);
  CHECK(padded.size() == 9);
  CHECK(padded[0].rgb == seq[0].rgb);  // bitwise copy of frame 0
  CHECK(padded[1].rgb == seq[0].rgb);
  CHECK(padded[8].rgb == seq[4].rgb);

  const FrameSequence same = pad_boundary_frames(seq, 0);
  CHECK(same.size() == 5);
}

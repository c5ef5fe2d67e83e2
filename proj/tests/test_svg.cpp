#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "attnlens/common.hpp"
#include "attnlens/svg.hpp"

using namespace attnlens;

namespace {

std::size_t count_occurrences(const std::string& hay, const std::string& needle) {
  std::size_t n = 0, pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

}  // namespace

TEST_CASE("heatmap rendering", "[svg]") {
  SECTION("one-by-one matrix renders a single cell") {
    const std::string s =
        svg_heatmap(Tensor::from({1, 1}, {0.5}), {"a"}, {"b"}, ColorScale::Sequential);
    CHECK(count_occurrences(s, "<rect") == 1);
    CHECK(s.find("<svg xmlns=\"http://www.w3.org/2000/svg\"") == 0);
    CHECK(s.find("</svg>") != std::string::npos);
  }
  SECTION("symmetric input with shared labels renders byte-identical to its transpose") {
    Tensor m = Tensor::from({3, 3}, {1.0, 0.2, -0.4, 0.2, 1.0, 0.7, -0.4, 0.7, 1.0});
    Tensor mt(3, 3);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) mt(r, c) = m(c, r);
    const std::vector<std::string> labels{"t0", "t1", "t2"};
    CHECK(svg_heatmap(m, labels, labels, ColorScale::Diverging) ==
          svg_heatmap(mt, labels, labels, ColorScale::Diverging));
  }
  SECTION("matches the frozen golden file byte for byte") {
    Tensor m = Tensor::from({3, 3}, {0.1, 0.5, 0.4, 0.7, 0.2, 0.1, 0.0, 0.3, 0.7});
    const std::string s = svg_heatmap(m, {"y1", "y2", "y3"}, {"x1", "x2", "x&3"},
                                      ColorScale::Sequential, "attention");
    const std::string golden =
        read_text_file(std::string(ATTNLENS_SOURCE_DIR) + "/tests/golden/heatmap_3x3.svg");
    CHECK(s == golden);
  }
  SECTION("token labels are escaped and embedded") {
    Tensor m = Tensor::from({1, 1}, {1.0});
    const std::string s = svg_heatmap(m, {"<w>"}, {"a&b"}, ColorScale::Sequential);
    CHECK(s.find("&lt;w&gt;") != std::string::npos);
    CHECK(s.find("a&amp;b") != std::string::npos);
    CHECK(s.find("<w>") == std::string::npos);
  }
  SECTION("scales hit their documented endpoints") {
    Tensor m = Tensor::from({1, 2}, {-1.0, 1.0});
    const std::string div = svg_heatmap(m, {"r"}, {"a", "b"}, ColorScale::Diverging);
    CHECK(div.find("#b2182b") != std::string::npos);  // full negative: red
    CHECK(div.find("#2166ac") != std::string::npos);  // full positive: blue
    CHECK(div.find("scale: diverging") != std::string::npos);
    Tensor seq = Tensor::from({1, 2}, {0.0, 2.0});
    const std::string s = svg_heatmap(seq, {"r"}, {"a", "b"}, ColorScale::Sequential);
    CHECK(s.find("#ffffff") != std::string::npos);  // zero: white
    CHECK(s.find("#08306b") != std::string::npos);  // max: deep blue
    CHECK(s.find("scale: sequential [0, 2]") != std::string::npos);
  }
  SECTION("repeated calls are bit-identical") {
    Tensor m = Tensor::from({2, 2}, {0.1, 0.9, 0.4, 0.6});
    const std::vector<std::string> rl{"r0", "r1"}, cl{"c0", "c1"};
    CHECK(svg_heatmap(m, rl, cl, ColorScale::Sequential) ==
          svg_heatmap(m, rl, cl, ColorScale::Sequential));
  }
  SECTION("bad inputs rejected") {
    Tensor m = Tensor::from({1, 2}, {0.0, 1.0});
    CHECK_THROWS_AS(svg_heatmap(Tensor(), {}, {}, ColorScale::Sequential), DataError);
    CHECK_THROWS_AS(svg_heatmap(m, {"a"}, {"b"}, ColorScale::Sequential), DataError);
    CHECK_THROWS_AS(svg_heatmap(m, {"a", "b"}, {"c"}, ColorScale::Sequential), DataError);
  }
}

TEST_CASE("bar chart rendering", "[svg]") {
  SECTION("one bar per value with formatted numbers") {
    const std::string s = svg_bars({0.25, 1.0, 0.125}, {"a", "b", "c"}, "contributions");
    CHECK(count_occurrences(s, "<rect") == 3);
    CHECK(s.find("0.25") != std::string::npos);
    CHECK(s.find("0.125") != std::string::npos);
    CHECK(s.find("contributions") != std::string::npos);
  }
  SECTION("deterministic") {
    CHECK(svg_bars({1, 2}, {"x", "y"}) == svg_bars({1, 2}, {"x", "y"}));
  }
  SECTION("bad inputs rejected") {
    CHECK_THROWS_AS(svg_bars({}, {}), DataError);
    CHECK_THROWS_AS(svg_bars({1.0}, {"a", "b"}), DataError);
  }
}

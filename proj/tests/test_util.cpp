#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "doctest.h"
#include "dpe/io.hpp"
#include "dpe/random.hpp"
#include "dpe/tensor.hpp"

using namespace dpe;

TEST_CASE("Rng stream is the standard mt19937_64") {
  Rng rng(5489);
  CHECK(rng.next() == 14514284786278117030ULL);
  Rng again(5489);
  for (int i = 0; i < 9999; ++i) again.next();
  CHECK(again.next() == 9981545732273789042ULL);
}

TEST_CASE("Rng samplers") {
  Rng rng(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.below(7);
    REQUIRE(v < 7);
    ++counts[v];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  CHECK(rng.below(1) == 0);

  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.01);

  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }

  std::vector<int> items{0, 1, 2, 3, 4, 5, 6, 7};
  Rng(3).shuffle(items);
  std::vector<int> copy{0, 1, 2, 3, 4, 5, 6, 7};
  Rng(3).shuffle(copy);
  CHECK(items == copy);
  CHECK(std::set<int>(items.begin(), items.end()).size() == 8);
}

TEST_CASE("mix_seed spreads nearby inputs") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 50; ++s)
    for (std::uint64_t t = 0; t < 50; ++t) seen.insert(mix_seed(s, t));
  CHECK(seen.size() == 2500);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

TEST_CASE("format_double round-trips") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0 / 3.0) == "0.3333333333333333");
  CHECK(format_double(-2.0) == "-2");
  CHECK(format_double(std::nan("")) == "nan");
  CHECK(format_double(1e-300) == "1e-300");
  for (double v : {0.1 + 0.2, 123456.789, 5e-324, -1.0 / 7.0}) {
    const std::string s = format_double(v);
    double back = 0.0;
    std::from_chars(s.data(), s.data() + s.size(), back);
    CHECK(back == v);
  }
}

TEST_CASE("CsvWriter") {
  CsvWriter csv({"a", "b"});
  csv.row({"1", "2"}).row({"x", "y"});
  CHECK(csv.str() == "a,b\n1,2\nx,y\n");
  CHECK(csv.rows() == 2);
  CHECK_THROWS(csv.row({"1"}));
}

TEST_CASE("write_file_atomic") {
  const auto dir = std::filesystem::path(DPE_TEST_DATA_DIR) / "atomic" / "sub";
  std::filesystem::remove_all(dir.parent_path());
  write_file_atomic(dir / "f.txt", "one");
  write_file_atomic(dir / "f.txt", "two");
  CHECK(read_file(dir / "f.txt") == "two");
  CHECK_FALSE(std::filesystem::exists(dir / "f.txt.tmp"));
  CHECK_THROWS(read_file(dir / "missing.txt"));
}

TEST_CASE("Tensor basics") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at(1, 2) == 6.0);
  CHECK(t.reshaped({3, 2}).at(2, 1) == 6.0);
  const std::vector<std::size_t> rows{1, 1, 0};
  CHECK(t.gather_rows(rows).values() == std::vector<double>{4, 5, 6, 4, 5, 6, 1, 2, 3});
  CHECK(shape_to_string({2, 3}) == "(2, 3)");
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1.0}));
  CHECK_THROWS(t.reshaped({4}));
  t[0] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

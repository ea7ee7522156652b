#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <set>

#include "ccst/dataio.hpp"
#include "support.hpp"

namespace ccst {
namespace {

std::string record_bytes(std::int32_t dim, std::initializer_list<float> values) {
  std::string out(sizeof dim, '\0');
  std::memcpy(out.data(), &dim, sizeof dim);
  for (float v : values) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    out.append(buf, 4);
  }
  return out;
}

template <class Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

TEST(Fvecs, SingleRecordOfTwentyBytes) {
  const auto bytes = record_bytes(4, {1.0f, 2.0f, 3.0f, 4.0f});
  ASSERT_EQ(bytes.size(), 20u);
  const auto d = parse_fvecs(bytes);
  EXPECT_EQ(d.count(), 1u);
  EXPECT_EQ(d.dim(), 4u);
  EXPECT_EQ(d.row(0)[3], 4.0f);
}

TEST(Fvecs, TruncatedRecordNamesOffset) {
  const auto bytes = record_bytes(4, {1.0f, 2.0f, 3.0f, 4.0f}).substr(0, 19);
  const auto msg = error_of([&] { parse_fvecs(bytes); });
  EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
  EXPECT_NE(msg.find("offset 0"), std::string::npos) << msg;
}

TEST(Fvecs, InconsistentDimensionNamesBoth) {
  const auto bytes = record_bytes(2, {1.0f, 2.0f}) + record_bytes(3, {1.0f, 2.0f, 3.0f});
  const auto msg = error_of([&] { parse_fvecs(bytes); });
  EXPECT_NE(msg.find("3 vs first record 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("offset 12"), std::string::npos) << msg;
}

TEST(Fvecs, RejectsNonFiniteValues) {
  const auto bytes = record_bytes(2, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(parse_fvecs(bytes), FormatError);
}

TEST(Fvecs, FileRoundTripIsBitExact) {
  testing::TempDir dir;
  const auto d = testing::gaussian_dataset(100, 17, 5);
  write_fvecs(d, dir.file("a.fvecs"));
  EXPECT_EQ(read_fvecs(dir.file("a.fvecs")), d);
  EXPECT_EQ(read_vectors(dir.file("a.fvecs")), d);
}

TEST(Fvecs, EmptyFileIsEmptyDataset) {
  const auto d = parse_fvecs("");
  EXPECT_TRUE(d.empty());
  EXPECT_EQ(d.dim(), 0u);
}

TEST(Bvecs, WidensBytes) {
  std::string bytes(4, '\0');
  const std::int32_t dim = 2;
  std::memcpy(bytes.data(), &dim, 4);
  bytes.push_back('\x00');
  bytes.push_back('\xff');
  const auto d = parse_bvecs(bytes);
  ASSERT_EQ(d.count(), 1u);
  EXPECT_EQ(d.row(0)[0], 0.0f);
  EXPECT_EQ(d.row(0)[1], 255.0f);
}

TEST(Bvecs, EmptyAndNegativeHeader) {
  EXPECT_EQ(parse_bvecs("").count(), 0u);
  std::string bytes(4, '\0');
  const std::int32_t dim = -3;
  std::memcpy(bytes.data(), &dim, 4);
  EXPECT_THROW(parse_bvecs(bytes), FormatError);
}

TEST(Bvecs, ReadByExtension) {
  testing::TempDir dir;
  std::string bytes(4, '\0');
  const std::int32_t dim = 3;
  std::memcpy(bytes.data(), &dim, 4);
  bytes += std::string("\x01\x02\x03", 3);
  write_file(dir.file("x.bvecs"), bytes);
  const auto d = read_vectors(dir.file("x.bvecs"));
  EXPECT_EQ(d.row(0)[2], 3.0f);
}

TEST(Ivecs, RoundTrip) {
  testing::TempDir dir;
  NeighborLists lists(7, 5, false);
  for (std::size_t i = 0; i < lists.ids.size(); ++i) lists.ids[i] = static_cast<std::int32_t>(i * 3 % 11);
  write_ivecs(lists, dir.file("g.ivecs"));
  const auto back = read_ivecs(dir.file("g.ivecs"));
  EXPECT_EQ(back.query_count, 7u);
  EXPECT_EQ(back.k, 5u);
  EXPECT_EQ(back.ids, lists.ids);
}

TEST(Io, UnwritablePathIsIoError) {
  EXPECT_THROW(write_fvecs(testing::gaussian_dataset(2, 2, 1), "/nonexistent-dir/x.fvecs"), IoError);
  EXPECT_THROW(read_fvecs("/nonexistent-dir/x.fvecs"), IoError);
}

TEST(Parsing, ArbitraryBytesEitherParseOrFailCleanly) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> byte(0, 255), len(0, 64), small_dim(1, 4);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string bytes;
    if (trial % 2 == 0) {
      // Plausible header followed by random payload of random length.
      const std::int32_t d = small_dim(rng);
      bytes.assign(4, '\0');
      std::memcpy(bytes.data(), &d, 4);
    }
    const int n = len(rng);
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<char>(byte(rng)));
    for (auto parse : {+[](std::string_view b) { return parse_fvecs(b); }, +[](std::string_view b) { return parse_bvecs(b); }}) {
      try {
        const auto d = parse(bytes);
        EXPECT_EQ(d.values().size(), d.count() * d.dim());
        EXPECT_TRUE(d.all_finite());
      } catch (const FormatError&) {
      }
    }
  }
}

TEST(Dataset, RejectsInconsistentShape) {
  EXPECT_THROW(VectorDataset(2, 3, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(VectorDataset(2, 0), ShapeError);
}

TEST(SplitQueries, DeterministicPartition) {
  VectorDataset d(10, 1);
  for (std::size_t i = 0; i < 10; ++i) d.row(i)[0] = static_cast<float>(i);
  const auto [b1, q1] = split_queries(d, 2, 7);
  const auto [b2, q2] = split_queries(d, 2, 7);
  EXPECT_EQ(b1, b2);
  EXPECT_EQ(q1, q2);
  EXPECT_EQ(b1.count() + q1.count(), 10u);
  std::multiset<float> all;
  for (const auto* part : {&b1, &q1})
    for (float v : part->values()) all.insert(v);
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(std::set<float>(all.begin(), all.end()).size(), 10u);
}

TEST(SplitQueries, RangeChecked) {
  const auto d = testing::gaussian_dataset(10, 2, 1);
  EXPECT_THROW(split_queries(d, 10, 1), ConfigError);
  EXPECT_THROW(split_queries(d, 0, 1), ConfigError);
}

}  // namespace
}  // namespace ccst

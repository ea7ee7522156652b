#include <gtest/gtest.h>

#include "ccst/eval.hpp"
#include "ccst/hnsw.hpp"
#include "support.hpp"

namespace ccst {
namespace {

HnswConfig small_hnsw(std::size_t M = 8, std::size_t efc = 64) {
  HnswConfig c;
  c.M = M;
  c.ef_construction = efc;
  c.seed = 11;
  return c;
}

TEST(HnswConfig, Validation) {
  HnswConfig c;
  c.M = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.ef_construction = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_DOUBLE_EQ(HnswConfig{}.level_multiplier(), 1.0 / std::log(16.0));
}

TEST(Build, SinglePointAndEmpty) {
  const auto one = testing::gaussian_dataset(1, 4, 1);
  const auto index = HnswIndex::build(one, small_hnsw());
  EXPECT_EQ(index.count(), 1u);
  EXPECT_EQ(index.entry_point(), 0u);
  for (std::size_t l = 0; l <= index.level(0); ++l) EXPECT_TRUE(index.neighbors(0, l).empty());
  std::vector<std::int32_t> ids(3);
  index.search(one.row(0), 3, 3, ids);
  EXPECT_EQ(ids, (std::vector<std::int32_t>{0, -1, -1}));
  EXPECT_THROW(HnswIndex::build(VectorDataset(), small_hnsw()), ConfigError);
}

TEST(Build, StructuralInvariants) {
  const auto data = testing::gaussian_dataset(2000, 12, 2);
  const auto index = HnswIndex::build(data, small_hnsw());
  std::size_t top = 0;
  for (HnswIndex::Id i = 0; i < index.count(); ++i) top = std::max(top, index.level(i));
  EXPECT_EQ(index.max_level(), top);
  EXPECT_EQ(index.level(index.entry_point()), top);
  std::size_t edges = 0;
  for (HnswIndex::Id i = 0; i < index.count(); ++i)
    for (std::size_t l = 0; l <= index.level(i); ++l) {
      const auto nb = index.neighbors(i, l);
      EXPECT_LE(nb.size(), index.degree_cap(l));
      edges += nb.size();
      for (auto j : nb) {
        EXPECT_NE(j, i);
        ASSERT_LT(j, index.count());
        EXPECT_GE(index.level(j), l);
      }
    }
  EXPECT_GT(edges, index.count());
  // multiplies count one product per coordinate of every evaluated distance
  EXPECT_EQ(index.build_counter().multiplies, index.build_counter().distances * 12);
}

TEST(Build, DeterministicForSeed) {
  const auto data = testing::gaussian_dataset(800, 6, 3);
  EXPECT_EQ(HnswIndex::build(data, small_hnsw()).serialize(), HnswIndex::build(data, small_hnsw()).serialize());
  auto other = small_hnsw();
  other.seed = 12;
  EXPECT_NE(HnswIndex::build(data, small_hnsw()).serialize(), HnswIndex::build(data, other).serialize());
}

TEST(Search, ExhaustiveBeamMatchesBruteForce) {
  const auto base = testing::gaussian_dataset(200, 8, 4);
  const auto queries = testing::gaussian_dataset(30, 8, 5);
  const auto index = HnswIndex::build(base, small_hnsw(4, 8));
  const auto got = index.search_batch(queries, 10, 200);
  const auto want = brute_force_knn(base, queries, 10);
  EXPECT_EQ(got.ids, want.ids);
  for (std::size_t i = 0; i < got.distances.size(); ++i) EXPECT_NEAR(got.distances[i], want.distances[i], 1e-5);
}

TEST(Search, IndexedPointRanksFirstAndSaturates) {
  const auto base = testing::gaussian_dataset(50, 5, 6);
  const auto index = HnswIndex::build(base, small_hnsw());
  std::vector<std::int32_t> ids(1);
  std::vector<float> d(1);
  index.search(base.row(17), 1, 10, ids, d);
  EXPECT_EQ(ids[0], 17);
  EXPECT_EQ(d[0], 0.0f);
  const auto all = index.search_batch(testing::gaussian_dataset(3, 5, 7), 60, 60);
  for (std::size_t q = 0; q < 3; ++q) {
    EXPECT_EQ(std::count(all.row(q).begin(), all.row(q).end(), -1), 10);
    EXPECT_EQ(all.row(q)[49] >= 0, true);
  }
}

TEST(Search, ArgumentErrors) {
  const auto base = testing::gaussian_dataset(20, 5, 6);
  const auto index = HnswIndex::build(base, small_hnsw());
  std::vector<std::int32_t> ids(5);
  EXPECT_THROW(index.search(base.row(0), 0, 10, std::span<std::int32_t>(ids).first(0)), ConfigError);
  EXPECT_THROW(index.search(base.row(0), 5, 4, ids), ConfigError);
  std::vector<float> wrong(4);
  EXPECT_THROW(index.search(wrong, 5, 10, ids), ShapeError);
}

TEST(SearchVectors, AttachingBuildVectorsChangesNothing) {
  const auto base = testing::gaussian_dataset(500, 6, 8);
  const auto queries = testing::gaussian_dataset(20, 6, 9);
  auto index = HnswIndex::build(base, small_hnsw());
  const auto plain = index.search_batch(queries, 10, 40);
  index.attach_search_vectors(base);
  EXPECT_EQ(index.search_batch(queries, 10, 40), plain);
  EXPECT_THROW(index.attach_search_vectors(testing::gaussian_dataset(499, 6, 1)), ShapeError);
}

TEST(SearchVectors, DistancesAreExactInAttachedSpace) {
  const auto full = testing::gaussian_dataset(600, 24, 10);
  VectorDataset reduced(600, 6);
  for (std::size_t i = 0; i < 600; ++i)
    for (std::size_t c = 0; c < 6; ++c) reduced.row(i)[c] = full.row(i)[c];
  auto index = HnswIndex::build(reduced, small_hnsw());
  index.attach_search_vectors(full);
  EXPECT_EQ(index.search_dim(), 24u);
  const auto queries = testing::gaussian_dataset(15, 24, 11);
  DistanceCounter counter;
  const auto res = index.search_batch(queries, 10, 50, &counter);
  EXPECT_EQ(counter.multiplies, counter.distances * 24);
  for (std::size_t q = 0; q < 15; ++q)
    for (std::size_t r = 0; r < 10; ++r) {
      const auto id = res.row(q)[r];
      ASSERT_GE(id, 0);
      EXPECT_NEAR(res.distance_row(q)[r], std::sqrt(l2_sqr_f64(queries.row(q), full.row(id))), 1e-4);
      if (r > 0) EXPECT_LE(res.distance_row(q)[r - 1], res.distance_row(q)[r]);
    }
}

TEST(Search, RecallNonDecreasingInBeamWidth) {
  const auto base = testing::gaussian_dataset(10000, 16, 12);
  const auto queries = testing::gaussian_dataset(100, 16, 13);
  HnswConfig cfg;
  cfg.M = 8;
  cfg.ef_construction = 40;
  cfg.seed = 5;
  const auto index = HnswIndex::build(base, cfg);
  const auto truth = brute_force_knn(base, queries, 100);
  double prev = 0.0;
  for (std::size_t ef : {100, 200, 400, 800}) {
    const double r = recall_n_at_n(index.search_batch(queries, 100, ef), truth, 100);
    EXPECT_GE(r, prev) << "ef " << ef;
    prev = r;
  }
}

TEST(Persistence, RoundTripAndValidation) {
  const auto base = testing::gaussian_dataset(300, 5, 14);
  const auto queries = testing::gaussian_dataset(10, 5, 15);
  const auto index = HnswIndex::build(base, small_hnsw());
  const auto bytes = index.serialize();
  const auto back = HnswIndex::parse(bytes, base);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.config(), index.config());
  EXPECT_EQ(back.search_batch(queries, 5, 20), index.search_batch(queries, 5, 20));
  EXPECT_FALSE(HnswIndex::parse(bytes).bound());
  EXPECT_THROW(HnswIndex::parse(bytes, testing::gaussian_dataset(299, 5, 1)), ShapeError);
  EXPECT_THROW(HnswIndex::parse(bytes.substr(0, bytes.size() - 1)), FormatError);
  auto flipped = bytes;
  flipped[40] ^= 1;
  EXPECT_THROW(HnswIndex::parse(flipped), FormatError);
}

}  // namespace
}  // namespace ccst

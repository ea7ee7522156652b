#include <gtest/gtest.h>

#include "ccst/eval.hpp"
#include "ccst/quant.hpp"
#include "support.hpp"

namespace ccst {
namespace {

double reconstruction_error(const VectorDataset& a, const VectorDataset& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.count(); ++i) total += l2_sqr_f64(a.row(i), b.row(i));
  return total / double(a.count());
}

TEST(KMeans, OneClusterPerPointHasZeroInertia) {
  const auto d = testing::gaussian_dataset(40, 3, 1);
  const auto km = kmeans(d, 40, 5, 2);
  EXPECT_EQ(km.inertia.back(), 0.0);
}

TEST(KMeans, SingleClusterIsTheMean) {
  const auto d = testing::gaussian_dataset(500, 4, 2);
  const auto km = kmeans(d, 1, 3);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 500; ++i) mean += d.row(i)[c];
    EXPECT_NEAR(km.centroids.row(0)[c], mean / 500.0, 1e-5);
  }
}

TEST(KMeans, SeparatesTwoBlobs) {
  auto d = testing::gaussian_dataset(400, 2, 3, 0.2);
  for (std::size_t i = 200; i < 400; ++i) d.row(i)[0] += 10.0f;
  const auto km = kmeans(d, 2, 20, 4);
  std::vector<float> xs{km.centroids.row(0)[0], km.centroids.row(1)[0]};
  std::sort(xs.begin(), xs.end());
  EXPECT_NEAR(xs[0], 0.0, 0.1);
  EXPECT_NEAR(xs[1], 10.0, 0.1);
  for (std::size_t i = 1; i < 200; ++i) EXPECT_EQ(km.assignment[i], km.assignment[0]);
  EXPECT_NE(km.assignment[0], km.assignment[399]);
}

TEST(KMeans, InertiaNonIncreasingAndDeterministic) {
  const auto d = testing::gaussian_dataset(1500, 6, 5);
  const auto a = kmeans(d, 32, 15, 6);
  ASSERT_EQ(a.inertia.size(), 15u);
  for (std::size_t i = 1; i < a.inertia.size(); ++i) EXPECT_LE(a.inertia[i], a.inertia[i - 1] * (1.0 + 1e-6));
  const auto b = kmeans(d, 32, 15, 6);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignment, b.assignment);
}

TEST(KMeans, Preconditions) {
  const auto d = testing::gaussian_dataset(10, 2, 1);
  EXPECT_THROW(kmeans(d, 0), ConfigError);
  EXPECT_THROW(kmeans(d, 11), ConfigError);
  EXPECT_THROW(kmeans(d, 2, 0), ConfigError);
}

TEST(Pq, SmallSetsReconstructExactly) {
  const auto d = testing::gaussian_dataset(200, 8, 7);
  const auto cb = pq_train(d, 4, 5);
  EXPECT_EQ(cb.ksub, 200u);
  EXPECT_EQ(pq_decode(cb, pq_encode(cb, d)), d);
}

TEST(Pq, ErrorNonIncreasingInSubspaces) {
  const auto d = testing::gaussian_dataset(3000, 16, 8);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t m : {1, 2, 4, 8, 16}) {
    const auto cb = pq_train(d, m, 10, 9);
    const double err = reconstruction_error(d, pq_decode(cb, pq_encode(cb, d)));
    EXPECT_LE(err, prev * (1.0 + 1e-3)) << "m = " << m;
    prev = err;
  }
}

TEST(Pq, MoreIterationsLowerError) {
  const auto d = testing::gaussian_dataset(3000, 8, 10);
  const auto one = pq_train(d, 2, 1, 3);
  const auto many = pq_train(d, 2, 25, 3);
  EXPECT_LT(reconstruction_error(d, pq_decode(many, pq_encode(many, d))),
            reconstruction_error(d, pq_decode(one, pq_encode(one, d))));
}

TEST(Pq, AsymmetricDistanceEqualsDistanceToReconstruction) {
  const auto d = testing::gaussian_dataset(2000, 32, 11);
  const auto queries = testing::gaussian_dataset(50, 32, 12);
  const auto cb = pq_train(d, 8, 10, 13);
  const auto codes = pq_encode(cb, d);
  const auto recon = pq_decode(cb, codes);
  for (std::size_t q = 0; q < 50; ++q) {
    const auto table = adc_table(cb, queries.row(q));
    for (std::size_t i = 0; i < 20; ++i) {
      const double want = l2_sqr_f64(queries.row(q), recon.row(i));
      EXPECT_NEAR(adc_distance(table, cb.ksub, codes.row(i)), want, 1e-4 * want);
    }
  }
}

TEST(Pq, SearchOnThreePoints) {
  VectorDataset d(3, 2, {0.0f, 0.0f, 1.0f, 1.0f, 5.0f, 5.0f});
  const auto cb = pq_train(d, 2, 3);
  const auto codes = pq_encode(cb, d);
  std::vector<std::int32_t> ids(1);
  std::vector<float> dist(1);
  const std::vector<float> q{0.9f, 1.2f};
  adc_search(cb, codes, q, 1, ids, dist);
  EXPECT_EQ(ids[0], 1);
  EXPECT_NEAR(dist[0], std::sqrt(0.01 + 0.04), 1e-6);
}

TEST(Pq, Preconditions) {
  const auto d = testing::gaussian_dataset(20, 6, 1);
  EXPECT_THROW(pq_train(d, 4), ConfigError);
  EXPECT_THROW(pq_train(VectorDataset(), 1), ConfigError);
  const auto cb = pq_train(d, 3, 2);
  EXPECT_THROW(pq_encode(cb, testing::gaussian_dataset(2, 5, 1)), ShapeError);
}

class Ivf : public ::testing::Test {
 protected:
  void SetUp() override {
    base = testing::gaussian_dataset(3000, 16, 14);
    queries = testing::gaussian_dataset(40, 16, 15);
    index = ivf_build(base, 20, PqConfig{4, 10}, 16);
  }
  NeighborLists run(std::size_t k, std::size_t nprobe) const {
    NeighborLists out(queries.count(), k);
    for (std::size_t q = 0; q < queries.count(); ++q) ivf_search(index, queries.row(q), k, nprobe, out.row(q), out.distance_row(q));
    return out;
  }
  VectorDataset base, queries;
  IvfIndex index;
};

TEST_F(Ivf, ListsPartitionTheBase) {
  EXPECT_EQ(index.nlist(), 20u);
  std::vector<int> seen(base.count(), 0);
  for (std::size_t l = 0; l < 20; ++l) {
    EXPECT_EQ(index.list_codes[l].size(), index.list_ids[l].size() * 4);
    for (auto id : index.list_ids[l]) ++seen[id];
  }
  EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
}

TEST_F(Ivf, ProbingEveryListEqualsExhaustiveScan) {
  const auto codes = pq_encode(index.codebook, base);
  NeighborLists flat(queries.count(), 10);
  for (std::size_t q = 0; q < queries.count(); ++q) adc_search(index.codebook, codes, queries.row(q), 10, flat.row(q), flat.distance_row(q));
  EXPECT_EQ(run(10, 20), flat);
}

TEST_F(Ivf, RecallNonDecreasingInProbes) {
  const auto truth = brute_force_knn(base, queries, 1);
  double prev = 0.0;
  for (std::size_t nprobe : {1, 2, 4, 8, 16, 20}) {
    const double r = recall_1_at(run(10, nprobe), truth, 10);
    EXPECT_GE(r, prev) << nprobe;
    prev = r;
  }
}

TEST_F(Ivf, Preconditions) {
  std::vector<std::int32_t> ids(5);
  EXPECT_THROW(ivf_search(index, queries.row(0), 5, 0, ids), ConfigError);
  EXPECT_THROW(ivf_search(index, queries.row(0), 5, 21, ids), ConfigError);
  EXPECT_THROW(ivf_build(base, 3001, PqConfig{}), ConfigError);
}

TEST(Sq, IntegerGridIsRepresentedExactly) {
  VectorDataset d(256, 1);
  for (std::size_t i = 0; i < 256; ++i) d.row(i)[0] = float(i);
  const auto p = sq_train(d);
  const auto codes = sq_encode(p, d);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_EQ(codes.codes[i], i);
  EXPECT_EQ(sq_decode(p, codes), d);
}

TEST(Sq, RoundingBoundAndIdempotence) {
  const auto d = testing::gaussian_dataset(1000, 12, 17);
  const auto p = sq_train(d);
  const auto codes = sq_encode(p, d);
  const auto decoded = sq_decode(p, codes);
  for (std::size_t i = 0; i < d.count(); ++i)
    for (std::size_t c = 0; c < d.dim(); ++c)
      EXPECT_LE(std::abs(double(decoded.row(i)[c]) - d.row(i)[c]), p.step(c) / 2 + 1e-6);
  EXPECT_EQ(sq_encode(p, decoded), codes);
}

TEST(Sq, ConstantDimensionAndClamping) {
  VectorDataset d(3, 2, {1.0f, 0.0f, 1.0f, 1.0f, 1.0f, 2.0f});
  const auto p = sq_train(d);
  EXPECT_EQ(sq_encode_value(p, 0, 1.0f), 0);
  EXPECT_EQ(sq_encode_value(p, 1, -5.0f), 0);
  EXPECT_EQ(sq_encode_value(p, 1, 9.0f), 255);
  EXPECT_EQ(sq_decode(p, sq_encode(p, d)).row(2)[0], 1.0f);
}

TEST(Sq, CodeDistanceEqualsDecodedDistance) {
  const auto d = testing::gaussian_dataset(200, 16, 18);
  const auto p = sq_train(d);
  const auto codes = sq_encode(p, d);
  const auto decoded = sq_decode(p, codes);
  for (std::size_t i = 0; i + 1 < 200; i += 7) {
    const double want = l2_sqr_f64(decoded.row(i), decoded.row(i + 1));
    EXPECT_NEAR(sq_distance(p, codes.row(i), codes.row(i + 1)), want, 1e-5 * want + 1e-9);
  }
  std::vector<std::int32_t> ids(1);
  sq_search(p, codes, codes.row(42), 1, ids);
  EXPECT_EQ(ids[0], 42);
}

TEST(Persistence, RoundTrips) {
  const auto d = testing::gaussian_dataset(600, 8, 19);
  PqIndex pq{pq_train(d, 2, 3), {}};
  pq.codes = pq_encode(pq.codebook, d);
  const auto pq_bytes = serialize_pq(pq);
  const auto pq_back = parse_pq(pq_bytes);
  EXPECT_EQ(pq_back.codebook, pq.codebook);
  EXPECT_EQ(pq_back.codes, pq.codes);

  const auto ivf = ivf_build(d, 6, PqConfig{2, 3}, 1);
  const auto ivf_bytes = serialize_ivf(ivf);
  EXPECT_EQ(serialize_ivf(parse_ivf(ivf_bytes)), ivf_bytes);

  SqIndex sq{sq_train(d), {}};
  sq.codes = sq_encode(sq.params, d);
  const auto sq_back = parse_sq(serialize_sq(sq));
  EXPECT_EQ(sq_back.params, sq.params);
  EXPECT_EQ(sq_back.codes, sq.codes);

  EXPECT_THROW(parse_pq(ivf_bytes), FormatError);
  EXPECT_THROW(parse_ivf(pq_bytes.substr(0, pq_bytes.size() - 2)), FormatError);
  auto bad = serialize_sq(sq);
  bad[30] ^= 0x10;
  EXPECT_THROW(parse_sq(bad), FormatError);
}

}  // namespace
}  // namespace ccst

#include <genspec/data.hpp>

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace genspec;

namespace {

Trajectory line_trajectory(Index n) {
  Trajectory t;
  t.states.resize(n, 1);
  t.bias_values = Vector::Zero(n);
  t.times.resize(n);
  for (Index i = 0; i < n; ++i) {
    t.states(i, 0) = static_cast<double>(i);
    t.steps.push_back(i + 1);
    t.times[i] = 0.5 * static_cast<double>(i + 1);
  }
  return t;
}

Vector random_structure(Index atoms, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Vector x(3 * atoms);
  for (Index i = 0; i < x.size(); ++i) x[i] = n01(rng);
  return x;
}

Vector transform(const Vector& flat, const Eigen::Matrix3d& r, const Eigen::Vector3d& shift) {
  Vector out(flat.size());
  for (Index a = 0; a < flat.size() / 3; ++a) out.segment<3>(3 * a) = r * flat.segment<3>(3 * a) + shift;
  return out;
}

}  // namespace

TEST(Weights, ZeroBiasGivesUnitWeights) {
  const auto ds = weighted_dataset(RowMatrix::Zero(4, 1), Vector::Zero(4), 1.0);
  EXPECT_EQ(ds.shift, 0.0);
  EXPECT_TRUE((ds.weights().array() == 1.0).all());
}

TEST(Weights, ShiftByMaximum) {
  const double beta = 2.0;
  Vector v(2);
  v << 0.0, std::log(2.0) / beta;
  const auto ds = weighted_dataset(RowMatrix::Zero(2, 1), v, beta);
  EXPECT_NEAR(ds.weights()[0], 0.5, 1e-15);
  EXPECT_NEAR(ds.weights()[1], 1.0, 1e-15);
}

TEST(Weights, DoubleWellBiasAtBarrier) {
  const double v0 = eval_bias(double_well_bias(), Vector::Zero(1)).value;
  const auto ds = weighted_dataset(RowMatrix::Zero(1, 1), Vector::Constant(1, v0), 1.0, false);
  EXPECT_NEAR(ds.weights()[0], std::exp(-4.0), 1e-15);
}

TEST(Weights, LargeBiasStaysFinite) {
  Vector v(3);
  v << 800.0, 790.0, 0.0;
  const auto ds = weighted_dataset(RowMatrix::Zero(3, 1), v, 1.0);
  EXPECT_TRUE(ds.weights().allFinite());
  EXPECT_DOUBLE_EQ(ds.weights()[0], 1.0);
  EXPECT_NEAR(ds.weights()[1], std::exp(-10.0), 1e-18);
}

TEST(Weights, NonFiniteBiasRejected) {
  EXPECT_THROW(weighted_dataset(RowMatrix::Zero(1, 1), Vector::Constant(1, std::nan("")), 1.0), InvalidInputError);
}

TEST(LaggedPairs, Counts) {
  EXPECT_EQ(make_lagged_pairs(line_trajectory(3), 1).size(), 2);
  EXPECT_THROW(make_lagged_pairs(line_trajectory(3), 3), EmptyDatasetError);
  EXPECT_THROW(make_lagged_pairs(line_trajectory(3), 0), ConfigError);
}

TEST(LaggedPairs, StrideTwo) {
  const auto p = make_lagged_pairs(line_trajectory(4), 2);
  ASSERT_EQ(p.size(), 2);
  EXPECT_EQ(p.x(0, 0), 0.0);
  EXPECT_EQ(p.y(0, 0), 2.0);
  EXPECT_EQ(p.x(1, 0), 1.0);
  EXPECT_EQ(p.y(1, 0), 3.0);
  EXPECT_DOUBLE_EQ(p.lag, 1.0);
}

TEST(LaggedPairs, WeightsFollowTheFirstState) {
  Vector w(4);
  w << 1.0, 2.0, 3.0, 4.0;
  const auto p = make_lagged_pairs(line_trajectory(4), 1, w);
  EXPECT_EQ(p.weights, Vector(w.head(3)));
}

TEST(Split, Sizes) {
  const auto ds = weighted_dataset(line_trajectory(10).states, Vector::Zero(10), 1.0);
  const auto [tr, va] = split(ds, 0.8, 1);
  EXPECT_EQ(tr.size(), 8);
  EXPECT_EQ(va.size(), 2);
}

TEST(Split, DeterministicDisjointCover) {
  const auto ds = weighted_dataset(line_trajectory(101).states, Vector::Zero(101), 1.0);
  const auto [a1, b1] = split(ds, 0.7, 9);
  const auto [a2, b2] = split(ds, 0.7, 9);
  EXPECT_EQ(a1.states, a2.states);
  EXPECT_EQ(b1.states, b2.states);
  std::set<double> all;
  for (Index i = 0; i < a1.size(); ++i) all.insert(a1.states(i, 0));
  for (Index i = 0; i < b1.size(); ++i) EXPECT_TRUE(all.insert(b1.states(i, 0)).second);
  EXPECT_EQ(all.size(), 101u);
  const auto [a3, b3] = split(ds, 0.7, 10);
  EXPECT_NE(a1.states, a3.states);
}

TEST(Kabsch, IdentityAlignment) {
  const Vector ref = random_structure(6, 1);
  RowMatrix frames(1, ref.size());
  frames.row(0) = ref.transpose();
  const RowMatrix out = kabsch_align(frames, ref);
  EXPECT_LE(rmsd(out.row(0).transpose(), center_coordinates(ref)), 1e-12);
}

TEST(Kabsch, RecoversRandomRotation) {
  const Vector ref = random_structure(8, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  RowMatrix frames(5, ref.size());
  for (Index f = 0; f < 5; ++f) {
    const Eigen::Quaterniond q(n01(rng), n01(rng), n01(rng), n01(rng));
    const Eigen::Vector3d shift(n01(rng), n01(rng), n01(rng));
    frames.row(f) = transform(ref, q.normalized().toRotationMatrix(), shift).transpose();
  }
  const RowMatrix out = kabsch_align(frames, ref);
  const Vector target = center_coordinates(ref);
  for (Index f = 0; f < 5; ++f) EXPECT_LE((out.row(f).transpose() - target).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Kabsch, ReflectionGivesProperRotation) {
  const Vector ref = random_structure(7, 4);
  const Eigen::Matrix3d mirror = Eigen::Vector3d(1.0, 1.0, -1.0).asDiagonal();
  const Vector reflected = center_coordinates(transform(ref, mirror, Eigen::Vector3d::Zero()));
  const auto p = detail::as_atoms(reflected);
  const auto q = detail::as_atoms(center_coordinates(ref));
  const Eigen::Matrix3d r = kabsch_rotation(p, q);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  EXPECT_NEAR((r.transpose() * r - Eigen::Matrix3d::Identity()).norm(), 0.0, 1e-12);
}

TEST(Kabsch, DegenerateReferenceRejected) {
  Vector ref = Vector::Zero(9);
  ref[0] = 1.0;
  ref[3] = 2.0;
  ref[6] = 3.0;
  RowMatrix frames(1, 9);
  frames.row(0) = ref.transpose();
  EXPECT_THROW(kabsch_align(frames, ref), AlignmentError);
}

#include <random>

#include <gtest/gtest.h>

#include "chainod/kalman.hpp"

using namespace chainod;

namespace {

Eigen::MatrixXd scalar(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }
Eigen::VectorXd vec1(double v) { return Eigen::VectorXd::Constant(1, v); }

Eigen::MatrixXd random_spd(std::mt19937_64& gen, Eigen::Index n) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(gen);
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
}

}  // namespace

TEST(Initialize, StoresVerbatim) {
  const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(3);
  const Eigen::MatrixXd P0 = 4.0 * Eigen::MatrixXd::Identity(3, 3);
  const FilterState s = kf_initialize(x0, P0);
  EXPECT_EQ(s.mean, x0);
  EXPECT_EQ(s.cov, P0);
}

TEST(Initialize, RejectsAsymmetricAndIndefinite) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(2, 2);
  P(0, 1) = 0.5;
  EXPECT_THROW(kf_initialize(Eigen::VectorXd::Zero(2), P), DomainError);
  EXPECT_THROW(kf_initialize(Eigen::VectorXd::Zero(2), -Eigen::MatrixXd::Identity(2, 2)), DomainError);
}

TEST(Initialize, AcceptsZeroCovariance) {
  EXPECT_NO_THROW(kf_initialize(Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Zero(2, 2)));
}

TEST(TimeUpdate, IdentityWithoutNoise) {
  const FilterState s{Eigen::VectorXd::LinSpaced(3, 1, 3), 2.0 * Eigen::MatrixXd::Identity(3, 3)};
  const std::vector<FilterState> hist = {s};
  const FilterState p = kf_time_update(hist, ArModel::identity(3), Eigen::MatrixXd::Zero(3, 3));
  EXPECT_EQ(p.mean, s.mean);
  EXPECT_EQ(p.cov, s.cov);
}

TEST(TimeUpdate, IdentityAddsQ) {
  const FilterState s{Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2)};
  const std::vector<FilterState> hist = {s};
  const FilterState p = kf_time_update(hist, ArModel::identity(2), 0.3 * Eigen::MatrixXd::Identity(2, 2));
  EXPECT_EQ(p.mean, s.mean);
  EXPECT_NEAR((p.cov - 1.3 * Eigen::MatrixXd::Identity(2, 2)).norm(), 0.0, 1e-15);
}

TEST(TimeUpdate, ScalarHalving) {
  const std::vector<FilterState> hist = {{vec1(2.0), scalar(1.0)}};
  const std::vector<double> coeff = {0.5};
  const FilterState p = kf_time_update(hist, ArModel::scaled(1, coeff), scalar(0.1));
  EXPECT_NEAR(p.mean[0], 1.0, 1e-15);
  EXPECT_NEAR(p.cov(0, 0), 0.35, 1e-15);
}

TEST(TimeUpdate, TwoLagsNewestFirst) {
  const std::vector<FilterState> hist = {{vec1(10.0), scalar(1.0)}, {vec1(2.0), scalar(1.0)}};
  const std::vector<double> coeff = {0.5, 0.25};
  const FilterState p = kf_time_update(hist, ArModel::scaled(1, coeff), scalar(0.0));
  EXPECT_NEAR(p.mean[0], 0.5 * 2.0 + 0.25 * 10.0, 1e-15);
}

TEST(TimeUpdate, Errors) {
  const std::vector<FilterState> hist = {{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)}};
  EXPECT_THROW(kf_time_update(hist, ArModel::identity(2, 2), Eigen::MatrixXd::Zero(2, 2)), ConfigError);
  EXPECT_THROW(kf_time_update(hist, ArModel::identity(2), Eigen::MatrixXd::Zero(3, 3)), ConfigError);
  EXPECT_THROW(kf_time_update(hist, ArModel::identity(3), Eigen::MatrixXd::Zero(3, 3)), ConfigError);
}

TEST(MeasurementUpdate, ZeroHLeavesStateUnchanged) {
  const FilterState s{Eigen::VectorXd::Ones(3), Eigen::MatrixXd::Identity(3, 3)};
  UpdateDiagnostics d;
  const FilterState p = kf_measurement_update(s, Eigen::MatrixXd::Zero(2, 3), Eigen::MatrixXd::Identity(2, 2),
                                              Eigen::VectorXd::Constant(2, 5.0), &d);
  EXPECT_EQ(p.mean, s.mean);
  EXPECT_EQ(p.cov, s.cov);
  EXPECT_EQ(d.gain_norm, 0.0);
}

TEST(MeasurementUpdate, ScalarHandResult) {
  UpdateDiagnostics d;
  const FilterState p = kf_measurement_update({vec1(0.0), scalar(1.0)}, scalar(1.0), scalar(1.0), vec1(2.0), &d);
  EXPECT_NEAR(d.gain_norm, 0.5, 1e-15);
  EXPECT_NEAR(p.mean[0], 1.0, 1e-15);
  EXPECT_NEAR(p.cov(0, 0), 0.5, 1e-15);
}

TEST(MeasurementUpdate, PerfectMeasurementLimit) {
  const FilterState s{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)};
  const Eigen::VectorXd dy = (Eigen::VectorXd(3) << 1, -2, 3).finished();
  const FilterState p =
      kf_measurement_update(s, Eigen::MatrixXd::Identity(3, 3), 1e-12 * Eigen::MatrixXd::Identity(3, 3), dy);
  EXPECT_LT((p.mean - dy).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MeasurementUpdate, JitterRescuesSingularInnovation) {
  // Two identical channels with no measurement noise: S is rank one.
  const FilterState s{Eigen::VectorXd::Zero(1), scalar(1.0)};
  const Eigen::MatrixXd H = Eigen::MatrixXd::Ones(2, 1);
  UpdateDiagnostics d;
  const FilterState p = kf_measurement_update(s, H, Eigen::MatrixXd::Zero(2, 2), Eigen::VectorXd::Ones(2), &d);
  EXPECT_TRUE(d.jittered);
  EXPECT_NEAR(p.mean[0], 1.0, 1e-6);
}

TEST(MeasurementUpdate, SingularAfterJitterIsNumericalError) {
  const FilterState s{Eigen::VectorXd::Zero(1), scalar(0.0)};
  EXPECT_THROW(kf_measurement_update(s, scalar(1.0), scalar(0.0), vec1(1.0)), NumericalError);
}

TEST(MeasurementUpdate, MonotoneInformation) {
  std::mt19937_64 gen(17);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 4, m = 2;
    const FilterState s{Eigen::VectorXd::Zero(n), random_spd(gen, n)};
    Eigen::MatrixXd H(m + 1, n);
    for (Eigen::Index i = 0; i < H.size(); ++i) H.data()[i] = g(gen);
    const Eigen::MatrixXd R = random_spd(gen, m + 1).diagonal().asDiagonal();
    const Eigen::VectorXd dy = Eigen::VectorXd::Zero(m + 1);
    const FilterState fewer =
        kf_measurement_update(s, H.topRows(m), R.topLeftCorner(m, m), dy.head(m));
    const FilterState more = kf_measurement_update(s, H, R, dy);
    EXPECT_LE(more.cov.trace(), fewer.cov.trace() + 1e-10);
    EXPECT_LE(fewer.cov.trace(), s.cov.trace() + 1e-10);
  }
}

TEST(MeasurementUpdate, ScalarOracleOverRandomSteps) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0.01, 5.0), v(-10.0, 10.0);
  double x = 0.0, P = 1.0;
  FilterState s{vec1(x), scalar(P)};
  for (int step = 0; step < 1000; ++step) {
    const double f = v(gen) / 10.0, q = u(gen), h = v(gen), r = u(gen), dy = v(gen);
    const std::vector<FilterState> hist = {s};
    const std::vector<double> coeff = {f};
    s = kf_time_update(hist, ArModel::scaled(1, coeff), scalar(q));
    s = kf_measurement_update(s, scalar(h), scalar(r), vec1(dy));
    x = f * x;
    P = f * f * P + q;
    const double k = P * h / (h * P * h + r);
    x = x + k * (dy - h * x);
    P = P - k * h * P;
    EXPECT_NEAR(s.mean[0], x, 1e-12 * std::max(1.0, std::abs(x)));
    EXPECT_NEAR(s.cov(0, 0), P, 1e-12 * std::max(1.0, P));
  }
}

TEST(Sequence, ZeroDeviationsStayZero) {
  const Eigen::MatrixXd b = Eigen::MatrixXd::Identity(2, 3).leftCols(3);
  const std::vector<std::vector<Eigen::MatrixXd>> blocks(5, {b, 0.5 * b});
  const AssignmentMatrix H(5, blocks);
  const NoiseModel noise{Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(2, 2)};
  const KfRun run = run_kf_sequence(H, ArModel::identity(3), noise, {Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)},
                                    Eigen::MatrixXd::Zero(2, 5));
  EXPECT_EQ(run.deviations.norm(), 0.0);
  EXPECT_EQ(run.records.size(), 5u);
}

TEST(Sequence, SingleScalarIntervalMatchesHandUpdate) {
  const std::vector<std::vector<Eigen::MatrixXd>> blocks = {{scalar(1.0)}};
  const AssignmentMatrix H(1, blocks);
  const NoiseModel noise{scalar(0.0), scalar(1.0)};
  const KfRun run = run_kf_sequence(H, ArModel::identity(1), noise, {vec1(0.0), scalar(1.0)}, scalar(2.0));
  EXPECT_NEAR(run.deviations(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(run.posteriors[0].cov(0, 0), 0.5, 1e-15);
}

TEST(Sequence, ResidualRemovesEarlierIntervals) {
  // Departure k is counted half in k and half in k+1. A constant deviation
  // of 2 per interval produces dy = [1, 2, 2, ...]; an exact filter (tiny R,
  // large Q) recovers 2 everywhere.
  const std::vector<std::vector<Eigen::MatrixXd>> blocks(6, {scalar(0.5), scalar(0.5)});
  const AssignmentMatrix H(6, blocks);
  Eigen::MatrixXd dy(1, 6);
  dy << 1, 2, 2, 2, 2, 2;
  const NoiseModel noise{scalar(1e6), scalar(1e-12)};
  const KfRun run = run_kf_sequence(H, ArModel::identity(1), noise, {vec1(0.0), scalar(1e6)}, dy);
  for (int h = 0; h < 6; ++h) EXPECT_NEAR(run.deviations(0, h), 2.0, 1e-6);
}

TEST(Sequence, GainZeroInertia) {
  const std::vector<std::vector<Eigen::MatrixXd>> blocks(3, {Eigen::MatrixXd::Zero(1, 2)});
  const AssignmentMatrix H(3, blocks);
  const NoiseModel noise{0.25 * Eigen::MatrixXd::Identity(2, 2), scalar(1.0)};
  const FilterState init{Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2)};
  const KfRun run = run_kf_sequence(H, ArModel::identity(2), noise, init, Eigen::MatrixXd::Constant(1, 3, 9.0));
  for (int h = 0; h < 3; ++h) {
    EXPECT_EQ(run.posteriors[static_cast<std::size_t>(h)].mean, init.mean);
    EXPECT_NEAR(run.posteriors[static_cast<std::size_t>(h)].cov(0, 0), 1.0 + 0.25 * (h + 1), 1e-15);
  }
}

TEST(Sequence, ErrorsCarryIntervalIndex) {
  const std::vector<std::vector<Eigen::MatrixXd>> blocks = {{scalar(1.0)}, {scalar(1.0)}};
  const AssignmentMatrix H(2, blocks);
  KalmanSequence seq(H, ArModel::identity(1), {scalar(0.0), scalar(0.0)}, {vec1(0.0), scalar(1.0)});
  seq.step(0, vec1(1.0));
  try {
    seq.step(1, vec1(1.0));
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("interval 1"), std::string::npos);
  }
  EXPECT_THROW(seq.step(3, vec1(0.0)), StateError);
}

TEST(Sequence, CovarianceHygieneEveryStep) {
  std::mt19937_64 gen(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Eigen::Index n = 6, m = 2;
  std::vector<std::vector<Eigen::MatrixXd>> blocks;
  for (int k = 0; k < 40; ++k) {
    std::vector<Eigen::MatrixXd> lagged;
    for (int d = 0; d < 3; ++d) {
      Eigen::MatrixXd b(m, n);
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = u(gen) / 3.0;
      lagged.push_back(b);
    }
    blocks.push_back(lagged);
  }
  const AssignmentMatrix H(40, blocks);
  Eigen::MatrixXd dy(m, 40);
  for (Eigen::Index i = 0; i < dy.size(); ++i) dy.data()[i] = 100.0 * (u(gen) - 0.5);
  const NoiseModel noise{random_spd(gen, n), random_spd(gen, m)};
  const KfRun run = run_kf_sequence(H, ArModel::identity(n), noise, {Eigen::VectorXd::Zero(n), random_spd(gen, n)}, dy);
  for (const auto& r : run.records) {
    EXPECT_TRUE(r.after_time_update.ok());
    EXPECT_TRUE(r.after_measurement_update.ok());
  }
}

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chainod/assignment.hpp"
#include "chainod/errors.hpp"

namespace chainod {

// Deviation vector and its covariance.
struct FilterState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct NoiseModel {
  Eigen::MatrixXd Q;  // process noise
  Eigen::MatrixXd R;  // measurement noise
};

// Autoregressive transition on deviations. lags[0] multiplies the most
// recent state, lags[1] the one before, and so on.
struct ArModel {
  std::vector<Eigen::MatrixXd> lags;

  static ArModel identity(Eigen::Index dim, int n_lags = 1) {
    ArModel ar;
    ar.lags.push_back(Eigen::MatrixXd::Identity(dim, dim));
    for (int k = 1; k < n_lags; ++k) ar.lags.push_back(Eigen::MatrixXd::Zero(dim, dim));
    return ar;
  }

  static ArModel scaled(Eigen::Index dim, std::span<const double> coefficients) {
    if (coefficients.empty()) throw ConfigError("AR model needs at least one lag");
    ArModel ar;
    for (double c : coefficients) ar.lags.push_back(c * Eigen::MatrixXd::Identity(dim, dim));
    return ar;
  }

  int order() const { return static_cast<int>(lags.size()); }
};

struct CovarianceHygiene {
  double symmetry_error = 0.0;  // max |C - C^T|
  double min_eigenvalue = 0.0;
  double trace = 0.0;

  bool ok(double sym_tol = 1e-10, double eig_rel_tol = 1e-8) const {
    return symmetry_error <= sym_tol && min_eigenvalue >= -eig_rel_tol * std::max(trace, 0.0);
  }
};

inline CovarianceHygiene covariance_hygiene(const Eigen::MatrixXd& cov) {
  CovarianceHygiene out;
  if (cov.size() == 0) return out;
  out.symmetry_error = (cov - cov.transpose()).cwiseAbs().maxCoeff();
  out.trace = cov.trace();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (cov + cov.transpose()), Eigen::EigenvaluesOnly);
  out.min_eigenvalue = eig.eigenvalues().minCoeff();
  return out;
}

namespace detail {

inline void symmetrize(Eigen::MatrixXd& m) { m = 0.5 * (m + m.transpose()).eval(); }

}  // namespace detail

inline FilterState kf_initialize(const Eigen::VectorXd& x0, const Eigen::MatrixXd& P0) {
  if (P0.rows() != P0.cols() || P0.rows() != x0.size()) throw ConfigError("kf_initialize: dimension mismatch");
  const auto hygiene = covariance_hygiene(P0);
  if (hygiene.symmetry_error > 1e-10) throw DomainError("kf_initialize: P0 is not symmetric");
  if (!hygiene.ok()) throw DomainError("kf_initialize: P0 is not positive semi-definite");
  return {x0, P0};
}

// Time update. `history` holds the most recent states, newest last; it must
// contain at least ar.order() entries.
inline FilterState kf_time_update(std::span<const FilterState> history, const ArModel& ar, const Eigen::MatrixXd& Q) {
  if (static_cast<int>(history.size()) < ar.order()) throw ConfigError("kf_time_update: lag history too short");
  const auto n = history.back().mean.size();
  if (Q.rows() != n || Q.cols() != n) throw ConfigError("kf_time_update: Q dimension mismatch");
  FilterState out{Eigen::VectorXd::Zero(n), Q};
  for (int k = 0; k < ar.order(); ++k) {
    const FilterState& s = history[history.size() - 1 - static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& F = ar.lags[static_cast<std::size_t>(k)];
    if (F.rows() != n || F.cols() != n || s.mean.size() != n) throw ConfigError("kf_time_update: dimension mismatch");
    out.mean.noalias() += F * s.mean;
    out.cov.noalias() += F * s.cov * F.transpose();
  }
  detail::symmetrize(out.cov);
  return out;
}

struct UpdateDiagnostics {
  double innovation_norm = 0.0;
  double gain_norm = 0.0;
  double cov_trace = 0.0;
  bool jittered = false;
};

// Measurement update with an SPD solve of the innovation covariance
// S = H P H^T + R. When the Cholesky factorisation fails, 1e-9 * trace(S) is
// added to the diagonal once before giving up.
inline FilterState kf_measurement_update(const FilterState& pred, const Eigen::MatrixXd& H, const Eigen::MatrixXd& R,
                                         const Eigen::VectorXd& dy, UpdateDiagnostics* diag = nullptr) {
  const auto n = pred.mean.size();
  const auto m = H.rows();
  if (H.cols() != n || R.rows() != m || R.cols() != m || dy.size() != m || pred.cov.rows() != n)
    throw ConfigError("kf_measurement_update: dimension mismatch");

  const Eigen::VectorXd innovation = dy - H * pred.mean;
  if (m == 0) {
    if (diag) *diag = {0.0, 0.0, pred.cov.trace(), false};
    return pred;
  }

  const Eigen::MatrixXd PHt = pred.cov * H.transpose();
  Eigen::MatrixXd S = H * PHt + R;
  detail::symmetrize(S);
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  bool jittered = false;
  if (llt.info() != Eigen::Success) {
    const double jitter = 1e-9 * std::max(S.trace(), 0.0);
    if (jitter > 0.0) {
      S.diagonal().array() += jitter;
      llt.compute(S);
      jittered = true;
    }
    if (jitter <= 0.0 || llt.info() != Eigen::Success) {
      std::ostringstream msg;
      msg << "kf_measurement_update: innovation covariance is singular (trace " << S.trace() << ", dim " << m << ")";
      throw NumericalError(msg.str());
    }
  }
  // K = P H^T S^{-1}  <=>  S K^T = H P
  const Eigen::MatrixXd K = llt.solve(PHt.transpose()).transpose();

  FilterState out;
  out.mean = pred.mean + K * innovation;
  out.cov = pred.cov - K * PHt.transpose();
  detail::symmetrize(out.cov);
  if (diag) *diag = {innovation.norm(), K.norm(), out.cov.trace(), jittered};
  return out;
}

struct KfStepRecord {
  int interval = 0;
  UpdateDiagnostics update;
  CovarianceHygiene after_time_update;
  CovarianceHygiene after_measurement_update;
};

// Interval-by-interval deviation filter. State at interval h is the OD
// departure deviation of that interval; the measurement residual removes the
// counted effect of earlier intervals' posterior estimates:
//   z_h = dy_h - sum_{k<h} H_k^h dx_k,   z_h ~ H_h^h dx_h + v_h
class KalmanSequence {
 public:
  KalmanSequence(const AssignmentMatrix& H, ArModel ar, NoiseModel noise, FilterState initial)
      : H_(&H), ar_(std::move(ar)), noise_(std::move(noise)) {
    for (int k = 0; k < std::max(1, ar_.order()); ++k) prior_.push_back(initial);
  }

  // Runs intervals [next_interval(), end) against measurement deviations
  // (channels x intervals).
  void run(const Eigen::MatrixXd& dy, int end) {
    for (int h = next_interval(); h < end; ++h) step(h, dy.col(h));
  }

  void step(int h, const Eigen::VectorXd& dy_h) {
    if (h != next_interval()) throw StateError("KalmanSequence: intervals must be processed in order");
    KfStepRecord rec;
    rec.interval = h;
    try {
      std::vector<FilterState> hist = lag_history();
      FilterState pred = kf_time_update(hist, ar_, noise_.Q);
      rec.after_time_update = covariance_hygiene(pred.cov);

      Eigen::VectorXd z = dy_h;
      for (int k = std::max(0, h - H_->max_lag()); k < h; ++k)
        z.noalias() -= H_->block(k, h) * posterior_[static_cast<std::size_t>(k)].mean;
      FilterState post = kf_measurement_update(pred, H_->block(h, h), noise_.R, z, &rec.update);
      rec.after_measurement_update = covariance_hygiene(post.cov);
      posterior_.push_back(std::move(post));
    } catch (const std::exception& e) {
      rethrow_with_interval(e, h);
    }
    records_.push_back(rec);
  }

  int next_interval() const { return static_cast<int>(posterior_.size()); }
  const std::vector<FilterState>& posteriors() const { return posterior_; }
  const std::vector<KfStepRecord>& records() const { return records_; }
  const ArModel& ar() const { return ar_; }

  // Swaps the measurement model for the intervals still to come.
  void set_assignment(const AssignmentMatrix& H) {
    if (H.n_od() != H_->n_od() || H.n_channels() != H_->n_channels())
      throw ConfigError("KalmanSequence: replacement assignment matrix has different dimensions");
    H_ = &H;
  }

  // Subtracts `shift` (n_od x intervals covered so far) from the stored
  // posterior means.
  void shift_means(const Eigen::MatrixXd& shift) {
    for (std::size_t h = 0; h < posterior_.size(); ++h) posterior_[h].mean -= shift.col(static_cast<Eigen::Index>(h));
  }

  // Posterior means as an n_od x n_intervals matrix (zero beyond the last
  // processed interval).
  Eigen::MatrixXd means(int n_intervals) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(prior_.front().mean.size(), n_intervals);
    for (std::size_t h = 0; h < posterior_.size() && static_cast<int>(h) < n_intervals; ++h)
      out.col(static_cast<Eigen::Index>(h)) = posterior_[h].mean;
    return out;
  }

  // Newest-last window of ar.order() states (initial state padding at start).
  std::vector<FilterState> lag_history() const {
    std::vector<FilterState> hist;
    const int T = ar_.order();
    for (int k = T; k >= 1; --k) {
      const int idx = next_interval() - k;
      hist.push_back(idx >= 0 ? posterior_[static_cast<std::size_t>(idx)] : prior_.front());
    }
    return hist;
  }

 private:
  [[noreturn]] static void rethrow_with_interval(const std::exception& e, int h) {
    const std::string msg = std::string(e.what()) + " (interval " + std::to_string(h) + ")";
    if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(msg);
    if (dynamic_cast<const DomainError*>(&e)) throw DomainError(msg);
    if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
    throw std::runtime_error(msg);
  }

  const AssignmentMatrix* H_;
  ArModel ar_;
  NoiseModel noise_;
  std::vector<FilterState> prior_;
  std::vector<FilterState> posterior_;
  std::vector<KfStepRecord> records_;
};

struct KfRun {
  Eigen::MatrixXd deviations;  // n_od x n_intervals
  std::vector<FilterState> posteriors;
  std::vector<KfStepRecord> records;
};

// Runs the filter over every interval of `dy` (channels x intervals).
inline KfRun run_kf_sequence(const AssignmentMatrix& H, const ArModel& ar, const NoiseModel& noise,
                             const FilterState& initial, const Eigen::MatrixXd& dy) {
  KalmanSequence seq(H, ar, noise, initial);
  seq.run(dy, static_cast<int>(dy.cols()));
  return {seq.means(static_cast<int>(dy.cols())), seq.posteriors(), seq.records()};
}

}  // namespace chainod

#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chainod/assignment.hpp"
#include "chainod/errors.hpp"
#include "chainod/kalman.hpp"
#include "chainod/legs.hpp"

namespace chainod {

enum class PkfMode { pkf, spkf };

struct PkfConfig {
  PkfMode mode = PkfMode::pkf;
  int cumulative_horizon = 47;  // last interval included in the cumulative counts
};

struct AttributionResult {
  std::vector<Eigen::VectorXd> deltas;  // one per leg
  std::vector<Eigen::MatrixXd> covs;    // one per leg, empty if no posteriors were given
  double dropped_mass = 0.0;
  std::vector<std::string> warnings;
};

// Splits interval deviations dX (n_od x n_intervals) over legs in proportion
// to each leg's expected share of the interval's departures,
//   w_h^{i,p} = N_p^i P_h^{i,p} / sum_q N_q^i P_h^{i,q},
// over intervals [from, to). Intervals where an OD pair has no expected
// departures cannot be attributed; their deviation is dropped and reported.
//
// When `posteriors` is non-empty the leg covariances are accumulated as
// sum_h W_h P_h W_h with W_h = diag(w_h), ignoring cross-interval terms.
inline AttributionResult attribute_interval_deviations(const Eigen::MatrixXd& dX, int from, int to,
                                                       std::span<const Eigen::VectorXd> leg_flows,
                                                       std::span<const Eigen::MatrixXd> leg_profiles,
                                                       std::span<const FilterState> posteriors = {}) {
  if (leg_flows.size() != leg_profiles.size()) throw ConfigError("attribution: one profile matrix per leg");
  if (from < 0 || to > dX.cols() || from > to) throw ConfigError("attribution: window outside the grid");
  const auto n_od = dX.rows();
  AttributionResult out;
  for (std::size_t p = 0; p < leg_flows.size(); ++p) {
    if (leg_flows[p].size() != n_od || leg_profiles[p].rows() != n_od || leg_profiles[p].cols() != dX.cols())
      throw ConfigError("attribution: leg dimension mismatch");
    out.deltas.push_back(Eigen::VectorXd::Zero(n_od));
    if (!posteriors.empty()) out.covs.push_back(Eigen::MatrixXd::Zero(n_od, n_od));
  }
  const bool with_cov = !posteriors.empty();
  if (with_cov && static_cast<int>(posteriors.size()) < to) throw ConfigError("attribution: posteriors do not cover the window");

  std::vector<Eigen::VectorXd> weights(leg_flows.size(), Eigen::VectorXd::Zero(n_od));
  for (int h = from; h < to; ++h) {
    Eigen::VectorXd total = Eigen::VectorXd::Zero(n_od);
    for (std::size_t p = 0; p < leg_flows.size(); ++p) {
      weights[p] = leg_flows[p].cwiseProduct(leg_profiles[p].col(h));
      total += weights[p];
    }
    for (Eigen::Index i = 0; i < n_od; ++i) {
      if (total[i] > 0.0) continue;
      if (dX(i, h) != 0.0) {
        out.dropped_mass += std::abs(dX(i, h));
        out.warnings.push_back("attribution: OD row " + std::to_string(i) + " interval " + std::to_string(h) +
                               " has no expected departures; deviation dropped");
      }
    }
    for (std::size_t p = 0; p < leg_flows.size(); ++p) {
      Eigen::VectorXd w = Eigen::VectorXd::Zero(n_od);
      for (Eigen::Index i = 0; i < n_od; ++i)
        if (total[i] > 0.0) w[i] = weights[p][i] / total[i];
      out.deltas[p] += w.cwiseProduct(dX.col(h));
      if (with_cov) out.covs[p] += w.asDiagonal() * posteriors[static_cast<std::size_t>(h)].cov * w.asDiagonal();
    }
  }
  for (auto& c : out.covs) detail::symmetrize(c);
  return out;
}

// Leg transition: mean = sum_k L dN_k, cov = sum_k L P_k L^T + Q.
inline FilterState pkf_time_update(std::span<const FilterState> predecessors, const LegOperator& op,
                                   const Eigen::MatrixXd& Q) {
  if (predecessors.empty()) throw ChainError("pkf_time_update: leg has no predecessor state");
  const auto n = op.matrix.rows();
  if (Q.rows() != n || Q.cols() != n) throw ConfigError("pkf_time_update: Q dimension mismatch");
  FilterState out{Eigen::VectorXd::Zero(n), Q};
  for (const auto& s : predecessors) {
    if (s.mean.size() != op.matrix.cols() || s.cov.rows() != op.matrix.cols())
      throw ConfigError("pkf_time_update: dimension mismatch");
    out.mean.noalias() += op.matrix * s.mean;
    out.cov.noalias() += op.matrix * s.cov * op.matrix.transpose();
  }
  detail::symmetrize(out.cov);
  return out;
}

// Measurement update on cumulative counts. `dY` must already exclude the
// contributions of every other leg; the predicted contribution of this leg
// (A * pred.mean) is removed here.
inline FilterState pkf_measurement_update(const FilterState& pred, const Eigen::MatrixXd& A, const Eigen::MatrixXd& R,
                                          const Eigen::VectorXd& dY, UpdateDiagnostics* diag = nullptr) {
  return kf_measurement_update(pred, A, R, dY, diag);
}

// Ratio of the leg total to the total of the legs feeding it.
inline double scale_factor(const Eigen::VectorXd& current, std::span<const Eigen::VectorXd> predecessors) {
  double denom = 0.0;
  for (const auto& p : predecessors) denom += p.sum();
  if (!(denom > 0.0)) throw DomainError("scale_factor: predecessor total must be positive");
  return current.sum() / denom;
}

struct ConservedLeg {
  Eigen::VectorXd flows;
  Eigen::VectorXd deviation;  // flows - historical
};

// Divides the leg estimate by s so its total matches the feeding legs.
inline ConservedLeg apply_conservation(const Eigen::VectorXd& estimate, const Eigen::VectorXd& historical, double s) {
  if (!(s > 0.0)) throw DomainError("apply_conservation: scale factor must be positive");
  ConservedLeg out;
  out.flows = estimate / s;
  out.deviation = out.flows - historical;
  return out;
}

struct CombinedDemand {
  Eigen::MatrixXd x;
  int clamped_cells = 0;
};

// X_h^i = hist_h^i + dX_h^i + sum_p dN_p^i P_h^{i,p}, clamped at zero.
inline CombinedDemand combined_demand(const Eigen::MatrixXd& hist, const Eigen::MatrixXd& dX,
                                      std::span<const Eigen::VectorXd> leg_deltas,
                                      std::span<const Eigen::MatrixXd> leg_profiles) {
  if (dX.rows() != hist.rows() || dX.cols() != hist.cols() || leg_deltas.size() != leg_profiles.size())
    throw ConfigError("combined_demand: inputs are not on one grid");
  CombinedDemand out{hist + dX, 0};
  for (std::size_t p = 0; p < leg_deltas.size(); ++p) {
    if (leg_profiles[p].rows() != hist.rows() || leg_profiles[p].cols() != hist.cols())
      throw ConfigError("combined_demand: profile grid mismatch");
    out.x.noalias() += leg_deltas[p].asDiagonal() * leg_profiles[p];
  }
  for (Eigen::Index i = 0; i < out.x.rows(); ++i)
    for (Eigen::Index h = 0; h < out.x.cols(); ++h)
      if (out.x(i, h) < 0.0) {
        out.x(i, h) = 0.0;
        ++out.clamped_cells;
      }
  return out;
}

// Demand forecast for intervals [from, to) from the filter state at from-1:
// the interval deviation is carried forward by the AR model and the leg
// deviations are spread with the (fixed) departure profiles. Runs no loader.
//
// `lag_means` holds the most recent deviation means, newest last.
inline Eigen::MatrixXd predict_horizon(const Eigen::MatrixXd& hist, std::span<const Eigen::VectorXd> lag_means,
                                       const ArModel& ar, std::span<const Eigen::VectorXd> leg_deltas,
                                       std::span<const Eigen::MatrixXd> leg_profiles, int from, int to) {
  if (from < 0 || to > hist.cols() || from > to) throw DomainError("predict_horizon: horizon outside the grid");
  if (static_cast<int>(lag_means.size()) < ar.order()) throw ConfigError("predict_horizon: lag history too short");
  if (leg_deltas.size() != leg_profiles.size()) throw ConfigError("predict_horizon: one profile per leg");

  std::vector<Eigen::VectorXd> window(lag_means.end() - ar.order(), lag_means.end());
  Eigen::MatrixXd out(hist.rows(), to - from);
  for (int h = from; h < to; ++h) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(hist.rows());
    for (int k = 0; k < ar.order(); ++k)
      next.noalias() += ar.lags[static_cast<std::size_t>(k)] * window[window.size() - 1 - static_cast<std::size_t>(k)];
    window.erase(window.begin());
    window.push_back(next);

    Eigen::VectorXd x = hist.col(h) + next;
    for (std::size_t p = 0; p < leg_deltas.size(); ++p) x += leg_deltas[p].cwiseProduct(leg_profiles[p].col(h));
    out.col(h - from) = x.cwiseMax(0.0);
  }
  return out;
}

struct LegDiagnostics {
  std::string leg;
  bool root = false;
  double prior_mean_norm = 0.0;
  double posterior_mean_norm = 0.0;
  double scale = 1.0;
  double conservation_residual = 0.0;
  CovarianceHygiene after_time_update;
  CovarianceHygiene after_measurement_update;
};

// Inputs for a full pass over a trip chain.
struct ChainInputs {
  const OdIndex* ods = nullptr;
  const ChainSpec* chain = nullptr;
  std::vector<DemandLeg> historical;             // chain.legs order
  std::vector<Eigen::MatrixXd> profiles;         // chain.legs order, n_od x n_h
  std::vector<CumulativeMapping> mappings;       // chain.legs order
  Eigen::VectorXd cumulative_deviation;          // observed - historical cumulative counts at the horizon
  std::vector<FilterState> root_states;          // chain.legs order; only root entries are read
  Eigen::MatrixXd leg_process_noise;             // n_od x n_od
  Eigen::MatrixXd cumulative_noise;              // channels x channels
  LegOperatorOptions operator_options;
};

struct ChainResult {
  std::vector<FilterState> states;  // chain.legs order
  std::vector<LegDiagnostics> diagnostics;  // processing order
  std::vector<std::string> warnings;
};

// Processes legs in topological order. Roots start from their attributed
// state; other legs start from the transition of their feeding legs. Every
// leg then takes a measurement update on the cumulative counts net of all
// other legs' current estimates. In sPKF mode chained legs are rescaled to
// the total of their feeding legs afterwards.
inline ChainResult run_pkf(const ChainInputs& in, PkfMode mode) {
  const auto& legs = in.chain->legs;
  const std::size_t n_legs = legs.size();
  if (in.historical.size() != n_legs || in.profiles.size() != n_legs || in.mappings.size() != n_legs ||
      in.root_states.size() != n_legs)
    throw ConfigError("run_pkf: per-leg inputs must follow the chain's leg list");
  auto index_of = [&](const std::string& name) {
    for (std::size_t p = 0; p < n_legs; ++p)
      if (legs[p] == name) return p;
    throw ChainError("run_pkf: unknown leg '" + name + "'");
  };

  const auto n_od = static_cast<Eigen::Index>(in.ods->size());
  ChainResult out;
  std::vector<Eigen::MatrixXd> A(n_legs);
  for (std::size_t p = 0; p < n_legs; ++p) A[p] = in.mappings[p].total();

  // Current best deviation of every leg (roots from attribution, others zero
  // until processed).
  out.states.resize(n_legs);
  for (std::size_t p = 0; p < n_legs; ++p) {
    if (in.chain->is_root(legs[p])) out.states[p] = in.root_states[p];
    else out.states[p] = {Eigen::VectorXd::Zero(n_od), Eigen::MatrixXd::Zero(n_od, n_od)};
  }

  for (const auto& name : in.chain->topological_order()) {
    const std::size_t p = index_of(name);
    LegDiagnostics diag;
    diag.leg = name;
    diag.root = in.chain->is_root(name);

    FilterState pred;
    std::vector<std::size_t> feeders;
    if (diag.root) {
      pred = out.states[p];
    } else {
      std::vector<const DemandLeg*> pred_legs;
      std::vector<FilterState> pred_states;
      for (const auto& f : in.chain->predecessors(name)) {
        feeders.push_back(index_of(f));
        pred_legs.push_back(&in.historical[feeders.back()]);
        pred_states.push_back(out.states[feeders.back()]);
      }
      const LegOperator op = build_leg_operator(*in.ods, in.historical[p], pred_legs, in.operator_options, &out.warnings);
      pred = pkf_time_update(pred_states, op, in.leg_process_noise);
    }
    diag.prior_mean_norm = pred.mean.norm();
    diag.after_time_update = covariance_hygiene(pred.cov);

    Eigen::VectorXd residual = in.cumulative_deviation;
    for (std::size_t q = 0; q < n_legs; ++q)
      if (q != p) residual.noalias() -= A[q] * out.states[q].mean;
    FilterState post = pkf_measurement_update(pred, A[p], in.cumulative_noise, residual);

    if (mode == PkfMode::spkf && !diag.root) {
      std::vector<Eigen::VectorXd> feeding_totals;
      for (auto f : feeders) feeding_totals.push_back(in.historical[f].od_flows + out.states[f].mean);
      const Eigen::VectorXd estimate = in.historical[p].od_flows + post.mean;
      diag.scale = scale_factor(estimate, feeding_totals);
      const ConservedLeg kept = apply_conservation(estimate, in.historical[p].od_flows, diag.scale);
      post.mean = kept.deviation;
      post.cov /= diag.scale * diag.scale;
      double feed_sum = 0.0;
      for (const auto& t : feeding_totals) feed_sum += t.sum();
      diag.conservation_residual = std::abs(kept.flows.sum() - feed_sum) / feed_sum;
    }
    diag.after_measurement_update = covariance_hygiene(post.cov);
    diag.posterior_mean_norm = post.mean.norm();
    out.states[p] = std::move(post);
    out.diagnostics.push_back(diag);
  }
  return out;
}

}  // namespace chainod

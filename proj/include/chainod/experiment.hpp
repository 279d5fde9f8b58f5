#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chainod/assignment.hpp"
#include "chainod/departure.hpp"
#include "chainod/errors.hpp"
#include "chainod/kalman.hpp"
#include "chainod/legs.hpp"
#include "chainod/pkf.hpp"
#include "chainod/rng.hpp"
#include "chainod/scenario.hpp"

namespace chainod {

inline double rmse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("rmse: length mismatch");
  if (a.empty()) throw DomainError("rmse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

inline double rmse(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("rmse: shape mismatch");
  return rmse(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
              std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

// One synthetic world: legs, departure profiles, dynamic demand and counts.
struct DemandWorld {
  std::vector<DemandLeg> legs;             // scenario leg order
  std::vector<Eigen::MatrixXd> profiles;   // per leg, n_od x n_h
  DynamicDemand demand;
  LoadResult load;
};

struct TruthAndHistory {
  OdIndex ods;
  ChainSpec chain;
  DemandWorld truth;
  DemandWorld historical;
  Eigen::VectorXd perturbation_factors;  // per (leg, OD pair) in scenario order
};

namespace detail {

inline std::vector<DemandLeg> legs_from_config(const ScenarioConfig& cfg, const OdIndex& ods) {
  std::vector<DemandLeg> out;
  for (const auto& lc : cfg.legs) {
    DemandLeg leg;
    leg.name = lc.name;
    leg.purpose = lc.purpose;
    leg.od_flows = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ods.size()));
    for (const auto& [od, share] : lc.shares) {
      const std::size_t i = ods.at(od);
      leg.od_flows[static_cast<Eigen::Index>(i)] += lc.total * share;
      leg.members.push_back(i);
    }
    out.push_back(std::move(leg));
  }
  return out;
}

// Departure probabilities of every member OD of a leg given per-interval
// travel times (n_od x n_h).
inline Eigen::MatrixXd leg_profile(const ScenarioConfig& cfg, std::size_t p, const DemandLeg& leg,
                                   const Eigen::MatrixXd& tt) {
  const int n_h = cfg.grid.n_intervals;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(tt.rows(), n_h);
  std::vector<double> row(static_cast<std::size_t>(n_h));
  for (std::size_t i : leg.members) {
    const auto r = static_cast<Eigen::Index>(i);
    for (int h = 0; h < n_h; ++h) row[static_cast<std::size_t>(h)] = tt(r, h);
    const auto probs = departure_probabilities(cfg.legs[p].schedule, row, cfg.grid);
    for (int h = 0; h < n_h; ++h) out(r, h) = probs[static_cast<std::size_t>(h)];
  }
  return out;
}

inline Eigen::MatrixXd free_flow_times(const Network& net, const OdIndex& ods, int n_h) {
  Eigen::MatrixXd tt = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ods.size()), n_h);
  for (std::size_t i = 0; i < ods.size(); ++i) {
    const Path* path = net.find_path(ods[i]);
    if (!path) continue;
    double t = 0.0;
    for (int id : path->links) t += net.link(id).free_flow_time;
    tt.row(static_cast<Eigen::Index>(i)).setConstant(t);
  }
  return tt;
}

// Expands legs into dynamic demand: profiles from free-flow times, then
// refined from the loaded travel times `passes` times.
inline DemandWorld build_world(const ScenarioConfig& cfg, const NetworkLoader& loader, std::vector<DemandLeg> legs) {
  DemandWorld w;
  w.legs = std::move(legs);
  Eigen::MatrixXd tt = free_flow_times(loader.network(), loader.ods(), cfg.grid.n_intervals);
  for (int pass = 0;; ++pass) {
    w.profiles.clear();
    w.demand.x = Eigen::MatrixXd::Zero(tt.rows(), cfg.grid.n_intervals);
    for (std::size_t p = 0; p < w.legs.size(); ++p) {
      w.profiles.push_back(leg_profile(cfg, p, w.legs[p], tt));
      w.demand.x.noalias() += w.legs[p].od_flows.asDiagonal() * w.profiles.back();
    }
    w.load = loader.load(w.demand);
    if (pass >= cfg.estimation.profile_passes) break;
    tt = w.load.od_travel_time;
  }
  return w;
}

}  // namespace detail

// Builds the true and the historical demand from the scenario. Historical leg
// flows are the true ones perturbed per (leg, OD pair); both worlds use the
// same departure-time model, each with its own loaded travel times.
inline TruthAndHistory generate_truth_and_history(const ScenarioConfig& cfg) {
  const auto& pert = cfg.perturbation;
  if (!(pert.scale > -1.0) || pert.noise < 0.0) throw ConfigError("perturbation: scale must be > -1 and noise >= 0");

  TruthAndHistory out;
  out.ods = cfg.od_index();
  out.chain = cfg.chain();
  NetworkLoader loader(cfg.network, cfg.grid, out.ods);

  std::vector<DemandLeg> truth = detail::legs_from_config(cfg, out.ods);
  std::vector<DemandLeg> hist = truth;
  Rng rng(pert.seed.value_or(cfg.seed));
  std::vector<double> factors;
  for (auto& leg : hist) {
    for (std::size_t i : leg.members) {
      double f = 1.0 + pert.scale;
      if (pert.mode == PerturbationMode::scale_plus_noise) f *= 1.0 + pert.noise * rng.symmetric();
      if (!(f > 0.0)) throw ConfigError("perturbation: factor must stay positive");
      leg.od_flows[static_cast<Eigen::Index>(i)] *= f;
      factors.push_back(f);
    }
  }
  out.perturbation_factors = Eigen::Map<Eigen::VectorXd>(factors.data(), static_cast<Eigen::Index>(factors.size()));
  out.truth = detail::build_world(cfg, loader, std::move(truth));
  out.historical = detail::build_world(cfg, loader, std::move(hist));
  return out;
}

enum class ModelKind { seed, kf, pkf, spkf };

inline const char* model_label(ModelKind m) {
  switch (m) {
    case ModelKind::seed: return "Seed";
    case ModelKind::kf: return "KF";
    case ModelKind::pkf: return "PKF+KF";
    case ModelKind::spkf: return "sPKF+KF";
  }
  return "?";
}

inline const char* model_key(ModelKind m) {
  switch (m) {
    case ModelKind::seed: return "seed";
    case ModelKind::kf: return "kf";
    case ModelKind::pkf: return "pkf";
    case ModelKind::spkf: return "spkf";
  }
  return "?";
}

inline ModelKind model_from_key(const std::string& key) {
  if (key == "seed") return ModelKind::seed;
  if (key == "kf") return ModelKind::kf;
  if (key == "pkf") return ModelKind::pkf;
  if (key == "spkf") return ModelKind::spkf;
  throw ConfigError("unknown model '" + key + "'");
}

// Forecast issued at the cutoff from morning information only.
struct PredictionResult {
  Eigen::MatrixXd x;          // n_od x (n_h - cutoff)
  double rmse_od_evening = 0.0;
  double rmse_od_short = 0.0;
  std::size_t loader_calls = 0;  // loader invocations while forecasting
};

struct ModelRow {
  ModelKind model = ModelKind::seed;
  bool ok = true;
  std::string error;
  double rmse_od = 0.0;
  double rmse_link = 0.0;
  std::optional<double> impr_od_pct;
  std::optional<double> impr_link_pct;
  double rmse_od_evening = 0.0;
  std::optional<PredictionResult> prediction;
  Eigen::MatrixXd estimate;  // n_od x n_h
  int clamped_cells = 0;
};

struct NoiseScales {
  double od_flow = 0.0;     // mean historical OD flow per interval
  double count = 0.0;       // mean historical count per channel and interval
  double leg_flow = 0.0;    // mean historical leg OD flow
  double cumulative = 0.0;  // mean historical cumulative count at the cutoff
};

struct ExperimentDiagnostics {
  NoiseScales scales;
  std::vector<KfStepRecord> kf_steps;
  std::vector<LegDiagnostics> legs;             // last chain model run
  std::map<std::string, Eigen::VectorXd> leg_deviations;  // last chain model run, leg -> dN
  std::vector<std::string> warnings;
  double worst_symmetry_error = 0.0;
  double worst_relative_min_eigenvalue = 0.0;  // min eigenvalue / trace, most negative
  std::size_t loader_calls = 0;
  double attribution_dropped_mass = 0.0;
};

struct ExperimentReport {
  std::string scenario;
  std::uint64_t seed = 0;
  int n_intervals = 0;
  int cutoff = 0;
  OdIndex ods;
  std::vector<ModelRow> rows;
  Eigen::MatrixXd truth;
  Eigen::MatrixXd historical;
  ExperimentDiagnostics diagnostics;

  const ModelRow* row(ModelKind m) const {
    for (const auto& r : rows)
      if (r.model == m) return &r;
    return nullptr;
  }
};

namespace detail {

inline void track_hygiene(ExperimentDiagnostics& d, const CovarianceHygiene& h) {
  d.worst_symmetry_error = std::max(d.worst_symmetry_error, h.symmetry_error);
  if (h.trace > 0.0) d.worst_relative_min_eigenvalue = std::min(d.worst_relative_min_eigenvalue, h.min_eigenvalue / h.trace);
}

// Everything the estimators share within one experiment.
struct ExperimentContext {
  const ScenarioConfig* cfg = nullptr;
  TruthAndHistory world;
  NetworkLoader loader;
  AssignmentMatrix H;
  Eigen::MatrixXd y_true;
  Eigen::MatrixXd y_hist;
  Eigen::MatrixXd y_obs;
  Eigen::MatrixXd dy;
  NoiseScales scales;
  NoiseModel kf_noise;
  FilterState kf_initial;
  ArModel ar;
  int cutoff = 0;
};

}  // namespace detail

// Measured counts: true counts with relative Gaussian sensor noise, floored
// at zero.
inline Eigen::MatrixXd observe_counts(const Eigen::MatrixXd& y_true, double relative_noise, std::uint64_t seed) {
  Eigen::MatrixXd y = y_true;
  if (relative_noise <= 0.0) return y;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (Eigen::Index h = 0; h < y.cols(); ++h)
    for (Eigen::Index c = 0; c < y.rows(); ++c) y(c, h) = std::max(0.0, y(c, h) * (1.0 + relative_noise * rng.normal()));
  return y;
}

// Noise scales: mean historical OD flow and count over all (row, interval)
// cells, mean nonzero historical leg OD flow, and mean historical cumulative
// count at the cutoff.
inline NoiseScales noise_scales(const TruthAndHistory& w, const Eigen::MatrixXd& y_hist, int cutoff) {
  NoiseScales s;
  s.od_flow = w.historical.demand.x.mean();
  s.count = y_hist.mean();
  double sum = 0.0;
  int n = 0;
  for (const auto& leg : w.historical.legs)
    for (Eigen::Index i = 0; i < leg.od_flows.size(); ++i)
      if (leg.od_flows[i] > 0.0) {
        sum += leg.od_flows[i];
        ++n;
      }
  s.leg_flow = n ? sum / n : 0.0;
  s.cumulative = y_hist.leftCols(cutoff).rowwise().sum().mean();
  return s;
}

namespace detail {

inline Eigen::MatrixXd scaled_identity(Eigen::Index n, double fraction, double scale) {
  const double sd = fraction * scale;
  return (sd * sd) * Eigen::MatrixXd::Identity(n, n);
}

inline ExperimentContext make_context(const ScenarioConfig& cfg) {
  TruthAndHistory world = generate_truth_and_history(cfg);
  NetworkLoader loader(cfg.network, cfg.grid, world.ods);
  ExperimentContext ctx{&cfg, std::move(world), std::move(loader), {}, {}, {}, {}, {}, {}, {}, {}, {}, 0};
  auto& w = ctx.world;
  ctx.cutoff = cfg.cutoff_interval();
  ctx.H = assignment_matrix(ctx.loader, w.historical.load);
  ctx.y_true = w.truth.load.counts.y;
  ctx.y_hist = w.historical.load.counts.y;
  ctx.y_obs = observe_counts(ctx.y_true, cfg.noise.measurement, cfg.seed);
  ctx.dy = ctx.y_obs - ctx.y_hist;
  ctx.scales = noise_scales(w, ctx.y_hist, ctx.cutoff);

  const auto n_od = static_cast<Eigen::Index>(w.ods.size());
  const auto n_ch = ctx.y_hist.rows();
  ctx.kf_noise.Q = scaled_identity(n_od, cfg.noise.kf_q, ctx.scales.od_flow);
  ctx.kf_noise.R = scaled_identity(n_ch, cfg.noise.kf_r, std::max(ctx.scales.count, 1.0));
  ctx.kf_initial = kf_initialize(Eigen::VectorXd::Zero(n_od), scaled_identity(n_od, cfg.noise.kf_p0, ctx.scales.od_flow));
  ctx.ar = ArModel::scaled(n_od, cfg.estimation.ar);
  return ctx;
}

inline void record_kf(ExperimentDiagnostics& d, const std::vector<KfStepRecord>& steps) {
  for (const auto& r : steps) {
    track_hygiene(d, r.after_time_update);
    track_hygiene(d, r.after_measurement_update);
  }
}

// Link-count RMSE of an estimate, loading it with the full loader.
inline double link_rmse(const ExperimentContext& ctx, const Eigen::MatrixXd& x) {
  return rmse(ctx.loader.load(DynamicDemand{x}).counts.y, ctx.y_true);
}

inline void fill_row(const ExperimentContext& ctx, ModelRow& row, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd& truth = ctx.world.truth.demand.x;
  const int n_h = static_cast<int>(truth.cols());
  row.estimate = x;
  row.rmse_od = rmse(x, truth);
  row.rmse_link = link_rmse(ctx, x);
  row.rmse_od_evening = rmse(Eigen::MatrixXd(x.middleCols(ctx.cutoff, n_h - ctx.cutoff)),
                             Eigen::MatrixXd(truth.middleCols(ctx.cutoff, n_h - ctx.cutoff)));
}

inline void run_kf_model(const ExperimentContext& ctx, ModelRow& row, ExperimentDiagnostics& d) {
  const int n_h = ctx.cfg->grid.n_intervals;
  KalmanSequence seq(ctx.H, ctx.ar, ctx.kf_noise, ctx.kf_initial);
  seq.run(ctx.dy, n_h);
  record_kf(d, seq.records());
  d.kf_steps = seq.records();
  const CombinedDemand x = combined_demand(ctx.world.historical.demand.x, seq.means(n_h), {}, {});
  row.clamped_cells = x.clamped_cells;
  fill_row(ctx, row, x.x);
}

// Chain model: interval filter up to the cutoff, attribution to the root
// legs, leg filter over the chain, forecast of the rest of the day from the
// leg deviations, then the interval filter resumes on the residual counts.
inline void run_chain_model(const ExperimentContext& ctx, ModelRow& row, PkfMode mode, ExperimentDiagnostics& d) {
  const ScenarioConfig& cfg = *ctx.cfg;
  const auto& w = ctx.world;
  const int n_h = cfg.grid.n_intervals;
  const int cutoff = ctx.cutoff;
  const auto n_od = static_cast<Eigen::Index>(w.ods.size());
  const std::size_t n_legs = w.historical.legs.size();
  const Eigen::MatrixXd& hist = w.historical.demand.x;
  const auto& profiles = w.historical.profiles;

  KalmanSequence seq(ctx.H, ctx.ar, ctx.kf_noise, ctx.kf_initial);
  seq.run(ctx.dy, cutoff);

  std::vector<Eigen::VectorXd> leg_flows;
  for (const auto& leg : w.historical.legs) leg_flows.push_back(leg.od_flows);
  const AttributionResult attr =
      attribute_interval_deviations(seq.means(n_h), 0, cutoff, leg_flows, profiles, seq.posteriors());
  d.attribution_dropped_mass += attr.dropped_mass;
  d.warnings.insert(d.warnings.end(), attr.warnings.begin(), attr.warnings.end());

  ChainInputs in;
  in.ods = &w.ods;
  in.chain = &w.chain;
  in.historical = w.historical.legs;
  in.profiles = profiles;
  for (std::size_t p = 0; p < n_legs; ++p) in.mappings.push_back(cumulative_mapping(ctx.H, profiles[p], cutoff - 1));
  in.cumulative_deviation = ctx.dy.leftCols(cutoff).rowwise().sum();
  for (std::size_t p = 0; p < n_legs; ++p) in.root_states.push_back({attr.deltas[p], attr.covs[p]});
  in.leg_process_noise = scaled_identity(n_od, cfg.noise.pkf_q, ctx.scales.leg_flow);
  in.cumulative_noise = scaled_identity(ctx.y_hist.rows(), cfg.noise.pkf_r, std::max(ctx.scales.cumulative, 1.0));
  in.operator_options.uniform_redistribution = cfg.estimation.uniform_redistribution;
  const ChainResult chain = run_pkf(in, mode);
  for (const auto& ld : chain.diagnostics) {
    track_hygiene(d, ld.after_time_update);
    track_hygiene(d, ld.after_measurement_update);
  }
  d.legs = chain.diagnostics;
  d.warnings.insert(d.warnings.end(), chain.warnings.begin(), chain.warnings.end());

  std::vector<Eigen::VectorXd> dN;
  for (std::size_t p = 0; p < n_legs; ++p) {
    dN.push_back(chain.states[p].mean);
    d.leg_deviations[w.chain.legs[p]] = chain.states[p].mean;
  }
  Eigen::MatrixXd structural = Eigen::MatrixXd::Zero(n_od, n_h);
  for (std::size_t p = 0; p < n_legs; ++p) structural.noalias() += dN[p].asDiagonal() * profiles[p];

  // The interval filter now tracks what the leg deviations do not explain.
  seq.shift_means(structural);

  const std::size_t calls_before = ctx.loader.calls();
  std::vector<Eigen::VectorXd> lag_means;
  for (const auto& s : seq.lag_history()) lag_means.push_back(s.mean);
  PredictionResult pred;
  pred.x = predict_horizon(hist, lag_means, seq.ar(), dN, profiles, cutoff, n_h);
  pred.loader_calls = ctx.loader.calls() - calls_before;
  const Eigen::MatrixXd truth_evening = w.truth.demand.x.middleCols(cutoff, n_h - cutoff);
  pred.rmse_od_evening = rmse(pred.x, truth_evening);
  const int short_n = std::min(cfg.estimation.short_horizon, n_h - cutoff);
  pred.rmse_od_short = rmse(Eigen::MatrixXd(pred.x.leftCols(short_n)), Eigen::MatrixXd(truth_evening.leftCols(short_n)));
  row.prediction = pred;

  DynamicDemand base{hist + structural};
  Eigen::MatrixXd dy_residual;
  AssignmentMatrix refreshed;
  if (cfg.estimation.refresh_assignment) {
    const LoadResult reload = ctx.loader.load(DynamicDemand{base.x.cwiseMax(0.0)});
    refreshed = assignment_matrix(ctx.loader, reload);
    seq.set_assignment(refreshed);
    dy_residual = ctx.y_obs - reload.counts.y;
  } else {
    dy_residual = ctx.y_obs - (ctx.y_hist + ctx.H.apply(DynamicDemand{structural}).y);
  }
  seq.run(dy_residual, n_h);
  record_kf(d, seq.records());

  const CombinedDemand x = combined_demand(hist, seq.means(n_h), dN, profiles);
  row.clamped_cells = x.clamped_cells;
  fill_row(ctx, row, x.x);
}

inline void finish_improvements(ExperimentReport& report, double seed_od, double seed_link) {
  constexpr double tiny = 1e-9;
  for (auto& r : report.rows) {
    if (!r.ok) continue;
    if (seed_od > tiny) r.impr_od_pct = 100.0 * (seed_od - r.rmse_od) / seed_od;
    if (seed_link > tiny) r.impr_link_pct = 100.0 * (seed_link - r.rmse_link) / seed_link;
  }
}

}  // namespace detail

// Runs every selected model against one synthetic truth and one set of
// measurements. A model that fails is reported with its error; the other
// rows are unaffected.
inline ExperimentReport run_experiment(const ScenarioConfig& cfg) {
  const auto problems = cfg.validate();
  if (!problems.empty()) throw ConfigError("invalid scenario: " + problems.front());

  detail::ExperimentContext ctx = detail::make_context(cfg);
  ExperimentReport report;
  report.scenario = cfg.name;
  report.seed = cfg.seed;
  report.n_intervals = cfg.grid.n_intervals;
  report.cutoff = ctx.cutoff;
  report.ods = ctx.world.ods;
  report.truth = ctx.world.truth.demand.x;
  report.historical = ctx.world.historical.demand.x;
  report.diagnostics.scales = ctx.scales;

  ModelRow seed_row;
  detail::fill_row(ctx, seed_row, ctx.world.historical.demand.x);

  for (const auto& key : cfg.models) {
    ModelRow row;
    row.model = model_from_key(key);
    try {
      switch (row.model) {
        case ModelKind::seed: row = seed_row; break;
        case ModelKind::kf: detail::run_kf_model(ctx, row, report.diagnostics); break;
        case ModelKind::pkf: detail::run_chain_model(ctx, row, PkfMode::pkf, report.diagnostics); break;
        case ModelKind::spkf: detail::run_chain_model(ctx, row, PkfMode::spkf, report.diagnostics); break;
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    report.rows.push_back(std::move(row));
  }
  detail::finish_improvements(report, seed_row.rmse_od, seed_row.rmse_link);
  report.diagnostics.loader_calls = ctx.loader.calls();
  return report;
}

}  // namespace chainod

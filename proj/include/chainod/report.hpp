#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "chainod/errors.hpp"
#include "chainod/experiment.hpp"

namespace chainod {

// Shortest round-trip decimal form; "nan" / "inf" for non-finite values.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "n/a"; }

// Writes `content` next to `path` and renames it into place.
inline void write_atomically(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

inline std::string report_csv(const ExperimentReport& report) {
  std::ostringstream os;
  os << "model,rmse_od,rmse_link,impr_od_pct,impr_link_pct\n";
  for (const auto& r : report.rows) {
    os << model_label(r.model) << ',';
    if (!r.ok) {
      os << "failed,failed,n/a,n/a\n";
      continue;
    }
    os << format_number(r.rmse_od) << ',' << format_number(r.rmse_link) << ',' << format_optional(r.impr_od_pct)
       << ',' << format_optional(r.impr_link_pct) << '\n';
  }
  return os.str();
}

namespace detail {

inline nlohmann::json vector_json(const Eigen::VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace detail

inline nlohmann::json report_json(const ExperimentReport& report) {
  using nlohmann::json;
  json j;
  j["scenario"] = report.scenario;
  j["seed"] = report.seed;
  j["rng"] = Rng::algorithm;
  j["n_intervals"] = report.n_intervals;
  j["cutoff_interval"] = report.cutoff;
  json ods = json::array();
  for (const auto& od : report.ods) ods.push_back(to_string(od));
  j["od_pairs"] = ods;

  json rows = json::array();
  for (const auto& r : report.rows) {
    json row;
    row["model"] = model_key(r.model);
    row["label"] = model_label(r.model);
    row["ok"] = r.ok;
    if (!r.ok) {
      row["error"] = r.error;
    } else {
      row["rmse_od"] = r.rmse_od;
      row["rmse_link"] = r.rmse_link;
      row["impr_od_pct"] = detail::optional_json(r.impr_od_pct);
      row["impr_link_pct"] = detail::optional_json(r.impr_link_pct);
      row["rmse_od_evening"] = r.rmse_od_evening;
      row["clamped_cells"] = r.clamped_cells;
      if (r.prediction) {
        row["prediction"] = {{"rmse_od_evening", r.prediction->rmse_od_evening},
                             {"rmse_od_short_horizon", r.prediction->rmse_od_short},
                             {"loader_calls", r.prediction->loader_calls}};
      }
    }
    rows.push_back(row);
  }
  j["models"] = rows;

  const auto& d = report.diagnostics;
  json diag;
  diag["noise_scales"] = {{"od_flow", d.scales.od_flow},
                          {"count", d.scales.count},
                          {"leg_flow", d.scales.leg_flow},
                          {"cumulative_count", d.scales.cumulative}};
  diag["covariance"] = {{"worst_symmetry_error", d.worst_symmetry_error},
                        {"worst_relative_min_eigenvalue", d.worst_relative_min_eigenvalue}};
  diag["loader_calls"] = d.loader_calls;
  diag["attribution_dropped_mass"] = d.attribution_dropped_mass;
  json kf = json::array();
  for (const auto& s : d.kf_steps)
    kf.push_back({{"interval", s.interval},
                  {"innovation_norm", s.update.innovation_norm},
                  {"gain_norm", s.update.gain_norm},
                  {"cov_trace", s.update.cov_trace},
                  {"jittered", s.update.jittered}});
  diag["kf_steps"] = kf;
  json legs = json::array();
  for (const auto& l : d.legs) {
    json leg = {{"leg", l.leg},
                {"root", l.root},
                {"prior_mean_norm", l.prior_mean_norm},
                {"posterior_mean_norm", l.posterior_mean_norm},
                {"scale_factor", l.scale},
                {"conservation_residual", l.conservation_residual}};
    const auto it = d.leg_deviations.find(l.leg);
    if (it != d.leg_deviations.end()) leg["deviation"] = detail::vector_json(it->second);
    legs.push_back(leg);
  }
  diag["legs"] = legs;
  diag["warnings"] = d.warnings;
  j["diagnostics"] = diag;
  return j;
}

// Per-interval departures of one OD pair: truth, historical and every model.
inline std::string profile_csv(const ExperimentReport& report, std::size_t od) {
  std::ostringstream os;
  os << "interval,true,historical";
  for (const auto& r : report.rows)
    if (r.ok && r.model != ModelKind::seed) os << ',' << model_key(r.model);
  os << '\n';
  const auto i = static_cast<Eigen::Index>(od);
  for (int h = 0; h < report.n_intervals; ++h) {
    os << h << ',' << format_number(report.truth(i, h)) << ',' << format_number(report.historical(i, h));
    for (const auto& r : report.rows)
      if (r.ok && r.model != ModelKind::seed) os << ',' << format_number(r.estimate(i, h));
    os << '\n';
  }
  return os.str();
}

struct EmitOptions {
  bool profiles = true;
  std::vector<OdPair> profile_ods;  // empty: every OD pair
};

// Writes report.csv, report.json and profiles/<o-d>.csv under `dir`.
inline void emit_report(const ExperimentReport& report, const std::filesystem::path& dir, const EmitOptions& opts = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_atomically(dir / "report.csv", report_csv(report));
  write_atomically(dir / "report.json", report_json(report).dump(2) + "\n");
  if (!opts.profiles) return;
  const auto pdir = dir / "profiles";
  std::filesystem::create_directories(pdir, ec);
  if (ec) throw IoError("cannot create output directory " + pdir.string() + ": " + ec.message());
  std::vector<OdPair> ods = opts.profile_ods;
  if (ods.empty()) ods.assign(report.ods.begin(), report.ods.end());
  for (const auto& od : ods) {
    const auto idx = report.ods.find(od);
    if (!idx) throw ConfigError("profile OD " + to_string(od) + " is not part of the experiment");
    write_atomically(pdir / (to_string(od) + ".csv"), profile_csv(report, *idx));
  }
}

}  // namespace chainod

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "chainod/departure.hpp"
#include "chainod/errors.hpp"
#include "chainod/legs.hpp"
#include "chainod/network.hpp"
#include "chainod/rng.hpp"

namespace chainod {

struct LegConfig {
  std::string name;
  std::string purpose;
  double total = 0.0;
  std::vector<std::pair<OdPair, double>> shares;  // share of `total` per OD pair
  ScheduleParams schedule;
  std::vector<std::string> feeds;
};

enum class PerturbationMode { uniform_scale, scale_plus_noise };

// Historical demand = true demand * (1 + scale) [* (1 + noise * u)], with u
// uniform on [-1, 1) drawn per (leg, OD pair).
struct PerturbationSpec {
  PerturbationMode mode = PerturbationMode::uniform_scale;
  double scale = 0.30;
  double noise = 0.0;
  std::optional<std::uint64_t> seed;
};

// Noise standard deviations as fractions of historical scales: the mean OD
// flow per interval for the interval filter, the mean leg OD flow for the
// leg filter, the mean count per interval and the mean cumulative count at
// the cutoff for the two measurement models.
struct NoiseSettings {
  double kf_q = 0.05;
  double kf_r = 0.10;
  double kf_p0 = 0.05;
  double pkf_q = 0.05;
  double pkf_r = 0.10;
  double measurement = 0.0;  // relative std of sensor noise on observed counts
};

struct EstimationSettings {
  double cutoff = 720.0;        // minutes of day; the interval filter alone runs before it
  int short_horizon = 2;        // intervals ahead for the rolling forecast metric
  int profile_passes = 1;       // loaded-travel-time refinements of departure profiles
  bool uniform_redistribution = false;
  bool refresh_assignment = false;
  std::vector<double> ar = {1.0};  // identity multiples per lag
};

struct ScenarioConfig {
  std::string name = "scenario";
  Network network;
  TimeGrid grid;
  std::vector<LegConfig> legs;
  PerturbationSpec perturbation;
  NoiseSettings noise;
  EstimationSettings estimation;
  std::vector<std::string> models = {"seed", "kf", "pkf", "spkf"};
  std::uint64_t seed = 1;
  std::string rng = Rng::algorithm;
  std::vector<OdPair> profile_ods;

  OdIndex od_index() const {
    OdIndex ods;
    for (const auto& leg : legs)
      for (const auto& [od, share] : leg.shares) ods.add(od);
    return ods;
  }

  ChainSpec chain() const {
    ChainSpec c;
    for (const auto& leg : legs) {
      c.legs.push_back(leg.name);
      if (!leg.feeds.empty()) c.feeds[leg.name] = leg.feeds;
    }
    return c;
  }

  // Interval index at which the online interval filter hands over to the
  // chain model.
  int cutoff_interval() const {
    const double rel = (estimation.cutoff - grid.start) / grid.interval_length;
    return std::clamp(static_cast<int>(std::lround(rel)), 1, grid.n_intervals);
  }

  // Every violated invariant, empty when the scenario is usable.
  std::vector<std::string> validate() const {
    std::vector<std::string> out;
    try {
      grid.validate();
    } catch (const ConfigError& e) {
      out.push_back(e.what());
    }
    for (const auto& msg : validate_network(network)) out.push_back(msg);

    std::set<std::string> names;
    for (const auto& leg : legs) {
      const std::string tag = "leg '" + leg.name + "'";
      if (!names.insert(leg.name).second) out.push_back(tag + ": duplicate name");
      if (leg.total < 0.0) out.push_back(tag + ": total must be >= 0");
      if (leg.shares.empty()) out.push_back(tag + ": no OD pairs");
      double sum = 0.0;
      for (const auto& [od, share] : leg.shares) {
        if (share < 0.0) out.push_back(tag + ": negative share for " + to_string(od));
        sum += share;
        if (!network.find_zone(od.origin) || !network.find_zone(od.destination))
          out.push_back(tag + ": OD " + to_string(od) + " references an unknown zone");
        else if (!network.find_path(od))
          out.push_back(tag + ": OD " + to_string(od) + " has no path");
      }
      if (!leg.shares.empty() && std::abs(sum - 1.0) > 1e-9) out.push_back(tag + ": shares must sum to 1");
      try {
        leg.schedule.validate();
      } catch (const ConfigError& e) {
        out.push_back(tag + ": " + e.what());
      }
    }
    for (const auto& leg : legs)
      for (const auto& f : leg.feeds)
        if (!names.count(f)) out.push_back("leg '" + leg.name + "': fed by unknown leg '" + f + "'");
    if (out.empty()) {
      try {
        (void)chain().topological_order();
      } catch (const ChainError& e) {
        out.push_back(e.what());
      }
    }
    if (!(perturbation.scale > -1.0)) out.push_back("perturbation: scale must be > -1");
    if (perturbation.noise < 0.0) out.push_back("perturbation: noise must be >= 0");
    if (perturbation.mode == PerturbationMode::scale_plus_noise && !(perturbation.noise < 1.0))
      out.push_back("perturbation: noise must be < 1 so factors stay > -1");
    if (noise.measurement < 0.0) out.push_back("noise: measurement must be >= 0");
    for (double v : {noise.kf_q, noise.kf_r, noise.kf_p0, noise.pkf_q, noise.pkf_r})
      if (!(v >= 0.0)) out.push_back("noise: filter noise fractions must be >= 0");
    if (noise.kf_r <= 0.0 || noise.pkf_r <= 0.0) out.push_back("noise: kf_r and pkf_r must be > 0");
    if (estimation.ar.empty()) out.push_back("estimation: ar needs at least one lag");
    if (estimation.short_horizon < 1) out.push_back("estimation: short_horizon must be >= 1");
    if (estimation.profile_passes < 0) out.push_back("estimation: profile_passes must be >= 0");
    if (estimation.cutoff <= grid.start || estimation.cutoff > grid.end())
      out.push_back("estimation: cutoff must lie inside the time grid");
    static const std::set<std::string> known_models = {"seed", "kf", "pkf", "spkf"};
    for (const auto& m : models)
      if (!known_models.count(m)) out.push_back("models: unknown model '" + m + "'");
    if (rng != Rng::algorithm) out.push_back("rng: only '" + std::string(Rng::algorithm) + "' is supported");
    const OdIndex ods = od_index();
    for (const auto& od : profile_ods)
      if (!ods.find(od)) out.push_back("report: profile OD " + to_string(od) + " is not demanded by any leg");
    return out;
  }
};

namespace detail {

inline OdPair parse_od_string(const std::string& s) {
  const auto dash = s.find('-');
  try {
    if (dash == std::string::npos) throw std::invalid_argument(s);
    return {std::stoi(s.substr(0, dash)), std::stoi(s.substr(dash + 1))};
  } catch (const std::exception&) {
    throw ConfigError("cannot parse OD pair '" + s + "' (expected origin-destination)");
  }
}

template <typename T>
T get_or(const YAML::Node& node, const char* key, T fallback) {
  if (!node || !node[key]) return fallback;
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("scenario: bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
T require(const YAML::Node& node, const char* key, const std::string& where) {
  if (!node[key]) throw ConfigError("scenario: " + where + " is missing '" + key + "'");
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError("scenario: bad value for " + where + "." + key + ": " + e.what());
  }
}

inline void reject_unknown(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
  if (!node || !node.IsMap()) return;
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError("scenario: unknown key '" + key + "' in " + where);
  }
}

inline ScheduleParams parse_schedule(const YAML::Node& node, const ScheduleParams& base) {
  reject_unknown(node, {"alpha", "beta", "gamma", "preferred_arrival", "logit_scale"}, "schedule");
  ScheduleParams p = base;
  p.alpha = get_or(node, "alpha", p.alpha);
  p.beta = get_or(node, "beta", p.beta);
  p.gamma = get_or(node, "gamma", p.gamma);
  p.preferred_arrival = get_or(node, "preferred_arrival", p.preferred_arrival);
  p.logit_scale = get_or(node, "logit_scale", p.logit_scale);
  return p;
}

inline Network parse_network(const YAML::Node& node) {
  reject_unknown(node, {"preset", "overrides", "zones", "links", "paths", "detectors"}, "network");
  if (node["preset"]) {
    const auto preset = node["preset"].as<std::string>();
    if (preset != "toy") throw ConfigError("scenario: unknown network preset '" + preset + "'");
    std::map<std::string, double> overrides;
    if (node["overrides"])
      for (const auto& kv : node["overrides"]) overrides[kv.first.as<std::string>()] = kv.second.as<double>();
    return build_toy_network(overrides);
  }
  Network net;
  for (const auto& z : node["zones"]) {
    reject_unknown(z, {"id", "kind", "node"}, "zone");
    Zone zone;
    zone.id = require<int>(z, "id", "zone");
    zone.kind = zone_kind_from_string(get_or<std::string>(z, "kind", "residential"));
    zone.node = get_or(z, "node", zone.id);
    net.zones.push_back(zone);
  }
  for (const auto& l : node["links"]) {
    reject_unknown(l, {"id", "from", "to", "label", "free_flow_time", "capacity", "bpr_alpha", "bpr_beta"}, "link");
    Link link;
    link.id = require<int>(l, "id", "link");
    link.from_node = require<int>(l, "from", "link");
    link.to_node = require<int>(l, "to", "link");
    link.label = get_or(l, "label", link.id);
    link.free_flow_time = get_or(l, "free_flow_time", link.free_flow_time);
    link.capacity = get_or(l, "capacity", link.capacity);
    link.bpr_alpha = get_or(l, "bpr_alpha", link.bpr_alpha);
    link.bpr_beta = get_or(l, "bpr_beta", link.bpr_beta);
    net.links.push_back(link);
  }
  for (const auto& p : node["paths"]) {
    reject_unknown(p, {"od", "links"}, "path");
    Path path;
    path.od = parse_od_string(require<std::string>(p, "od", "path"));
    path.links = require<std::vector<int>>(p, "links", "path");
    net.paths.push_back(path);
  }
  for (const auto& d : node["detectors"]) {
    reject_unknown(d, {"name", "link"}, "detector");
    DetectorChannel ch;
    ch.link_id = require<int>(d, "link", "detector");
    ch.name = get_or<std::string>(d, "name", "link" + std::to_string(ch.link_id));
    net.detectors.push_back(ch);
  }
  return net;
}

}  // namespace detail

// Parses a scenario document (YAML). Structural problems throw ConfigError;
// semantic checks live in ScenarioConfig::validate().
inline ScenarioConfig parse_scenario(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  if (!root.IsMap()) throw ConfigError("scenario: top level must be a mapping");
  detail::reject_unknown(root,
                         {"name", "network", "time_grid", "defaults", "legs", "perturbation", "noise", "estimation",
                          "models", "seed", "rng", "report"},
                         "scenario");

  ScenarioConfig cfg;
  try {
    cfg.name = detail::get_or<std::string>(root, "name", cfg.name);
    if (!root["network"]) throw ConfigError("scenario: missing 'network'");
    cfg.network = detail::parse_network(root["network"]);

    if (const auto g = root["time_grid"]) {
      detail::reject_unknown(g, {"start", "interval_length", "n_intervals"}, "time_grid");
      cfg.grid.start = detail::get_or(g, "start", cfg.grid.start);
      cfg.grid.interval_length = detail::get_or(g, "interval_length", cfg.grid.interval_length);
      cfg.grid.n_intervals = detail::get_or(g, "n_intervals", cfg.grid.n_intervals);
    }

    ScheduleParams base;
    if (const auto d = root["defaults"]) {
      detail::reject_unknown(d, {"schedule"}, "defaults");
      base = detail::parse_schedule(d["schedule"], base);
    }

    if (!root["legs"] || !root["legs"].IsSequence()) throw ConfigError("scenario: 'legs' must be a list");
    for (const auto& l : root["legs"]) {
      detail::reject_unknown(l, {"name", "purpose", "total", "ods", "schedule", "feeds"}, "leg");
      LegConfig leg;
      leg.name = detail::require<std::string>(l, "name", "leg");
      leg.purpose = detail::get_or<std::string>(l, "purpose", leg.name);
      leg.total = detail::require<double>(l, "total", "leg '" + leg.name + "'");
      leg.schedule = detail::parse_schedule(l["schedule"], base);
      leg.feeds = detail::get_or<std::vector<std::string>>(l, "feeds", {});
      for (const auto& od : l["ods"]) {
        detail::reject_unknown(od, {"od", "share"}, "leg OD");
        leg.shares.push_back({detail::parse_od_string(detail::require<std::string>(od, "od", "leg OD")),
                              detail::require<double>(od, "share", "leg OD")});
      }
      cfg.legs.push_back(std::move(leg));
    }

    if (const auto p = root["perturbation"]) {
      detail::reject_unknown(p, {"mode", "scale", "noise", "seed"}, "perturbation");
      const auto mode = detail::get_or<std::string>(p, "mode", "uniform_scale");
      if (mode == "uniform_scale") cfg.perturbation.mode = PerturbationMode::uniform_scale;
      else if (mode == "scale_plus_noise") cfg.perturbation.mode = PerturbationMode::scale_plus_noise;
      else throw ConfigError("scenario: unknown perturbation mode '" + mode + "'");
      cfg.perturbation.scale = detail::get_or(p, "scale", cfg.perturbation.scale);
      cfg.perturbation.noise = detail::get_or(p, "noise", cfg.perturbation.noise);
      if (p["seed"]) cfg.perturbation.seed = p["seed"].as<std::uint64_t>();
    }

    if (const auto n = root["noise"]) {
      detail::reject_unknown(n, {"kf_q", "kf_r", "kf_p0", "pkf_q", "pkf_r", "measurement"}, "noise");
      cfg.noise.kf_q = detail::get_or(n, "kf_q", cfg.noise.kf_q);
      cfg.noise.kf_r = detail::get_or(n, "kf_r", cfg.noise.kf_r);
      cfg.noise.kf_p0 = detail::get_or(n, "kf_p0", cfg.noise.kf_p0);
      cfg.noise.pkf_q = detail::get_or(n, "pkf_q", cfg.noise.pkf_q);
      cfg.noise.pkf_r = detail::get_or(n, "pkf_r", cfg.noise.pkf_r);
      cfg.noise.measurement = detail::get_or(n, "measurement", cfg.noise.measurement);
    }

    if (const auto e = root["estimation"]) {
      detail::reject_unknown(e,
                             {"cutoff", "short_horizon", "profile_passes", "uniform_redistribution",
                              "refresh_assignment", "ar"},
                             "estimation");
      cfg.estimation.cutoff = detail::get_or(e, "cutoff", cfg.estimation.cutoff);
      cfg.estimation.short_horizon = detail::get_or(e, "short_horizon", cfg.estimation.short_horizon);
      cfg.estimation.profile_passes = detail::get_or(e, "profile_passes", cfg.estimation.profile_passes);
      cfg.estimation.uniform_redistribution =
          detail::get_or(e, "uniform_redistribution", cfg.estimation.uniform_redistribution);
      cfg.estimation.refresh_assignment = detail::get_or(e, "refresh_assignment", cfg.estimation.refresh_assignment);
      cfg.estimation.ar = detail::get_or(e, "ar", cfg.estimation.ar);
    }

    cfg.models = detail::get_or(root, "models", cfg.models);
    cfg.seed = detail::get_or<std::uint64_t>(root, "seed", cfg.seed);
    cfg.rng = detail::get_or<std::string>(root, "rng", cfg.rng);
    if (const auto r = root["report"]) {
      detail::reject_unknown(r, {"profile_ods"}, "report");
      for (const auto& s : detail::get_or<std::vector<std::string>>(r, "profile_ods", {}))
        cfg.profile_ods.push_back(detail::parse_od_string(s));
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  return cfg;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read scenario file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_scenario(text.str());
}

}  // namespace chainod

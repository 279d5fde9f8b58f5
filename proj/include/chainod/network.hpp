#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "chainod/errors.hpp"

namespace chainod {

enum class ZoneKind { residential, work, leisure };

inline const char* to_string(ZoneKind kind) {
  switch (kind) {
    case ZoneKind::residential: return "residential";
    case ZoneKind::work: return "work";
    case ZoneKind::leisure: return "leisure";
  }
  return "?";
}

inline ZoneKind zone_kind_from_string(const std::string& s) {
  if (s == "residential") return ZoneKind::residential;
  if (s == "work") return ZoneKind::work;
  if (s == "leisure") return ZoneKind::leisure;
  throw ConfigError("unknown zone kind '" + s + "'");
}

// Traffic zone. A zone is attached to the network node with the same id
// unless `node` says otherwise.
struct Zone {
  int id = 0;
  ZoneKind kind = ZoneKind::residential;
  int node = 0;
};

// Directed link. Bidirectional roads are two links sharing `label`.
struct Link {
  int id = 0;
  int from_node = 0;
  int to_node = 0;
  int label = 0;
  double free_flow_time = 10.0;  // minutes
  double capacity = 4000.0;      // vehicles/hour
  double bpr_alpha = 0.15;
  double bpr_beta = 4.0;
};

struct OdPair {
  int origin = 0;
  int destination = 0;

  auto operator<=>(const OdPair&) const = default;
};

inline std::string to_string(const OdPair& od) {
  return std::to_string(od.origin) + "-" + std::to_string(od.destination);
}

// Fixed route for one OD pair, as an ordered list of directed link ids.
struct Path {
  OdPair od;
  std::vector<int> links;
};

// A counting channel: one direction of a detector station.
struct DetectorChannel {
  std::string name;
  int link_id = 0;
};

struct TimeGrid {
  double start = 0.0;            // minutes of day
  double interval_length = 15.0; // minutes
  int n_intervals = 96;

  double interval_start(int h) const { return start + interval_length * h; }
  double midpoint(int h) const { return start + interval_length * (h + 0.5); }
  double end() const { return start + interval_length * n_intervals; }

  // Interval containing time t, or nullopt when t falls outside the grid.
  std::optional<int> index_of(double t) const {
    if (t < start || t >= end()) return std::nullopt;
    int h = static_cast<int>(std::floor((t - start) / interval_length));
    return std::clamp(h, 0, n_intervals - 1);
  }

  bool contains(int h) const { return h >= 0 && h < n_intervals; }

  void validate() const {
    if (!(interval_length > 0.0)) throw ConfigError("time grid: interval_length must be > 0");
    if (n_intervals < 1) throw ConfigError("time grid: n_intervals must be >= 1");
    if (start < 0.0 || end() > 1440.0 + 1e-9)
      throw ConfigError("time grid: must lie within one day [0, 1440] minutes");
  }

  bool operator==(const TimeGrid&) const = default;
};

struct Network {
  std::vector<Zone> zones;
  std::vector<Link> links;
  std::vector<Path> paths;
  std::vector<DetectorChannel> detectors;

  const Link* find_link(int id) const {
    auto it = std::find_if(links.begin(), links.end(), [id](const Link& l) { return l.id == id; });
    return it == links.end() ? nullptr : &*it;
  }

  const Link& link(int id) const {
    if (const Link* l = find_link(id)) return *l;
    throw ConfigError("unknown link id " + std::to_string(id));
  }

  std::size_t link_index(int id) const {
    for (std::size_t i = 0; i < links.size(); ++i)
      if (links[i].id == id) return i;
    throw ConfigError("unknown link id " + std::to_string(id));
  }

  const Zone* find_zone(int id) const {
    auto it = std::find_if(zones.begin(), zones.end(), [id](const Zone& z) { return z.id == id; });
    return it == zones.end() ? nullptr : &*it;
  }

  const Path* find_path(const OdPair& od) const {
    auto it = std::find_if(paths.begin(), paths.end(), [&](const Path& p) { return p.od == od; });
    return it == paths.end() ? nullptr : &*it;
  }
};

// BPR volume-delay function. `flow` in vehicles/hour, result in minutes.
inline double bpr_travel_time(const Link& link, double flow) {
  if (!(flow >= 0.0)) throw DomainError("bpr_travel_time: flow must be non-negative");
  const double ratio = flow / link.capacity;
  return link.free_flow_time * (1.0 + link.bpr_alpha * std::pow(ratio, link.bpr_beta));
}

// Returns one message per violated invariant; empty when the network is valid.
inline std::vector<std::string> validate_network(const Network& net) {
  std::vector<std::string> report;
  auto add = [&report](const std::string& msg) { report.push_back(msg); };

  std::set<int> zone_ids;
  for (const auto& z : net.zones)
    if (!zone_ids.insert(z.id).second) add("zone " + std::to_string(z.id) + ": duplicate id");

  std::set<int> link_ids;
  for (const auto& l : net.links) {
    const std::string tag = "link " + std::to_string(l.id);
    if (!link_ids.insert(l.id).second) add(tag + ": duplicate id");
    if (!(l.free_flow_time > 0.0)) add(tag + ": free_flow_time must be > 0");
    if (!(l.capacity > 0.0)) add(tag + ": capacity must be > 0");
    if (!(l.bpr_beta >= 1.0)) add(tag + ": bpr_beta must be >= 1");
    if (l.bpr_alpha < 0.0) add(tag + ": bpr_alpha must be >= 0");
  }

  std::set<OdPair> path_ods;
  for (const auto& p : net.paths) {
    const std::string tag = "path " + to_string(p.od);
    if (!path_ods.insert(p.od).second) add(tag + ": more than one path for this OD pair");
    const Zone* origin = net.find_zone(p.od.origin);
    const Zone* dest = net.find_zone(p.od.destination);
    if (!origin) add(tag + ": unknown origin zone");
    if (!dest) add(tag + ": unknown destination zone");
    if (p.links.empty()) {
      add(tag + ": empty link list");
      continue;
    }
    bool links_ok = true;
    std::set<int> seen;
    for (int id : p.links) {
      if (!net.find_link(id)) {
        add(tag + ": references missing link " + std::to_string(id));
        links_ok = false;
      } else if (!seen.insert(id).second) {
        add(tag + ": visits link " + std::to_string(id) + " twice");
        links_ok = false;
      }
    }
    if (!links_ok) continue;
    for (std::size_t k = 1; k < p.links.size(); ++k) {
      if (net.link(p.links[k - 1]).to_node != net.link(p.links[k]).from_node) {
        add(tag + ": links " + std::to_string(p.links[k - 1]) + " and " + std::to_string(p.links[k]) +
            " are not connected");
      }
    }
    if (origin && net.link(p.links.front()).from_node != origin->node)
      add(tag + ": does not start at the origin zone node");
    if (dest && net.link(p.links.back()).to_node != dest->node)
      add(tag + ": does not end at the destination zone node");
  }

  std::set<std::string> channel_names;
  for (const auto& d : net.detectors) {
    const std::string tag = "detector " + d.name;
    if (!channel_names.insert(d.name).second) add(tag + ": duplicate channel name");
    if (!net.find_link(d.link_id)) add(tag + ": references missing link " + std::to_string(d.link_id));
  }
  return report;
}

// Five-zone toy network.
//
// Nodes 1-5 carry the zones (1,2 residential; 3,4 work; 5 leisure). Node 6 is
// the residential hub and node 7 the business hub. Eight bidirectional links:
//
//   1: 1-6   2: 2-6   3: 3-4   4: 6-7 (detector, both directions)
//   5: 7-3   6: 7-4   7: 7-5   8: 5-6
//
// Commute trips in both directions use link 4. Work-to-leisure trips leave
// the business hub on link 7 and leisure-to-home trips return on link 8, so
// the leisure chain never crosses the detector. Link 3 carries no fixed route.
//
// Directed ids: label k has forward id 2k-1 (listed orientation) and reverse
// id 2k.
//
// Tunables: `bpr_alpha`, `bpr_beta`, `capacity`, `free_flow_time` (all links)
// and `capacity.<k>`, `free_flow_time.<k>`, `bpr_alpha.<k>`, `bpr_beta.<k>`
// (both directions of label k).
inline Network build_toy_network(const std::map<std::string, double>& overrides = {}) {
  struct Road {
    int label, a, b;
    double capacity;
  };
  const std::vector<Road> roads = {
      {1, 1, 6, 28000.0}, {2, 2, 6, 28000.0}, {3, 3, 4, 4000.0},  {4, 6, 7, 40000.0},
      {5, 7, 3, 24000.0}, {6, 7, 4, 24000.0}, {7, 7, 5, 12000.0}, {8, 5, 6, 16000.0},
  };
  const std::set<std::string> global_keys = {"bpr_alpha", "bpr_beta", "capacity", "free_flow_time"};

  Network net;
  net.zones = {{1, ZoneKind::residential, 1}, {2, ZoneKind::residential, 2}, {3, ZoneKind::work, 3},
               {4, ZoneKind::work, 4},        {5, ZoneKind::leisure, 5}};
  for (const auto& r : roads) {
    Link fwd{2 * r.label - 1, r.a, r.b, r.label, 10.0, r.capacity, 0.15, 4.0};
    Link rev{2 * r.label, r.b, r.a, r.label, 10.0, r.capacity, 0.15, 4.0};
    net.links.push_back(fwd);
    net.links.push_back(rev);
  }

  auto apply = [](Link& l, const std::string& field, double v) {
    if (field == "bpr_alpha") l.bpr_alpha = v;
    else if (field == "bpr_beta") l.bpr_beta = v;
    else if (field == "capacity") l.capacity = v;
    else if (field == "free_flow_time") l.free_flow_time = v;
  };
  // Global overrides first so that per-label ones win.
  for (const auto& [key, value] : overrides) {
    if (global_keys.count(key))
      for (auto& l : net.links) apply(l, key, value);
  }
  for (const auto& [key, value] : overrides) {
    if (global_keys.count(key)) continue;
    const auto dot = key.find('.');
    const std::string field = dot == std::string::npos ? key : key.substr(0, dot);
    if (dot == std::string::npos || !global_keys.count(field))
      throw ConfigError("toy network: unknown override '" + key + "'");
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(key.substr(dot + 1), &used);
      if (used != key.size() - dot - 1) throw std::invalid_argument(key);
    } catch (const std::exception&) {
      throw ConfigError("toy network: unknown override '" + key + "'");
    }
    if (label < 1 || label > 8) throw ConfigError("toy network: unknown override '" + key + "'");
    for (auto& l : net.links)
      if (l.label == label) apply(l, field, value);
  }

  auto fwd = [](int label) { return 2 * label - 1; };
  auto rev = [](int label) { return 2 * label; };
  const int home_access[] = {0, 1, 2};  // zone -> access road label
  const int work_access[] = {0, 0, 0, 5, 6};
  for (int home : {1, 2}) {
    for (int work : {3, 4}) {
      net.paths.push_back({{home, work}, {fwd(home_access[home]), fwd(4), fwd(work_access[work])}});
      net.paths.push_back({{work, home}, {rev(work_access[work]), rev(4), rev(home_access[home])}});
    }
  }
  for (int work : {3, 4}) net.paths.push_back({{work, 5}, {rev(work_access[work]), fwd(7)}});
  for (int home : {1, 2}) net.paths.push_back({{5, home}, {fwd(8), rev(home_access[home])}});

  net.detectors = {{"link4_6to7", fwd(4)}, {"link4_7to6", rev(4)}};
  return net;
}

}  // namespace chainod

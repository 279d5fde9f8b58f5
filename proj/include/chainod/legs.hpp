#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "chainod/errors.hpp"
#include "chainod/network.hpp"

namespace chainod {

// Ordered set of OD pairs; every OD-indexed vector in the library is aligned
// with one of these.
class OdIndex {
 public:
  OdIndex() = default;
  explicit OdIndex(std::vector<OdPair> pairs) {
    for (const auto& od : pairs) add(od);
  }

  std::size_t add(const OdPair& od) {
    if (auto i = find(od)) return *i;
    pairs_.push_back(od);
    return pairs_.size() - 1;
  }

  std::optional<std::size_t> find(const OdPair& od) const {
    for (std::size_t i = 0; i < pairs_.size(); ++i)
      if (pairs_[i] == od) return i;
    return std::nullopt;
  }

  std::size_t at(const OdPair& od) const {
    if (auto i = find(od)) return *i;
    throw ConfigError("OD pair " + to_string(od) + " is not indexed");
  }

  const OdPair& operator[](std::size_t i) const { return pairs_[i]; }
  std::size_t size() const { return pairs_.size(); }
  auto begin() const { return pairs_.begin(); }
  auto end() const { return pairs_.end(); }

 private:
  std::vector<OdPair> pairs_;
};

// Static purpose-specific demand matrix (one "leg" of a trip chain).
struct DemandLeg {
  std::string name;
  std::string purpose;
  Eigen::VectorXd od_flows;  // aligned with an OdIndex
  // OD pairs declared for this leg. Empty means "every pair with positive flow".
  std::vector<std::size_t> members;

  bool is_member(std::size_t i) const {
    if (members.empty()) return od_flows[static_cast<Eigen::Index>(i)] > 0.0;
    return std::find(members.begin(), members.end(), i) != members.end();
  }
};

// Which legs feed which. Root legs have no predecessors.
struct ChainSpec {
  std::vector<std::string> legs;
  std::map<std::string, std::vector<std::string>> feeds;

  const std::vector<std::string>& predecessors(const std::string& leg) const {
    static const std::vector<std::string> none;
    auto it = feeds.find(leg);
    return it == feeds.end() ? none : it->second;
  }

  bool is_root(const std::string& leg) const { return predecessors(leg).empty(); }

  // Kahn's algorithm, ties broken by declaration order. Throws on cycles or
  // unknown leg names.
  std::vector<std::string> topological_order() const {
    std::set<std::string> known(legs.begin(), legs.end());
    for (const auto& [leg, preds] : feeds) {
      if (!known.count(leg)) throw ChainError("chain: unknown leg '" + leg + "'");
      for (const auto& p : preds) {
        if (!known.count(p)) throw ChainError("chain: leg '" + leg + "' fed by unknown leg '" + p + "'");
        if (p == leg) throw ChainError("chain: leg '" + leg + "' feeds itself");
      }
    }
    std::vector<std::string> order;
    std::set<std::string> done;
    while (order.size() < legs.size()) {
      bool progressed = false;
      for (const auto& l : legs) {
        if (done.count(l)) continue;
        bool ready = true;
        for (const auto& p : predecessors(l)) ready = ready && done.count(p);
        if (ready) {
          order.push_back(l);
          done.insert(l);
          progressed = true;
        }
      }
      if (!progressed) throw ChainError("chain: feeds relation has a cycle");
    }
    return order;
  }
};

// Linear map from predecessor OD flows to the current leg's OD flows.
struct LegOperator {
  Eigen::MatrixXd matrix;
};

// Total demand arriving at each destination zone.
inline std::map<int, double> arrivals_by_zone(const DemandLeg& leg, const OdIndex& ods) {
  std::map<int, double> out;
  for (std::size_t i = 0; i < ods.size(); ++i) out[ods[i].destination] += leg.od_flows[static_cast<Eigen::Index>(i)];
  return out;
}

// Total demand leaving each origin zone.
inline std::map<int, double> departures_by_zone(const DemandLeg& leg, const OdIndex& ods) {
  std::map<int, double> out;
  for (std::size_t i = 0; i < ods.size(); ++i) out[ods[i].origin] += leg.od_flows[static_cast<Eigen::Index>(i)];
  return out;
}

// Share of each origin zone's outflow taken by each OD pair. Zones with no
// outflow get zero fractions.
inline Eigen::VectorXd leg_fractions(const DemandLeg& leg, const OdIndex& ods) {
  const auto totals = departures_by_zone(leg, ods);
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ods.size()));
  for (std::size_t i = 0; i < ods.size(); ++i) {
    const double g = totals.at(ods[i].origin);
    if (g > 0.0) d[static_cast<Eigen::Index>(i)] = leg.od_flows[static_cast<Eigen::Index>(i)] / g;
  }
  return d;
}

struct LegOperatorOptions {
  // Split each zone's arrivals evenly over the leg's OD pairs leaving it
  // instead of using the leg's own fractions.
  bool uniform_redistribution = false;
};

// Builds the destination-to-origin redistribution operator: column j (an OD
// pair ending in zone n) is spread over the current leg's OD pairs leaving n
// in proportion to their fractions. `current` supplies the fractions and
// `predecessors` decide which destination zones are actually chained.
//
// Throws ChainError when a predecessor delivers demand to a zone from which
// the current leg has no OD pair at all. A zone that has OD pairs but zero
// outflow is dropped and reported through `warnings`.
inline LegOperator build_leg_operator(const OdIndex& ods, const DemandLeg& current,
                                      std::span<const DemandLeg* const> predecessors,
                                      const LegOperatorOptions& options = {},
                                      std::vector<std::string>* warnings = nullptr) {
  const auto n = static_cast<Eigen::Index>(ods.size());
  if (current.od_flows.size() != n) throw ConfigError("build_leg_operator: leg dimension mismatch");

  std::set<int> chained_zones;
  for (const DemandLeg* pred : predecessors) {
    if (pred->od_flows.size() != n) throw ConfigError("build_leg_operator: predecessor dimension mismatch");
    for (Eigen::Index j = 0; j < n; ++j)
      if (pred->od_flows[j] > 0.0) chained_zones.insert(ods[static_cast<std::size_t>(j)].destination);
  }

  // Member OD pairs of the current leg grouped by origin, and the zones whose
  // members carry some flow.
  std::map<int, std::vector<Eigen::Index>> outgoing;
  std::set<int> flowing;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (!current.is_member(idx)) continue;
    outgoing[ods[idx].origin].push_back(i);
    if (current.od_flows[i] > 0.0) flowing.insert(ods[idx].origin);
  }

  Eigen::VectorXd fractions = leg_fractions(current, ods);
  if (options.uniform_redistribution) {
    fractions.setZero();
    for (const auto& [zone, members] : outgoing)
      for (auto i : members) fractions[i] = 1.0 / static_cast<double>(members.size());
  }

  for (int zone : chained_zones) {
    if (!outgoing.count(zone))
      throw ChainError("leg '" + current.name + "': zone " + std::to_string(zone) +
                       " receives chained demand but the leg has no OD pair leaving it");
    if (!flowing.count(zone) && !options.uniform_redistribution) {
      outgoing.erase(zone);
      if (warnings)
        warnings->push_back("leg '" + current.name + "': zone " + std::to_string(zone) +
                            " has zero outflow; dropped from redistribution");
    }
  }

  LegOperator op{Eigen::MatrixXd::Zero(n, n)};
  for (Eigen::Index j = 0; j < n; ++j) {
    const int zone = ods[static_cast<std::size_t>(j)].destination;
    if (!chained_zones.count(zone)) continue;
    auto it = outgoing.find(zone);
    if (it == outgoing.end()) continue;
    for (auto i : it->second) op.matrix(i, j) = fractions[i];
  }
  return op;
}

// Mean part of the leg transition: sum over feeding legs of L * deviation.
inline Eigen::VectorXd propagate_leg_deviation(const LegOperator& op, std::span<const Eigen::VectorXd> deviations) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(op.matrix.rows());
  for (const auto& d : deviations) {
    if (d.size() != op.matrix.cols()) throw ConfigError("propagate_leg_deviation: dimension mismatch");
    out.noalias() += op.matrix * d;
  }
  return out;
}

// Two home zones j, y commuting to one work zone k: the evening return flows
// implied by conservation and the historical evening split.
inline std::pair<double, double> two_od_closed_form(std::pair<double, double> morning,
                                                    std::pair<double, double> evening_fractions) {
  const auto [f_j, f_y] = evening_fractions;
  if (std::abs(f_j + f_y - 1.0) > 1e-12) throw DomainError("two_od_closed_form: fractions must sum to 1");
  if (morning.first < 0.0 || morning.second < 0.0) throw DomainError("two_od_closed_form: flows must be >= 0");
  const double arrivals = morning.first + morning.second;
  return {arrivals * f_j, arrivals * f_y};
}

}  // namespace chainod

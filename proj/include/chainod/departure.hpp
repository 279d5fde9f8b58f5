#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chainod/errors.hpp"
#include "chainod/network.hpp"

namespace chainod {

// Bottleneck-model schedule preferences plus the logit scale that turns
// disutility into departure-interval probabilities.
struct ScheduleParams {
  double alpha = 1.0;   // per minute of travel
  double beta = 0.5;    // per minute early
  double gamma = 2.0;   // per minute late
  double preferred_arrival = 510.0;  // minutes of day
  double logit_scale = 0.1;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
      throw ConfigError("schedule params: alpha, beta, gamma must be >= 0");
    if (!(logit_scale > 0.0)) throw ConfigError("schedule params: logit_scale must be > 0");
  }

  // Non-fatal: the usual ordering is beta < alpha < gamma.
  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (!(beta < alpha && alpha < gamma))
      out.push_back("schedule params: expected beta < alpha < gamma");
    return out;
  }
};

struct DepartureProfile {
  OdPair od;
  std::string purpose;
  std::vector<double> probs;
};

// Travel cost plus early/late schedule penalty for departing at the midpoint
// of interval h with travel time tt.
inline double schedule_disutility(int h, double tt, const ScheduleParams& params, const TimeGrid& grid) {
  if (!grid.contains(h)) throw std::out_of_range("schedule_disutility: interval out of range");
  if (!(tt >= 0.0)) throw DomainError("schedule_disutility: travel time must be >= 0");
  const double arrival = grid.midpoint(h) + tt;
  const double early = std::max(0.0, params.preferred_arrival - arrival);
  const double late = std::max(0.0, arrival - params.preferred_arrival);
  return params.alpha * tt + params.beta * early + params.gamma * late;
}

// Multinomial logit over departure intervals.
inline std::vector<double> departure_probabilities(const ScheduleParams& params, std::span<const double> tt_by_interval,
                                                   const TimeGrid& grid) {
  if (static_cast<int>(tt_by_interval.size()) != grid.n_intervals)
    throw ConfigError("departure_probabilities: travel-time vector length must equal n_intervals");

  const auto n = tt_by_interval.size();
  std::vector<double> utility(n);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < n; ++h) {
    utility[h] = params.logit_scale * schedule_disutility(static_cast<int>(h), tt_by_interval[h], params, grid);
    if (std::isnan(utility[h])) throw DomainError("departure_probabilities: NaN disutility");
    best = std::min(best, utility[h]);
  }
  if (!std::isfinite(best)) throw DomainError("departure_probabilities: degenerate profile, all disutilities infinite");

  std::vector<double> probs(n);
  double total = 0.0;
  for (std::size_t h = 0; h < n; ++h) {
    probs[h] = std::exp(-(utility[h] - best));
    total += probs[h];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

// One purpose-specific contribution to an OD pair: static demand and its
// departure profile.
struct LegShare {
  double demand = 0.0;
  std::span<const double> probs;
};

// Expected departures of one OD pair in interval h, summed over purposes.
inline double expected_od_flow(std::span<const LegShare> legs, int h) {
  if (legs.empty()) return 0.0;
  const auto n = legs.front().probs.size();
  double flow = 0.0;
  for (const auto& leg : legs) {
    if (leg.probs.size() != n) throw ConfigError("expected_od_flow: profiles do not share one time grid");
    if (leg.demand < 0.0) throw DomainError("expected_od_flow: demand must be >= 0");
    if (h < 0 || static_cast<std::size_t>(h) >= n) throw std::out_of_range("expected_od_flow: interval out of range");
    flow += leg.demand * leg.probs[h];
  }
  return flow;
}

}  // namespace chainod

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chainod/errors.hpp"
#include "chainod/legs.hpp"
#include "chainod/network.hpp"

namespace chainod {

// Departures per OD pair (rows) and interval (columns).
struct DynamicDemand {
  Eigen::MatrixXd x;
};

// Counts per detector channel (rows) and interval (columns).
struct LinkFlowSeries {
  Eigen::MatrixXd y;

  Eigen::MatrixXd cumulative() const {
    Eigen::MatrixXd c = y;
    for (Eigen::Index h = 1; h < c.cols(); ++h) c.col(h) += c.col(h - 1);
    return c;
  }
};

struct DetectorCounts {
  Eigen::MatrixXd per_interval;
  Eigen::MatrixXd cumulative;
};

inline DetectorCounts extract_detector_counts(const LinkFlowSeries& flows) {
  return {flows.y, flows.cumulative()};
}

// Output of one network loading pass.
//
// Every (OD, departure interval) cell is propagated as a packet whose
// departures are spread uniformly over the interval. `entry[i * n_h + k][pos]`
// is the time at which the leading edge of packet (i, k) enters the pos-th
// link of its path; the final element is the arrival time at the destination.
struct LoadResult {
  LinkFlowSeries counts;
  Eigen::MatrixXd od_travel_time;  // OD x interval, minutes
  Eigen::MatrixXd link_time;       // link x interval, minutes
  Eigen::MatrixXd link_inflow;     // link x interval, vehicles
  std::vector<std::vector<double>> entry;
};

namespace detail {

// Adds `mass` spread uniformly over [t, t + width) to the intervals of row.
template <typename Row>
void spread_window(const TimeGrid& grid, double t, double width, double mass, Row&& row) {
  if (mass == 0.0) return;
  const double lo = std::max(t, grid.start);
  const double hi = std::min(t + width, grid.end());
  if (hi <= lo) return;
  int h = static_cast<int>(std::floor((lo - grid.start) / grid.interval_length));
  h = std::clamp(h, 0, grid.n_intervals - 1);
  for (; h < grid.n_intervals; ++h) {
    const double a = std::max(lo, grid.interval_start(h));
    const double b = std::min(hi, grid.interval_start(h + 1));
    if (a >= hi) break;
    if (b > a) row[h] += mass * (b - a) / width;
  }
}

}  // namespace detail

// Quasi-dynamic loader over fixed paths: time-dependent propagation with BPR
// link times, no queues, no spillback. Links are processed in the order of
// the link-succession graph induced by the paths, so each link's inflow is
// complete before its travel times are evaluated; the graph must be acyclic.
//
// The loader counts its invocations so callers can assert that a piece of
// code ran no simulation.
class NetworkLoader {
 public:
  NetworkLoader(Network net, TimeGrid grid, OdIndex ods)
      : net_(std::move(net)), grid_(grid), ods_(std::move(ods)) {
    grid_.validate();
    for (std::size_t i = 0; i < ods_.size(); ++i) {
      const Path* p = net_.find_path(ods_[i]);
      std::vector<std::size_t> idx;
      if (p)
        for (int id : p->links) idx.push_back(net_.link_index(id));
      path_links_.push_back(std::move(idx));
    }
    for (const auto& d : net_.detectors) channel_links_.push_back(net_.link_index(d.link_id));
    order_links();
  }

  NetworkLoader(const NetworkLoader& other)
      : net_(other.net_), grid_(other.grid_), ods_(other.ods_), path_links_(other.path_links_),
        channel_links_(other.channel_links_), link_order_(other.link_order_), calls_(0) {}

  const Network& network() const { return net_; }
  const TimeGrid& grid() const { return grid_; }
  const OdIndex& ods() const { return ods_; }
  std::size_t calls() const { return calls_.load(); }
  bool has_path(std::size_t od) const { return !path_links_[od].empty(); }

  // Loads `demand`, computing link times from BPR on each interval's inflow.
  LoadResult load(const DynamicDemand& demand) const { return run(demand, nullptr); }

  // Loads `demand` with link times held at `link_time` (link x interval).
  LoadResult load_frozen(const DynamicDemand& demand, const Eigen::MatrixXd& link_time) const {
    if (link_time.rows() != static_cast<Eigen::Index>(net_.links.size()) || link_time.cols() != grid_.n_intervals)
      throw ConfigError("load_frozen: link time matrix has the wrong shape");
    return run(demand, &link_time);
  }

 private:
  void order_links() {
    const std::size_t n = net_.links.size();
    std::vector<std::set<std::size_t>> next(n);
    std::vector<int> indegree(n, 0);
    for (const auto& path : path_links_)
      for (std::size_t k = 1; k < path.size(); ++k)
        if (next[path[k - 1]].insert(path[k]).second) ++indegree[path[k]];
    for (std::size_t l = 0; l < n; ++l)
      if (indegree[l] == 0) link_order_.push_back(l);
    for (std::size_t q = 0; q < link_order_.size(); ++q)
      for (std::size_t m : next[link_order_[q]])
        if (--indegree[m] == 0) link_order_.push_back(m);
    if (link_order_.size() != n)
      throw ConfigError("loader: the link-succession graph of the paths has a cycle");
  }

  LoadResult run(const DynamicDemand& demand, const Eigen::MatrixXd* frozen) const {
    ++calls_;
    const auto n_od = static_cast<Eigen::Index>(ods_.size());
    const int n_h = grid_.n_intervals;
    const double width = grid_.interval_length;
    if (demand.x.rows() != n_od || demand.x.cols() != n_h)
      throw ConfigError("load_network: demand matrix must be n_od x n_intervals");
    for (Eigen::Index i = 0; i < n_od; ++i) {
      if (!has_path(static_cast<std::size_t>(i)) && (demand.x.row(i).array() != 0.0).any())
        throw ConfigError("load_network: demand on OD " + to_string(ods_[static_cast<std::size_t>(i)]) +
                          " which has no path");
      if ((demand.x.row(i).array() < 0.0).any()) throw DomainError("load_network: negative demand");
    }

    const auto n_links = static_cast<Eigen::Index>(net_.links.size());
    LoadResult out;
    out.link_time = Eigen::MatrixXd::Zero(n_links, n_h);
    out.link_inflow = Eigen::MatrixXd::Zero(n_links, n_h);
    out.od_travel_time = Eigen::MatrixXd::Zero(n_od, n_h);
    out.entry.assign(static_cast<std::size_t>(n_od * n_h), {});

    // (packet, position) pairs touching each link.
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> users(net_.links.size());
    for (Eigen::Index i = 0; i < n_od; ++i) {
      const auto& path = path_links_[static_cast<std::size_t>(i)];
      if (path.empty()) continue;
      for (int k = 0; k < n_h; ++k) {
        const auto p = static_cast<std::size_t>(i * n_h + k);
        out.entry[p].assign(path.size() + 1, 0.0);
        out.entry[p][0] = grid_.interval_start(k);
        for (std::size_t pos = 0; pos < path.size(); ++pos) users[path[pos]].push_back({p, pos});
      }
    }

    for (std::size_t l : link_order_) {
      const Link& link = net_.links[l];
      auto inflow = out.link_inflow.row(static_cast<Eigen::Index>(l));
      for (const auto& [p, pos] : users[l]) {
        const double mass = demand.x(static_cast<Eigen::Index>(p) / n_h, static_cast<Eigen::Index>(p) % n_h);
        detail::spread_window(grid_, out.entry[p][pos], width, mass, inflow);
      }
      for (int h = 0; h < n_h; ++h) {
        out.link_time(static_cast<Eigen::Index>(l), h) =
            frozen ? (*frozen)(static_cast<Eigen::Index>(l), h) : bpr_travel_time(link, inflow[h] * 60.0 / width);
      }
      for (const auto& [p, pos] : users[l]) {
        const double mid = out.entry[p][pos] + 0.5 * width;
        const auto h = grid_.index_of(mid);
        double tau = 0.0;
        if (h) tau = out.link_time(static_cast<Eigen::Index>(l), *h);
        else tau = frozen ? link.free_flow_time : bpr_travel_time(link, 0.0);
        out.entry[p][pos + 1] = out.entry[p][pos] + tau;
      }
    }

    for (Eigen::Index i = 0; i < n_od; ++i) {
      if (path_links_[static_cast<std::size_t>(i)].empty()) continue;
      for (int k = 0; k < n_h; ++k) {
        const auto& e = out.entry[static_cast<std::size_t>(i * n_h + k)];
        out.od_travel_time(i, k) = e.back() - e.front();
      }
    }

    out.counts.y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(channel_links_.size()), n_h);
    for (std::size_t c = 0; c < channel_links_.size(); ++c)
      out.counts.y.row(static_cast<Eigen::Index>(c)) = out.link_inflow.row(static_cast<Eigen::Index>(channel_links_[c]));
    return out;
  }

  friend class AssignmentMatrix;

  Network net_;
  TimeGrid grid_;
  OdIndex ods_;
  std::vector<std::vector<std::size_t>> path_links_;
  std::vector<std::size_t> channel_links_;
  std::vector<std::size_t> link_order_;
  mutable std::atomic<std::size_t> calls_{0};
};

inline LoadResult load_network(const Network& net, const TimeGrid& grid, const OdIndex& ods, const DynamicDemand& demand) {
  return NetworkLoader(net, grid, ods).load(demand);
}

// Linear map from departures to detector counts, linearised around one load:
// block(k, h)(c, i) is the share of OD i's interval-k departures counted on
// channel c during interval h.
class AssignmentMatrix {
 public:
  AssignmentMatrix() = default;

  AssignmentMatrix(const NetworkLoader& loader, const LoadResult& load) {
    if (load.entry.empty()) throw StateError("assignment_matrix: no completed load to linearise around");
    const TimeGrid& grid = loader.grid();
    n_h_ = grid.n_intervals;
    n_od_ = static_cast<Eigen::Index>(loader.ods().size());
    n_ch_ = static_cast<Eigen::Index>(loader.channel_links_.size());
    const double width = grid.interval_length;

    // Per (k, channel, od): the counted share by count interval.
    struct Entry {
      int k, h;
      Eigen::Index c, i;
      double v;
    };
    std::vector<Entry> entries;
    max_lag_ = 0;
    Eigen::RowVectorXd row(n_h_);
    for (Eigen::Index i = 0; i < n_od_; ++i) {
      const auto& path = loader.path_links_[static_cast<std::size_t>(i)];
      if (path.empty()) continue;
      for (Eigen::Index c = 0; c < n_ch_; ++c) {
        const std::size_t link = loader.channel_links_[static_cast<std::size_t>(c)];
        auto it = std::find(path.begin(), path.end(), link);
        if (it == path.end()) continue;
        const auto pos = static_cast<std::size_t>(it - path.begin());
        for (int k = 0; k < n_h_; ++k) {
          row.setZero();
          detail::spread_window(grid, load.entry[static_cast<std::size_t>(i * n_h_ + k)][pos], width, 1.0, row);
          for (int h = 0; h < n_h_; ++h) {
            if (row[h] == 0.0) continue;
            if (h < k) throw StateError("assignment_matrix: count precedes departure");
            entries.push_back({k, h, c, i, row[h]});
            max_lag_ = std::max(max_lag_, h - k);
          }
        }
      }
    }
    blocks_.assign(static_cast<std::size_t>(n_h_) * static_cast<std::size_t>(max_lag_ + 1),
                   Eigen::MatrixXd::Zero(n_ch_, n_od_));
    for (const auto& e : entries) blocks_[index(e.k, e.h)](e.c, e.i) = e.v;
    zero_ = Eigen::MatrixXd::Zero(n_ch_, n_od_);
  }

  // Direct construction from blocks, block(k, k + d) = blocks[k][d].
  AssignmentMatrix(int n_intervals, std::vector<std::vector<Eigen::MatrixXd>> by_departure) {
    n_h_ = n_intervals;
    if (static_cast<int>(by_departure.size()) != n_h_) throw ConfigError("assignment matrix: one block list per interval");
    max_lag_ = 0;
    for (const auto& v : by_departure) max_lag_ = std::max(max_lag_, static_cast<int>(v.size()) - 1);
    n_ch_ = by_departure.front().front().rows();
    n_od_ = by_departure.front().front().cols();
    zero_ = Eigen::MatrixXd::Zero(n_ch_, n_od_);
    blocks_.assign(static_cast<std::size_t>(n_h_) * static_cast<std::size_t>(max_lag_ + 1), zero_);
    for (int k = 0; k < n_h_; ++k)
      for (std::size_t d = 0; d < by_departure[static_cast<std::size_t>(k)].size(); ++d)
        if (k + static_cast<int>(d) < n_h_) blocks_[index(k, k + static_cast<int>(d))] = by_departure[static_cast<std::size_t>(k)][d];
  }

  int n_intervals() const { return n_h_; }
  Eigen::Index n_channels() const { return n_ch_; }
  Eigen::Index n_od() const { return n_od_; }
  int max_lag() const { return max_lag_; }

  const Eigen::MatrixXd& block(int k, int h) const {
    if (k < 0 || h < k || h - k > max_lag_ || k >= n_h_ || h >= n_h_) return zero_;
    return blocks_[index(k, h)];
  }

  LinkFlowSeries apply(const DynamicDemand& demand) const {
    LinkFlowSeries out{Eigen::MatrixXd::Zero(n_ch_, n_h_)};
    for (int h = 0; h < n_h_; ++h)
      for (int k = std::max(0, h - max_lag_); k <= h; ++k) out.y.col(h).noalias() += block(k, h) * demand.x.col(k);
    return out;
  }

  // CSV dump: k,h,channel,od,value for every nonzero entry.
  void write_csv(std::ostream& os) const {
    os << "k,h,channel,od,value\n";
    for (int k = 0; k < n_h_; ++k)
      for (int h = k; h <= std::min(n_h_ - 1, k + max_lag_); ++h) {
        const auto& b = block(k, h);
        for (Eigen::Index c = 0; c < b.rows(); ++c)
          for (Eigen::Index i = 0; i < b.cols(); ++i)
            if (b(c, i) != 0.0) os << k << ',' << h << ',' << c << ',' << i << ',' << b(c, i) << '\n';
      }
  }

 private:
  std::size_t index(int k, int h) const {
    return static_cast<std::size_t>(k) * static_cast<std::size_t>(max_lag_ + 1) + static_cast<std::size_t>(h - k);
  }

  int n_h_ = 0;
  Eigen::Index n_od_ = 0;
  Eigen::Index n_ch_ = 0;
  int max_lag_ = 0;
  std::vector<Eigen::MatrixXd> blocks_;
  Eigen::MatrixXd zero_;
};

inline AssignmentMatrix assignment_matrix(const NetworkLoader& loader, const LoadResult& load) {
  return AssignmentMatrix(loader, load);
}

// Map from a leg's total-demand deviation to the cumulative detector-count
// deviation at `horizon`: per departure interval k,
//   per_departure[k] = (sum_{h=k..horizon} H_k^h) * diag(P_k)
// where P_k holds the leg's departure probability of every OD pair.
struct CumulativeMapping {
  int horizon = 0;
  std::vector<Eigen::MatrixXd> per_departure;

  Eigen::MatrixXd total() const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(per_departure.front().rows(), per_departure.front().cols());
    for (const auto& a : per_departure) out += a;
    return out;
  }
};

// `profiles` is n_od x n_intervals (one leg's departure probabilities).
inline CumulativeMapping cumulative_mapping(const AssignmentMatrix& H, const Eigen::MatrixXd& profiles, int horizon) {
  if (profiles.rows() != H.n_od() || profiles.cols() != H.n_intervals())
    throw ConfigError("cumulative_mapping: profile matrix does not match the assignment grid");
  if (horizon < 0 || horizon >= H.n_intervals()) throw ConfigError("cumulative_mapping: horizon outside the grid");
  CumulativeMapping out;
  out.horizon = horizon;
  for (int k = 0; k <= horizon; ++k) {
    Eigen::MatrixXd summed = Eigen::MatrixXd::Zero(H.n_channels(), H.n_od());
    for (int h = k; h <= horizon; ++h) summed += H.block(k, h);
    out.per_departure.push_back(summed * profiles.col(k).asDiagonal());
  }
  return out;
}

}  // namespace chainod

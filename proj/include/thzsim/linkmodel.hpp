#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "thzsim/channel.hpp"
#include "thzsim/topology.hpp"

namespace thz {

/// Binary comm (U x M) and sense (U x N) association matrices, row-major.
/// Any 0/1 content is representable; validate_assignment() checks the
/// one-server-per-request constraints.
class Assignment {
 public:
  Assignment() = default;
  Assignment(int num_spv, int num_comm, int num_sense);

  /// Builds the matrices from per-request server indices.
  static Assignment from_servers(int num_spv, std::span<const int> comm_server, std::span<const int> sense_server);

  int num_spv() const { return U_; }
  int num_comm() const { return M_; }
  int num_sense() const { return N_; }

  std::uint8_t& comm_link(int u, int m) { return comm_link_[static_cast<std::size_t>(u) * M_ + m]; }
  std::uint8_t comm_link(int u, int m) const { return comm_link_[static_cast<std::size_t>(u) * M_ + m]; }
  std::uint8_t& sense_link(int u, int n) { return sense_link_[static_cast<std::size_t>(u) * N_ + n]; }
  std::uint8_t sense_link(int u, int n) const { return sense_link_[static_cast<std::size_t>(u) * N_ + n]; }

  /// Server index per comm/sense request, or -1 when the column is not one-hot.
  std::vector<int> comm_servers() const;
  std::vector<int> sense_servers() const;

  friend bool operator==(const Assignment&, const Assignment&) = default;

 private:
  int U_ = 0, M_ = 0, N_ = 0;
  std::vector<std::uint8_t> comm_link_;
  std::vector<std::uint8_t> sense_link_;
};

struct AssignmentViolation {
  char matrix;  // 'a' for comm, 'b' for sense
  int column;
  int column_sum;
};

/// Empty when every column of both matrices sums to exactly one.
std::vector<AssignmentViolation> validate_assignment(const Assignment& a);

struct CommLink {
  int u, m;
  double signal, interference, noise, sinr, rate;
  bool served;
};

struct SenseLink {
  int u, n;
  double signal, interference, noise, sinr;
  bool served;
};

struct LinkReport {
  std::vector<CommLink> comm;
  std::vector<SenseLink> sense;
  int served_comm = 0;
  int served_sense = 0;

  int objective() const { return served_comm + served_sense; }
};

nlohmann::json to_json(const LinkReport& r);

/// Per-term decomposition of the comm interference at (u,m).
struct CommInterferenceTerms {
  double other_comm = 0.0;
  double other_sense = 0.0;
  double own_sense = 0.0;
  double total() const { return other_comm + other_sense + own_sense; }
};

/// Per-term decomposition of the sensing interference at (u,n).
struct SenseInterferenceTerms {
  double direct_comm = 0.0;
  double direct_sense = 0.0;
  double scattered_comm = 0.0;
  double scattered_sense = 0.0;
  double total() const { return direct_comm + direct_sense + scattered_comm + scattered_sense; }
};

/// Precomputes every assignment-independent quantity of one topology
/// (distances, blockage, path gains, beam tables, noise) so the
/// assignment-dependent interference and SINR reduce to table lookups.
class LinkEvaluator {
 public:
  LinkEvaluator(const Topology& topo, const ChannelConfig& cfg);

  int num_spv() const { return U_; }
  int num_comm() const { return M_; }
  int num_sense() const { return N_; }
  const Topology& topology() const { return *topo_; }
  const ChannelConfig& config() const { return cfg_; }

  bool active(int u) const { return active_[u] != 0; }
  bool los_comm(int u, int m) const { return rho_c_[idx_c(u, m)] != 0; }
  bool los_sense(int u, int n) const { return rho_s_[idx_s(u, n)] != 0; }
  bool los_spv(int i, int u) const { return rho_uu_[static_cast<std::size_t>(i) * U_ + u] != 0; }
  double dist_comm(int u, int m) const { return d_c_[idx_c(u, m)]; }
  double dist_sense(int u, int n) const { return d_s_[idx_s(u, n)]; }

  /// Comm signal power with both beams aligned (zero when inactive or blocked).
  double comm_signal(int u, int m) const { return sig_c_[idx_c(u, m)]; }
  /// Echo power from transmit and receive gains, radar spreading and absorption, gated by activity and LoS.
  double sense_signal(int u, int n) const { return sig_s_[idx_s(u, n)]; }
  double comm_noise(int u, int m) const { return eps_c_[idx_c(u, m)]; }
  double sense_noise(int u, int n) const { return eps_s_[idx_s(u, n)]; }

  CommInterferenceTerms comm_interference_terms(int u, int m, const Assignment& a) const;
  SenseInterferenceTerms sensing_interference_terms(int u, int n, const Assignment& a) const;
  double comm_interference(int u, int m, const Assignment& a) const;
  double sensing_interference(int u, int n, const Assignment& a) const;

  double comm_sinr(int u, int m, const Assignment& a) const;
  double sensing_sinr(int u, int n, const Assignment& a) const;
  double data_rate(int u, int m, const Assignment& a) const;

  LinkReport report(const Assignment& a, const ServiceRequirements& req) const;

  /// |B| + |O| for a valid assignment given as per-request server indices.
  /// Used by the solvers; equal to report(...).objective().
  int objective_fast(std::span<const int> comm_server, std::span<const int> sense_server,
                     const ServiceRequirements& req) const;

  struct FastScore {
    int objective;
    double quality;  // sum over all columns of log2(1 + SINR)
  };
  FastScore score_fast(std::span<const int> comm_server, std::span<const int> sense_server,
                       const ServiceRequirements& req) const;

  /// SINR of comm link (u,m) given server vectors; entries < 0 are
  /// unassigned and contribute no interference.
  double comm_sinr_partial(int m, std::span<const int> comm_server, std::span<const int> sense_server) const;
  double sense_sinr_partial(int n, std::span<const int> comm_server, std::span<const int> sense_server) const;

 private:
  std::size_t idx_c(int u, int m) const { return static_cast<std::size_t>(u) * M_ + m; }
  std::size_t idx_s(int u, int n) const { return static_cast<std::size_t>(u) * N_ + n; }

  // Point table: comm vehicles [0,M), sense vehicles [M,M+N), SPVs [M+N, M+N+U).
  int pt_comm(int m) const { return m; }
  int pt_sense(int n) const { return M_ + n; }
  int pt_spv(int u) const { return M_ + N_ + u; }
  // Gain of SPV i's beam steered at point `aim`, evaluated toward point `to`.
  double tx_gain(int i, int aim, int to) const {
    return tx_gain_[(static_cast<std::size_t>(i) * P_ + aim) * P_ + to];
  }
  // Transmit power over absorption and free-space loss between SPV i and point p.
  double path(int i, int p) const { return path_[static_cast<std::size_t>(i) * P_ + p]; }
  bool los(int i, int p) const { return los_[static_cast<std::size_t>(i) * P_ + p] != 0; }

  double comm_interference_sv(int u, int m, std::span<const int> cs, std::span<const int> ss) const;
  double sense_interference_sv(int u, int n, std::span<const int> cs, std::span<const int> ss) const;

  const Topology* topo_;
  ChannelConfig cfg_;
  int U_, M_, N_, P_;
  double g_main_, g_side_;
  std::vector<std::uint8_t> active_;
  std::vector<std::uint8_t> rho_c_, rho_s_, rho_uu_, los_;
  std::vector<double> d_c_, d_s_, sig_c_, sig_s_, eps_c_, eps_s_;
  std::vector<double> tx_gain_, path_;
  // comm receiver m steered at SPV u, toward SPV i: [m][u][i]
  std::vector<double> rx_comm_;
  // SPV u receiving the echo of n, steered at n, toward SPV i: [u][n][i]
  std::vector<double> rx_sense_;
  // scattered-path kernel (rcs c^2 over spreading and absorption on both legs) without power and gains: [i][n][u]
  std::vector<double> scatter_;
};

/// Boundary-inclusive delay test Q / rate <= d_max; zero rate never serves.
bool comm_requirement_met(double rate, double demand_bits, double d_max);

/// B log2(1 + sinr).
double shannon_rate(double sinr, double bandwidth);

}  // namespace thz

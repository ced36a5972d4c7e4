#include "thzsim/linkmodel.hpp"

#include <cmath>

namespace thz {

Assignment::Assignment(int num_spv, int num_comm, int num_sense)
    : U_(num_spv), M_(num_comm), N_(num_sense),
      comm_link_(static_cast<std::size_t>(num_spv) * num_comm, 0),
      sense_link_(static_cast<std::size_t>(num_spv) * num_sense, 0) {
  if (num_spv < 0 || num_comm < 0 || num_sense < 0) throw Error("assignment dimensions must be non-negative");
}

Assignment Assignment::from_servers(int num_spv, std::span<const int> comm_server,
                                    std::span<const int> sense_server) {
  Assignment a(num_spv, static_cast<int>(comm_server.size()), static_cast<int>(sense_server.size()));
  for (int m = 0; m < a.M_; ++m) {
    if (comm_server[m] < 0 || comm_server[m] >= num_spv) throw Error("comm server index out of range");
    a.comm_link(comm_server[m], m) = 1;
  }
  for (int n = 0; n < a.N_; ++n) {
    if (sense_server[n] < 0 || sense_server[n] >= num_spv) throw Error("sense server index out of range");
    a.sense_link(sense_server[n], n) = 1;
  }
  return a;
}

namespace {

template <typename Get>
std::vector<int> one_hot_rows(int rows, int cols, Get get) {
  std::vector<int> out(cols, -1);
  for (int c = 0; c < cols; ++c) {
    int count = 0;
    for (int r = 0; r < rows; ++r) {
      if (get(r, c)) {
        ++count;
        out[c] = r;
      }
    }
    if (count != 1) out[c] = -1;
  }
  return out;
}

}  // namespace

std::vector<int> Assignment::comm_servers() const {
  return one_hot_rows(U_, M_, [this](int r, int c) { return comm_link(r, c) != 0; });
}

std::vector<int> Assignment::sense_servers() const {
  return one_hot_rows(U_, N_, [this](int r, int c) { return sense_link(r, c) != 0; });
}

std::vector<AssignmentViolation> validate_assignment(const Assignment& a) {
  std::vector<AssignmentViolation> out;
  for (int m = 0; m < a.num_comm(); ++m) {
    int s = 0;
    for (int u = 0; u < a.num_spv(); ++u) s += a.comm_link(u, m);
    if (s != 1) out.push_back({'a', m, s});
  }
  for (int n = 0; n < a.num_sense(); ++n) {
    int s = 0;
    for (int u = 0; u < a.num_spv(); ++u) s += a.sense_link(u, n);
    if (s != 1) out.push_back({'b', n, s});
  }
  return out;
}

bool comm_requirement_met(double rate, double demand_bits, double d_max) {
  if (!(rate > 0)) return demand_bits <= 0;
  return demand_bits / rate <= d_max * (1.0 + 1e-12);
}

double shannon_rate(double sinr, double bandwidth) { return bandwidth * std::log2(1.0 + sinr); }

LinkEvaluator::LinkEvaluator(const Topology& topo, const ChannelConfig& cfg)
    : topo_(&topo), cfg_(cfg), U_(topo.num_spv()), M_(topo.num_comm()), N_(topo.num_sense()) {
  P_ = M_ + N_ + U_;
  g_main_ = main_lobe_gain(cfg_);
  g_side_ = side_lobe_gain(cfg_);

  std::vector<Point2D> pts(P_);
  for (int m = 0; m < M_; ++m) pts[pt_comm(m)] = topo.comm[m].pos;
  for (int n = 0; n < N_; ++n) pts[pt_sense(n)] = topo.sense[n].pos;
  for (int u = 0; u < U_; ++u) pts[pt_spv(u)] = topo.spvs[u].pos;

  active_.resize(U_);
  for (int u = 0; u < U_; ++u) active_[u] = topo.spvs[u].active ? 1 : 0;

  const auto PP = static_cast<std::size_t>(P_);
  path_.assign(static_cast<std::size_t>(U_) * PP, 0.0);
  los_.assign(static_cast<std::size_t>(U_) * PP, 0);
  std::vector<double> dist(static_cast<std::size_t>(U_) * PP, 0.0);
  for (int i = 0; i < U_; ++i) {
    const Point2D pi = pts[pt_spv(i)];
    for (int p = 0; p < P_; ++p) {
      if (p == pt_spv(i)) continue;
      const double d = distance(pi, pts[p]);
      const std::size_t k = static_cast<std::size_t>(i) * PP + p;
      dist[k] = d;
      path_[k] = cfg_.tx_power / (absorption_gain(d, cfg_) * free_space_gain(d, cfg_));
      los_[k] = static_cast<std::uint8_t>(blockage_indicator(pi, pts[p], topo.obstacles));
    }
  }

  tx_gain_.assign(static_cast<std::size_t>(U_) * PP * PP, g_side_);
  for (int i = 0; i < U_; ++i) {
    const Point2D pi = pts[pt_spv(i)];
    for (int aim = 0; aim < P_; ++aim) {
      if (aim == pt_spv(i)) continue;
      for (int to = 0; to < P_; ++to) {
        if (to == pt_spv(i)) continue;
        tx_gain_[(static_cast<std::size_t>(i) * PP + aim) * PP + to] = steered_gain(pi, pts[aim], pts[to], cfg_);
      }
    }
  }

  rho_c_.resize(static_cast<std::size_t>(U_) * M_);
  d_c_.resize(rho_c_.size());
  sig_c_.resize(rho_c_.size());
  eps_c_.resize(rho_c_.size());
  rho_s_.resize(static_cast<std::size_t>(U_) * N_);
  d_s_.resize(rho_s_.size());
  sig_s_.resize(rho_s_.size());
  eps_s_.resize(rho_s_.size());
  rho_uu_.assign(static_cast<std::size_t>(U_) * U_, 0);

  for (int u = 0; u < U_; ++u) {
    for (int m = 0; m < M_; ++m) {
      const std::size_t k = idx_c(u, m);
      rho_c_[k] = los(u, pt_comm(m)) ? 1 : 0;
      d_c_[k] = dist[static_cast<std::size_t>(u) * PP + pt_comm(m)];
      sig_c_[k] = (active(u) && rho_c_[k]) ? path(u, pt_comm(m)) * g_main_ * g_main_ : 0.0;
      eps_c_[k] = noise_power(topo, u, m, cfg_);
    }
    for (int n = 0; n < N_; ++n) {
      const std::size_t k = idx_s(u, n);
      rho_s_[k] = los(u, pt_sense(n)) ? 1 : 0;
      const double d = dist[static_cast<std::size_t>(u) * PP + pt_sense(n)];
      d_s_[k] = d;
      sig_s_[k] = (active(u) && rho_s_[k])
                      ? cfg_.tx_power * g_main_ * g_main_ / (sensing_spreading_loss(d, cfg_) * absorption_gain(d, cfg_))
                      : 0.0;
      eps_s_[k] = sensing_noise_power(topo, u, n, cfg_);
    }
    for (int i = 0; i < U_; ++i) {
      if (i != u) rho_uu_[static_cast<std::size_t>(i) * U_ + u] = los(i, pt_spv(u)) ? 1 : 0;
    }
  }

  rx_comm_.assign(static_cast<std::size_t>(M_) * U_ * U_, g_side_);
  for (int m = 0; m < M_; ++m) {
    for (int u = 0; u < U_; ++u) {
      for (int i = 0; i < U_; ++i) {
        rx_comm_[(static_cast<std::size_t>(m) * U_ + u) * U_ + i] =
            steered_gain(pts[pt_comm(m)], pts[pt_spv(u)], pts[pt_spv(i)], cfg_);
      }
    }
  }
  rx_sense_.assign(static_cast<std::size_t>(U_) * N_ * U_, g_side_);
  scatter_.assign(static_cast<std::size_t>(U_) * N_ * U_, 0.0);
  const double fourpi3 = std::pow(4.0 * std::numbers::pi, 3);
  for (int u = 0; u < U_; ++u) {
    for (int n = 0; n < N_; ++n) {
      for (int i = 0; i < U_; ++i) {
        if (i != u) {
          rx_sense_[(static_cast<std::size_t>(u) * N_ + n) * U_ + i] =
              steered_gain(pts[pt_spv(u)], pts[pt_sense(n)], pts[pt_spv(i)], cfg_);
        }
        const double d_src_target = dist[static_cast<std::size_t>(i) * PP + pt_sense(n)];
        const double d_target_rx = dist[static_cast<std::size_t>(u) * PP + pt_sense(n)];
        scatter_[(static_cast<std::size_t>(i) * N_ + n) * U_ + u] =
            cfg_.rcs * cfg_.c * cfg_.c /
            (fourpi3 * cfg_.f * cfg_.f * d_src_target * d_src_target * d_target_rx * d_target_rx * absorption_gain(d_src_target, cfg_) *
             absorption_gain(d_target_rx, cfg_));
      }
    }
  }
}

CommInterferenceTerms LinkEvaluator::comm_interference_terms(int u, int m, const Assignment& a) const {
  CommInterferenceTerms t;
  const int to = pt_comm(m);
  for (int i = 0; i < U_; ++i) {
    if (i == u || !active(i) || !los(i, to)) continue;
    const double base = path(i, to) * rx_comm_[(static_cast<std::size_t>(m) * U_ + u) * U_ + i];
    for (int mp = 0; mp < M_; ++mp) {
      if (a.comm_link(i, mp) && los_comm(i, mp)) t.other_comm += tx_gain(i, pt_comm(mp), to) * base;
    }
    for (int np = 0; np < N_; ++np) {
      if (a.sense_link(i, np) && los_sense(i, np)) t.other_sense += tx_gain(i, pt_sense(np), to) * base;
    }
  }
  if (active(u) && los_comm(u, m)) {
    const double base = path(u, to) * g_main_;
    for (int np = 0; np < N_; ++np) {
      if (a.sense_link(u, np) && los_sense(u, np)) t.own_sense += tx_gain(u, pt_sense(np), to) * base;
    }
  }
  return t;
}

SenseInterferenceTerms LinkEvaluator::sensing_interference_terms(int u, int n, const Assignment& a) const {
  SenseInterferenceTerms t;
  const int at_u = pt_spv(u);
  const int at_n = pt_sense(n);
  for (int i = 0; i < U_; ++i) {
    if (i == u || !active(i)) continue;
    if (los(i, at_u)) {
      const double base = path(i, at_u) * rx_sense_[(static_cast<std::size_t>(u) * N_ + n) * U_ + i];
      for (int mp = 0; mp < M_; ++mp) {
        if (a.comm_link(i, mp) && los_comm(i, mp)) t.direct_comm += tx_gain(i, pt_comm(mp), at_u) * base;
      }
      for (int np = 0; np < N_; ++np) {
        if (a.sense_link(i, np) && los_sense(i, np)) t.direct_sense += tx_gain(i, pt_sense(np), at_u) * base;
      }
    }
    if (los(i, at_n)) {
      const double base =
          cfg_.tx_power * g_main_ * scatter_[(static_cast<std::size_t>(i) * N_ + n) * U_ + u];
      for (int mp = 0; mp < M_; ++mp) {
        if (a.comm_link(i, mp) && los_comm(i, mp)) t.scattered_comm += tx_gain(i, pt_comm(mp), at_n) * base;
      }
      for (int np = 0; np < N_; ++np) {
        if (a.sense_link(i, np) && los_sense(i, np)) t.scattered_sense += tx_gain(i, pt_sense(np), at_n) * base;
      }
    }
  }
  return t;
}

double LinkEvaluator::comm_interference(int u, int m, const Assignment& a) const {
  return comm_interference_terms(u, m, a).total();
}

double LinkEvaluator::sensing_interference(int u, int n, const Assignment& a) const {
  return sensing_interference_terms(u, n, a).total();
}

double LinkEvaluator::comm_sinr(int u, int m, const Assignment& a) const {
  const double s = comm_signal(u, m);
  if (s == 0.0) return 0.0;
  return s / (comm_interference(u, m, a) + comm_noise(u, m));
}

double LinkEvaluator::sensing_sinr(int u, int n, const Assignment& a) const {
  const double s = sense_signal(u, n);
  if (s == 0.0) return 0.0;
  return s / (sensing_interference(u, n, a) + sense_noise(u, n));
}

double LinkEvaluator::data_rate(int u, int m, const Assignment& a) const {
  return shannon_rate(comm_sinr(u, m, a), cfg_.bandwidth);
}

LinkReport LinkEvaluator::report(const Assignment& a, const ServiceRequirements& req) const {
  LinkReport r;
  const double sinr_min = req.sinr_min_linear();
  for (int m = 0; m < M_; ++m) {
    double rate_sum = 0.0;
    const std::size_t first = r.comm.size();
    for (int u = 0; u < U_; ++u) {
      if (!a.comm_link(u, m)) continue;
      CommLink l{u, m, comm_signal(u, m), comm_interference(u, m, a), comm_noise(u, m), 0.0, 0.0, false};
      l.sinr = l.signal == 0.0 ? 0.0 : l.signal / (l.interference + l.noise);
      l.rate = shannon_rate(l.sinr, cfg_.bandwidth);
      rate_sum += l.rate;
      r.comm.push_back(l);
    }
    const bool ok = comm_requirement_met(rate_sum, topo_->comm[m].demand_bits, req.d_max);
    for (std::size_t k = first; k < r.comm.size(); ++k) r.comm[k].served = ok;
    if (ok) ++r.served_comm;
  }
  for (int n = 0; n < N_; ++n) {
    double sinr_sum = 0.0;
    const std::size_t first = r.sense.size();
    for (int u = 0; u < U_; ++u) {
      if (!a.sense_link(u, n)) continue;
      SenseLink l{u, n, sense_signal(u, n), sensing_interference(u, n, a), sense_noise(u, n), 0.0, false};
      l.sinr = l.signal == 0.0 ? 0.0 : l.signal / (l.interference + l.noise);
      sinr_sum += l.sinr;
      r.sense.push_back(l);
    }
    const bool ok = sinr_sum >= sinr_min;
    for (std::size_t k = first; k < r.sense.size(); ++k) r.sense[k].served = ok;
    if (ok) ++r.served_sense;
  }
  return r;
}

double LinkEvaluator::comm_interference_sv(int u, int m, std::span<const int> cs, std::span<const int> ss) const {
  const int to = pt_comm(m);
  const bool own_ok = active(u) && los_comm(u, m);
  double z = 0.0;
  for (int mp = 0; mp < M_; ++mp) {
    const int i = cs[mp];
    if (i < 0 || i == u || !active(i) || !los(i, to) || !los_comm(i, mp)) continue;
    z += tx_gain(i, pt_comm(mp), to) * path(i, to) * rx_comm_[(static_cast<std::size_t>(m) * U_ + u) * U_ + i];
  }
  for (int np = 0; np < N_; ++np) {
    const int i = ss[np];
    if (i < 0 || !active(i) || !los_sense(i, np)) continue;
    if (i == u) {
      if (own_ok) z += tx_gain(u, pt_sense(np), to) * path(u, to) * g_main_;
    } else if (los(i, to)) {
      z += tx_gain(i, pt_sense(np), to) * path(i, to) * rx_comm_[(static_cast<std::size_t>(m) * U_ + u) * U_ + i];
    }
  }
  return z;
}

double LinkEvaluator::sense_interference_sv(int u, int n, std::span<const int> cs, std::span<const int> ss) const {
  const int at_u = pt_spv(u);
  const int at_n = pt_sense(n);
  double z = 0.0;
  auto add = [&](int i, int aim) {
    if (los(i, at_u)) {
      z += tx_gain(i, aim, at_u) * path(i, at_u) * rx_sense_[(static_cast<std::size_t>(u) * N_ + n) * U_ + i];
    }
    if (los(i, at_n)) {
      z += tx_gain(i, aim, at_n) * cfg_.tx_power * g_main_ * scatter_[(static_cast<std::size_t>(i) * N_ + n) * U_ + u];
    }
  };
  for (int mp = 0; mp < M_; ++mp) {
    const int i = cs[mp];
    if (i < 0 || i == u || !active(i) || !los_comm(i, mp)) continue;
    add(i, pt_comm(mp));
  }
  for (int np = 0; np < N_; ++np) {
    const int i = ss[np];
    if (i < 0 || i == u || !active(i) || !los_sense(i, np)) continue;
    add(i, pt_sense(np));
  }
  return z;
}

double LinkEvaluator::comm_sinr_partial(int m, std::span<const int> cs, std::span<const int> ss) const {
  const int u = cs[m];
  const double s = comm_signal(u, m);
  if (s == 0.0) return 0.0;
  return s / (comm_interference_sv(u, m, cs, ss) + comm_noise(u, m));
}

double LinkEvaluator::sense_sinr_partial(int n, std::span<const int> cs, std::span<const int> ss) const {
  const int u = ss[n];
  const double s = sense_signal(u, n);
  if (s == 0.0) return 0.0;
  return s / (sense_interference_sv(u, n, cs, ss) + sense_noise(u, n));
}

int LinkEvaluator::objective_fast(std::span<const int> cs, std::span<const int> ss,
                                  const ServiceRequirements& req) const {
  int served = 0;
  for (int m = 0; m < M_; ++m) {
    const double rate = shannon_rate(comm_sinr_partial(m, cs, ss), cfg_.bandwidth);
    if (comm_requirement_met(rate, topo_->comm[m].demand_bits, req.d_max)) ++served;
  }
  const double sinr_min = req.sinr_min_linear();
  for (int n = 0; n < N_; ++n) {
    if (sense_sinr_partial(n, cs, ss) >= sinr_min) ++served;
  }
  return served;
}

LinkEvaluator::FastScore LinkEvaluator::score_fast(std::span<const int> cs, std::span<const int> ss,
                                                   const ServiceRequirements& req) const {
  FastScore sc{0, 0.0};
  for (int m = 0; m < M_; ++m) {
    const double q = std::log2(1.0 + comm_sinr_partial(m, cs, ss));
    sc.quality += q;
    if (comm_requirement_met(cfg_.bandwidth * q, topo_->comm[m].demand_bits, req.d_max)) ++sc.objective;
  }
  const double sinr_min = req.sinr_min_linear();
  for (int n = 0; n < N_; ++n) {
    const double l = sense_sinr_partial(n, cs, ss);
    sc.quality += std::log2(1.0 + l);
    if (l >= sinr_min) ++sc.objective;
  }
  return sc;
}

nlohmann::json to_json(const LinkReport& r) {
  nlohmann::json j;
  j["served_comm"] = r.served_comm;
  j["served_sense"] = r.served_sense;
  j["objective"] = r.objective();
  j["comm"] = nlohmann::json::array();
  for (const auto& l : r.comm) {
    j["comm"].push_back({{"spv", l.u},
                         {"comm", l.m},
                         {"signal_w", l.signal},
                         {"interference_w", l.interference},
                         {"noise_w", l.noise},
                         {"sinr", l.sinr},
                         {"rate_bps", l.rate},
                         {"served", l.served}});
  }
  j["sense"] = nlohmann::json::array();
  for (const auto& l : r.sense) {
    j["sense"].push_back({{"spv", l.u},
                          {"sense", l.n},
                          {"signal_w", l.signal},
                          {"interference_w", l.interference},
                          {"noise_w", l.noise},
                          {"sinr", l.sinr},
                          {"served", l.served}});
  }
  return j;
}

}  // namespace thz

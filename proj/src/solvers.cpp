#include "thzsim/solvers.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <queue>

namespace thz {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

SolverResult exhaustive_solve(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req,
                              std::uint64_t budget, TieBreak tie) {
  const LinkEvaluator ev(topo, cfg);
  return exhaustive_solve(ev, req, budget, tie);
}

SolverResult exhaustive_solve(const LinkEvaluator& ev, const ServiceRequirements& req, std::uint64_t budget,
                              TieBreak tie) {
  const auto t0 = Clock::now();
  const int U = ev.num_spv(), M = ev.num_comm(), N = ev.num_sense();
  const int cols = M + N;
  if (U < 1) throw Error("exhaustive_solve: no SPVs");
  double space = 1.0;
  for (int k = 0; k < cols; ++k) space *= U;
  if (space > static_cast<double>(budget)) {
    throw Error("exhaustive_solve: U^(M+N) = " + std::to_string(space) + " exceeds the budget of " +
                std::to_string(budget) + " evaluations; use reformulated_solve for instances this size");
  }

  // Odometer over server vectors; column 0 is the most significant digit so
  // the first optimum met is the lexicographically smallest.
  std::vector<int> servers(cols, 0);
  std::span<const int> cs(servers.data(), M);
  std::span<const int> ss(servers.data() + M, N);
  std::vector<int> best = servers;
  int best_obj = -1;
  double best_quality = -1.0;
  std::uint64_t evals = 0;
  while (true) {
    ++evals;
    if (tie == TieBreak::Lexicographic) {
      const int obj = ev.objective_fast(cs, ss, req);
      if (obj > best_obj) {
        best_obj = obj;
        best = servers;
        if (best_obj == cols) break;
      }
    } else {
      const auto sc = ev.score_fast(cs, ss, req);
      if (sc.objective > best_obj || (sc.objective == best_obj && sc.quality > best_quality)) {
        best_obj = sc.objective;
        best_quality = sc.quality;
        best = servers;
      }
    }
    int k = cols - 1;
    while (k >= 0 && ++servers[k] == U) servers[k--] = 0;
    if (k < 0) break;
  }

  SolverResult r;
  r.assignment = Assignment::from_servers(U, std::span<const int>(best.data(), M),
                                          std::span<const int>(best.data() + M, N));
  r.objective = best_obj;
  r.nodes_explored = evals;
  r.optimal = true;
  r.wall_time = seconds_since(t0);
  return r;
}

SolverResult nearest_heuristic(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req) {
  const LinkEvaluator ev(topo, cfg);
  return nearest_heuristic(ev, req);
}

SolverResult nearest_heuristic(const LinkEvaluator& ev, const ServiceRequirements& req) {
  const auto t0 = Clock::now();
  const int U = ev.num_spv(), M = ev.num_comm(), N = ev.num_sense();
  auto pick = [&](auto dist, auto los) {
    // Three passes with decreasing strictness: active+LoS, active, any.
    for (int pass = 0; pass < 3; ++pass) {
      int best = -1;
      double best_d = 0.0;
      for (int u = 0; u < U; ++u) {
        if (pass < 2 && !ev.active(u)) continue;
        if (pass == 0 && !los(u)) continue;
        const double d = dist(u);
        if (best < 0 || d < best_d) {
          best = u;
          best_d = d;
        }
      }
      if (best >= 0) return best;
    }
    return 0;
  };
  std::vector<int> cs(M), ss(N);
  for (int m = 0; m < M; ++m) {
    cs[m] = pick([&](int u) { return ev.dist_comm(u, m); }, [&](int u) { return ev.los_comm(u, m); });
  }
  for (int n = 0; n < N; ++n) {
    ss[n] = pick([&](int u) { return ev.dist_sense(u, n); }, [&](int u) { return ev.los_sense(u, n); });
  }
  SolverResult r;
  r.assignment = Assignment::from_servers(U, cs, ss);
  r.objective = ev.objective_fast(cs, ss, req);
  r.nodes_explored = 1;
  r.optimal = false;
  r.wall_time = seconds_since(t0);
  return r;
}

SolverResult reformulated_solve(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req,
                                std::uint64_t node_budget) {
  const LinkEvaluator ev(topo, cfg);
  return reformulated_solve(ev, req, node_budget);
}

namespace {

struct BnbNode {
  int bound;
  int depth;
  std::uint64_t seq;
  std::vector<int> servers;  // -1 = open column
};

struct BnbOrder {
  bool operator()(const BnbNode& a, const BnbNode& b) const {
    if (a.bound != b.bound) return a.bound < b.bound;
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.seq > b.seq;
  }
};

}  // namespace

SolverResult reformulated_solve(const LinkEvaluator& ev, const ServiceRequirements& req, std::uint64_t node_budget) {
  const auto t0 = Clock::now();
  const int U = ev.num_spv(), M = ev.num_comm(), N = ev.num_sense();
  const int cols = M + N;
  const double sinr_min = req.sinr_min_linear();

  // Auxiliary indicators for the fixed columns of a partial assignment:
  // A comm column counts when its rate covers demand / max delay, a sense column when its SINR clears the floor.
  // Interference only grows as columns are fixed, so an indicator that is
  // already 0 stays 0.
  auto satisfied_fixed = [&](const std::vector<int>& sv) {
    std::span<const int> cs(sv.data(), M), ss(sv.data() + M, N);
    int count = 0;
    for (int m = 0; m < M; ++m) {
      if (cs[m] < 0) continue;
      const double rate = shannon_rate(ev.comm_sinr_partial(m, cs, ss), ev.config().bandwidth);
      if (comm_requirement_met(rate, ev.topology().comm[m].demand_bits, req.d_max)) ++count;
    }
    for (int n = 0; n < N; ++n) {
      if (ss[n] < 0) continue;
      if (ev.sense_sinr_partial(n, cs, ss) >= sinr_min) ++count;
    }
    return count;
  };

  // Warm start from the geometric heuristic.
  SolverResult warm = nearest_heuristic(ev, req);
  std::vector<int> incumbent(cols);
  {
    const auto c = warm.assignment.comm_servers();
    const auto s = warm.assignment.sense_servers();
    std::copy(c.begin(), c.end(), incumbent.begin());
    std::copy(s.begin(), s.end(), incumbent.begin() + M);
  }
  int best = warm.objective;

  std::priority_queue<BnbNode, std::vector<BnbNode>, BnbOrder> open;
  std::uint64_t seq = 0;
  open.push({cols, 0, seq++, std::vector<int>(cols, -1)});
  std::uint64_t explored = 0;
  bool complete = true;
  while (!open.empty()) {
    if (explored >= node_budget) {
      complete = false;
      break;
    }
    BnbNode node = open.top();
    open.pop();
    ++explored;
    if (node.bound <= best) break;  // best-first: nothing left can improve
    const int k = node.depth;
    for (int u = 0; u < U; ++u) {
      std::vector<int> child = node.servers;
      child[k] = u;
      const int fixed_ok = satisfied_fixed(child);
      const int bound = fixed_ok + (cols - k - 1);
      if (k + 1 == cols) {
        if (fixed_ok > best) {
          best = fixed_ok;
          incumbent = child;
        }
      } else if (bound > best) {
        open.push({bound, k + 1, seq++, std::move(child)});
      }
    }
  }

  SolverResult r;
  r.assignment = Assignment::from_servers(U, std::span<const int>(incumbent.data(), M),
                                          std::span<const int>(incumbent.data() + M, N));
  r.objective = best;
  r.nodes_explored = explored;
  r.optimal = complete;
  r.wall_time = seconds_since(t0);
  return r;
}

std::vector<LabeledExample> labels_from_assignment(const Topology& topo, const Assignment& a) {
  const int U = topo.num_spv(), M = topo.num_comm(), N = topo.num_sense();
  std::vector<LabeledExample> out(U);
  for (int u = 0; u < U; ++u) {
    LabeledExample& ex = out[u];
    ex.topology_id = topo.seed;
    ex.spv_index = u;
    ex.spv_id = topo.spvs[u].id;
    ex.z.assign(M + N + 1, 0.0);
    bool any = false;
    for (int m = 0; m < M; ++m) {
      if (a.comm_link(u, m)) ex.z[m] = 1.0, any = true;
    }
    for (int n = 0; n < N; ++n) {
      if (a.sense_link(u, n)) ex.z[M + n] = 1.0, any = true;
    }
    if (!any) ex.z[M + N] = 1.0;
  }
  return out;
}

Assignment assignment_from_labels(const Topology& topo, const std::vector<LabeledExample>& labels) {
  const int U = topo.num_spv(), M = topo.num_comm(), N = topo.num_sense();
  Assignment a(U, M, N);
  for (const auto& ex : labels) {
    for (int m = 0; m < M; ++m) a.comm_link(ex.spv_index, m) = ex.z[m] > 0.5 ? 1 : 0;
    for (int n = 0; n < N; ++n) a.sense_link(ex.spv_index, n) = ex.z[M + n] > 0.5 ? 1 : 0;
  }
  return a;
}

std::vector<LabeledTopology> label_dataset(const std::vector<Topology>& topologies, const ChannelConfig& cfg,
                                           const ServiceRequirements& req, TieBreak tie) {
  std::vector<LabeledTopology> out;
  out.reserve(topologies.size());
  for (const auto& t : topologies) {
    const SolverResult r = exhaustive_solve(t, cfg, req, kDefaultExhaustiveBudget, tie);
    out.push_back({labels_from_assignment(t, r.assignment), r.objective});
  }
  return out;
}

void save_labels(const std::vector<LabeledTopology>& labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& lt : labels) {
    for (const auto& ex : lt.labels) {
      nlohmann::json j{{"topology_id", ex.topology_id},
                       {"spv_index", ex.spv_index},
                       {"spv_id", ex.spv_id},
                       {"optimal", lt.optimal_objective},
                       {"z", ex.z}};
      out << j.dump() << '\n';
    }
  }
}

std::vector<LabeledTopology> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing label file " + path.string());
  std::vector<LabeledTopology> out;
  std::string line;
  int lineno = 0;
  std::uint64_t current = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      LabeledExample ex;
      ex.topology_id = j.at("topology_id").get<std::uint64_t>();
      ex.spv_index = j.at("spv_index").get<int>();
      ex.spv_id = j.at("spv_id").get<int>();
      ex.z = j.at("z").get<std::vector<double>>();
      if (out.empty() || ex.topology_id != current || ex.spv_index == 0) {
        out.push_back({});
        out.back().optimal_objective = j.at("optimal").get<int>();
        current = ex.topology_id;
      }
      out.back().labels.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace thz

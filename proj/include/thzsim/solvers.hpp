#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "thzsim/linkmodel.hpp"

namespace thz {

struct SolverResult {
  Assignment assignment;
  int objective = 0;
  std::uint64_t nodes_explored = 0;
  double wall_time = 0.0;  // seconds
  bool optimal = false;
};

inline constexpr std::uint64_t kDefaultExhaustiveBudget = 100'000'000;

enum class TieBreak {
  /// Lexicographically smallest server vector (comm columns first, then
  /// sense columns, lowest SPV index first).
  Lexicographic,
  /// Largest sum of log2(1 + SINR) over all columns, then lexicographic.
  LinkQuality,
};

/// Enumerates all U^(M+N) server choices. Throws if the enumeration exceeds
/// `budget`.
SolverResult exhaustive_solve(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req,
                              std::uint64_t budget = kDefaultExhaustiveBudget,
                              TieBreak tie = TieBreak::Lexicographic);
SolverResult exhaustive_solve(const LinkEvaluator& ev, const ServiceRequirements& req,
                              std::uint64_t budget = kDefaultExhaustiveBudget,
                              TieBreak tie = TieBreak::Lexicographic);

/// Each request goes to its nearest active LoS SPV, else the nearest active
/// SPV, else the nearest SPV. Equal distances resolve to the lowest index.
SolverResult nearest_heuristic(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req);
SolverResult nearest_heuristic(const LinkEvaluator& ev, const ServiceRequirements& req);

/// Best-first branch and bound over the auxiliary-variable formulation
/// with one 0/1 served indicator per request: a comm indicator may be 1 only
/// if its link rate covers payload / max delay, a sense indicator only if its
/// SINR clears the floor. Columns are fixed one at a time;
/// the bound counts columns still satisfiable under the partial assignment
/// plus all open columns. If `node_budget` runs out the incumbent is
/// returned with optimal = false.
SolverResult reformulated_solve(const Topology& topo, const ChannelConfig& cfg, const ServiceRequirements& req,
                                std::uint64_t node_budget = 10'000'000);
SolverResult reformulated_solve(const LinkEvaluator& ev, const ServiceRequirements& req,
                                std::uint64_t node_budget = 10'000'000);

/// Per-SPV multi-hot target over M+N+1 classes: comm columns, sense columns,
/// then the exclusive no-service class.
struct LabeledExample {
  std::uint64_t topology_id = 0;
  int spv_index = 0;
  int spv_id = 0;
  std::vector<double> z;
};

std::vector<LabeledExample> labels_from_assignment(const Topology& topo, const Assignment& a);

/// Inverse of labels_from_assignment for labels derived from a valid assignment.
Assignment assignment_from_labels(const Topology& topo, const std::vector<LabeledExample>& labels);

struct LabeledTopology {
  std::vector<LabeledExample> labels;  // one per SPV, in SPV order
  int optimal_objective = 0;
};

/// Labels every topology with its exhaustive optimum (LinkQuality ties).
std::vector<LabeledTopology> label_dataset(const std::vector<Topology>& topologies, const ChannelConfig& cfg,
                                           const ServiceRequirements& req, TieBreak tie = TieBreak::LinkQuality);

void save_labels(const std::vector<LabeledTopology>& labels, const std::filesystem::path& path);
std::vector<LabeledTopology> load_labels(const std::filesystem::path& path);

}  // namespace thz

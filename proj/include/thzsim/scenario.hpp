#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "thzsim/topology.hpp"

namespace thz {

inline constexpr int kTopologySchemaVersion = 1;

/// Manhattan-grid street block generator settings.
struct GeneratorConfig {
  double area_w = 100.0;           // m
  double area_h = 100.0;           // m
  double cell_size = 10.0;         // m
  int street_period = 5;           // cells between street starts
  int street_width = 2;            // cells per street
  double building_density = 0.6;   // P(non-street cell holds a building)
  double building_margin = 1.0;    // m inset of a building inside its cell
  int num_spv = 10;
  int num_comm = 2;
  int num_sense = 2;
  double demand_bits = 1.6e8;      // 20 MB
  double active_prob = 0.9;
  double min_separation = 1.0;     // m between any two vehicles
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const GeneratorConfig& gc);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

/// Deterministic 64-bit generator (splitmix64 seeded) with portable
/// uniform/Bernoulli draws, so outputs do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Places buildings on the non-street cells and vehicles on street cells.
/// Throws when the grid has no street room for the requested vehicles.
Topology generate_topology(const GeneratorConfig& gc);

struct Dataset {
  GeneratorConfig config;
  std::vector<Topology> train, val, test;
};

/// Train/val/test seeds are consecutive, disjoint ranges starting at gc.seed.
Dataset generate_dataset(const GeneratorConfig& gc, int n_train = 1500, int n_val = 1000, int n_test = 1000);

/// FNV-1a over the canonical JSON dump of the generator config.
std::uint64_t config_hash(const GeneratorConfig& gc);

/// Writes train/val/test topology files plus manifest.json into `dir`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Regenerates every split from the seeds recorded in a manifest.
Dataset regenerate_from_manifest(const std::filesystem::path& manifest);
/// Reads the topology files referenced by a manifest.
Dataset read_dataset(const std::filesystem::path& manifest);

nlohmann::json topology_to_json(const Topology& t);
/// Throws thz::Error on unknown versions or schema violations.
Topology topology_from_json(const nlohmann::json& j);

void save_topology(const Topology& t, const std::filesystem::path& path);
Topology load_topology(const std::filesystem::path& path);
void save_topologies(const std::vector<Topology>& ts, const std::filesystem::path& path);
std::vector<Topology> load_topologies(const std::filesystem::path& path);

enum class Role { Spv, Comm, Sense };

/// How GPS-style traces are turned into topology snapshots.
struct TraceSchema {
  double interval = 30.0;  // s between snapshots
  // Vehicles sorted by id take roles from this cycle.
  std::vector<Role> role_cycle = {Role::Spv, Role::Spv, Role::Spv, Role::Spv, Role::Spv, Role::Comm, Role::Sense};
  std::vector<Obstacle> obstacles;
  double demand_bits = 1.6e8;
  double active_prob = 0.9;
  std::uint64_t seed = 1;
};

/// Parses CSV rows `time,id,x,y,heading` (optional header) and snapshots
/// the last known position of every vehicle at t0, t0+interval, ...
std::vector<Topology> ingest_traces(const std::filesystem::path& path, const TraceSchema& schema);
std::vector<Topology> ingest_traces_text(const std::string& csv, const TraceSchema& schema);

}  // namespace thz

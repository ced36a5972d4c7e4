#pragma once

#include <cstdint>
#include <vector>

#include "thzsim/geometry.hpp"

namespace thz {

struct Spv {
  int id = 0;
  Point2D pos;
  double heading = 0.0;  // radians, [0, 2*pi)
  bool active = true;

  friend bool operator==(const Spv&, const Spv&) = default;
};

struct CommRequest {
  int id = 0;
  Point2D pos;
  double demand_bits = 1.6e8;

  friend bool operator==(const CommRequest&, const CommRequest&) = default;
};

struct SenseRequest {
  int id = 0;
  Point2D pos;

  friend bool operator==(const SenseRequest&, const SenseRequest&) = default;
};

/// One snapshot of the road network. Vehicles are addressed by their index
/// inside the role list (u, m, n); `id` is the external label only.
struct Topology {
  std::uint64_t seed = 0;
  std::vector<Spv> spvs;
  std::vector<CommRequest> comm;
  std::vector<SenseRequest> sense;
  std::vector<Obstacle> obstacles;

  int num_spv() const { return static_cast<int>(spvs.size()); }
  int num_comm() const { return static_cast<int>(comm.size()); }
  int num_sense() const { return static_cast<int>(sense.size()); }

  friend bool operator==(const Topology&, const Topology&) = default;
};

/// Delay budget for comm requests and SINR floor for sensing requests.
struct ServiceRequirements {
  double d_max = 5e-3;      // seconds
  double sinr_min_db = 3.0; // dB; compared on the linear scale

  double sinr_min_linear() const;
  void validate() const;
};

/// Throws thz::Error on duplicate ids, non-finite coordinates, or empty roles.
void validate_topology(const Topology& topo);

}  // namespace thz

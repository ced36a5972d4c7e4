#pragma once

#include <vector>

#include "thzsim/channel.hpp"
#include "thzsim/linkmodel.hpp"
#include "thzsim/topology.hpp"

namespace oracle {

using real = long double;

real free_space_gain(real d, real f, real c);
real absorption_gain(real d, real absorption);
real solid_angle(real beam_h, real beam_v);
real main_gain(real iota, real beam_h, real beam_v);
real side_gain(real iota, real beam_h, real beam_v);

/// Segment (a, b) against both diagonals of every obstacle, endpoints included.
bool line_of_sight(thz::Point2D a, thz::Point2D b, const std::vector<thz::Obstacle>& obstacles);

struct CommTerms {
  real other_comm = 0, other_sense = 0, own_sense = 0, signal = 0, noise = 0;
  real interference() const { return other_comm + other_sense + own_sense; }
  real sinr() const { return signal == 0 ? 0 : signal / (interference() + noise); }
};

struct SenseTerms {
  real direct_comm = 0, direct_sense = 0, scattered_comm = 0, scattered_sense = 0, signal = 0, noise = 0;
  real interference() const { return direct_comm + direct_sense + scattered_comm + scattered_sense; }
  real sinr() const { return signal == 0 ? 0 : signal / (interference() + noise); }
};

/// Straight evaluation of the link budget for an arbitrary 0/1 association.
class LinkOracle {
 public:
  LinkOracle(const thz::Topology& topo, const thz::ChannelConfig& cfg);

  CommTerms comm(int u, int m, const thz::Assignment& a) const;
  SenseTerms sense(int u, int n, const thz::Assignment& a) const;
  /// Served comm plus sensing requests of a one-server-per-request assignment.
  int objective(const thz::Assignment& a, const thz::ServiceRequirements& req) const;

 private:
  real gain_toward(thz::Point2D own, thz::Point2D aim, thz::Point2D toward) const;
  real path(thz::Point2D a, thz::Point2D b) const;
  real noise_at(thz::Point2D rx, thz::Point2D aim, int exclude) const;

  const thz::Topology& t_;
  thz::ChannelConfig cfg_;
  real g_main_, g_side_;
};

/// Best objective over every server vector, by plain enumeration.
int brute_force_optimum(const thz::Topology& topo, const thz::ChannelConfig& cfg, const thz::ServiceRequirements& req);

}  // namespace oracle

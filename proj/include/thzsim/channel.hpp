#pragma once

#include <numbers>

#include "thzsim/geometry.hpp"
#include "thzsim/topology.hpp"

namespace thz {

inline double dbm_to_watt(double dbm) { return 1e-3 * std::pow(10.0, dbm / 10.0); }
inline double watt_to_dbm(double w) { return 10.0 * std::log10(w / 1e-3); }
inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

/// Physical constants of the THz link budget. All members are linear SI
/// units; config files carry dBm/dB and are converted on load.
struct ChannelConfig {
  double f = 1.05e12;                 // carrier, Hz
  double c = 3e8;                     // m/s
  double absorption = 0.07512;               // absorption coefficient, 1/m
  double tx_power = 10.0;             // W (40 dBm)
  double bandwidth = 5e9;             // Hz
  double noise_floor = 1.9952623149688787e-11;  // W (-77 dBm)
  double side_lobe_ratio = 0.1;       // iota
  double beam_h = deg_to_rad(10.0);   // rad
  double beam_v = deg_to_rad(10.0);   // rad
  double rcs = 1.0;                   // m^2
  double active_prob = 0.9;           // p

  /// Throws thz::Error when any invariant is violated.
  void validate() const;
};

/// Free-space loss (4 pi f d / c)^2. Throws for d <= 0 ("coincident vehicles").
double free_space_gain(double d, const ChannelConfig& cfg);

/// Molecular absorption loss exp(absorption d), the inverse of transmittance.
double absorption_gain(double d, const ChannelConfig& cfg);

/// Transmittance r(d) = exp(-absorption d).
double transmittance(double d, const ChannelConfig& cfg);

/// Beam solid angle 4 asin(tan(h/2) tan(v/2)).
double beam_solid_angle(double beam_h, double beam_v);

double main_lobe_gain(const ChannelConfig& cfg);
double side_lobe_gain(const ChannelConfig& cfg);

struct AntennaState {
  int owner = 0;
  double boresight = 0.0;  // radians, [0, 2*pi)
};

/// True when `target` lies within half the horizontal beamwidth of the
/// boresight (boundary inclusive).
bool in_main_lobe(double boresight, Point2D own_pos, Point2D target, const ChannelConfig& cfg);

double antenna_gain(const AntennaState& tx, Point2D target, Point2D own_pos, const ChannelConfig& cfg);

/// Gain of a beam at `own_pos` steered at `aim`, evaluated toward `target`.
double steered_gain(Point2D own_pos, Point2D aim, Point2D target, const ChannelConfig& cfg);

/// Radar spreading loss (4 pi)^3 f^2 d^4 / (rcs c^2).
double sensing_spreading_loss(double d, const ChannelConfig& cfg);

/// Signal power for SPV u serving comm vehicle m with both beams steered at each
/// other. Zero when u is inactive or the path is blocked.
double received_power(const Topology& topo, int u, int m, const ChannelConfig& cfg);

/// Same with explicit antenna orientations at both ends.
double received_power(const Topology& topo, int u, int m, const AntennaState& tx,
                      const AntennaState& rx, const ChannelConfig& cfg);

/// Noise at comm vehicle m served by u: floor plus molecular-absorption re-radiation from every
/// other active SPV with LoS to the receiver. The receiver beam is steered at
/// `aim`; interferers radiate along their travel heading. Assignment free.
double absorption_noise(const Topology& topo, Point2D rx_pos, Point2D aim, int exclude_spv,
                        const ChannelConfig& cfg);

/// Noise for comm vehicle m listening to SPV u.
double noise_power(const Topology& topo, int u, int m, const ChannelConfig& cfg);

/// Noise for the echo of sensing target n received at SPV u.
double sensing_noise_power(const Topology& topo, int u, int n, const ChannelConfig& cfg);

}  // namespace thz

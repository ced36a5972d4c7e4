#include "thzsim/channel.hpp"

#include <cmath>

namespace thz {

namespace {
constexpr double kPi = std::numbers::pi;
}

void ChannelConfig::validate() const {
  if (!(f > 0) || !(c > 0) || !(absorption >= 0) || !(tx_power > 0) || !(bandwidth > 0) ||
      !(noise_floor > 0) || !(rcs > 0)) {
    throw Error("channel config: physical constants must be positive");
  }
  if (!(side_lobe_ratio > 0 && side_lobe_ratio < 1)) throw Error("channel config: side_lobe_ratio must lie in (0,1)");
  if (!(beam_h > 0 && beam_h < kPi) || !(beam_v > 0 && beam_v < kPi)) {
    throw Error("channel config: beamwidths must lie in (0, pi)");
  }
  if (!(active_prob >= 0 && active_prob <= 1)) throw Error("channel config: active_prob must lie in [0,1]");
  (void)beam_solid_angle(beam_h, beam_v);
}

double free_space_gain(double d, const ChannelConfig& cfg) {
  if (!(d > 0)) throw Error("coincident vehicles");
  const double x = 4.0 * kPi * cfg.f * d / cfg.c;
  return x * x;
}

double absorption_gain(double d, const ChannelConfig& cfg) { return std::exp(cfg.absorption * d); }

double transmittance(double d, const ChannelConfig& cfg) { return std::exp(-cfg.absorption * d); }

double beam_solid_angle(double beam_h, double beam_v) {
  if (!(beam_h > 0 && beam_h < kPi) || !(beam_v > 0 && beam_v < kPi)) throw Error("invalid beamwidth pair");
  const double arg = std::tan(beam_h / 2.0) * std::tan(beam_v / 2.0);
  if (arg > 1.0) throw Error("invalid beamwidth pair");
  return 4.0 * std::asin(arg);
}

double main_lobe_gain(const ChannelConfig& cfg) {
  const double gamma = beam_solid_angle(cfg.beam_h, cfg.beam_v);
  return 4.0 * kPi / ((cfg.side_lobe_ratio + 1.0) * gamma);
}

double side_lobe_gain(const ChannelConfig& cfg) {
  const double gamma = beam_solid_angle(cfg.beam_h, cfg.beam_v);
  return 4.0 * kPi * cfg.side_lobe_ratio / ((cfg.side_lobe_ratio + 1.0) * (4.0 * kPi - gamma));
}

bool in_main_lobe(double boresight, Point2D own_pos, Point2D target, const ChannelConfig& cfg) {
  const Point2D dir{std::cos(boresight), std::sin(boresight)};
  const double off = angle_between(dir, target - own_pos);
  return off <= cfg.beam_h / 2.0 + 1e-12;
}

double antenna_gain(const AntennaState& tx, Point2D target, Point2D own_pos, const ChannelConfig& cfg) {
  return in_main_lobe(tx.boresight, own_pos, target, cfg) ? main_lobe_gain(cfg) : side_lobe_gain(cfg);
}

double steered_gain(Point2D own_pos, Point2D aim, Point2D target, const ChannelConfig& cfg) {
  const double off = angle_between(aim - own_pos, target - own_pos);
  return off <= cfg.beam_h / 2.0 + 1e-12 ? main_lobe_gain(cfg) : side_lobe_gain(cfg);
}

double sensing_spreading_loss(double d, const ChannelConfig& cfg) {
  if (!(d > 0)) throw Error("coincident vehicles");
  const double fourpi3 = std::pow(4.0 * kPi, 3);
  return fourpi3 * cfg.f * cfg.f * d * d * d * d / (cfg.rcs * cfg.c * cfg.c);
}

double received_power(const Topology& topo, int u, int m, const ChannelConfig& cfg) {
  const Point2D pu = topo.spvs.at(u).pos;
  const Point2D pm = topo.comm.at(m).pos;
  return received_power(topo, u, m, AntennaState{u, bearing(pu, pm)}, AntennaState{m, bearing(pm, pu)}, cfg);
}

double received_power(const Topology& topo, int u, int m, const AntennaState& tx, const AntennaState& rx,
                      const ChannelConfig& cfg) {
  const Spv& s = topo.spvs.at(u);
  const Point2D pm = topo.comm.at(m).pos;
  const double d = distance(s.pos, pm);
  const double hf = free_space_gain(d, cfg);
  if (!s.active) return 0.0;
  if (blockage_indicator(s.pos, pm, topo.obstacles) == 0) return 0.0;
  const double at = antenna_gain(tx, pm, s.pos, cfg);
  const double ar = antenna_gain(rx, s.pos, pm, cfg);
  return cfg.tx_power * at * ar / (absorption_gain(d, cfg) * hf);
}

double absorption_noise(const Topology& topo, Point2D rx_pos, Point2D aim, int exclude_spv,
                        const ChannelConfig& cfg) {
  double sum = 0.0;
  for (int i = 0; i < topo.num_spv(); ++i) {
    if (i == exclude_spv) continue;
    const Spv& s = topo.spvs[i];
    if (!s.active) continue;
    if (blockage_indicator(s.pos, rx_pos, topo.obstacles) == 0) continue;
    const double d = distance(s.pos, rx_pos);
    const double at = antenna_gain(AntennaState{i, s.heading}, rx_pos, s.pos, cfg);
    const double ar = steered_gain(rx_pos, aim, s.pos, cfg);
    sum += cfg.tx_power * at * ar * (1.0 - transmittance(d, cfg)) / free_space_gain(d, cfg);
  }
  return sum + cfg.noise_floor;
}

double noise_power(const Topology& topo, int u, int m, const ChannelConfig& cfg) {
  return absorption_noise(topo, topo.comm.at(m).pos, topo.spvs.at(u).pos, u, cfg);
}

double sensing_noise_power(const Topology& topo, int u, int n, const ChannelConfig& cfg) {
  return absorption_noise(topo, topo.spvs.at(u).pos, topo.sense.at(n).pos, u, cfg);
}

}  // namespace thz

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "thzsim/channel.hpp"
#include "thzsim/topology.hpp"

using namespace thz;

TEST_CASE("free-space and absorption gains at 10 m") {
  const ChannelConfig cfg;
  CHECK(free_space_gain(10.0, cfg) == doctest::Approx(1.9344e11).epsilon(1e-4));
  CHECK(absorption_gain(10.0, cfg) == doctest::Approx(std::exp(0.7512)).epsilon(1e-12));
  CHECK(transmittance(10.0, cfg) * absorption_gain(10.0, cfg) == doctest::Approx(1.0));
  CHECK_THROWS_AS(free_space_gain(0.0, cfg), Error);
  CHECK_THROWS_AS(sensing_spreading_loss(-1.0, cfg), Error);
}

TEST_CASE("ten degree beams") {
  const ChannelConfig cfg;
  CHECK(beam_solid_angle(cfg.beam_h, cfg.beam_v) == doctest::Approx(0.030617).epsilon(1e-4));
  CHECK(main_lobe_gain(cfg) == doctest::Approx(373.1).epsilon(1e-3));
  CHECK(side_lobe_gain(cfg) == doctest::Approx(0.09113).epsilon(1e-3));
  CHECK_THROWS_AS(beam_solid_angle(3.0, 3.0), Error);
  CHECK_THROWS_AS(beam_solid_angle(0.0, 0.1), Error);
}

TEST_CASE("main lobe boundary is inclusive") {
  const ChannelConfig cfg;
  const double half = cfg.beam_h / 2.0;
  const Point2D own{0, 0};
  CHECK(in_main_lobe(0.0, own, {std::cos(half * 0.999), std::sin(half * 0.999)}, cfg));
  CHECK_FALSE(in_main_lobe(0.0, own, {std::cos(half * 1.01), std::sin(half * 1.01)}, cfg));
  CHECK(antenna_gain({0, 0.0}, {1, 0}, own, cfg) == doctest::Approx(main_lobe_gain(cfg)));
  CHECK(antenna_gain({0, std::numbers::pi}, {1, 0}, own, cfg) == doctest::Approx(side_lobe_gain(cfg)));
}

TEST_CASE("spreading loss follows the fourth power of distance") {
  const ChannelConfig cfg;
  CHECK(sensing_spreading_loss(20.0, cfg) / sensing_spreading_loss(10.0, cfg) == doctest::Approx(16.0));
}

TEST_CASE("received power is gated by activity and blockage") {
  const ChannelConfig cfg;
  Topology t;
  t.spvs = {{0, {0, 0}, 0.0, true}, {1, {0, 10}, 0.0, false}};
  t.comm = {{10, {10, 0}, 1.6e8}};
  const double d = 10.0;
  const double want = cfg.tx_power * main_lobe_gain(cfg) * main_lobe_gain(cfg) /
                      (absorption_gain(d, cfg) * free_space_gain(d, cfg));
  CHECK(received_power(t, 0, 0, cfg) == doctest::Approx(want).epsilon(1e-12));
  CHECK(received_power(t, 1, 0, cfg) == 0.0);
  t.obstacles = {Obstacle::rectangle(4, -1, 6, 1)};
  CHECK(received_power(t, 0, 0, cfg) == 0.0);
}

TEST_CASE("noise power is at least the thermal floor") {
  const ChannelConfig cfg;
  Topology t;
  t.spvs = {{0, {0, 0}, 0.0, true}, {1, {20, 0}, std::numbers::pi, true}, {2, {5, 5}, 0.0, true}};
  t.comm = {{10, {10, 0}, 1.6e8}};
  t.sense = {{20, {10, 5}}};
  for (int u = 0; u < 3; ++u) {
    CHECK(noise_power(t, u, 0, cfg) >= cfg.noise_floor);
    CHECK(sensing_noise_power(t, u, 0, cfg) >= cfg.noise_floor);
  }
  Topology alone = t;
  alone.spvs.resize(1);
  CHECK(noise_power(alone, 0, 0, cfg) == doctest::Approx(cfg.noise_floor));
}

TEST_CASE("unit conversions") {
  CHECK(dbm_to_watt(40.0) == doctest::Approx(10.0));
  CHECK(watt_to_dbm(1e-3) == doctest::Approx(0.0));
  CHECK(db_to_linear(3.0) == doctest::Approx(1.99526).epsilon(1e-5));
}

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "thzsim/linkmodel.hpp"
#include "thzsim/scenario.hpp"
#include "thzsim/solvers.hpp"

using namespace thz;

namespace {

Topology two_spv_scene() {
  Topology t;
  t.seed = 5;
  t.spvs = {{0, {0, 0}, 0.0, true}, {1, {30, 0}, std::numbers::pi, true}};
  t.comm = {{10, {10, 0}, 1.6e8}, {11, {20, 2}, 1.6e8}};
  t.sense = {{20, {15, 8}}};
  return t;
}

}  // namespace

TEST_CASE("assignment construction and validation") {
  const std::vector<int> cs{1, 0}, ss{1};
  const Assignment a = Assignment::from_servers(2, cs, ss);
  CHECK(a.comm_link(1, 0) == 1);
  CHECK(a.comm_link(0, 1) == 1);
  CHECK(a.sense_link(1, 0) == 1);
  CHECK(validate_assignment(a).empty());
  CHECK(a.comm_servers() == cs);

  Assignment b(2, 2, 1);
  b.comm_link(0, 0) = 1;
  b.comm_link(1, 0) = 1;
  b.sense_link(0, 0) = 1;
  const auto v = validate_assignment(b);
  REQUIRE(v.size() == 2);
  CHECK(v[0].matrix == 'a');
  CHECK(v[0].column == 0);
  CHECK(v[0].column_sum == 2);
  CHECK(v[1].column == 1);
  CHECK(v[1].column_sum == 0);
  CHECK(b.comm_servers()[0] == -1);
}

TEST_CASE("single link SINR is signal over noise") {
  const ChannelConfig cfg;
  Topology t;
  t.spvs = {{0, {0, 0}, 0.0, true}};
  t.comm = {{10, {10, 0}, 1.6e8}};
  LinkEvaluator ev(t, cfg);
  const Assignment a = Assignment::from_servers(1, std::vector<int>{0}, std::vector<int>{});
  CHECK(ev.comm_interference(0, 0, a) == 0.0);
  CHECK(ev.comm_noise(0, 0) == doctest::Approx(cfg.noise_floor));
  CHECK(ev.comm_sinr(0, 0, a) == doctest::Approx(received_power(t, 0, 0, cfg) / cfg.noise_floor));
  CHECK(ev.data_rate(0, 0, a) == doctest::Approx(shannon_rate(ev.comm_sinr(0, 0, a), cfg.bandwidth)));
}

TEST_CASE("delay requirement boundary is inclusive") {
  CHECK(comm_requirement_met(3.2e10, 1.6e8, 5e-3));
  CHECK_FALSE(comm_requirement_met(3.19e10, 1.6e8, 5e-3));
  CHECK_FALSE(comm_requirement_met(0.0, 1.6e8, 5e-3));
}

TEST_CASE("report, fast objective and partial SINR agree") {
  const ChannelConfig cfg;
  const ServiceRequirements req;
  GeneratorConfig gc;
  for (int s = 0; s < 30; ++s) {
    gc.seed = 100 + s;
    const Topology t = generate_topology(gc);
    LinkEvaluator ev(t, cfg);
    Rng rng(s);
    std::vector<int> cs(t.num_comm()), ss(t.num_sense());
    for (auto& x : cs) x = static_cast<int>(rng.below(t.num_spv()));
    for (auto& x : ss) x = static_cast<int>(rng.below(t.num_spv()));
    const Assignment a = Assignment::from_servers(t.num_spv(), cs, ss);
    const LinkReport r = ev.report(a, req);
    CHECK(ev.objective_fast(cs, ss, req) == r.objective());
    CHECK(ev.score_fast(cs, ss, req).objective == r.objective());
    for (int m = 0; m < t.num_comm(); ++m) {
      CHECK(ev.comm_sinr_partial(m, cs, ss) == doctest::Approx(ev.comm_sinr(cs[m], m, a)).epsilon(1e-12));
    }
    for (int n = 0; n < t.num_sense(); ++n) {
      CHECK(ev.sense_sinr_partial(n, cs, ss) == doctest::Approx(ev.sensing_sinr(ss[n], n, a)).epsilon(1e-12));
    }
  }
}

TEST_CASE("interference terms vanish without other active servers") {
  const ChannelConfig cfg;
  Topology t = two_spv_scene();
  t.spvs[1].active = false;
  LinkEvaluator ev(t, cfg);
  const Assignment a = Assignment::from_servers(2, std::vector<int>{0, 1}, std::vector<int>{1});
  CHECK(ev.comm_interference_terms(0, 0, a).other_comm == 0.0);
  CHECK(ev.comm_interference_terms(0, 0, a).other_sense == 0.0);
  CHECK(ev.comm_sinr(1, 1, a) == 0.0);
  CHECK(ev.sensing_sinr(1, 0, a) == 0.0);
}

TEST_CASE("own sensing beam interferes with own comm link") {
  const ChannelConfig cfg;
  const Topology t = two_spv_scene();
  LinkEvaluator ev(t, cfg);
  const Assignment with = Assignment::from_servers(2, std::vector<int>{0, 1}, std::vector<int>{0});
  const Assignment without = Assignment::from_servers(2, std::vector<int>{0, 1}, std::vector<int>{1});
  CHECK(ev.comm_interference_terms(0, 0, with).own_sense > 0.0);
  CHECK(ev.comm_interference_terms(0, 0, without).own_sense == 0.0);
}

TEST_CASE("link report json lists every assigned link") {
  const ChannelConfig cfg;
  const Topology t = two_spv_scene();
  LinkEvaluator ev(t, cfg);
  const Assignment a = Assignment::from_servers(2, std::vector<int>{0, 1}, std::vector<int>{0});
  const auto j = to_json(ev.report(a, ServiceRequirements{}));
  CHECK(j["comm"].size() == 2);
  CHECK(j["sense"].size() == 1);
  CHECK(j["objective"].get<int>() == j["served_comm"].get<int>() + j["served_sense"].get<int>());
}

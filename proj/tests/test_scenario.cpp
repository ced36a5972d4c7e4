#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "thzsim/scenario.hpp"

using namespace thz;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("thz_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("rng is deterministic and in range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(7) < 7u);
  }
}

TEST_CASE("generated topologies respect the generator contract") {
  GeneratorConfig gc;
  for (int s = 1; s <= 40; ++s) {
    gc.seed = s;
    const Topology t = generate_topology(gc);
    CHECK(t.num_spv() == gc.num_spv);
    CHECK(t.num_comm() == gc.num_comm);
    CHECK(t.num_sense() == gc.num_sense);
    std::vector<Point2D> pts;
    for (const auto& v : t.spvs) pts.push_back(v.pos);
    for (const auto& v : t.comm) pts.push_back(v.pos);
    for (const auto& v : t.sense) pts.push_back(v.pos);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (const auto& o : t.obstacles) CHECK_FALSE(o.contains(pts[i]));
      for (std::size_t j = i + 1; j < pts.size(); ++j) CHECK(distance(pts[i], pts[j]) >= gc.min_separation);
    }
    CHECK_NOTHROW(validate_topology(t));
    CHECK(generate_topology(gc) == t);
  }
}

TEST_CASE("infeasible generator settings are rejected") {
  GeneratorConfig gc;
  gc.num_spv = 5000;
  gc.min_separation = 5.0;
  CHECK_THROWS_AS(generate_topology(gc), Error);
  GeneratorConfig bad;
  bad.building_density = 1.5;
  CHECK_THROWS_AS(generate_topology(bad), Error);
}

TEST_CASE("topology json round trip and version check") {
  GeneratorConfig gc;
  gc.seed = 9;
  const Topology t = generate_topology(gc);
  CHECK(topology_from_json(topology_to_json(t)) == t);
  auto j = topology_to_json(t);
  j["version"] = 99;
  CHECK_THROWS_AS(topology_from_json(j), Error);
}

TEST_CASE("dataset files, manifest and regeneration agree") {
  GeneratorConfig gc;
  gc.seed = 77;
  const Dataset ds = generate_dataset(gc, 4, 2, 3);
  CHECK(ds.train.front().seed == 77);
  CHECK(ds.val.front().seed == 81);
  const fs::path dir = scratch("dataset");
  write_dataset(ds, dir);
  const Dataset back = read_dataset(dir / "manifest.json");
  const Dataset regen = regenerate_from_manifest(dir / "manifest.json");
  CHECK(back.train == ds.train);
  CHECK(back.test == ds.test);
  CHECK(regen.val == ds.val);
  CHECK(config_hash(back.config) == config_hash(gc));
  GeneratorConfig other = gc;
  other.building_density = 0.3;
  CHECK(config_hash(other) != config_hash(gc));
  CHECK_THROWS_AS(read_dataset(dir / "nope.json"), Error);
}

TEST_CASE("trace ingestion snapshots the latest positions") {
  TraceSchema schema;
  schema.interval = 10.0;
  schema.role_cycle = {Role::Spv, Role::Comm, Role::Sense};
  schema.active_prob = 1.0;
  const std::string csv =
      "time,id,x,y,heading\n"
      "0,1,0,0,0\n"
      "0,2,5,0,0\n"
      "0,3,10,0,0\n"
      "4,1,1,0,0\n"
      "10,1,2,0,0\n"
      "10,2,6,0,0\n"
      "10,3,11,0,0\n";
  const auto ts = ingest_traces_text(csv, schema);
  REQUIRE(ts.size() == 2);
  CHECK(ts[0].num_spv() == 1);
  CHECK(ts[0].spvs[0].pos.x == doctest::Approx(0.0));
  CHECK(ts[1].spvs[0].pos.x == doctest::Approx(2.0));
  CHECK(ts[1].comm[0].id == 2);
  CHECK(ts[1].sense[0].pos.x == doctest::Approx(11.0));
  CHECK_THROWS_AS(ingest_traces_text("0,1,2\n", schema), Error);
  CHECK_THROWS_AS(ingest_traces_text("", schema), Error);
}

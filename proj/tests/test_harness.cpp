#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "thzsim/harness.hpp"

using namespace thz;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("thz_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json tiny_config() {
  return json::parse(R"({
    "seed": 3,
    "bootstrap_resamples": 100,
    "generator": {"num_spv": 4, "num_comm": 1, "num_sense": 1},
    "splits": {"train": 6, "val": 4, "test": 4},
    "model": {"hops": 2, "embed": 4, "branch": 3, "hidden": [4, 4, 4], "sample_size": 3},
    "train": {"search_epochs": 2, "finetune_epochs": 3, "batch_size": 3},
    "sweep": {"variable": "d_max", "values": [4, 5]}
  })");
}

}  // namespace

TEST_CASE("config parsing: defaults, seeds and errors") {
  const ExperimentConfig c = experiment_config_from_json(tiny_config());
  CHECK(c.generator.seed == 3);
  CHECK(c.model.seed == 3);
  CHECK(c.train.seed == 3);
  CHECK(c.splits.train == 6);
  CHECK(c.requirements.d_max == doctest::Approx(5e-3));
  const ExperimentConfig again = experiment_config_from_json(to_json(c));
  CHECK(to_json(again) == to_json(c));

  json j = tiny_config();
  j["generator"]["seed"] = 11;
  CHECK(experiment_config_from_json(j).generator.seed == 11);

  j = tiny_config();
  j["lerning_rate"] = 1;
  CHECK_THROWS_WITH_AS(experiment_config_from_json(j), doctest::Contains("lerning_rate"), Error);
  j = tiny_config();
  j["splits"]["tset"] = 1;
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
  j = tiny_config();
  j["sweep"]["values"] = json::array();
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
  j = tiny_config();
  j["sweep"]["variable"] = "beamwidth";
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
  j = tiny_config();
  j["splits"]["test"] = 0;
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
  j = tiny_config();
  j["threads"] = "two";
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
  j = tiny_config();
  j["retrain_head"] = true;
  CHECK_THROWS_AS(experiment_config_from_json(j), Error);
}

TEST_CASE("channel section round trips") {
  ChannelConfig cfg;
  cfg.f = 0.9e12;
  cfg.beam_h = 0.2;
  const ChannelConfig back = channel_from_json(channel_to_json(cfg));
  CHECK(back.f == doctest::Approx(cfg.f));
  CHECK(back.beam_h == doctest::Approx(cfg.beam_h));
  CHECK(back.noise_floor == doctest::Approx(cfg.noise_floor));
}

TEST_CASE("environment overrides only touch output dir and threads") {
  ExperimentConfig c = experiment_config_from_json(tiny_config());
  setenv("THZ_OUT_DIR", "/tmp/thz_env_out", 1);
  setenv("THZ_THREADS", "3", 1);
  apply_env_overrides(c);
  CHECK(c.output_dir == fs::path("/tmp/thz_env_out"));
  CHECK(c.threads == 3);
  setenv("THZ_THREADS", "0", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), Error);
  setenv("THZ_THREADS", "2x", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), Error);
  unsetenv("THZ_OUT_DIR");
  unsetenv("THZ_THREADS");
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hit(50, 0);
  parallel_for(50, 4, [&](int i) { hit[i] += 1; });
  for (int h : hit) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 2, [](int i) { if (i == 7) throw Error("boom"); }), Error);
}

TEST_CASE("metrics csv round trip and schema checks") {
  const fs::path dir = scratch("metrics");
  const std::vector<MetricsRow> rows{{"nearest", 7, 3, 4, 0.75, -1}, {"exhaustive", 7, 4, 4, 1.0, -1}};
  write_metrics_csv(rows, dir / "m.csv");
  const auto back = read_metrics_csv(dir / "m.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].method == "nearest");
  CHECK(back[0].topology_id == 7);
  CHECK(back[0].ratio == doctest::Approx(0.75));
  CHECK(slurp(dir / "m.csv").rfind(std::string("# schema: ") + kMetricsSchema, 0) == 0);

  std::ofstream(dir / "old.csv") << "# schema: thz-metrics-v0\nmethod,topology_id,served,optimal,ratio,wall_time\n";
  CHECK_THROWS_WITH_AS(read_metrics_csv(dir / "old.csv"), doctest::Contains("schema"), Error);
  std::ofstream(dir / "hdr.csv") << "# schema: thz-metrics-v1\nmethod,served\n";
  CHECK_THROWS_AS(read_metrics_csv(dir / "hdr.csv"), Error);
  CHECK_THROWS_AS(read_metrics_csv(dir / "missing.csv"), Error);
}

TEST_CASE("bootstrap interval brackets the mean and is reproducible") {
  std::vector<double> xs;
  for (int i = 0; i < 200; ++i) xs.push_back(i % 5);
  const MeanCI a = bootstrap_mean_ci(xs, 1000, 1), b = bootstrap_mean_ci(xs, 1000, 1);
  CHECK(a.mean == doctest::Approx(2.0));
  CHECK(a.lo < a.mean);
  CHECK(a.hi > a.mean);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  // Standard error of the mean is sqrt(2 / 200) = 0.1; the 95% half width is near 0.2.
  CHECK(a.hi - a.lo == doctest::Approx(0.39).epsilon(0.15));
  const MeanCI c = bootstrap_mean_ci(std::vector<double>(10, 1.5), 50, 2);
  CHECK(c.lo == 1.5);
  CHECK(c.hi == 1.5);
  CHECK_THROWS_AS(bootstrap_mean_ci({}, 10, 1), Error);
}

TEST_CASE("pipeline stages run in order and reproduce byte for byte") {
  auto run = [](const fs::path& out) {
    ExperimentConfig c = experiment_config_from_json(tiny_config());
    c.output_dir = out;
    CHECK(cmd_generate(c) == 0);
    CHECK(cmd_label(c) == 0);
    CHECK(cmd_train(c) == 0);
    CHECK(cmd_evaluate(c) == 0);
    CHECK(cmd_explain(c, 1, true) == 0);
    CHECK(cmd_sweep(c) == 0);
  };
  const fs::path a = scratch("pipe_a"), b = scratch("pipe_b");
  run(a);
  run(b);
  for (const char* f : {"eval/metrics.csv", "eval/summary.json", "models/dynamic.json", "labels/test.jsonl",
                        "explain/topology_1.json", "sweep/sweep_d_max.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const auto rows = read_metrics_csv(a / "eval/metrics.csv");
  CHECK(rows.size() == 4 * 5);
  for (const auto& r : rows) CHECK(r.served <= r.optimal);

  ExperimentConfig c = experiment_config_from_json(tiny_config());
  c.output_dir = scratch("pipe_missing");
  CHECK_THROWS_WITH_AS(cmd_label(c), doctest::Contains("thz generate"), Error);
  CHECK_NOTHROW(cmd_generate(c));
  CHECK_THROWS_WITH_AS(cmd_train(c), doctest::Contains("thz label"), Error);
  c.generator.building_density = 0.2;
  CHECK_THROWS_WITH_AS(cmd_label(c), doctest::Contains("generate"), Error);
}

TEST_CASE("head retraining reuses a saved body") {
  const fs::path out = scratch("retrain");
  ExperimentConfig c = experiment_config_from_json(tiny_config());
  c.output_dir = out;
  cmd_generate(c);
  cmd_label(c);
  cmd_train(c);
  json j = tiny_config();
  j["retrain_head"] = true;
  j["base_model"] = (out / "models/dynamic.json").string();
  ExperimentConfig r = experiment_config_from_json(j);
  r.output_dir = out;
  const DynGnnModel base = DynGnnModel::load(out / "models/dynamic.json");
  CHECK(cmd_train(r) == 0);
  const DynGnnModel tuned = DynGnnModel::load(out / "models/dynamic.json");
  CHECK(tuned.fixed_architecture() == base.fixed_architecture());
  bool head_moved = false;
  for (const auto& p : base.weights().all()) {
    const auto& q = tuned.weights().get(p.name);
    if (p.name.rfind("head.", 0) == 0) head_moved = head_moved || q.value.values != p.value.values;
    else CHECK(q.value.values == p.value.values);
  }
  CHECK(head_moved);
}

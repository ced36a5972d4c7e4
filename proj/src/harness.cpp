#include "thzsim/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace thz {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

const char* const kMethods[] = {"dynamic_gnn", "fixed_gnn", "nearest", "exhaustive", "reformulated"};

void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error(std::string("config: section '") + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw Error(std::string("config: unknown key '") + it.key() + "' in section '" + section + "'");
  }
}

json read_json(const fs::path& p, const std::string& hint) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing " + p.string() + (hint.empty() ? "" : "; " + hint));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& p) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot open " + p.string() + " for writing");
  out << j.dump(2) << '\n';
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

void log_line(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

// Stage directories under the output root.
fs::path dataset_dir(const ExperimentConfig& c) { return c.output_dir / "dataset"; }
fs::path labels_dir(const ExperimentConfig& c) { return c.output_dir / "labels"; }
fs::path models_dir(const ExperimentConfig& c) { return c.output_dir / "models"; }
fs::path eval_dir(const ExperimentConfig& c) { return c.output_dir / "eval"; }

json requirements_json(const ServiceRequirements& r) { return {{"d_max_ms", r.d_max * 1e3}, {"sinr_min_db", r.sinr_min_db}}; }

}  // namespace

// ----- config ---------------------------------------------------------------

json channel_to_json(const ChannelConfig& cfg) {
  return {{"frequency_hz", cfg.f},
          {"absorption", cfg.absorption},
          {"tx_power_dbm", watt_to_dbm(cfg.tx_power)},
          {"bandwidth_hz", cfg.bandwidth},
          {"noise_dbm", watt_to_dbm(cfg.noise_floor)},
          {"side_lobe_ratio", cfg.side_lobe_ratio},
          {"beamwidth_h_deg", cfg.beam_h * 180.0 / std::numbers::pi},
          {"beamwidth_v_deg", cfg.beam_v * 180.0 / std::numbers::pi},
          {"rcs_m2", cfg.rcs},
          {"active_prob", cfg.active_prob}};
}

ChannelConfig channel_from_json(const json& j) {
  check_keys(j, "channel",
             {"frequency_hz", "absorption", "tx_power_dbm", "bandwidth_hz", "noise_dbm", "side_lobe_ratio", "beamwidth_h_deg",
              "beamwidth_v_deg", "rcs_m2", "active_prob"});
  ChannelConfig c;
  c.f = j.value("frequency_hz", c.f);
  c.absorption = j.value("absorption", c.absorption);
  if (j.contains("tx_power_dbm")) c.tx_power = dbm_to_watt(j.at("tx_power_dbm").get<double>());
  c.bandwidth = j.value("bandwidth_hz", c.bandwidth);
  if (j.contains("noise_dbm")) c.noise_floor = dbm_to_watt(j.at("noise_dbm").get<double>());
  c.side_lobe_ratio = j.value("side_lobe_ratio", c.side_lobe_ratio);
  if (j.contains("beamwidth_h_deg")) c.beam_h = deg_to_rad(j.at("beamwidth_h_deg").get<double>());
  if (j.contains("beamwidth_v_deg")) c.beam_v = deg_to_rad(j.at("beamwidth_v_deg").get<double>());
  c.rcs = j.value("rcs_m2", c.rcs);
  c.active_prob = j.value("active_prob", c.active_prob);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  channel.validate();
  generator.validate();
  requirements.validate();
  model.validate();
  if (splits.train < 1 || splits.val < 1 || splits.test < 1) throw Error("config: every split needs at least one topology");
  if (sweep.values.empty()) throw Error("config: sweep.values must not be empty");
  if (sweep.variable != "d_max" && sweep.variable != "sinr_min_db" && sweep.variable != "hops") {
    throw Error("config: sweep.variable must be d_max, sinr_min_db or hops (got '" + sweep.variable + "')");
  }
  if (sweep.variable == "hops") {
    for (double v : sweep.values) {
      if (v < 1 || v != std::floor(v)) throw Error("config: hop sweep values must be positive integers");
    }
  }
  if (threads < 1) throw Error("config: threads must be >= 1");
  if (bootstrap_resamples < 1) throw Error("config: bootstrap_resamples must be >= 1");
  if (retrain_head) {
    if (base_model.empty()) throw Error("config: retrain_head needs base_model");
    if (!fs::exists(base_model)) throw Error("config: base_model " + base_model.string() + " does not exist");
  }
}

json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"output_dir", c.output_dir.string()},
          {"threads", c.threads},
          {"bootstrap_resamples", c.bootstrap_resamples},
          {"record_wall_time", c.record_wall_time},
          {"retrain_head", c.retrain_head},
          {"base_model", c.base_model.string()},
          {"channel", channel_to_json(c.channel)},
          {"generator", to_json(c.generator)},
          {"requirements", requirements_json(c.requirements)},
          {"splits", {{"train", c.splits.train}, {"val", c.splits.val}, {"test", c.splits.test}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"sweep", {{"variable", c.sweep.variable}, {"values", c.sweep.values}, {"retrain", c.sweep.retrain}}}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  check_keys(j, "top level",
             {"seed", "output_dir", "threads", "bootstrap_resamples", "record_wall_time", "retrain_head", "base_model",
              "channel", "generator", "requirements", "splits", "model", "train", "sweep"});
  ExperimentConfig c;
  try {
    if (j.contains("channel")) c.channel = channel_from_json(j.at("channel"));
    if (j.contains("generator")) c.generator = generator_config_from_json(j.at("generator"));
    if (j.contains("requirements")) {
      const auto& r = j.at("requirements");
      check_keys(r, "requirements", {"d_max_ms", "sinr_min_db"});
      c.requirements.d_max = r.value("d_max_ms", c.requirements.d_max * 1e3) * 1e-3;
      c.requirements.sinr_min_db = r.value("sinr_min_db", c.requirements.sinr_min_db);
    }
    if (j.contains("splits")) {
      const auto& s = j.at("splits");
      check_keys(s, "splits", {"train", "val", "test"});
      c.splits.train = s.value("train", c.splits.train);
      c.splits.val = s.value("val", c.splits.val);
      c.splits.test = s.value("test", c.splits.test);
    }
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      check_keys(s, "sweep", {"variable", "values", "retrain"});
      c.sweep.variable = s.value("variable", c.sweep.variable);
      if (s.contains("values")) c.sweep.values = s.at("values").get<std::vector<double>>();
      c.sweep.retrain = s.value("retrain", c.sweep.retrain);
    }
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.threads = j.value("threads", c.threads);
    c.bootstrap_resamples = j.value("bootstrap_resamples", c.bootstrap_resamples);
    c.record_wall_time = j.value("record_wall_time", c.record_wall_time);
    c.retrain_head = j.value("retrain_head", c.retrain_head);
    c.base_model = j.value("base_model", std::string());
    const std::uint64_t seed = j.value("seed", c.seed);
    apply_seed(c, seed);
    if (j.contains("generator") && j["generator"].contains("seed")) c.generator.seed = j["generator"]["seed"];
    if (j.contains("model") && j["model"].contains("seed")) c.model.seed = j["model"]["seed"];
    if (j.contains("train") && j["train"].contains("seed")) c.train.seed = j["train"]["seed"];
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  json j = read_json(path, "pass an existing --config file");
  if (j.is_object() && j.contains("base_model") && j["base_model"].is_string()) {
    const fs::path base = j["base_model"].get<std::string>();
    if (!base.empty() && base.is_relative()) j["base_model"] = (path.parent_path() / base).string();
  }
  return experiment_config_from_json(j);
}

void apply_env_overrides(ExperimentConfig& c) {
  if (const char* out = std::getenv("THZ_OUT_DIR"); out && *out) c.output_dir = out;
  if (const char* t = std::getenv("THZ_THREADS"); t && *t) {
    char* end = nullptr;
    const long v = std::strtol(t, &end, 10);
    if (*end != '\0' || v < 1) throw Error(std::string("THZ_THREADS must be a positive integer, got '") + t + "'");
    c.threads = static_cast<int>(v);
  }
}

void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.generator.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ----- metrics --------------------------------------------------------------

namespace {

constexpr const char* kMetricsHeader = "method,topology_id,served,optimal,ratio,wall_time";
constexpr const char* kSweepHeader = "variable,x,method,n,mean,ci_lo,ci_hi";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "# schema: " << kMetricsSchema << '\n' << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    out << r.method << ',' << r.topology_id << ',' << r.served << ',' << r.optimal << ','
        << fmt("%.6f", r.ratio) << ',' << fmt("%.6f", r.wall_time) << '\n';
  }
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing metrics file " + path.string());
  std::string line;
  const std::string want = std::string("# schema: ") + kMetricsSchema;
  if (!std::getline(in, line) || line != want) {
    throw Error(path.string() + ": schema line is '" + line + "', expected '" + want + "'");
  }
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw Error(path.string() + ": header is '" + line + "', expected '" + kMetricsHeader + "'");
  }
  std::vector<MetricsRow> rows;
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 6) throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      MetricsRow r;
      r.method = cells[0];
      r.topology_id = std::stoull(cells[1]);
      r.served = std::stoi(cells[2]);
      r.optimal = std::stoi(cells[3]);
      r.ratio = std::stod(cells[4]);
      r.wall_time = std::stod(cells[5]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

MeanCI bootstrap_mean_ci(const std::vector<double>& xs, int resamples, std::uint64_t seed, double level) {
  if (xs.empty()) throw Error("bootstrap_mean_ci: empty sample");
  if (resamples < 1) throw Error("bootstrap_mean_ci: resamples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw Error("bootstrap_mean_ci: level must lie in (0, 1)");
  MeanCI r;
  double s = 0.0;
  for (double x : xs) s += x;
  r.mean = s / xs.size();
  Rng rng(splitmix64(seed ^ 0xB0075ull));
  std::vector<double> means(resamples);
  for (int b = 0; b < resamples; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += xs[rng.below(xs.size())];
    means[b] = acc / xs.size();
  }
  std::sort(means.begin(), means.end());
  const double a = (1.0 - level) / 2.0;
  auto at = [&](double q) {
    const double pos = q * (resamples - 1);
    const std::size_t i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t k = std::min<std::size_t>(i + 1, resamples - 1);
    return means[i] + (pos - i) * (means[k] - means[i]);
  };
  r.lo = at(a);
  r.hi = at(1.0 - a);
  return r;
}

// ----- pipeline stages ------------------------------------------------------

LabeledSplit label_split(const std::vector<Topology>& ts, const ChannelConfig& cfg, const ServiceRequirements& req,
                         int threads) {
  LabeledSplit s;
  s.topologies = ts;
  s.labels.resize(ts.size());
  parallel_for(static_cast<int>(ts.size()), threads,
               [&](int i) { s.labels[i] = label_dataset({ts[i]}, cfg, req).front(); });
  return s;
}

std::vector<PreparedGraph> prepare_split(const LabeledSplit& s, const ChannelConfig& cfg, const ModelConfig& mc,
                                         int threads) {
  std::vector<PreparedGraph> out(s.topologies.size());
  parallel_for(static_cast<int>(out.size()), threads, [&](int i) {
    out[i] = prepare_graph(s.topologies[i], cfg, mc, s.labels.empty() ? nullptr : &s.labels[i]);
  });
  return out;
}

Architecture fixed_baseline_architecture(int hops) {
  return Architecture{std::vector<NodeAgg>(hops, NodeAgg::SageMean), LayerAgg::Concat};
}

TrainedModels train_both(const ExperimentConfig& c, const std::vector<PreparedGraph>& train,
                         const std::vector<PreparedGraph>& val, bool log) {
  if (train.empty()) throw Error("train: no training topologies");
  const int feature_dim = train.front().graph.feature_dim;
  const int classes = train.front().graph.num_requests() + 1;
  auto progress = [&](const char* who) -> EpochCallback {
    if (!log) return nullptr;
    return [who](const char* phase, int epoch, double loss) {
      if (epoch % 10 == 0) log_line(std::string("[train] ") + who + " " + phase + " epoch " + std::to_string(epoch) +
                                    " loss " + fmt("%.5f", loss));
    };
  };
  TrainedModels m;
  m.dynamic = DynGnnModel(c.model, feature_dim, classes);
  m.dynamic_history = train_model(m.dynamic, train, val, c.train, progress("dynamic"));
  m.fixed = DynGnnModel(c.model, feature_dim, classes);
  m.fixed.set_fixed_architecture(fixed_baseline_architecture(c.model.hops));
  TrainConfig tf = c.train;
  tf.search_architecture = false;
  m.fixed_history = train_model(m.fixed, train, val, tf, progress("fixed"));
  return m;
}

std::vector<MetricsRow> evaluate_methods(const std::vector<Topology>& test, const std::vector<LabeledTopology>& labels,
                                         const DynGnnModel* dynamic, const DynGnnModel* fixed,
                                         const ChannelConfig& cfg, const ServiceRequirements& req, int threads,
                                         bool with_reformulated) {
  if (!labels.empty() && labels.size() != test.size()) throw Error("evaluate: label count differs from topology count");
  using clock = std::chrono::steady_clock;
  std::vector<std::vector<MetricsRow>> per(test.size());
  parallel_for(static_cast<int>(test.size()), threads, [&](int i) {
    const Topology& t = test[i];
    LinkEvaluator ev(t, cfg);
    auto t0 = clock::now();
    const SolverResult ex = exhaustive_solve(ev, req);
    const double ex_time = std::chrono::duration<double>(clock::now() - t0).count();
    const int opt = ex.objective;
    if (!labels.empty() && labels[i].optimal_objective != opt) {
      throw Error("evaluate: labels for topology " + std::to_string(t.seed) +
                  " record a different optimum; rerun `label` with the current requirements");
    }
    auto row = [&](const char* method, int served, double secs) {
      if (served > opt) throw Error(std::string("evaluate: ") + method + " exceeds the exhaustive optimum");
      MetricsRow r;
      r.method = method;
      r.topology_id = t.seed;
      r.served = served;
      r.optimal = opt;
      r.ratio = opt == 0 ? 1.0 : static_cast<double>(served) / opt;
      r.wall_time = secs;
      per[i].push_back(r);
    };
    auto gnn = [&](const char* method, const DynGnnModel* m) {
      if (!m) return;
      auto s = clock::now();
      const Assignment a = infer_assignment(*m, t, cfg);
      const double secs = std::chrono::duration<double>(clock::now() - s).count();
      if (!validate_assignment(a).empty()) throw Error(std::string("evaluate: ") + method + " produced an invalid assignment");
      row(method, ev.report(a, req).objective(), secs);
    };
    gnn(kMethods[0], dynamic);
    gnn(kMethods[1], fixed);
    const SolverResult nh = nearest_heuristic(ev, req);
    row(kMethods[2], nh.objective, nh.wall_time);
    row(kMethods[3], opt, ex_time);
    if (with_reformulated) {
      const SolverResult rf = reformulated_solve(ev, req);
      if (rf.optimal && rf.objective != opt) {
        throw Error("evaluate: reformulated solver disagrees with exhaustive on topology " + std::to_string(t.seed));
      }
      row(kMethods[4], rf.objective, rf.wall_time);
    }
  });
  std::vector<MetricsRow> rows;
  for (auto& p : per) rows.insert(rows.end(), p.begin(), p.end());
  return rows;
}

namespace {

json servers_json(const Assignment& a) { return {{"comm", a.comm_servers()}, {"sense", a.sense_servers()}}; }

}  // namespace

json explain_assignment(const Topology& topo, const Assignment& chosen, const std::string& method,
                        const ChannelConfig& cfg, const ServiceRequirements& req) {
  LinkEvaluator ev(topo, cfg);
  const auto violations = validate_assignment(chosen);
  json j;
  j["topology_id"] = topo.seed;
  j["method"] = method;
  j["requirements"] = requirements_json(req);
  j["valid"] = violations.empty();
  j["assignment"] = servers_json(chosen);
  json inactive = json::array();
  for (int u = 0; u < topo.num_spv(); ++u) {
    if (!topo.spvs[u].active) inactive.push_back(u);
  }
  j["inactive_spvs"] = inactive;
  const LinkReport rep = ev.report(chosen, req);
  j["report"] = to_json(rep);
  const SolverResult nh = nearest_heuristic(ev, req);
  j["heuristic"] = {{"assignment", servers_json(nh.assignment)}, {"objective", nh.objective}};
  j["objective"] = rep.objective();
  j["gain_over_heuristic"] = rep.objective() - nh.objective;
  return j;
}

json explain_candidates(const Topology& topo, const Assignment& chosen, const ChannelConfig& cfg,
                        const ServiceRequirements& req) {
  LinkEvaluator ev(topo, cfg);
  std::vector<int> cs = chosen.comm_servers(), ss = chosen.sense_servers();
  if (std::count(cs.begin(), cs.end(), -1) + std::count(ss.begin(), ss.end(), -1) > 0) {
    throw Error("explain: candidate dump needs a valid assignment");
  }
  json out = json::array();
  auto probe = [&](const char* kind, int col, std::vector<int>& servers) {
    const int keep = servers[col];
    for (int u = 0; u < topo.num_spv(); ++u) {
      servers[col] = u;
      const bool comm = kind[0] == 'c';
      const double sinr = comm ? ev.comm_sinr_partial(col, cs, ss) : ev.sense_sinr_partial(col, cs, ss);
      out.push_back({{"kind", kind},
                     {"request", col},
                     {"spv", u},
                     {"chosen", u == keep},
                     {"sinr", sinr},
                     {"objective", ev.objective_fast(cs, ss, req)}});
    }
    servers[col] = keep;
  };
  for (int m = 0; m < topo.num_comm(); ++m) probe("comm", m, cs);
  for (int n = 0; n < topo.num_sense(); ++n) probe("sense", n, ss);
  return out;
}

// ----- commands -------------------------------------------------------------

namespace {

fs::path require_manifest(const fs::path& p, const char* stage) {
  if (!fs::exists(p)) {
    throw Error("missing " + p.string() + "; run `thz " + stage + "` with the same --config/--out first");
  }
  return p;
}

GeneratorConfig dataset_generator(const ExperimentConfig& c) {
  GeneratorConfig g = c.generator;
  if (g.num_spv <= 0) throw Error("config: generator.num_spv must be positive");
  return g;
}

Dataset load_dataset_stage(const ExperimentConfig& c) {
  const fs::path m = require_manifest(dataset_dir(c) / "manifest.json", "generate");
  Dataset ds = read_dataset(m);
  if (config_hash(ds.config) != config_hash(dataset_generator(c))) {
    throw Error(m.string() + " was generated with a different generator section; rerun `thz generate`");
  }
  return ds;
}

struct LabelStage {
  Dataset ds;
  std::vector<LabeledTopology> train, val, test;
};

LabelStage load_label_stage(const ExperimentConfig& c) {
  const fs::path m = require_manifest(labels_dir(c) / "manifest.json", "label");
  const json j = read_json(m, "");
  if (j.value("kind", "") != "labels" || j.value("version", 0) != kManifestVersion) {
    throw Error(m.string() + ": not a version " + std::to_string(kManifestVersion) + " label manifest");
  }
  if (j.at("requirements") != requirements_json(c.requirements)) {
    throw Error(m.string() + ": labels were made for other service requirements; rerun `thz label`");
  }
  if (j.at("channel") != channel_to_json(c.channel)) {
    throw Error(m.string() + ": labels were made with another channel section; rerun `thz label`");
  }
  LabelStage s;
  s.ds = load_dataset_stage(c);
  s.train = load_labels(labels_dir(c) / "train.jsonl");
  s.val = load_labels(labels_dir(c) / "val.jsonl");
  s.test = load_labels(labels_dir(c) / "test.jsonl");
  if (s.train.size() != s.ds.train.size() || s.val.size() != s.ds.val.size() || s.test.size() != s.ds.test.size()) {
    throw Error(m.string() + ": label counts do not match the dataset; rerun `thz label`");
  }
  return s;
}

void write_history_csv(const TrainHistory& h, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "phase,epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < h.search_train_loss.size(); ++e) {
    out << "search," << e << ',' << fmt("%.9g", h.search_train_loss[e]) << ','
        << (e < h.search_val_loss.size() ? fmt("%.9g", h.search_val_loss[e]) : std::string()) << '\n';
  }
  for (std::size_t e = 0; e < h.finetune_loss.size(); ++e) {
    out << "finetune," << e << ",," << fmt("%.9g", h.finetune_loss[e]) << '\n';
  }
}

LabeledSplit with_labels(const std::vector<Topology>& ts, const std::vector<LabeledTopology>& ls) {
  LabeledSplit s;
  s.topologies = ts;
  s.labels = ls;
  return s;
}

// Head-only retraining of a saved model for a new request count.
DynGnnModel retrain_head(const ExperimentConfig& c, const std::vector<PreparedGraph>& train,
                         const std::vector<PreparedGraph>& val, TrainHistory& hist) {
  DynGnnModel m = DynGnnModel::load(c.base_model);
  if (!m.fixed_architecture()) throw Error(c.base_model.string() + ": base model has no discretized architecture");
  const int feature_dim = train.front().graph.feature_dim;
  if (m.feature_dim() != feature_dim) {
    throw Error("retrain_head: base model reads " + std::to_string(m.feature_dim()) + " features but the data has " +
                std::to_string(feature_dim) + "; set model.slots to the base model's capacities");
  }
  m.reset_head(train.front().graph.num_requests() + 1, c.model.seed);
  TrainConfig tc = c.train;
  tc.search_architecture = false;
  hist = train_model(m, train, val, tc);
  return m;
}

void write_models_manifest(const ExperimentConfig& c, const TrainedModels& m, const fs::path& dir) {
  json j{{"kind", "models"},
         {"version", kManifestVersion},
         {"requirements", requirements_json(c.requirements)},
         {"model", to_json(c.model)},
         {"train", to_json(c.train)},
         {"dynamic", {{"file", "dynamic.json"}, {"architecture", to_string(*m.dynamic.fixed_architecture())}}},
         {"fixed", {{"file", "fixed.json"}, {"architecture", to_string(*m.fixed.fixed_architecture())}}}};
  write_json(j, dir / "manifest.json");
}

struct ModelStage {
  DynGnnModel dynamic, fixed;
};

ModelStage load_model_stage(const ExperimentConfig& c) {
  const fs::path m = require_manifest(models_dir(c) / "manifest.json", "train");
  const json j = read_json(m, "");
  if (j.value("kind", "") != "models" || j.value("version", 0) != kManifestVersion) {
    throw Error(m.string() + ": not a version " + std::to_string(kManifestVersion) + " model manifest");
  }
  ModelStage s;
  s.dynamic = DynGnnModel::load(models_dir(c) / j.at("dynamic").at("file").get<std::string>());
  s.fixed = DynGnnModel::load(models_dir(c) / j.at("fixed").at("file").get<std::string>());
  return s;
}

TrainedModels train_for(const ExperimentConfig& c, const LabeledSplit& tr, const LabeledSplit& va) {
  const auto gtr = prepare_split(tr, c.channel, c.model, c.threads);
  const auto gva = prepare_split(va, c.channel, c.model, c.threads);
  return train_both(c, gtr, gva, true);
}

json method_summary(const std::vector<MetricsRow>& rows, const ExperimentConfig& c) {
  std::map<std::string, std::vector<double>> served, ratio;
  for (const auto& r : rows) {
    served[r.method].push_back(r.served);
    ratio[r.method].push_back(r.ratio);
  }
  json j = json::object();
  for (const char* m : kMethods) {
    if (!served.count(m)) continue;
    const auto& xs = served[m];
    const MeanCI ci = bootstrap_mean_ci(xs, c.bootstrap_resamples, c.seed);
    double opt = 0.0, got = 0.0;
    for (const auto& r : rows) {
      if (r.method == m) opt += r.optimal, got += r.served;
    }
    j[m] = {{"n", xs.size()},
            {"mean_served", ci.mean},
            {"ci_lo", ci.lo},
            {"ci_hi", ci.hi},
            {"served_over_optimal", opt > 0 ? got / opt : 1.0}};
  }
  auto paired = [&](const char* a, const char* b) -> json {
    if (!served.count(a) || !served.count(b)) return nullptr;
    std::vector<double> d(served[a].size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = served[a][i] - served[b][i];
    const MeanCI ci = bootstrap_mean_ci(d, c.bootstrap_resamples, c.seed);
    return {{"mean", ci.mean}, {"ci_lo", ci.lo}, {"ci_hi", ci.hi}};
  };
  j["dynamic_minus_fixed"] = paired("dynamic_gnn", "fixed_gnn");
  j["dynamic_minus_nearest"] = paired("dynamic_gnn", "nearest");
  return j;
}

void strip_times(std::vector<MetricsRow>& rows, const ExperimentConfig& c) {
  if (c.record_wall_time) return;
  for (auto& r : rows) r.wall_time = -1.0;
}

}  // namespace

int cmd_generate(const ExperimentConfig& c) {
  const Dataset ds = generate_dataset(dataset_generator(c), c.splits.train, c.splits.val, c.splits.test);
  write_dataset(ds, dataset_dir(c));
  json snapshot = to_json(c);
  snapshot.erase("output_dir");
  write_json(snapshot, c.output_dir / "config.json");
  log_line("[generate] " + std::to_string(ds.train.size() + ds.val.size() + ds.test.size()) + " topologies -> " +
           dataset_dir(c).string());
  return 0;
}

int cmd_label(const ExperimentConfig& c) {
  const Dataset ds = load_dataset_stage(c);
  const fs::path dir = labels_dir(c);
  fs::create_directories(dir);
  const std::pair<const char*, const std::vector<Topology>*> splits[] = {
      {"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
  json counts = json::object();
  for (const auto& [name, ts] : splits) {
    const LabeledSplit s = label_split(*ts, c.channel, c.requirements, c.threads);
    save_labels(s.labels, dir / (std::string(name) + ".jsonl"));
    counts[name] = s.labels.size();
  }
  write_json({{"kind", "labels"},
              {"version", kManifestVersion},
              {"tie_break", "link_quality"},
              {"requirements", requirements_json(c.requirements)},
              {"channel", channel_to_json(c.channel)},
              {"counts", counts}},
             dir / "manifest.json");
  log_line("[label] wrote " + dir.string());
  return 0;
}

int cmd_train(const ExperimentConfig& c) {
  const LabelStage s = load_label_stage(c);
  const fs::path dir = models_dir(c);
  fs::create_directories(dir);
  const auto gtr = prepare_split(with_labels(s.ds.train, s.train), c.channel, c.model, c.threads);
  const auto gva = prepare_split(with_labels(s.ds.val, s.val), c.channel, c.model, c.threads);
  TrainedModels m;
  if (c.retrain_head) {
    m.dynamic = retrain_head(c, gtr, gva, m.dynamic_history);
    m.fixed = m.dynamic;
    m.fixed_history = m.dynamic_history;
    log_line("[train] retrained the head of " + c.base_model.string());
  } else {
    m = train_both(c, gtr, gva, true);
  }
  m.dynamic.save(dir / "dynamic.json");
  m.fixed.save(dir / "fixed.json");
  write_history_csv(m.dynamic_history, dir / "dynamic_history.csv");
  write_history_csv(m.fixed_history, dir / "fixed_history.csv");
  write_models_manifest(c, m, dir);
  log_line("[train] dynamic architecture " + to_string(*m.dynamic.fixed_architecture()));
  return 0;
}

int cmd_evaluate(const ExperimentConfig& c) {
  const LabelStage s = load_label_stage(c);
  const ModelStage m = load_model_stage(c);
  const fs::path dir = eval_dir(c);
  auto rows = evaluate_methods(s.ds.test, s.test, &m.dynamic, &m.fixed, c.channel, c.requirements, c.threads);
  strip_times(rows, c);
  write_metrics_csv(rows, dir / "metrics.csv");
  write_json(method_summary(rows, c), dir / "summary.json");
  const auto gte = prepare_split(with_labels(s.ds.test, s.test), c.channel, m.dynamic.config(), c.threads);
  export_embeddings(m.dynamic, gte, dir / "embeddings.csv");
  log_line("[evaluate] wrote " + (dir / "metrics.csv").string());
  return 0;
}

int cmd_sweep(const ExperimentConfig& c) {
  const Dataset ds = load_dataset_stage(c);
  const fs::path dir = c.output_dir / "sweep";
  fs::create_directories(dir);
  const std::string var = c.sweep.variable;
  std::optional<ModelStage> shared;
  if (var != "hops" && !c.sweep.retrain) shared = load_model_stage(c);

  std::ostringstream csv;
  csv << "# schema: " << kSweepSchema << '\n' << kSweepHeader << '\n';
  for (double x : c.sweep.values) {
    ExperimentConfig cx = c;
    if (var == "d_max") cx.requirements.d_max = x * 1e-3;
    if (var == "sinr_min_db") cx.requirements.sinr_min_db = x;
    if (var == "hops") cx.model.hops = static_cast<int>(x);
    cx.requirements.validate();
    cx.model.validate();
    const std::string tag = var + "=" + fmt("%g", x);
    log_line("[sweep] " + tag);
    const LabeledSplit te = label_split(ds.test, cx.channel, cx.requirements, c.threads);
    std::vector<MetricsRow> rows;
    if (shared) {
      rows = evaluate_methods(te.topologies, te.labels, &shared->dynamic, &shared->fixed, cx.channel, cx.requirements,
                              c.threads);
    } else {
      const LabeledSplit tr = label_split(ds.train, cx.channel, cx.requirements, c.threads);
      const LabeledSplit va = label_split(ds.val, cx.channel, cx.requirements, c.threads);
      const TrainedModels m = train_for(cx, tr, va);
      m.dynamic.save(dir / ("dynamic_" + var + "_" + fmt("%g", x) + ".json"));
      rows = evaluate_methods(te.topologies, te.labels, &m.dynamic, &m.fixed, cx.channel, cx.requirements, c.threads);
    }
    strip_times(rows, c);
    write_metrics_csv(rows, dir / ("metrics_" + var + "_" + fmt("%g", x) + ".csv"));
    const json sum = method_summary(rows, c);
    for (const char* meth : kMethods) {
      if (!sum.contains(meth)) continue;
      const auto& s = sum[meth];
      csv << var << ',' << fmt("%g", x) << ',' << meth << ',' << s["n"].get<int>() << ','
          << fmt("%.6f", s["mean_served"].get<double>()) << ',' << fmt("%.6f", s["ci_lo"].get<double>()) << ','
          << fmt("%.6f", s["ci_hi"].get<double>()) << '\n';
    }
  }
  const fs::path csv_path = dir / ("sweep_" + var + ".csv");
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw Error("cannot open " + csv_path.string() + " for writing");
    out << csv.str();
  }
  std::ofstream gp(dir / ("sweep_" + var + ".gp"), std::ios::binary);
  gp << "set datafile separator ','\n"
     << "set key left top\n"
     << "set xlabel '" << var << "'\n"
     << "set ylabel 'mean served vehicles'\n"
     << "set terminal pngcairo size 800,500\n"
     << "set output 'sweep_" << var << ".png'\n"
     << "methods = \"";
  for (std::size_t i = 0; i < std::size(kMethods); ++i) gp << (i ? " " : "") << kMethods[i];
  gp << "\"\n"
     << "plot for [m in methods] '< grep \",'.m.',\" sweep_" << var
     << ".csv' using 2:5:6:7 with yerrorlines title m\n";
  log_line("[sweep] wrote " + csv_path.string());
  return 0;
}

int cmd_explain(const ExperimentConfig& c, int topology_index, bool dump_links) {
  const Dataset ds = load_dataset_stage(c);
  if (topology_index < 0 || topology_index >= static_cast<int>(ds.test.size())) {
    throw Error("explain: topology index " + std::to_string(topology_index) + " outside the test split of " +
                std::to_string(ds.test.size()));
  }
  const ModelStage m = load_model_stage(c);
  const Topology& t = ds.test[topology_index];
  const Assignment a = infer_assignment(m.dynamic, t, c.channel);
  json j = explain_assignment(t, a, "dynamic_gnn", c.channel, c.requirements);
  j["architecture"] = to_string(*m.dynamic.fixed_architecture());
  const SolverResult ex = exhaustive_solve(t, c.channel, c.requirements);
  j["optimal"] = {{"assignment", servers_json(ex.assignment)}, {"objective", ex.objective}};
  if (dump_links) j["candidates"] = explain_candidates(t, a, c.channel, c.requirements);
  const fs::path out = c.output_dir / "explain" / ("topology_" + std::to_string(topology_index) + ".json");
  write_json(j, out);
  log_line("[explain] wrote " + out.string());
  return 0;
}

}  // namespace thz

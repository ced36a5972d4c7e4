#include "thzsim/scenario.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "thzsim/channel.hpp"

namespace thz {

using nlohmann::json;

double ServiceRequirements::sinr_min_linear() const { return db_to_linear(sinr_min_db); }

void ServiceRequirements::validate() const {
  if (!(d_max > 0)) throw Error("requirements: d_max must be positive");
  if (!std::isfinite(sinr_min_db)) throw Error("requirements: sinr_min_db must be finite");
}

void validate_topology(const Topology& topo) {
  std::set<int> ids;
  auto check = [&](int id, Point2D p) {
    if (!ids.insert(id).second) throw Error("duplicate vehicle id " + std::to_string(id));
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw Error("non-finite position for vehicle " + std::to_string(id));
  };
  for (const auto& s : topo.spvs) check(s.id, s.pos);
  for (const auto& c : topo.comm) check(c.id, c.pos);
  for (const auto& s : topo.sense) check(s.id, s.pos);
  if (topo.spvs.empty() || topo.comm.empty() || topo.sense.empty()) {
    throw Error("topology needs at least one SPV, one comm and one sense request");
  }
}

// ---------------------------------------------------------------------------
// RNG

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next();
  } while (x >= limit);
  return x % n;
}

// ---------------------------------------------------------------------------
// Generator

void GeneratorConfig::validate() const {
  if (!(area_w > 0 && area_h > 0 && cell_size > 0)) throw Error("generator: area and cell size must be positive");
  if (!(building_density >= 0 && building_density <= 1)) throw Error("generator: building_density must lie in [0,1]");
  if (!(active_prob >= 0 && active_prob <= 1)) throw Error("generator: active_prob must lie in [0,1]");
  if (street_period <= 0 || street_width < 0) throw Error("generator: invalid street grid");
  if (num_spv < 1 || num_comm < 1 || num_sense < 1) throw Error("generator: vehicle counts must be >= 1");
  if (!(building_margin >= 0 && 2 * building_margin < cell_size)) throw Error("generator: building margin too large");
  if (!(demand_bits > 0)) throw Error("generator: demand_bits must be positive");
}

json to_json(const GeneratorConfig& gc) {
  return json{{"area_w", gc.area_w},
              {"area_h", gc.area_h},
              {"cell_size", gc.cell_size},
              {"street_period", gc.street_period},
              {"street_width", gc.street_width},
              {"building_density", gc.building_density},
              {"building_margin", gc.building_margin},
              {"num_spv", gc.num_spv},
              {"num_comm", gc.num_comm},
              {"num_sense", gc.num_sense},
              {"demand_bits", gc.demand_bits},
              {"active_prob", gc.active_prob},
              {"min_separation", gc.min_separation},
              {"seed", gc.seed}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig gc;
  gc.area_w = j.value("area_w", gc.area_w);
  gc.area_h = j.value("area_h", gc.area_h);
  gc.cell_size = j.value("cell_size", gc.cell_size);
  gc.street_period = j.value("street_period", gc.street_period);
  gc.street_width = j.value("street_width", gc.street_width);
  gc.building_density = j.value("building_density", gc.building_density);
  gc.building_margin = j.value("building_margin", gc.building_margin);
  gc.num_spv = j.value("num_spv", gc.num_spv);
  gc.num_comm = j.value("num_comm", gc.num_comm);
  gc.num_sense = j.value("num_sense", gc.num_sense);
  gc.demand_bits = j.value("demand_bits", gc.demand_bits);
  gc.active_prob = j.value("active_prob", gc.active_prob);
  gc.min_separation = j.value("min_separation", gc.min_separation);
  gc.seed = j.value("seed", gc.seed);
  return gc;
}

namespace {

struct StreetCell {
  int cx, cy;
  bool vertical, horizontal;
};

}  // namespace

Topology generate_topology(const GeneratorConfig& gc) {
  gc.validate();
  Rng rng(splitmix64(gc.seed));
  const int nx = static_cast<int>(std::floor(gc.area_w / gc.cell_size));
  const int ny = static_cast<int>(std::floor(gc.area_h / gc.cell_size));

  std::vector<StreetCell> streets;
  Topology t;
  t.seed = gc.seed;
  for (int cy = 0; cy < ny; ++cy) {
    for (int cx = 0; cx < nx; ++cx) {
      const bool vertical = cx % gc.street_period < gc.street_width;
      const bool horizontal = cy % gc.street_period < gc.street_width;
      if (vertical || horizontal) {
        streets.push_back({cx, cy, vertical, horizontal});
      } else if (rng.bernoulli(gc.building_density)) {
        const double x0 = cx * gc.cell_size + gc.building_margin;
        const double y0 = cy * gc.cell_size + gc.building_margin;
        t.obstacles.push_back(Obstacle::rectangle(x0, y0, x0 + gc.cell_size - 2 * gc.building_margin,
                                                  y0 + gc.cell_size - 2 * gc.building_margin));
      }
    }
  }
  if (streets.empty()) throw Error("generator: infeasible street grid (no street cells)");

  const int total = gc.num_spv + gc.num_comm + gc.num_sense;
  std::vector<Point2D> placed;
  std::vector<double> headings;
  constexpr int kMaxAttempts = 10000;
  for (int k = 0; k < total; ++k) {
    bool ok = false;
    for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
      const StreetCell& cell = streets[rng.below(streets.size())];
      const Point2D p{(cell.cx + rng.uniform()) * gc.cell_size, (cell.cy + rng.uniform()) * gc.cell_size};
      const bool clear = std::none_of(placed.begin(), placed.end(),
                                      [&](Point2D q) { return distance(p, q) < gc.min_separation; });
      if (!clear) continue;
      // Lane direction: 0, pi/2, pi or 3pi/2 depending on the street orientation.
      int dir;
      if (cell.vertical && cell.horizontal) {
        dir = static_cast<int>(rng.below(4));
      } else if (cell.vertical) {
        dir = rng.bernoulli(0.5) ? 1 : 3;
      } else {
        dir = rng.bernoulli(0.5) ? 0 : 2;
      }
      placed.push_back(p);
      headings.push_back(dir * std::numbers::pi / 2.0);
      ok = true;
    }
    if (!ok) throw Error("generator: infeasible density, no street room for all vehicles");
  }

  int id = 0;
  for (int u = 0; u < gc.num_spv; ++u, ++id) {
    t.spvs.push_back(Spv{id, placed[id], headings[id], rng.bernoulli(gc.active_prob)});
  }
  for (int m = 0; m < gc.num_comm; ++m, ++id) t.comm.push_back(CommRequest{id, placed[id], gc.demand_bits});
  for (int n = 0; n < gc.num_sense; ++n, ++id) t.sense.push_back(SenseRequest{id, placed[id]});
  return t;
}

Dataset generate_dataset(const GeneratorConfig& gc, int n_train, int n_val, int n_test) {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw Error("dataset split sizes must be >= 1");
  Dataset ds;
  ds.config = gc;
  auto fill = [&](std::vector<Topology>& out, std::uint64_t first, int count) {
    out.reserve(count);
    for (int k = 0; k < count; ++k) {
      GeneratorConfig g = gc;
      g.seed = first + static_cast<std::uint64_t>(k);
      out.push_back(generate_topology(g));
    }
  };
  fill(ds.train, gc.seed, n_train);
  fill(ds.val, gc.seed + n_train, n_val);
  fill(ds.test, gc.seed + n_train + n_val, n_test);
  return ds;
}

std::uint64_t config_hash(const GeneratorConfig& gc) {
  const std::string s = to_json(gc).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Serialization

json topology_to_json(const Topology& t) {
  json j;
  j["version"] = kTopologySchemaVersion;
  j["seed"] = t.seed;
  j["spvs"] = json::array();
  for (const auto& s : t.spvs) {
    j["spvs"].push_back({{"id", s.id}, {"x", s.pos.x}, {"y", s.pos.y}, {"heading", s.heading}, {"active", s.active}});
  }
  j["comm"] = json::array();
  for (const auto& c : t.comm) {
    j["comm"].push_back({{"id", c.id}, {"x", c.pos.x}, {"y", c.pos.y}, {"demand_bits", c.demand_bits}});
  }
  j["sense"] = json::array();
  for (const auto& s : t.sense) j["sense"].push_back({{"id", s.id}, {"x", s.pos.x}, {"y", s.pos.y}});
  j["obstacles"] = json::array();
  for (const auto& o : t.obstacles) {
    json verts = json::array();
    for (const auto& v : o.vertices()) verts.push_back({v.x, v.y});
    j["obstacles"].push_back(verts);
  }
  return j;
}

Topology topology_from_json(const json& j) {
  try {
    if (!j.is_object() || !j.contains("version")) throw Error("topology record: missing version field");
    const int version = j.at("version").get<int>();
    if (version != kTopologySchemaVersion) {
      throw Error("topology record: unsupported schema version " + std::to_string(version));
    }
    Topology t;
    t.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("spvs")) {
      t.spvs.push_back(Spv{s.at("id").get<int>(), {s.at("x").get<double>(), s.at("y").get<double>()},
                           s.at("heading").get<double>(), s.at("active").get<bool>()});
    }
    for (const auto& c : j.at("comm")) {
      t.comm.push_back(CommRequest{c.at("id").get<int>(), {c.at("x").get<double>(), c.at("y").get<double>()},
                                   c.at("demand_bits").get<double>()});
    }
    for (const auto& s : j.at("sense")) {
      t.sense.push_back(SenseRequest{s.at("id").get<int>(), {s.at("x").get<double>(), s.at("y").get<double>()}});
    }
    for (const auto& o : j.at("obstacles")) {
      if (o.size() != 4) throw Error("topology record: obstacle needs 4 vertices");
      std::array<Point2D, 4> v;
      for (int k = 0; k < 4; ++k) v[k] = {o[k].at(0).get<double>(), o[k].at(1).get<double>()};
      t.obstacles.emplace_back(v);
    }
    return t;
  } catch (const json::exception& e) {
    throw Error(std::string("topology record: schema violation: ") + e.what());
  }
}

void save_topologies(const std::vector<Topology>& ts, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& t : ts) out << topology_to_json(t).dump() << '\n';
}

std::vector<Topology> load_topologies(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Topology> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(topology_from_json(j));
  }
  return out;
}

void save_topology(const Topology& t, const std::filesystem::path& path) { save_topologies({t}, path); }

Topology load_topology(const std::filesystem::path& path) {
  auto ts = load_topologies(path);
  if (ts.size() != 1) throw Error(path.string() + ": expected exactly one topology record");
  return ts.front();
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_topologies(ds.train, dir / "train.jsonl");
  save_topologies(ds.val, dir / "val.jsonl");
  save_topologies(ds.test, dir / "test.jsonl");
  auto seeds = [](const std::vector<Topology>& ts) {
    json a = json::array();
    for (const auto& t : ts) a.push_back(t.seed);
    return a;
  };
  json m;
  m["version"] = kTopologySchemaVersion;
  m["kind"] = "dataset";
  m["generator"] = to_json(ds.config);
  m["config_hash"] = config_hash(ds.config);
  m["splits"] = {{"train", seeds(ds.train)}, {"val", seeds(ds.val)}, {"test", seeds(ds.test)}};
  m["files"] = {{"train", "train.jsonl"}, {"val", "val.jsonl"}, {"test", "test.jsonl"}};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
}

namespace {

json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing manifest " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(p.string() + ": " + e.what());
  }
}

}  // namespace

Dataset regenerate_from_manifest(const std::filesystem::path& manifest) {
  const json m = read_json_file(manifest);
  Dataset ds;
  ds.config = generator_config_from_json(m.at("generator"));
  if (m.at("config_hash").get<std::uint64_t>() != config_hash(ds.config)) {
    throw Error(manifest.string() + ": config hash mismatch");
  }
  auto regen = [&](const json& seeds, std::vector<Topology>& out) {
    for (const auto& s : seeds) {
      GeneratorConfig g = ds.config;
      g.seed = s.get<std::uint64_t>();
      out.push_back(generate_topology(g));
    }
  };
  regen(m.at("splits").at("train"), ds.train);
  regen(m.at("splits").at("val"), ds.val);
  regen(m.at("splits").at("test"), ds.test);
  return ds;
}

Dataset read_dataset(const std::filesystem::path& manifest) {
  const json m = read_json_file(manifest);
  const auto dir = manifest.parent_path();
  Dataset ds;
  ds.config = generator_config_from_json(m.at("generator"));
  ds.train = load_topologies(dir / m.at("files").at("train").get<std::string>());
  ds.val = load_topologies(dir / m.at("files").at("val").get<std::string>());
  ds.test = load_topologies(dir / m.at("files").at("test").get<std::string>());
  return ds;
}

// ---------------------------------------------------------------------------
// Traces

namespace {

struct TraceRow {
  double time;
  int id;
  double x, y, heading;
};

double parse_double(const std::string& s, int lineno) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("trace line " + std::to_string(lineno) + ": cannot parse number '" + s + "'");
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
}

}  // namespace

std::vector<Topology> ingest_traces_text(const std::string& csv, const TraceSchema& schema) {
  if (!(schema.interval > 0)) throw Error("trace schema: interval must be positive");
  if (schema.role_cycle.empty()) throw Error("trace schema: empty role cycle");
  std::vector<TraceRow> rows;
  std::istringstream in(csv);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (rows.empty() && line.rfind("time", 0) == 0) continue;  // header
    std::vector<std::string> cols;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cols.push_back(trim(cell));
    if (cols.size() != 5) {
      throw Error("trace line " + std::to_string(lineno) + ": expected 5 columns (time,id,x,y,heading), got " +
                  std::to_string(cols.size()));
    }
    const double id = parse_double(cols[1], lineno);
    if (id != std::floor(id)) throw Error("trace line " + std::to_string(lineno) + ": id must be an integer");
    rows.push_back({parse_double(cols[0], lineno), static_cast<int>(id), parse_double(cols[2], lineno),
                    parse_double(cols[3], lineno), parse_double(cols[4], lineno)});
  }
  if (rows.empty()) throw Error("trace file is empty");
  std::stable_sort(rows.begin(), rows.end(), [](const TraceRow& a, const TraceRow& b) { return a.time < b.time; });

  const double t0 = rows.front().time;
  const double t_end = rows.back().time;
  std::vector<Topology> out;
  std::size_t cursor = 0;
  std::map<int, TraceRow> last;  // id -> latest report
  const double snap_eps = 1e-9 * std::max(1.0, std::abs(t_end));
  for (int k = 0;; ++k) {
    const double ts = t0 + k * schema.interval;
    if (ts > t_end + snap_eps) break;
    while (cursor < rows.size() && rows[cursor].time <= ts + snap_eps) {
      last[rows[cursor].id] = rows[cursor];
      ++cursor;
    }
    Topology t;
    t.seed = splitmix64(schema.seed + static_cast<std::uint64_t>(k));
    t.obstacles = schema.obstacles;
    Rng rng(t.seed);
    std::size_t rank = 0;
    for (const auto& [id, r] : last) {
      if (r.time <= ts - schema.interval + snap_eps) continue;  // stale report
      const Role role = schema.role_cycle[rank++ % schema.role_cycle.size()];
      const Point2D p{r.x, r.y};
      switch (role) {
        case Role::Spv: {
          double h = std::fmod(r.heading, 2.0 * std::numbers::pi);
          if (h < 0) h += 2.0 * std::numbers::pi;
          t.spvs.push_back(Spv{id, p, h, rng.bernoulli(schema.active_prob)});
          break;
        }
        case Role::Comm:
          t.comm.push_back(CommRequest{id, p, schema.demand_bits});
          break;
        case Role::Sense:
          t.sense.push_back(SenseRequest{id, p});
          break;
      }
    }
    if (rank > 0) out.push_back(std::move(t));
  }
  return out;
}

std::vector<Topology> ingest_traces(const std::filesystem::path& path, const TraceSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open trace file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ingest_traces_text(ss.str(), schema);
}

}  // namespace thz

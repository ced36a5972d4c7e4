#include "thzsim/dyngnn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace thz {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr double kGainFeatureScale = 0.1;
constexpr double kLeakySlope = 0.2;

constexpr std::array<std::string_view, kNumNodeAgg> kNodeAggNames = {
    "sage_mean", "sage_sum", "sage_max", "sage_mlp", "gcn", "gat", "gat_cos", "gin"};
constexpr std::array<std::string_view, kNumLayerAgg> kLayerAggNames = {"concat", "max", "att"};

}  // namespace

std::string_view node_agg_name(NodeAgg a) { return kNodeAggNames[static_cast<int>(a)]; }
std::string_view layer_agg_name(LayerAgg a) { return kLayerAggNames[static_cast<int>(a)]; }

NodeAgg node_agg_from_name(std::string_view s) {
  for (int i = 0; i < kNumNodeAgg; ++i) {
    if (kNodeAggNames[i] == s) return static_cast<NodeAgg>(i);
  }
  throw Error("unknown node aggregator '" + std::string(s) + "'");
}

LayerAgg layer_agg_from_name(std::string_view s) {
  for (int i = 0; i < kNumLayerAgg; ++i) {
    if (kLayerAggNames[i] == s) return static_cast<LayerAgg>(i);
  }
  throw Error("unknown layer aggregator '" + std::string(s) + "'");
}

std::string to_string(const Architecture& a) {
  std::string s;
  for (std::size_t k = 0; k < a.hops.size(); ++k) {
    if (k) s += ",";
    s += node_agg_name(a.hops[k]);
  }
  return s + "|" + std::string(layer_agg_name(a.layer));
}

// ----- graph ----------------------------------------------------------------

std::size_t VehicleGraph::num_edges() const {
  std::size_t e = 0;
  for (int u = 0; u < num_spv; ++u) e += adj[u].size();
  return e;
}

int corridor_count(const Topology& topo, Point2D a, Point2D b, int skip_spv_a, int skip_spv_b, double corridor) {
  const Point2D ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 <= 0.0) return 0;
  int count = 0;
  for (int u = 0; u < topo.num_spv(); ++u) {
    if (u == skip_spv_a || u == skip_spv_b) continue;
    const Point2D ap = topo.spvs[u].pos - a;
    const double t = dot(ap, ab) / len2;
    if (t < 0.0 || t > 1.0) continue;
    const double perp = std::abs(cross(ab, ap)) / std::sqrt(len2);
    if (perp < corridor) ++count;
  }
  return count;
}

VehicleGraph build_graph(const Topology& topo, const ChannelConfig& cfg, const GraphConfig& gc) {
  VehicleGraph g;
  g.num_spv = topo.num_spv();
  g.num_comm = topo.num_comm();
  g.num_sense = topo.num_sense();
  const int U = g.num_spv, M = g.num_comm, N = g.num_sense, V = g.num_nodes(), R = M + N;
  const int Us = gc.slots.spv ? gc.slots.spv : U;
  const int Ms = gc.slots.comm ? gc.slots.comm : M;
  const int Ns = gc.slots.sense ? gc.slots.sense : N;
  if (Us < U || Ms < M || Ns < N) {
    throw Error("topology with U=" + std::to_string(U) + ", M=" + std::to_string(M) + ", N=" + std::to_string(N) +
                " exceeds the feature slots (" + std::to_string(Us) + ", " + std::to_string(Ms) + ", " +
                std::to_string(Ns) + ")");
  }
  std::vector<Point2D> pos(V);
  std::vector<std::uint8_t> on(V, 1);
  for (int u = 0; u < U; ++u) pos[u] = topo.spvs[u].pos, on[u] = topo.spvs[u].active ? 1 : 0;
  for (int m = 0; m < M; ++m) pos[U + m] = topo.comm[m].pos;
  for (int n = 0; n < N; ++n) pos[U + M + n] = topo.sense[n].pos;

  const double g_ref = 1.0 / (absorption_gain(gc.gain_ref_distance, cfg) * free_space_gain(gc.gain_ref_distance, cfg));
  std::vector<std::uint8_t> los(static_cast<std::size_t>(V) * V, 0);
  g.gain.assign(static_cast<std::size_t>(V) * V, 0.0);
  for (int a = 0; a < V; ++a) {
    for (int b = a + 1; b < V; ++b) {
      const std::uint8_t l = blockage_indicator(pos[a], pos[b], topo.obstacles) ? 1 : 0;
      los[a * V + b] = los[b * V + a] = l;
      if (!l || !on[a] || !on[b]) continue;
      const double d = distance(pos[a], pos[b]);
      const double gv = 1.0 / (absorption_gain(d, cfg) * free_space_gain(d, cfg));
      g.gain[a * V + b] = g.gain[b * V + a] = gv;
    }
  }
  g.corridor_count.assign(static_cast<std::size_t>(V) * R, 0.0);
  for (int v = 0; v < V; ++v) {
    for (int r = 0; r < R; ++r) {
      if (v == U + r) continue;
      g.corridor_count[v * R + r] = corridor_count(topo, pos[v], pos[U + r], v < U ? v : -1, -1, gc.corridor);
    }
  }

  g.adj.assign(V, {});
  for (int u = 0; u < U; ++u) {
    if (!on[u]) continue;
    for (int r = 0; r < R; ++r) {
      if (!los[u * V + U + r]) continue;
      g.adj[u].push_back(U + r);
      g.adj[U + r].push_back(u);
    }
  }
  for (auto& a : g.adj) std::sort(a.begin(), a.end());

  // Feature slots: e block [comm | sense], then g block [spv | comm | sense].
  g.feature_dim = Us + 2 * (Ms + Ns);
  const int E0 = 0, G0 = Ms + Ns;
  auto e_slot = [&](int r) { return r < M ? r : Ms + (r - M); };
  auto g_slot = [&](int v) {
    if (v < U) return v;
    if (v < U + M) return Us + (v - U);
    return Us + Ms + (v - U - M);
  };
  g.features.assign(static_cast<std::size_t>(V) * g.feature_dim, 0.0);
  for (int v = 0; v < V; ++v) {
    double* f = g.features.data() + static_cast<std::size_t>(v) * g.feature_dim;
    for (int r = 0; r < R; ++r) f[E0 + e_slot(r)] = g.corridor_count[v * R + r];
    for (int w = 0; w < V; ++w) {
      f[G0 + g_slot(w)] = kGainFeatureScale * std::log1p(g.gain[v * V + w] / g_ref);
    }
  }
  return g;
}

NeighborSample sample_neighbors(const VehicleGraph& g, int u, const std::vector<int>& sizes, Rng& rng) {
  if (u < 0 || u >= g.num_nodes()) throw Error("sample_neighbors: node " + std::to_string(u) + " not in graph");
  NeighborSample s;
  s.root = u;
  auto draw = [&](int parent) {
    if (parent == kSentinel || g.adj[parent].empty()) return kSentinel;
    const auto& a = g.adj[parent];
    return a[rng.below(a.size())];
  };
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    std::vector<int> hop(sizes[k]);
    for (int j = 0; j < sizes[k]; ++j) {
      const int parent = k == 0 ? u : s.hops[k - 1][j % sizes[k - 1]];
      hop[j] = draw(parent);
    }
    s.hops.push_back(std::move(hop));
  }
  return s;
}

// ----- configs --------------------------------------------------------------

void ModelConfig::validate() const {
  if (hops < 1) throw Error("model: hops must be >= 1");
  if (embed < 2 || embed % 2) throw Error("model: embed size must be even and >= 2");
  if (branch < 1) throw Error("model: branch width must be >= 1");
  for (int h : hidden) {
    if (h < 1) throw Error("model: hidden widths must be >= 1");
  }
  if (sample_size < 1) throw Error("model: sample size must be >= 1");
  if (!(graph.corridor >= 0.0)) throw Error("model: corridor must be >= 0");
  if (!(graph.gain_ref_distance > 0.0)) throw Error("model: gain reference distance must be > 0");
}

nlohmann::json to_json(const ModelConfig& mc) {
  return {{"hops", mc.hops},
          {"embed", mc.embed},
          {"branch", mc.branch},
          {"hidden", mc.hidden},
          {"sample_size", mc.sample_size},
          {"corridor", mc.graph.corridor},
          {"gain_ref_distance", mc.graph.gain_ref_distance},
          {"slots", {mc.graph.slots.spv, mc.graph.slots.comm, mc.graph.slots.sense}},
          {"seed", mc.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig mc;
  mc.hops = j.value("hops", mc.hops);
  mc.embed = j.value("embed", mc.embed);
  mc.branch = j.value("branch", mc.branch);
  if (j.contains("hidden")) mc.hidden = j.at("hidden").get<std::array<int, 3>>();
  mc.sample_size = j.value("sample_size", mc.sample_size);
  mc.graph.corridor = j.value("corridor", mc.graph.corridor);
  mc.graph.gain_ref_distance = j.value("gain_ref_distance", mc.graph.gain_ref_distance);
  if (j.contains("slots")) {
    const auto s = j.at("slots").get<std::array<int, 3>>();
    mc.graph.slots = {s[0], s[1], s[2]};
  }
  mc.seed = j.value("seed", mc.seed);
  mc.validate();
  return mc;
}

nlohmann::json to_json(const TrainConfig& tc) {
  return {{"search_epochs", tc.search_epochs},
          {"finetune_epochs", tc.finetune_epochs},
          {"batch_size", tc.batch_size},
          {"weight_lr", tc.weight_lr},
          {"arch_lr", tc.arch_lr},
          {"finetune_lr", tc.finetune_lr},
          {"finetune_tol", tc.finetune_tol},
          {"finetune_window", tc.finetune_window},
          {"grad_clip", tc.grad_clip},
          {"early_stop", tc.early_stop},
          {"search_architecture", tc.search_architecture},
          {"seed", tc.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig tc;
  tc.search_epochs = j.value("search_epochs", tc.search_epochs);
  tc.finetune_epochs = j.value("finetune_epochs", tc.finetune_epochs);
  tc.batch_size = j.value("batch_size", tc.batch_size);
  tc.weight_lr = j.value("weight_lr", tc.weight_lr);
  tc.arch_lr = j.value("arch_lr", tc.arch_lr);
  tc.finetune_lr = j.value("finetune_lr", tc.finetune_lr);
  tc.finetune_tol = j.value("finetune_tol", tc.finetune_tol);
  tc.finetune_window = j.value("finetune_window", tc.finetune_window);
  tc.grad_clip = j.value("grad_clip", tc.grad_clip);
  tc.early_stop = j.value("early_stop", tc.early_stop);
  tc.search_architecture = j.value("search_architecture", tc.search_architecture);
  tc.seed = j.value("seed", tc.seed);
  if (tc.search_epochs < 0 || tc.finetune_epochs < 0) throw Error("train: epochs must be >= 0");
  if (tc.batch_size < 1) throw Error("train: batch_size must be >= 1");
  if (tc.finetune_window < 1) throw Error("train: finetune_window must be >= 1");
  if (!(tc.grad_clip >= 0)) throw Error("train: grad_clip must be >= 0");
  return tc;
}

// ----- prepared graphs and batches ------------------------------------------

PreparedGraph prepare_graph(const Topology& topo, const ChannelConfig& cfg, const ModelConfig& mc,
                            const LabeledTopology* labels) {
  PreparedGraph pg;
  pg.topology_id = topo.seed;
  pg.graph = build_graph(topo, cfg, mc.graph);
  const int V = pg.graph.num_nodes(), S = mc.sample_size;
  for (int k = 0; k < mc.hops; ++k) {
    Rng rng(splitmix64(topo.seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(k + 1))));
    std::vector<int> table(static_cast<std::size_t>(V) * S);
    for (int v = 0; v < V; ++v) {
      const auto s = sample_neighbors(pg.graph, v, {S}, rng);
      std::copy(s.hops[0].begin(), s.hops[0].end(), table.begin() + static_cast<std::size_t>(v) * S);
    }
    pg.tables.push_back(std::move(table));
  }
  if (labels) {
    const int U = topo.num_spv(), C = topo.num_comm() + topo.num_sense() + 1;
    if (static_cast<int>(labels->labels.size()) != U) {
      throw Error("labels for topology " + std::to_string(topo.seed) + " cover " +
                  std::to_string(labels->labels.size()) + " SPVs, expected " + std::to_string(U));
    }
    pg.labels.reserve(static_cast<std::size_t>(U) * C);
    for (const auto& ex : labels->labels) {
      if (static_cast<int>(ex.z.size()) != C) throw Error("label width mismatch for topology " + std::to_string(topo.seed));
      pg.labels.insert(pg.labels.end(), ex.z.begin(), ex.z.end());
    }
  }
  return pg;
}

GraphBatch make_batch(const std::vector<const PreparedGraph*>& graphs) {
  if (graphs.empty()) throw Error("make_batch: no graphs");
  GraphBatch b;
  const PreparedGraph& g0 = *graphs[0];
  b.feature_dim = g0.graph.feature_dim;
  const int K = static_cast<int>(g0.tables.size());
  const int V0 = g0.graph.num_nodes();
  b.S = V0 ? static_cast<int>(g0.tables[0].size() / V0) : 0;
  b.tables.assign(K, {});
  b.att_idx.assign(K, {});
  b.att_mask.assign(K, {});
  b.gcn_nb.assign(K, {});
  b.labeled = true;
  int offset = 0;
  const int S = b.S;
  for (const PreparedGraph* pg : graphs) {
    const VehicleGraph& g = pg->graph;
    const int V = g.num_nodes();
    if (g.feature_dim != b.feature_dim) throw Error("make_batch: feature widths differ across graphs");
    if (static_cast<int>(pg->tables.size()) != K) throw Error("make_batch: hop counts differ across graphs");
    b.features.insert(b.features.end(), g.features.begin(), g.features.end());
    for (int v = 0; v < V; ++v) b.gcn_self.push_back(1.0 / (static_cast<double>(g.adj[v].size()) + 1.0));
    for (int k = 0; k < K; ++k) {
      const auto& t = pg->tables[k];
      for (int v = 0; v < V; ++v) {
        const double dv = static_cast<double>(g.adj[v].size());
        b.att_idx[k].push_back(offset + v);
        b.att_mask[k].push_back(1);
        for (int s = 0; s < S; ++s) {
          const int j = t[static_cast<std::size_t>(v) * S + s];
          b.tables[k].push_back(j == kSentinel ? kSentinel : offset + j);
          b.att_idx[k].push_back(j == kSentinel ? kSentinel : offset + j);
          b.att_mask[k].push_back(j == kSentinel ? 0 : 1);
          const double dj = j == kSentinel ? 0.0 : static_cast<double>(g.adj[j].size());
          b.gcn_nb[k].push_back(j == kSentinel ? 0.0 : (dv / S) / std::sqrt((dv + 1.0) * (dj + 1.0)));
        }
      }
    }
    for (int u = 0; u < g.num_spv; ++u) b.spv_rows.push_back(offset + u);
    if (pg->labels.empty()) {
      b.labeled = false;
    } else {
      b.labels.insert(b.labels.end(), pg->labels.begin(), pg->labels.end());
    }
    offset += V;
    ++b.num_graphs;
  }
  b.num_nodes = offset;
  if (!b.labeled) b.labels.clear();
  return b;
}

// ----- model ----------------------------------------------------------------

namespace {

std::string hop_prefix(int hop) { return "hop" + std::to_string(hop) + "."; }

}  // namespace

DynGnnModel::DynGnnModel(const ModelConfig& mc, int feature_dim, int num_classes)
    : mc_(mc), feature_dim_(feature_dim), num_classes_(num_classes) {
  mc_.validate();
  if (feature_dim < 1 || num_classes < 1) throw Error("model: feature_dim and num_classes must be >= 1");
  Rng rng(splitmix64(mc.seed));
  init_body(rng);
  init_head(rng);
  for (int k = 1; k <= mc_.hops; ++k) arch_.add("arch.hop" + std::to_string(k), Tensor(ad::Shape{kNumNodeAgg}, 0.0));
  arch_.add("arch.layer", Tensor(ad::Shape{kNumLayerAgg}, 0.0));
}

void DynGnnModel::init_body(Rng& rng) {
  const std::size_t E = mc_.embed, half = E / 2, Bw = mc_.branch, H4 = h4_width();
  for (int k = 1; k <= mc_.hops; ++k) {
    const std::size_t din = k == 1 ? feature_dim_ : E;
    const std::string pre = hop_prefix(k);
    for (const char* agg : {"sage_mean", "sage_sum", "sage_max"}) {
      w_.add(pre + agg + ".self", {half, din}, din, rng);
      w_.add(pre + agg + ".nbr", {half, din}, din, rng);
    }
    w_.add(pre + "sage_mlp.self", {half, din}, din, rng);
    w_.add(pre + "sage_mlp.pool", {half, din}, din, rng);
    w_.add(pre + "sage_mlp.nbr", {half, half}, half, rng);
    w_.add(pre + "gcn.w", {E, din}, din, rng);
    w_.add(pre + "gat.w", {E, din}, din, rng);
    w_.add(pre + "gat.att_src", {1, E}, E, rng);
    w_.add(pre + "gat.att_dst", {1, E}, E, rng);
    w_.add(pre + "gat_cos.w", {E, din}, din, rng);
    w_.add(pre + "gin.w1", {E, din}, din, rng);
    w_.add(pre + "gin.w2", {E, E}, E, rng);
  }
  for (int k = 1; k <= mc_.hops; ++k) w_.add("layer.concat.w" + std::to_string(k), {Bw, E}, E, rng);
  w_.add("layer.max.w", {H4, E}, E, rng);
  w_.add("layer.att.w", {H4, E}, E, rng);
  w_.add("layer.att.q", {1, H4}, H4, rng);
}

void DynGnnModel::init_head(Rng& rng) {
  std::size_t in = h4_width();
  for (int l = 0; l < 3; ++l) {
    const std::size_t out = mc_.hidden[l];
    const std::string pre = "head.fc" + std::to_string(l + 1);
    w_.add(pre + ".w", {out, in}, in, rng);
    w_.add(pre + ".b", {out}, in, rng);
    in = out;
  }
  w_.add("head.out.w", {static_cast<std::size_t>(num_classes_), in}, in, rng);
  w_.add("head.out.b", {static_cast<std::size_t>(num_classes_)}, in, rng);
}

void DynGnnModel::reset_head(int num_classes, std::uint64_t seed) {
  ad::ParameterSet kept;
  for (auto& p : w_.all()) {
    if (p.name.rfind("head.", 0) != 0) kept.add(p.name, p.value).trainable = p.trainable;
  }
  w_ = std::move(kept);
  num_classes_ = num_classes;
  Rng rng(splitmix64(seed ^ 0xC0FFEEull));
  init_head(rng);
  set_body_trainable(false);
}

void DynGnnModel::set_body_trainable(bool trainable) {
  for (auto& p : w_.all()) {
    if (p.name.rfind("head.", 0) != 0) p.trainable = trainable;
  }
  for (auto& p : arch_.all()) p.trainable = trainable;
}

std::vector<double> DynGnnModel::arch_weights() const { return arch_.flat_values(); }

void DynGnnModel::set_arch_weights(const std::vector<double>& t) { arch_.set_flat_values(t); }

Var DynGnnModel::p(Tape& tape, const std::string& name) const { return tape.param(w_.get(name)); }

Var DynGnnModel::node_aggregate_var(Tape& tape, const GraphBatch& b, int hop, NodeAgg kind, Var H) const {
  const std::string pre = hop_prefix(hop);
  const auto& T = b.tables[hop - 1];
  const std::size_t S = b.S;
  switch (kind) {
    case NodeAgg::SageMean:
    case NodeAgg::SageSum: {
      const std::string n = pre + std::string(node_agg_name(kind));
      Var own = ad::matmul_nt(H, p(tape, n + ".self"));
      Var z = ad::matmul_nt(H, p(tape, n + ".nbr"));
      Var nb = ad::neighbor_sum(z, T, S);
      if (kind == NodeAgg::SageMean) nb = ad::scale(nb, 1.0 / static_cast<double>(S));
      return ad::relu(ad::concat({own, nb}));
    }
    case NodeAgg::SageMax: {
      Var own = ad::matmul_nt(H, p(tape, pre + "sage_max.self"));
      Var nb = ad::matmul_nt(ad::neighbor_max(H, T, S), p(tape, pre + "sage_max.nbr"));
      return ad::relu(ad::concat({own, nb}));
    }
    case NodeAgg::SageMlp: {
      Var own = ad::matmul_nt(H, p(tape, pre + "sage_mlp.self"));
      Var pooled = ad::relu(ad::matmul_nt(H, p(tape, pre + "sage_mlp.pool")));
      Var nb = ad::matmul_nt(ad::neighbor_max(pooled, T, S), p(tape, pre + "sage_mlp.nbr"));
      return ad::relu(ad::concat({own, nb}));
    }
    case NodeAgg::Gcn: {
      Var Z = ad::matmul_nt(H, p(tape, pre + "gcn.w"));
      Var self = ad::row_scale(Z, tape.constant(Tensor::vector(b.gcn_self)));
      Var nb = ad::neighbor_sum(Z, T, S, &b.gcn_nb[hop - 1]);
      return ad::relu(ad::add(self, nb));
    }
    case NodeAgg::Gat:
    case NodeAgg::GatCos: {
      const auto& idx = b.att_idx[hop - 1];
      const std::size_t n = b.num_nodes;
      const std::string w = pre + (kind == NodeAgg::Gat ? "gat.w" : "gat_cos.w");
      Var Z = ad::matmul_nt(H, p(tape, w));
      Var e;
      if (kind == NodeAgg::Gat) {
        Var src = ad::matmul_nt(Z, p(tape, pre + "gat.att_src"));
        Var dst = ad::matmul_nt(Z, p(tape, pre + "gat.att_dst"));
        e = ad::leaky_relu(ad::add(ad::repeat_rows(src, S + 1), ad::gather_rows(dst, idx)), kLeakySlope);
      } else {
        Var Zn = ad::row_normalize(Z);
        e = ad::neighbor_dot(Zn, Zn, idx, S + 1);
      }
      Var attn = ad::row_softmax(ad::reshape(e, {n, S + 1}), &b.att_mask[hop - 1]);
      return ad::relu(ad::neighbor_weighted_sum(attn, Z, idx));
    }
    case NodeAgg::Gin: {
      Var s = ad::add(H, ad::neighbor_sum(H, T, S));
      Var h = ad::relu(ad::matmul_nt(s, p(tape, pre + "gin.w1")));
      return ad::relu(ad::matmul_nt(h, p(tape, pre + "gin.w2")));
    }
  }
  throw Error("unknown node aggregator kind");
}

Var DynGnnModel::layer_aggregate_var(Tape& tape, LayerAgg kind, const std::vector<Var>& hs) const {
  const std::size_t K = hs.size();
  switch (kind) {
    case LayerAgg::Concat: {
      std::vector<Var> parts;
      for (std::size_t k = 0; k < K; ++k) parts.push_back(ad::matmul_nt(hs[k], p(tape, "layer.concat.w" + std::to_string(k + 1))));
      return ad::relu(ad::concat(parts));
    }
    case LayerAgg::Max: {
      Var W = p(tape, "layer.max.w");
      Var m = ad::matmul_nt(hs[0], W);
      for (std::size_t k = 1; k < K; ++k) m = ad::max(m, ad::matmul_nt(hs[k], W));
      return ad::relu(m);
    }
    case LayerAgg::Att: {
      Var W = p(tape, "layer.att.w");
      Var q = p(tape, "layer.att.q");
      std::vector<Var> zs, scores;
      for (std::size_t k = 0; k < K; ++k) {
        zs.push_back(ad::matmul_nt(hs[k], W));
        scores.push_back(ad::matmul_nt(zs.back(), q));
      }
      Var mix_w = ad::row_softmax(ad::concat(scores));
      Var out;
      for (std::size_t k = 0; k < K; ++k) {
        Tensor ek(ad::Shape{1, K}, 0.0);
        ek.values[k] = 1.0;
        Var term = ad::row_scale(zs[k], ad::matmul_nt(mix_w, tape.constant(std::move(ek))));
        out = k == 0 ? term : ad::add(out, term);
      }
      return ad::relu(out);
    }
  }
  throw Error("unknown layer aggregator kind");
}

DynGnnModel::Output DynGnnModel::forward(Tape& tape, const GraphBatch& b) const {
  if (b.feature_dim != feature_dim_) {
    throw Error("model expects feature width " + std::to_string(feature_dim_) + ", batch has " +
                std::to_string(b.feature_dim));
  }
  if (static_cast<int>(b.tables.size()) != mc_.hops) {
    throw Error("model has " + std::to_string(mc_.hops) + " hops, batch was sampled for " +
                std::to_string(b.tables.size()));
  }
  Var H = tape.constant(Tensor::matrix(b.num_nodes, b.feature_dim, b.features));
  std::vector<Var> hs;
  for (int k = 1; k <= mc_.hops; ++k) {
    if (fixed_) {
      H = node_aggregate_var(tape, b, k, fixed_->hops[k - 1], H);
    } else {
      Var w = ad::softmax(tape.param(arch_.get("arch.hop" + std::to_string(k))));
      std::vector<Var> outs;
      for (int a = 0; a < kNumNodeAgg; ++a) outs.push_back(node_aggregate_var(tape, b, k, static_cast<NodeAgg>(a), H));
      H = ad::mix(w, outs);
    }
    hs.push_back(H);
  }
  Var h4;
  if (fixed_) {
    h4 = layer_aggregate_var(tape, fixed_->layer, hs);
  } else {
    Var w = ad::softmax(tape.param(arch_.get("arch.layer")));
    std::vector<Var> outs;
    for (int a = 0; a < kNumLayerAgg; ++a) outs.push_back(layer_aggregate_var(tape, static_cast<LayerAgg>(a), hs));
    h4 = ad::mix(w, outs);
  }
  Var x = ad::gather_rows(h4, b.spv_rows);
  Output out;
  out.h4 = x;
  for (int l = 1; l <= 3; ++l) {
    const std::string pre = "head.fc" + std::to_string(l);
    x = ad::relu(ad::linear(x, p(tape, pre + ".w"), p(tape, pre + ".b")));
  }
  out.logits = ad::linear(x, p(tape, "head.out.w"), p(tape, "head.out.b"));
  return out;
}

nlohmann::json DynGnnModel::metadata() const {
  nlohmann::json j{{"K", mc_.hops},
                   {"embed", mc_.embed},
                   {"branch", mc_.branch},
                   {"h4_width", h4_width()},
                   {"zoo_version", kZooVersion},
                   {"feature_dim", feature_dim_},
                   {"num_classes", num_classes_},
                   {"arch_weights", arch_weights()},
                   {"model_config", to_json(mc_)}};
  std::vector<std::string> names;
  for (auto n : kNodeAggNames) names.emplace_back(n);
  j["node_zoo"] = names;
  names.clear();
  for (auto n : kLayerAggNames) names.emplace_back(n);
  j["layer_zoo"] = names;
  if (fixed_) {
    std::vector<std::string> hops;
    for (auto a : fixed_->hops) hops.emplace_back(node_agg_name(a));
    j["discretized"] = {{"hops", hops}, {"layer", std::string(layer_agg_name(fixed_->layer))}};
  }
  return j;
}

void DynGnnModel::save(const std::filesystem::path& path) const {
  ad::ParameterSet all;
  for (const auto& p : w_.all()) all.add(p.name, p.value).trainable = p.trainable;
  for (const auto& p : arch_.all()) all.add(p.name, p.value).trainable = p.trainable;
  ad::save_checkpoint(all, metadata(), path);
}

DynGnnModel DynGnnModel::load(const std::filesystem::path& path) {
  nlohmann::json meta;
  ad::ParameterSet all = ad::load_checkpoint(path, &meta);
  if (meta.value("zoo_version", -1) != kZooVersion) throw Error(path.string() + ": unsupported aggregator zoo version");
  DynGnnModel m;
  m.mc_ = model_config_from_json(meta.at("model_config"));
  m.feature_dim_ = meta.at("feature_dim").get<int>();
  m.num_classes_ = meta.at("num_classes").get<int>();
  for (const auto& p : all.all()) {
    auto& dst = p.name.rfind("arch.", 0) == 0 ? m.arch_ : m.w_;
    dst.add(p.name, p.value).trainable = p.trainable;
  }
  if (meta.contains("discretized")) {
    Architecture a;
    for (const auto& h : meta["discretized"]["hops"]) a.hops.push_back(node_agg_from_name(h.get<std::string>()));
    a.layer = layer_agg_from_name(meta["discretized"]["layer"].get<std::string>());
    m.fixed_ = a;
  }
  return m;
}

Architecture discretize_architecture(const std::vector<double>& arch_w, int hops) {
  if (static_cast<int>(arch_w.size()) != hops * kNumNodeAgg + kNumLayerAgg) {
    throw Error("architecture weights have " + std::to_string(arch_w.size()) + " entries, expected " +
                std::to_string(hops * kNumNodeAgg + kNumLayerAgg));
  }
  auto argmax = [&](std::size_t off, int len) {
    int best = 0;
    for (int i = 1; i < len; ++i) {
      if (arch_w[off + i] > arch_w[off + best]) best = i;
    }
    return best;
  };
  Architecture a;
  for (int k = 0; k < hops; ++k) a.hops.push_back(static_cast<NodeAgg>(argmax(static_cast<std::size_t>(k) * kNumNodeAgg, kNumNodeAgg)));
  a.layer = static_cast<LayerAgg>(argmax(static_cast<std::size_t>(hops) * kNumNodeAgg, kNumLayerAgg));
  return a;
}

std::vector<double> node_aggregate(NodeAgg kind, const DynGnnModel& model, int hop,
                                   const std::vector<double>& own, const std::vector<std::vector<double>>& neighbors) {
  const int S = model.config().sample_size;
  if (static_cast<int>(neighbors.size()) > S) throw Error("node_aggregate: more neighbors than the sample size");
  const std::size_t d = own.size();
  // Row 0 is the node, rows 1.. its neighbors; missing samples are sentinels.
  GraphBatch b;
  b.num_nodes = 1 + static_cast<int>(neighbors.size());
  b.feature_dim = static_cast<int>(d);
  b.S = S;
  b.num_graphs = 1;
  b.features = own;
  for (const auto& nb : neighbors) {
    if (nb.size() != d) throw Error("node_aggregate: neighbor width differs from the node width");
    b.features.insert(b.features.end(), nb.begin(), nb.end());
  }
  const int K = model.config().hops;
  const double deg = static_cast<double>(neighbors.size());
  b.tables.assign(K, std::vector<int>(static_cast<std::size_t>(b.num_nodes) * S, kSentinel));
  b.att_idx.assign(K, {});
  b.att_mask.assign(K, {});
  b.gcn_nb.assign(K, {});
  b.gcn_self.assign(b.num_nodes, 0.5);
  b.gcn_self[0] = 1.0 / (deg + 1.0);
  for (int k = 0; k < K; ++k) {
    for (int v = 0; v < b.num_nodes; ++v) {
      b.att_idx[k].push_back(v);
      b.att_mask[k].push_back(1);
      for (int s = 0; s < S; ++s) {
        int j = kSentinel;
        if (v == 0 && !neighbors.empty()) j = 1 + s % static_cast<int>(neighbors.size());
        b.tables[k][static_cast<std::size_t>(v) * S + s] = j;
        b.att_idx[k].push_back(j);
        b.att_mask[k].push_back(j == kSentinel ? 0 : 1);
        b.gcn_nb[k].push_back(j == kSentinel ? 0.0 : (deg / S) / std::sqrt((deg + 1.0) * 2.0));
      }
    }
  }
  Tape tape;
  Var H = tape.constant(Tensor::matrix(b.num_nodes, d, b.features));
  Var out = model.node_aggregate_var(tape, b, hop, kind, H);
  const auto& v = out.value();
  return std::vector<double>(v.values.begin(), v.values.begin() + v.cols());
}

double batch_loss(const DynGnnModel& model, const GraphBatch& b) {
  if (!b.labeled) throw Error("batch_loss: batch has no labels");
  Tape tape;
  auto out = model.forward(tape, b);
  Var loss = ad::bce_loss(out.logits, Tensor(out.logits.shape(), b.labels));
  return loss.value().values[0] / b.num_graphs;
}

// ----- training -------------------------------------------------------------

namespace {

// Mean-over-topologies BCE and its gradients accumulated into the parameter sets.
double loss_and_grad(DynGnnModel& model, const GraphBatch& b) {
  if (!b.labeled) throw Error("training batch has no labels");
  model.weights().zero_grad();
  model.arch_params().zero_grad();
  Tape tape;
  auto out = model.forward(tape, b);
  Var loss = ad::scale(ad::bce_loss(out.logits, Tensor(out.logits.shape(), b.labels)), 1.0 / b.num_graphs);
  tape.backward(loss);
  return loss.value().values[0];
}

struct TrainableScope {
  ad::ParameterSet& ps;
  std::vector<bool> saved;
  TrainableScope(ad::ParameterSet& p, bool value) : ps(p) {
    for (auto& q : ps.all()) {
      saved.push_back(q.trainable);
      q.trainable = q.trainable && value;
    }
  }
  ~TrainableScope() {
    for (std::size_t i = 0; i < saved.size(); ++i) ps.all()[i].trainable = saved[i];
  }
};

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(n, i + batch_size));
  }
  return out;
}

GraphBatch gather_batch(const std::vector<PreparedGraph>& set, const std::vector<std::size_t>& idx) {
  std::vector<const PreparedGraph*> ptrs;
  for (auto i : idx) ptrs.push_back(&set[i]);
  return make_batch(ptrs);
}

void check_finite(double loss, const char* phase, int epoch, std::size_t step) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << "training diverged: " << phase << " loss is " << loss << " at epoch " << epoch << ", step " << step
       << "; lower the learning rates";
    throw Error(os.str());
  }
}

}  // namespace

TrainHistory train_bilevel(DynGnnModel& model, const std::vector<PreparedGraph>& train,
                           const std::vector<PreparedGraph>& val, const TrainConfig& tc, const EpochCallback& cb) {
  if (train.empty()) throw Error("train_bilevel: empty training set");
  if (tc.search_architecture && val.empty()) throw Error("train_bilevel: empty validation set");
  TrainHistory h;
  Rng rng(splitmix64(tc.seed ^ 0x5EA4C4ull));
  for (int epoch = 0; epoch < tc.search_epochs; ++epoch) {
    const auto tb = make_batches(train.size(), tc.batch_size, rng);
    std::vector<std::vector<std::size_t>> vb;
    if (tc.search_architecture) vb = make_batches(val.size(), tc.batch_size, rng);
    double tr_sum = 0.0, va_sum = 0.0;
    for (std::size_t step = 0; step < tb.size(); ++step) {
      const GraphBatch bt = gather_batch(train, tb[step]);
      if (tc.search_architecture) {
        // architecture step on the validation loss at the one-step lookahead weights
        {
          TrainableScope freeze_arch(model.arch_params(), false);
          const double l = loss_and_grad(model, bt);
          check_finite(l, "train", epoch, step);
        }
        const std::vector<double> w0 = model.weights().flat_values();
        ad::clip_grad_norm(model.weights(), tc.grad_clip);
        ad::sgd_step(model.weights(), tc.weight_lr);
        const GraphBatch bv = gather_batch(val, vb[step % vb.size()]);
        {
          TrainableScope freeze_w(model.weights(), false);
          const double lv = loss_and_grad(model, bv);
          check_finite(lv, "validation", epoch, step);
          va_sum += lv;
        }
        model.weights().set_flat_values(w0);
        ad::sgd_step(model.arch_params(), tc.arch_lr);
      }
      // weight step on the training loss
      TrainableScope freeze_arch(model.arch_params(), false);
      const double l = loss_and_grad(model, bt);
      check_finite(l, "train", epoch, step);
      ad::clip_grad_norm(model.weights(), tc.grad_clip);
      ad::sgd_step(model.weights(), tc.weight_lr);
      tr_sum += l;
    }
    h.search_train_loss.push_back(tr_sum / tb.size());
    if (tc.search_architecture) h.search_val_loss.push_back(va_sum / tb.size());
    if (cb) cb("search", epoch, h.search_train_loss.back());
  }
  return h;
}

std::vector<double> finetune_w(DynGnnModel& model, const std::vector<PreparedGraph>& val, const TrainConfig& tc,
                               int* stop_epoch, const EpochCallback& cb) {
  if (val.empty()) throw Error("finetune_w: empty validation set");
  if (!model.fixed_architecture()) {
    model.set_fixed_architecture(discretize_architecture(model.arch_weights(), model.config().hops));
  }
  std::vector<double> curve;
  Rng rng(splitmix64(tc.seed ^ 0xF1E7ull));
  TrainableScope freeze_arch(model.arch_params(), false);
  int stopped = tc.finetune_epochs;
  for (int epoch = 0; epoch < tc.finetune_epochs; ++epoch) {
    const auto vb = make_batches(val.size(), tc.batch_size, rng);
    double sum = 0.0;
    for (std::size_t step = 0; step < vb.size(); ++step) {
      const GraphBatch b = gather_batch(val, vb[step]);
      const double l = loss_and_grad(model, b);
      check_finite(l, "fine-tune", epoch, step);
      ad::clip_grad_norm(model.weights(), tc.grad_clip);
      ad::sgd_step(model.weights(), tc.finetune_lr);
      sum += l;
    }
    curve.push_back(sum / vb.size());
    if (cb) cb("finetune", epoch, curve.back());
    const int W = tc.finetune_window;
    if (tc.early_stop && static_cast<int>(curve.size()) > W) {
      const double prev = curve[curve.size() - 1 - W];
      if (std::abs(curve.back() - prev) <= tc.finetune_tol * std::abs(prev)) {
        stopped = epoch + 1;
        break;
      }
    }
  }
  if (stop_epoch) *stop_epoch = stopped;
  return curve;
}

TrainHistory train_model(DynGnnModel& model, const std::vector<PreparedGraph>& train,
                         const std::vector<PreparedGraph>& val, const TrainConfig& tc, const EpochCallback& cb) {
  TrainHistory h = train_bilevel(model, train, val, tc, cb);
  if (!model.fixed_architecture()) {
    model.set_fixed_architecture(discretize_architecture(model.arch_weights(), model.config().hops));
  }
  h.finetune_loss = finetune_w(model, val, tc, &h.finetune_stop_epoch, cb);
  return h;
}

// ----- inference ------------------------------------------------------------

std::vector<double> predict_scores(const DynGnnModel& model, const PreparedGraph& g) {
  const GraphBatch b = make_batch({&g});
  Tape tape;
  auto out = model.forward(tape, b);
  const auto& v = out.logits.value().values;
  std::vector<double> s(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    s[i] = v[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-v[i])) : std::exp(v[i]) / (1.0 + std::exp(v[i]));
  }
  return s;
}

Assignment assignment_from_scores(const std::vector<double>& scores, int num_spv, int num_comm, int num_sense) {
  const int C = num_comm + num_sense + 1;
  if (static_cast<int>(scores.size()) != num_spv * C) throw Error("assignment_from_scores: score matrix has the wrong size");
  if (num_spv < 1) throw Error("assignment_from_scores: no SPVs");
  std::vector<int> cs(num_comm), ss(num_sense);
  auto best_for = [&](int col) {
    int best = 0;
    for (int u = 1; u < num_spv; ++u) {
      if (scores[static_cast<std::size_t>(u) * C + col] > scores[static_cast<std::size_t>(best) * C + col]) best = u;
    }
    return best;
  };
  for (int m = 0; m < num_comm; ++m) cs[m] = best_for(m);
  for (int n = 0; n < num_sense; ++n) ss[n] = best_for(num_comm + n);
  return Assignment::from_servers(num_spv, cs, ss);
}

Assignment infer_assignment(const DynGnnModel& model, const Topology& topo, const ChannelConfig& cfg) {
  const PreparedGraph g = prepare_graph(topo, cfg, model.config());
  return assignment_from_scores(predict_scores(model, g), topo.num_spv(), topo.num_comm(), topo.num_sense());
}

void export_embeddings(const DynGnnModel& model, const std::vector<PreparedGraph>& graphs,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "topology_id,spv_index,mode";
  for (int i = 0; i < model.h4_width(); ++i) out << ",h" << i;
  out << '\n';
  out << std::setprecision(17);
  for (const auto& g : graphs) {
    const GraphBatch b = make_batch({&g});
    Tape tape;
    auto o = model.forward(tape, b);
    const auto& h = o.h4.value();
    const int M = g.graph.num_comm, N = g.graph.num_sense, C = M + N + 1;
    for (int u = 0; u < g.graph.num_spv; ++u) {
      std::string mode = "unlabeled";
      if (!g.labels.empty()) {
        bool comm = false, sense = false;
        for (int m = 0; m < M; ++m) comm = comm || g.labels[static_cast<std::size_t>(u) * C + m] > 0.5;
        for (int n = 0; n < N; ++n) sense = sense || g.labels[static_cast<std::size_t>(u) * C + M + n] > 0.5;
        mode = comm && sense ? "both" : comm ? "comm" : sense ? "sense" : "none";
      }
      out << g.topology_id << ',' << u << ',' << mode;
      for (std::size_t c = 0; c < h.cols(); ++c) out << ',' << h.at(u, c);
      out << '\n';
    }
  }
}

}  // namespace thz

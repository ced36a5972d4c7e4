#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "thzsim/dyngnn.hpp"

using namespace thz;

namespace {

using Vec = std::vector<double>;

GeneratorConfig small_generator(std::uint64_t seed) {
  GeneratorConfig gc;
  gc.num_spv = 4;
  gc.num_comm = 2;
  gc.num_sense = 2;
  gc.seed = seed;
  return gc;
}

ModelConfig small_model(int hops = 2) {
  ModelConfig mc;
  mc.hops = hops;
  mc.embed = 4;
  mc.branch = 3;
  mc.hidden = {6, 6, 6};
  mc.sample_size = 4;
  return mc;
}

Vec matvec(const thz::ad::Tensor& W, const Vec& x) {
  Vec y(W.rows(), 0.0);
  for (std::size_t r = 0; r < W.rows(); ++r)
    for (std::size_t c = 0; c < W.cols(); ++c) y[r] += W.at(r, c) * x[c];
  return y;
}

Vec relu(Vec v) {
  for (double& x : v) x = std::max(0.0, x);
  return v;
}

Vec cat(Vec a, const Vec& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Vec axpy(double s, const Vec& x, Vec y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
  return y;
}

const thz::ad::Tensor& W(const DynGnnModel& m, const std::string& name) { return m.weights().get(name).value; }

void check_close(const Vec& a, const Vec& b, double tol = 1e-12) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("graph edges follow activity and line of sight") {
  const ChannelConfig cfg;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Topology t = generate_topology(small_generator(s));
    t.spvs[1].active = false;
    const VehicleGraph g = build_graph(t, cfg);
    const int U = t.num_spv(), M = t.num_comm();
    CHECK(g.adj[1].empty());
    for (int u = 0; u < U; ++u) {
      for (int r = 0; r < g.num_requests(); ++r) {
        const Point2D target = r < M ? t.comm[r].pos : t.sense[r - M].pos;
        const bool expect = t.spvs[u].active && blockage_indicator(t.spvs[u].pos, target, t.obstacles);
        const auto& a = g.adj[u];
        CHECK((std::find(a.begin(), a.end(), U + r) != a.end()) == expect);
      }
      for (int w : g.adj[u]) CHECK(w >= U);
    }
    CHECK(g.feature_dim == U + 2 * g.num_requests());
    CHECK(g.features.size() == static_cast<std::size_t>(g.num_nodes() * g.feature_dim));
  }
}

TEST_CASE("corridor count hand case") {
  Topology t;
  t.spvs = {{0, {0, 0}, 0, true}, {1, {5, 1}, 0, true}, {2, {5, 4}, 0, true}, {3, {12, 0}, 0, true}};
  t.comm = {{10, {10, 0}, 1.6e8}};
  t.sense = {{20, {0, 20}}};
  // SPV 1 lies 1 m off the segment, SPV 2 is 4 m off, SPV 3 projects beyond the end.
  CHECK(corridor_count(t, {0, 0}, {10, 0}, 0, -1, 3.5) == 1);
  CHECK(corridor_count(t, {0, 0}, {10, 0}, 0, -1, 4.5) == 2);
  CHECK(corridor_count(t, {0, 0}, {10, 0}, 0, 1, 3.5) == 0);
}

TEST_CASE("features permute with the vehicles") {
  const ChannelConfig cfg;
  const Topology t = generate_topology(small_generator(33));
  Topology p = t;
  const std::vector<int> perm{2, 0, 3, 1};  // new index -> old index
  for (int i = 0; i < 4; ++i) p.spvs[i] = t.spvs[perm[i]];
  const VehicleGraph a = build_graph(t, cfg), b = build_graph(p, cfg);
  const int U = 4, R = a.num_requests(), D = a.feature_dim;
  for (int i = 0; i < U; ++i) {
    const int o = perm[i];
    for (int r = 0; r < R; ++r) CHECK(b.features[i * D + r] == a.features[o * D + r]);
    for (int j = 0; j < U; ++j) CHECK(b.features[i * D + R + j] == doctest::Approx(a.features[o * D + R + perm[j]]));
    for (int c = U; c < U + R; ++c) CHECK(b.features[i * D + R + c] == doctest::Approx(a.features[o * D + R + c]));
  }
}

TEST_CASE("feature slots pad smaller topologies") {
  const ChannelConfig cfg;
  const Topology t = generate_topology(small_generator(4));
  GraphConfig gc;
  gc.slots = {6, 3, 3};
  const VehicleGraph g = build_graph(t, cfg, gc);
  CHECK(g.feature_dim == 6 + 2 * 6);
  gc.slots = {3, 3, 3};
  CHECK_THROWS_AS(build_graph(t, cfg, gc), Error);
}

TEST_CASE("neighbor sampling is deterministic and uses the adjacency") {
  const ChannelConfig cfg;
  const Topology t = generate_topology(small_generator(8));
  const VehicleGraph g = build_graph(t, cfg);
  for (int v = 0; v < g.num_nodes(); ++v) {
    Rng r1(5), r2(5);
    const auto a = sample_neighbors(g, v, {4, 6}, r1);
    const auto b = sample_neighbors(g, v, {4, 6}, r2);
    CHECK(a.hops == b.hops);
    REQUIRE(a.hops.size() == 2);
    for (int j = 0; j < 4; ++j) {
      const int x = a.hops[0][j];
      if (g.adj[v].empty()) {
        CHECK(x == kSentinel);
      } else {
        CHECK(std::find(g.adj[v].begin(), g.adj[v].end(), x) != g.adj[v].end());
      }
    }
    for (int j = 0; j < 6; ++j) {
      const int parent = a.hops[0][j % 4];
      const int x = a.hops[1][j];
      if (parent == kSentinel || g.adj[parent].empty()) CHECK(x == kSentinel);
      else CHECK(std::find(g.adj[parent].begin(), g.adj[parent].end(), x) != g.adj[parent].end());
    }
  }
  const PreparedGraph p1 = prepare_graph(t, cfg, small_model()), p2 = prepare_graph(t, cfg, small_model());
  CHECK(p1.tables == p2.tables);
}

TEST_CASE("node aggregators match hand computations") {
  const DynGnnModel m(small_model(), 3, 5);
  const Vec h{0.3, -0.2, 0.8};
  const Vec a{0.5, 0.1, -0.4}, b{-0.6, 0.9, 0.2};
  const std::vector<Vec> nbs{a, b};
  const Vec ab_sum = axpy(1.0, a, b);
  const Vec ab_max{std::max(a[0], b[0]), std::max(a[1], b[1]), std::max(a[2], b[2])};

  // The sample size 4 cycles over the two neighbors, so every neighbor appears twice.
  check_close(node_aggregate(NodeAgg::SageMean, m, 1, h, nbs),
              relu(cat(matvec(W(m, "hop1.sage_mean.self"), h), matvec(W(m, "hop1.sage_mean.nbr"), axpy(-0.5, ab_sum, ab_sum)))));
  check_close(node_aggregate(NodeAgg::SageSum, m, 1, h, nbs),
              relu(cat(matvec(W(m, "hop1.sage_sum.self"), h), axpy(1.0, matvec(W(m, "hop1.sage_sum.nbr"), ab_sum),
                                                                        matvec(W(m, "hop1.sage_sum.nbr"), ab_sum)))));
  check_close(node_aggregate(NodeAgg::SageMax, m, 1, h, nbs),
              relu(cat(matvec(W(m, "hop1.sage_max.self"), h), matvec(W(m, "hop1.sage_max.nbr"), ab_max))));
  {
    const auto pool = [&](const Vec& x) { return relu(matvec(W(m, "hop1.sage_mlp.pool"), x)); };
    const Vec pa = pool(a), pb = pool(b);
    Vec pm(pa.size());
    for (std::size_t i = 0; i < pm.size(); ++i) pm[i] = std::max(pa[i], pb[i]);
    check_close(node_aggregate(NodeAgg::SageMlp, m, 1, h, nbs),
                relu(cat(matvec(W(m, "hop1.sage_mlp.self"), h), matvec(W(m, "hop1.sage_mlp.nbr"), pm))));
  }
  {
    // deg 2, both neighbors have degree 1 in the reference graph.
    const Vec x = axpy(4.0 * (2.0 / 4.0) / std::sqrt(3.0 * 2.0) / 2.0, ab_sum, axpy(1.0 / 3.0, h, Vec(3, 0.0)));
    check_close(node_aggregate(NodeAgg::Gcn, m, 1, h, nbs), relu(matvec(W(m, "hop1.gcn.w"), x)));
  }
  {
    const Vec s = axpy(2.0, ab_sum, h);
    check_close(node_aggregate(NodeAgg::Gin, m, 1, h, nbs),
                relu(matvec(W(m, "hop1.gin.w2"), relu(matvec(W(m, "hop1.gin.w1"), s)))));
  }
  {
    const auto& Wc = W(m, "hop1.gat_cos.w");
    const Vec zh = matvec(Wc, h), za = matvec(Wc, a), zb = matvec(Wc, b);
    auto cosine = [](const Vec& x, const Vec& y) {
      return std::inner_product(x.begin(), x.end(), y.begin(), 0.0) /
             std::sqrt(std::inner_product(x.begin(), x.end(), x.begin(), 0.0) *
                       std::inner_product(y.begin(), y.end(), y.begin(), 0.0));
    };
    const double eh = std::exp(1.0), ea = std::exp(cosine(zh, za)), eb = std::exp(cosine(zh, zb));
    const double zsum = eh + 2 * ea + 2 * eb;
    const Vec out = axpy(2 * eb / zsum, zb, axpy(2 * ea / zsum, za, axpy(eh / zsum, zh, Vec(4, 0.0))));
    check_close(node_aggregate(NodeAgg::GatCos, m, 1, h, nbs), relu(out), 1e-10);
  }
  {
    const auto& Wg = W(m, "hop1.gat.w");
    const Vec zh = matvec(Wg, h), za = matvec(Wg, a), zb = matvec(Wg, b);
    auto score = [&](const Vec& zj) {
      const double v = matvec(W(m, "hop1.gat.att_src"), zh)[0] + matvec(W(m, "hop1.gat.att_dst"), zj)[0];
      return std::exp(v > 0 ? v : 0.2 * v);
    };
    const double eh = score(zh), ea = score(za), eb = score(zb);
    const double zsum = eh + 2 * ea + 2 * eb;
    const Vec out = axpy(2 * eb / zsum, zb, axpy(2 * ea / zsum, za, axpy(eh / zsum, zh, Vec(4, 0.0))));
    check_close(node_aggregate(NodeAgg::Gat, m, 1, h, nbs), relu(out), 1e-10);
  }
  // An isolated node only keeps its own term.
  const Vec lone = node_aggregate(NodeAgg::SageSum, m, 1, h, {});
  check_close(lone, relu(cat(matvec(W(m, "hop1.sage_sum.self"), h), Vec(2, 0.0))));
}

TEST_CASE("discretization takes the argmax with ties to the first kind") {
  std::vector<double> arch_w(2 * kNumNodeAgg + kNumLayerAgg, 0.0);
  Architecture a = discretize_architecture(arch_w, 2);
  CHECK(a.hops == std::vector<NodeAgg>{NodeAgg::SageMean, NodeAgg::SageMean});
  CHECK(a.layer == LayerAgg::Concat);
  arch_w[5] = 1.0;
  arch_w[kNumNodeAgg + 7] = 0.5;
  arch_w[2 * kNumNodeAgg + 2] = 3.0;
  a = discretize_architecture(arch_w, 2);
  CHECK(a.hops == std::vector<NodeAgg>{NodeAgg::Gat, NodeAgg::Gin});
  CHECK(a.layer == LayerAgg::Att);
  CHECK(to_string(a) == "gat,gin|att");
  CHECK_THROWS_AS(discretize_architecture(arch_w, 3), Error);
  for (int i = 0; i < kNumNodeAgg; ++i) CHECK(node_agg_from_name(node_agg_name(static_cast<NodeAgg>(i))) == static_cast<NodeAgg>(i));
  CHECK_THROWS_AS(node_agg_from_name("lstm"), Error);
}

TEST_CASE("architecture vector length is hops times zoo plus layer zoo") {
  for (int K : {2, 3, 4}) {
    const DynGnnModel m(small_model(K), 5, 4);
    CHECK(m.arch_weights().size() == static_cast<std::size_t>(K * 8 + 3));
    CHECK(m.h4_width() == 3 * K);
  }
}

TEST_CASE("relaxed mixture approaches the discrete model at large logit gaps") {
  const ChannelConfig cfg;
  const Topology t = generate_topology(small_generator(12));
  const ModelConfig mc = small_model();
  const PreparedGraph g = prepare_graph(t, cfg, mc);
  DynGnnModel relaxed(mc, g.graph.feature_dim, t.num_comm() + t.num_sense() + 1);
  std::vector<double> arch_w(relaxed.arch_weights().size(), 0.0);
  arch_w[2] = 40.0;                 // hop 1: sage_max
  arch_w[kNumNodeAgg + 6] = 40.0;   // hop 2: gat_cos
  arch_w[2 * kNumNodeAgg + 1] = 40.0;  // layer: max
  relaxed.set_arch_weights(arch_w);
  DynGnnModel discrete = relaxed;
  discrete.set_fixed_architecture(discretize_architecture(arch_w, 2));
  const auto a = predict_scores(relaxed, g), b = predict_scores(discrete, g);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6);
}

TEST_CASE("score decoding picks the column-wise best SPV") {
  // 3 SPVs, M = 1, N = 1, classes [comm0, sense0, none].
  const std::vector<double> scores{0.2, 0.9, 0.1, 0.8, 0.9, 0.3, 0.8, 0.1, 0.7};
  const Assignment a = assignment_from_scores(scores, 3, 1, 1);
  CHECK(a.comm_servers() == std::vector<int>{1});
  CHECK(a.sense_servers() == std::vector<int>{0});
  CHECK(validate_assignment(a).empty());
  const std::vector<double> dominant{0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2};
  const Assignment d = assignment_from_scores(dominant, 3, 1, 1);
  CHECK(d.comm_servers() == std::vector<int>{0});
  CHECK(d.sense_servers() == std::vector<int>{0});
  CHECK_THROWS_AS(assignment_from_scores(scores, 2, 1, 1), Error);
}

TEST_CASE("inference always yields a valid assignment") {
  const ChannelConfig cfg;
  const ModelConfig mc = small_model(3);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Topology t = generate_topology(small_generator(s));
    const PreparedGraph g = prepare_graph(t, cfg, mc);
    const DynGnnModel m(mc, g.graph.feature_dim, 5);
    CHECK(validate_assignment(infer_assignment(m, t, cfg)).empty());
  }
}

TEST_CASE("model save and load reproduce predictions") {
  const ChannelConfig cfg;
  const Topology t = generate_topology(small_generator(21));
  const ModelConfig mc = small_model();
  const PreparedGraph g = prepare_graph(t, cfg, mc);
  DynGnnModel m(mc, g.graph.feature_dim, 5);
  m.set_fixed_architecture(Architecture{{NodeAgg::Gcn, NodeAgg::SageMlp}, LayerAgg::Att});
  const auto path = std::filesystem::temp_directory_path() / "thz_unit_model.json";
  m.save(path);
  const DynGnnModel back = DynGnnModel::load(path);
  CHECK(back.fixed_architecture() == m.fixed_architecture());
  CHECK(predict_scores(back, g) == predict_scores(m, g));
}

TEST_CASE("training reduces the loss and fits a small set") {
  const ChannelConfig cfg;
  const ServiceRequirements req;
  ModelConfig mc = small_model();
  mc.embed = 16;
  mc.branch = 8;
  mc.hidden = {16, 16, 16};
  std::vector<Topology> ts;
  for (std::uint64_t s = 500; s < 520; ++s) ts.push_back(generate_topology(small_generator(s)));
  const auto labels = label_dataset(ts, cfg, req);
  std::vector<PreparedGraph> gs;
  for (std::size_t i = 0; i < ts.size(); ++i) gs.push_back(prepare_graph(ts[i], cfg, mc, &labels[i]));
  const int C = 5;

  SUBCASE("zero learning rate leaves weights unchanged") {
    DynGnnModel m(mc, gs[0].graph.feature_dim, C);
    m.set_fixed_architecture(Architecture{{NodeAgg::SageMean, NodeAgg::SageMean}, LayerAgg::Concat});
    TrainConfig tc;
    tc.finetune_lr = 0.0;
    tc.finetune_epochs = 3;
    const auto before = m.weights().flat_values();
    finetune_w(m, gs, tc);
    CHECK(m.weights().flat_values() == before);
  }

  SUBCASE("architecture search lowers the training loss") {
    DynGnnModel m(mc, gs[0].graph.feature_dim, C);
    TrainConfig tc;
    tc.search_epochs = 10;
    tc.batch_size = 5;
    const TrainHistory h = train_bilevel(m, gs, gs, tc);
    REQUIRE(h.search_train_loss.size() == 10);
    CHECK(h.search_train_loss.back() < h.search_train_loss.front());
    CHECK(m.arch_weights() != std::vector<double>(m.arch_weights().size(), 0.0));
  }

  SUBCASE("fine-tuning a fixed architecture fits the training topologies") {
    DynGnnModel m(mc, gs[0].graph.feature_dim, C);
    m.set_fixed_architecture(Architecture{{NodeAgg::SageMean, NodeAgg::SageMean}, LayerAgg::Concat});
    TrainConfig tc;
    tc.finetune_epochs = 1500;
    tc.batch_size = 5;
    tc.finetune_lr = 0.01;
    tc.early_stop = false;
    std::vector<const PreparedGraph*> ptrs;
    for (const auto& g : gs) ptrs.push_back(&g);
    const GraphBatch all = make_batch(ptrs);
    const double l0 = batch_loss(m, all);
    finetune_w(m, gs, tc);
    CHECK(batch_loss(m, all) < 0.1 * l0);
    int hit = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      LinkEvaluator ev(ts[i], cfg);
      hit += ev.report(infer_assignment(m, ts[i], cfg), req).objective() == labels[i].optimal_objective;
    }
    CHECK(hit >= 18);
  }
}

TEST_CASE("frozen architecture step keeps architecture weights and one SPV wins everything") {
  const ChannelConfig cfg;
  const ServiceRequirements req;
  Topology t;
  t.seed = 4;
  t.spvs = {{0, {0, 0}, 0, true}};
  t.comm = {{10, {8, 0}, 1.6e8}};
  t.sense = {{20, {0, 9}}};
  const ModelConfig mc = small_model();
  const auto labels = label_dataset({t}, cfg, req);
  const std::vector<PreparedGraph> gs{prepare_graph(t, cfg, mc, &labels[0])};
  DynGnnModel m(mc, gs[0].graph.feature_dim, 3);
  const Assignment a = infer_assignment(m, t, cfg);
  CHECK(a.comm_servers() == std::vector<int>{0});
  CHECK(a.sense_servers() == std::vector<int>{0});

  TrainConfig tc;
  tc.search_epochs = 10;
  tc.arch_lr = 0.0;
  tc.weight_lr = 0.005;
  const auto arch0 = m.arch_weights();
  const TrainHistory h = train_bilevel(m, gs, gs, tc);
  CHECK(m.arch_weights() == arch0);
  for (std::size_t e = 1; e < h.search_train_loss.size(); ++e) CHECK(h.search_train_loss[e] < h.search_train_loss[e - 1]);
}

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "thzsim/autodiff.hpp"
#include "thzsim/scenario.hpp"

using namespace thz;
using namespace thz::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  Rng rng(seed);
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// Weighted sum so every output element gets a distinct upstream gradient.
Var reduce(Tape& tape, Var y) {
  return sum(mul(y, tape.constant(random_tensor(y.shape(), 99))));
}

void expect_grad(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double tol = 1e-6) {
  const auto r = grad_check(f, x);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("tensor shapes and validation") {
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.at(1, 2) == 6);
  const Tensor v = Tensor::vector({1, 2});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 2);
  Tensor bad(Shape{2, 2});
  bad.values.pop_back();
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(Tensor::matrix(2, 2, {1, 2, 3}), Error);
}

TEST_CASE("elementwise primitive gradients") {
  const Tensor x = random_tensor({3, 4}, 1, 0.2, 1.5);
  const Tensor other = random_tensor({3, 4}, 2);
  expect_grad([&](Tape& t, Var a) { return reduce(t, add(a, t.constant(other))); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, sub(t.constant(other), a)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, mul(a, a)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, scale(a, -2.5)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, sigmoid(a)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, log(a)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, exp(a)); }, x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, tanh(a)); }, x);
  expect_grad([&](Tape& t, Var a) { return mean(a); }, x);
  const Tensor signed_x = random_tensor({3, 4}, 3);
  expect_grad([&](Tape& t, Var a) { return reduce(t, relu(a)); }, signed_x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, leaky_relu(a, 0.2)); }, signed_x);
  expect_grad([&](Tape& t, Var a) { return reduce(t, max(a, t.constant(other))); }, signed_x);
}

TEST_CASE("linear algebra gradients") {
  const Tensor X = random_tensor({4, 3}, 4);
  const Tensor W = random_tensor({5, 3}, 5);
  const Tensor b = random_tensor({5}, 6);
  expect_grad([&](Tape& t, Var a) { return reduce(t, matmul_nt(a, t.constant(W))); }, X);
  expect_grad([&](Tape& t, Var a) { return reduce(t, matmul_nt(t.constant(X), a)); }, W);
  expect_grad([&](Tape& t, Var a) { return reduce(t, linear(t.constant(X), t.constant(W), a)); }, b);
  const Tensor x3 = random_tensor({3}, 7);
  expect_grad([&](Tape& t, Var a) { return reduce(t, matvec(t.constant(W), a)); }, x3);
  expect_grad([&](Tape& t, Var a) { return reduce(t, matvec(a, t.constant(x3))); }, W);
  expect_grad([&](Tape& t, Var a) { return reduce(t, concat({a, t.constant(X), a})); }, X);
  expect_grad([&](Tape& t, Var a) { return reduce(t, reshape(a, Shape{3, 4})); }, X);
  expect_grad([&](Tape& t, Var a) { return pick(mul(a, a), 5); }, X);
}

TEST_CASE("softmax gradients") {
  const Tensor v = random_tensor({6}, 8);
  expect_grad([&](Tape& t, Var a) { return reduce(t, softmax(a)); }, v);
  const Tensor M = random_tensor({3, 4}, 9);
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_softmax(a)); }, M);
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1};
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_softmax(a, &mask)); }, M);
  Tape tape;
  const auto out = row_softmax(tape.constant(M), &mask).value();
  CHECK(out.at(0, 1) == 0.0);
  for (std::size_t c = 0; c < 4; ++c) CHECK(out.at(1, c) == 0.0);
  CHECK(out.at(0, 0) + out.at(0, 2) + out.at(0, 3) == doctest::Approx(1.0));
}

TEST_CASE("graph helper gradients") {
  const Tensor H = random_tensor({4, 3}, 10);
  const std::vector<int> idx{0, 2, -1, 3, 3, 1};
  expect_grad([&](Tape& t, Var a) { return reduce(t, gather_rows(a, idx)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, repeat_rows(a, 2)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, segment_sum(a, 2)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, segment_mean(a, 2)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, segment_max(a, 2)); }, H);
  const Tensor W = random_tensor({2, 2}, 11);
  expect_grad([&](Tape& t, Var a) { return reduce(t, weighted_segment_sum(a, t.constant(H))); }, W);
  expect_grad([&](Tape& t, Var a) { return reduce(t, weighted_segment_sum(t.constant(W), a)); }, H);
  const Tensor s = random_tensor({4}, 12);
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_scale(a, t.constant(s))); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_scale(t.constant(H), a)); }, s);
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_dot(a, t.constant(H))); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, row_normalize(a)); }, H);
  const Tensor w3 = Tensor::vector({0.2, 0.5, 0.3});
  const Tensor H2 = random_tensor({4, 3}, 16);
  expect_grad([&](Tape& t, Var a) { return reduce(t, mix(a, {t.constant(H), t.constant(H2), t.constant(H)})); }, w3);
}

TEST_CASE("fused neighbor ops match the gather formulation") {
  const Tensor H = random_tensor({4, 3}, 13);
  const std::vector<int> idx{1, 2, -1, 3, 0, 0, 2, -1};  // 4 rows, S = 2
  const std::vector<double> coef{0.5, 1.5, 2.0, -1.0, 0.25, 0.75, 1.0, 3.0};
  Tape tape;
  const Var h = tape.constant(H);
  const auto fused = neighbor_sum(h, idx, 2).value();
  const auto ref = segment_sum(gather_rows(h, idx), 2).value();
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(fused.values[i] == doctest::Approx(ref.values[i]));
  const auto fmax = neighbor_max(h, idx, 2).value();
  const auto rmax = segment_max(gather_rows(h, idx), 2).value();
  for (std::size_t i = 0; i < rmax.size(); ++i) CHECK(fmax.values[i] == doctest::Approx(rmax.values[i]));
  const Tensor W = random_tensor({4, 2}, 14);
  const auto fw = neighbor_weighted_sum(tape.constant(W), h, idx).value();
  const auto rw = weighted_segment_sum(tape.constant(W), gather_rows(h, idx)).value();
  for (std::size_t i = 0; i < rw.size(); ++i) CHECK(fw.values[i] == doctest::Approx(rw.values[i]));
  const auto fd = neighbor_dot(h, h, idx, 2).value();
  CHECK(fd.rows() == 4);
  CHECK(fd.cols() == 2);
  CHECK(fd.at(1, 0) == 0.0);
  double d = 0;
  for (std::size_t c = 0; c < 3; ++c) d += H.at(0, c) * H.at(1, c);
  CHECK(fd.at(0, 0) == doctest::Approx(d));

  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_sum(a, idx, 2)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_sum(a, idx, 2, &coef)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_max(a, idx, 2)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_weighted_sum(a, t.constant(H), idx)); }, W);
  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_weighted_sum(t.constant(W), a, idx)); }, H);
  expect_grad([&](Tape& t, Var a) { return reduce(t, neighbor_dot(a, a, idx, 2)); }, H);
  CHECK_THROWS_AS(neighbor_sum(h, std::vector<int>{0, 9}, 2), Error);
  CHECK_THROWS_AS(neighbor_sum(h, std::vector<int>{0, 1, 2}, 2), Error);
}

TEST_CASE("binary cross entropy values and gradient") {
  Tape tape;
  const Var y = tape.leaf(Tensor::vector({0.0, 0.0}));
  const Var loss = bce_loss(y, Tensor::vector({1.0, 0.0}));
  CHECK(loss.value().values[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  tape.backward(loss);
  const auto g = tape.grad(y);
  CHECK(g[0] == doctest::Approx(-0.5));
  CHECK(g[1] == doctest::Approx(0.5));
  Tape t2;
  const Var big = t2.constant(Tensor::vector({-800.0}));
  CHECK(bce_loss(big, Tensor::vector({1.0})).value().values[0] == doctest::Approx(-std::log(kProbClamp)));
  const Tensor logits = random_tensor({3, 2}, 15, -3, 3);
  const Tensor z = Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1});
  expect_grad([&](Tape&, Var a) { return bce_loss(a, z); }, logits);
  CHECK_THROWS_AS(bce_loss(t2.constant(Tensor::vector({1.0, 2.0})), Tensor::vector({1.0})), Error);
}

TEST_CASE("shape errors are reported") {
  Tape tape;
  const Var a = tape.constant(Tensor(Shape{2, 3}));
  const Var b = tape.constant(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(add(a, b), Error);
  CHECK_THROWS_AS(matmul_nt(a, b), Error);
  CHECK_THROWS_AS(concat({a, tape.constant(Tensor(Shape{3, 3}))}), Error);
  CHECK_THROWS_AS(reshape(a, Shape{4}), Error);
  CHECK_THROWS_AS(tape.backward(a), Error);
}

TEST_CASE("parameters, sgd and checkpoints") {
  Rng rng(3);
  ParameterSet ps;
  ps.add("w", Shape{2, 3}, 3, rng);
  ps.add("b", Tensor::vector({1.0, -1.0}));
  const double bound = 1.0 / std::sqrt(3.0);
  for (double v : ps.get("w").value.values) CHECK(std::abs(v) <= bound);
  CHECK(ps.num_values() == 8);
  CHECK_THROWS_AS(ps.get("missing"), Error);

  Tape tape;
  const Var w = tape.param(ps.get("w"));
  const Var bb = tape.param(ps.get("b"));
  const Var out = sum(add_bias(matmul_nt(tape.constant(Tensor::matrix(1, 3, {1, 2, 3})), w), bb));
  ps.zero_grad();
  tape.backward(out);
  const auto g = ps.flat_grads();
  CHECK(g == std::vector<double>{1, 2, 3, 1, 2, 3, 1, 1});
  const auto before = ps.flat_values();
  sgd_step(ps, 0.1);
  const auto after = ps.flat_values();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(after[i] == doctest::Approx(before[i] - 0.1 * g[i]));

  CHECK(clip_grad_norm(ps, 0.0) == doctest::Approx(std::sqrt(30.0)));
  CHECK(ps.flat_grads() == g);
  CHECK(clip_grad_norm(ps, 10.0) == doctest::Approx(std::sqrt(30.0)));
  CHECK(ps.flat_grads() == g);
  clip_grad_norm(ps, 1.0);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(ps.flat_grads()[i] == doctest::Approx(g[i] / std::sqrt(30.0)));
  ps.get("b").trainable = false;
  CHECK(clip_grad_norm(ps, 0.0) == doctest::Approx(std::sqrt(28.0 / 30.0)));
  ps.get("b").trainable = true;

  const auto path = std::filesystem::temp_directory_path() / "thz_unit_ckpt.json";
  save_checkpoint(ps, {{"note", "x"}}, path);
  nlohmann::json meta;
  const ParameterSet back = load_checkpoint(path, &meta);
  CHECK(meta["note"] == "x");
  CHECK(back.flat_values() == ps.flat_values());
  auto j = checkpoint_to_json(ps, {});
  j["version"] = kCheckpointVersion + 1;
  CHECK_THROWS_AS(checkpoint_from_json(j), Error);
}

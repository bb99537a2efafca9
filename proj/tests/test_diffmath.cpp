#include <doctest.h>

#include <cmath>

#include "dproxy/diffmath.hpp"
#include "dproxy/rng.hpp"

using namespace dproxy;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

namespace {

Tensor2<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng = make_rng(seed, "test-diffmath");
  Tensor2<double> t(r, c);
  for (auto& x : t.data) x = scale * standard_normal(rng);
  return t;
}

// Contracts an op's output with fixed random weights so every output entry
// receives a distinct upstream gradient.
Var<double> contract(Var<double> out, std::uint64_t seed) {
  auto w = out.tape().constant(random_matrix(out.rows(), out.cols(), seed + 1000));
  return diff::sum_all(diff::hadamard(out, w));
}

using Op = std::function<Var<double>(diff::Binder<double>&)>;

double check_op(ParamStore<double>& store, const Op& op, std::uint64_t seed = 1) {
  auto report = diff::grad_check(
      [&](Tape<double>& tape, ParamStore<double>& s) {
        diff::Binder<double> bind(tape, s);
        return contract(op(bind), seed);
      },
      store, 1e-6, 1e-6);
  INFO("worst " << report.worst_param << "[" << report.worst_index << "] analytic " << report.worst_analytic
                << " numeric " << report.worst_numeric);
  CHECK(report.passed);
  return report.max_rel_error;
}

ParamStore<double> store_with(std::initializer_list<std::pair<const char*, Tensor2<double>>> entries) {
  ParamStore<double> s;
  for (const auto& [name, value] : entries) s.add(name, value);
  return s;
}

}  // namespace

TEST_CASE("matmul and matmul_nt values") {
  Tape<double> tape;
  auto a = tape.constant(Tensor2<double>::from(2, 3, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor2<double>::from(3, 2, {7, 8, 9, 10, 11, 12}));
  CHECK(diff::matmul(a, b).value() == Tensor2<double>::from(2, 2, {58, 64, 139, 154}));
  auto bt = tape.constant(Tensor2<double>::from(2, 3, {7, 9, 11, 8, 10, 12}));
  CHECK(diff::matmul_nt(a, bt).value() == Tensor2<double>::from(2, 2, {58, 64, 139, 154}));
  CHECK_THROWS_AS(diff::matmul(a, a), Error);
}

TEST_CASE("binary ops pass gradient checks") {
  auto s = store_with({{"a", random_matrix(3, 4, 1)}, {"b", random_matrix(3, 4, 2)}, {"v", random_matrix(1, 4, 3)}});
  check_op(s, [](auto& p) { return diff::matmul_nt(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::add(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::sub(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::hadamard(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::add_rowvec(p("a"), p("v")); });
  check_op(s, [](auto& p) { return diff::sub_rowvec(p("a"), p("v")); });
  check_op(s, [](auto& p) { return diff::concat_cols(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::row_dot(p("a"), p("b")); });
  check_op(s, [](auto& p) { return diff::cosine_rows(p("a"), p("b")); });
}

TEST_CASE("matmul passes a gradient check") {
  auto s = store_with({{"a", random_matrix(3, 4, 4)}, {"b", random_matrix(4, 2, 5)}});
  check_op(s, [](auto& p) { return diff::matmul(p("a"), p("b")); });
}

TEST_CASE("broadcast and scalar ops pass gradient checks") {
  auto s = store_with({{"a", random_matrix(3, 4, 6)}, {"b", random_matrix(3, 4, 7)}, {"s", random_matrix(3, 1, 8)},
                       {"k", random_matrix(1, 1, 9)}});
  check_op(s, [](auto& p) { return diff::mul_colvec(p("a"), p("s")); });
  check_op(s, [](auto& p) { return diff::mul_scalar(p("a"), p("k")); });
  check_op(s, [](auto& p) { return diff::affine(p("a"), 2.5, -1.0); });
  check_op(s, [](auto& p) { return diff::scale(p("a"), -0.3); });
  check_op(s, [](auto& p) { return diff::scalar_mix(diff::sigmoid(p("s")), p("a"), p("b")); });
}

TEST_CASE("unary and row-wise ops pass gradient checks") {
  auto s = store_with({{"a", random_matrix(4, 5, 10)}});
  check_op(s, [](auto& p) { return diff::sigmoid(p("a")); });
  check_op(s, [](auto& p) { return diff::exp(diff::scale(p("a"), 0.5)); });
  check_op(s, [](auto& p) { return diff::softmax_rows(p("a"), 0.7); });
  check_op(s, [](auto& p) { return diff::layernorm_rows(p("a"), 1e-5); });
  check_op(s, [](auto& p) { return diff::l2_normalize_rows(p("a")); });
  check_op(s, [](auto& p) { return diff::row_sqnorm(p("a")); });
  check_op(s, [](auto& p) { return diff::mean_rows(p("a")); });
  check_op(s, [](auto& p) { return diff::slice_cols(p("a"), 1, 3); });
  check_op(s, [](auto& p) { return diff::gather_rows(p("a"), {3, 0, 3, 1}); });
  check_op(s, [](auto& p) { return diff::mean_all(p("a")); });
}

TEST_CASE("relu gradient away from the kink") {
  auto a = random_matrix(3, 3, 11);
  for (auto& x : a.data) x += x > 0 ? 0.1 : -0.1;
  auto s = store_with({{"a", a}});
  check_op(s, [](auto& p) { return diff::relu(p("a")); });
}

TEST_CASE("logsumexp over off-diagonal entries") {
  Tape<double> tape;
  auto z = tape.constant(Tensor2<double>(3, 3, 0.0));
  auto out = diff::logsumexp_offdiag_rows(z).value();
  for (double x : out.data) CHECK(x == doctest::Approx(std::log(2.0)));
  auto s = store_with({{"a", random_matrix(4, 4, 12)}});
  check_op(s, [](auto& p) { return diff::logsumexp_offdiag_rows(p("a")); });
}

TEST_CASE("softmax rows sum to one and respect temperature") {
  Tape<double> tape;
  auto a = tape.constant(Tensor2<double>::from(1, 3, {1.0, 2.0, 3.0}));
  auto p = diff::softmax_rows(a, 0.5).value();
  CHECK(p.data[0] + p.data[1] + p.data[2] == doctest::Approx(1.0));
  CHECK(p.data[2] / p.data[1] == doctest::Approx(std::exp(2.0)));
  auto big = tape.constant(Tensor2<double>::from(1, 2, {1000.0, 0.0}));
  CHECK(diff::softmax_rows(big).value().data[0] == doctest::Approx(1.0));
}

TEST_CASE("layernorm output has zero mean and unit variance") {
  Tape<double> tape;
  auto y = diff::layernorm_rows(tape.constant(random_matrix(2, 16, 13)), 1e-12).value();
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0.0, v = 0.0;
    for (double x : y.row(i)) m += x;
    m /= 16.0;
    for (double x : y.row(i)) v += (x - m) * (x - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 16.0 == doctest::Approx(1.0));
  }
}

TEST_CASE("backward accumulates into parameter gradients") {
  ParamStore<double> s;
  s.add("w", Tensor2<double>::from(1, 2, {1.0, 2.0}));
  for (int pass = 1; pass <= 2; ++pass) {
    Tape<double> tape;
    diff::Binder<double> bind(tape, s);
    auto loss = diff::sum_all(diff::hadamard(bind("w"), bind("w")));
    tape.backward(loss);
    CHECK(s.at("w").grad.data[0] == doctest::Approx(2.0 * pass));
    CHECK(s.at("w").grad.data[1] == doctest::Approx(4.0 * pass));
  }
  s.zero_grad();
  CHECK(s.at("w").grad.data[0] == 0.0);
}

TEST_CASE("a parameter used twice on one tape gets both contributions") {
  ParamStore<double> s;
  s.add("w", Tensor2<double>::from(1, 1, {3.0}));
  Tape<double> tape;
  diff::Binder<double> bind(tape, s);
  auto loss = diff::sum_all(diff::add(diff::scale(bind("w"), 2.0), diff::hadamard(bind("w"), bind("w"))));
  tape.backward(loss);
  CHECK(s.at("w").grad.data[0] == doctest::Approx(8.0));
}

TEST_CASE("constants receive no gradient and loss must be scalar") {
  Tape<double> tape;
  auto c = tape.constant(random_matrix(2, 2, 14));
  CHECK_FALSE(tape.requires_grad(c.id()));
  CHECK_THROWS_AS(tape.backward(c), Error);
}

TEST_CASE("finite checking flags non-finite values") {
  Tape<double> tape(true);
  auto a = tape.constant(Tensor2<double>::from(1, 1, {800.0}));
  CHECK_THROWS_AS(diff::exp(a), Error);
  Tape<double> lax(false);
  CHECK(std::isinf(diff::exp(lax.constant(Tensor2<double>::from(1, 1, {800.0}))).item()));
}

TEST_CASE("parameter store rejects duplicates and unknown names") {
  ParamStore<float> s;
  s.add("a", Tensor2<float>(2, 2));
  CHECK_THROWS_AS(s.add("a", Tensor2<float>(1, 1)), Error);
  CHECK_THROWS_AS(s.at("b"), Error);
  CHECK(s.total_entries() == 4);
  auto d = s.cast<double>();
  CHECK(d.at("a").value.rows == 2);
}

TEST_CASE("grad_check detects a wrong gradient") {
  ParamStore<double> s;
  s.add("x", Tensor2<double>::from(1, 3, {0.3, -0.2, 0.5}));
  // Backward deliberately scaled by 2.
  auto wrong = [](Tape<double>& tape, ParamStore<double>& store) {
    diff::Binder<double> bind(tape, store);
    Var<double> x = bind("x");
    Tensor2<double> v(1, 1, 0.0);
    for (double e : x.value().data) v.data[0] += e * e;
    return tape.record(
        std::move(v), {x},
        [x](Tape<double>& t, std::size_t self) {
          const double g = t.grad(self).data[0];
          auto& gx = t.grad(x.id());
          for (std::size_t k = 0; k < gx.data.size(); ++k) gx.data[k] += 4.0 * g * x.value().data[k];
        },
        "bad_square");
  };
  const auto rep = diff::grad_check(wrong, s, 1e-5, 1e-4);
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_rel_error == doctest::Approx(0.5).epsilon(1e-3));
  CHECK_THROWS_AS(diff::grad_check(wrong, s, 0.1, 1e-4), Error);
}

#include "doctest.h"
#include "fd_oracle.hpp"

#include "sklp/autodiff.hpp"
#include "sklp/errors.hpp"
#include "sklp/rng.hpp"

#include <vector>

using namespace sklp;
using ad::Graph;
using ad::Matrix;
using ad::Var;

namespace {

Matrix random_matrix(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

// Builds a scalar from the given inputs (bound as tracked leaves) and checks
// every input coordinate against central differences.
void check_gradients(std::vector<Matrix> inputs, const std::function<Var(Graph&, const std::vector<Var>&)>& build) {
  Graph g;
  std::vector<Var> leaves;
  for (const Matrix& m : inputs) leaves.push_back(g.leaf(&m, "in"));
  Var root = build(g, leaves);
  g.backward(root);
  auto value = [&] {
    Graph h;
    std::vector<Var> ls;
    for (const Matrix& m : inputs) ls.push_back(h.leaf(&m, "in", false));
    return h.scalar(build(h, ls));
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix analytic = g.grad_or_zero(leaves[k]);
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double numeric = testing::central_difference(value, inputs[k].data()[i]);
      CHECK(testing::relative_error(analytic.data()[i], numeric) < 1e-6);
    }
  }
}

}  // namespace

TEST_CASE("matmul, bias, gelu and cross entropy chain") {
  Rng rng(1);
  check_gradients({random_matrix(rng, 3, 4), random_matrix(rng, 4, 5), random_matrix(rng, 1, 5)},
                  [](Graph& g, const std::vector<Var>& in) {
                    Var h = ad::gelu(g, ad::add_row(g, ad::matmul(g, in[0], in[1]), in[2]));
                    std::vector<int> t{0, 4, 2};
                    return ad::cross_entropy_rows(g, h, t);
                  });
}

TEST_CASE("layer norm and masked softmax") {
  Rng rng(2);
  check_gradients({random_matrix(rng, 4, 6), random_matrix(rng, 1, 6), random_matrix(rng, 1, 6), random_matrix(rng, 6, 4)},
                  [](Graph& g, const std::vector<Var>& in) {
                    Var n = ad::layer_norm(g, in[0], in[1], in[2]);
                    static const std::vector<char> mask{1, 0, 1, 1};
                    Var p = ad::softmax_rows(g, ad::matmul(g, n, in[3]), mask);
                    return ad::half_squared_norm(g, ad::matmul_nt(g, p, p));
                  });
}

TEST_CASE("slicing, concatenation, gather, mean and normalisation") {
  Rng rng(3);
  check_gradients({random_matrix(rng, 5, 4), random_matrix(rng, 2, 4)},
                  [](Graph& g, const std::vector<Var>& in) {
                    static const std::vector<int> rows{0, 3, 3, 1};
                    Var a = ad::gather_rows(g, in[0], rows);
                    Var b = ad::concat_rows(g, {a, in[1]});
                    Var c = ad::concat_cols(g, {ad::slice_cols(g, b, 0, 2), ad::scale(g, ad::slice_cols(g, b, 2, 2), -2.0)});
                    Var m = ad::mean_rows(g, ad::slice_rows(g, c, 1, 4));
                    Var u = ad::l2_normalize_rows(g, ad::add(g, c, c));
                    return ad::weighted_sum(g, {ad::half_squared_norm(g, m), ad::half_squared_norm(g, ad::matmul_nt(g, u, b))}, {1.0, 0.25});
                  });
}

TEST_CASE("binary cross entropy with logits") {
  Rng rng(4);
  check_gradients({random_matrix(rng, 4, 1)}, [](Graph& g, const std::vector<Var>& in) {
    static const std::vector<double> y{1, 0, 0, 1};
    return ad::bce_with_logits(g, ad::scale(g, in[0], 3.0), y);
  });
}

TEST_CASE("masked softmax assigns zero probability to invalid keys") {
  Graph g;
  Var x = g.constant(Matrix::Ones(2, 3));
  std::vector<char> mask{1, 0, 1};
  const Matrix& p = g.value(ad::softmax_rows(g, x, mask));
  CHECK(p(0, 1) == 0.0);
  CHECK(p(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("backward rejects non-finite intermediates with the op label") {
  Graph g;
  Matrix w(1, 1);
  w(0, 0) = 1e308;
  Var v = g.leaf(&w, "w");
  Var big = ad::scale(g, v, 10.0);
  CHECK_THROWS_AS(g.backward(ad::half_squared_norm(g, big)), NumericError);
}

TEST_CASE("shape mismatches raise shape errors") {
  Graph g;
  Var a = g.constant(Matrix::Zero(2, 3));
  Var b = g.constant(Matrix::Zero(2, 3));
  CHECK_THROWS_AS(ad::matmul(g, a, b), ShapeError);
  CHECK_THROWS_AS(ad::add_row(g, a, b), ShapeError);
}

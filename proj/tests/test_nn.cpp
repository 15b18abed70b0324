#include "hydra/checkpoint.hpp"
#include "hydra/error.hpp"
#include "hydra/nn.hpp"
#include "hydra/random.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>

using namespace hydra;
using hydra::testing::finite_difference;
using hydra::testing::flatten;
using hydra::testing::relative_error;
using hydra::testing::unflatten;

namespace {

DenseLayer layer(Matrix w, Vector b, Activation a) { return DenseLayer{std::move(w), std::move(b), a}; }

MlpModel random_model(Rng& rng, std::vector<int> dims, Activation hidden) {
  return MlpModel::initialized(dims, hidden, rng.next());
}

Vector random_vector(Rng& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("forward: zero model gives zero output") {
  MlpModel model({layer(Matrix::Zero(4, 3), Vector::Zero(4), Activation::relu),
                  layer(Matrix::Zero(2, 4), Vector::Zero(2), Activation::identity)});
  const Vector out = forward(model, Vector::Constant(3, 1.7));
  CHECK(out == Vector::Zero(2));
}

TEST_CASE("forward: identity layer passes input through") {
  MlpModel model({layer(Matrix::Identity(3, 3), Vector::Zero(3), Activation::identity)});
  Vector v(3);
  v << 0.5, -2.0, 3.25;
  CHECK(forward(model, v) == v);
}

TEST_CASE("forward: hand-evaluated 2-2-1 network") {
  Matrix w1(2, 2);
  w1 << 1.0, -1.0, 2.0, 0.5;
  Vector b1(2);
  b1 << 0.5, -1.0;
  Matrix w2(1, 2);
  w2 << 1.0, -2.0;
  Vector b2(1);
  b2 << 0.25;
  MlpModel model({layer(w1, b1, Activation::relu), layer(w2, b2, Activation::identity)});
  Vector x(2);
  x << 1.0, 2.0;
  // hidden pre-activations (-0.5, 2) -> relu (0, 2) -> 0 - 4 + 0.25
  CHECK(forward(model, x)(0) == doctest::Approx(-3.75));
}

TEST_CASE("forward: dimension mismatch and non-chaining layers are rejected") {
  MlpModel model({layer(Matrix::Identity(2, 2), Vector::Zero(2), Activation::identity)});
  CHECK_THROWS_AS(forward(model, Vector::Zero(3)), InvalidInput);
  CHECK_THROWS_AS(MlpModel({layer(Matrix::Ones(3, 2), Vector::Zero(3), Activation::relu),
                            layer(Matrix::Ones(1, 2), Vector::Zero(1), Activation::identity)}),
                  InvalidInput);
  Matrix bad = Matrix::Identity(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(MlpModel({layer(bad, Vector::Zero(2), Activation::identity)}), InvalidInput);
}

TEST_CASE("forward is pure") {
  Rng rng(3);
  const MlpModel model = random_model(rng, {5, 7, 3}, Activation::softplus);
  const Vector x = random_vector(rng, 5);
  const Vector a = forward(model, x);
  const Vector b = forward(model, x);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  Rng rng(5);
  const MlpModel model = random_model(rng, {4, 6, 2}, Activation::relu);
  const MlpGradients g = backward(model, random_vector(rng, 4), Vector::Zero(2));
  CHECK(flatten(g).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: single linear layer weight gradient is outer(g, x)") {
  Rng rng(7);
  const MlpModel model = random_model(rng, {3, 2}, Activation::identity);
  const Vector x = random_vector(rng, 3);
  const Vector g = random_vector(rng, 2);
  const MlpGradients grads = backward(model, x, g);
  CHECK((grads.weight[0] - g * x.transpose()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((grads.bias[0] - g).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("backward: shape mismatch rejected") {
  Rng rng(9);
  const MlpModel model = random_model(rng, {3, 2}, Activation::identity);
  CHECK_THROWS_AS(backward(model, Vector::Zero(3), Vector::Zero(3)), InvalidInput);
}

TEST_CASE("backward matches central finite differences on random models") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int in = 1 + static_cast<int>(rng.below(20));
    const int h1 = 1 + static_cast<int>(rng.below(20));
    const int h2 = 1 + static_cast<int>(rng.below(20));
    const int out = 1 + static_cast<int>(rng.below(20));
    const Activation act = trial % 2 ? Activation::softplus : Activation::relu;
    const MlpModel model = random_model(rng, {in, h1, h2, out}, act);
    const Vector x = random_vector(rng, in);
    const Vector g = random_vector(rng, out);
    const Vector analytic = flatten(backward(model, x, g));
    const Vector numeric = finite_difference(
        [&](const Vector& p) { return g.dot(forward(unflatten(model, p), x)); }, flatten(model));
    CAPTURE(trial);
    CHECK(relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("tempered softmax examples") {
  Vector zeros = Vector::Zero(3);
  for (double t : {0.1, 1.0, 7.0}) {
    const Vector p = tempered_softmax(zeros, t);
    for (int i = 0; i < 3; ++i) CHECK(p(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  Vector two(2);
  two << 2.0, 0.0;
  // softmax(1, 0) = (e/(e+1), 1/(e+1))
  const Vector p = tempered_softmax(two, 2.0);
  CHECK(p(0) == doctest::Approx(0.7311).epsilon(5e-5));
  CHECK(p(1) == doctest::Approx(0.2689).epsilon(5e-5));
  Vector ten(2);
  ten << 10.0, 0.0;
  const Vector hot = tempered_softmax(ten, 1e6);
  CHECK(std::abs(hot(0) - 0.5) < 1e-5);
  CHECK(std::abs(hot(1) - 0.5) < 1e-5);
  Vector huge(3);
  huge << 1000.0, 999.0, -1000.0;
  const Vector stable = tempered_softmax(huge, 1.0);
  CHECK(stable.allFinite());
  CHECK(std::abs(stable.sum() - 1.0) < 1e-12);
}

TEST_CASE("tempered softmax rejects non-positive temperature") {
  CHECK_THROWS_AS(tempered_softmax(Vector::Zero(2), 0.0), InvalidInput);
  CHECK_THROWS_AS(tempered_softmax(Vector::Zero(2), -1.0), InvalidInput);
}

TEST_CASE("tempered softmax: scale covariance and argmax preservation") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index c = 2 + static_cast<Eigen::Index>(rng.below(9));
    const Vector z = 3.0 * random_vector(rng, c);
    const double t = rng.uniform(0.1, 10.0);
    const double a = rng.uniform(0.1, 10.0);
    const Vector p = tempered_softmax(z, t);
    const Vector q = tempered_softmax(z * a, t * a);
    CHECK((p - q).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    Eigen::Index zi = 0;
    Eigen::Index pi = 0;
    z.maxCoeff(&zi);
    p.maxCoeff(&pi);
    CHECK(zi == pi);
  }
}

TEST_CASE("optimizer: sgd update and zero gradient") {
  Rng rng(17);
  MlpModel model = random_model(rng, {3, 2}, Activation::identity);
  const MlpModel before = model;
  MlpGradients g = MlpGradients::zeros_like(model);
  g.weight[0].setConstant(0.5);
  g.bias[0].setConstant(-1.0);
  OptimizerState sgd({OptimizerKind::sgd, 0.1}, model);
  sgd.step(model, g);
  CHECK((model.layers()[0].weight - (before.layers()[0].weight.array() - 0.05).matrix()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((model.layers()[0].bias - (before.layers()[0].bias.array() + 0.1).matrix()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(sgd.steps() == 1);

  MlpModel still = before;
  OptimizerState adam({}, still);
  adam.step(still, MlpGradients::zeros_like(still));
  CHECK(still == before);
  OptimizerState sgd2({OptimizerKind::sgd, 0.1}, still);
  sgd2.step(still, MlpGradients::zeros_like(still));
  CHECK(still == before);
}

TEST_CASE("optimizer: non-finite gradient is rejected and model untouched") {
  Rng rng(19);
  MlpModel model = random_model(rng, {2, 2}, Activation::identity);
  const MlpModel before = model;
  MlpGradients g = MlpGradients::zeros_like(model);
  g.bias[0](1) = std::numeric_limits<double>::infinity();
  OptimizerState adam({}, model);
  CHECK_THROWS_AS(adam.step(model, g), TrainingError);
  CHECK(model == before);
  CHECK(adam.steps() == 0);
}

TEST_CASE("optimizer: adam minimizes w^2 from w=1") {
  Matrix w(1, 1);
  w << 1.0;
  MlpModel model({layer(w, Vector::Zero(1), Activation::identity)});
  OptimizerState adam({OptimizerKind::adam, 0.01}, model);
  for (int step = 0; step < 500; ++step) {
    MlpGradients g = MlpGradients::zeros_like(model);
    g.weight[0](0, 0) = 2.0 * model.layers()[0].weight(0, 0);
    adam.step(model, g);
  }
  CHECK(std::abs(model.layers()[0].weight(0, 0)) < 0.1);
}

TEST_CASE("count_params reproduces the MNIST MLP accounting") {
  const std::vector<int> mnist{784, 200, 200, 10};
  const MlpModel mlp = MlpModel::initialized(mnist, Activation::relu, 1);
  CHECK(count_params(mlp) == 199210);
  CHECK(50 * count_params(mlp) == 9960500);
}

TEST_CASE("regression head parameterization clamps variance") {
  CHECK(gaussian_from_raw(1.0, 0.0).variance == 1.0);
  CHECK(gaussian_from_raw(0.0, -100.0).variance == kMinVariance);
  CHECK(gaussian_from_raw(0.0, 100.0).variance == kMaxVariance);
  CHECK(variance_raw_derivative(-100.0) == 0.0);
  CHECK(variance_raw_derivative(std::log(2.0)) == doctest::Approx(2.0));
}

TEST_CASE("checkpoint round trip is bitwise lossless") {
  Rng rng(23);
  const MlpModel model = random_model(rng, {4, 9, 3}, Activation::softplus);
  const auto path = std::filesystem::temp_directory_path() / "hydra_test_nn_ckpt.json";
  save_model(path, model, {42, "abc"});
  CheckpointMeta meta;
  const MlpModel loaded = load_model(path, &meta);
  CHECK(loaded == model);
  CHECK(meta.seed == 42);
  CHECK(meta.config_digest == "abc");

  Json doc = model_to_json(model);
  doc["version"] = 99;
  CHECK_THROWS_AS(model_from_json(doc), LoadError);
  std::filesystem::remove(path);
}

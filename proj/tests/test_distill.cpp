#include "hydra/checkpoint.hpp"
#include "hydra/distill.hpp"
#include "hydra/error.hpp"
#include "hydra/metrics.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <numbers>

using namespace hydra;
using namespace hydra::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hydra_test_distill_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

Vector random_vector(Rng& rng, int n, double sd = 1.0) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = sd * rng.normal();
  return v;
}

Vector random_distribution(Rng& rng, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.uniform(0.05, 1.0);
  return v / v.sum();
}

// Direct softmax(z / T) without max subtraction; fine for the small logits used here.
Vector naive_softmax(const Vector& z, double t) {
  Vector e = (z / t).array().exp().matrix();
  return e / e.sum();
}

double naive_cross_entropy(const Vector& target, const Vector& q) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) s -= target(i) * std::log(q(i));
  return s;
}

double naive_kl(const Vector& p, const Vector& q) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) s += p(i) * std::log(p(i) / q(i));
  return s;
}

MlpModel constant_regressor(double mean, double variance) {
  DenseLayer layer{Matrix::Zero(2, 1), Vector(2), Activation::identity};
  layer.bias << mean, std::log(variance);
  return MlpModel({layer});
}

HydraModel small_hydra(Task task, int in, int classes, int heads, std::uint64_t seed) {
  const std::vector<int> body{in, 6, 5};
  const std::vector<int> head{4, task == Task::classification ? classes : 2};
  HydraModel h = HydraModel::initialized(body, head, Activation::softplus, task, 1.0, seed);
  h = grow_heads(h, heads);
  // Perturb heads so they differ.
  Rng rng(seed + 17);
  for (auto& m : h.heads)
    for (auto& layer : m.mutable_layers()) layer.bias += random_vector(rng, static_cast<int>(layer.bias.size()), 0.3);
  return h;
}

}  // namespace

TEST_CASE("kd loss: hand-computed KL and self-divergence") {
  Vector teacher(2);
  teacher << 0.75, 0.25;
  const auto loss = kd_classification_loss(teacher, Vector::Zero(2), 1.0);
  CHECK(loss.kl == doctest::Approx(0.1308).epsilon(1e-3));
  CHECK(loss.kl == doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)).epsilon(1e-12));

  // Student logits that reproduce the teacher at T = 2.
  Vector logits(2);
  logits << 2.0 * std::log(0.75), 2.0 * std::log(0.25);
  const auto self = kd_classification_loss(teacher, logits, 2.0);
  CHECK(std::abs(self.kl) < 1e-14);
  CHECK(self.value == doctest::Approx(4.0 * entropy_direct({0.75, 0.25})).epsilon(1e-12));
  CHECK(self.grad[0].cwiseAbs().maxCoeff() < 1e-15);

  CHECK_THROWS_AS(kd_classification_loss(Vector::Constant(2, 0.6), Vector::Zero(2), 1.0), InvalidInput);
  CHECK_THROWS_AS(kd_classification_loss(teacher, Vector::Zero(3), 1.0), InvalidInput);
  CHECK_THROWS_AS(kd_classification_loss(teacher, Vector::Zero(2), 0.0), InvalidInput);
}

TEST_CASE("kd loss matches direct evaluation; doubling T and logits keeps probabilities") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector t = random_distribution(rng, 5);
    const Vector z = random_vector(rng, 5);
    const double temp = rng.uniform(0.5, 4.0);
    const auto loss = kd_classification_loss(t, z, temp);
    const Vector q = naive_softmax(z, temp);
    CHECK(loss.value == doctest::Approx(temp * temp * naive_cross_entropy(t, q)).epsilon(1e-12));
    CHECK(loss.kl == doctest::Approx(temp * temp * naive_kl(t, q)).epsilon(1e-9));
    CHECK(loss.kl >= -1e-12);
    CHECK((tempered_softmax(2.0 * z, 2.0 * temp) - tempered_softmax(z, temp)).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("temper_probabilities equals dividing logits by T") {
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const Vector z = random_vector(rng, 4);
    const double temp = rng.uniform(0.5, 5.0);
    const Vector direct = naive_softmax(z, temp);
    CHECK((temper_probabilities(naive_softmax(z, 1.0), temp) - direct).cwiseAbs().maxCoeff() < 1e-12);
  }
  Vector one_hot = Vector::Zero(3);
  one_hot(1) = 1.0;
  CHECK(temper_probabilities(one_hot, 3.0) == one_hot);
}

TEST_CASE("hydra loss with one head equals kd bitwise") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector t = random_distribution(rng, 4);
    const Vector z = random_vector(rng, 4, 3.0);
    const double temp = rng.uniform(0.5, 4.0);
    const auto kd = kd_classification_loss(t, z, temp);
    const auto hy = hydra_classification_logit_loss({t}, {z}, temp);
    CHECK(kd.value == hy.value);
    CHECK(kd.kl == hy.kl);
    CHECK(kd.grad[0] == hy.grad[0]);
  }
}

TEST_CASE("hydra loss: two-head toy against hand computation") {
  Vector t1(2), t2(2), z1(2), z2(2);
  t1 << 0.9, 0.1;
  t2 << 0.2, 0.8;
  z1 << 1.0, 0.0;
  z2 << 0.0, 0.5;
  const double temp = 2.0;
  // softmax([0.5, 0]) and softmax([0, 0.25]) by hand.
  const double a = std::exp(0.5) / (std::exp(0.5) + 1.0);
  const double b = 1.0 / (1.0 + std::exp(0.25));
  const double kl1 = 0.9 * std::log(0.9 / a) + 0.1 * std::log(0.1 / (1.0 - a));
  const double kl2 = 0.2 * std::log(0.2 / b) + 0.8 * std::log(0.8 / (1.0 - b));
  const double h1 = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  const double h2 = -(0.2 * std::log(0.2) + 0.8 * std::log(0.8));
  const auto loss = hydra_classification_logit_loss({t1, t2}, {z1, z2}, temp);
  CHECK(loss.kl == doctest::Approx(4.0 * (kl1 + kl2) / 2.0).epsilon(1e-12));
  CHECK(loss.value == doctest::Approx(4.0 * (kl1 + kl2 + h1 + h2) / 2.0).epsilon(1e-12));

  const auto exact = hydra_classification_logit_loss({t1, t2}, {2.0 * t1.array().log().matrix(), 2.0 * t2.array().log().matrix()}, temp);
  CHECK(std::abs(exact.kl) < 1e-14);
  CHECK_THROWS_AS(hydra_classification_logit_loss({t1}, {z1, z2}, temp), ConfigError);
}

TEST_CASE("classification loss gradients match finite differences") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(4));
    std::vector<Vector> teacher, logits;
    for (int k = 0; k < m; ++k) {
      teacher.push_back(random_distribution(rng, 3));
      logits.push_back(random_vector(rng, 3, 2.0));
    }
    const double temp = rng.uniform(0.5, 3.0);
    const auto loss = hydra_classification_logit_loss(teacher, logits, temp);
    for (int k = 0; k < m; ++k) {
      auto f = [&](const Vector& z) {
        auto l = logits;
        l[static_cast<std::size_t>(k)] = z;
        return hydra_classification_logit_loss(teacher, l, temp).value;
      };
      CHECK(relative_error(loss.grad[static_cast<std::size_t>(k)],
                           finite_difference(f, logits[static_cast<std::size_t>(k)])) < 1e-4);
    }
  }
}

TEST_CASE("hydra model loss: parameter gradients match finite differences") {
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    const int heads = 1 + trial % 3;
    const HydraModel h = small_hydra(Task::classification, 3, 4, heads, 40 + trial);
    std::vector<Vector> teacher;
    for (int k = 0; k < heads; ++k) teacher.push_back(random_distribution(rng, 4));
    const Vector x = random_vector(rng, 3);
    const double temp = 1.5;
    const auto loss = hydra_classification_loss(teacher, h, x, temp);
    REQUIRE(loss.grads.heads.size() == static_cast<std::size_t>(heads));

    auto body_f = [&](const Vector& w) {
      HydraModel c = h;
      c.body = unflatten(h.body, w);
      return hydra_classification_loss(teacher, c, x, temp).value;
    };
    CHECK(relative_error(flatten(loss.grads.body), finite_difference(body_f, flatten(h.body))) < 1e-4);
    for (int k = 0; k < heads; ++k) {
      const auto idx = static_cast<std::size_t>(k);
      auto head_f = [&](const Vector& w) {
        HydraModel c = h;
        c.heads[idx] = unflatten(h.heads[idx], w);
        return hydra_classification_loss(teacher, c, x, temp).value;
      };
      CHECK(relative_error(flatten(loss.grads.heads[idx]), finite_difference(head_f, flatten(h.heads[idx]))) < 1e-4);
    }
  }
  const HydraModel h = small_hydra(Task::classification, 3, 4, 2, 1);
  CHECK_THROWS_AS(hydra_classification_loss({random_distribution(rng, 4)}, h, Vector::Zero(3), 1.0), ConfigError);
}

TEST_CASE("regression losses: closed forms, quadrature, minimizer") {
  // Self cross-entropy.
  const auto self = kd_regression_loss({{0.3, 0.7}}, {0.3, 0.7});
  CHECK(self.value == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi * 0.7) + 0.5).epsilon(1e-14));
  CHECK(std::abs(self.kl) < 1e-14);

  // KL(N(0,1) || N(1,1)) = 0.5.
  const auto pair = hydra_regression_loss({{0.0, 1.0}}, {{1.0, 1.0}});
  CHECK(pair.kl == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(gaussian_kl_quadrature(0.0, 1.0, 1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-9));

  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const double ma = rng.normal(), va = std::exp(rng.normal());
    const double mb = rng.normal(), vb = std::exp(rng.normal());
    const auto loss = hydra_regression_loss({{ma, va}}, {{mb, vb}});
    CHECK(std::abs(loss.value - gaussian_cross_entropy_quadrature(ma, va, mb, vb)) < 1e-6);
    CHECK(std::abs(loss.kl - gaussian_kl_quadrature(ma, va, mb, vb)) < 1e-6);
  }

  // Moment matching: N(-1, .25), N(1, .25) -> N(0, 1.25).
  const std::vector<GaussianPrediction> members{{-1.0, 0.25}, {1.0, 0.25}};
  const auto at_min = kd_regression_loss(members, {0.0, 1.25});
  CHECK(std::abs(at_min.d_mean[0]) < 1e-8);
  CHECK(std::abs(at_min.d_variance[0]) < 1e-8);
  for (double dm : {-0.1, 0.1}) CHECK(kd_regression_loss(members, {dm, 1.25}).value > at_min.value);
  for (double dv : {-0.1, 0.1}) CHECK(kd_regression_loss(members, {0.0, 1.25 + dv}).value > at_min.value);

  double previous = kd_regression_loss(members, {0.0, 10.0}).value;
  for (double v : {1e2, 1e4, 1e8, 1e16}) {
    const double now = kd_regression_loss(members, {0.0, v}).value;
    CHECK(now > previous);
    previous = now;
  }

  CHECK_THROWS_AS(kd_regression_loss(members, {0.0, 0.0}), InvalidInput);
  CHECK_THROWS_AS(kd_regression_loss({{0.0, -1.0}}, {0.0, 1.0}), InvalidInput);
  CHECK_THROWS_AS(hydra_regression_loss(members, {{0.0, 1.0}}), ConfigError);
}

TEST_CASE("regression loss gradients match finite differences") {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(4));
    std::vector<GaussianPrediction> teacher, heads;
    for (int k = 0; k < m; ++k) {
      teacher.push_back({rng.normal(), std::exp(rng.normal())});
      heads.push_back({rng.normal(), std::exp(rng.normal())});
    }
    // Parameters stacked as (mean_1..mean_M, var_1..var_M).
    Vector x(2 * m);
    for (int k = 0; k < m; ++k) {
      x(k) = heads[static_cast<std::size_t>(k)].mean;
      x(m + k) = heads[static_cast<std::size_t>(k)].variance;
    }
    auto unpack = [&](const Vector& v) {
      std::vector<GaussianPrediction> h;
      for (int k = 0; k < m; ++k) h.push_back({v(k), v(m + k)});
      return h;
    };
    const auto loss = hydra_regression_loss(teacher, heads);
    Vector analytic(2 * m);
    for (int k = 0; k < m; ++k) {
      analytic(k) = loss.d_mean[static_cast<std::size_t>(k)];
      analytic(m + k) = loss.d_variance[static_cast<std::size_t>(k)];
    }
    auto f = [&](const Vector& v) { return hydra_regression_loss(teacher, unpack(v)).value; };
    CHECK(relative_error(analytic, finite_difference(f, x, 1e-6)) < 1e-4);

    const auto kd = kd_regression_loss(teacher, heads.front());
    Vector single(2);
    single << heads.front().mean, heads.front().variance;
    auto g = [&](const Vector& v) { return kd_regression_loss(teacher, {v(0), v(1)}).value; };
    Vector kd_grad(2);
    kd_grad << kd.d_mean[0], kd.d_variance[0];
    CHECK(relative_error(kd_grad, finite_difference(g, single, 1e-6)) < 1e-4);
  }
}

TEST_CASE("hydra losses are permutation-equivariant and bounded below by teacher entropy") {
  Rng rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 2 + static_cast<int>(rng.below(4));
    std::vector<Vector> teacher, logits;
    std::vector<GaussianPrediction> gt, gh;
    double mean_entropy = 0.0;
    for (int k = 0; k < m; ++k) {
      teacher.push_back(random_distribution(rng, 3));
      logits.push_back(random_vector(rng, 3));
      gt.push_back({rng.normal(), std::exp(rng.normal())});
      gh.push_back({rng.normal(), std::exp(rng.normal())});
      mean_entropy += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * gt.back().variance) / m;
    }
    std::vector<std::size_t> perm(static_cast<std::size_t>(m));
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<Vector> pt, pl;
    std::vector<GaussianPrediction> pgt, pgh;
    for (std::size_t i : perm) {
      pt.push_back(teacher[i]);
      pl.push_back(logits[i]);
      pgt.push_back(gt[i]);
      pgh.push_back(gh[i]);
    }
    CHECK(hydra_classification_logit_loss(pt, pl, 2.0).value ==
          doctest::Approx(hydra_classification_logit_loss(teacher, logits, 2.0).value).epsilon(1e-13));
    CHECK(hydra_regression_loss(pgt, pgh).value == doctest::Approx(hydra_regression_loss(gt, gh).value).epsilon(1e-13));

    CHECK(hydra_regression_loss(gt, gh).value >= mean_entropy);
    CHECK(kd_regression_loss(gt, gh.front()).value >= mean_entropy);
    CHECK(hydra_regression_loss(gt, gt).value == doctest::Approx(mean_entropy).epsilon(1e-13));
    // With M >= 2 distinct members a single Gaussian cannot attain the bound.
    CHECK(kd_regression_loss(gt, mixture_moments(gt)).value > mean_entropy);
  }
}

TEST_CASE("grow_heads copies the Hinton head") {
  const HydraModel one = HydraModel::initialized(std::vector<int>{3, 8}, std::vector<int>{4}, Activation::relu,
                                                 Task::classification, 2.0, 1);
  const HydraModel same = grow_heads(one, 1);
  CHECK(same.body == one.body);
  CHECK(same.heads == one.heads);

  const HydraModel five = grow_heads(one, 5);
  CHECK(five.num_heads() == 5);
  CHECK(five.body == one.body);
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector x = random_vector(rng, 3, 2.0);
    const auto outs = head_outputs(five, x);
    for (const auto& o : outs) CHECK(o == outs.front());
    CHECK(uncertainty_decomposition(predict(five, x).member_probabilities).model == 0.0);
  }
  CHECK_THROWS_AS(grow_heads(one, 0), ConfigError);
  CHECK_THROWS_AS(grow_heads(five, 3), ConfigError);
  CHECK(count_params(five) == count_params(one.body) + 5 * count_params(one.heads.front()));
}

TEST_CASE("teacher targets: tempering before averaging, cache keyed by dataset digest") {
  Ensemble teacher;
  teacher.task = Task::classification;
  for (int m = 0; m < 3; ++m) teacher.members.push_back(MlpModel::initialized(std::vector<int>{2, 5, 3}, Activation::relu, 300 + m));
  const Dataset data = make_spiral(10, 3, 0.1, 2);
  const TeacherTargets t = compute_teacher_targets(teacher, data, 2.0);
  REQUIRE(t.members() == 3);
  CHECK(t.rows() == data.size());
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    Vector mean = Vector::Zero(3);
    for (const auto& member : teacher.members) {
      mean += naive_softmax(forward(member, data.inputs.row(i).transpose()), 2.0) / 3.0;
    }
    CHECK((t.mean.row(i).transpose() - mean).cwiseAbs().maxCoeff() < 1e-12);
  }
  const auto path = temp_dir("cache") / "targets.json";
  save_teacher_targets(path, t);
  const TeacherTargets loaded = load_teacher_targets(path, dataset_digest(data));
  CHECK(loaded.mean == t.mean);
  CHECK(loaded.member[2] == t.member[2]);
  CHECK_THROWS_AS(load_teacher_targets(path, dataset_digest(make_spiral(10, 3, 0.1, 3))), LoadError);
  std::filesystem::remove_all(path.parent_path());
}

TEST_CASE("two-phase training: zero phase-2 budget leaves identical heads") {
  const Dataset raw = make_spiral(40, 3, 0.1, 5);
  const auto z = standardize(raw, {});
  Ensemble teacher;
  teacher.task = Task::classification;
  for (int m = 0; m < 4; ++m) teacher.members.push_back(MlpModel::initialized(std::vector<int>{2, 8, 3}, Activation::relu, 500 + m));
  DistillConfig config;
  config.body_hidden = {8};
  config.head_hidden = {};
  config.phase1_epochs = 5;
  config.phase2_epochs = 0;
  config.seed = 3;
  const auto result = two_phase_train(teacher, config, z.train, {});
  CHECK(result.model.num_heads() == 4);
  for (const auto& h : result.model.heads) CHECK(h == result.model.heads.front());
  CHECK(result.phase_boundary == static_cast<int>(result.curve.size()));
  CHECK(result.final_loss == result.loss_at_growth);
  for (const auto& record : result.curve) CHECK(record.phase == 1);
}

TEST_CASE("two-phase training: degenerate teacher gains nothing in phase 2") {
  const Dataset raw = make_spiral(40, 3, 0.1, 6);
  const auto z = standardize(raw, {});
  Ensemble teacher;
  teacher.task = Task::classification;
  const MlpModel member = MlpModel::initialized(std::vector<int>{2, 8, 3}, Activation::relu, 600);
  teacher.members = {member, member, member};
  DistillConfig config;
  config.body_hidden = {16};
  config.phase1_epochs = 400;
  config.phase2_epochs = 100;
  config.patience = 400;
  config.optimizer.learning_rate = 1e-2;
  config.seed = 4;
  const auto result = two_phase_train(teacher, config, z.train, {});
  // Identical targets keep the grown heads identical.
  for (const auto& h : result.model.heads) CHECK(h == result.model.heads.front());
  CHECK(result.final_loss <= result.loss_at_growth);
  CHECK(result.loss_at_growth - result.final_loss < 0.01 * result.loss_at_growth);
  CHECK(std::count_if(result.curve.begin(), result.curve.end(), [](const EpochRecord& r) { return r.phase == 2; }) > 0);
}

TEST_CASE("two-phase training: spiral teacher diversity is learned in phase 2") {
  const Dataset raw = make_spiral(60, 3, 0.15, 7);
  const auto parts = split(raw, {0.8, 0.2, 0.0}, 1);
  const auto z = standardize(parts.train, {parts.validation});
  EnsembleConfig ec;
  ec.hidden = {16, 16};
  ec.optimizer.learning_rate = 1e-2;
  ec.max_epochs = 80;
  ec.seeds = {1, 2, 3, 4};
  const Ensemble teacher = train_ensemble(z.train, z.others[0], ec);
  DistillConfig config;
  config.body_hidden = {32, 32};
  config.head_hidden = {16};
  config.phase1_epochs = 60;
  config.phase2_epochs = 120;
  config.optimizer.learning_rate = 5e-3;
  config.seed = 9;
  const auto result = two_phase_train(teacher, config, z.train, z.others[0]);
  CHECK(result.final_loss < result.loss_at_growth);
  double mu = 0.0;
  for (Eigen::Index i = 0; i < z.train.size(); ++i) {
    mu += uncertainty_decomposition(predict(result.model, z.train.inputs.row(i).transpose()).member_probabilities).model;
  }
  CHECK(mu > 0.0);
}

TEST_CASE("training errors carry the phase") {
  const Dataset data = standardize(make_spiral(20, 2, 0.1, 8), {}).train;
  Ensemble teacher;
  teacher.task = Task::classification;
  teacher.members = {MlpModel::initialized(std::vector<int>{2, 4, 2}, Activation::relu, 1)};
  DistillConfig config;
  config.body_hidden = {4};
  config.phase1_epochs = 3;
  config.phase2_epochs = 3;
  config.optimizer.kind = OptimizerKind::sgd;
  config.optimizer.learning_rate = 1e308;
  try {
    two_phase_train(teacher, config, data, {});
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("phase 1") != std::string::npos);
  }

  Ensemble wrong = teacher;
  wrong.members = {MlpModel::initialized(std::vector<int>{3, 4, 2}, Activation::relu, 1)};
  CHECK_THROWS_AS(two_phase_train(wrong, DistillConfig{}, data, {}), InvalidInput);
  config.temperature = 0.0;
  CHECK_THROWS_AS(two_phase_train(teacher, config, data, {}), ConfigError);
}

TEST_CASE("kd: single-member teacher is reproduced") {
  const Dataset data = standardize(make_spiral(40, 3, 0.1, 9), {}).train;
  Ensemble teacher;
  teacher.task = Task::classification;
  teacher.members = {MlpModel::initialized(std::vector<int>{2, 8, 3}, Activation::relu, 900)};
  DistillConfig config;
  config.method = DistillMethod::kd;
  config.temperature = 1.0;
  config.student_hidden = {32};
  config.phase1_epochs = 400;
  config.patience = 400;
  config.optimizer.learning_rate = 1e-2;
  const auto result = distill_kd(teacher, config, data, {});
  double worst = 0.0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const Vector x = data.inputs.row(i).transpose();
    const Vector a = predict_student(result.student, Task::classification, x).mean_probabilities;
    const Vector b = predict(teacher, x).mean_probabilities;
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 0.05);
}

TEST_CASE("kd regression: student converges to the moment-matched Gaussian") {
  Dataset data;
  data.task = Task::regression;
  data.inputs = Matrix::Zero(64, 1);
  data.targets = Vector::Zero(64);
  Ensemble teacher;
  teacher.task = Task::regression;
  teacher.members = {constant_regressor(-1.0, 0.25), constant_regressor(1.0, 0.25)};
  DistillConfig config;
  config.method = DistillMethod::kd;
  config.student_hidden = {4};
  config.phase1_epochs = 1500;
  config.patience = 1500;
  config.optimizer.learning_rate = 2e-2;
  const auto result = distill_kd(teacher, config, data, {});
  const auto g = predict_student(result.student, Task::regression, Vector::Zero(1)).mixture;
  CHECK(g.mean == doctest::Approx(0.0).epsilon(1e-3).scale(1.0));
  CHECK(g.variance == doctest::Approx(1.25).epsilon(1e-2));
}

TEST_CASE("kd on separable data keeps teacher accuracy") {
  Dataset data;
  data.task = Task::classification;
  data.num_classes = 2;
  Rng rng(12);
  data.inputs.resize(200, 2);
  for (Eigen::Index i = 0; i < 200; ++i) {
    const int y = static_cast<int>(i % 2);
    data.inputs(i, 0) = (y ? 1.5 : -1.5) + 0.5 * rng.normal();
    data.inputs(i, 1) = rng.normal();
    data.labels.push_back(y);
  }
  EnsembleConfig ec;
  ec.hidden = {8};
  ec.max_epochs = 30;
  ec.optimizer.learning_rate = 1e-2;
  ec.seeds = {1, 2, 3};
  const Ensemble teacher = train_ensemble(data, {}, ec);
  DistillConfig config;
  config.method = DistillMethod::kd;
  config.student_hidden = {8};
  config.phase1_epochs = 60;
  config.optimizer.learning_rate = 1e-2;
  const auto result = distill_kd(teacher, config, data, {});
  std::vector<Vector> teacher_mean, student;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const Vector x = data.inputs.row(i).transpose();
    teacher_mean.push_back(predict(teacher, x).mean_probabilities);
    student.push_back(predict_student(result.student, Task::classification, x).mean_probabilities);
  }
  CHECK(accuracy(student, data.labels) >= accuracy(teacher_mean, data.labels) - 0.02);
}

TEST_CASE("hydra checkpoint round trip and negative cases") {
  const HydraModel h = small_hydra(Task::regression, 2, 0, 3, 21);
  const auto dir = temp_dir("hydra");
  save_hydra(h, dir, {10, 20, "abc"});
  HydraManifestInfo info;
  const HydraModel loaded = load_hydra(dir, &info);
  CHECK(loaded.body == h.body);
  CHECK(loaded.heads == h.heads);
  CHECK(info.phase2_epochs == 20);
  CHECK(info.teacher_digest == "abc");
  std::filesystem::remove(dir / "head_001.json");
  try {
    load_hydra(dir);
    FAIL("expected load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("head 1") != std::string::npos);
  }
  CHECK_THROWS_AS(load_hydra(temp_dir("absent")), LoadError);
  std::filesystem::remove_all(dir);
}

#include "hydra/experiment.hpp"

#include "hydra/checkpoint.hpp"
#include "hydra/error.hpp"

#include <cmath>
#include <limits>
#include <set>

namespace hydra {

namespace {

/// Collects every config problem instead of stopping at the first.
class Checker {
 public:
  void fail(const std::string& where, const std::string& what) { errors_.push_back(where + ": " + what); }

  void allow_only(const Json& obj, const std::string& where, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) return;
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [key, _] : obj.items()) {
      if (!allowed.count(key)) fail(where, "unknown key '" + key + "'");
    }
  }

  const Json* section(const Json& doc, const char* key) {
    if (!doc.contains(key)) return nullptr;
    if (!doc.at(key).is_object()) {
      fail(key, "must be an object");
      return nullptr;
    }
    return &doc.at(key);
  }

  int integer(const Json* obj, const std::string& where, const char* key, int fallback, int min_value) {
    if (!obj || !obj->contains(key)) return fallback;
    const Json& v = obj->at(key);
    if (!v.is_number_integer()) {
      fail(where + "." + key, "must be an integer");
      return fallback;
    }
    const auto value = v.get<long long>();
    if (value < min_value || value > std::numeric_limits<int>::max()) {
      fail(where + "." + key, "must be at least " + std::to_string(min_value));
      return fallback;
    }
    return static_cast<int>(value);
  }

  double real(const Json* obj, const std::string& where, const char* key, double fallback, bool positive) {
    if (!obj || !obj->contains(key)) return fallback;
    const Json& v = obj->at(key);
    if (!v.is_number()) {
      fail(where + "." + key, "must be a number");
      return fallback;
    }
    const double value = v.get<double>();
    if (!std::isfinite(value) || (positive && !(value > 0.0)) || (!positive && value < 0.0)) {
      fail(where + "." + key, positive ? "must be positive" : "must be non-negative");
      return fallback;
    }
    return value;
  }

  std::string text(const Json* obj, const std::string& where, const char* key, const std::string& fallback) {
    if (!obj || !obj->contains(key)) return fallback;
    if (!obj->at(key).is_string()) {
      fail(where + "." + key, "must be a string");
      return fallback;
    }
    return obj->at(key).get<std::string>();
  }

  std::vector<int> widths(const Json* obj, const std::string& where, const char* key, std::vector<int> fallback) {
    if (!obj || !obj->contains(key)) return fallback;
    const Json& v = obj->at(key);
    if (!v.is_array()) {
      fail(where + "." + key, "must be a list of layer widths");
      return fallback;
    }
    std::vector<int> out;
    for (const auto& w : v) {
      if (!w.is_number_integer() || w.get<long long>() < 1 || w.get<long long>() > 100000) {
        fail(where + "." + key, "layer widths must be positive integers");
        return fallback;
      }
      out.push_back(w.get<int>());
    }
    return out;
  }

  Activation activation(const Json* obj, const std::string& where) {
    const std::string name = text(obj, where, "activation", "relu");
    try {
      return activation_from_string(name);
    } catch (const Error&) {
      fail(where + ".activation", "unknown activation '" + name + "'");
      return Activation::relu;
    }
  }

  void finish() const {
    if (errors_.empty()) return;
    std::string message = "invalid config (" + std::to_string(errors_.size()) + " problem" +
                          (errors_.size() == 1 ? "" : "s") + "):";
    for (const auto& e : errors_) message += "\n  - " + e;
    throw ConfigError(message);
  }

 private:
  std::vector<std::string> errors_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

void parse_dataset(Checker& check, const Json& doc, ExperimentConfig& config) {
  if (!doc.contains("dataset") || !doc.at("dataset").is_object()) {
    check.fail("dataset", "required object is missing");
    return;
  }
  const Json& d = doc.at("dataset");
  config.dataset = d;
  const std::string generator = check.text(&d, "dataset", "generator", "");
  const Task expected = (generator == "heteroscedastic" || generator == "table") ? Task::regression
                                                                                  : Task::classification;
  if (generator == "spiral") {
    check.allow_only(d, "dataset", {"generator", "n_per_class", "classes", "noise"});
    check.integer(&d, "dataset", "n_per_class", 200, 1);
    check.integer(&d, "dataset", "classes", 4, 2);
    check.real(&d, "dataset", "noise", 0.1, false);
  } else if (generator == "heteroscedastic") {
    check.allow_only(d, "dataset", {"generator", "n"});
    check.integer(&d, "dataset", "n", 500, 2);
  } else if (generator == "radial_blobs") {
    check.allow_only(d, "dataset", {"generator", "n_per_class", "classes", "side", "noise"});
    check.integer(&d, "dataset", "n_per_class", 100, 1);
    check.integer(&d, "dataset", "classes", 4, 2);
    config.image_height = config.image_width = check.integer(&d, "dataset", "side", 12, 4);
    check.real(&d, "dataset", "noise", 0.05, false);
  } else if (generator == "idx") {
    check.allow_only(d, "dataset", {"generator", "images", "labels"});
    for (const char* key : {"images", "labels"}) {
      const std::string p = check.text(&d, "dataset", key, "");
      if (p.empty()) {
        check.fail(std::string("dataset.") + key, "path is required");
      } else if (!std::filesystem::exists(resolve(config.base_dir, p))) {
        check.fail(std::string("dataset.") + key, "file not found: " + resolve(config.base_dir, p).string());
      }
    }
  } else if (generator == "table") {
    check.allow_only(d, "dataset", {"generator", "path", "target"});
    const std::string p = check.text(&d, "dataset", "path", "");
    if (p.empty()) {
      check.fail("dataset.path", "path is required");
    } else if (!std::filesystem::exists(resolve(config.base_dir, p))) {
      check.fail("dataset.path", "file not found: " + resolve(config.base_dir, p).string());
    }
    if (!d.contains("target") || !(d.at("target").is_string() || d.at("target").is_number_integer())) {
      check.fail("dataset.target", "column name or index is required");
    }
  } else {
    check.fail("dataset.generator", "expected spiral, heteroscedastic, radial_blobs, idx or table, got '" +
                                        generator + "'");
    return;
  }
  if (expected != config.task) {
    check.fail("dataset.generator", "'" + generator + "' produces " + std::string(to_string(expected)) +
                                        " data but task is " + std::string(to_string(config.task)));
  }
}

OptimizerConfig parse_optimizer(Checker& check, const Json* o) {
  check.allow_only(o ? *o : Json(), "optimizer", {"kind", "learning_rate", "beta1", "beta2", "epsilon"});
  OptimizerConfig opt;
  const std::string kind = check.text(o, "optimizer", "kind", "adam");
  if (kind == "adam") {
    opt.kind = OptimizerKind::adam;
  } else if (kind == "sgd") {
    opt.kind = OptimizerKind::sgd;
  } else {
    check.fail("optimizer.kind", "expected adam or sgd, got '" + kind + "'");
  }
  opt.learning_rate = check.real(o, "optimizer", "learning_rate", opt.learning_rate, true);
  opt.beta1 = check.real(o, "optimizer", "beta1", opt.beta1, false);
  opt.beta2 = check.real(o, "optimizer", "beta2", opt.beta2, false);
  opt.epsilon = check.real(o, "optimizer", "epsilon", opt.epsilon, true);
  if (opt.beta1 >= 1.0) check.fail("optimizer.beta1", "must be below 1");
  if (opt.beta2 >= 1.0) check.fail("optimizer.beta2", "must be below 1");
  return opt;
}

}  // namespace

ExperimentConfig parse_config(const Json& doc, const std::filesystem::path& base_dir,
                              std::optional<std::uint64_t> seed_override) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  Checker check;
  ExperimentConfig config;
  config.base_dir = base_dir;
  check.allow_only(doc, "config", {"schema_version", "task", "seed", "dataset", "split", "standardize", "optimizer",
                                   "ensemble", "distill", "shifts", "grid"});

  if (!doc.contains("schema_version")) {
    check.fail("schema_version", "required (current version is " + std::to_string(kConfigSchemaVersion) + ")");
  } else if (!doc.at("schema_version").is_number_integer() ||
             doc.at("schema_version").get<long long>() != kConfigSchemaVersion) {
    check.fail("schema_version", "unsupported version " + doc.at("schema_version").dump() + ", expected " +
                                     std::to_string(kConfigSchemaVersion));
  }

  const std::string task = check.text(&doc, "config", "task", "");
  if (task == "classification") {
    config.task = Task::classification;
  } else if (task == "regression") {
    config.task = Task::regression;
  } else {
    check.fail("task", "expected classification or regression, got '" + task + "'");
  }

  if (doc.contains("seed") && !(doc.at("seed").is_number_unsigned() || doc.at("seed").is_number_integer())) {
    check.fail("seed", "must be a non-negative integer");
  } else if (doc.contains("seed")) {
    if (doc.at("seed").is_number_integer() && doc.at("seed").get<long long>() < 0) {
      check.fail("seed", "must be a non-negative integer");
    } else {
      config.seed = doc.at("seed").get<std::uint64_t>();
    }
  }
  if (seed_override) config.seed = *seed_override;

  parse_dataset(check, doc, config);

  if (doc.contains("split")) {
    const Json& s = doc.at("split");
    if (!s.is_array() || s.size() != 3 || !std::all_of(s.begin(), s.end(), [](const Json& v) { return v.is_number(); })) {
      check.fail("split", "must be three fractions [train, validation, test]");
    } else {
      double total = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        config.fractions[i] = s[i].get<double>();
        total += config.fractions[i];
        if (config.fractions[i] < 0.0) check.fail("split", "fractions must be non-negative");
      }
      if (std::abs(total - 1.0) > 1e-9) check.fail("split", "fractions sum to " + std::to_string(total) + ", expected 1");
      if (config.fractions[0] <= 0.0) check.fail("split", "training fraction must be positive");
    }
  }
  if (doc.contains("standardize")) {
    if (!doc.at("standardize").is_boolean()) {
      check.fail("standardize", "must be true or false");
    } else {
      config.standardize = doc.at("standardize").get<bool>();
    }
  }

  const OptimizerConfig optimizer = parse_optimizer(check, check.section(doc, "optimizer"));

  const Json* e = check.section(doc, "ensemble");
  if (e) check.allow_only(*e, "ensemble", {"members", "hidden", "activation", "epochs", "batch_size", "patience"});
  const int members = check.integer(e, "ensemble", "members", 5, 1);
  config.ensemble.hidden = check.widths(e, "ensemble", "hidden", config.ensemble.hidden);
  config.ensemble.activation = check.activation(e, "ensemble");
  config.ensemble.max_epochs = check.integer(e, "ensemble", "epochs", config.ensemble.max_epochs, 0);
  config.ensemble.batch_size = check.integer(e, "ensemble", "batch_size", config.ensemble.batch_size, 1);
  config.ensemble.patience = check.integer(e, "ensemble", "patience", config.ensemble.patience, 1);
  config.ensemble.optimizer = optimizer;
  for (int m = 0; m < members; ++m) config.ensemble.seeds.push_back(derive_seed(config.seed, 100 + static_cast<std::uint64_t>(m)));
  if (std::set<std::uint64_t>(config.ensemble.seeds.begin(), config.ensemble.seeds.end()).size() !=
      config.ensemble.seeds.size()) {
    check.fail("ensemble.members", "derived member seeds collide; choose another seed");
  }

  const Json* ds = check.section(doc, "distill");
  if (ds) {
    check.allow_only(*ds, "distill", {"temperature", "phase1_epochs", "phase2_epochs", "body_hidden", "head_hidden",
                                      "student_hidden", "activation", "batch_size", "patience", "learning_rate"});
  }
  DistillConfig& dc = config.distill;
  dc.temperature = check.real(ds, "distill", "temperature", dc.temperature, true);
  dc.phase1_epochs = check.integer(ds, "distill", "phase1_epochs", dc.phase1_epochs, 0);
  dc.phase2_epochs = check.integer(ds, "distill", "phase2_epochs", dc.phase2_epochs, 0);
  dc.body_hidden = check.widths(ds, "distill", "body_hidden", dc.body_hidden);
  dc.head_hidden = check.widths(ds, "distill", "head_hidden", dc.head_hidden);
  dc.student_hidden = check.widths(ds, "distill", "student_hidden", dc.student_hidden);
  dc.activation = check.activation(ds, "distill");
  dc.batch_size = check.integer(ds, "distill", "batch_size", dc.batch_size, 1);
  dc.patience = check.integer(ds, "distill", "patience", dc.patience, 1);
  dc.optimizer = optimizer;
  dc.optimizer.learning_rate = check.real(ds, "distill", "learning_rate", optimizer.learning_rate, true);
  dc.seed = derive_seed(config.seed, 12);
  if (dc.body_hidden.empty()) check.fail("distill.body_hidden", "the shared body needs at least one layer");

  if (doc.contains("shifts")) {
    const Json& s = doc.at("shifts");
    if (!s.is_array()) {
      check.fail("shifts", "must be a list of {kind, intensities}");
    } else {
      for (std::size_t i = 0; i < s.size(); ++i) {
        const std::string where = "shifts[" + std::to_string(i) + "]";
        const Json& item = s[i];
        if (!item.is_object()) {
          check.fail(where, "must be an object");
          continue;
        }
        check.allow_only(item, where, {"kind", "intensities"});
        ShiftSweep sweep;
        const std::string kind = check.text(&item, where, "kind", "");
        try {
          sweep.kind = shift_kind_from_string(kind);
        } catch (const Error&) {
          check.fail(where + ".kind", "expected rotate, translate_cyclic or scale, got '" + kind + "'");
          continue;
        }
        if (sweep.kind != ShiftKind::scale && config.image_height == 0) {
          const std::string generator = config.dataset.is_object() ? config.dataset.value("generator", "") : "";
          if (generator != "idx") check.fail(where + ".kind", "'" + kind + "' needs an image dataset");
        }
        if (!item.contains("intensities") || !item.at("intensities").is_array() || item.at("intensities").empty()) {
          check.fail(where + ".intensities", "must be a non-empty list of numbers");
          continue;
        }
        for (const auto& v : item.at("intensities")) {
          if (!v.is_number() || !std::isfinite(v.get<double>())) {
            check.fail(where + ".intensities", "must contain only finite numbers");
            break;
          }
          sweep.intensities.push_back(v.get<double>());
        }
        if (sweep.kind == ShiftKind::scale &&
            std::any_of(sweep.intensities.begin(), sweep.intensities.end(), [](double v) { return v <= -1.0; })) {
          check.fail(where + ".intensities", "scale intensities must exceed -1");
        }
        config.shifts.push_back(std::move(sweep));
      }
    }
  }

  const Json* g = check.section(doc, "grid");
  if (g) check.allow_only(*g, "grid", {"resolution"});
  config.grid_resolution = check.integer(g, "grid", "resolution", config.grid_resolution, 1);

  check.finish();
  config.canonical = doc;
  config.canonical["seed"] = config.seed;
  config.digest = json_digest(config.canonical);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  Json doc;
  try {
    doc = read_json_file(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path(), seed_override);
}

Dataset build_dataset(const ExperimentConfig& config) {
  const Json& d = config.dataset;
  const std::string generator = d.at("generator").get<std::string>();
  const std::uint64_t seed = derive_seed(config.seed, 10);
  if (generator == "spiral") {
    return make_spiral(d.value("n_per_class", 200), d.value("classes", 4), d.value("noise", 0.1), seed);
  }
  if (generator == "heteroscedastic") return make_heteroscedastic(d.value("n", 500), seed);
  if (generator == "radial_blobs") {
    return make_radial_blobs(d.value("n_per_class", 100), d.value("classes", 4), d.value("side", 12),
                             d.value("noise", 0.05), seed);
  }
  if (generator == "idx") {
    return load_idx_dataset(resolve(config.base_dir, d.at("images").get<std::string>()),
                            resolve(config.base_dir, d.at("labels").get<std::string>()));
  }
  const std::string target = d.at("target").is_string() ? d.at("target").get<std::string>()
                                                          : std::to_string(d.at("target").get<long long>());
  return load_regression_table(resolve(config.base_dir, d.at("path").get<std::string>()), target);
}

Standardization identity_standardization(const Dataset& like) {
  Standardization s;
  s.feature_mean = Vector::Zero(like.dim());
  s.feature_scale = Vector::Ones(like.dim());
  return s;
}

PreparedData prepare_data(const ExperimentConfig& config) {
  PreparedData prepared;
  prepared.raw = build_dataset(config);
  if (prepared.raw.empty()) throw EmptyDatasetError("configured dataset is empty");
  prepared.parts = split(prepared.raw, config.fractions, derive_seed(config.seed, 11));
  if (prepared.parts.train.empty()) throw EmptyDatasetError("training split is empty");
  prepared.preprocess =
      config.standardize ? standardize(prepared.parts.train, {}).params : identity_standardization(prepared.raw);
  prepared.train = prepared.preprocess.apply(prepared.parts.train);
  prepared.validation = prepared.preprocess.apply(prepared.parts.validation);
  prepared.test = prepared.preprocess.apply(prepared.parts.test);
  prepared.train_min = prepared.parts.train.inputs.colwise().minCoeff().transpose();
  prepared.train_max = prepared.parts.train.inputs.colwise().maxCoeff().transpose();
  return prepared;
}

Eigen::Index LoadedModel::input_dim() const {
  return std::visit([](const auto& m) -> Eigen::Index { return m.input_dim(); }, model);
}

EnsemblePrediction LoadedModel::predict(const Vector& input) const {
  if (const auto* e = std::get_if<Ensemble>(&model)) return hydra::predict(*e, input);
  if (const auto* h = std::get_if<HydraModel>(&model)) return hydra::predict(*h, input);
  return predict_student(std::get<MlpModel>(model), task, input);
}

LoadedModel load_any_model(const std::filesystem::path& directory) {
  const auto manifest_path = directory / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw LoadError("no model manifest in " + directory.string());
  const Json manifest = read_json_file(manifest_path);
  const std::string format = manifest.value("format", "");
  LoadedModel loaded;
  if (format == "hydra-ensemble") {
    Ensemble e = load_ensemble(directory);
    loaded.kind = "ensemble";
    loaded.task = e.task;
    loaded.model = std::move(e);
  } else if (format == "hydra-student") {
    HydraModel h = load_hydra(directory);
    loaded.kind = "hydra";
    loaded.task = h.task;
    loaded.model = std::move(h);
  } else if (format == "hydra-kd-student") {
    try {
      loaded.task = task_from_string(manifest.at("task").get<std::string>());
      loaded.model = load_model(directory / manifest.at("file").get<std::string>());
    } catch (const Json::exception& e) {
      throw LoadError(std::string("malformed kd student manifest: ") + e.what());
    }
    loaded.kind = "kd";
  } else {
    throw LoadError("unrecognized model format '" + format + "' in " + manifest_path.string());
  }
  const auto preprocess_path = directory / "preprocess.json";
  if (!std::filesystem::exists(preprocess_path)) throw LoadError("missing preprocess.json in " + directory.string());
  const Json pre = read_json_file(preprocess_path);
  try {
    loaded.preprocess = Standardization::from_json(pre.at("standardization"));
    const auto lo = pre.at("train_min").get<std::vector<double>>();
    const auto hi = pre.at("train_max").get<std::vector<double>>();
    loaded.train_min = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
    loaded.train_max = Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed preprocess.json: ") + e.what());
  }
  if (loaded.preprocess.feature_mean.size() != loaded.input_dim()) {
    throw LoadError("preprocess.json describes " + std::to_string(loaded.preprocess.feature_mean.size()) +
                    " features but the model takes " + std::to_string(loaded.input_dim()));
  }
  return loaded;
}

UncertaintyDecomposition prediction_uncertainty(const LoadedModel& model, const EnsemblePrediction& prediction) {
  if (model.task == Task::classification) return uncertainty_decomposition(prediction.member_probabilities);
  // Law of total variance on the original target scale: total = aleatoric + epistemic.
  const auto& parts = prediction.member_gaussians;
  if (parts.empty()) throw InvalidInput("prediction has no members");
  const double m = static_cast<double>(parts.size());
  const double s2 = model.preprocess.target_scale * model.preprocess.target_scale;
  double mean = 0.0;
  double aleatoric = 0.0;
  for (const auto& g : parts) {
    mean += g.mean / m;
    aleatoric += g.variance / m;
  }
  const bool identical = std::all_of(parts.begin(), parts.end(), [&](const GaussianPrediction& g) {
    return g.mean == parts.front().mean;
  });
  double epistemic = 0.0;
  if (!identical) {
    for (const auto& g : parts) epistemic += (g.mean - mean) * (g.mean - mean) / m;
  }
  return {s2 * (aleatoric + epistemic), s2 * aleatoric, s2 * epistemic};
}

Evaluation evaluate_model(const LoadedModel& model, const Dataset& raw_data) {
  if (raw_data.task != model.task) throw InvalidInput("model and dataset tasks differ");
  if (raw_data.dim() != model.input_dim()) {
    throw InvalidInput("dataset has " + std::to_string(raw_data.dim()) + " features, model expects " +
                       std::to_string(model.input_dim()));
  }
  const Dataset data = model.preprocess.apply(raw_data);
  Evaluation out;
  const auto n = static_cast<std::size_t>(data.size());
  if (model.task == Task::classification) {
    std::vector<std::vector<Vector>> members;
    members.reserve(n);
    for (Eigen::Index i = 0; i < data.size(); ++i) {
      members.push_back(model.predict(data.inputs.row(i).transpose()).member_probabilities);
    }
    out.report = classification_report(members, data.labels);
    for (const auto& d : out.report.per_example) out.model_uncertainty.push_back(d.model);
    return out;
  }
  std::vector<std::vector<GaussianPrediction>> mixtures;
  mixtures.reserve(n);
  MetricReport& r = out.report;
  r.accuracy = std::numeric_limits<double>::quiet_NaN();
  r.brier = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const auto p = model.predict(data.inputs.row(i).transpose());
    const UncertaintyDecomposition d = prediction_uncertainty(model, p);
    r.per_example.push_back(d);
    r.mean_total_uncertainty += d.total;
    r.mean_expected_data_uncertainty += d.expected_data;
    r.mean_model_uncertainty += d.model;
    out.model_uncertainty.push_back(d.model);
    mixtures.push_back(p.member_gaussians);
  }
  if (n > 0) {
    r.mean_total_uncertainty /= static_cast<double>(n);
    r.mean_expected_data_uncertainty /= static_cast<double>(n);
    r.mean_model_uncertainty /= static_cast<double>(n);
  }
  const NllResult nll = regression_nll(mixtures, data.targets, model.preprocess.target_scale);
  r.nll = nll.value;
  r.floored = nll.floored;
  return out;
}

}  // namespace hydra

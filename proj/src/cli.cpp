#include "hydra/checkpoint.hpp"
#include "hydra/error.hpp"
#include "hydra/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace hydra::cli {

namespace {

namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string num(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

Json num_json(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

std::vector<double> to_list(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// Refuses to clobber an existing non-empty directory unless forced, and even
/// then only if it looks like one of ours.
void prepare_output(const fs::path& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory " + out.string() + " already exists; pass --force to overwrite");
    if (!fs::exists(out / "run_record.json")) {
      throw ConfigError("refusing to overwrite " + out.string() + ": it does not look like a previous run");
    }
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

Json preprocess_json(const PreparedData& data) {
  return {{"task", std::string(to_string(data.raw.task))},
          {"standardization", data.preprocess.to_json()},
          {"train_min", to_list(data.train_min)},
          {"train_max", to_list(data.train_max)}};
}

const char* kMetricHeader =
    "split,examples,accuracy,nll,brier,total_uncertainty,expected_data_uncertainty,model_uncertainty";

std::string metric_row(const std::string& split, const Dataset& raw, const LoadedModel& model) {
  std::ostringstream row;
  row << split << ',' << raw.size();
  if (raw.empty()) {
    row << ",NA,NA,NA,NA,NA,NA\n";
    return row.str();
  }
  const MetricReport r = evaluate_model(model, raw).report;
  row << ',' << num(r.accuracy) << ',' << num(r.nll) << ',' << num(r.brier) << ',' << num(r.mean_total_uncertainty)
      << ',' << num(r.mean_expected_data_uncertainty) << ',' << num(r.mean_model_uncertainty) << '\n';
  return row.str();
}

std::string metrics_csv(const PreparedData& data, const LoadedModel& model) {
  return std::string(kMetricHeader) + "\n" + metric_row("validation", data.parts.validation, model) +
         metric_row("test", data.parts.test, model);
}

LoadedModel in_memory(std::string kind, Task task, std::variant<Ensemble, HydraModel, MlpModel> model,
                      const PreparedData& data) {
  LoadedModel loaded;
  loaded.kind = std::move(kind);
  loaded.task = task;
  loaded.model = std::move(model);
  loaded.preprocess = data.preprocess;
  loaded.train_min = data.train_min;
  loaded.train_max = data.train_max;
  return loaded;
}

void write_run_record(const fs::path& out, Json record, const std::vector<std::string>& artifacts, Json timings) {
  record["artifacts"] = artifacts;
  record["timings_seconds"] = std::move(timings);
  write_json_file(out / "run_record.json", record);
}

struct Options {
  std::string config;
  std::string out;
  std::string method = "hydra";
  std::string teacher;
  std::vector<std::string> models;
  bool force = false;
  std::optional<std::uint64_t> seed;
  int resolution = 0;
  std::string bounds;
};

std::optional<std::uint64_t> seed_of(const Options& o) { return o.seed; }

ExperimentConfig require_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  return load_config(o.config, seed_of(o));
}

int cmd_train_ensemble(const Options& o, std::ostream& out) {
  const auto started = Clock::now();
  const ExperimentConfig config = require_config(o);
  const fs::path dir = o.out;
  prepare_output(dir, o.force);
  const PreparedData data = prepare_data(config);

  Ensemble ensemble;
  ensemble.task = config.task;
  ensemble.seeds = config.ensemble.seeds;
  ensemble.config_digest = config.digest;
  std::string curves = "member,seed,epoch,train_loss,validation_loss\n";
  const auto train_started = Clock::now();
  for (std::size_t m = 0; m < config.ensemble.seeds.size(); ++m) {
    std::vector<EpochRecord> curve;
    ensemble.members.push_back(
        train_member(data.train, data.validation, config.ensemble, config.ensemble.seeds[m], &curve));
    for (const auto& r : curve) {
      curves += std::to_string(m) + ',' + std::to_string(config.ensemble.seeds[m]) + ',' + std::to_string(r.epoch) +
                ',' + num(r.train_loss) + ',' + num(r.validation_loss) + '\n';
    }
    out << "member " << m + 1 << "/" << config.ensemble.seeds.size() << " trained (" << curve.size()
        << " epochs)\n";
  }
  const double train_seconds = seconds_since(train_started);

  save_ensemble(ensemble, dir);
  Json split_doc = data.parts.manifest(derive_seed(config.seed, 11), config.fractions);
  split_doc["dataset_digest"] = dataset_digest(data.raw);
  write_json_file(dir / "split.json", split_doc);
  write_json_file(dir / "preprocess.json", preprocess_json(data));
  write_json_file(dir / "config.json", config.canonical);
  write_text_file(dir / "curves.csv", curves);
  const LoadedModel model = in_memory("ensemble", config.task, ensemble, data);
  write_text_file(dir / "metrics.csv", metrics_csv(data, model));

  std::vector<std::string> artifacts{"manifest.json", "split.json", "preprocess.json", "config.json",
                                     "curves.csv", "metrics.csv"};
  for (std::size_t m = 0; m < ensemble.size(); ++m) artifacts.push_back(member_file_name(m));
  write_run_record(dir, {{"command", "train-ensemble"}, {"config_digest", config.digest}, {"members", ensemble.size()}},
                   artifacts, {{"training", train_seconds}, {"total", seconds_since(started)}});
  out << "ensemble of " << ensemble.size() << " written to " << dir.string() << "\n";
  return kOk;
}

int cmd_distill(const Options& o, std::ostream& out) {
  const auto started = Clock::now();
  const ExperimentConfig config = require_config(o);
  const DistillMethod method = distill_method_from_string(o.method);
  if (o.teacher.empty()) throw ConfigError("--teacher is required");
  const fs::path teacher_dir = o.teacher;
  const Ensemble teacher = load_ensemble(teacher_dir);
  const PreparedData fresh = prepare_data(config);

  if (teacher.task != config.task) {
    throw ConfigError("teacher is a " + std::string(to_string(teacher.task)) + " ensemble but the config task is " +
                      std::string(to_string(config.task)));
  }
  const Eigen::Index classes = config.task == Task::classification ? fresh.raw.num_classes : 2;
  if (teacher.input_dim() != fresh.raw.dim() || teacher.output_dim() != classes) {
    throw ConfigError("teacher maps " + std::to_string(teacher.input_dim()) + " -> " +
                      std::to_string(teacher.output_dim()) + " but the student needs " +
                      std::to_string(fresh.raw.dim()) + " -> " + std::to_string(classes));
  }
  const Json teacher_split = read_json_file(teacher_dir / "split.json");
  if (teacher_split.value("dataset_digest", "") != dataset_digest(fresh.raw) ||
      teacher_split.value("train", Json::array()) != fresh.parts.manifest(0, config.fractions).at("train")) {
    throw ConfigError("teacher in " + teacher_dir.string() + " was trained on a different dataset or split");
  }
  // The student sees exactly the teacher's preprocessing.
  const Json teacher_pre = read_json_file(teacher_dir / "preprocess.json");
  PreparedData data = fresh;
  data.preprocess = Standardization::from_json(teacher_pre.at("standardization"));
  data.train = data.preprocess.apply(data.parts.train);
  data.validation = data.preprocess.apply(data.parts.validation);
  data.test = data.preprocess.apply(data.parts.test);

  const fs::path dir = o.out;
  prepare_output(dir, o.force);

  // Teacher targets: reuse the cache next to the teacher when it matches.
  const double temperature = effective_temperature(teacher, config.distill);
  const fs::path cache_path = teacher_dir / "teacher_targets.json";
  TeacherTargets targets;
  bool cached = false;
  if (fs::exists(cache_path)) {
    try {
      targets = load_teacher_targets(cache_path, dataset_digest(data.train));
      cached = targets.temperature == temperature && targets.members() == teacher.size();
    } catch (const LoadError&) {
      cached = false;
    }
  }
  if (!cached) {
    targets = compute_teacher_targets(teacher, data.train, temperature);
    save_teacher_targets(cache_path, targets);
  }

  std::string curves = "kind,phase,epoch,train_loss,validation_loss\n";
  auto add_epochs = [&](const std::vector<EpochRecord>& records, int phase) {
    for (const auto& r : records) {
      if (r.phase != phase) continue;
      curves += "epoch," + std::to_string(r.phase) + ',' + std::to_string(r.epoch) + ',' + num(r.train_loss) + ',' +
                num(r.validation_loss) + '\n';
    }
  };
  const auto train_started = Clock::now();
  std::vector<std::string> artifacts{"manifest.json", "preprocess.json", "config.json", "curves.csv", "metrics.csv"};
  LoadedModel student;
  Json record = {{"command", "distill"},
                 {"method", std::string(to_string(method))},
                 {"config_digest", config.digest},
                 {"teacher", teacher_dir.string()},
                 {"teacher_digest", teacher.config_digest},
                 {"temperature", temperature}};
  if (method == DistillMethod::hydra) {
    const HydraTrainResult result = two_phase_train(teacher, config.distill, data.train, data.validation, &targets);
    add_epochs(result.curve, 1);
    // Marks the end of phase 1, where the Hinton head is copied into M heads.
    curves += "growth,1," + std::to_string(result.phase_boundary) + ',' + num(result.loss_at_growth) + ",NA\n";
    add_epochs(result.curve, 2);
    save_hydra(result.model, dir, {config.distill.phase1_epochs, config.distill.phase2_epochs, teacher.config_digest});
    for (std::size_t m = 0; m < result.model.num_heads(); ++m) {
      char name[32];
      std::snprintf(name, sizeof name, "head_%03zu.json", m);
      artifacts.emplace_back(name);
    }
    artifacts.emplace_back("body.json");
    record["phase_boundary"] = result.phase_boundary;
    record["loss_at_growth"] = result.loss_at_growth;
    record["final_loss"] = result.final_loss;
    student = in_memory("hydra", config.task, result.model, data);
  } else {
    const KdTrainResult result = distill_kd(teacher, config.distill, data.train, data.validation, &targets);
    add_epochs(result.curve, 1);
    save_model(dir / "student.json", result.student, {config.distill.seed, config.digest});
    write_json_file(dir / "manifest.json", {{"format", "hydra-kd-student"},
                                            {"version", kCheckpointVersion},
                                            {"task", std::string(to_string(config.task))},
                                            {"temperature", temperature},
                                            {"epochs", config.distill.phase1_epochs},
                                            {"teacher_digest", teacher.config_digest},
                                            {"file", "student.json"}});
    artifacts.emplace_back("student.json");
    record["final_loss"] = result.final_loss;
    student = in_memory("kd", config.task, result.student, data);
  }
  const double train_seconds = seconds_since(train_started);
  write_json_file(dir / "preprocess.json", teacher_pre);
  write_json_file(dir / "config.json", config.canonical);
  write_text_file(dir / "curves.csv", curves);
  write_text_file(dir / "metrics.csv", metrics_csv(data, student));
  write_run_record(dir, record, artifacts,
                   {{"training", train_seconds}, {"total", seconds_since(started)}, {"teacher_targets_cached", cached}});
  out << to_string(method) << " student written to " << dir.string() << "\n";
  return kOk;
}

int image_side(const Dataset& data, const ExperimentConfig& config, bool height) {
  if (config.image_height > 0) return height ? config.image_height : config.image_width;
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(data.dim()))));
  if (static_cast<Eigen::Index>(side) * side != data.dim()) {
    throw ConfigError("cannot infer an image shape for " + std::to_string(data.dim()) + " features");
  }
  return side;
}

int cmd_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto started = Clock::now();
  const ExperimentConfig config = require_config(o);
  if (o.models.empty()) throw ConfigError("--model is required (repeat it to compare models)");
  const fs::path dir = o.out;
  const PreparedData data = prepare_data(config);
  const Dataset& test = data.parts.test;
  if (test.empty()) throw ConfigError("evaluation needs a non-empty test split");

  std::vector<ShiftSweep> sweeps = config.shifts;
  if (sweeps.empty()) sweeps.push_back({ShiftKind::scale, {0.0}});
  std::vector<ShiftSpec> cells;
  for (const auto& sweep : sweeps) {
    for (double intensity : sweep.intensities) {
      ShiftSpec spec{sweep.kind, intensity, 0, 0};
      if (sweep.kind != ShiftKind::scale) {
        spec.height = image_side(test, config, true);
        spec.width = image_side(test, config, false);
      }
      cells.push_back(spec);
    }
  }
  prepare_output(dir, o.force);

  std::vector<Dataset> shifted;
  for (const auto& spec : cells) shifted.push_back(apply_shift(test, spec));

  std::optional<LoadedModel> teacher;
  std::vector<std::vector<double>> teacher_mu(cells.size());
  if (!o.teacher.empty()) {
    teacher = load_any_model(o.teacher);
    for (std::size_t c = 0; c < cells.size(); ++c) teacher_mu[c] = evaluate_model(*teacher, shifted[c]).model_uncertainty;
  } else {
    err << "warning: no --teacher given; mu_gap column omitted\n";
  }

  std::string csv = "model,kind,shift,intensity,status,accuracy,nll,brier,total_uncertainty,"
                    "expected_data_uncertainty,model_uncertainty";
  csv += teacher ? ",mu_gap\n" : "\n";
  Json rows = Json::array();
  for (const auto& path : o.models) {
    std::optional<LoadedModel> model;
    std::string failure;
    try {
      model = load_any_model(path);
    } catch (const Error& e) {
      failure = e.what();
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string prefix = path + ',' + (model ? model->kind : std::string("NA")) + ',' +
                                 std::string(to_string(cells[c].kind)) + ',' + num(cells[c].intensity);
      Json row = {{"model", path}, {"shift", std::string(to_string(cells[c].kind))}, {"intensity", cells[c].intensity}};
      std::string cell_failure = failure;
      Evaluation eval;
      if (model) {
        try {
          eval = evaluate_model(*model, shifted[c]);
        } catch (const Error& e) {
          cell_failure = e.what();
        }
      }
      if (!cell_failure.empty()) {
        csv += prefix + ",failed,NA,NA,NA,NA,NA,NA" + (teacher ? ",NA\n" : "\n");
        row["status"] = "failed";
        row["error"] = cell_failure;
        rows.push_back(row);
        err << "warning: " << path << " failed at " << to_string(cells[c].kind) << ' ' << num(cells[c].intensity)
            << ": " << cell_failure << "\n";
        continue;
      }
      const MetricReport& r = eval.report;
      csv += prefix + ",ok," + num(r.accuracy) + ',' + num(r.nll) + ',' + num(r.brier) + ',' +
             num(r.mean_total_uncertainty) + ',' + num(r.mean_expected_data_uncertainty) + ',' +
             num(r.mean_model_uncertainty);
      row["status"] = "ok";
      row["accuracy"] = num_json(r.accuracy);
      row["nll"] = r.nll;
      row["brier"] = num_json(r.brier);
      row["total_uncertainty"] = r.mean_total_uncertainty;
      row["expected_data_uncertainty"] = r.mean_expected_data_uncertainty;
      row["model_uncertainty"] = r.mean_model_uncertainty;
      row["floored"] = r.floored;
      if (teacher) {
        const double gap = mu_gap(eval.model_uncertainty, teacher_mu[c]);
        csv += ',' + num(gap);
        row["mu_gap"] = gap;
      }
      csv += '\n';
      rows.push_back(row);
    }
  }
  write_text_file(dir / "report.csv", csv);
  write_json_file(dir / "config.json", config.canonical);
  write_run_record(dir,
                   {{"command", "evaluate"}, {"config_digest", config.digest}, {"models", o.models},
                    {"teacher", o.teacher.empty() ? Json(nullptr) : Json(o.teacher)}, {"rows", rows}},
                   {"report.csv", "config.json"}, {{"total", seconds_since(started)}});
  out << "report with " << rows.size() << " rows written to " << (dir / "report.csv").string() << "\n";
  return kOk;
}

std::pair<double, double> parse_bounds(const std::string& text) {
  const auto comma = text.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument("no comma");
    std::size_t used = 0;
    const double lo = std::stod(text.substr(0, comma), &used);
    const double hi = std::stod(text.substr(comma + 1));
    if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("order");
    return {lo, hi};
  } catch (const std::exception&) {
    throw ConfigError("--bounds expects LO,HI with LO < HI, got '" + text + "'");
  }
}

int cmd_uncertainty_grid(const Options& o, std::ostream& out) {
  const auto started = Clock::now();
  if (o.models.size() != 1) throw ConfigError("uncertainty-grid takes exactly one --model");
  int resolution = o.resolution;
  std::string digest;
  if (!o.config.empty()) {
    const ExperimentConfig config = require_config(o);
    digest = config.digest;
    if (resolution == 0) resolution = config.grid_resolution;
  }
  if (resolution == 0) resolution = 50;
  if (resolution < 1) throw ConfigError("--resolution must be positive");
  std::optional<std::pair<double, double>> bounds;
  if (!o.bounds.empty()) bounds = parse_bounds(o.bounds);

  const LoadedModel model = load_any_model(o.models.front());
  if (model.input_dim() != 2) {
    throw InvalidInput("uncertainty grids need a model with 2 inputs; " + o.models.front() + " takes " +
                       std::to_string(model.input_dim()));
  }
  const fs::path dir = o.out;
  prepare_output(dir, o.force);

  std::array<double, 2> lo{}, hi{};
  for (int a = 0; a < 2; ++a) {
    if (bounds) {
      lo[a] = bounds->first;
      hi[a] = bounds->second;
    } else {
      // 1.5x the training bounding box around its center.
      const double center = 0.5 * (model.train_min(a) + model.train_max(a));
      const double half = 0.75 * (model.train_max(a) - model.train_min(a));
      lo[a] = center - half;
      hi[a] = center + half;
    }
  }
  auto coord = [&](int a, int i) {
    return resolution == 1 ? 0.5 * (lo[a] + hi[a]) : lo[a] + (hi[a] - lo[a]) * i / (resolution - 1);
  };
  std::string csv = "x,y,total_uncertainty,expected_data_uncertainty,model_uncertainty\n";
  double mean_mu = 0.0;
  for (int iy = 0; iy < resolution; ++iy) {
    for (int ix = 0; ix < resolution; ++ix) {
      Vector raw(2);
      raw << coord(0, ix), coord(1, iy);
      const Vector x = model.preprocess.apply_inputs(raw.transpose()).row(0).transpose();
      const UncertaintyDecomposition d = prediction_uncertainty(model, model.predict(x));
      mean_mu += d.model;
      csv += num(raw(0)) + ',' + num(raw(1)) + ',' + num(d.total) + ',' + num(d.expected_data) + ',' +
             num(d.model) + '\n';
    }
  }
  mean_mu /= static_cast<double>(resolution) * resolution;
  write_text_file(dir / "grid.csv", csv);
  write_run_record(dir,
                   {{"command", "uncertainty-grid"}, {"model", o.models.front()}, {"kind", model.kind},
                    {"config_digest", digest}, {"resolution", resolution},
                    {"bounds", {{lo[0], hi[0]}, {lo[1], hi[1]}}}, {"mean_model_uncertainty", mean_mu}},
                   {"grid.csv"}, {{"total", seconds_since(started)}});
  out << resolution * resolution << " grid points written to " << (dir / "grid.csv").string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Ensemble training, Hydra and KD distillation, and uncertainty evaluation", "hydra"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", o.config, "experiment config (JSON)");
    if (needs_config) c->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_flag("--force", o.force, "overwrite a previous run in --out");
    sub->add_option("--seed", seed, "override the config seed");
  };
  auto* train = app.add_subcommand("train-ensemble", "train a seed-diverse deep ensemble");
  add_common(train, true);
  auto* distill = app.add_subcommand("distill", "distill a trained ensemble into a student");
  add_common(distill, true);
  distill->add_option("--method", o.method, "kd or hydra")->check(CLI::IsMember({"kd", "hydra"}));
  distill->add_option("--teacher", o.teacher, "ensemble directory")->required();
  auto* evaluate = app.add_subcommand("evaluate", "score models over the configured shift sweep");
  add_common(evaluate, true);
  evaluate->add_option("--model", o.models, "model directory (repeatable)")->required();
  evaluate->add_option("--teacher", o.teacher, "ensemble used as the reference for mu_gap");
  auto* grid = app.add_subcommand("uncertainty-grid", "TU/EDU/MU over a 2-D lattice");
  add_common(grid, false);
  grid->add_option("--model", o.models, "model directory")->required();
  grid->add_option("--resolution", o.resolution, "points per axis");
  grid->add_option("--bounds", o.bounds, "LO,HI for both axes (default 1.5x the training box)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }
  for (auto* sub : {train, distill, evaluate, grid}) {
    if (sub->parsed() && sub->count("--seed") > 0) o.seed = seed;
  }

  try {
    if (train->parsed()) return cmd_train_ensemble(o, out);
    if (distill->parsed()) return cmd_distill(o, out);
    if (evaluate->parsed()) return cmd_evaluate(o, out, err);
    return cmd_uncertainty_grid(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace hydra::cli

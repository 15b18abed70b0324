#include "hydra/data.hpp"

#include "hydra/error.hpp"
#include "hydra/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <sstream>

namespace hydra {

std::string_view to_string(Task task) {
  return task == Task::classification ? "classification" : "regression";
}

Task task_from_string(std::string_view name) {
  if (name == "classification") return Task::classification;
  if (name == "regression") return Task::regression;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

void Dataset::validate() const {
  if (task == Task::classification) {
    if (static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
      throw InvalidInput("label count does not match input rows");
    }
    for (int label : labels) {
      if (label < 0 || label >= num_classes) {
        throw InvalidInput("class index " + std::to_string(label) + " outside 0.." +
                           std::to_string(num_classes - 1));
      }
    }
  } else if (targets.size() != inputs.rows()) {
    throw InvalidInput("target count does not match input rows");
  }
}

Dataset Dataset::subset(const std::vector<Eigen::Index>& rows) const {
  Dataset out;
  out.task = task;
  out.num_classes = num_classes;
  out.feature_names = feature_names;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  if (task == Task::regression) out.targets.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(r);
    if (task == Task::classification) {
      out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    } else {
      out.targets(static_cast<Eigen::Index>(i)) = targets(r);
    }
  }
  return out;
}

std::string dataset_digest(const Dataset& dataset) {
  std::string bytes(to_string(dataset.task));
  bytes += ":" + std::to_string(dataset.size()) + "x" + std::to_string(dataset.dim()) + ":" +
           std::to_string(dataset.num_classes) + ":";
  bytes.append(reinterpret_cast<const char*>(dataset.inputs.data()),
               sizeof(double) * static_cast<std::size_t>(dataset.inputs.size()));
  if (dataset.task == Task::classification) {
    bytes.append(reinterpret_cast<const char*>(dataset.labels.data()),
                 sizeof(int) * dataset.labels.size());
  } else {
    bytes.append(reinterpret_cast<const char*>(dataset.targets.data()),
                 sizeof(double) * static_cast<std::size_t>(dataset.targets.size()));
  }
  return content_digest(bytes);
}

Dataset make_spiral(int n_per_class, int n_classes, double noise_std, std::uint64_t seed) {
  if (n_classes < 2) throw InvalidInput("spiral needs at least two classes");
  if (n_per_class < 0 || noise_std < 0.0) throw InvalidInput("invalid spiral parameters");
  Rng rng(seed);
  Dataset data;
  data.task = Task::classification;
  data.num_classes = n_classes;
  data.feature_names = {"x", "y"};
  data.inputs.resize(static_cast<Eigen::Index>(n_per_class) * n_classes, 2);
  Eigen::Index row = 0;
  const double turns = 3.0 * std::numbers::pi;
  for (int c = 0; c < n_classes; ++c) {
    const double phase = 2.0 * std::numbers::pi * c / n_classes;
    for (int i = 0; i < n_per_class; ++i) {
      const double t = rng.uniform(0.0, turns);
      const double r = t / turns * kSpiralRadius;
      data.inputs(row, 0) = r * std::cos(t + phase) + noise_std * rng.normal();
      data.inputs(row, 1) = r * std::sin(t + phase) + noise_std * rng.normal();
      data.labels.push_back(c);
      ++row;
    }
  }
  return data;
}

double heteroscedastic_mean(double x) { return std::sin(2.0 * x) + 0.3 * x; }
double heteroscedastic_stddev(double x) { return 0.05 + 0.1 * (x + 3.0); }

Dataset make_heteroscedastic(int n, std::uint64_t seed) {
  if (n < 0) throw InvalidInput("sample count must be non-negative");
  Rng rng(seed);
  Dataset data;
  data.task = Task::regression;
  data.feature_names = {"x"};
  data.inputs.resize(n, 1);
  data.targets.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(-3.0, 3.0);
    data.inputs(i, 0) = x;
    data.targets(i) = heteroscedastic_mean(x) + heteroscedastic_stddev(x) * rng.normal();
  }
  return data;
}

Dataset make_radial_blobs(int n_per_class, int n_classes, int side, double noise_std,
                          std::uint64_t seed) {
  if (n_classes < 2 || side < 3 || n_per_class < 0) throw InvalidInput("invalid blob parameters");
  Rng rng(seed);
  Dataset data;
  data.task = Task::classification;
  data.num_classes = n_classes;
  data.inputs.resize(static_cast<Eigen::Index>(n_per_class) * n_classes, side * side);
  const double center = (side - 1) / 2.0;
  const double orbit = side / 3.0;
  const double width = side / 10.0 + 0.5;
  Eigen::Index row = 0;
  for (int c = 0; c < n_classes; ++c) {
    const double angle = 2.0 * std::numbers::pi * c / n_classes;
    for (int i = 0; i < n_per_class; ++i) {
      const double jitter = rng.uniform(-0.15, 0.15) * 2.0 * std::numbers::pi / n_classes;
      const double radius = orbit * rng.uniform(0.85, 1.15);
      // Image rows grow downward, so the blob's y offset is subtracted.
      const double bx = center + radius * std::cos(angle + jitter);
      const double by = center - radius * std::sin(angle + jitter);
      for (int r = 0; r < side; ++r) {
        for (int col = 0; col < side; ++col) {
          const double d2 = (col - bx) * (col - bx) + (r - by) * (r - by);
          const double v = std::exp(-0.5 * d2 / (width * width)) + noise_std * rng.normal();
          data.inputs(row, r * side + col) = std::clamp(v, 0.0, 1.0);
        }
      }
      data.labels.push_back(c);
      ++row;
    }
  }
  return data;
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t at) {
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

}  // namespace

IdxFragment load_idx(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 4) throw FormatError(path.string() + ": too short for an IDX header");
  const std::uint32_t magic = read_be32(bytes, 0);
  IdxFragment frag;
  std::size_t ndims = 0;
  if (magic == 0x00000801) {
    frag.is_labels = true;
    ndims = 1;
  } else if (magic == 0x00000803) {
    ndims = 3;
  } else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw FormatError(path.string() + ": unsupported IDX magic " + buf);
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw CorruptionError(path.string() + ": truncated IDX header");
  std::size_t payload = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    frag.dims.push_back(read_be32(bytes, 4 + 4 * d));
    payload *= frag.dims.back();
  }
  if (bytes.size() < header + payload) {
    throw CorruptionError(path.string() + ": payload has " + std::to_string(bytes.size() - header) +
                          " bytes, header declares " + std::to_string(payload));
  }
  if (frag.is_labels) {
    frag.labels.reserve(payload);
    for (std::size_t i = 0; i < payload; ++i) frag.labels.push_back(bytes[header + i]);
  } else {
    const Eigen::Index count = frag.dims[0];
    const Eigen::Index pixels = static_cast<Eigen::Index>(frag.dims[1]) * frag.dims[2];
    frag.images.resize(count, pixels);
    for (Eigen::Index i = 0; i < count; ++i) {
      for (Eigen::Index p = 0; p < pixels; ++p) {
        frag.images(i, p) = bytes[header + static_cast<std::size_t>(i * pixels + p)] / 255.0;
      }
    }
  }
  return frag;
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
  IdxFragment img = load_idx(images);
  IdxFragment lab = load_idx(labels);
  if (img.is_labels || !lab.is_labels) throw FormatError("expected an image file and a label file");
  if (img.images.rows() != static_cast<Eigen::Index>(lab.labels.size())) {
    throw FormatError("image and label counts differ");
  }
  Dataset data;
  data.task = Task::classification;
  data.inputs = std::move(img.images);
  data.labels = std::move(lab.labels);
  data.num_classes = data.labels.empty() ? 0 : *std::max_element(data.labels.begin(), data.labels.end()) + 1;
  data.validate();
  return data;
}

namespace {

std::optional<double> parse_number(std::string_view field) {
  while (!field.empty() && std::isspace(static_cast<unsigned char>(field.front()))) field.remove_prefix(1);
  while (!field.empty() && std::isspace(static_cast<unsigned char>(field.back()))) field.remove_suffix(1);
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  if (field.empty()) return std::nullopt;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) return std::nullopt;
  return value;
}

std::vector<std::string> split_fields(const std::string& line, bool comma) {
  std::vector<std::string> fields;
  if (comma) {
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
  } else {
    std::istringstream in(line);
    std::string field;
    while (in >> field) fields.push_back(field);
  }
  return fields;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\"");
  const auto last = s.find_last_not_of(" \t\r\"");
  return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
}

}  // namespace

Dataset load_regression_table(const std::filesystem::path& path, const std::string& target_column) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    lines.emplace_back(number, line);
  }
  if (lines.empty()) throw EmptyDatasetError(path.string() + ": no rows");
  const bool comma = lines.front().second.find(',') != std::string::npos;

  std::vector<std::string> header;
  auto first = split_fields(lines.front().second, comma);
  const bool has_header = std::any_of(first.begin(), first.end(),
                                      [](const std::string& f) { return !parse_number(f); });
  std::size_t start = 0;
  if (has_header) {
    for (auto& f : first) header.push_back(trim(f));
    start = 1;
  }
  const std::size_t columns = first.size();
  if (columns < 2) throw SchemaError(path.string() + ": need at least one feature and a target");

  long target = -1;
  if (has_header) {
    const auto it = std::find(header.begin(), header.end(), target_column);
    if (it != header.end()) target = static_cast<long>(it - header.begin());
  }
  if (target < 0) {
    const auto index = parse_number(target_column);
    if (!index || *index != std::floor(*index)) {
      throw SchemaError("target column '" + target_column + "' not found");
    }
    target = static_cast<long>(*index);
    if (target < 0) target += static_cast<long>(columns);
    if (target < 0 || target >= static_cast<long>(columns)) {
      throw SchemaError("target column index " + target_column + " out of range for " +
                        std::to_string(columns) + " columns");
    }
  }

  const std::size_t rows = lines.size() - start;
  if (rows == 0) throw EmptyDatasetError(path.string() + ": header but no data rows");
  Dataset data;
  data.task = Task::regression;
  data.inputs.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(columns - 1));
  data.targets.resize(static_cast<Eigen::Index>(rows));
  for (std::size_t c = 0; c < columns; ++c) {
    if (static_cast<long>(c) == target) continue;
    data.feature_names.push_back(has_header ? header[c] : "x" + std::to_string(c));
  }
  for (std::size_t r = start; r < lines.size(); ++r) {
    const auto& [line_no, text] = lines[r];
    const auto fields = split_fields(text, comma);
    if (fields.size() != columns) {
      throw ParseError("row " + std::to_string(r - start) + " has " + std::to_string(fields.size()) +
                           " fields, expected " + std::to_string(columns),
                       line_no);
    }
    Eigen::Index feature = 0;
    const auto row = static_cast<Eigen::Index>(r - start);
    for (std::size_t c = 0; c < columns; ++c) {
      const auto value = parse_number(fields[c]);
      if (!value) {
        throw ParseError("row " + std::to_string(r - start) + " field " + std::to_string(c) +
                             " is not numeric: '" + fields[c] + "'",
                         line_no);
      }
      if (static_cast<long>(c) == target) {
        data.targets(row) = *value;
      } else {
        data.inputs(row, feature++) = *value;
      }
    }
  }
  return data;
}

Matrix Standardization::apply_inputs(const Matrix& inputs) const {
  if (inputs.cols() != feature_mean.size()) throw InvalidInput("feature count mismatch");
  Matrix out = inputs.rowwise() - feature_mean.transpose();
  return out.array().rowwise() / feature_scale.transpose().array();
}

Dataset Standardization::apply(const Dataset& dataset) const {
  Dataset out = dataset;
  out.inputs = apply_inputs(dataset.inputs);
  if (dataset.task == Task::regression) {
    out.targets = (dataset.targets.array() - target_mean) / target_scale;
  }
  return out;
}

double Standardization::destandardize_target(double standardized) const {
  return standardized * target_scale + target_mean;
}

Json Standardization::to_json() const {
  return {{"feature_mean", std::vector<double>(feature_mean.data(), feature_mean.data() + feature_mean.size())},
          {"feature_scale", std::vector<double>(feature_scale.data(), feature_scale.data() + feature_scale.size())},
          {"target_mean", target_mean},
          {"target_scale", target_scale}};
}

Standardization Standardization::from_json(const Json& doc) {
  Standardization s;
  const auto mean = doc.at("feature_mean").get<std::vector<double>>();
  const auto scale = doc.at("feature_scale").get<std::vector<double>>();
  if (mean.size() != scale.size()) throw LoadError("standardization record is inconsistent");
  s.feature_mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.feature_scale = Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  s.target_mean = doc.at("target_mean").get<double>();
  s.target_scale = doc.at("target_scale").get<double>();
  return s;
}

StandardizeResult standardize(const Dataset& train, const std::vector<Dataset>& others) {
  if (train.empty()) throw EmptyDatasetError("cannot standardize an empty training set");
  const double n = static_cast<double>(train.size());
  Standardization params;
  params.feature_mean = train.inputs.colwise().mean().transpose();
  params.feature_scale.resize(train.dim());
  for (Eigen::Index c = 0; c < train.dim(); ++c) {
    const double var = (train.inputs.col(c).array() - params.feature_mean(c)).square().sum() / n;
    const double sd = std::sqrt(var);
    params.feature_scale(c) = sd < 1e-8 ? 1.0 : sd;
  }
  if (train.task == Task::regression) {
    params.target_mean = train.targets.mean();
    const double sd = std::sqrt((train.targets.array() - params.target_mean).square().sum() / n);
    params.target_scale = sd < 1e-8 ? 1.0 : sd;
  }
  StandardizeResult result{params.apply(train), {}, params};
  for (const auto& other : others) result.others.push_back(params.apply(other));
  return result;
}

std::string_view to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::rotate:
      return "rotate";
    case ShiftKind::translate_cyclic:
      return "translate_cyclic";
    case ShiftKind::scale:
      return "scale";
  }
  return "rotate";
}

ShiftKind shift_kind_from_string(std::string_view name) {
  if (name == "rotate") return ShiftKind::rotate;
  if (name == "translate_cyclic") return ShiftKind::translate_cyclic;
  if (name == "scale") return ShiftKind::scale;
  throw ConfigError("unknown shift kind '" + std::string(name) + "'");
}

Dataset apply_shift(const Dataset& dataset, const ShiftSpec& spec) {
  if (!std::isfinite(spec.intensity)) throw InvalidInput("shift intensity must be finite");
  Dataset out = dataset;
  if (spec.kind == ShiftKind::scale) {
    out.inputs *= 1.0 + spec.intensity;
    return out;
  }
  const int h = spec.height;
  const int w = spec.width;
  if (h <= 0 || w <= 0 || static_cast<Eigen::Index>(h) * w != dataset.dim()) {
    throw InvalidInput("image shape " + std::to_string(h) + "x" + std::to_string(w) +
                       " does not match input dimension " + std::to_string(dataset.dim()));
  }
  if (spec.kind == ShiftKind::translate_cyclic) {
    const long shift = static_cast<long>(std::floor(spec.intensity));
    const long k = ((shift % w) + w) % w;
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          out.inputs(i, r * w + (c + k) % w) = dataset.inputs(i, r * w + c);
        }
      }
    }
    return out;
  }
  const double radians = spec.intensity * std::numbers::pi / 180.0;
  const double cs = std::cos(radians);
  const double sn = std::sin(radians);
  const double cy = (h - 1) / 2.0;
  const double cx = (w - 1) / 2.0;
  for (Eigen::Index i = 0; i < dataset.size(); ++i) {
    auto pixel = [&](long r, long c) {
      if (r < 0 || r >= h || c < 0 || c >= w) return 0.0;
      return dataset.inputs(i, r * w + c);
    };
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        // Counter-clockwise on screen: inverse-map with y pointing up.
        const double x = c - cx;
        const double y = cy - r;
        const double sx = cs * x + sn * y;
        const double sy = -sn * x + cs * y;
        const double src_c = sx + cx;
        const double src_r = cy - sy;
        const double c0 = std::floor(src_c);
        const double r0 = std::floor(src_r);
        const double fc = src_c - c0;
        const double fr = src_r - r0;
        const long ic = static_cast<long>(c0);
        const long ir = static_cast<long>(r0);
        double v = (1.0 - fr) * (1.0 - fc) * pixel(ir, ic);
        if (fc > 0.0) v += (1.0 - fr) * fc * pixel(ir, ic + 1);
        if (fr > 0.0) v += fr * (1.0 - fc) * pixel(ir + 1, ic);
        if (fr > 0.0 && fc > 0.0) v += fr * fc * pixel(ir + 1, ic + 1);
        out.inputs(i, r * w + c) = v;
      }
    }
  }
  return out;
}

Json SplitResult::manifest(std::uint64_t seed, const std::array<double, 3>& fractions) const {
  auto to_list = [](const std::vector<Eigen::Index>& rows) {
    return std::vector<long long>(rows.begin(), rows.end());
  };
  return {{"seed", seed},
          {"fractions", fractions},
          {"train", to_list(rows[0])},
          {"validation", to_list(rows[1])},
          {"test", to_list(rows[2])}};
}

SplitResult split(const Dataset& dataset, const std::array<double, 3>& fractions,
                  std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0 || !std::isfinite(f)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions sum to " + std::to_string(total) + ", expected 1");
  }
  Rng rng(seed);
  std::vector<std::vector<Eigen::Index>> groups;
  if (dataset.task == Task::classification) {
    groups.resize(static_cast<std::size_t>(std::max(dataset.num_classes, 1)));
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
      groups[static_cast<std::size_t>(dataset.labels[static_cast<std::size_t>(i)])].push_back(i);
    }
  } else {
    groups.emplace_back();
    for (Eigen::Index i = 0; i < dataset.size(); ++i) groups[0].push_back(i);
  }
  SplitResult result;
  for (auto& group : groups) {
    rng.shuffle(group);
    const double n = static_cast<double>(group.size());
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    const auto n_val = std::min(group.size() - std::min(n_train, group.size()),
                                static_cast<std::size_t>(std::llround(fractions[1] * n)));
    const std::size_t cut1 = std::min(n_train, group.size());
    const std::size_t cut2 = cut1 + n_val;
    std::size_t cut3 = group.size();
    // A zero test fraction keeps rounding leftovers in train.
    if (fractions[2] == 0.0) {
      result.rows[0].insert(result.rows[0].end(), group.begin(), group.begin() + cut1);
      result.rows[1].insert(result.rows[1].end(), group.begin() + cut1, group.begin() + cut2);
      result.rows[0].insert(result.rows[0].end(), group.begin() + cut2, group.end());
      continue;
    }
    result.rows[0].insert(result.rows[0].end(), group.begin(), group.begin() + cut1);
    result.rows[1].insert(result.rows[1].end(), group.begin() + cut1, group.begin() + cut2);
    result.rows[2].insert(result.rows[2].end(), group.begin() + cut2, group.begin() + cut3);
  }
  for (auto& rows : result.rows) std::sort(rows.begin(), rows.end());
  result.train = dataset.subset(result.rows[0]);
  result.validation = dataset.subset(result.rows[1]);
  result.test = dataset.subset(result.rows[2]);
  return result;
}

}  // namespace hydra

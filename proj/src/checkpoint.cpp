#include "hydra/checkpoint.hpp"

#include "hydra/error.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace hydra {

Json model_to_json(const MlpModel& model) {
  Json layers = Json::array();
  for (const auto& layer : model.layers()) {
    Json weights = Json::array();
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) weights.push_back(layer.weight(r, c));
    }
    Json bias = Json::array();
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) bias.push_back(layer.bias(i));
    layers.push_back({{"in", layer.in_dim()},
                      {"out", layer.out_dim()},
                      {"activation", std::string(to_string(layer.activation))},
                      {"weight", std::move(weights)},
                      {"bias", std::move(bias)}});
  }
  return {{"format", "hydra-mlp"}, {"version", kCheckpointVersion}, {"layers", std::move(layers)}};
}

MlpModel model_from_json(const Json& doc) {
  try {
    if (doc.at("format") != "hydra-mlp") throw LoadError("not an MLP checkpoint");
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw LoadError("unsupported checkpoint version " + doc.at("version").dump());
    }
    std::vector<DenseLayer> layers;
    for (const auto& entry : doc.at("layers")) {
      const auto in = entry.at("in").get<Eigen::Index>();
      const auto out = entry.at("out").get<Eigen::Index>();
      const auto& weights = entry.at("weight");
      const auto& bias = entry.at("bias");
      if (in <= 0 || out <= 0 || static_cast<Eigen::Index>(weights.size()) != in * out ||
          static_cast<Eigen::Index>(bias.size()) != out) {
        throw LoadError("layer parameter count does not match its declared shape");
      }
      DenseLayer layer;
      layer.activation = activation_from_string(entry.at("activation").get<std::string>());
      layer.weight.resize(out, in);
      for (Eigen::Index r = 0; r < out; ++r) {
        for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = weights.at(r * in + c).get<double>();
      }
      layer.bias.resize(out);
      for (Eigen::Index i = 0; i < out; ++i) layer.bias(i) = bias.at(i).get<double>();
      layers.push_back(std::move(layer));
    }
    return MlpModel(std::move(layers));
  } catch (const Json::exception& e) {
    throw LoadError(std::string("malformed checkpoint: ") + e.what());
  } catch (const InvalidInput& e) {
    throw LoadError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const MlpModel& model, const CheckpointMeta& meta) {
  Json doc = model_to_json(model);
  doc["meta"] = {{"seed", meta.seed}, {"config_digest", meta.config_digest}};
  write_json_file(path, doc);
}

MlpModel load_model(const std::filesystem::path& path, CheckpointMeta* meta) {
  const Json doc = read_json_file(path);
  MlpModel model = model_from_json(doc);
  if (meta) {
    meta->seed = doc.value("/meta/seed"_json_pointer, std::uint64_t{0});
    meta->config_digest = doc.value("/meta/config_digest"_json_pointer, std::string());
  }
  return model;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw LoadError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

void write_json_file(const std::filesystem::path& path, const Json& doc) {
  write_text_file(path, doc.dump(1) + "\n");
}

std::string content_digest(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

std::string json_digest(const Json& doc) { return content_digest(doc.dump()); }

}  // namespace hydra

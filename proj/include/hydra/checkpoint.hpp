#pragma once

#include "hydra/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace hydra {

using Json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

/// Architecture plus row-major parameters. Doubles are emitted with
/// round-trip precision, so model_from_json(model_to_json(m)) == m bitwise.
Json model_to_json(const MlpModel& model);
MlpModel model_from_json(const Json& doc);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string config_digest;
};

void save_model(const std::filesystem::path& path, const MlpModel& model,
                const CheckpointMeta& meta = {});
MlpModel load_model(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& doc);
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// 64-bit FNV-1a content hash rendered as 16 hex digits.
std::string content_digest(std::string_view bytes);
/// Digest of the canonical (sorted-key, compact) serialization of a document.
std::string json_digest(const Json& doc);

}  // namespace hydra

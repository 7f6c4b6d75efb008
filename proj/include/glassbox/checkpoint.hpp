#pragma once

// Binary checkpoint layout (all integers little-endian u32):
//
//   "GBXM" | version | metadata_len | metadata (UTF-8 JSON)
//   then for every tensor, in ModelParams::visit order:
//     name_len | name | rank | dims[rank] | raw float32 values
//
// Norm gains and biases are rank 1, every other tensor rank 2. The metadata
// document holds {"model": <ModelConfig>, "tag": <string>}.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "glassbox/model.hpp"

namespace glassbox {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, bad_version, bad_metadata, shape_mismatch, truncated, trailing_data };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ModelF model;
  // Free-form label; training writes the regimen ("one_stage", "two_stage").
  std::string tag;
};

std::vector<std::uint8_t> save_checkpoint(const ModelF& model, const std::string& tag = "");

// `declared`, when given, must match the stored config exactly.
Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes,
                           const ModelConfig* declared = nullptr);

void write_checkpoint_file(const std::filesystem::path& path, const ModelF& model,
                           const std::string& tag = "");
Checkpoint read_checkpoint_file(const std::filesystem::path& path,
                                const ModelConfig* declared = nullptr);

}  // namespace glassbox

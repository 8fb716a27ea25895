#pragma once

#include <filesystem>
#include <optional>

#include "iapo/grad.hpp"
#include "iapo/model.hpp"
#include "json.hpp"

namespace iapo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Params params;
  std::optional<AdamWState> optimizer;
  nlohmann::json meta;  // free-form run state (step, seed, ...)
};

// Little-endian layout:
//   "IAPO" | u32 version | u64 header_len | header JSON | u64 weight_count |
//   weights (f64) | u8 has_optimizer | [m (f64) | v (f64)] | u64 FNV-1a of
//   everything before it.
// The header JSON carries the model config, optimizer hyperparameters and
// step counter, and `meta`.
void save_checkpoint(const std::filesystem::path& path, const Params& params,
                     const AdamWState* optimizer, const nlohmann::json& meta = {});

// Throws IntegrityError on bad magic / truncation / checksum mismatch and
// IncompatibleError on a version mismatch or, when `expected` is given, a
// model config that differs from it.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ModelConfig* expected = nullptr);

}  // namespace iapo

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dodnet/model.hpp"
#include "dodnet/optim.hpp"

namespace dodnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  Architecture architecture = Architecture::dodnet;
  ModelConfig config;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, TensorF>> parameters;  // detached copies
  std::optional<OptimizerState> optimizer;

  const TensorF* find(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Snapshot of the model (and optimizer, when given).
Checkpoint make_checkpoint(const SegmentationNetwork& model, const SgdMomentum* optimizer,
                           std::int64_t step);

/// "DODN", u32 version, u32-length-prefixed key=value config text, u32
/// record count, then per record: u32 name length, name, u32 rank, u64
/// extents, f32 payload. Velocity buffers are stored as opt.velocity.<name>.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameters into `model` after checking that every block is
/// present with the right shape. The error names the first offending block.
void apply_checkpoint(const Checkpoint& checkpoint, SegmentationNetwork& model,
                      SgdMomentum* optimizer = nullptr);

/// Builds the network described by the checkpoint and loads it.
std::unique_ptr<SegmentationNetwork> restore_network(const Checkpoint& checkpoint);

/// Downstream DoDNet with encoder and decoder copied from a pretrained
/// checkpoint and a freshly drawn controller sized for `downstream`.
std::unique_ptr<DoDNet> transfer_init(const Checkpoint& pretrained, const ModelConfig& downstream,
                                      std::uint64_t seed);

}  // namespace dodnet

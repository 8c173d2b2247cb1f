#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "vmscan/grid_scan.hpp"

namespace vmscan {

/// Patching geometry. stride <= patch_size: overlap is allowed, gaps are
/// not. Uncommon patch sizes are accepted but flagged with a note.
struct PatchConfig {
  long patch_size = 4;
  long stride = 4;
  long embed_dim = 16;

  void validate() const {
    if (patch_size < 1 || stride < 1 || embed_dim < 1)
      throw std::invalid_argument("PatchConfig: patch_size/stride/embed_dim must be >= 1");
    if (stride > patch_size)
      throw std::invalid_argument("PatchConfig: stride " + std::to_string(stride) +
                                  " exceeds patch size " + std::to_string(patch_size));
  }

  /// Non-empty when the configuration is legal but unusual.
  std::string note() const {
    if (patch_size != 4 && patch_size != 8 && patch_size != 16 && patch_size != 32)
      return "uncommon patch size " + std::to_string(patch_size);
    return "";
  }
};

/// Four-stage encoder configuration. Parameter count is a pure function of
/// everything except the strategy: the eight scan slots share one parameter
/// set per block, so slot assignment never changes the model size.
struct ModelConfig {
  std::array<long, 4> stage_depths{1, 1, 1, 1};
  std::array<long, 4> stage_dims{16, 32, 64, 128};
  long state_dim = 8;
  PatchConfig patch{4, 4, 16};
  long num_classes = 6;
  long in_channels = 3;
  StrategySpec strategy = expand_strategy({ScanDirection::D1}, "Exp1");

  void validate() const {
    patch.validate();
    if (patch.embed_dim != stage_dims[0])
      throw std::invalid_argument("ModelConfig: embed_dim must equal stage_dims[0]");
    for (long d : stage_dims)
      if (d < 1) throw std::invalid_argument("ModelConfig: stage dims must be >= 1");
    for (long d : stage_depths)
      if (d < 0) throw std::invalid_argument("ModelConfig: stage depths must be >= 0");
    if (state_dim < 1) throw std::invalid_argument("ModelConfig: state_dim must be >= 1");
    if (num_classes < 1) throw std::invalid_argument("ModelConfig: num_classes must be >= 1");
    if (in_channels < 1) throw std::invalid_argument("ModelConfig: in_channels must be >= 1");
  }
};

}  // namespace vmscan

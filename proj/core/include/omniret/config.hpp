#pragma once

#include <string>

#include "omniret/trainer.hpp"

namespace omniret {

/// Run configuration as flat dotted-key UTF-8 JSON. Missing keys take the
/// desk defaults; unknown keys are rejected so typos cannot pass silently.
struct RunConfig {
  RunSettings settings;

  /// Named presets: "desk" (test-scale defaults) and "paper" (the
  /// training-table values: batch sizes, iteration counts, learning-rate
  /// schedule, pooling sizes).
  static RunConfig preset(const std::string& name);

  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  std::string to_json_text() const;
};

}  // namespace omniret

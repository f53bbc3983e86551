#pragma once

#include <string>

#include "octloc/training.hpp"

namespace octloc {

// Everything a run needs, seedable and serializable. Unknown keys in the
// JSON are a hard error so typos cannot silently fall back to defaults.
struct Config {
  uint64_t seed = 0;
  ModelConfig model;
  BoundingRegion region;
  WorldConfig world;
  TrainConfig training;

  void validate() const;

  static Config from_json_text(const std::string& text);
  static Config from_json_file(const std::string& path);

  // Canonical form: every key emitted, keys sorted, fixed layout. Parsing
  // the output and re-serializing reproduces it byte for byte.
  std::string to_canonical_json() const;
};

}  // namespace octloc

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "agcm/nn.hpp"
#include "agcm/rng.hpp"
#include "agcm/tensor.hpp"

namespace agcm {

/// Recipe for one synthetic multi-object scene: bright filled shapes over a
/// textured dark background, with the exact rasterized union as the mask.
struct SceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  int objects_min = 1;
  int objects_max = 3;
  double extent_min = 0.10;  // object half-size as a fraction of min(h, w)
  double extent_max = 0.28;
  double coverage_min = 0.02;  // accepted foreground fraction band
  double coverage_max = 0.60;
  bool disks = true;
  bool rects = true;
  bool triangles = true;

  void validate() const;
};

struct SyntheticScene {
  Tensor image;  // [3 x h x w] in [0, 1]
  Tensor mask;   // [1 x h x w] in {0, 1}
  int objects = 0;
  std::uint64_t seed = 0;
};

/// Deterministic under the seed. Regenerates until the foreground fraction
/// lands in the coverage band; an unsatisfiable spec fails after bounded
/// retries.
SyntheticScene gen_scene(std::uint64_t seed, const SceneSpec& spec);

// Binary PNM codecs, maxval 255. Color images are P6, grayscale maps P5.
// Parse failures report the byte offset.
void write_ppm(const std::string& path, const Tensor& rgb);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& gray);
Tensor read_pgm(const std::string& path);

struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
};

/// Loads img_*.ppm / msk_*.pgm pairs from a directory; masks binarize at
/// 0.5. Unpaired files are an error listing every offender.
std::vector<Sample> load_dataset(const std::string& dir);

struct CheckpointExtras {
  std::string optimizer_state;
  std::string rng_state;
  std::uint32_t epoch = 0;
};

/// Framed binary checkpoint: magic, version, config hash, ordered parameter
/// records, then opaque optimizer and RNG blocks and the epoch. Parameter
/// values round-trip bitwise.
void save_checkpoint(const std::string& path, std::uint64_t config_hash,
                     const ParameterStore& store, const CheckpointExtras& extras);

/// Loads into a store declared with the same architecture; the stored
/// config hash must equal `expected_config_hash` and the parameter records
/// must cover the store exactly. Nothing is written on failure.
CheckpointExtras load_checkpoint(const std::string& path, std::uint64_t expected_config_hash,
                                 ParameterStore& store);

}  // namespace agcm

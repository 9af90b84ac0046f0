#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

// Procedural scene family: background plus C-1 shape classes whose pixel
// frequencies decay geometrically (long tail).
struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 6;
  double freq_ratio = 0.5;  // frequency of class c+1 relative to class c
  int background_class = 0;

  std::vector<double> class_frequency() const;  // sums to 1
};

// Photometric corruption; label maps are invariant under any setting.
// All-neutral magnitudes reproduce the source domain bit-exactly.
struct ShiftSpec {
  std::string condition = "source";
  double brightness = 0.0;   // additive
  double contrast = 1.0;     // scale around 0.5
  double noise_sigma = 0.0;  // additive Gaussian, per channel
  double hue = 0.0;          // rotation about the gray axis, radians
  double gamma = 1.0;        // power curve on [0,1]

  bool is_identity() const;
  void validate() const;  // ConfigError on invalid magnitudes

  // Named conditions: source, fog, night, rain, snow.
  static ShiftSpec preset(const std::string& name);
  static const std::vector<std::string>& condition_names();  // the four shifts
};

struct Sample {
  Tensor image;             // [3,H,W], values in [0,1]
  std::vector<int> labels;  // H*W class ids, row-major
};

// Deterministic in (spec, shift, n, seed); the corruption stream is
// decoupled from geometry so every shift shares identical labels.
std::vector<Sample> generate(const SceneSpec& spec, const ShiftSpec& shift,
                             int n, std::uint64_t seed);

Tensor hflip_image(const Tensor& img);  // [C,H,W], mirror along width
std::vector<int> hflip_labels(const std::vector<int>& labels, int height,
                              int width);

// Flat float64 image blob + int32 label blob + JSON index. Loading must
// reproduce the generated samples bit-exactly.
void save_cache(const std::string& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_cache(const std::string& dir);

}  // namespace tta

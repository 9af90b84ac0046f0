#include "tta/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "tta/rng.hpp"

namespace tta {

namespace {

constexpr double kTwoThirdsPi = 2.0943951023931953;

void class_color(int c, int C, double rgb[3]) {
  const double th = 2.0 * 3.141592653589793 * c / C;
  rgb[0] = 0.5 + 0.42 * std::cos(th);
  rgb[1] = 0.5 + 0.42 * std::cos(th - kTwoThirdsPi);
  rgb[2] = 0.5 + 0.42 * std::cos(th + kTwoThirdsPi);
}

// Paint one shape of class c over background pixels only; returns pixels
// written. Clipping to background keeps per-class quotas exact.
int paint_shape(std::vector<int>& labels, const SceneSpec& spec, int c,
                int target_area, Rng& rng) {
  const int H = spec.height, W = spec.width, bg = spec.background_class;
  auto write = [&](int y, int x) -> int {
    if (y < 0 || y >= H || x < 0 || x >= W) return 0;
    int& l = labels[static_cast<std::size_t>(y) * W + x];
    if (l != bg) return 0;
    l = c;
    return 1;
  };
  int painted = 0;
  switch ((c - 1) % 3) {
    case 0: {  // rectangle
      const double aspect = rng.uniform(0.5, 2.0);
      int w = std::max(2, static_cast<int>(std::lround(
                              std::sqrt(target_area * aspect))));
      int h = std::max(2, static_cast<int>(std::lround(
                              std::sqrt(target_area / aspect))));
      w = std::min(w, W);
      h = std::min(h, H);
      const int x0 = static_cast<int>(rng.uniform_int(W - w + 1));
      const int y0 = static_cast<int>(rng.uniform_int(H - h + 1));
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) painted += write(y, x);
      break;
    }
    case 1: {  // disc
      const int r = std::max(
          1, static_cast<int>(std::lround(std::sqrt(target_area / 3.14159))));
      const int cy = static_cast<int>(rng.uniform_int(H));
      const int cx = static_cast<int>(rng.uniform_int(W));
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
            painted += write(y, x);
      break;
    }
    default: {  // horizontal stripe
      const int t = std::max(
          1, std::min(H, static_cast<int>(std::lround(
                             static_cast<double>(target_area) / W))));
      const int y0 = static_cast<int>(rng.uniform_int(H - t + 1));
      for (int y = y0; y < y0 + t; ++y)
        for (int x = 0; x < W; ++x) painted += write(y, x);
      break;
    }
  }
  return painted;
}

void apply_shift(Tensor& img, const ShiftSpec& shift, Rng& rng) {
  const int H = img.dim(1), W = img.dim(2);
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  double* R = img.values().data();
  double* G = R + HW;
  double* B = G + HW;

  // Rotation about the gray axis (Rodrigues, u = (1,1,1)/sqrt(3)).
  double rot[3][3];
  const bool do_hue = shift.hue != 0.0;
  if (do_hue) {
    const double ct = std::cos(shift.hue), st = std::sin(shift.hue);
    const double s3 = st / std::sqrt(3.0), k = (1.0 - ct) / 3.0;
    rot[0][0] = ct + k;
    rot[0][1] = k - s3;
    rot[0][2] = k + s3;
    rot[1][0] = k + s3;
    rot[1][1] = ct + k;
    rot[1][2] = k - s3;
    rot[2][0] = k - s3;
    rot[2][1] = k + s3;
    rot[2][2] = ct + k;
  }

  for (std::size_t i = 0; i < HW; ++i) {
    double v[3] = {R[i], G[i], B[i]};
    if (shift.gamma != 1.0)
      for (double& x : v) x = x <= 0.0 ? 0.0 : std::pow(x, shift.gamma);
    if (shift.contrast != 1.0)
      for (double& x : v) x = 0.5 + shift.contrast * (x - 0.5);
    if (shift.brightness != 0.0)
      for (double& x : v) x += shift.brightness;
    if (do_hue) {
      const double r = rot[0][0] * v[0] + rot[0][1] * v[1] + rot[0][2] * v[2];
      const double g = rot[1][0] * v[0] + rot[1][1] * v[1] + rot[1][2] * v[2];
      const double b = rot[2][0] * v[0] + rot[2][1] * v[1] + rot[2][2] * v[2];
      v[0] = r;
      v[1] = g;
      v[2] = b;
    }
    if (shift.noise_sigma > 0.0)
      for (double& x : v) x += rng.normal(0.0, shift.noise_sigma);
    for (double& x : v) x = std::clamp(x, 0.0, 1.0);
    R[i] = v[0];
    G[i] = v[1];
    B[i] = v[2];
  }
}

}  // namespace

std::vector<double> SceneSpec::class_frequency() const {
  if (num_classes < 2) throw ConfigError("SceneSpec: need at least 2 classes");
  if (freq_ratio <= 0.0 || freq_ratio > 1.0)
    throw ConfigError("SceneSpec: freq_ratio must be in (0,1]");
  std::vector<double> f(static_cast<std::size_t>(num_classes));
  double w = 1.0, s = 0.0;
  for (int c = 0; c < num_classes; ++c, w *= freq_ratio) {
    f[static_cast<std::size_t>(c)] = w;
    s += w;
  }
  for (double& v : f) v /= s;
  return f;
}

bool ShiftSpec::is_identity() const {
  return brightness == 0.0 && contrast == 1.0 && noise_sigma == 0.0 &&
         hue == 0.0 && gamma == 1.0;
}

void ShiftSpec::validate() const {
  if (noise_sigma < 0.0) throw ConfigError("ShiftSpec: noise_sigma < 0");
  if (contrast < 0.0) throw ConfigError("ShiftSpec: contrast < 0");
  if (gamma <= 0.0) throw ConfigError("ShiftSpec: gamma <= 0");
}

ShiftSpec ShiftSpec::preset(const std::string& name) {
  ShiftSpec s;
  s.condition = name;
  if (name == "source") return s;
  if (name == "fog") {
    s.brightness = 0.18;
    s.contrast = 0.55;
    s.noise_sigma = 0.02;
    s.gamma = 0.9;
    return s;
  }
  if (name == "night") {
    s.brightness = -0.25;
    s.contrast = 0.7;
    s.noise_sigma = 0.03;
    s.hue = 0.1;
    s.gamma = 1.6;
    return s;
  }
  if (name == "rain") {
    s.brightness = -0.05;
    s.contrast = 0.8;
    s.noise_sigma = 0.08;
    s.hue = 0.25;
    s.gamma = 1.1;
    return s;
  }
  if (name == "snow") {
    s.brightness = 0.12;
    s.contrast = 0.75;
    s.noise_sigma = 0.05;
    s.hue = -0.2;
    s.gamma = 0.85;
    return s;
  }
  throw ConfigError("ShiftSpec: unknown condition '" + name + "'");
}

const std::vector<std::string>& ShiftSpec::condition_names() {
  static const std::vector<std::string> names = {"fog", "night", "rain",
                                                 "snow"};
  return names;
}

std::vector<Sample> generate(const SceneSpec& spec, const ShiftSpec& shift,
                             int n, std::uint64_t seed) {
  if (n < 1) throw ContractError("generate: n must be >= 1");
  if (spec.height < 8 || spec.width < 8)
    throw ConfigError("generate: image too small");
  if (spec.background_class != 0)
    throw ConfigError("generate: background class must be 0");
  shift.validate();

  const std::vector<double> freq = spec.class_frequency();
  const int H = spec.height, W = spec.width, C = spec.num_classes;
  const std::size_t HW = static_cast<std::size_t>(H) * W;

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int idx = 0; idx < n; ++idx) {
    Rng rng(Rng::mix(seed, 0x9E0Au, static_cast<std::uint64_t>(idx)));

    Sample s;
    s.labels.assign(HW, spec.background_class);
    for (int c = 1; c < C; ++c) {
      const double jitter = rng.uniform(0.85, 1.15);
      const int quota = std::max(
          4, static_cast<int>(std::lround(freq[static_cast<std::size_t>(c)] *
                                          static_cast<double>(HW) * jitter)));
      int painted = 0, attempts = 0;
      while (painted < quota && attempts < 60) {
        ++attempts;
        painted += paint_shape(s.labels, spec, c, quota - painted, rng);
      }
    }

    // Render: per-image class tint + per-pixel texture noise.
    std::vector<double> tint(static_cast<std::size_t>(C) * 3);
    for (int c = 0; c < C; ++c) {
      double rgb[3];
      class_color(c, C, rgb);
      for (int k = 0; k < 3; ++k)
        tint[static_cast<std::size_t>(c) * 3 + k] =
            rgb[k] + rng.uniform(-0.06, 0.06);
    }
    s.image = Tensor::zeros({3, H, W});
    double* img = s.image.values().data();
    for (std::size_t p = 0; p < HW; ++p) {
      const int c = s.labels[p];
      for (int k = 0; k < 3; ++k)
        img[static_cast<std::size_t>(k) * HW + p] =
            std::clamp(tint[static_cast<std::size_t>(c) * 3 + k] +
                           rng.normal(0.0, 0.02),
                       0.0, 1.0);
    }

    if (!shift.is_identity()) {
      Rng srng(Rng::mix(seed, 0x5u, static_cast<std::uint64_t>(idx)));
      apply_shift(s.image, shift, srng);
    }
    out.push_back(std::move(s));
  }
  return out;
}

Tensor hflip_image(const Tensor& img) { return flip_w(img); }

std::vector<int> hflip_labels(const std::vector<int>& labels, int height,
                              int width) {
  if (labels.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError("hflip_labels: size mismatch");
  std::vector<int> out(labels.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out[static_cast<std::size_t>(y) * width + x] =
          labels[static_cast<std::size_t>(y) * width + (width - 1 - x)];
  return out;
}

void save_cache(const std::string& dir, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("save_cache: nothing to save");
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Shape& sh = samples[0].image.shape();
  nlohmann::json index = {
      {"count", samples.size()},
      {"channels", sh[0]},
      {"height", sh[1]},
      {"width", sh[2]},
  };
  std::ofstream ij(dir + "/index.json");
  ij << index.dump(2) << "\n";

  std::ofstream ib(dir + "/images.bin", std::ios::binary);
  std::ofstream lb(dir + "/labels.bin", std::ios::binary);
  for (const Sample& s : samples) {
    if (s.image.shape() != sh)
      throw ContractError("save_cache: inhomogeneous image shapes");
    ib.write(reinterpret_cast<const char*>(s.image.values().data()),
             static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    std::vector<std::int32_t> lab(s.labels.begin(), s.labels.end());
    lb.write(reinterpret_cast<const char*>(lab.data()),
             static_cast<std::streamsize>(lab.size() * sizeof(std::int32_t)));
  }
  if (!ib || !lb) throw ConfigError("save_cache: write failed in " + dir);
}

std::vector<Sample> load_cache(const std::string& dir) {
  std::ifstream ij(dir + "/index.json");
  if (!ij) throw ConfigError("load_cache: missing " + dir + "/index.json");
  nlohmann::json index = nlohmann::json::parse(ij);
  const std::size_t count = index.at("count").get<std::size_t>();
  const int C = index.at("channels").get<int>();
  const int H = index.at("height").get<int>();
  const int W = index.at("width").get<int>();
  const std::size_t img_n = static_cast<std::size_t>(C) * H * W;
  const std::size_t lab_n = static_cast<std::size_t>(H) * W;

  std::ifstream ib(dir + "/images.bin", std::ios::binary);
  std::ifstream lb(dir + "/labels.bin", std::ios::binary);
  if (!ib || !lb) throw ConfigError("load_cache: missing blobs in " + dir);
  std::vector<Sample> out(count);
  for (Sample& s : out) {
    std::vector<double> img(img_n);
    ib.read(reinterpret_cast<char*>(img.data()),
            static_cast<std::streamsize>(img_n * sizeof(double)));
    std::vector<std::int32_t> lab(lab_n);
    lb.read(reinterpret_cast<char*>(lab.data()),
            static_cast<std::streamsize>(lab_n * sizeof(std::int32_t)));
    if (!ib || !lb) throw ConfigError("load_cache: truncated blobs in " + dir);
    s.image = Tensor::from_data({C, H, W}, std::move(img));
    s.labels.assign(lab.begin(), lab.end());
  }
  return out;
}

}  // namespace tta

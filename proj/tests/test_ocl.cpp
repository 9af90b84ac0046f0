#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "tta/error.hpp"
#include "tta/gradcheck.hpp"
#include "tta/model.hpp"
#include "tta/ocl.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

using namespace tta;

namespace {

// Probability map with the given per-pixel one-hot class, [C,H,W].
Tensor onehot_map(int C, int H, int W, const std::vector<int>& classes) {
  REQUIRE(classes.size() == static_cast<std::size_t>(H) * W);
  Tensor t = Tensor::zeros({C, H, W});
  auto v = t.values();
  for (int px = 0; px < H * W; ++px) v[classes[px] * H * W + px] = 1.0;
  return t;
}

// Random strictly-positive map normalized per pixel to the simplex.
Tensor random_map(int C, int H, int W, Rng& rng) {
  Tensor t = Tensor::zeros({C, H, W});
  auto v = t.values();
  const int plane = H * W;
  for (int px = 0; px < plane; ++px) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      v[c * plane + px] = rng.uniform(0.05, 1.0);
      s += v[c * plane + px];
    }
    for (int c = 0; c < C; ++c) v[c * plane + px] /= s;
  }
  return t;
}

// Channel vector of pixel (h,w) from a [C,H,W] map.
std::vector<double> pixel_of(const Tensor& map, int h, int w) {
  const int C = map.dim(0), H = map.dim(1), W = map.dim(2);
  std::vector<double> p(C);
  for (int c = 0; c < C; ++c) p[c] = map.values()[(c * H + h) * W + w];
  return p;
}

// All channel vectors on the stride grid, scan order.
std::vector<std::vector<double>> grid_pixels(const Tensor& map, int stride) {
  std::vector<std::vector<double>> out;
  for (int h = 0; h < map.dim(1); h += stride)
    for (int w = 0; w < map.dim(2); w += stride)
      out.push_back(pixel_of(map, h, w));
  return out;
}

double brute_mean_pairwise(const std::vector<std::vector<double>>& pix) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pix.size(); ++i)
    for (std::size_t j = 0; j < pix.size(); ++j)
      if (i != j) {
        s += cosine_sim(pix[i], pix[j]);
        ++n;
      }
  return s / static_cast<double>(n);
}

Tensor random_points(int N, int C, Rng& rng) {
  Tensor t = Tensor::zeros({N, C});
  for (double& v : t.values()) v = rng.uniform(0.05, 1.0);
  return t;
}

std::vector<std::vector<int>> mutual_pairs(int N) {
  std::vector<std::vector<int>> p(N);
  for (int i = 0; i < N; ++i) p[i] = {i ^ 1};
  return p;
}

// Direct unstabilized InfoNCE evaluation, mean over anchor-positive pairs.
double brute_infonce(const Tensor& points,
                     const std::vector<std::vector<int>>& positives,
                     double tau) {
  const int N = points.dim(0), C = points.dim(1);
  auto row = [&](int i) {
    return std::vector<double>(points.values().begin() + i * C,
                               points.values().begin() + (i + 1) * C);
  };
  double total = 0.0;
  std::size_t pairs = 0;
  for (int i = 0; i < N; ++i) {
    double denom = 0.0;
    for (int k = 0; k < N; ++k)
      if (k != i) denom += std::exp(cosine_sim(row(i), row(k)) / tau);
    for (int j : positives[i]) {
      total += -std::log(std::exp(cosine_sim(row(i), row(j)) / tau) / denom);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("cosine_sim pinned values") {
  std::vector<double> e0 = {1.0, 0.0}, e1 = {0.0, 1.0};
  CHECK(cosine_sim(e0, e0) == 1.0);
  CHECK(cosine_sim(e0, e1) == 0.0);
  std::vector<double> a = {0.6, 0.8}, b = {0.8, 0.6};
  CHECK(cosine_sim(a, b) == doctest::Approx(0.96).epsilon(1e-12));
  CHECK(cosine_sim(a, b) == cosine_sim(b, a));
  std::vector<double> z = {0.0, 0.0};
  CHECK_THROWS_AS(cosine_sim(e0, z), ContractError);
  std::vector<double> len3 = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(cosine_sim(e0, len3), ContractError);
}

TEST_CASE("positive loss pinned values") {
  PairSampling s;
  s.stride = 1;

  SUBCASE("identical one-hot maps give exactly -1") {
    PredictionMap m{onehot_map(3, 2, 2, {0, 1, 2, 0})};
    CHECK(positive_loss(m, m, s).item() == -1.0);
  }
  SUBCASE("per-pixel orthogonal one-hots give exactly 0") {
    PredictionMap a{onehot_map(2, 2, 2, {0, 0, 0, 0})};
    PredictionMap b{onehot_map(2, 2, 2, {1, 1, 1, 1})};
    CHECK(positive_loss(a, b, s).item() == 0.0);
  }
  SUBCASE("two-pixel hand oracle: mean of {-1, 0}") {
    PredictionMap a{onehot_map(2, 1, 2, {0, 0})};
    PredictionMap b{onehot_map(2, 1, 2, {0, 1})};
    CHECK(positive_loss(a, b, s).item() == -0.5);
  }
  SUBCASE("identical random maps approach -1") {
    Rng rng(3);
    PredictionMap m{random_map(4, 3, 5, rng)};
    CHECK(positive_loss(m, m, s).item() ==
          doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("flipped tag is realigned before pairing") {
    // view2 holds the mirrored map; alignment must undo it exactly.
    Rng rng(4);
    Tensor m = random_map(3, 2, 4, rng);
    PredictionMap a{m, ViewTag::Original};
    PredictionMap b{flip_w(m), ViewTag::Flipped};
    CHECK(positive_loss(a, b, s).item() ==
          doctest::Approx(-1.0).epsilon(1e-12));
  }
  SUBCASE("shape mismatch rejected") {
    Rng rng(5);
    PredictionMap a{random_map(3, 2, 2, rng)};
    PredictionMap b{random_map(3, 2, 4, rng)};
    CHECK_THROWS_AS(positive_loss(a, b, s), ContractError);
  }
  SUBCASE("non-simplex map rejected") {
    Rng rng(6);
    Tensor bad = random_map(3, 2, 2, rng);
    bad.values()[0] += 0.5;
    PredictionMap a{bad};
    CHECK_THROWS_AS(positive_loss(a, a, s), ContractError);
  }
}

TEST_CASE("negative loss pinned values") {
  PairSampling s;
  s.stride = 1;

  SUBCASE("all pixels identical gives exactly 1") {
    PredictionMap m{onehot_map(3, 2, 2, {1, 1, 1, 1})};
    CHECK(negative_loss(m, m, s).item() == 1.0);
  }
  SUBCASE("pairwise-orthogonal one-hot pixels give exactly 0") {
    PredictionMap m{onehot_map(4, 2, 2, {0, 1, 2, 3})};
    CHECK(negative_loss(m, m, s).item() == 0.0);
  }
  SUBCASE("two orthogonal pixels per view give exactly 0") {
    PredictionMap m{onehot_map(2, 1, 2, {0, 1})};
    CHECK(negative_loss(m, m, s).item() == 0.0);
  }
  SUBCASE("fewer than 2 sampled pixels rejected") {
    PredictionMap m{onehot_map(2, 1, 1, {0})};
    CHECK_THROWS_AS(negative_loss(m, m, s), ContractError);
    PredictionMap m4{onehot_map(2, 4, 4, std::vector<int>(16, 0))};
    PairSampling wide;
    wide.stride = 8;  // ceil(4/8) = 1 sample
    CHECK_THROWS_AS(negative_loss(m4, m4, wide), ContractError);
  }
}

TEST_CASE("negative loss matches brute-force pair enumeration") {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    Rng rng(seed);
    const int C = 3 + static_cast<int>(rng.uniform_int(3));
    const int H = 4, W = 6;
    PredictionMap a{random_map(C, H, W, rng)};
    PredictionMap b{random_map(C, H, W, rng)};
    for (int stride : {1, 2, 3}) {
      PairSampling s;
      s.stride = stride;
      const double expect = 0.5 * (brute_mean_pairwise(grid_pixels(a.probs,
                                                                   stride)) +
                                   brute_mean_pairwise(grid_pixels(b.probs,
                                                                   stride)));
      CHECK(negative_loss(a, b, s).item() ==
            doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("positive loss matches brute-force per-pixel similarity") {
  for (std::uint64_t seed = 31; seed <= 45; ++seed) {
    Rng rng(seed);
    PredictionMap a{random_map(4, 3, 5, rng)};
    PredictionMap b{random_map(4, 3, 5, rng)};
    auto pa = grid_pixels(a.probs, 1), pb = grid_pixels(b.probs, 1);
    double sum = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i)
      sum += cosine_sim(pa[i], pb[i]);
    PairSampling s;
    s.stride = 1;
    CHECK(positive_loss(a, b, s).item() ==
          doctest::Approx(-sum / pa.size()).epsilon(1e-12));
  }
}

TEST_CASE("total loss composition and weight handling") {
  PairSampling s;
  s.stride = 1;

  SUBCASE("weighted degenerate instance: 3*(-1) + 1*(1)") {
    PredictionMap m{onehot_map(3, 2, 2, {2, 2, 2, 2})};
    CHECK(ocl_total(m, m, 3.0, 1.0, s).item() == -2.0);
  }
  SUBCASE("zero weights give exactly 0") {
    Rng rng(7);
    PredictionMap m{random_map(3, 2, 2, rng)};
    CHECK(ocl_total(m, m, 0.0, 0.0, s).item() == 0.0);
  }
  SUBCASE("equals the weighted sum of the parts") {
    for (std::uint64_t seed = 50; seed < 60; ++seed) {
      Rng rng(seed);
      PredictionMap a{random_map(5, 4, 4, rng)};
      PredictionMap b{random_map(5, 4, 4, rng)};
      PairSampling sub;
      sub.stride = 2;
      const double lp = positive_loss(a, b, sub).item();
      const double ln = negative_loss(a, b, sub).item();
      CHECK(ocl_total(a, b, 3.0, 1.0, sub).item() == 3.0 * lp + ln);
    }
  }
  SUBCASE("invalid weights rejected") {
    Rng rng(8);
    PredictionMap m{random_map(3, 2, 2, rng)};
    CHECK_THROWS_AS(ocl_total(m, m, -1.0, 1.0, s), ConfigError);
    CHECK_THROWS_AS(ocl_total(m, m, 3.0, -0.5, s), ConfigError);
    CHECK_THROWS_AS(
        ocl_total(m, m, std::numeric_limits<double>::quiet_NaN(), 1.0, s),
        ConfigError);
  }
}

TEST_CASE("swapping the views changes nothing") {
  for (std::uint64_t seed = 60; seed < 70; ++seed) {
    Rng rng(seed);
    Tensor base = random_map(4, 4, 6, rng);
    PredictionMap a{random_map(4, 4, 6, rng), ViewTag::Original};
    PredictionMap b{flip_w(base), ViewTag::Flipped};
    PairSampling s;
    s.stride = 2;
    CHECK(std::abs(ocl_total(a, b, 3.0, 1.0, s).item() -
                   ocl_total(b, a, 3.0, 1.0, s).item()) <= 1e-12);
    CHECK(std::abs(positive_loss(a, b, s).item() -
                   positive_loss(b, a, s).item()) <= 1e-12);
    CHECK(std::abs(negative_loss(a, b, s).item() -
                   negative_loss(b, a, s).item()) <= 1e-12);
  }
}

TEST_CASE("both terms stay within cosine bounds") {
  for (std::uint64_t seed = 70; seed < 90; ++seed) {
    Rng rng(seed);
    PredictionMap a{random_map(6, 5, 5, rng)};
    PredictionMap b{random_map(6, 5, 5, rng)};
    PairSampling s;
    s.stride = 2;
    const double lp = positive_loss(a, b, s).item();
    const double ln = negative_loss(a, b, s).item();
    CHECK(lp >= -1.0);
    CHECK(lp <= 1.0);
    CHECK(ln >= -1.0);
    CHECK(ln <= 1.0);
  }
}

TEST_CASE("total loss gradient matches finite differences via softmax") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    Tensor l1 = Tensor::zeros({3, 4, 6});
    Tensor l2 = Tensor::zeros({3, 4, 6});
    for (double& v : l1.values()) v = rng.normal(0.0, 1.0);
    for (double& v : l2.values()) v = rng.normal(0.0, 1.0);
    std::vector<Tensor> leaves = {l1, l2};
    PairSampling s;
    s.stride = 2;
    auto build = [&]() {
      PredictionMap a{softmax(l1, 0), ViewTag::Original};
      PredictionMap b{softmax(l2, 0), ViewTag::Flipped};
      return ocl_total(a, b, 3.0, 1.0, s);
    };
    auto rep = grad_check(build, leaves);
    INFO("seed ", seed, " worst ", rep.worst);
    CHECK(rep.pass(1e-4));
  }
}

TEST_CASE("total loss gradient matches finite differences through the model") {
  for (std::uint64_t seed : {3u, 8u}) {
    ModelDesc desc;
    desc.num_classes = 3;
    desc.width = 2;
    SegNetToy net(desc, seed);
    Rng rng(seed + 100);
    Tensor img = Tensor::zeros({3, 8, 8});
    for (double& v : img.values()) v = rng.uniform(0.0, 1.0);
    Tensor x1 = stack_images(std::vector<Tensor>{img});
    Tensor x2 = stack_images(std::vector<Tensor>{flip_w(img)});
    auto params = net.parameters();
    PairSampling s;
    s.stride = 4;
    // Batch statistics keep every relu input at unit scale; with the frozen
    // initial stats the deep pre-activations shrink toward the kink and
    // central differences become invalid.
    auto build = [&]() {
      Tensor p1 = reshape(net.forward(x1, BnMode::BatchStats), {3, 8, 8});
      Tensor p2 = reshape(net.forward(x2, BnMode::BatchStats), {3, 8, 8});
      PredictionMap a{softmax(p1, 0), ViewTag::Original};
      PredictionMap b{softmax(p2, 0), ViewTag::Flipped};
      return ocl_total(a, b, 3.0, 1.0, s);
    };
    auto rep = grad_check(build, params);
    INFO("seed ", seed, " worst ", rep.worst);
    CHECK(rep.pass(1e-4));
  }
}

TEST_CASE("minimizing the pairwise term disperses predictions") {
  Rng rng(11);
  Tensor logits = Tensor::zeros({3, 2, 4});
  for (double& v : logits.values()) v = rng.normal(0.0, 0.3);
  PairSampling s;
  s.stride = 1;
  auto mean_sim = [&]() {
    Tensor probs = softmax(logits, 0);
    return brute_mean_pairwise(grid_pixels(probs, 1));
  };
  const double before = mean_sim();
  logits.set_requires_grad(true);
  for (int step = 0; step < 10; ++step) {
    logits.reset_grad();
    Tape tape;
    TapeScope scope(tape);
    PredictionMap m{softmax(logits, 0), ViewTag::Original};
    Tensor loss = negative_loss(m, m, s);
    tape.backward(loss);
    auto v = logits.values();
    auto g = logits.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.5 * g[i];
  }
  const double after = mean_sim();
  INFO("mean pairwise sim ", before, " -> ", after);
  CHECK(after < before);
}

TEST_CASE("reference contrastive loss: two points cancel exactly") {
  for (std::uint64_t seed = 90; seed < 95; ++seed) {
    Rng rng(seed);
    Tensor pts = random_points(2, 4, rng);
    for (double tau : {0.3, 1.0, 50.0})
      CHECK(reference_cl(pts, mutual_pairs(2), tau).item() == 0.0);
  }
}

TEST_CASE("reference contrastive loss matches direct evaluation") {
  for (std::uint64_t seed = 95; seed < 105; ++seed) {
    Rng rng(seed);
    Tensor pts = random_points(8, 5, rng);
    auto pairing = mutual_pairs(8);
    for (double tau : {0.2, 1.0, 10.0})
      CHECK(reference_cl(pts, pairing, tau).item() ==
            doctest::Approx(brute_infonce(pts, pairing, tau))
                .epsilon(1e-12));
    // Uneven pairing: anchor 0 carries two positives.
    pairing[0] = {1, 2};
    CHECK(reference_cl(pts, pairing, 1.0).item() ==
          doctest::Approx(brute_infonce(pts, pairing, 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("reference contrastive loss is scale invariant") {
  Rng rng(106);
  Tensor pts = random_points(6, 4, rng);
  Tensor scaled = scale(pts, 7.3);
  const double a = reference_cl(pts, mutual_pairs(6), 0.7).item();
  const double b = reference_cl(scaled, mutual_pairs(6), 0.7).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("reference contrastive loss gradient matches finite differences") {
  for (std::uint64_t seed = 107; seed < 112; ++seed) {
    Rng rng(seed);
    Tensor pts = random_points(6, 4, rng);
    std::vector<Tensor> leaves = {pts};
    for (double tau : {0.5, 5.0}) {
      auto rep = grad_check(
          [&]() { return reference_cl(pts, mutual_pairs(6), tau); }, leaves);
      INFO("seed ", seed, " tau ", tau, " worst ", rep.worst);
      CHECK(rep.pass(1e-4));
    }
  }
}

TEST_CASE("reference contrastive loss rejects malformed instances") {
  Rng rng(113);
  Tensor pts = random_points(4, 3, rng);
  CHECK_THROWS_AS(reference_cl(pts, mutual_pairs(4), 0.0), ContractError);
  CHECK_THROWS_AS(reference_cl(pts, mutual_pairs(4), -1.0), ContractError);
  CHECK_THROWS_AS(reference_cl(random_points(1, 3, rng), {{0}}, 1.0),
                  ContractError);
  std::vector<std::vector<int>> empty_anchor = {{1}, {}, {0}, {1}};
  CHECK_THROWS_AS(reference_cl(pts, empty_anchor, 1.0), ContractError);
  std::vector<std::vector<int>> self_pair = {{0}, {0}, {1}, {2}};
  CHECK_THROWS_AS(reference_cl(pts, self_pair, 1.0), ContractError);
  std::vector<std::vector<int>> out_of_range = {{4}, {0}, {1}, {2}};
  CHECK_THROWS_AS(reference_cl(pts, out_of_range, 1.0), ContractError);
}

TEST_CASE("high-temperature limit: 16-point instance at tau=1e3") {
  Rng rng(7);
  Tensor pts = random_points(16, 6, rng);
  auto pairing = mutual_pairs(16);
  const double cl = reference_cl(pts, pairing, 1e3).item();
  auto rep = verify_temperature_limit(pts, pairing, {1e3});
  CHECK(std::abs(1e3 * (cl - std::log(15.0)) - rep.two_term) < 0.05);
  CHECK(rep.rows[0].residual < 0.05);
}

TEST_CASE("high-temperature residual decays like 1/tau") {
  const std::vector<double> schedule = {10.0, 1e2, 1e3, 1e4};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 31);
    Tensor pts = random_points(12, 5, rng);
    auto rep = verify_temperature_limit(pts, mutual_pairs(12), schedule);
    INFO("seed ", seed, " residuals ", rep.rows[0].residual, " ",
         rep.rows[1].residual, " ", rep.rows[2].residual, " ",
         rep.rows[3].residual);
    CHECK(rep.residual_decays);
    CHECK(rep.rows.back().residual < 1e-3);
  }
}

TEST_CASE("degenerate instance cancels at every temperature") {
  // Two orthogonal one-hot points: the only similarity is 0, so the
  // contrastive value, its limit target, and the residual are all exactly 0.
  Tensor pts = Tensor::zeros({2, 3});
  pts.values()[0] = 1.0;  // e0
  pts.values()[4] = 1.0;  // e1
  auto rep = verify_temperature_limit(pts, mutual_pairs(2),
                                      {10.0, 1e2, 1e3, 1e4});
  CHECK(rep.two_term == 0.0);
  for (const auto& row : rep.rows) CHECK(row.residual == 0.0);
  CHECK(rep.residual_decays);
}

TEST_CASE("temperature schedule is validated") {
  Rng rng(9);
  Tensor pts = random_points(4, 3, rng);
  CHECK_THROWS_AS(verify_temperature_limit(pts, mutual_pairs(4), {}),
                  ContractError);
  CHECK_THROWS_AS(verify_temperature_limit(pts, mutual_pairs(4), {10.0, 5.0}),
                  ContractError);
  CHECK_THROWS_AS(verify_temperature_limit(pts, mutual_pairs(4), {-1.0, 2.0}),
                  ContractError);
}

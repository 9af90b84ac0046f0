#include "verify_suites.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "tta/engine.hpp"
#include "tta/metrics.hpp"
#include "tta/model.hpp"
#include "tta/ocl.hpp"
#include "tta/rng.hpp"
#include "tta/synthdata.hpp"
#include "tta/tensor.hpp"

namespace tta::verify {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Central differences against the taped gradient of the contrastive loss,
// with prediction maps produced by softmax so perturbed logits stay on the
// simplex. corrupt nudges one analytic derivative to force a failure.
SuiteResult gradient_suite(bool corrupt) {
  SuiteResult r{"gradient", true, ""};
  double worst = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(Rng::mix(seed, 0xF0));
    const Shape shape{3, 4, 4};
    auto make_logits = [&] {
      std::vector<double> v(3 * 4 * 4);
      for (double& x : v) x = rng.normal(0.0, 1.0);
      return Tensor::from_data(shape, std::move(v), true);
    };
    Tensor a = make_logits();
    Tensor b = make_logits();
    PairSampling sampling;
    sampling.stride = 2;
    auto loss_value = [&] {
      PredictionMap m1{softmax(a, 0), ViewTag::Original};
      PredictionMap m2{softmax(b, 0), ViewTag::Original};
      return ocl_total(m1, m2, 3.0, 1.0, sampling).values()[0];
    };

    std::vector<std::vector<double>> analytic;
    {
      Tape tape;
      TapeScope scope(tape);
      PredictionMap m1{softmax(a, 0), ViewTag::Original};
      PredictionMap m2{softmax(b, 0), ViewTag::Original};
      Tensor loss = ocl_total(m1, m2, 3.0, 1.0, sampling);
      tape.backward(loss);
      for (const Tensor* t : {&a, &b}) {
        auto g = t->grad();
        analytic.emplace_back(g.begin(), g.end());
      }
    }
    if (corrupt && seed == 1) analytic[0][0] += 0.05;

    const double eps = 1e-5;
    int li = 0;
    for (Tensor* t : {&a, &b}) {
      auto vals = t->values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double saved = vals[i];
        vals[i] = saved + eps;
        const double up = loss_value();
        vals[i] = saved - eps;
        const double down = loss_value();
        vals[i] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double an = analytic[li][i];
        const double rel = std::fabs(an - numeric) /
                           std::max({std::fabs(an), std::fabs(numeric), 1.0});
        worst = std::max(worst, rel);
      }
      ++li;
    }
  }
  r.pass = worst < 1e-4;
  r.detail = "max rel err " + fmt(worst);
  return r;
}

// Clustered positive pairs keep the loss away from zero so the scaled
// residual bound is meaningful.
SuiteResult tau_limit_suite() {
  SuiteResult r{"tau_limit", true, ""};
  double worst = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(Rng::mix(seed, 0xA1));
    const int n = 24, d = 6;
    std::vector<double> pts(static_cast<std::size_t>(n) * d);
    for (int k = 0; k < n / 2; ++k) {
      std::vector<double> base(d);
      for (double& x : base) x = rng.uniform(0.05, 1.0);
      for (int m = 0; m < 2; ++m)
        for (int j = 0; j < d; ++j)
          pts[static_cast<std::size_t>(2 * k + m) * d + j] =
              base[j] + rng.uniform(0.0, 0.05);
    }
    Tensor points = Tensor::from_data({n, d}, std::move(pts));
    std::vector<std::vector<int>> positives(n);
    for (int i = 0; i < n; ++i) positives[i] = {i ^ 1};
    auto rep =
        verify_temperature_limit(points, positives, {10.0, 1e2, 1e3, 1e4});
    worst = std::max(worst, rep.rows.back().residual);
    if (!rep.residual_decays) {
      r.pass = false;
      r.detail = "residual not decreasing at seed " + std::to_string(seed);
      return r;
    }
  }
  r.pass = worst < 1e-3;
  r.detail = "residual at tau=1e4: " + fmt(worst);
  return r;
}

SuiteResult bn_mix_suite() {
  SuiteResult r{"bn_mix", true, ""};
  ModelDesc desc;
  desc.num_classes = 5;
  desc.width = 8;
  SegNetToy model(desc, 11);
  SceneSpec scene;
  scene.height = 16;
  scene.width = 16;
  scene.num_classes = 5;
  auto samples = generate(scene, ShiftSpec::preset("fog"), 1, 21);
  const std::vector<Tensor> views = {samples[0].image,
                                     hflip_image(samples[0].image)};
  model.estimate_test_stats(stack_images(views));
  for (double alpha : {0.85, 0.0, 1.0}) {
    model.modulate(alpha);
    for (std::size_t bi = 0; bi < model.num_blocks(); ++bi) {
      const ConvBlock& blk = model.block(bi);
      if (!blk.has_bn) continue;
      const BNLayerState& st = blk.bn;
      for (std::size_t c = 0; c < st.mu_train.size(); ++c) {
        const double mu =
            alpha * st.mu_train[c] + (1.0 - alpha) * st.mu_test[c];
        const double var =
            alpha * st.var_train[c] + (1.0 - alpha) * st.var_test[c];
        if (st.mu_mixed[c] != mu || st.var_mixed[c] != var) {
          r.pass = false;
          r.detail = "mix not exact at " + blk.name + " alpha " + fmt(alpha);
          return r;
        }
      }
    }
  }
  r.detail = "exact at alpha 0.85, 0, 1 across all layers";
  return r;
}

SuiteResult restoration_suite() {
  SuiteResult r{"restoration", true, ""};
  // Endpoints: p=0 never restores, p=1 restores everything, bit-exactly.
  ModelDesc small;
  small.num_classes = 4;
  small.width = 6;
  SegNetToy m(small, 5);
  ModelCheckpoint w0 = snapshot(m);
  for (Tensor& t : m.parameters())
    for (double& v : t.values()) v += 0.5;
  std::vector<std::vector<double>> perturbed;
  for (const Tensor& t : m.parameters())
    perturbed.emplace_back(t.values().begin(), t.values().end());
  stochastic_restore(m, w0, 0.0, 9, 0);
  {
    auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto vals = params[i].values();
      if (!std::equal(vals.begin(), vals.end(), perturbed[i].begin())) {
        r.pass = false;
        r.detail = "p=0 modified parameters";
        return r;
      }
    }
  }
  stochastic_restore(m, w0, 1.0, 9, 0);
  {
    SegNetToy ref = model_from_checkpoint(w0);
    auto params = m.parameters();
    auto ref_params = ref.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto a = params[i].values();
      auto b = ref_params[i].values();
      if (!std::equal(a.begin(), a.end(), b.begin())) {
        r.pass = false;
        r.detail = "p=1 did not restore exactly";
        return r;
      }
    }
  }

  // Rate: over >= 1e6 elements the restored count must sit inside the
  // 99% binomial band around n*p.
  ModelDesc wide;
  wide.num_classes = 6;
  wide.width = 90;
  SegNetToy big(wide, 3);
  ModelCheckpoint b0 = snapshot(big);
  std::size_t n = 0;
  for (Tensor& t : big.parameters()) {
    for (double& v : t.values()) v += 1.0;
    n += t.values().size();
  }
  if (n < 1000000) {
    r.pass = false;
    r.detail = "fixture too small: " + std::to_string(n) + " elements";
    return r;
  }
  const double p = 0.01;
  stochastic_restore(big, b0, p, 17, 4);
  SegNetToy ref = model_from_checkpoint(b0);
  auto params = big.parameters();
  auto ref_params = ref.parameters();
  std::size_t restored = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto a = params[i].values();
    auto b = ref_params[i].values();
    for (std::size_t k = 0; k < a.size(); ++k) restored += a[k] == b[k];
  }
  const double mean = static_cast<double>(n) * p;
  const double band = 2.576 * std::sqrt(mean * (1.0 - p));
  const double dev = std::fabs(static_cast<double>(restored) - mean);
  r.pass = dev <= band;
  r.detail = std::to_string(restored) + "/" + std::to_string(n) +
             " restored, |dev| " + fmt(dev) + " <= " + fmt(band);
  return r;
}

SuiteResult miou_oracle_suite() {
  SuiteResult r{"miou_oracle", true, ""};
  const int C = 4, n = 64;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(Rng::mix(seed, 0x31));
    std::vector<int> gt(n), pred(n);
    for (int& v : gt) v = static_cast<int>(rng.uniform_int(C));
    for (int& v : pred) v = static_cast<int>(rng.uniform_int(C));
    ConfusionMatrix cm(C);
    cm.add(gt, pred);
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < C; ++c) {
      long inter = 0, uni = 0;
      for (int i = 0; i < n; ++i) {
        const bool a = gt[i] == c, b = pred[i] == c;
        inter += a && b;
        uni += a || b;
      }
      if (uni == 0) continue;
      sum += static_cast<double>(inter) / static_cast<double>(uni);
      ++defined;
    }
    const double oracle = sum / defined;
    if (miou(cm) != oracle) {
      r.pass = false;
      r.detail = "mismatch at seed " + std::to_string(seed) + ": " +
                 fmt(miou(cm)) + " vs " + fmt(oracle);
      return r;
    }
  }
  r.detail = "exact on 100 random maps";
  return r;
}

}  // namespace

std::vector<SuiteResult> run_all(bool corrupt_gradient) {
  return {gradient_suite(corrupt_gradient), tau_limit_suite(), bn_mix_suite(),
          restoration_suite(), miou_oracle_suite()};
}

}  // namespace tta::verify

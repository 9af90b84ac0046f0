#include "tta/engine.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <utility>

#include "json.hpp"
#include "tta/error.hpp"
#include "tta/metrics.hpp"
#include "tta/rng.hpp"

namespace tta {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Restoration masks get their own seed stream, decoupled from data seeds.
constexpr std::uint64_t kRestoreTag = 0x7e5701e5u;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

struct LossGraph {
  Tensor total;
  double pos = kNan;
  double neg = kNan;
};

// Two-view forward and loss under whatever tape is currently active.
LossGraph build_loss(SegNetToy& model, const Tensor& image,
                     const AdaptationConfig& cfg, BnMode mode) {
  const ModelDesc& d = model.desc();
  const Shape chw = {d.num_classes, image.dim(1), image.dim(2)};
  Tensor x1 = stack_images(std::vector<Tensor>{image});
  Tensor p1 = softmax(reshape(model.forward(x1, mode), chw), 0);
  LossGraph g;
  if (cfg.loss == LossKind::Entropy) {
    g.total = entropy_loss(PredictionMap{p1, ViewTag::Original});
    return g;
  }
  Tensor x2 = stack_images(std::vector<Tensor>{hflip_image(image)});
  Tensor p2 = softmax(reshape(model.forward(x2, mode), chw), 0);
  if (cfg.loss == LossKind::ReferenceCl) {
    // Point set = the stride grid of both realigned views; each pixel's
    // positive is its counterpart in the other view.
    Tensor rows1 = pixels_to_rows(p1, 0, cfg.stride);
    Tensor rows2 = pixels_to_rows(flip_w(p2), 0, cfg.stride);
    const int n = rows1.dim(0);
    std::vector<std::vector<int>> positives(2 * n);
    for (int i = 0; i < n; ++i) {
      positives[i] = {i + n};
      positives[i + n] = {i};
    }
    g.total = reference_cl(concat_rows(rows1, rows2), positives, cfg.cl_tau);
    return g;
  }
  PredictionMap v1{p1, ViewTag::Original};
  PredictionMap v2{p2, ViewTag::Flipped};
  PairSampling sampling;
  sampling.stride = cfg.stride;
  sampling.pos_stride = cfg.pos_stride;
  Tensor lp = positive_loss(v1, v2, sampling);
  Tensor ln = negative_loss(v1, v2, sampling);
  g.pos = lp.item();
  g.neg = ln.item();
  g.total = add(scale(lp, cfg.lambda_pos), scale(ln, cfg.lambda_neg));
  return g;
}

void estimate_and_mix(SegNetToy& model, const Tensor& image,
                      const AdaptationConfig& cfg) {
  std::vector<Tensor> views;
  views.push_back(image);
  if (cfg.joint_view_stats) views.push_back(hflip_image(image));
  model.estimate_test_stats(stack_images(views));
  model.modulate(cfg.bn_alpha);
}

bool grads_finite(const std::vector<Tensor>& params) {
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad())
      if (!std::isfinite(g)) return false;
  }
  return true;
}

}  // namespace

void AdaptationConfig::validate() const {
  require(std::isfinite(lambda_pos) && lambda_pos >= 0.0,
          "lambda_pos must be finite and >= 0");
  require(std::isfinite(lambda_neg) && lambda_neg >= 0.0,
          "lambda_neg must be finite and >= 0");
  require(bn_alpha >= 0.0 && bn_alpha <= 1.0, "bn_alpha must be in [0,1]");
  require(restore_p >= 0.0 && restore_p <= 1.0, "restore_p must be in [0,1]");
  require(std::isfinite(lr) && lr >= 0.0, "lr must be finite and >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0,1)");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0,
          "weight_decay must be finite and >= 0");
  require(stride >= 1, "stride must be >= 1");
  require(pos_stride >= 1, "pos_stride must be >= 1");
  require(std::isfinite(cl_tau) && cl_tau > 0.0, "cl_tau must be > 0");
}

void bn_modulate(SegNetToy& model, double alpha) { model.modulate(alpha); }

Tensor entropy_loss(const PredictionMap& pred) {
  pred.validate();
  return mean_pixel_entropy(pred.probs);
}

void stochastic_restore(SegNetToy& model, const ModelCheckpoint& source,
                        double p, std::uint64_t seed, int step) {
  if (!(p >= 0.0 && p <= 1.0))
    throw ContractError("restore probability must be in [0,1]");
  if (p == 0.0) return;
  for (std::size_t b = 0; b < model.num_blocks(); ++b) {
    ConvBlock& blk = model.block(b);
    Rng rng(Rng::mix(seed ^ kRestoreTag, static_cast<std::uint64_t>(step), b));
    std::vector<Tensor> weights = {blk.w, blk.b};
    std::vector<std::string> names = {blk.name + ".w", blk.name + ".b"};
    if (blk.has_bn) {
      weights.push_back(blk.gamma);
      weights.push_back(blk.beta);
      names.push_back(blk.name + ".gamma");
      names.push_back(blk.name + ".beta");
    }
    for (std::size_t t = 0; t < weights.size(); ++t) {
      const ModelCheckpoint::Entry* src = source.find(names[t]);
      auto cur = weights[t].values();
      if (src == nullptr || src->data.size() != cur.size())
        throw ContractError("restore layout mismatch at " + names[t]);
      for (std::size_t i = 0; i < cur.size(); ++i)
        if (rng.bernoulli(p)) cur[i] = src->data[i];
    }
  }
}

LossValues eval_loss(SegNetToy& model, const Tensor& image,
                     const AdaptationConfig& cfg, BnMode mode) {
  LossGraph g = build_loss(model, image, cfg, mode);
  return LossValues{g.pos, g.neg, g.total.item()};
}

TttStepResult ttt_step(SegNetToy& model, SgdOptimizer& opt,
                       const ModelCheckpoint& source, const Tensor& image,
                       const AdaptationConfig& cfg, int step_index) {
  TttStepResult out;
  StepRecord& rec = out.record;
  rec.step = step_index;
  rec.loss_pos = rec.loss_neg = rec.loss_total = kNan;

  BnMode mode = BnMode::TrainStats;
  if (cfg.enable_bn_mod) {
    estimate_and_mix(model, image, cfg);
    mode = BnMode::MixedStats;
  }

  // Scored output, before any parameter change.
  out.prediction = model.predict_probs(image, mode);

  if (cfg.enable_ocl) {
    bool ready = false;
    try {
      if (step_index == cfg.inject_fault_at_step)
        throw NumericFault("injected loss fault (test fixture)");
      opt.zero_grad();
      Tape tape;
      TapeScope scope(tape);
      LossGraph g = build_loss(model, image, cfg, mode);
      rec.loss_pos = g.pos;
      rec.loss_neg = g.neg;
      rec.loss_total = g.total.item();
      tape.backward(g.total);
      if (!grads_finite(cfg.affine_only ? model.affine_parameters()
                                        : model.parameters()))
        throw NumericFault("non-finite gradient");
      ready = true;
    } catch (const NumericFault& e) {
      rec.fault = true;
      rec.fault_what = e.what();
      rec.loss_pos = rec.loss_neg = rec.loss_total = kNan;
      opt.zero_grad();
    }
    if (ready) {
      opt.step();
      rec.update_applied = true;
    }
  }

  if (cfg.enable_restore)
    stochastic_restore(model, source, cfg.restore_p, cfg.seed, step_index);
  return out;
}

namespace {

// Runs one annotated sub-stream through the shared episode state.
struct EpisodeState {
  SegNetToy model;
  SgdOptimizer opt;
  ConfusionMatrix accumulated;
  int step = 0;

  EpisodeState(const ModelCheckpoint& source, const AdaptationConfig& cfg)
      : model(model_from_checkpoint(source)),
        opt(cfg.affine_only ? model.affine_parameters() : model.parameters(),
            SgdConfig{cfg.lr, cfg.momentum, cfg.weight_decay}),
        accumulated(source.desc.num_classes) {}
};

void process_item(EpisodeState& st, const ModelCheckpoint& source,
                  const StreamItem& item, const AdaptationConfig& cfg,
                  int round, int condition, ConfusionMatrix& condition_cm,
                  EpisodeLog& log, bool keep_predictions) {
  auto res = ttt_step(st.model, st.opt, source, item.image, cfg, st.step);
  StepRecord rec = res.record;
  rec.round = round;
  rec.condition = condition;

  const int C = source.desc.num_classes;
  std::vector<int> pred = argmax_channel(res.prediction);
  ConfusionMatrix cm(C);
  cm.add(item.labels, pred);
  rec.miou_image = miou(cm);
  st.accumulated.merge(cm);
  condition_cm.merge(cm);
  rec.miou_accumulated = miou(st.accumulated);
  rec.class_ratio = class_ratio(pred, C);

  log.records.push_back(std::move(rec));
  if (keep_predictions) log.predictions.push_back(std::move(pred));
  ++st.step;
}

}  // namespace

EpisodeLog run_episode(const ModelCheckpoint& source, const Stream& stream,
                       const AdaptationConfig& cfg, bool keep_predictions) {
  cfg.validate();
  EpisodeState st(source, cfg);
  EpisodeLog log;
  log.num_classes = source.desc.num_classes;
  std::map<int, ConfusionMatrix> by_condition;
  for (const StreamItem& item : stream) {
    auto it = by_condition.try_emplace(item.condition, source.desc.num_classes)
                  .first;
    process_item(st, source, item, cfg, 0, item.condition, it->second, log,
                 keep_predictions);
  }
  for (const auto& [condition, cm] : by_condition)
    log.table.push_back({0, condition, miou(cm)});
  return log;
}

EpisodeLog run_continual(const ModelCheckpoint& source,
                         const std::vector<Stream>& streams, int rounds,
                         const AdaptationConfig& cfg, bool keep_predictions) {
  cfg.validate();
  if (rounds < 1) throw ContractError("continual run needs rounds >= 1");
  if (streams.empty())
    throw ContractError("continual run needs at least one condition stream");
  for (const Stream& s : streams)
    if (s.empty())
      throw ContractError("continual condition streams must be nonempty");

  EpisodeState st(source, cfg);
  EpisodeLog log;
  log.num_classes = source.desc.num_classes;
  for (int r = 0; r < rounds; ++r) {
    for (std::size_t s = 0; s < streams.size(); ++s) {
      ConfusionMatrix cm(source.desc.num_classes);
      for (const StreamItem& item : streams[s])
        process_item(st, source, item, cfg, r, static_cast<int>(s), cm, log,
                     keep_predictions);
      log.table.push_back({r, static_cast<int>(s), miou(cm)});
    }
  }
  return log;
}

void EpisodeLog::write_ndjson(std::ostream& os) const {
  for (const StepRecord& r : records) {
    nlohmann::json j;
    j["step"] = r.step;
    j["condition"] = r.condition;
    j["round"] = r.round;
    j["loss_pos"] = r.loss_pos;
    j["loss_neg"] = r.loss_neg;
    j["loss_total"] = r.loss_total;
    j["miou_image"] = r.miou_image;
    j["miou_accumulated"] = r.miou_accumulated;
    j["class_ratio"] = r.class_ratio;
    j["update_applied"] = r.update_applied;
    j["fault"] = r.fault;
    if (r.fault) j["fault_what"] = r.fault_what;
    os << j.dump() << "\n";
  }
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void EpisodeLog::write_csv(std::ostream& os) const {
  os << "step,condition,round,loss_pos,loss_neg,loss_total,miou_image,"
        "miou_accumulated";
  for (int c = 0; c < num_classes; ++c) os << ",class_ratio_" << c;
  os << "\n";
  for (const StepRecord& r : records) {
    os << r.step << "," << r.condition << "," << r.round << ","
       << fmt(r.loss_pos) << "," << fmt(r.loss_neg) << ","
       << fmt(r.loss_total) << "," << fmt(r.miou_image) << ","
       << fmt(r.miou_accumulated);
    for (double v : r.class_ratio) os << "," << fmt(v);
    os << "\n";
  }
}

void EpisodeLog::write_table_csv(std::ostream& os) const {
  os << "round,condition,miou\n";
  for (const TableRow& row : table)
    os << row.round << "," << row.condition << "," << fmt(row.miou) << "\n";
}

std::string EpisodeLog::ndjson() const {
  std::ostringstream os;
  write_ndjson(os);
  return os.str();
}

std::string EpisodeLog::csv() const {
  std::ostringstream os;
  write_csv(os);
  return os.str();
}

}  // namespace tta

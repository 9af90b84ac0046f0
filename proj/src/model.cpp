#include "tta/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "tta/metrics.hpp"
#include "tta/optim.hpp"
#include "tta/rng.hpp"

namespace tta {

namespace {

constexpr double kBnEps = 1e-5;
constexpr char kMagic[8] = {'T', 'T', 'A', 'C', 'K', 'P', 'T', '1'};

Tensor he_normal(Rng& rng, Shape shape, int fan_in) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

SegNetToy::SegNetToy(const ModelDesc& d, std::uint64_t seed) : desc_(d) {
  if (d.width < 2 || d.num_classes < 2 || d.in_channels < 1)
    throw ConfigError("SegNetToy: degenerate architecture");
  if (d.kernel_size != 1 && d.kernel_size != 3 && d.kernel_size != 5)
    throw ConfigError("SegNetToy: kernel_size must be 1, 3, or 5");
  const int w = d.width, k = d.kernel_size;
  const int s2 = d.downsample ? 2 : 1;
  struct Plan {
    const char* name;
    int cin, cout, stride;
    bool up;
  };
  const Plan plan[] = {
      {"enc1", d.in_channels, w, 1, false},
      {"enc2", w, w, s2, false},
      {"enc3", w, 2 * w, 1, false},
      {"enc4", 2 * w, 2 * w, s2, false},
      {"mid", 2 * w, 2 * w, 1, false},
      {"dec1", 2 * w, w, 1, d.downsample},
      {"dec2", w, w, 1, d.downsample},
  };
  Rng rng(Rng::mix(seed, 0x11A0DE1u));
  for (const Plan& p : plan) {
    ConvBlock b;
    b.name = p.name;
    b.stride = p.stride;
    b.pad = (k - 1) / 2;
    b.upsample_before = p.up;
    b.w = he_normal(rng, {p.cout, p.cin, k, k}, p.cin * k * k);
    b.b = Tensor::zeros({p.cout}, true);
    b.has_bn = true;
    b.gamma = Tensor::full({p.cout}, 1.0, true);
    b.beta = Tensor::zeros({p.cout}, true);
    b.bn.mu_train.assign(static_cast<std::size_t>(p.cout), 0.0);
    b.bn.var_train.assign(static_cast<std::size_t>(p.cout), 1.0);
    blocks_.push_back(std::move(b));
  }
  ConvBlock head;
  head.name = "head";
  head.stride = 1;
  head.pad = 0;
  head.w = he_normal(rng, {d.num_classes, w, 1, 1}, w);
  head.b = Tensor::zeros({d.num_classes}, true);
  blocks_.push_back(std::move(head));
}

Tensor SegNetToy::forward(const Tensor& x, BnMode mode) {
  if (x.shape().size() != 4 || x.dim(1) != desc_.in_channels)
    throw ShapeError("SegNetToy::forward: expected [N," +
                     std::to_string(desc_.in_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  if (desc_.downsample && (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0))
    throw ShapeError("SegNetToy::forward: H and W must be divisible by 4");
  Tensor h = x;
  for (ConvBlock& b : blocks_) {
    if (b.upsample_before) h = upsample_nearest_2x(h);
    h = conv2d(h, b.w, b.b, b.stride, b.pad);
    if (!b.has_bn) continue;  // head
    switch (mode) {
      case BnMode::BatchStats:
        h = batchnorm_train(h, b.gamma, b.beta, kBnEps, &b.bn.mu_batch,
                            &b.bn.var_batch);
        break;
      case BnMode::CollectTest:
        h = batchnorm_train(h, b.gamma, b.beta, kBnEps, &b.bn.mu_test,
                            &b.bn.var_test);
        break;
      case BnMode::TrainStats:
        h = batchnorm_fixed(h, b.gamma, b.beta, b.bn.mu_train, b.bn.var_train,
                            kBnEps);
        break;
      case BnMode::MixedStats:
        if (!b.bn.has_mixed())
          throw ContractError("SegNetToy: mixed stats not modulated for " +
                              b.name);
        h = batchnorm_fixed(h, b.gamma, b.beta, b.bn.mu_mixed, b.bn.var_mixed,
                            kBnEps);
        break;
    }
    h = relu(h);
  }
  return h;
}

Tensor SegNetToy::predict_probs(const Tensor& image, BnMode mode) {
  if (mode != BnMode::TrainStats && mode != BnMode::MixedStats)
    throw ContractError("predict_probs: inference needs fixed statistics");
  if (Tape::active())
    throw ContractError("predict_probs: not meant to run under a tape");
  if (image.shape().size() != 3)
    throw ShapeError("predict_probs: expected [C,H,W], got " +
                     shape_str(image.shape()));
  for (double v : image.values())
    if (v < -1e-9 || v > 1.0 + 1e-9)
      throw ContractError("predict_probs: image values must lie in [0,1]");
  std::vector<Tensor> one = {image};
  Tensor logits = forward(stack_images(one), mode);
  Tensor probs = softmax(logits, 1);
  return reshape(probs, {logits.dim(1), logits.dim(2), logits.dim(3)});
}

void SegNetToy::estimate_test_stats(const Tensor& batch) {
  if (Tape::active())
    throw ContractError("estimate_test_stats: must run without a tape");
  (void)forward(batch, BnMode::CollectTest);
  for (const ConvBlock& b : blocks_)
    if (b.has_bn && b.bn.mu_test.empty())
      throw ContractError("estimate_test_stats: empty activation in " +
                          b.name);
}

void SegNetToy::modulate(double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw ConfigError("modulate: alpha must be in [0,1]");
  for (ConvBlock& b : blocks_) {
    if (!b.has_bn) continue;
    BNLayerState& st = b.bn;
    if (!st.has_test())
      throw ContractError("modulate: test stats missing for " + b.name);
    const std::size_t C = st.mu_train.size();
    st.mu_mixed.resize(C);
    st.var_mixed.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      st.mu_mixed[c] = alpha * st.mu_train[c] + (1.0 - alpha) * st.mu_test[c];
      st.var_mixed[c] =
          alpha * st.var_train[c] + (1.0 - alpha) * st.var_test[c];
    }
    st.alpha = alpha;
  }
}

void SegNetToy::clear_test_stats() {
  for (ConvBlock& b : blocks_) {
    b.bn.mu_test.clear();
    b.bn.var_test.clear();
    b.bn.mu_mixed.clear();
    b.bn.var_mixed.clear();
  }
}

void SegNetToy::update_train_stats(double momentum) {
  if (momentum <= 0.0 || momentum > 1.0)
    throw ConfigError("update_train_stats: momentum must be in (0,1]");
  for (ConvBlock& b : blocks_) {
    if (!b.has_bn) continue;
    BNLayerState& st = b.bn;
    if (st.mu_batch.empty())
      throw ContractError("update_train_stats: no batch statistics captured");
    for (std::size_t c = 0; c < st.mu_train.size(); ++c) {
      st.mu_train[c] =
          (1.0 - momentum) * st.mu_train[c] + momentum * st.mu_batch[c];
      st.var_train[c] =
          (1.0 - momentum) * st.var_train[c] + momentum * st.var_batch[c];
    }
  }
}

std::vector<Tensor> SegNetToy::parameters() const {
  std::vector<Tensor> out;
  for (const ConvBlock& b : blocks_) {
    out.push_back(b.w);
    out.push_back(b.b);
    if (b.has_bn) {
      out.push_back(b.gamma);
      out.push_back(b.beta);
    }
  }
  return out;
}

std::vector<Tensor> SegNetToy::affine_parameters() const {
  std::vector<Tensor> out;
  for (const ConvBlock& b : blocks_)
    if (b.has_bn) {
      out.push_back(b.gamma);
      out.push_back(b.beta);
    }
  return out;
}

std::size_t SegNetToy::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : parameters()) n += p.size();
  return n;
}

// ------------------------------------------------------------ checkpoint ---

const ModelCheckpoint::Entry* ModelCheckpoint::find(
    const std::string& name) const {
  for (const Entry& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

ModelCheckpoint snapshot(const SegNetToy& model, double source_miou) {
  ModelCheckpoint ck;
  ck.desc = model.desc();
  ck.source_miou = source_miou;
  auto put = [&ck](const std::string& name, std::span<const double> v) {
    ck.entries.push_back({name, {v.begin(), v.end()}});
  };
  for (std::size_t i = 0; i < model.num_blocks(); ++i) {
    const ConvBlock& b = model.block(i);
    put(b.name + ".w", b.w.values());
    put(b.name + ".b", b.b.values());
    if (b.has_bn) {
      put(b.name + ".gamma", b.gamma.values());
      put(b.name + ".beta", b.beta.values());
      put(b.name + ".mu_train", b.bn.mu_train);
      put(b.name + ".var_train", b.bn.var_train);
    }
  }
  return ck;
}

void restore(SegNetToy& model, const ModelCheckpoint& ckpt) {
  if (!(model.desc() == ckpt.desc))
    throw ContractError("restore: architecture descriptor mismatch");
  std::size_t idx = 0;
  auto take = [&](const std::string& name,
                  std::size_t size) -> const std::vector<double>& {
    if (idx >= ckpt.entries.size())
      throw ContractError("restore: checkpoint too short at " + name);
    const ModelCheckpoint::Entry& e = ckpt.entries[idx++];
    if (e.name != name || e.data.size() != size)
      throw ContractError("restore: layout mismatch at " + name);
    return e.data;
  };
  for (std::size_t i = 0; i < model.num_blocks(); ++i) {
    ConvBlock& b = model.block(i);
    auto copy_into = [&](Tensor& t, const std::string& name) {
      const std::vector<double>& src = take(name, t.size());
      std::copy(src.begin(), src.end(), t.values().begin());
    };
    copy_into(b.w, b.name + ".w");
    copy_into(b.b, b.name + ".b");
    if (b.has_bn) {
      copy_into(b.gamma, b.name + ".gamma");
      copy_into(b.beta, b.name + ".beta");
      b.bn.mu_train = take(b.name + ".mu_train", b.bn.mu_train.size());
      b.bn.var_train = take(b.name + ".var_train", b.bn.var_train.size());
    }
  }
  if (idx != ckpt.entries.size())
    throw ContractError("restore: unused checkpoint entries");
}

SegNetToy model_from_checkpoint(const ModelCheckpoint& ckpt) {
  SegNetToy model(ckpt.desc, 0);
  restore(model, ckpt);
  return model;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  nlohmann::json header = {
      {"version", 1},
      {"desc",
       {{"in_channels", ckpt.desc.in_channels},
        {"num_classes", ckpt.desc.num_classes},
        {"width", ckpt.desc.width},
        {"kernel_size", ckpt.desc.kernel_size},
        {"downsample", ckpt.desc.downsample}}},
      {"source_miou", ckpt.source_miou},
  };
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : ckpt.entries)
    entries.push_back({{"name", e.name}, {"count", e.data.size()}});
  header["entries"] = entries;
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof kMagic);
  const std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& e : ckpt.entries)
    f.write(reinterpret_cast<const char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  if (!f) throw ConfigError("save_checkpoint: write failed for " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw ConfigError("load_checkpoint: " + path + " is not a checkpoint");
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw ConfigError("load_checkpoint: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("version").get<int>() != 1)
    throw ConfigError("load_checkpoint: unsupported version");

  ModelCheckpoint ck;
  const auto& d = header.at("desc");
  ck.desc.in_channels = d.at("in_channels").get<int>();
  ck.desc.num_classes = d.at("num_classes").get<int>();
  ck.desc.width = d.at("width").get<int>();
  ck.desc.kernel_size = d.at("kernel_size").get<int>();
  ck.desc.downsample = d.at("downsample").get<bool>();
  ck.source_miou = header.at("source_miou").get<double>();
  for (const auto& e : header.at("entries")) {
    ModelCheckpoint::Entry entry;
    entry.name = e.at("name").get<std::string>();
    entry.data.resize(e.at("count").get<std::size_t>());
    f.read(reinterpret_cast<char*>(entry.data.data()),
           static_cast<std::streamsize>(entry.data.size() * sizeof(double)));
    if (!f) throw ConfigError("load_checkpoint: truncated payload in " + path);
    ck.entries.push_back(std::move(entry));
  }
  return ck;
}

// --------------------------------------------------------------- training ---

PretrainReport pretrain(SegNetToy& model, const std::vector<Sample>& data,
                        const PretrainConfig& cfg) {
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  if (cfg.epochs < 0 || cfg.batch_size < 1)
    throw ConfigError("pretrain: invalid epochs/batch_size");
  SgdOptimizer opt(model.parameters(),
                   {cfg.lr, cfg.momentum, cfg.weight_decay});
  Rng order_rng(Rng::mix(cfg.seed, 0x0DDE7u));
  const std::size_t n = data.size();
  const std::size_t HW = data[0].labels.size();

  PretrainReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i)
      std::swap(idx[i - 1], idx[order_rng.uniform_int(i)]);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor> imgs;
      std::vector<int> labels;
      labels.reserve((stop - start) * HW);
      for (std::size_t i = start; i < stop; ++i) {
        imgs.push_back(data[idx[i]].image);
        labels.insert(labels.end(), data[idx[i]].labels.begin(),
                      data[idx[i]].labels.end());
      }
      Tensor batch = stack_images(imgs);

      opt.zero_grad();
      double loss_val = 0.0;
      {
        Tape tape;
        TapeScope scope(tape);
        Tensor logits = model.forward(batch, BnMode::BatchStats);
        Tensor loss = cross_entropy_with_logits(logits, labels);
        loss_val = loss.item();
        tape.backward(loss);
      }
      if (!std::isfinite(loss_val))
        throw NumericFault("pretrain: training loss diverged");
      opt.step();
      model.update_train_stats(cfg.bn_momentum);
      loss_sum += loss_val;
      ++batches;
    }
    report.epoch_loss.push_back(loss_sum / batches);
  }
  report.source_miou = evaluate_miou(model, data, BnMode::TrainStats);
  return report;
}

double evaluate_miou(SegNetToy& model, const std::vector<Sample>& data,
                     BnMode mode) {
  if (data.empty()) throw ContractError("evaluate_miou: empty dataset");
  ConfusionMatrix cm(model.desc().num_classes);
  for (const Sample& s : data) {
    Tensor probs = model.predict_probs(s.image, mode);
    std::vector<int> pred = argmax_channel(probs);
    cm.add(s.labels, pred);
  }
  return miou(cm);
}

}  // namespace tta

#include "tta/ocl.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "tta/error.hpp"

namespace tta {

namespace {

std::string shape_str_local(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Both maps must be [C,H,W] with identical extents after realignment.
void check_pairable(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape() != b.shape())
    throw ContractError("prediction maps not pairable: " +
                        shape_str_local(a.shape()) + " vs " +
                        shape_str_local(b.shape()));
}

// Mean cosine similarity over ordered pixel pairs (i != j) of one view's
// sampled rows: the full Gram matrix of the normalized rows with the
// diagonal (self-similarity, identically 1) subtracted back out.
Tensor offdiag_mean(const Tensor& rows) {
  const int R = rows.dim(0);
  if (R < 2)
    throw ContractError("negative term needs >= 2 sampled pixels, got " +
                        std::to_string(R));
  Tensor gram = matmul(rows, transpose(rows));
  std::vector<std::pair<int, int>> diag(R);
  for (int r = 0; r < R; ++r) diag[r] = {r, r};
  Tensor trace = gather_weighted_sum(gram, diag, std::vector<double>(R, 1.0));
  return scale(sub(sum(gram), trace),
               1.0 / (static_cast<double>(R) * (R - 1)));
}

Tensor sampled_rows(const Tensor& map, int stride) {
  return l2_normalize_rows(pixels_to_rows(map, 0, stride));
}

}  // namespace

Tensor PredictionMap::aligned() const {
  return view_tag == ViewTag::Flipped ? flip_w(probs) : probs;
}

void PredictionMap::validate(double tol) const {
  if (!probs.defined() || probs.shape().size() != 3)
    throw ContractError("prediction map must be [C,H,W]");
  const int C = probs.dim(0), H = probs.dim(1), W = probs.dim(2);
  const double* p = probs.values().data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (std::size_t px = 0; px < plane; ++px) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      const double v = p[c * plane + px];
      if (v < 0.0)
        throw ContractError("prediction map has a negative probability");
      s += v;
    }
    if (std::abs(s - 1.0) > tol)
      throw ContractError("prediction map pixel sums to " + std::to_string(s) +
                          ", not 1");
  }
}

void PairSampling::validate() const {
  if (stride < 1 || pos_stride < 1)
    throw ContractError("sampling strides must be >= 1");
}

double cosine_sim(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty())
    throw ContractError("cosine_sim: length mismatch");
  double dot = 0.0, pp = 0.0, qq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * q[i];
    pp += p[i] * p[i];
    qq += q[i] * q[i];
  }
  if (pp == 0.0 || qq == 0.0)
    throw ContractError("cosine_sim: zero vector");
  return dot / (std::sqrt(pp) * std::sqrt(qq));
}

Tensor positive_loss(const PredictionMap& view1, const PredictionMap& view2,
                     const PairSampling& sampling) {
  sampling.validate();
  view1.validate();
  view2.validate();
  Tensor a = view1.aligned();
  Tensor b = view2.aligned();
  check_pairable(a, b);
  Tensor ra = sampled_rows(a, sampling.pos_stride);
  Tensor rb = sampled_rows(b, sampling.pos_stride);
  return scale(sum(mul(ra, rb)), -1.0 / ra.dim(0));
}

Tensor negative_loss(const PredictionMap& view1, const PredictionMap& view2,
                     const PairSampling& sampling) {
  sampling.validate();
  view1.validate();
  view2.validate();
  Tensor a = view1.aligned();
  Tensor b = view2.aligned();
  check_pairable(a, b);
  return scale(add(offdiag_mean(sampled_rows(a, sampling.stride)),
                   offdiag_mean(sampled_rows(b, sampling.stride))),
               0.5);
}

Tensor ocl_total(const PredictionMap& view1, const PredictionMap& view2,
                 double lambda_pos, double lambda_neg,
                 const PairSampling& sampling) {
  if (!std::isfinite(lambda_pos) || !std::isfinite(lambda_neg) ||
      lambda_pos < 0.0 || lambda_neg < 0.0)
    throw ConfigError("loss weights must be finite and nonnegative");
  return add(scale(positive_loss(view1, view2, sampling), lambda_pos),
             scale(negative_loss(view1, view2, sampling), lambda_neg));
}

namespace {

void check_cl_instance(const Tensor& points,
                       const std::vector<std::vector<int>>& positives) {
  if (points.shape().size() != 2)
    throw ContractError("contrastive instance must be [N,C], got " +
                        shape_str_local(points.shape()));
  const int N = points.dim(0);
  if (N < 2) throw ContractError("contrastive instance needs >= 2 points");
  if (positives.size() != static_cast<std::size_t>(N))
    throw ContractError("one positive set per anchor required");
  for (int i = 0; i < N; ++i) {
    if (positives[i].empty())
      throw ContractError("anchor " + std::to_string(i) + " has no positive");
    for (int j : positives[i])
      if (j < 0 || j >= N || j == i)
        throw ContractError("bad positive index " + std::to_string(j) +
                            " for anchor " + std::to_string(i));
  }
}

}  // namespace

Tensor reference_cl(const Tensor& points,
                    const std::vector<std::vector<int>>& positives,
                    double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw ContractError("temperature must be > 0");
  check_cl_instance(points, positives);
  const int N = points.dim(0);

  std::size_t pair_count = 0;
  for (const auto& ps : positives) pair_count += ps.size();
  const double inv_pairs = 1.0 / static_cast<double>(pair_count);

  Tensor rows = l2_normalize_rows(points);
  Tensor sims = matmul(rows, transpose(rows));
  Tensor lse = masked_row_logsumexp(sims, 1.0 / tau);

  // loss = sum_i (|P_i|/P) lse_i - (1/tau) sum_{i, j in P_i} sims_ij / P
  std::vector<std::pair<int, int>> lse_entries(N);
  std::vector<double> lse_w(N);
  std::vector<std::pair<int, int>> pos_entries;
  pos_entries.reserve(pair_count);
  for (int i = 0; i < N; ++i) {
    lse_entries[i] = {i, 0};
    lse_w[i] = static_cast<double>(positives[i].size()) * inv_pairs;
    for (int j : positives[i]) pos_entries.emplace_back(i, j);
  }
  Tensor lse_part = gather_weighted_sum(reshape(lse, {N, 1}), lse_entries,
                                        lse_w);
  Tensor pos_part = gather_weighted_sum(
      sims, pos_entries, std::vector<double>(pair_count, inv_pairs));
  return sub(lse_part, scale(pos_part, 1.0 / tau));
}

TemperatureLimitReport verify_temperature_limit(
    const Tensor& points, const std::vector<std::vector<int>>& positives,
    const std::vector<double>& tau_schedule) {
  check_cl_instance(points, positives);
  if (tau_schedule.empty())
    throw ContractError("temperature schedule is empty");
  for (std::size_t k = 0; k < tau_schedule.size(); ++k) {
    if (!(tau_schedule[k] > 0.0))
      throw ContractError("temperatures must be > 0");
    if (k && !(tau_schedule[k] > tau_schedule[k - 1]))
      throw ContractError("temperature schedule must increase");
  }
  const int N = points.dim(0);
  const int C = points.dim(1);
  const double* P = points.values().data();
  auto row = [&](int i) {
    return std::span<const double>(P + static_cast<std::size_t>(i) * C,
                                   static_cast<std::size_t>(C));
  };

  // Two-term target via plain loops, independent of the graph ops.
  double pos_sum = 0.0;
  std::size_t pos_n = 0;
  for (int i = 0; i < N; ++i)
    for (int j : positives[i]) {
      pos_sum += cosine_sim(row(i), row(j));
      ++pos_n;
    }
  double neg_sum = 0.0;
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < N; ++k)
      if (k != i) neg_sum += cosine_sim(row(i), row(k));
  TemperatureLimitReport rep;
  rep.two_term = -(pos_sum / static_cast<double>(pos_n)) +
                 neg_sum / (static_cast<double>(N) * (N - 1));

  const double log_nm1 = std::log(static_cast<double>(N - 1));
  rep.rows.reserve(tau_schedule.size());
  for (double tau : tau_schedule) {
    TemperatureLimitReport::Row r;
    r.tau = tau;
    r.cl = reference_cl(points, positives, tau).item();
    r.residual = std::abs(tau * (r.cl - log_nm1) - rep.two_term);
    rep.rows.push_back(r);
  }
  rep.residual_decays = true;
  for (std::size_t k = 1; k < rep.rows.size(); ++k) {
    const double prev = rep.rows[k - 1].residual;
    const double cur = rep.rows[k].residual;
    if (!(cur < prev || (cur == 0.0 && prev == 0.0)))
      rep.residual_decays = false;
  }
  return rep;
}

}  // namespace tta

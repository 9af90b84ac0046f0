#pragma once

#include <span>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

enum class ViewTag { Original, Flipped };

// One augmented view's network output: a channelwise probability map plus the
// augmentation it was produced under. aligned() undoes a horizontal flip
// (differentiably) so that pixel index i names the same image location in
// both views of a pair.
struct PredictionMap {
  Tensor probs;  // [C,H,W]; every pixel's channel vector lies on the simplex
  ViewTag view_tag = ViewTag::Original;

  Tensor aligned() const;
  // Every channel vector must be nonnegative and sum to 1 within tol.
  void validate(double tol = 1e-9) const;
};

// Pixel subsampling grids. The pairwise (negative) term runs on a strided
// grid because its cost is quadratic in the sample count; the positive term
// defaults to every pixel. Both grids must keep at least 2 pixels for the
// pairwise term to be defined.
struct PairSampling {
  int stride = 8;      // grid stride for the pairwise term
  int pos_stride = 1;  // grid stride for the positive term (1 = full map)
  void validate() const;
};

// p.q / (|p||q|), in [-1,1]; throws ContractError on a zero vector.
double cosine_sim(std::span<const double> p, std::span<const double> q);

// -mean_i cos(v1_i, v2_i) over the positive grid, after realignment.
// Differentiable through both maps; range [-1, 1].
Tensor positive_loss(const PredictionMap& view1, const PredictionMap& view2,
                     const PairSampling& sampling = {});

// Mean cosine similarity over distinct sampled pixel pairs within each view,
// averaged across the two views. Pairs are enumerated ordered (i != j); by
// symmetry this equals the unordered-pair mean. Range [-1, 1].
Tensor negative_loss(const PredictionMap& view1, const PredictionMap& view2,
                     const PairSampling& sampling = {});

// lambda_pos * positive_loss + lambda_neg * negative_loss. Weights must be
// finite and nonnegative.
Tensor ocl_total(const PredictionMap& view1, const PredictionMap& view2,
                 double lambda_pos = 3.0, double lambda_neg = 1.0,
                 const PairSampling& sampling = {});

// Full InfoNCE-style contrastive loss over a point set, in the output space:
//   -E_{i, j in positives[i]} log( exp(cos_ij/tau) / sum_{k!=i} exp(cos_ik/tau) )
// log-sum-exp stabilized; differentiable w.r.t. points. Every anchor needs
// at least one positive, indices must be in range and distinct from the
// anchor, and tau must be > 0.
Tensor reference_cl(const Tensor& points,  // [N,C], N >= 2, nonzero rows
                    const std::vector<std::vector<int>>& positives,
                    double tau);

// As tau grows, tau * (reference_cl - log(N-1)) approaches the unweighted
// two-term loss -E_pos cos + E_{i!=k} cos on the same instance, with the
// residual shrinking like 1/tau. verify_temperature_limit evaluates the
// residual across a schedule and reports whether it decays; ties are accepted
// only at exactly zero (fully symmetric instances cancel at every tau).
struct TemperatureLimitReport {
  struct Row {
    double tau = 0.0;
    double cl = 0.0;        // reference_cl at this tau
    double residual = 0.0;  // |tau*(cl - log(N-1)) - two_term|
  };
  std::vector<Row> rows;
  double two_term = 0.0;  // -E_pos cos + E_{i!=k} cos, plain-loop arithmetic
  bool residual_decays = false;
};
TemperatureLimitReport verify_temperature_limit(
    const Tensor& points, const std::vector<std::vector<int>>& positives,
    const std::vector<double>& tau_schedule);

}  // namespace tta

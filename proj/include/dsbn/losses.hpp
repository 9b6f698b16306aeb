#pragma once

// Adaptation objectives used to train the stage-1 pseudo-labeler.
//
// MSTN: source cross-entropy + lambda * (domain-adversarial + semantic
// matching of per-class feature centroids).
// CPUA: class-weighted source cross-entropy + lambda * class-weighted
// adversarial loss on class-probability vectors.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dsbn/network.hpp"
#include "dsbn/tensor.hpp"

namespace dsbn {

// Network outputs on one labeled source mini-batch.
struct SourceView {
  Tensor features;
  Tensor logits;
  std::vector<int> labels;
};

// Network outputs on one target mini-batch. pseudo_labels may be empty; losses
// that need them then take the argmax of `logits`.
struct TargetView {
  Tensor features;
  Tensor logits;
  std::vector<int> pseudo_labels;
};

// Per-class running centroids for both domains, blended by EMA.
struct CentroidBank {
  std::size_t classes = 0;
  std::size_t dim = 0;
  double theta = 0.7;           // weight kept from the stored centroid
  std::vector<double> source;   // classes x dim
  std::vector<double> target;   // classes x dim

  // Zero-initialized bank.
  static CentroidBank fresh(std::size_t classes, std::size_t dim,
                            double theta = 0.7);
};

// Class frequencies p(c) = counts[c] / total.
struct ClassPrior {
  std::vector<std::size_t> counts;
  std::size_t total = 0;

  static ClassPrior from_labels(std::span<const int> labels, std::size_t classes);
  double fraction(std::size_t c) const;
  double max_fraction() const;
};

// max_c p_S(c) / p_S(y). Throws DegeneratePriorError if counts[y] == 0.
double cpua_source_weights(const ClassPrior& prior, int y);
// Same formula over the pseudo-label prior.
double cpua_target_weights(const ClassPrior& prior, int pseudo_y);
// Weight of every label in `labels` under `prior`.
std::vector<double> class_weights(const ClassPrior& prior, std::span<const int> labels);

// Argmax labels of each row of `logits`.
std::vector<int> argmax_labels(const Tensor& logits);

// BCE(D(R(feat_s)), 1) + BCE(D(R(feat_t)), 0), each averaged over its batch,
// where R is gradient reversal with the given scale.
Tensor domain_adversarial_loss(const Tensor& feat_s, const Tensor& feat_t,
                               Network& discriminator, double scale);
// As above with per-example weights inside each per-domain mean.
Tensor domain_adversarial_loss(const Tensor& feat_s, const Tensor& feat_t,
                               Network& discriminator, double scale,
                               std::span<const double> weights_s,
                               std::span<const double> weights_t);

// Updates `bank` with the batch centroids of classes present in each batch
// (theta * stored + (1 - theta) * batch) and returns
// sum_c ||bank.source[c] - bank.target[c]||^2. Gradients flow through the
// batch-centroid part; stored values are constants.
Tensor semantic_matching_loss(const Tensor& feat_s, std::span<const int> labels_s,
                              const Tensor& feat_t,
                              std::span<const int> pseudo_labels_t,
                              CentroidBank& bank);

struct MstnLoss {
  Tensor total;
  Tensor classification;
  Tensor adversarial;
  Tensor semantic;
};

MstnLoss mstn_total_loss(const SourceView& source, const TargetView& target,
                         Network& discriminator, CentroidBank& bank,
                         double lambda, double grl_scale = 1.0);

struct CpuaPriors {
  ClassPrior source;
  ClassPrior target;  // over pseudo-labels
};

struct CpuaLoss {
  Tensor total;
  Tensor classification;
  Tensor adversarial;
};

// The discriminator consumes softmax(logits). Target weights use
// target.pseudo_labels (or the logits argmax if empty).
CpuaLoss cpua_total_loss(const SourceView& source, const TargetView& target,
                         const CpuaPriors& priors, Network& discriminator,
                         double lambda, double grl_scale = 1.0);

// L_cls(S_i) + L_align(S_i, T) for source i.
using PerSourceLoss =
    std::function<Tensor(const SourceView& source, std::size_t source_index,
                         const TargetView& target)>;

// (1/|sources|) * sum_i per_source(sources[i], i, target). Throws ConfigError
// on an empty source list.
Tensor multi_source_total_loss(std::span<const SourceView> sources,
                               const TargetView& target,
                               const PerSourceLoss& per_source);

}  // namespace dsbn

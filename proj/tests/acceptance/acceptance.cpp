// Acceptance checks. Prints one PASS/FAIL line per criterion; exits nonzero if
// any criterion fails.
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dsbn/checkpoint.hpp"
#include "dsbn/config.hpp"
#include "dsbn/harness.hpp"
#include "dsbn/losses.hpp"
#include "dsbn/network.hpp"
#include "dsbn/normalization.hpp"
#include "dsbn/pipeline.hpp"
#include "dsbn/schedule.hpp"
#include "gradcheck.hpp"

using namespace dsbn;
using namespace dsbn::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects the outcome of one criterion.
struct Verdict {
  bool ok = true;
  std::vector<std::string> notes;
  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes.push_back("failed: " + what);
    }
  }
  void info(const std::string& text) { notes.push_back(text); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<double> combine(const std::vector<double>& a, double ka, const std::vector<double>& b,
                            double kb) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = ka * a[i] + kb * b[i];
  return out;
}

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Normal values kept away from zero so ReLU kinks stay outside the FD stencil.
std::vector<double> off_kink(std::size_t n, std::mt19937_64& rng) {
  auto v = normal_values(n, rng);
  for (auto& x : v)
    if (std::abs(x) < 0.05) x = x < 0 ? -0.05 : 0.05;
  return v;
}

// square_sum(y R): a nonlinear scalar readout of a rank-2 tensor.
Tensor readout(const Tensor& y, const Tensor& r) { return scale(square_sum(matmul(y, r)), 0.5); }

Network small_discriminator(std::size_t in, std::mt19937_64& rng) {
  MlpSpec spec;
  spec.input_dim = in;
  spec.hidden = {5};
  spec.output_dim = 1;
  spec.batch_norm = false;
  return make_mlp(spec, rng);
}

// True if every ReLU input of `net` on `x` (train-mode statistics, routed to
// `domain`) is at least `margin` away from zero.
bool clear_of_kinks(const Network& net, const Tensor& x, DomainId domain, double margin) {
  Tensor h = x.detach();
  for (const Layer& layer : net.layers()) {
    if (const auto* lin = std::get_if<Linear>(&layer)) {
      h = affine_transform(h, lin->weight.tensor.detach(), lin->bias.tensor.detach());
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      h = bn_forward_train(h, bn->state.clone()).output.detach();
    } else if (const auto* ds = std::get_if<DomainBatchNorm>(&layer)) {
      h = bn_forward_train(h, ds->layer.branch(domain).clone()).output.detach();
    } else {
      for (double e : h.values())
        if (std::abs(e) < margin) return false;
      h = relu(h);
    }
  }
  return true;
}

// Weighted discriminator BCE without reversal, computed from raw scores.
double adversarial_oracle(const Network& d, const Tensor& fs, const Tensor& ft,
                          const std::vector<double>& ws, const std::vector<double>& wt) {
  const auto ss = values_of(d.evaluate(fs.detach(), DomainId::source(0)).output);
  const auto st = values_of(d.evaluate(ft.detach(), DomainId::source(0)).output);
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < ss.size(); ++i) a += ws[i] * softplus(-ss[i]);
  for (std::size_t i = 0; i < st.size(); ++i) b += wt[i] * softplus(st[i]);
  return a / static_cast<double>(ss.size()) + b / static_cast<double>(st.size());
}

// Squared centroid distance after an EMA blend, written out directly.
double semantic_oracle(const CentroidBank& bank0, const Tensor& fs, const std::vector<int>& ys,
                       const Tensor& ft, const std::vector<int>& yt) {
  const std::size_t c = bank0.classes, d = bank0.dim;
  auto blend = [&](std::vector<double> stored, const Tensor& f, const std::vector<int>& y) {
    const auto v = f.values();
    for (std::size_t k = 0; k < c; ++k) {
      std::vector<double> acc(d, 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (static_cast<std::size_t>(y[i]) != k) continue;
        ++n;
        for (std::size_t j = 0; j < d; ++j) acc[j] += v[i * d + j];
      }
      if (n == 0) continue;
      for (std::size_t j = 0; j < d; ++j)
        stored[k * d + j] = bank0.theta * stored[k * d + j] +
                            (1.0 - bank0.theta) * acc[j] / static_cast<double>(n);
    }
    return stored;
  };
  const auto s = blend(bank0.source, fs, ys);
  const auto t = blend(bank0.target, ft, yt);
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) total += (s[i] - t[i]) * (s[i] - t[i]);
  return total;
}

// Tracks the worst FD error per named check and the number of instances.
struct GradSuite {
  std::map<std::string, std::pair<int, double>> results;
  void record(const std::string& name, double err) {
    auto& [count, worst] = results[name];
    ++count;
    worst = std::max(worst, std::isnan(err) ? INFINITY : err);
  }
  void check_leaf(const std::string& name, const std::function<Tensor()>& f, const Tensor& leaf,
                  const std::vector<double>& expected) {
    record(name, max_relative_error(analytic_gradient(f, leaf), expected));
  }
};

constexpr int kInstances = 20;
constexpr double kGradTol = 1e-5;

void op_gradients(GradSuite& suite, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  for (int t = 0; t < kInstances; ++t) {
    const std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
    Tensor a = random_parameter({n, k}, rng), b = random_parameter({n, k}, rng);
    Tensor w = random_parameter({k, m}, rng), bias = random_parameter({m}, rng);
    const Tensor r = Tensor::constant({m, 2}, normal_values(m * 2, rng));
    const Tensor rk = Tensor::constant({k, 2}, normal_values(k * 2, rng));

    auto all = [&](const std::string& name, const std::function<Tensor()>& f,
                   std::vector<Tensor> leaves) {
      suite.record(name, gradient_error(f, leaves));
    };
    all("affine_transform", [&] { return readout(affine_transform(a, w, bias), r); }, {a, w, bias});
    all("matmul", [&] { return readout(matmul(a, w), r); }, {a, w});
    all("add", [&] { return readout(add(a, b), rk); }, {a, b});
    all("sub", [&] { return readout(sub(a, b), rk); }, {a, b});
    const double factor = normal_values(1, rng)[0];
    all("scale", [&] { return readout(scale(a, factor), rk); }, {a});
    all("sum", [&] { return sum(a); }, {a});
    all("mean", [&] { return mean(a); }, {a});
    all("square_sum", [&] { return square_sum(a); }, {a});
    Tensor z = Tensor::parameter({n, k}, off_kink(n * k, rng));
    all("relu", [&] { return readout(relu(z), rk); }, {z});
    all("softmax", [&] { return readout(softmax(a), rk); }, {a});

    // Reversal: forward is the identity, so the expected gradient is -scale
    // times the finite difference of the same readout without it.
    const double rs = std::abs(factor) + 0.1;
    suite.check_leaf("grad_reverse", [&] { return readout(grad_reverse(a, rs), rk); }, a,
                     combine(numeric_gradient([&] { return readout(a, rk).item(); }, a), -rs,
                             std::vector<double>(a.size()), 0.0));

    const auto labels = random_labels(n, k, rng);
    std::uniform_real_distribution<double> wd(0.5, 3.0);
    std::vector<double> weights(n);
    for (auto& x : weights) x = wd(rng);
    all("softmax_cross_entropy", [&] { return softmax_cross_entropy(a, labels); }, {a});
    all("weighted_softmax_cross_entropy",
        [&] { return weighted_softmax_cross_entropy(a, labels, weights); }, {a});
    Tensor s = random_parameter({n, 1}, rng, 2.0);
    const auto bits = random_labels(n, 2, rng);
    all("sigmoid_bce", [&] { return sigmoid_bce(s, bits); }, {s});
    all("weighted_sigmoid_bce", [&] { return weighted_sigmoid_bce(s, bits, weights); }, {s});
  }
}

void normalization_gradients(GradSuite& suite, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(3, 6);
  for (int t = 0; t < kInstances; ++t) {
    const std::size_t n = dim(rng), c = dim(rng) - 1;
    Tensor x = random_parameter({n, c}, rng, 2.0);
    BnState st = BnState::identity(c);
    st.gamma.tensor.mutable_values()[0] = 1.7;
    for (auto& v : st.beta.tensor.mutable_values()) v = normal_values(1, rng)[0];
    const Tensor r = Tensor::constant({c, 3}, normal_values(c * 3, rng));
    suite.record("bn_forward_train",
                 gradient_error([&] { return readout(bn_forward_train(x, st).output, r); },
                                {x, st.gamma.tensor, st.beta.tensor}));

    DsbnLayer layer(c);
    for (auto d : domain_set(2)) {
      BnState init = BnState::identity(c);
      for (auto& v : init.gamma.tensor.mutable_values()) v = 1.0 + 0.3 * normal_values(1, rng)[0];
      layer.add_domain_branch(d, init);
    }
    const DomainId routed = domain_set(2)[t % 3];
    auto f = [&] { return readout(layer.forward(x, routed, Mode::kTrain), r); };
    std::vector<Tensor> leaves{x};
    for (auto& [d, b] : layer.branches())
      if (d == routed) leaves.insert(leaves.end(), {b.gamma.tensor, b.beta.tensor});
    suite.record("dsbn_forward", gradient_error(f, leaves));
    // Branches not routed to receive exactly zero gradient.
    double stray = 0.0;
    for (auto& [d, b] : layer.branches()) {
      if (d == routed) continue;
      for (const Tensor& p : {b.gamma.tensor, b.beta.tensor})
        for (double g : analytic_gradient(f, p)) stray = std::max(stray, std::abs(g));
    }
    suite.record("dsbn_forward (other branches)", stray);
  }
}

// Objective built from per-source (source view, target view) pairs. The
// classifier-side reference flips the sign of the adversarial term, which is
// what gradient reversal does to the gradient; the discriminator-side
// reference keeps it.
struct AdaptationCase {
  std::size_t n = 0, c = 0, d = 0;
  double lambda = 0.0, grl = 1.0;
  std::vector<Tensor> fs, ls;
  std::vector<std::vector<int>> ys;
  Tensor ft, lt;
  std::vector<int> yt;
  std::vector<CentroidBank> banks;
  Network disc;

  static AdaptationCase make(std::size_t sources, std::size_t disc_in_from_logits,
                             std::mt19937_64& rng) {
    AdaptationCase k;
    std::uniform_int_distribution<std::size_t> dim(3, 5);
    k.c = dim(rng) - 1;
    k.n = k.c + dim(rng);
    k.d = dim(rng);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    k.lambda = u(rng);
    k.grl = u(rng) + 0.5;
    for (std::size_t s = 0; s < sources; ++s) {
      k.fs.push_back(random_parameter({k.n, k.d}, rng));
      k.ls.push_back(random_parameter({k.n, k.c}, rng));
      k.ys.push_back(covering_labels(k.n, k.c, rng));
      CentroidBank bank = CentroidBank::fresh(k.c, k.d);
      bank.source = normal_values(k.c * k.d, rng);
      bank.target = normal_values(k.c * k.d, rng);
      k.banks.push_back(bank);
    }
    k.ft = random_parameter({k.n, k.d}, rng);
    k.lt = random_parameter({k.n, k.c}, rng);
    // Some target classes may be absent from the batch.
    k.yt = random_labels(k.n, k.c, rng);
    // Redraw the discriminator until no hidden unit sits within the FD
    // stencil of its ReLU kink on these inputs.
    std::vector<Tensor> inputs;
    for (std::size_t s = 0; s < sources; ++s)
      inputs.push_back(disc_in_from_logits ? softmax(k.ls[s].detach()) : k.fs[s]);
    inputs.push_back(disc_in_from_logits ? softmax(k.lt.detach()) : k.ft);
    do {
      k.disc = small_discriminator(disc_in_from_logits ? k.c : k.d, rng);
    } while (!std::ranges::all_of(inputs, [&](const Tensor& x) {
      return clear_of_kinks(k.disc, x, DomainId::source(0), 0.02);
    }));
    return k;
  }

  std::vector<Tensor> classifier_leaves() const {
    std::vector<Tensor> out = fs;
    out.insert(out.end(), ls.begin(), ls.end());
    out.push_back(ft);
    out.push_back(lt);
    return out;
  }
};

Tensor mstn_objective(AdaptationCase& k) {
  std::vector<SourceView> views;
  for (std::size_t s = 0; s < k.fs.size(); ++s) views.push_back({k.fs[s], k.ls[s], k.ys[s]});
  const TargetView target{k.ft, k.lt, k.yt};
  std::vector<CentroidBank> banks = k.banks;
  return multi_source_total_loss(views, target,
                                 [&](const SourceView& sv, std::size_t i, const TargetView& tv) {
                                   return mstn_total_loss(sv, tv, k.disc, banks[i], k.lambda, k.grl)
                                       .total;
                                 });
}

double mstn_reference(const AdaptationCase& k, double adv_sign, bool classifier_side) {
  double total = 0.0;
  const std::vector<double> ones(k.n, 1.0);
  for (std::size_t s = 0; s < k.fs.size(); ++s) {
    const double adv = adversarial_oracle(k.disc, k.fs[s], k.ft, ones, ones);
    if (classifier_side) {
      const double cls = softmax_cross_entropy(k.ls[s].detach(), k.ys[s]).item();
      const double sm = semantic_oracle(k.banks[s], k.fs[s], k.ys[s], k.ft, k.yt);
      total += cls + k.lambda * sm + adv_sign * k.lambda * k.grl * adv;
    } else {
      total += k.lambda * adv;
    }
  }
  return total / static_cast<double>(k.fs.size());
}

void check_adaptation(GradSuite& suite, const std::string& name, AdaptationCase& k,
                      const std::function<Tensor()>& objective,
                      const std::function<double(bool)>& reference) {
  for (const Tensor& leaf : k.classifier_leaves())
    suite.check_leaf(name + " (classifier side)", objective, leaf,
                     numeric_gradient([&] { return reference(true); }, leaf));
  for (const auto& p : k.disc.parameters())
    suite.check_leaf(name + " (discriminator)", objective, p.tensor,
                     numeric_gradient([&] { return reference(false); }, p.tensor));
}

void loss_gradients(GradSuite& suite, std::mt19937_64& rng) {
  for (int t = 0; t < kInstances; ++t) {
    // Semantic matching alone, including classes absent from a batch.
    {
      AdaptationCase k = AdaptationCase::make(1, 0, rng);
      auto f = [&] {
        CentroidBank bank = k.banks[0];
        return semantic_matching_loss(k.fs[0], k.ys[0], k.ft, k.yt, bank);
      };
      for (const Tensor& leaf : {k.fs[0], k.ft})
        suite.check_leaf("semantic_matching_loss", f, leaf, numeric_gradient([&] {
                           return semantic_oracle(k.banks[0], k.fs[0], k.ys[0], k.ft, k.yt);
                         }, leaf));
    }
    // Weighted domain-adversarial loss alone.
    {
      AdaptationCase k = AdaptationCase::make(1, 0, rng);
      std::uniform_real_distribution<double> wd(0.5, 3.0);
      std::vector<double> ws(k.n), wt(k.n);
      for (auto& x : ws) x = wd(rng);
      for (auto& x : wt) x = wd(rng);
      auto f = [&] { return domain_adversarial_loss(k.fs[0], k.ft, k.disc, k.grl, ws, wt); };
      auto oracle = [&] { return adversarial_oracle(k.disc, k.fs[0], k.ft, ws, wt); };
      for (const Tensor& leaf : {k.fs[0], k.ft})
        suite.check_leaf("domain_adversarial_loss (features)", f, leaf,
                         combine(numeric_gradient(oracle, leaf), -k.grl,
                                 std::vector<double>(leaf.size()), 0.0));
      for (const auto& p : k.disc.parameters())
        suite.check_leaf("domain_adversarial_loss (discriminator)", f, p.tensor,
                         numeric_gradient(oracle, p.tensor));
    }
    // MSTN total objective, one source.
    {
      AdaptationCase k = AdaptationCase::make(1, 0, rng);
      check_adaptation(suite, "mstn_total_loss", k, [&] { return mstn_objective(k); },
                       [&](bool cls_side) { return mstn_reference(k, -1.0, cls_side); });
    }
    // Multi-source average of MSTN objectives.
    {
      AdaptationCase k = AdaptationCase::make(2 + t % 2, 0, rng);
      check_adaptation(suite, "multi_source_total_loss", k, [&] { return mstn_objective(k); },
                       [&](bool cls_side) { return mstn_reference(k, -1.0, cls_side); });
    }
    // CPUA: weighted CE plus weighted adversarial loss on class probabilities.
    {
      AdaptationCase k = AdaptationCase::make(1, 1, rng);
      const CpuaPriors priors{ClassPrior::from_labels(k.ys[0], k.c),
                              ClassPrior::from_labels(k.yt, k.c)};
      const auto ws = class_weights(priors.source, k.ys[0]);
      const auto wt = class_weights(priors.target, k.yt);
      auto f = [&] {
        return cpua_total_loss({k.fs[0], k.ls[0], k.ys[0]}, {k.ft, k.lt, k.yt}, priors, k.disc,
                               k.lambda, k.grl)
            .total;
      };
      auto reference = [&](bool cls_side) {
        const double adv = adversarial_oracle(k.disc, softmax(k.ls[0].detach()),
                                              softmax(k.lt.detach()), ws, wt);
        if (!cls_side) return k.lambda * adv;
        return weighted_softmax_cross_entropy(k.ls[0].detach(), k.ys[0], ws).item() -
               k.lambda * k.grl * adv;
      };
      for (const Tensor& leaf : {k.ls[0], k.lt})
        suite.check_leaf("cpua_total_loss (classifier side)", f, leaf,
                         numeric_gradient([&] { return reference(true); }, leaf));
      for (const auto& p : k.disc.parameters())
        suite.check_leaf("cpua_total_loss (discriminator)", f, p.tensor,
                         numeric_gradient([&] { return reference(false); }, p.tensor));
    }
    // Stage-2 objective: source CE plus target CE on pseudo-labels through a
    // DSBN network, differentiated with respect to every parameter.
    {
      MlpSpec spec;
      spec.input_dim = 2;
      spec.hidden = {5, 4};
      spec.output_dim = 3;
      const std::size_t n = 6;
      Network net;
      Tensor xs, xt;
      do {
        net = convert_bn_to_dsbn(make_mlp(spec, rng), domain_set(1));
        for (auto& p : net.parameters())
          for (auto& v : p.tensor.mutable_values()) v += 0.2 * normal_values(1, rng)[0];
        xs = Tensor::constant({n, 2}, normal_values(2 * n, rng));
        xt = Tensor::constant({n, 2}, normal_values(2 * n, rng));
      } while (!clear_of_kinks(net, xs, DomainId::source(0), 5e-3) ||
               !clear_of_kinks(net, xt, DomainId::target(1), 5e-3));
      const auto ys = random_labels(n, 3, rng), yt = random_labels(n, 3, rng);
      auto f = [&] {
        return add(softmax_cross_entropy(net.forward(xs, DomainId::source(0), Mode::kTrain).output, ys),
                   softmax_cross_entropy(net.forward(xt, DomainId::target(1), Mode::kTrain).output, yt));
      };
      std::vector<Tensor> leaves;
      for (const auto& p : net.parameters()) leaves.push_back(p.tensor);
      suite.record("stage-2 network loss", gradient_error(f, leaves));
    }
  }
}

Verdict criterion_gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  GradSuite suite;
  op_gradients(suite, rng);
  normalization_gradients(suite, rng);
  loss_gradients(suite, rng);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  int fewest = std::numeric_limits<int>::max();
  for (const auto& [name, r] : suite.results) {
    worst = std::max(worst, r.second);
    fewest = std::min(fewest, r.first);
    v.require(r.second < kGradTol, name + " rel err " + fmt("%.2e", r.second));
  }
  // Each named check runs once per instance, some more than once per leaf.
  v.require(fewest >= kInstances, "fewer than 20 instances for some check");
  v.require(elapsed < 60.0, "runtime " + fmt("%.1f s", elapsed));
  v.info(std::to_string(suite.results.size()) + " checks, worst rel err " + fmt("%.2e", worst) +
         ", " + fmt("%.1f s", elapsed));
  return v;
}

// ---- BN / DSBN algebra -------------------------------------------------------

Verdict criterion_normalization() {
  Verdict v;
  std::mt19937_64 rng(202);

  // Whitening: per-channel mean ~0 and biased variance var/(var+eps).
  double worst_mean = 0.0, worst_var = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 4 + t % 30, c = 1 + t % 5;
    std::vector<double> x = normal_values(n * c, rng, 1.0 + t);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += 10.0 * static_cast<double>(i % c) - 5.0 * t;
    BnState st = BnState::identity(c);
    const auto y = values_of(bn_forward_train(Tensor::constant({n, c}, x), st).output);
    for (std::size_t j = 0; j < c; ++j) {
      long double mx = 0, my = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mx += x[i * c + j];
        my += y[i * c + j];
      }
      mx /= n;
      my /= n;
      long double vx = 0, vy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        vx += (x[i * c + j] - mx) * (x[i * c + j] - mx);
        vy += (y[i * c + j] - my) * (y[i * c + j] - my);
      }
      vx /= n;
      vy /= n;
      worst_mean = std::max(worst_mean, static_cast<double>(std::abs(my)));
      worst_var = std::max(worst_var, static_cast<double>(std::abs(vy - vx / (vx + st.eps))));
    }
  }
  v.require(worst_mean < 1e-10, "whitened mean " + fmt("%.2e", worst_mean));
  v.require(worst_var < 1e-6, "whitened variance " + fmt("%.2e", worst_var));

  // EMA over 100 steps against the unrolled closed form
  // r_T = (1-a)^T r_0 + sum_k a (1-a)^(T-k) m_k.
  {
    const std::size_t c = 3, n = 8;
    BnState st = BnState::identity(c);
    std::vector<std::vector<long double>> means, vars;
    for (int step = 0; step < 100; ++step) {
      auto x = normal_values(n * c, rng, 2.0);
      for (auto& e : x) e += 1.5;
      std::vector<long double> m(c, 0), s(c, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) m[j] += x[i * c + j];
      for (auto& e : m) e /= n;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) s[j] += (x[i * c + j] - m[j]) * (x[i * c + j] - m[j]);
      for (auto& e : s) e /= n;
      means.push_back(m);
      vars.push_back(s);
      bn_forward(Tensor::constant({n, c}, x), st, Mode::kTrain);
    }
    const long double a = st.momentum;
    double worst = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      long double rm = std::pow(1.0L - a, 100.0L) * 0.0L, rv = std::pow(1.0L - a, 100.0L) * 1.0L;
      for (int k = 0; k < 100; ++k) {
        const long double w = a * std::pow(1.0L - a, static_cast<long double>(99 - k));
        rm += w * means[k][j];
        rv += w * vars[k][j];
      }
      worst = std::max({worst, static_cast<double>(std::abs(rm - st.running_mean[j])),
                        static_cast<double>(std::abs(rv - st.running_var[j]))});
    }
    v.require(worst < 1e-12, "EMA closed form " + fmt("%.2e", worst));
    v.info("EMA err " + fmt("%.1e", worst));
  }

  // Single-branch DSBN against plain BN, bit for bit, including gradients
  // and parameter updates.
  {
    const std::size_t c = 4;
    BnState init = BnState::identity(c);
    for (auto& g : init.gamma.tensor.mutable_values()) g = 1.0 + 0.2 * normal_values(1, rng)[0];
    BnState bn = init.clone();
    DsbnLayer layer(c);
    layer.add_domain_branch(DomainId::source(0), init);
    const Tensor r = Tensor::constant({c, 2}, normal_values(2 * c, rng));
    bool identical = true;
    for (int step = 0; step < 50; ++step) {
      const std::size_t n = 2 + step % 7;
      const auto x = normal_values(n * c, rng, 3.0);
      Tensor xa = Tensor::parameter({n, c}, x), xb = Tensor::parameter({n, c}, x);
      const Tensor ya = bn_forward(xa, bn, Mode::kTrain);
      const Tensor yb = layer.forward(xb, DomainId::source(0), Mode::kTrain);
      identical &= same_bits(ya.values(), yb.values());
      backward(readout(ya, r));
      backward(readout(yb, r));
      identical &= same_bits(xa.grad(), xb.grad());
      BnState& br = layer.branch(DomainId::source(0));
      identical &= same_bits(bn.gamma.tensor.grad(), br.gamma.tensor.grad());
      identical &= same_bits(bn.beta.tensor.grad(), br.beta.tensor.grad());
      for (BnState* s : {&bn, &br}) {
        for (Parameter* p : {&s->gamma, &s->beta}) {
          auto val = p->tensor.mutable_values();
          const auto g = p->tensor.grad();
          for (std::size_t i = 0; i < val.size(); ++i) val[i] -= 0.01 * g[i];
          p->tensor.zero_grad();
        }
      }
      identical &= same_bits(bn.running_mean, br.running_mean) &&
                   same_bits(bn.running_var, br.running_var);
      const Tensor probe = Tensor::constant({3, c}, normal_values(3 * c, rng));
      identical &= same_bits(bn_forward_eval(probe, bn).values(),
                             layer.forward_eval(probe, DomainId::source(0)).values());
    }
    v.require(identical, "single-branch DSBN differs from BN");
  }

  // Branch isolation under a random interleaving of three domains.
  {
    const std::size_t c = 3;
    const auto domains = domain_set(2);
    DsbnLayer layer(c);
    std::vector<BnState> alone;
    for (auto d : domains) {
      BnState init = BnState::identity(c);
      for (auto& g : init.gamma.tensor.mutable_values()) g = 1.0 + 0.3 * normal_values(1, rng)[0];
      layer.add_domain_branch(d, init);
      alone.push_back(init.clone());
    }
    const Tensor r = Tensor::constant({c, 2}, normal_values(2 * c, rng));
    std::uniform_int_distribution<std::size_t> pick(0, domains.size() - 1);
    double worst = 0.0;
    for (int step = 0; step < 200; ++step) {
      const std::size_t di = pick(rng);
      const std::size_t n = 3 + step % 5;
      const auto x = normal_values(n * c, rng, 1.0 + static_cast<double>(di));
      const Tensor xc = Tensor::constant({n, c}, x);
      backward(readout(layer.forward(xc, domains[di], Mode::kTrain), r));
      backward(readout(bn_forward(xc, alone[di], Mode::kTrain), r));
      for (std::size_t k = 0; k < domains.size(); ++k) {
        BnState& br = layer.branch(domains[k]);
        for (auto [p, q] : {std::pair{&br.gamma, &alone[k].gamma}, std::pair{&br.beta, &alone[k].beta}}) {
          for (Parameter* s : {p, q}) {
            if (!s->tensor.has_grad()) continue;
            auto val = s->tensor.mutable_values();
            const auto g = s->tensor.grad();
            for (std::size_t i = 0; i < val.size(); ++i) val[i] -= 0.05 * g[i];
            s->tensor.zero_grad();
          }
          worst = std::max(worst, max_abs_diff(p->tensor.values(), q->tensor.values()));
        }
        worst = std::max({worst, max_abs_diff(br.running_mean, alone[k].running_mean),
                          max_abs_diff(br.running_var, alone[k].running_var)});
      }
    }
    v.require(worst < 1e-12, "branch isolation " + fmt("%.2e", worst));
  }
  v.info("whitened mean " + fmt("%.1e", worst_mean) + ", var " + fmt("%.1e", worst_var));
  return v;
}

// ---- conversion ----------------------------------------------------------------

Verdict criterion_conversion() {
  Verdict v;
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    MlpSpec spec;
    spec.input_dim = 3;
    spec.hidden = {8, 6};
    spec.output_dim = 4;
    Network bn = make_mlp(spec, rng);
    // Move running statistics and affine parameters away from identity.
    for (int step = 0; step < 20; ++step) {
      auto x = normal_values(10 * 3, rng, 2.0);
      for (auto& e : x) e += 1.0;
      bn.forward(Tensor::constant({10, 3}, x), DomainId::source(0), Mode::kTrain);
    }
    for (auto& p : bn.parameters())
      for (auto& e : p.tensor.mutable_values()) e += 0.3 * normal_values(1, rng)[0];

    const auto domains = domain_set(1 + t % 3);
    const Network ds = convert_bn_to_dsbn(bn, domains);
    const Tensor x = Tensor::constant({7, 3}, normal_values(21, rng, 1.5));
    const auto ref = values_of(bn.evaluate(x, DomainId::source(0)).output);
    for (auto d : domains) {
      worst = std::max(worst, max_abs_diff(ref, values_of(ds.evaluate(x, d).output)));
      Network bn_copy = bn.clone(), ds_copy = ds.clone();
      worst = std::max(worst, max_abs_diff(values_of(bn_copy.forward(x, d, Mode::kTrain).output),
                                           values_of(ds_copy.forward(x, d, Mode::kTrain).output)));
    }
  }
  v.require(worst < 1e-12, "conversion max diff " + fmt("%.2e", worst));
  v.info("max diff " + fmt("%.1e", worst) + " over eval and train forwards");
  return v;
}

// ---- schedules ---------------------------------------------------------------

Verdict criterion_schedules() {
  Verdict v;
  double worst = 0.0;
  for (double gamma : {10.0, 1.0, 3.5, 25.0}) {
    v.require(lambda_schedule(0.0, gamma) == 0.0, "lambda(0) != 0");
    // 2/(1+e^-g) - 1 == tanh(g/2)
    worst = std::max(worst, std::abs(lambda_schedule(1.0, gamma) - std::tanh(gamma / 2.0)));
  }
  for (double eta0 : {1e-4, 5e-5, 1e-3}) {
    for (auto [a, b] : {std::pair{10.0, 0.75}, std::pair{5.0, 0.5}}) {
      ScheduleParams params;
      params.eta0 = eta0;
      params.alpha_lr = a;
      params.beta_lr = b;
      const double oracle = std::exp(std::log(eta0) - b * std::log1p(a));
      worst = std::max(worst, std::abs(lr_schedule(1.0, params) - oracle) / oracle);
    }
  }
  v.require(worst < 1e-12, "endpoint oracle " + fmt("%.2e", worst));

  ScheduleParams params;
  bool monotone = true;
  double prev_l = -1.0, prev_e = INFINITY;
  for (int i = 0; i < 1000; ++i) {
    const double p = i / 999.0;
    const double l = lambda_schedule(p, params.gamma_adapt), e = lr_schedule(p, params);
    monotone &= l >= prev_l && e <= prev_e;
    prev_l = l;
    prev_e = e;
  }
  v.require(monotone, "monotonicity on the grid");
  v.info("endpoint err " + fmt("%.1e", worst));
  return v;
}

// ---- CPUA weights ------------------------------------------------------------

Verdict criterion_cpua_weights() {
  Verdict v;
  const ClassPrior hand = ClassPrior::from_labels(std::vector<int>{0, 0, 1, 2}, 3);
  v.require(class_weights(hand, std::vector<int>{0, 1, 2}) == std::vector<double>{1.0, 2.0, 2.0},
            "hand case [1,2,2]");
  for (int i = 0; i < 3; ++i)
    v.require(cpua_source_weights(hand, i) * hand.fraction(i) == hand.max_fraction(),
              "hand case product");

  std::mt19937_64 rng(505);
  std::size_t cases = 0, exact = 0, ulp_bound = 0;
  double worst_ulps = 0.0;
  bool rounded = true;
  for (int t = 0; t < 2000; ++t) {
    const std::size_t c = 2 + t % 9;
    std::uniform_int_distribution<std::size_t> count(1, 1 + (t % 4 == 0 ? 5 : 400));
    std::vector<int> labels;
    for (std::size_t k = 0; k < c; ++k)
      labels.insert(labels.end(), t % 7 == 0 ? 13 : count(rng), static_cast<int>(k));
    const ClassPrior prior = ClassPrior::from_labels(labels, c);
    const std::size_t m = *std::max_element(prior.counts.begin(), prior.counts.end());
    for (std::size_t k = 0; k < c; ++k) {
      const double w = cpua_target_weights(prior, static_cast<int>(k));
      if (t % 7 == 0) v.require(w == 1.0, "uniform prior weight != 1");
      if (prior.counts[k] == m) v.require(w == 1.0, "majority weight != 1");
      // w is the correctly rounded ratio m / n_k: the residual m - w n_k is
      // below half an ulp of w times n_k.
      const double nk = static_cast<double>(prior.counts[k]);
      const double residual = std::fma(-w, nk, static_cast<double>(m));
      rounded &= std::abs(residual) <= 0.5 * (std::nextafter(w, INFINITY) - w) * nk;
      const double prod = w * prior.fraction(k), target = prior.max_fraction();
      ++cases;
      exact += prod == target;
      // w, p, max p and the product are each rounded once: at most 2 ulp apart.
      const double ulp = std::nextafter(target, INFINITY) - target;
      const double off = std::abs(prod - target) / ulp;
      worst_ulps = std::max(worst_ulps, off);
      ulp_bound += off <= 2.0;
    }
  }
  v.require(rounded, "weight is not the correctly rounded count ratio");
  v.require(ulp_bound == cases, "w*p differs from max p by more than 2 ulp");
  v.info("w*p == max p bitwise in " + std::to_string(exact) + "/" + std::to_string(cases) +
         " random cases, worst " + fmt("%.0f", worst_ulps) + " ulp");
  return v;
}

// ---- pseudo-label refinement -------------------------------------------------

std::size_t first_argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::vector<double> random_simplex(std::size_t c, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(c);
  for (auto& x : v) x = e(rng);
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= s;
  return v;
}

Verdict criterion_refinement() {
  Verdict v;
  std::mt19937_64 rng(606);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t c = 2 + t % 11;
    const auto a = random_simplex(c, rng), b = random_simplex(c, rng);
    mismatches += refine_pseudo_label(a, b, 0.0) != first_argmax(a);
    mismatches += refine_pseudo_label(a, b, 1.0) != first_argmax(b);
  }
  v.require(mismatches == 0, std::to_string(mismatches) + " boundary mismatches");
  v.info("1000 random pairs");
  return v;
}

// ---- trend replication ---------------------------------------------------------

std::string config_path(const char* name) { return std::string(DSBN_CONFIG_DIR) + "/" + name; }

struct CellMeans {
  double stage1 = 0.0;
  std::vector<double> stage2;  // per round
};

CellMeans cell_means(const AblationCell& cell) {
  CellMeans m;
  std::vector<double> s1;
  for (const auto& r : cell.runs) s1.push_back(stage1_avg(r));
  m.stage1 = summarize(s1).mean;
  const std::size_t rounds = cell.runs.front().stage2.size();
  for (std::size_t round = 1; round <= rounds; ++round) {
    std::vector<double> s2;
    for (const auto& r : cell.runs) s2.push_back(stage2_avg(r, round));
    m.stage2.push_back(summarize(s2).mean);
  }
  return m;
}

void criterion_trends(Verdict& ac7, Verdict& ac8) {
  ExperimentConfig config = load_experiment_config(config_path("benchmark.toml"));
  const auto t0 = Clock::now();
  config.stage2_iterations = 3;
  const auto cells = run_ablation(config, {Baseline::kMstn});
  const double elapsed = seconds_since(t0);

  std::map<std::pair<NormMode, NormMode>, CellMeans> means;
  for (const auto& cell : cells) means[{cell.stage1, cell.stage2}] = cell_means(cell);
  const auto& bb = means.at({NormMode::kBn, NormMode::kBn});
  const auto& bd = means.at({NormMode::kBn, NormMode::kDsbn});
  const auto& db = means.at({NormMode::kDsbn, NormMode::kBn});
  const auto& dd = means.at({NormMode::kDsbn, NormMode::kDsbn});

  ac7.require(dd.stage2[0] >= db.stage2[0], "DSBN/DSBN < DSBN/BN");
  ac7.require(dd.stage2[0] - bb.stage2[0] >= 3.0, "gain over BN/BN below 3 points");
  ac7.require(bd.stage2[0] - bd.stage1 > 0.0, "BN/DSBN stage-2 delta not positive");
  ac7.require(dd.stage2[0] - dd.stage1 > 0.0, "DSBN/DSBN stage-2 delta not positive");
  ac7.require(elapsed < 600.0, "runtime " + fmt("%.0f s", elapsed));
  ac7.info("BN/BN " + percent(bb.stage2[0]) + ", BN/DSBN " + percent(bd.stage2[0]) +
           ", DSBN/BN " + percent(db.stage2[0]) + ", DSBN/DSBN " + percent(dd.stage2[0]) +
           "; delta BN/DSBN " + fmt("%+.1f", bd.stage2[0] - bd.stage1) + ", DSBN/DSBN " +
           fmt("%+.1f", dd.stage2[0] - dd.stage1) + "; " + fmt("%.0f s", elapsed) +
           " incl. 3 rounds");

  const auto& r = dd.stage2;
  ac8.require(r.size() == 3, "expected 3 rounds");
  for (std::size_t i = 1; i < r.size(); ++i)
    ac8.require(r[i] >= r[i - 1] - 0.5, "round " + std::to_string(i + 1) + " drops");
  ac8.info("DSBN/DSBN rounds " + percent(r[0]) + " -> " + percent(r[1]) + " -> " + percent(r[2]));
}

Verdict criterion_multisource() {
  Verdict v;
  const ExperimentConfig config = load_experiment_config(config_path("multisource.toml"));
  const auto cells = run_multisource(config);
  auto mean_of = [&](MultiSourceMode mode, NormMode norm) {
    for (const auto& cell : cells) {
      if (cell.mode != mode || cell.norm != norm) continue;
      std::vector<double> a;
      for (const auto& r : cell.runs) a.push_back(r.stage2.empty() ? stage1_avg(r) : stage2_avg(r));
      return summarize(a).mean;
    }
    return std::nan("");
  };
  const double sep = mean_of(MultiSourceMode::kSeparate, NormMode::kDsbn);
  const double merged = mean_of(MultiSourceMode::kMerged, NormMode::kBn);
  v.require(sep >= merged, "separate DSBN below merged BN");
  v.info("separate/dsbn " + percent(sep) + " vs merged/bn " + percent(merged));
  return v;
}

// ---- determinism ---------------------------------------------------------------

std::string checkpoint_bytes(const Checkpoint& c) {
  std::ostringstream out(std::ios::binary);
  save_checkpoint(out, c);
  return out.str();
}

Verdict criterion_determinism() {
  Verdict v;
  const ExperimentConfig config = load_experiment_config(config_path("benchmark.toml"));
  const std::uint64_t seed = config.seeds.front();
  std::string reports[2];
  std::string ckpts[2];
  RunResult last;
  for (int i = 0; i < 2; ++i) {
    last = run_experiment(config, seed, config.norm_stage1, config.norm_stage2,
                          config.multi_source_mode, "dsbn/dsbn");
    std::ostringstream out;
    write_report_csv(out, {last}, config.data.classes);
    reports[i] = out.str();
    ckpts[i] = checkpoint_bytes(last.checkpoint);
  }
  v.require(reports[0] == reports[1], "report.csv differs between runs");
  v.require(ckpts[0] == ckpts[1], "checkpoint bytes differ between runs");

  std::istringstream in(ckpts[0], std::ios::binary);
  Checkpoint back = load_checkpoint(in);
  v.require(checkpoint_bytes(back) == ckpts[0], "save/load/save bytes differ");
  v.require(back.rng == last.checkpoint.rng, "generator state differs");
  v.require(back.optimizer.step == last.checkpoint.optimizer.step, "optimizer step differs");
  bool moments = back.optimizer.first_moment.size() == last.checkpoint.optimizer.first_moment.size();
  for (std::size_t i = 0; moments && i < back.optimizer.first_moment.size(); ++i)
    moments = same_bits(back.optimizer.first_moment[i], last.checkpoint.optimizer.first_moment[i]) &&
              same_bits(back.optimizer.second_moment[i], last.checkpoint.optimizer.second_moment[i]);
  v.require(moments, "optimizer moments differ");

  const RunData data = make_run_data(config, config.multi_source_mode, 77);
  bool outputs = true;
  for (const LabeledDataset* set : {&data.sources.front(), &data.target}) {
    const Tensor x = set->as_tensor();
    outputs &= same_bits(values_of(last.checkpoint.model.evaluate(x, set->domain()).output),
                         values_of(back.model.evaluate(x, set->domain()).output));
  }
  v.require(outputs, "forward outputs differ after reload");
  v.info("report " + std::to_string(reports[0].size()) + " bytes, checkpoint " +
         std::to_string(ckpts[0].size()) + " bytes");
  return v;
}

}  // namespace

int main() {
  bool all_ok = true;
  auto report = [&](const char* id, const char* title, const Verdict& v, double secs) {
    all_ok &= v.ok;
    std::string detail;
    for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("%s %s  %s (%.1f s)%s%s\n", id, v.ok ? "PASS" : "FAIL", title, secs,
                detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
  };
  auto timed = [&](const char* id, const char* title, const std::function<Verdict()>& f) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    report(id, title, v, seconds_since(t0));
  };

  timed("AC1", "gradient suite", criterion_gradients);
  timed("AC2", "BN/DSBN algebra", criterion_normalization);
  timed("AC3", "conversion equivalence", criterion_conversion);
  timed("AC4", "schedules", criterion_schedules);
  timed("AC5", "CPUA weights", criterion_cpua_weights);
  timed("AC6", "refinement boundaries", criterion_refinement);
  {
    const auto t0 = Clock::now();
    Verdict ac7, ac8;
    try {
      criterion_trends(ac7, ac8);
    } catch (const std::exception& e) {
      ac7.require(false, std::string("exception: ") + e.what());
      ac8.require(false, "not evaluated");
    }
    const double secs = seconds_since(t0);
    report("AC7", "stage-1/stage-2 normalization ablation", ac7, secs);
    report("AC8", "iterated stage 2", ac8, secs);
  }
  timed("AC9", "multi-source", criterion_multisource);
  timed("AC10", "determinism", criterion_determinism);
  return all_ok ? 0 : 1;
}

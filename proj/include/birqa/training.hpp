#pragma once

// Clean training, vanilla adversarial training and anchored adversarial
// fine-tuning. All loops are serial; every random choice comes from a
// stream derived from the run seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "birqa/anchorloss.hpp"
#include "birqa/attacks.hpp"
#include "birqa/evalstats.hpp"
#include "birqa/network.hpp"

namespace birqa {

/// One (reference, distorted, MOS) triple as float RGB planes.
struct Sample {
  PlanarImage ref;
  PlanarImage dist;
  double mos = 0;
};

using Model = BirqaModel<float>;

inline std::vector<double> labels(std::span<const Sample> data) {
  std::vector<double> y;
  for (const auto& s : data) y.push_back(s.mos);
  return y;
}

inline std::vector<FeaturePyramid> pyramids(std::span<const Sample> data, FeatureMask mask) {
  std::vector<FeaturePyramid> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(build_pyramid(s.ref, s.dist, mask));
  return out;
}

inline std::vector<double> predict(const Model& model, std::span<const FeaturePyramid> pyrs) {
  std::vector<double> out;
  for (const auto& p : pyrs) out.push_back(model.score(p));
  return out;
}

inline std::vector<double> predict(const Model& model, std::span<const Sample> data) {
  return predict(model, pyramids(data, model.config().features));
}

/// Scores after attacking each distorted image (8-bit re-quantized output).
inline std::vector<double> predict_attacked(const Model& model, std::span<const Sample> data,
                                            const AttackConfig& cfg, std::uint64_t seed) {
  std::vector<double> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng = make_rng(seed, 0xe7a1 + i);
    const auto adv = attack_float(model, data[i].ref, data[i].dist, cfg, rng);
    const PlanarImage q = to_float(quantize(adv, data[i].dist.width, data[i].dist.height));
    out.push_back(model.score(build_pyramid(data[i].ref, q, model.config().features)));
  }
  return out;
}

/// Observer for each optimizer batch: the samples and the distorted images
/// actually fed to the model.
using BatchProbe = std::function<void(std::span<const Sample* const>, std::span<const PlanarImage>)>;

struct TrainOptions {
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  BatchProbe probe;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double srocc = 0;  // on the validation set when given, else training set
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  ad::AdamState<float> adam;  // final optimizer state
};

namespace detail {

/// Forward all pyramids with recording graphs, evaluate the batch loss on
/// the stacked predictions, then push dL/dyhat back through each sample.
/// Returns (loss, predictions).
inline std::pair<double, std::vector<double>> batch_gradient(
    Model& model, std::span<const FeaturePyramid* const> batch,
    const std::function<ad::Var<float>(const ad::Var<float>&)>& loss_fn) {
  const int m = static_cast<int>(batch.size());
  std::vector<std::unique_ptr<ad::Graph<float>>> graphs;
  std::vector<ad::Var<float>> scores;
  std::vector<float> yhat;
  for (const auto* p : batch) {
    graphs.push_back(std::make_unique<ad::Graph<float>>(true));
    auto& g = *graphs.back();
    scores.push_back(model.forward(g, level_inputs<float>(g, *p)).score);
    yhat.push_back(scores.back().item());
  }
  ad::Graph<float> lg(false);
  auto pred = lg.leaf(ad::Shape{m}, yhat, true);
  auto loss = loss_fn(pred);
  lg.backward(loss);
  const auto dl = pred.grad();
  for (int i = 0; i < m; ++i) {
    graphs[i]->backward(scores[i], dl[i]);
    graphs[i]->flush_param_grads();
    graphs[i].reset();
  }
  return {static_cast<double>(loss.item()), std::vector<double>(yhat.begin(), yhat.end())};
}

inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
}

inline void zero_grads(Model& model) {
  for (auto* p : model.parameters()) p->grad.assign(p->size(), 0.0f);
}

/// Shared loop for clean and vanilla adversarial training.
inline TrainHistory train_loop(Model& model, std::span<const Sample> train,
                               const TrainOptions& opt, const AttackConfig* attack,
                               std::span<const Sample> val) {
  if (train.size() < 2) throw Error("train: dataset needs at least 2 samples");
  const auto y = labels(train);
  if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) {
    throw Error("train: degenerate dataset (constant MOS)");
  }
  if (opt.batch_size < 2) throw Error("train: batch size must be >= 2");
  const FeatureMask mask = model.config().features;
  const auto clean = pyramids(train, mask);
  const auto val_pyr = pyramids(val, mask);
  const bool adversarial = attack && attack->eps > 0.0;

  ad::AdamState<float> adam;
  adam.lr = opt.lr;
  Rng shuffle_rng = make_rng(opt.seed, 0x5417);
  TrainHistory hist;
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  long batch_counter = 0;

  for (int e = 0; e < opt.epochs; ++e) {
    shuffle_indices(order, shuffle_rng);
    double loss_sum = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::vector<double> by;
      for (std::size_t k = start; k < end; ++k) by.push_back(y[order[k]]);
      ++batch_counter;
      if (by.size() < 2 || std::all_of(by.begin(), by.end(), [&](double v) { return v == by[0]; })) {
        continue;
      }
      std::vector<FeaturePyramid> attacked;
      std::vector<const FeaturePyramid*> batch;
      std::vector<const Sample*> members;
      std::vector<PlanarImage> fed;
      for (std::size_t k = start; k < end; ++k) members.push_back(&train[order[k]]);
      if (adversarial) {
        attacked.reserve(end - start);
        for (std::size_t k = start; k < end; ++k) {
          const Sample& s = train[order[k]];
          Rng arng = make_rng(opt.seed, mix_seed(0xa7, batch_counter * 4096 + (k - start)));
          const auto adv = attack_float(model, s.ref, s.dist, *attack, arng);
          PlanarImage d(3, s.dist.width, s.dist.height);
          std::copy(adv.begin(), adv.end(), d.data.begin());
          attacked.push_back(build_pyramid(s.ref, d, mask));
          if (opt.probe) fed.push_back(std::move(d));
        }
        for (const auto& p : attacked) batch.push_back(&p);
      } else {
        for (std::size_t k = start; k < end; ++k) {
          batch.push_back(&clean[order[k]]);
          if (opt.probe) fed.push_back(train[order[k]].dist);
        }
      }
      if (opt.probe) opt.probe(members, fed);
      zero_grads(model);
      const auto [loss, preds] = batch_gradient(
          model, batch, [&](const ad::Var<float>& p) { return base_loss<float>(by, p); });
      ad::adam_step(adam, std::span<ad::Parameter<float>* const>(model.parameters()));
      model.clamp_exponents();
      loss_sum += loss;
      ++n_batches;
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.loss = n_batches ? loss_sum / n_batches : 0.0;
    try {
      rec.srocc = val.empty() ? srocc(y, predict(model, clean))
                              : srocc(labels(val), predict(model, val_pyr));
    } catch (const Error&) {
      rec.srocc = 0.0;  // constant predictions
    }
    hist.epochs.push_back(rec);
  }
  hist.adam = std::move(adam);
  return hist;
}

}  // namespace detail

/// Minimizes the base loss over shuffled mini-batches.
inline TrainHistory train_clean(Model& model, std::span<const Sample> train, const TrainOptions& opt,
                                std::span<const Sample> val = {}) {
  return detail::train_loop(model, train, opt, nullptr, val);
}

/// Every distorted image in a batch is attacked; the loss is the base loss
/// against the original labels. With eps = 0 this is exactly train_clean.
inline TrainHistory at_vanilla(Model& model, std::span<const Sample> train, const AttackConfig& attack,
                               const TrainOptions& opt, std::span<const Sample> val = {}) {
  return detail::train_loop(model, train, opt, &attack, val);
}

struct AatOptions {
  int iterations = 200;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  BatchConfig batch;
  double eps_budget = kDefaultEpsBudget;
};

struct AatIteration {
  long step = 0;
  double loss = 0;      // total aat loss
  double anchored = 0;  // top-k anchored term
};

struct AatResult {
  std::vector<AatIteration> history;
  std::vector<BoundCertificate> certificates;
  ad::AdamState<float> adam;
};

/// Observer for each iteration: plan, clean inputs and the attacked inputs
/// actually fed to the model (anchors unchanged).
using AatProbe = std::function<void(const BatchPlan&, std::span<const PlanarImage* const> before,
                                    std::span<const PlanarImage> after)>;

/// Anchored adversarial fine-tuning: anchors stay clean, non-anchors get
/// PGD, the mixed loss is minimized and each batch emits a certificate
/// (computed from the predictions that produced the gradient).
inline AatResult aat_finetune(Model& model, std::span<const Sample> train, const AttackConfig& attack,
                              const AatOptions& opt, const AatProbe& probe = {}) {
  const auto y = labels(train);
  const FeatureMask mask = model.config().features;
  const auto clean = pyramids(train, mask);
  ad::AdamState<float> adam;
  adam.lr = opt.lr;
  Rng batch_rng = make_rng(opt.seed, 0xba7c);
  AatResult out;

  for (int it = 0; it < opt.iterations; ++it) {
    const BatchPlan plan = build_batch(y, opt.batch, batch_rng);
    const auto by = plan_labels(plan, y);
    std::vector<PlanarImage> inputs;
    std::vector<const PlanarImage*> before;
    std::vector<FeaturePyramid> attacked(plan.size());
    std::vector<const FeaturePyramid*> batch;
    for (std::size_t k = 0; k < plan.size(); ++k) {
      const Sample& s = train[plan.rows[k]];
      before.push_back(&s.dist);
      if (plan.is_anchor[k] || attack.eps == 0.0) {
        inputs.push_back(s.dist);
        batch.push_back(&clean[plan.rows[k]]);
        continue;
      }
      Rng arng = make_rng(opt.seed, mix_seed(0xaa7, static_cast<std::uint64_t>(it) * 4096 + k));
      const auto adv = attack_float(model, s.ref, s.dist, attack, arng);
      PlanarImage d(3, s.dist.width, s.dist.height);
      std::copy(adv.begin(), adv.end(), d.data.begin());
      attacked[k] = build_pyramid(s.ref, d, mask);
      inputs.push_back(std::move(d));
      batch.push_back(&attacked[k]);
    }
    if (probe) probe(plan, before, inputs);

    detail::zero_grads(model);
    double anchored = 0.0;
    const auto [loss, preds] = detail::batch_gradient(model, batch, [&](const ad::Var<float>& p) {
      auto a = anchored_loss(plan, by, p);
      anchored = static_cast<double>(a.topk.item());
      auto base = base_loss<float>(by, p);
      return ad::add(ad::scale(base, static_cast<float>(1.0 - kAatMix)),
                     ad::scale(a.topk, static_cast<float>(kAatMix)));
    });
    BoundCertificate cert = certify_batch(plan, by, preds, opt.eps_budget);
    cert.step = it + 1;
    out.certificates.push_back(std::move(cert));
    out.history.push_back({it + 1, loss, anchored});

    ad::adam_step(adam, std::span<ad::Parameter<float>* const>(model.parameters()));
    model.clamp_exponents();
  }
  out.adam = std::move(adam);
  return out;
}

}  // namespace birqa

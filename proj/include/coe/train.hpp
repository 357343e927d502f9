#pragma once

// Training protocols. CoE trains in two phases: the delegator's feature
// extractor and task predictor first (plain cross-entropy), then the expert
// selector and experts jointly with L_total = η·L_S + L_T, where L_S is
// supervised by balanced suitability labels and L_T is reweighted by the
// selector-driven partition. Baselines and ablations share the same loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "coe/data.hpp"
#include "coe/error.hpp"
#include "coe/infer.hpp"
#include "coe/lgm.hpp"
#include "coe/matrix.hpp"
#include "coe/models.hpp"
#include "coe/nn.hpp"
#include "coe/onehot.hpp"
#include "coe/seed.hpp"
#include "coe/transport.hpp"
#include "coe/wgm.hpp"

namespace coe::train {

using models::Mode;

enum class Ablation { LGM_off, LGM_star, WGM_off, WGM_star, WGM_circ, WGM_bullet, SR_off };

NLOHMANN_JSON_SERIALIZE_ENUM(Ablation, {{Ablation::LGM_off, "LGM_off"},
                                        {Ablation::LGM_star, "LGM_star"},
                                        {Ablation::WGM_off, "WGM_off"},
                                        {Ablation::WGM_star, "WGM_star"},
                                        {Ablation::WGM_circ, "WGM_circ"},
                                        {Ablation::WGM_bullet, "WGM_bullet"},
                                        {Ablation::SR_off, "SR_off"}})

struct TrainConfig {
  std::size_t n_experts = 4;
  std::size_t epochs_phase1 = 20;
  std::size_t epochs_phase2 = 40;
  std::size_t batch_size = 64;
  double eta = 0.8;
  double alpha_start = wgm::kDefaultAlphaStart;
  double alpha_end = wgm::kDefaultAlphaEnd;
  std::uint64_t seed = 0;
  Mode mode = Mode::coe;
  std::set<Ablation> ablations;
  double lr_phase1 = 0.05;
  double lr_phase2 = 0.02;
  double momentum = 0.9;
  std::size_t feat_dim = 32;
  std::size_t selector_hidden = 100;
  std::vector<std::size_t> expert_hidden = {32, 32};
  std::vector<double> expert_width_scales;
  /// Evaluate routed validation accuracy after every phase-2 epoch.
  bool track_val_accuracy = true;

  [[nodiscard]] bool has(Ablation a) const { return ablations.count(a) != 0; }

  void validate() const {
    require(n_experts >= 1, "TrainConfig: n_experts must be >= 1");
    require(eta >= 0.0, "TrainConfig: eta must be >= 0");
    require(batch_size >= n_experts, "TrainConfig: batch_size must be >= n_experts");
    require(batch_size >= 2, "TrainConfig: batch_size must be >= 2");
    require(alpha_start >= 0.0 && alpha_start <= 1.0 && alpha_end >= 0.0 && alpha_end <= 1.0,
            "TrainConfig: alpha bounds must lie in [0,1]");
    require(lr_phase1 > 0.0 && lr_phase2 > 0.0, "TrainConfig: learning rates must be positive");
    require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must be in [0,1)");
    require(expert_width_scales.empty() || expert_width_scales.size() == n_experts,
            "TrainConfig: expert_width_scales needs one entry per expert");
  }

  [[nodiscard]] models::Architecture architecture(std::size_t input_dim,
                                                  std::size_t classes) const {
    models::Architecture a;
    a.input_dim = input_dim;
    a.feat_dim = feat_dim;
    a.classes = classes;
    a.n_experts = n_experts;
    a.selector_hidden = selector_hidden;
    a.expert_hidden = expert_hidden;
    a.expert_width_scales = expert_width_scales;
    return a;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, n_experts, epochs_phase1,
                                                epochs_phase2, batch_size, eta, alpha_start,
                                                alpha_end, seed, mode, ablations, lr_phase1,
                                                lr_phase2, momentum, feat_dim, selector_hidden,
                                                expert_hidden, expert_width_scales,
                                                track_val_accuracy)

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  try {
    const auto raw = nlohmann::json::parse(text);
    cfg = raw.get<TrainConfig>();
    auto known = [](const nlohmann::json& name, auto parsed) {
      return name.is_string() && nlohmann::json(parsed) == name;
    };
    if (raw.contains("mode"))
      require(known(raw["mode"], raw["mode"].get<models::Mode>()), "bad training config: unknown mode");
    if (raw.contains("ablations"))
      for (const auto& a : raw["ablations"])
        require(known(a, a.get<Ablation>()), "bad training config: unknown ablation");
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("bad training config: " + std::string(e.what()));
  }
  cfg.validate();
  return cfg;
}

struct EpochRecord {
  int phase = 1;
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  std::optional<double> loss_p;
  std::optional<double> loss_s;
  std::optional<double> loss_t;
  std::optional<double> loss_total;
  std::optional<double> train_rough_accuracy;
  std::optional<double> val_rough_accuracy;
  std::optional<double> val_accuracy;  ///< routed (τ = 1) accuracy
  std::optional<double> selector_label_accuracy;
  std::vector<std::size_t> assignment_counts;
};

inline nlohmann::json to_json_record(const EpochRecord& r) {
  nlohmann::json j;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["learning_rate"] = r.learning_rate;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("loss_p", r.loss_p);
  put("loss_s", r.loss_s);
  put("loss_t", r.loss_t);
  put("loss_total", r.loss_total);
  put("train_rough_accuracy", r.train_rough_accuracy);
  put("val_rough_accuracy", r.val_rough_accuracy);
  put("val_accuracy", r.val_accuracy);
  put("selector_label_accuracy", r.selector_label_accuracy);
  if (!r.assignment_counts.empty()) j["assignment_counts"] = r.assignment_counts;
  return j;
}

struct TrainReport {
  std::vector<EpochRecord> epochs;

  [[nodiscard]] std::string to_jsonl() const {
    std::string out;
    for (const auto& r : epochs) out += to_json_record(r).dump() + "\n";
    return out;
  }
};

/// Cosine decay from `base` at step 0 towards 0 at `total`.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Shuffled index batches. With `drop_short`, a trailing batch smaller than
/// `batch_size` is dropped so every batch can meet balanced demands.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::mt19937_64& rng,
                                                           bool drop_short) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    if (drop_short && e - b < batch_size) break;
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                     idx.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size, bool drop_short) {
  return drop_short ? n / batch_size : (n + batch_size - 1) / batch_size;
}

inline std::vector<std::size_t> gather_labels(std::span<const std::size_t> labels,
                                              std::span<const std::size_t> rows) {
  std::vector<std::size_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

inline std::vector<double> uniform(std::size_t m) {
  return std::vector<double>(m, 1.0 / static_cast<double>(m));
}

inline double rough_accuracy(const models::Delegator& d, const data::Dataset& ds) {
  const Matrix probs = nn::softmax_rows(nn::apply(d.predictor, nn::apply(d.extractor, ds.features)));
  std::size_t ok = 0;
  for (std::size_t j = 0; j < ds.size(); ++j) ok += argmax(probs.row(j)) == ds.labels[j];
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

/// Phase 1: feature extractor and task predictor trained with plain
/// cross-entropy on the rough prediction (L_P). The selector is untouched.
inline void train_phase1(models::Delegator& d, const data::Dataset& train, const TrainConfig& cfg,
                         TrainReport& report, const data::Dataset* val = nullptr) {
  require(train.size() > 0, "train_phase1: empty dataset");
  std::mt19937_64 rng(sub_seed(cfg.seed, "phase1/shuffle"));
  nn::SgdState ext_opt(cfg.lr_phase1, cfg.momentum);
  nn::SgdState pred_opt(cfg.lr_phase1, cfg.momentum);
  const std::size_t total =
      cfg.epochs_phase1 * batches_per_epoch(train.size(), cfg.batch_size, false);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase1; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    EpochRecord rec;
    rec.phase = 1;
    rec.epoch = epoch;
    rec.learning_rate = cosine_lr(cfg.lr_phase1, step, total);
    for (const auto& rows : epoch_batches(train.size(), cfg.batch_size, rng, false)) {
      const double lr = cosine_lr(cfg.lr_phase1, step++, total);
      ext_opt.learning_rate = pred_opt.learning_rate = lr;
      const Matrix x = gather_rows(train.features, rows);
      const auto y = gather_labels(train.labels, rows);
      const auto ext = nn::forward(d.extractor, x);
      const auto pred = nn::forward(d.predictor, ext.output);
      const auto lg = nn::weighted_cross_entropy(nn::softmax_rows(pred.output), y, uniform(rows.size()));
      const auto gp = nn::backward(d.predictor, pred, lg.grad);
      const auto ge = nn::backward(d.extractor, ext, gp.input_grad);
      nn::sgd_step(d.predictor, gp.grads, pred_opt);
      nn::sgd_step(d.extractor, ge.grads, ext_opt);
      loss_sum += lg.loss;
      ++batches;
    }
    rec.loss_p = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    rec.train_rough_accuracy = rough_accuracy(d, train);
    if (val) rec.val_rough_accuracy = rough_accuracy(d, *val);
    report.epochs.push_back(std::move(rec));
  }
}

struct ExpertLoss {
  double loss = 0.0;
  std::vector<Matrix> grads;  ///< per expert, dL_T/dlogits
};

/// L_T = Σ_{j,k} W[j][k] · (−log p_k[j][y_j]). Columns of W that are all zero
/// contribute nothing.
inline ExpertLoss expert_loss(std::span<const Matrix> expert_probs,
                              std::span<const std::size_t> targets, const Matrix& w) {
  require(w.cols() == expert_probs.size() && w.rows() == targets.size(),
          "expert_loss: weight matrix shape mismatch");
  ExpertLoss out;
  std::vector<double> col(targets.size());
  for (std::size_t k = 0; k < expert_probs.size(); ++k) {
    require(expert_probs[k].rows() == targets.size(), "expert_loss: probs/targets mismatch");
    double sum = 0.0;
    for (std::size_t j = 0; j < targets.size(); ++j) {
      col[j] = w(j, k);
      sum += col[j];
    }
    if (sum == 0.0) {
      for (std::size_t y : targets)
        require(y < expert_probs[k].cols(), "expert_loss: target out of range");
      out.grads.emplace_back(expert_probs[k].rows(), expert_probs[k].cols(), 0.0);
      continue;
    }
    auto lg = nn::weighted_cross_entropy(expert_probs[k], targets, col);
    out.loss += lg.loss;
    out.grads.push_back(std::move(lg.grad));
  }
  return out;
}

/// L_S = Σ_j v_j · CE(P_j, L_j).
inline nn::LossAndGrad selection_loss(const Matrix& p, const OneHotMatrix& labels,
                                      std::span<const double> v) {
  require(p.rows() == labels.rows() && p.cols() == labels.cols && v.size() == p.rows(),
          "selection_loss: shape mismatch");
  return nn::weighted_cross_entropy(p, labels.index, v);
}

/// Forward state of one phase-2 batch.
struct JointForward {
  Matrix features;
  nn::ForwardCache selector;
  Matrix selection_probs;
  std::vector<nn::ForwardCache> experts;
  std::vector<Matrix> expert_probs;
};

inline JointForward joint_forward(const models::Delegator& d,
                                  const std::vector<models::Expert>& experts, const Matrix& x) {
  JointForward f;
  f.features = nn::apply(d.extractor, x);
  f.selector = nn::forward(d.selector, f.features);
  f.selection_probs = nn::softmax_rows(f.selector.output);
  for (const auto& e : experts) {
    f.experts.push_back(nn::forward(e.network, x));
    f.expert_probs.push_back(nn::softmax_rows(f.experts.back().output));
  }
  return f;
}

/// Labels, selection weights and expert weights for one batch. All of them
/// are constants with respect to differentiation.
struct JointTargets {
  std::optional<OneHotMatrix> labels;  ///< absent when the selection loss is off
  std::vector<double> v;
  std::optional<OneHotMatrix> assignment;
  Matrix w;
  double alpha = 0.0;
};

inline JointTargets make_joint_targets(const JointForward& f, std::span<const std::size_t> y,
                                       const TrainConfig& cfg, std::size_t step,
                                       std::size_t total_steps) {
  const std::size_t m = y.size();
  const std::size_t n = f.expert_probs.size();
  JointTargets t;
  if (n >= 2 && !cfg.has(Ablation::LGM_off)) {
    const lgm::TcpMatrix tcp = lgm::compute_tcp(f.expert_probs, y);
    if (cfg.has(Ablation::LGM_star)) {
      t.labels = lgm::raw_tcp_labels(tcp);
      t.v = lgm::selection_loss_weights(tcp);
    } else {
      const auto s = lgm::standardize_suitability(tcp);
      t.labels = lgm::generate_selection_labels(s);
      ensure(t.labels->column_counts() == transport::balanced_demands(m, n),
             "selection labels violate balanced demands");
      t.v = lgm::selection_loss_weights(s);
    }
    if (cfg.has(Ablation::SR_off)) t.v = uniform(m);
  }

  const bool constant_alpha = cfg.has(Ablation::WGM_bullet);
  t.alpha = constant_alpha ? 0.8
                           : wgm::alpha_schedule(std::min(step, total_steps),
                                                 std::max<std::size_t>(total_steps, 1),
                                                 cfg.alpha_start, cfg.alpha_end);
  if (cfg.has(Ablation::WGM_off)) {
    t.w = wgm::uniform_weights(m, n);
  } else if (cfg.has(Ablation::WGM_circ)) {
    t.assignment = wgm::unconstrained_assignment(f.selection_probs);
    t.w = wgm::unsmoothed_weights(*t.assignment);
  } else {
    if (cfg.has(Ablation::WGM_star) && t.labels) {
      t.assignment = wgm::suitability_assignment(*t.labels);
    } else {
      t.assignment = wgm::generate_assignment(f.selection_probs);
      ensure(t.assignment->column_counts() == transport::balanced_demands(m, n),
             "assignment violates balanced demands");
    }
    t.w = wgm::normalize_weights(wgm::smooth_assignment(*t.assignment, t.alpha), m, n);
  }
  return t;
}

struct JointLoss {
  double loss_s = 0.0;
  double loss_t = 0.0;
  double total = 0.0;
  nn::Gradients selector;
  std::vector<nn::Gradients> experts;
};

/// Loss value and gradients of L_total = η·L_S + L_T for fixed targets.
inline JointLoss joint_loss(const models::Delegator& d,
                            const std::vector<models::Expert>& experts, const JointForward& f,
                            std::span<const std::size_t> y, const JointTargets& t, double eta) {
  JointLoss out;
  out.selector = nn::Gradients::zeros_like(d.selector);
  if (t.labels) {
    auto ls = selection_loss(f.selection_probs, *t.labels, t.v);
    out.loss_s = ls.loss;
    for (double& g : ls.grad.flat()) g *= eta;
    out.selector = nn::backward(d.selector, f.selector, ls.grad).grads;
  }
  const auto lt = expert_loss(f.expert_probs, y, t.w);
  out.loss_t = lt.loss;
  for (std::size_t k = 0; k < experts.size(); ++k)
    out.experts.push_back(nn::backward(experts[k].network, f.experts[k], lt.grads[k]).grads);
  out.total = eta * out.loss_s + out.loss_t;
  return out;
}

/// Routed (τ = 1) accuracy of a bundle on a dataset.
inline double routed_accuracy(const models::Bundle& b, const data::Dataset& ds) {
  const auto pass = infer::run_delegator(b, ds.features);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto refined = infer::refine(b, pass, ds.features, all);
  std::size_t ok = 0;
  for (std::size_t j = 0; j < ds.size(); ++j) ok += refined[j] == ds.labels[j];
  return static_cast<double>(ok) / static_cast<double>(ds.size());
}

namespace detail {

struct Optimizers {
  nn::SgdState selector;
  std::vector<nn::SgdState> experts;

  Optimizers(const TrainConfig& cfg, std::size_t n) : selector(cfg.lr_phase2, cfg.momentum) {
    for (std::size_t k = 0; k < n; ++k) experts.emplace_back(cfg.lr_phase2, cfg.momentum);
  }

  void set_lr(double lr) {
    selector.learning_rate = lr;
    for (auto& e : experts) e.learning_rate = lr;
  }
};

inline void finish_phase2_epoch(EpochRecord& rec, const models::Bundle& b, const TrainConfig& cfg,
                                const data::Dataset* val) {
  if (val && cfg.track_val_accuracy) rec.val_accuracy = routed_accuracy(b, *val);
}

}  // namespace detail

/// Phase 2 of CoE: selector and experts trained jointly; extractor and
/// predictor must stay bit-identical.
inline void train_phase2(models::Bundle& b, const data::Dataset& train, const TrainConfig& cfg,
                         TrainReport& report, const data::Dataset* val = nullptr) {
  require(train.size() > 0, "train_phase2: empty dataset");
  require(b.phase_completed == "phase1", "train_phase2: phase 1 has not completed");
  const std::size_t n = b.experts.size();
  const models::Delegator frozen{b.delegator.extractor, b.delegator.predictor, {}};

  std::mt19937_64 rng(sub_seed(cfg.seed, "phase2/shuffle"));
  detail::Optimizers opt(cfg, n);
  const std::size_t per_epoch = batches_per_epoch(train.size(), cfg.batch_size, true);
  require(per_epoch > 0, "train_phase2: dataset smaller than one batch");
  const std::size_t total = cfg.epochs_phase2 * per_epoch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    rec.learning_rate = cosine_lr(cfg.lr_phase2, step, total);
    rec.assignment_counts.assign(n, 0);
    double ls_sum = 0.0, lt_sum = 0.0, total_sum = 0.0;
    std::size_t label_hits = 0, label_rows = 0;
    for (const auto& rows : epoch_batches(train.size(), cfg.batch_size, rng, true)) {
      opt.set_lr(cosine_lr(cfg.lr_phase2, step, total));
      const Matrix x = gather_rows(train.features, rows);
      const auto y = gather_labels(train.labels, rows);
      const auto f = joint_forward(b.delegator, b.experts, x);
      const auto t = make_joint_targets(f, y, cfg, step, total);
      const auto loss = joint_loss(b.delegator, b.experts, f, y, t, cfg.eta);
      ensure(loss.total == cfg.eta * loss.loss_s + loss.loss_t, "loss composition drifted");

      if (t.labels) {
        nn::sgd_step(b.delegator.selector, loss.selector, opt.selector);
        for (std::size_t j = 0; j < rows.size(); ++j)
          label_hits += argmax(f.selection_probs.row(j)) == t.labels->index[j];
        label_rows += rows.size();
      }
      for (std::size_t k = 0; k < n; ++k)
        nn::sgd_step(b.experts[k].network, loss.experts[k], opt.experts[k]);
      if (t.assignment) {
        const auto counts = t.assignment->column_counts();
        ensure(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == rows.size(),
               "assignment counts do not cover the batch");
        for (std::size_t k = 0; k < n; ++k) rec.assignment_counts[k] += counts[k];
      }
      ls_sum += loss.loss_s;
      lt_sum += loss.loss_t;
      total_sum += loss.total;
      ++step;
    }
    rec.loss_s = ls_sum / static_cast<double>(per_epoch);
    rec.loss_t = lt_sum / static_cast<double>(per_epoch);
    rec.loss_total = total_sum / static_cast<double>(per_epoch);
    if (label_rows) rec.selector_label_accuracy = static_cast<double>(label_hits) / label_rows;
    detail::finish_phase2_epoch(rec, b, cfg, val);
    report.epochs.push_back(std::move(rec));
  }
  ensure(b.delegator.extractor == frozen.extractor && b.delegator.predictor == frozen.predictor,
         "frozen delegator modules changed during phase 2");
  b.phase_completed = "phase2";
}

/// Plain cross-entropy training of one network, shuffled by `shuffle_seed`.
inline double train_plain(nn::Mlp& net, const data::Dataset& train, std::size_t epochs,
                          std::size_t batch_size, double lr, double momentum,
                          std::uint64_t shuffle_seed) {
  std::mt19937_64 rng(shuffle_seed);
  nn::SgdState opt(lr, momentum);
  const std::size_t total = epochs * batches_per_epoch(train.size(), batch_size, false);
  std::size_t step = 0;
  double last = 0.0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& rows : epoch_batches(train.size(), batch_size, rng, false)) {
      opt.learning_rate = cosine_lr(lr, step++, total);
      const Matrix x = gather_rows(train.features, rows);
      const auto y = gather_labels(train.labels, rows);
      const auto c = nn::forward(net, x);
      const auto lg = nn::weighted_cross_entropy(nn::softmax_rows(c.output), y, uniform(rows.size()));
      nn::sgd_step(net, nn::backward(net, c, lg.grad).grads, opt);
      sum += lg.loss;
      ++count;
    }
    last = sum / static_cast<double>(std::max<std::size_t>(count, 1));
  }
  return last;
}

/// Soft gate-value baseline: the mixture Σ_k P_k·p_k is trained with a single
/// cross-entropy, which makes the selector trainable without labels.
inline void train_gate_value(models::Bundle& b, const data::Dataset& train,
                             const TrainConfig& cfg, TrainReport& report,
                             const data::Dataset* val = nullptr) {
  require(b.phase_completed == "phase1", "train_gate_value: phase 1 has not completed");
  const std::size_t n = b.experts.size();
  std::mt19937_64 rng(sub_seed(cfg.seed, "phase2/shuffle"));
  detail::Optimizers opt(cfg, n);
  const std::size_t per_epoch = batches_per_epoch(train.size(), cfg.batch_size, true);
  require(per_epoch > 0, "train_gate_value: dataset smaller than one batch");
  const std::size_t total = cfg.epochs_phase2 * per_epoch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    rec.learning_rate = cosine_lr(cfg.lr_phase2, step, total);
    double loss_sum = 0.0;
    for (const auto& rows : epoch_batches(train.size(), cfg.batch_size, rng, true)) {
      opt.set_lr(cosine_lr(cfg.lr_phase2, step++, total));
      const Matrix x = gather_rows(train.features, rows);
      const auto y = gather_labels(train.labels, rows);
      const auto f = joint_forward(b.delegator, b.experts, x);
      const std::size_t m = rows.size();
      const double inv_m = 1.0 / static_cast<double>(m);
      Matrix g_sel(m, n, 0.0);
      std::vector<Matrix> g_exp;
      for (std::size_t k = 0; k < n; ++k) g_exp.emplace_back(m, f.expert_probs[k].cols(), 0.0);
      double loss = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        double q = 0.0;
        for (std::size_t k = 0; k < n; ++k) q += f.selection_probs(j, k) * f.expert_probs[k](j, y[j]);
        q = std::max(q, nn::kProbFloor);
        loss -= inv_m * std::log(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double pk = f.selection_probs(j, k);
          const double resp = pk * f.expert_probs[k](j, y[j]) / q;
          g_sel(j, k) = inv_m * (pk - resp);
          for (std::size_t c = 0; c < g_exp[k].cols(); ++c)
            g_exp[k](j, c) = inv_m * resp * f.expert_probs[k](j, c);
          g_exp[k](j, y[j]) -= inv_m * resp;
        }
      }
      if (n > 1)
        nn::sgd_step(b.delegator.selector,
                     nn::backward(b.delegator.selector, f.selector, g_sel).grads, opt.selector);
      for (std::size_t k = 0; k < n; ++k)
        nn::sgd_step(b.experts[k].network,
                     nn::backward(b.experts[k].network, f.experts[k], g_exp[k]).grads,
                     opt.experts[k]);
      loss_sum += loss;
    }
    rec.loss_total = loss_sum / static_cast<double>(per_epoch);
    detail::finish_phase2_epoch(rec, b, cfg, val);
    report.epochs.push_back(std::move(rec));
  }
  b.phase_completed = "phase2";
}

/// Balanced random partition of classes into n groups (sizes differ by at
/// most one).
inline std::vector<std::size_t> random_class_partition(std::size_t classes, std::size_t n,
                                                       std::uint64_t seed) {
  require(n >= 1, "random_class_partition: need at least one group");
  require(classes >= n, "random_class_partition: fewer classes than experts");
  std::vector<std::size_t> order(classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> group(classes);
  for (std::size_t i = 0; i < classes; ++i) group[order[i]] = i % n;
  return group;
}

/// Random-partition category baseline: each expert owns a random group of
/// classes; samples are assigned by the group of their rough prediction and
/// expert losses are smoothed and normalized as in CoE.
inline void train_category_random(models::Bundle& b, const data::Dataset& train,
                                  const TrainConfig& cfg, TrainReport& report,
                                  const data::Dataset* val = nullptr) {
  require(b.phase_completed == "phase1", "train_category_random: phase 1 has not completed");
  const std::size_t n = b.experts.size();
  b.class_groups = random_class_partition(train.classes, n, sub_seed(cfg.seed, "category/partition"));
  std::mt19937_64 rng(sub_seed(cfg.seed, "phase2/shuffle"));
  detail::Optimizers opt(cfg, n);
  const std::size_t per_epoch = batches_per_epoch(train.size(), cfg.batch_size, true);
  require(per_epoch > 0, "train_category_random: dataset smaller than one batch");
  const std::size_t total = cfg.epochs_phase2 * per_epoch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_phase2; ++epoch) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    rec.learning_rate = cosine_lr(cfg.lr_phase2, step, total);
    rec.assignment_counts.assign(n, 0);
    double loss_sum = 0.0;
    for (const auto& rows : epoch_batches(train.size(), cfg.batch_size, rng, true)) {
      opt.set_lr(cosine_lr(cfg.lr_phase2, step, total));
      const Matrix x = gather_rows(train.features, rows);
      const auto y = gather_labels(train.labels, rows);
      const auto rough = nn::softmax_rows(
          nn::apply(b.delegator.predictor, nn::apply(b.delegator.extractor, x)));
      std::vector<std::size_t> idx(rows.size());
      for (std::size_t j = 0; j < rows.size(); ++j) idx[j] = b.class_groups[argmax(rough.row(j))];
      const OneHotMatrix a(std::move(idx), n);
      const double alpha = wgm::alpha_schedule(step, total, cfg.alpha_start, cfg.alpha_end);
      const Matrix w = wgm::normalize_weights(wgm::smooth_assignment(a, alpha), rows.size(), n);
      std::vector<nn::ForwardCache> caches;
      std::vector<Matrix> probs;
      for (const auto& e : b.experts) {
        caches.push_back(nn::forward(e.network, x));
        probs.push_back(nn::softmax_rows(caches.back().output));
      }
      const auto lt = expert_loss(probs, y, w);
      for (std::size_t k = 0; k < n; ++k)
        nn::sgd_step(b.experts[k].network,
                     nn::backward(b.experts[k].network, caches[k], lt.grads[k]).grads,
                     opt.experts[k]);
      const auto counts = a.column_counts();
      for (std::size_t k = 0; k < n; ++k) rec.assignment_counts[k] += counts[k];
      loss_sum += lt.loss;
      ++step;
    }
    rec.loss_t = rec.loss_total = loss_sum / static_cast<double>(per_epoch);
    detail::finish_phase2_epoch(rec, b, cfg, val);
    report.epochs.push_back(std::move(rec));
  }
  b.phase_completed = "phase2";
}

/// Naive ensemble: every expert trained independently with plain
/// cross-entropy on its own shuffle stream.
inline void train_ensemble(models::Bundle& b, const data::Dataset& train, const TrainConfig& cfg,
                           TrainReport& report) {
  require(train.size() > 0, "train_ensemble: empty dataset");
  for (std::size_t k = 0; k < b.experts.size(); ++k) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = k;
    rec.learning_rate = cfg.lr_phase2;
    rec.loss_total = train_plain(b.experts[k].network, train, cfg.epochs_phase2, cfg.batch_size,
                                 cfg.lr_phase2, cfg.momentum,
                                 sub_seed(cfg.seed, "ensemble/shuffle/" + std::to_string(k)));
    report.epochs.push_back(std::move(rec));
  }
  b.phase_completed = "phase2";
}

struct TrainResult {
  models::Bundle bundle;
  TrainReport report;
};

/// Number of experts a configuration actually trains. Without label
/// generation the selector has no supervision and CoE reduces to a single
/// expert behind the delegator's early exit.
inline std::size_t effective_experts(const TrainConfig& cfg) {
  if (cfg.mode == Mode::single_expert) return 1;
  if (cfg.mode == Mode::coe && cfg.has(Ablation::LGM_off)) return 1;
  return cfg.n_experts;
}

/// Runs phase 1 for `bundle` unless it already completed.
inline void ensure_phase1(models::Bundle& b, const data::Dataset& train, const TrainConfig& cfg,
                          TrainReport& report, const data::Dataset* val) {
  if (b.phase_completed != "none") return;
  train_phase1(b.delegator, train, cfg, report, val);
  b.phase_completed = "phase1";
}

/// Trains a complete bundle for `cfg.mode`. `phase1` optionally provides an
/// already trained delegator (extractor and predictor) to start from.
inline TrainResult train(const TrainConfig& cfg, const data::Dataset& train_set,
                         const data::Dataset* val = nullptr,
                         const models::Delegator* phase1 = nullptr) {
  cfg.validate();
  train_set.validate();
  require(train_set.size() > 0, "train: empty dataset");
  TrainConfig run = cfg;
  run.n_experts = effective_experts(cfg);
  if (!run.expert_width_scales.empty() && run.expert_width_scales.size() != run.n_experts)
    run.expert_width_scales.resize(run.n_experts);
  TrainResult r{models::make_bundle(run.architecture(train_set.dim(), train_set.classes), cfg.seed,
                                    cfg.mode),
                {}};
  if (phase1) {
    require(phase1->extractor.input_dim() == train_set.dim(), "train: phase-1 delegator dims");
    r.bundle.delegator.extractor = phase1->extractor;
    r.bundle.delegator.predictor = phase1->predictor;
    r.bundle.phase_completed = "phase1";
  }
  switch (cfg.mode) {
    case Mode::coe:
      ensure_phase1(r.bundle, train_set, run, r.report, val);
      train_phase2(r.bundle, train_set, run, r.report, val);
      break;
    case Mode::gate_value_soft:
      ensure_phase1(r.bundle, train_set, run, r.report, val);
      train_gate_value(r.bundle, train_set, run, r.report, val);
      break;
    case Mode::category_random:
      ensure_phase1(r.bundle, train_set, run, r.report, val);
      train_category_random(r.bundle, train_set, run, r.report, val);
      break;
    case Mode::single_expert: {
      ensure_phase1(r.bundle, train_set, run, r.report, val);
      EpochRecord rec;
      rec.phase = 2;
      rec.learning_rate = run.lr_phase2;
      rec.loss_total = train_plain(r.bundle.experts[0].network, train_set, run.epochs_phase2,
                                   run.batch_size, run.lr_phase2, run.momentum,
                                   sub_seed(run.seed, "phase2/shuffle"));
      r.bundle.phase_completed = "phase2";
      detail::finish_phase2_epoch(rec, r.bundle, run, val);
      r.report.epochs.push_back(std::move(rec));
      break;
    }
    case Mode::ensemble:
      train_ensemble(r.bundle, train_set, run, r.report);
      break;
  }
  return r;
}

}  // namespace coe::train

#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "crackkw/detector.hpp"
#include "crackkw/iou_losses.hpp"
#include "crackkw/metrics.hpp"
#include "crackkw/optim.hpp"
#include "crackkw/synthetic.hpp"

namespace crackkw {

/// Thrown when the training loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double loss)
      : std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct ToyConfig {
  SgdConfig sgd;
  ModelConfig model;
  LossConfig box_loss;  ///< kind fpiou or ciou in the ablation
  double obj_pos_weight = 1.0;
  double mask_pos_weight = 4.0;
  double obj_gain = 1.0;
  double box_gain = 7.5;
  double mask_gain = 1.0;
  bool scale_by_batch = false;  ///< multiply the loss by the batch size (sum over images)
  InferenceConfig inference;
  EvalOptions eval;
  std::optional<AugmentConfig> augment;  ///< applied per sample on the fly when set
  std::string eval_split = "test";
  bool eval_every_epoch = true;
  std::size_t max_eval_images = 0;  ///< 0: the whole split
  std::size_t bn_calib_batches = 8;  ///< training batches averaged into the norm statistics before evaluation
};

struct StepRecord {
  std::size_t step = 0;
  int epoch = 0;
  double loss = 0.0, obj = 0.0, box = 0.0, mask = 0.0;
};

struct TrainResult {
  std::vector<EvalReport> epochs;  ///< one per evaluated epoch
  std::vector<StepRecord> trace;
  std::unique_ptr<TinyDetector> model;
};

namespace detail {

inline Tensor stack_images(const std::vector<const CrackSample*>& batch) {
  const std::size_t S = batch.front()->height();
  Tensor t(Shape{batch.size(), 1, S, S});
  for (std::size_t n = 0; n < batch.size(); ++n)
    std::copy(batch[n]->image.storage().begin(), batch[n]->image.storage().end(), t.storage().begin() + long(n * S * S));
  return t;
}

inline Tensor stack_masks(const std::vector<const CrackSample*>& batch) {
  const std::size_t S = batch.front()->height();
  Tensor t(Shape{batch.size(), S, S});
  for (std::size_t n = 0; n < batch.size(); ++n)
    std::copy(batch[n]->mask.storage().begin(), batch[n]->mask.storage().end(), t.storage().begin() + long(n * S * S));
  return t;
}

}  // namespace detail

struct LossParts {
  Var total;
  double obj = 0.0, box = 0.0, mask = 0.0;
};

/// Objectness WCE summed over cells and divided by the positive count, mean
/// box loss over positive cells, mean mask WCE per pixel. The weighted sum is
/// multiplied by the batch size when scale_by_batch is set.
inline LossParts detector_loss(Graph& g, const DetectorOutput& out, const std::vector<const CrackSample*>& batch,
                               const ToyConfig& cfg) {
  (void)g;
  const auto& mc = cfg.model;
  std::vector<std::vector<Box>> gts;
  for (const auto* s : batch) gts.push_back(s->boxes);
  const auto targets = assign_targets(gts, mc.grid(), double(mc.stride()));
  const double N = double(batch.size());
  const double positives = std::max<double>(1.0, double(targets.cells.size()));
  WceConfig obj_cfg{{1.0, cfg.obj_pos_weight}, positives};
  Var obj = weighted_cross_entropy(out.obj, targets.objectness, obj_cfg);
  WceConfig mask_cfg{{1.0, cfg.mask_pos_weight}, N * double(mc.image_size * mc.image_size)};
  Var mask = weighted_cross_entropy(out.mask, detail::stack_masks(batch), mask_cfg);
  LossParts parts;
  parts.obj = obj.value().item();
  parts.mask = mask.value().item();
  Var total = add(scale(obj, cfg.obj_gain), scale(mask, cfg.mask_gain));
  if (!targets.cells.empty()) {
    Var corners = decode_boxes(out.reg, targets.cells, double(mc.stride()), mc.box_base);
    Var box = box_regression_loss(corners, targets.boxes, cfg.box_loss);
    parts.box = box.value().item();
    total = add(total, scale(box, cfg.box_gain));
  }
  parts.total = cfg.scale_by_batch ? scale(total, N) : total;
  return parts;
}

/// Boxes, masks and the report for `indices` of the dataset. Batched, no gradients.
inline EvalReport evaluate_model(TinyDetector& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                                 const ToyConfig& cfg, int epoch, Predictions* keep = nullptr) {
  Predictions pred;
  GroundTruth gts;
  std::vector<Tensor> gt_masks;
  const std::size_t B = std::max<std::size_t>(cfg.sgd.batch, 1);
  for (std::size_t start = 0; start < indices.size(); start += B) {
    std::vector<const CrackSample*> batch;
    for (std::size_t k = start; k < std::min(indices.size(), start + B); ++k) batch.push_back(&ds.samples[indices[k]]);
    Graph g;
    const auto out = model.forward(g, g.constant(detail::stack_images(batch)), epoch, false);
    decode_predictions(out, model.config(), cfg.inference, start, pred);
    for (const auto* s : batch) {
      gts.push_back(s->boxes);
      gt_masks.push_back(s->mask);
    }
  }
  EvalReport r = evaluate(pred.detections, gts, cfg.eval);
  add_masks(r, pred.masks, gt_masks);
  if (keep) *keep = std::move(pred);
  return r;
}

/// Replaces the running norm statistics with the equal-weight average over
/// the first `batches` batches of `train_idx` (no gradients, no augmentation).
inline void recalibrate_norms(TinyDetector& model, const Dataset& ds, const std::vector<std::size_t>& train_idx,
                              std::size_t batch_size, std::size_t batches, int epoch) {
  auto norms = model.norm_stats();
  for (auto* st : norms) st->mean.fill(0.0), st->var.fill(0.0);
  std::size_t k = 0;
  for (std::size_t start = 0; start < train_idx.size() && k < batches; start += batch_size, ++k) {
    for (auto* st : norms) st->momentum = 1.0 / double(k + 1);
    std::vector<const CrackSample*> batch;
    for (std::size_t i = start; i < std::min(train_idx.size(), start + batch_size); ++i) batch.push_back(&ds.samples[train_idx[i]]);
    Graph g;
    model.forward(g, g.constant(detail::stack_images(batch)), epoch, true);
  }
  for (auto* st : norms) st->momentum = NormStats{}.momentum;
}

using EpochObserver = std::function<void(int epoch, const EvalReport&)>;

/// Trains on `train_idx` and evaluates on `eval_idx` after every epoch (or
/// once at the end when eval_every_epoch is false). Bit-reproducible from
/// cfg.sgd.seed.
inline TrainResult train_toy(const Dataset& ds, const std::vector<std::size_t>& train_idx,
                             const std::vector<std::size_t>& eval_idx, const ToyConfig& cfg,
                             const EpochObserver& observer = {}) {
  cfg.sgd.validate();
  if (train_idx.empty()) throw std::invalid_argument("train_toy: empty training set");
  if (ds.size != cfg.model.image_size) {
    throw std::invalid_argument("train_toy: dataset images are " + std::to_string(ds.size) + " px, model expects " +
                                std::to_string(cfg.model.image_size));
  }
  TrainResult res;
  res.model = std::make_unique<TinyDetector>(cfg.model, derive_seed(cfg.sgd.seed, 1));
  auto& model = *res.model;
  Sgd opt(model.parameters(), cfg.sgd);
  std::vector<std::size_t> eval_use = eval_idx;
  if (cfg.max_eval_images && eval_use.size() > cfg.max_eval_images) eval_use.resize(cfg.max_eval_images);

  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.sgd.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.sgd.seed, 1000 + std::uint64_t(epoch)));
    const auto perm = rng.permutation(train_idx.size());
    for (std::size_t start = 0; start < perm.size(); start += cfg.sgd.batch) {
      std::vector<CrackSample> augmented;
      std::vector<const CrackSample*> batch;
      const std::size_t end = std::min(perm.size(), start + cfg.sgd.batch);
      augmented.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const CrackSample& s = ds.samples[train_idx[perm[k]]];
        if (cfg.augment) {
          augmented.push_back(augment(s, *cfg.augment, rng));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      opt.zero_grad();
      Graph g;
      const auto out = model.forward(g, g.constant(detail::stack_images(batch)), epoch, true);
      const auto parts = detector_loss(g, out, batch, cfg);
      const double loss = parts.total.value().item();
      if (!std::isfinite(loss)) throw DivergenceError(step, loss);
      g.backward(parts.total);
      opt.step();
      res.trace.push_back({step, epoch, loss, parts.obj, parts.box, parts.mask});
      ++step;
    }
    const bool last = epoch + 1 == cfg.sgd.epochs;
    if (!eval_use.empty() && (cfg.eval_every_epoch || last)) {
      if (cfg.bn_calib_batches) recalibrate_norms(model, ds, train_idx, cfg.sgd.batch, cfg.bn_calib_batches, epoch);
      res.epochs.push_back(evaluate_model(model, ds, eval_use, cfg, epoch));
      if (observer) observer(epoch, res.epochs.back());
    }
  }
  return res;
}

inline TrainResult train_toy(const Dataset& ds, const ToyConfig& cfg, const EpochObserver& observer = {}) {
  return train_toy(ds, ds.indices("train"), ds.indices(cfg.eval_split), cfg, observer);
}

/// Exponential moving average with smoothing 2 / (window + 1).
inline std::vector<double> ema(const std::vector<double>& xs, std::size_t window = 20) {
  const double a = 2.0 / (double(window) + 1.0);
  std::vector<double> out;
  double m = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) out.push_back(m = i == 0 ? xs[0] : a * xs[i] + (1 - a) * m);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment tables.

struct AblationFlags {
  bool kwconv = false, ta = false, fpiou = false;
};

struct AblationRow {
  AblationFlags flags;
  EvalReport report;
  std::vector<StepRecord> trace;
};

/// All 8 combinations in binary order: row 1 is the baseline (plain conv,
/// no TA, CIoU), row 8 enables everything.
inline std::vector<AblationFlags> ablation_grid() {
  std::vector<AblationFlags> g;
  for (int i = 0; i < 8; ++i) g.push_back({bool(i & 4), bool(i & 2), bool(i & 1)});
  return g;
}

inline ToyConfig with_flags(ToyConfig cfg, const AblationFlags& f) {
  cfg.model.kwconv = f.kwconv;
  cfg.model.ta = f.ta;
  cfg.box_loss.kind = f.fpiou ? LossKind::fpiou : LossKind::ciou;
  return cfg;
}

/// Worker threads for independent runs: CRACKKW_WORKERS when set, otherwise
/// the hardware concurrency. Results never depend on the count.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("CRACKKW_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return std::size_t(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// fn(i) for i in [0, n) on up to `workers` threads; results stay in index
/// order and the first exception (by index) is rethrown.
template <class T>
std::vector<T> parallel_map(std::size_t n, const std::function<T(std::size_t)>& fn, std::size_t workers = worker_count()) {
  std::vector<std::optional<T>> out(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        out[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<T> res;
  for (auto& o : out) res.push_back(std::move(*o));
  return res;
}

inline std::vector<AblationRow> ablation_run(const Dataset& ds, const ToyConfig& base,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  const auto grid = ablation_grid();
  auto rows = parallel_map<AblationRow>(grid.size(), [&](std::size_t i) {
    ToyConfig cfg = with_flags(base, grid[i]);
    cfg.eval_every_epoch = false;
    auto res = train_toy(ds, cfg);
    return AblationRow{grid[i], res.epochs.back(), std::move(res.trace)};
  });
  if (on_row)
    for (const auto& r : rows) on_row(r);
  return rows;
}

enum class RobustKind { subsample, augment };

struct RobustRow {
  std::string label;  ///< "30%" ... "100%", or "No" / "Yes"
  EvalReport report;
  std::vector<StepRecord> trace;
};

inline std::vector<double> robustness_fractions() { return {0.3, 0.5, 0.7, 0.9, 1.0}; }

/// Subsample mode trains on nested fractions of the training split; augment
/// mode trains with and without augmentation. The test split never changes.
inline std::vector<RobustRow> robustness_run(RobustKind kind, const Dataset& ds, const ToyConfig& base,
                                             const AugmentConfig& aug = {},
                                             const std::function<void(const RobustRow&)>& on_row = {}) {
  const auto train = ds.indices("train");
  const auto test = ds.indices(base.eval_split);
  ToyConfig cfg = base;
  cfg.eval_every_epoch = false;
  std::vector<RobustRow> rows;
  if (kind == RobustKind::subsample) {
    const auto fr = robustness_fractions();
    rows = parallel_map<RobustRow>(fr.size(), [&](std::size_t i) {
      const auto idx = subsample(train, fr[i], derive_seed(base.sgd.seed, 77));
      auto res = train_toy(ds, idx, test, cfg);
      return RobustRow{std::to_string(int(std::lround(fr[i] * 100))) + "%", res.epochs.back(), std::move(res.trace)};
    });
  } else {
    rows = parallel_map<RobustRow>(2, [&](std::size_t i) {
      ToyConfig c = cfg;
      c.augment = i == 1 ? std::optional<AugmentConfig>(aug) : std::nullopt;
      auto res = train_toy(ds, train, test, c);
      return RobustRow{i == 1 ? "Yes" : "No", res.epochs.back(), std::move(res.trace)};
    });
  }
  if (on_row)
    for (const auto& r : rows) on_row(r);
  return rows;
}

}  // namespace crackkw

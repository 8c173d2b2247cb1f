#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "vmscan/blocks.hpp"
#include "vmscan/io.hpp"
#include "vmscan/metrics.hpp"
#include "vmscan/optimizer.hpp"
#include "vmscan/synthetic.hpp"

namespace vmscan {

// ---- the 22-strategy experiment matrix ------------------------------------

struct ExperimentMatrix {
  std::vector<StrategySpec> specs;

  const StrategySpec& by_label(const std::string& label) const {
    for (const auto& s : specs)
      if (s.label == label) return s;
    throw std::out_of_range("ExperimentMatrix: no strategy labeled " + label);
  }
};

/// Exp1-12: the twelve single directions. Exp13-18: the six reversal pairs.
/// Exp19-21: the Z / diagonal / serpentine four-direction families.
/// Exp22: all eight of D1-D8.
inline ExperimentMatrix build_experiment_matrix() {
  using D = ScanDirection;
  ExperimentMatrix m;
  int exp = 1;
  for (int k = 1; k <= 12; ++k, ++exp)
    m.specs.push_back(expand_strategy({static_cast<D>(k)}, "Exp" + std::to_string(exp)));
  for (int k = 1; k <= 11; k += 2, ++exp)
    m.specs.push_back(expand_strategy({static_cast<D>(k), static_cast<D>(k + 1)},
                                      "Exp" + std::to_string(exp)));
  m.specs.push_back(expand_strategy({D::D1, D::D2, D::D3, D::D4}, "Exp19"));
  m.specs.push_back(expand_strategy({D::D5, D::D6, D::D7, D::D8}, "Exp20"));
  m.specs.push_back(expand_strategy({D::D9, D::D10, D::D11, D::D12}, "Exp21"));
  m.specs.push_back(expand_strategy({D::D1, D::D2, D::D3, D::D4, D::D5, D::D6, D::D7, D::D8},
                                    "Exp22"));
  return m;
}

// ---- configuration plumbing ------------------------------------------------

struct TrainConfig {
  long iterations = 2000;
  long batch = 8;
  double lr = 3e-4;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
  uint64_t seed = 0;
  long log_every = 50;
  long eval_every = 0;       // 0 disables periodic evaluation
  double target_miou = -1.0; // early exit once reached (needs eval_every > 0)
  bool augment = true;
};

inline StrategySpec strategy_from_string(const std::string& text) {
  if (text.rfind("Exp", 0) == 0) return build_experiment_matrix().by_label(text);
  std::vector<ScanDirection> dirs;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) dirs.push_back(parse_scan_direction(item));
  return expand_strategy(dirs, text);
}

inline ModelConfig model_config_from(const Config& c) {
  ModelConfig m;
  auto depths = c.get_longs("model", "stage_depths", {1, 1, 1, 1});
  auto dims = c.get_longs("model", "stage_dims", {16, 32, 64, 128});
  if (depths.size() != 4 || dims.size() != 4)
    throw std::invalid_argument("config: stage_depths and stage_dims need 4 entries");
  for (int i = 0; i < 4; ++i) {
    m.stage_depths[static_cast<size_t>(i)] = depths[static_cast<size_t>(i)];
    m.stage_dims[static_cast<size_t>(i)] = dims[static_cast<size_t>(i)];
  }
  m.state_dim = c.get_long("model", "state_dim", 8);
  m.patch = PatchConfig{c.get_long("model", "patch_size", 4), c.get_long("model", "stride", 4),
                        m.stage_dims[0]};
  m.num_classes = c.get_long("model", "num_classes", 6);
  m.strategy = strategy_from_string(c.get("model", "strategy", "Exp1"));
  m.validate();
  return m;
}

inline SyntheticSceneConfig scene_config_from(const Config& c) {
  SyntheticSceneConfig s;
  s.size = c.get_long("data", "image_size", 64);
  s.num_classes = c.get_long("data", "classes", c.get_long("model", "num_classes", 6));
  s.density = c.get_double("data", "density", 1.0);
  s.noise = c.get_double("data", "noise", 0.05);
  s.min_shapes_per_class = c.get_long("data", "min_shapes_per_class", 2);
  s.seed = static_cast<uint64_t>(c.get_long("data", "seed", 0));
  s.validate();
  return s;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.iterations = c.get_long("train", "iterations", 2000);
  t.batch = c.get_long("train", "batch", 8);
  t.lr = c.get_double("train", "lr", 3e-4);
  t.weight_decay = c.get_double("train", "weight_decay", 0.01);
  t.warmup_frac = c.get_double("train", "warmup_frac", 0.05);
  t.seed = static_cast<uint64_t>(c.get_long("train", "seed", 0));
  t.log_every = c.get_long("train", "log_every", 50);
  t.eval_every = c.get_long("train", "eval_every", 0);
  t.target_miou = c.get_double("train", "target_miou", -1.0);
  t.augment = c.get_long("train", "augment", 1) != 0;
  return t;
}

inline std::string longs_csv(const std::array<long, 4>& a) {
  std::string out;
  for (int i = 0; i < 4; ++i) {
    if (i) out += ",";
    out += std::to_string(a[static_cast<size_t>(i)]);
  }
  return out;
}

inline Config to_config(const ModelConfig& m, const SyntheticSceneConfig& s,
                        const TrainConfig& t) {
  Config c;
  c.set("model", "stage_depths", longs_csv(m.stage_depths));
  c.set("model", "stage_dims", longs_csv(m.stage_dims));
  c.set("model", "state_dim", std::to_string(m.state_dim));
  c.set("model", "patch_size", std::to_string(m.patch.patch_size));
  c.set("model", "stride", std::to_string(m.patch.stride));
  c.set("model", "num_classes", std::to_string(m.num_classes));
  c.set("model", "strategy", m.strategy.label.empty() ? "Exp1" : m.strategy.label);
  c.set("data", "image_size", std::to_string(s.size));
  c.set("data", "classes", std::to_string(s.num_classes));
  c.set("data", "density", format_double(s.density, 3));
  c.set("data", "noise", format_double(s.noise, 3));
  c.set("data", "min_shapes_per_class", std::to_string(s.min_shapes_per_class));
  c.set("data", "seed", std::to_string(s.seed));
  c.set("train", "iterations", std::to_string(t.iterations));
  c.set("train", "batch", std::to_string(t.batch));
  c.set("train", "lr", format_double(t.lr, 6));
  c.set("train", "weight_decay", format_double(t.weight_decay, 4));
  c.set("train", "warmup_frac", format_double(t.warmup_frac, 3));
  c.set("train", "seed", std::to_string(t.seed));
  return c;
}

inline std::string synthetic_class_name(long cls) {
  switch (cls) {
    case 0: return "background";
    case 1: return "road";
    case 2: return "building";
    case 3: return "water";
    case 4: return "vegetation";
    case 5: return "vehicle";
    default: return "class" + std::to_string(cls);
  }
}

// ---- training and evaluation ------------------------------------------------

struct RunResult {
  std::string label;
  uint64_t seed = 0;
  double miou = 0.0;
  std::vector<double> per_class_iou;
  std::vector<std::pair<long, double>> loss_curve;
  double wall_seconds = 0.0;
  long param_count = 0;
  double flops = 0.0;
  long iterations_run = 0;
  bool failed = false;
  std::string error;
};

inline ConfusionMatrix evaluate(const ModelConfig& cfg, const ParamStore& params,
                                const std::vector<Scene>& scenes,
                                const std::set<long>& excluded = {}) {
  ConfusionMatrix cm(cfg.num_classes, excluded);
  for (const Scene& sc : scenes) {
    Tape tape;
    auto tp = register_params(tape, params, false);
    Value logits = model_forward(tape, tape.leaf(sc.image.pixels), sc.image.height,
                                 sc.image.width, cfg, tp);
    const Tensor& l = tape.value(logits);
    const long pixels = l.dim(0), K = l.dim(1);
    std::vector<int> pred(static_cast<size_t>(pixels));
    for (long p = 0; p < pixels; ++p) {
      long best = 0;
      for (long k = 1; k < K; ++k)
        if (l[p * K + k] > l[p * K + best]) best = k;
      pred[static_cast<size_t>(p)] = static_cast<int>(best);
    }
    cm.update(pred, sc.mask);
  }
  return cm;
}

/// AdamW training with the warmup + polynomial schedule. Aborts with a
/// diagnostic on divergence. Deterministic for a fixed (cfg, data, seed).
inline RunResult train(const ModelConfig& cfg, const Dataset& data, const TrainConfig& tc,
                       ParamStore* out_params = nullptr,
                       const std::function<void(long, double)>& progress = {}) {
  cfg.validate();
  if (data.train.empty() || data.val.empty())
    throw std::invalid_argument("train: dataset has empty splits");

  const auto t_start = std::chrono::steady_clock::now();
  RunResult res;
  res.label = cfg.strategy.label;
  res.seed = tc.seed;
  res.param_count = param_count(cfg);
  res.flops = estimate_flops(cfg, data.train[0].image.height, data.train[0].image.width)
                  .total_flops;

  ParamStore params = init_params(cfg, seed_hash(tc.seed, "init", 0));
  std::vector<Tensor*> param_ptrs;
  for (auto& [name, t] : params.items) param_ptrs.push_back(&t);
  OptimizerState opt;
  opt.init(param_ptrs);
  AdamWConfig acfg;
  acfg.lr = tc.lr;
  acfg.weight_decay = tc.weight_decay;

  Rng sample_rng(seed_hash(tc.seed, "sample", 1));
  const long H = data.train[0].image.height, W = data.train[0].image.width;

  for (long it = 0; it < tc.iterations; ++it) {
    const double lr = poly_warmup_lr(it, tc.iterations, tc.lr, tc.warmup_frac);
    Tape tape;
    auto tp = register_params(tape, params, true);
    Value loss{-1};
    for (long b = 0; b < tc.batch; ++b) {
      const Scene& base = data.train[static_cast<size_t>(
          sample_rng.randint(0, static_cast<long>(data.train.size()) - 1))];
      const Scene sample = tc.augment ? augment(base, sample_rng) : base;
      Value img = tape.leaf(sample.image.pixels);
      Value logits = model_forward(tape, img, H, W, cfg, tp);
      Value l = tape.softmax_cross_entropy(logits, sample.mask);
      loss = (b == 0) ? l : tape.add(loss, l);
    }
    loss = tape.scale(loss, 1.0 / static_cast<double>(tc.batch));
    const double loss_val = tape.value(loss)[0];
    if (!std::isfinite(loss_val))
      throw std::runtime_error("train: diverged at iteration " + std::to_string(it) +
                               " (non-finite loss)");
    tape.backward(loss);

    std::vector<const Tensor*> grads;
    grads.reserve(param_ptrs.size());
    for (Value v : tp.values) grads.push_back(&tape.grad(v));
    adamw_step(param_ptrs, grads, opt, acfg, lr);

    if (tc.log_every > 0 && (it % tc.log_every == 0 || it == tc.iterations - 1))
      res.loss_curve.emplace_back(it, loss_val);
    if (progress) progress(it, loss_val);
    res.iterations_run = it + 1;

    if (tc.eval_every > 0 && tc.target_miou > 0 && (it + 1) % tc.eval_every == 0 &&
        it + 1 < tc.iterations) {
      const double m = evaluate(cfg, params, data.val).miou();
      if (m >= tc.target_miou) break;
    }
  }

  ConfusionMatrix cm = evaluate(cfg, params, data.val);
  res.miou = cm.miou();
  auto iou = cm.iou_per_class();
  res.per_class_iou.assign(iou.begin(), iou.end());
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (out_params) *out_params = std::move(params);
  return res;
}

// ---- the strategy matrix runner ---------------------------------------------

struct MatrixResult {
  std::vector<RunResult> rows;              // one per (strategy, seed)
  std::vector<std::string> labels;          // strategy order
  double across_strategy_spread = 0.0;      // max - min of per-strategy mean mIoU
  double within_strategy_seed_spread = 0.0; // mean of per-strategy max-min over seeds
};

/// Runs every (strategy, seed) pair on a bounded worker pool. Each run owns
/// an RNG stream derived from (master seed, label, seed); failures are
/// recorded and the matrix continues.
inline MatrixResult run_matrix(const std::vector<StrategySpec>& specs,
                               const ModelConfig& base_cfg, const Dataset& data,
                               const TrainConfig& base_tc, const std::vector<uint64_t>& seeds,
                               long workers = 1,
                               const std::function<void(const RunResult&)>& on_result = {}) {
  if (specs.empty() || seeds.empty())
    throw std::invalid_argument("run_matrix: need at least one strategy and one seed");
  MatrixResult out;
  for (const auto& s : specs) out.labels.push_back(s.label);
  out.rows.resize(specs.size() * seeds.size());

  std::atomic<size_t> next{0};
  std::mutex report_mu;
  auto worker = [&]() {
    for (;;) {
      const size_t q = next.fetch_add(1);
      if (q >= out.rows.size()) return;
      const size_t si = q / seeds.size();
      const size_t di = q % seeds.size();
      ModelConfig cfg = base_cfg;
      cfg.strategy = specs[si];
      TrainConfig tc = base_tc;
      tc.seed = seed_hash(base_tc.seed, specs[si].label, seeds[di]);
      RunResult r;
      try {
        r = train(cfg, data, tc);
      } catch (const std::exception& e) {
        r.failed = true;
        r.error = e.what();
      }
      r.label = specs[si].label;
      r.seed = seeds[di];
      out.rows[q] = std::move(r);
      if (on_result) {
        std::lock_guard<std::mutex> lock(report_mu);
        on_result(out.rows[q]);
      }
    }
  };

  const long n_workers = std::max<long>(1, std::min<long>(workers, static_cast<long>(out.rows.size())));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (long w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Spread statistics over successful runs.
  double best_mean = -1e300, worst_mean = 1e300, seed_spread_sum = 0.0;
  long scored_strategies = 0;
  for (size_t si = 0; si < specs.size(); ++si) {
    double mean = 0.0, lo = 1e300, hi = -1e300;
    long n = 0;
    for (size_t di = 0; di < seeds.size(); ++di) {
      const RunResult& r = out.rows[si * seeds.size() + di];
      if (r.failed) continue;
      mean += r.miou;
      lo = std::min(lo, r.miou);
      hi = std::max(hi, r.miou);
      ++n;
    }
    if (n == 0) continue;
    mean /= static_cast<double>(n);
    best_mean = std::max(best_mean, mean);
    worst_mean = std::min(worst_mean, mean);
    seed_spread_sum += hi - lo;
    ++scored_strategies;
  }
  if (scored_strategies > 0) {
    out.across_strategy_spread = best_mean - worst_mean;
    out.within_strategy_seed_spread = seed_spread_sum / static_cast<double>(scored_strategies);
  }
  return out;
}

// ---- result tables ------------------------------------------------------------

inline std::vector<std::string> result_header(long num_classes) {
  std::vector<std::string> h{"label", "seed", "mIoU"};
  for (long c = 0; c < num_classes; ++c) h.push_back("IoU_" + synthetic_class_name(c));
  h.insert(h.end(), {"params", "flops", "wall_seconds", "iterations", "status"});
  return h;
}

inline std::vector<std::string> result_row(const RunResult& r, long num_classes) {
  std::vector<std::string> row{r.label, std::to_string(r.seed),
                               r.failed ? "" : format_double(r.miou)};
  for (long c = 0; c < num_classes; ++c) {
    const bool have = !r.failed && c < static_cast<long>(r.per_class_iou.size()) &&
                      !std::isnan(r.per_class_iou[static_cast<size_t>(c)]);
    row.push_back(have ? format_double(r.per_class_iou[static_cast<size_t>(c)]) : "");
  }
  row.push_back(std::to_string(r.param_count));
  row.push_back(format_double(r.flops, 0));
  row.push_back(format_double(r.wall_seconds, 2));
  row.push_back(std::to_string(r.iterations_run));
  row.push_back(r.failed ? "failed: " + r.error : "ok");
  return row;
}

inline std::string matrix_csv(const MatrixResult& m, long num_classes) {
  std::string out = csv_row(result_header(num_classes));
  for (const auto& r : m.rows) out += csv_row(result_row(r, num_classes));
  out += csv_row({"# across_strategy_spread", format_double(m.across_strategy_spread, 6)});
  out += csv_row({"# within_strategy_seed_spread", format_double(m.within_strategy_seed_spread, 6)});
  return out;
}

inline std::string matrix_markdown(const MatrixResult& m, long num_classes) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : m.rows) rows.push_back(result_row(r, num_classes));
  std::string out = markdown_table(result_header(num_classes), rows);
  out += "\nacross-strategy spread (max-min of per-strategy mean mIoU): " +
         format_double(m.across_strategy_spread, 6) + "\n";
  out += "within-strategy seed spread (mean of per-strategy max-min): " +
         format_double(m.within_strategy_seed_spread, 6) + "\n";
  return out;
}

// ---- patching ablation ---------------------------------------------------------

struct AblationRow {
  long patch = 0;
  long stride = 0;
  double flops = 0.0;
  long params = 0;
  double miou = 0.0;
  bool skipped = false;
  std::string note;
};

inline const std::vector<std::pair<long, long>>& table2_pairs() {
  static const std::vector<std::pair<long, long>> pairs{
      {4, 4}, {8, 4}, {8, 8}, {16, 4}, {16, 8}, {16, 16}, {32, 8}, {32, 16}, {32, 32}};
  return pairs;
}

/// Fixes the strategy to D1 and varies (patch, stride); flops are quoted
/// for the training image size. Invalid pairs are kept as annotated rows.
inline std::vector<AblationRow> ablate_patching(const ModelConfig& base_cfg,
                                                const SyntheticSceneConfig& scene_cfg,
                                                const Dataset& data, const TrainConfig& tc,
                                                const std::vector<std::pair<long, long>>& pairs,
                                                const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (auto [patch, stride] : pairs) {
    AblationRow row;
    row.patch = patch;
    row.stride = stride;
    if (stride > patch) {
      row.skipped = true;
      row.note = "stride exceeds patch size";
    } else if (scene_cfg.size < patch) {
      row.skipped = true;
      row.note = "image smaller than patch";
    } else {
      ModelConfig cfg = base_cfg;
      cfg.patch = PatchConfig{patch, stride, cfg.stage_dims[0]};
      cfg.strategy = expand_strategy({ScanDirection::D1}, "Exp1");
      try {
        RunResult r = train(cfg, data, tc);
        row.flops = r.flops;
        row.params = r.param_count;
        row.miou = r.miou;
      } catch (const std::exception& e) {
        row.skipped = true;
        row.note = e.what();
      }
    }
    rows.push_back(row);
    if (on_row) on_row(rows.back());
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = csv_row({"patch_size", "stride", "flops", "params", "mIoU", "note"});
  for (const auto& r : rows) {
    out += csv_row({std::to_string(r.patch), std::to_string(r.stride),
                    r.skipped ? "" : format_double(r.flops, 0),
                    r.skipped ? "" : std::to_string(r.params),
                    r.skipped ? "" : format_double(r.miou), r.note});
  }
  return out;
}

}  // namespace vmscan

#pragma once

#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vmscan/autodiff.hpp"
#include "vmscan/grid_scan.hpp"
#include "vmscan/model_config.hpp"
#include "vmscan/patching.hpp"
#include "vmscan/rng.hpp"
#include "vmscan/tensor.hpp"

namespace vmscan {

/// Named, ordered parameter collection. Order is the serialization and
/// optimizer order; names key the checkpoint records.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& at(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return t;
    throw std::out_of_range("ParamStore: no parameter named " + name);
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool has(const std::string& name) const {
    for (auto& [n, t] : items)
      if (n == name) return true;
    return false;
  }
  long total_size() const {
    long n = 0;
    for (auto& [name, t] : items) n += t.size();
    return n;
  }
};

namespace detail {

inline Tensor xavier(std::vector<long> shape, long fan_in, long fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (long i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

/// Index of the last active stage; enforces that active stages form a
/// prefix (a blockless stage cannot precede one with blocks).
inline int last_active_stage(const ModelConfig& cfg) {
  int last = -1;
  for (int i = 0; i < 4; ++i)
    if (cfg.stage_depths[static_cast<size_t>(i)] > 0) last = i;
  for (int i = 0; i <= last; ++i)
    if (cfg.stage_depths[static_cast<size_t>(i)] == 0)
      throw std::invalid_argument("ModelConfig: active stages must form a prefix");
  return last;
}

}  // namespace detail

/// Initialise every model parameter. The scan slots share one S6 parameter
/// set per block, so the store is identical for all strategies.
inline ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  detail::last_active_stage(cfg);
  Rng rng(Rng::splitmix(seed) ^ 0x9027ab1e);
  ParamStore ps;
  auto put = [&ps](std::string name, Tensor t) {
    ps.items.emplace_back(std::move(name), std::move(t));
  };

  const long flat = cfg.patch.patch_size * cfg.patch.patch_size * cfg.in_channels;
  const long e1 = cfg.patch.embed_dim;
  put("embed.w", detail::xavier({flat, e1}, flat, e1, rng));
  put("embed.b", Tensor({e1}));

  for (int i = 0; i < 4; ++i) {
    const long d = cfg.stage_dims[static_cast<size_t>(i)];
    const long N = cfg.state_dim;
    if (i > 0 && cfg.stage_depths[static_cast<size_t>(i)] > 0) {
      const long dp = cfg.stage_dims[static_cast<size_t>(i - 1)];
      std::string pre = "down" + std::to_string(i) + ".";
      put(pre + "w", detail::xavier({4 * dp, d}, 4 * dp, d, rng));
      put(pre + "b", Tensor({d}));
    }
    for (long j = 0; j < cfg.stage_depths[static_cast<size_t>(i)]; ++j) {
      std::string pre = "stage" + std::to_string(i + 1) + ".block" + std::to_string(j) + ".";
      put(pre + "norm.g", Tensor::full({d}, 1.0));
      put(pre + "norm.b", Tensor({d}));
      put(pre + "in.w", detail::xavier({d, d}, d, d, rng));
      put(pre + "in.b", Tensor({d}));
      put(pre + "gate.w", detail::xavier({d, d}, d, d, rng));
      put(pre + "gate.b", Tensor({d}));
      // Residual branch starts silent: zero output projection.
      put(pre + "out.w", Tensor({d, d}));
      put(pre + "out.b", Tensor({d}));
      Tensor k({9, d});
      for (long ch = 0; ch < d; ++ch) k[4 * d + ch] = 1.0;  // near-identity tap
      for (long q = 0; q < k.size(); ++q) k[q] += rng.uniform(-0.05, 0.05);
      put(pre + "conv.k", std::move(k));
      Tensor wd({d});
      for (long q = 0; q < d; ++q) wd[q] = rng.uniform(-0.5, 0.5) / std::sqrt(static_cast<double>(d));
      put(pre + "scan.w_delta", std::move(wd));
      put(pre + "scan.b_delta", Tensor({d}));  // softplus(0) ~ 0.69 step size
      put(pre + "scan.wb", detail::xavier({N, d}, d, N, rng));
      put(pre + "scan.bb", Tensor({N}));
      put(pre + "scan.wc", detail::xavier({N, d}, d, N, rng));
      put(pre + "scan.bc", Tensor({N}));
      Tensor a({d, N});
      for (long c = 0; c < d; ++c)
        for (long n = 0; n < N; ++n) a[c * N + n] = -static_cast<double>(n + 1);
      put(pre + "scan.a", std::move(a));
      put(pre + "scan.d", Tensor::full({d}, 1.0));
    }
  }

  long pyramid = 0;
  for (int i = 0; i < 4; ++i)
    if (cfg.stage_depths[static_cast<size_t>(i)] > 0) pyramid += cfg.stage_dims[static_cast<size_t>(i)];
  if (pyramid == 0) pyramid = e1;
  put("head.w", detail::xavier({pyramid, cfg.num_classes}, pyramid, cfg.num_classes, rng));
  put("head.b", Tensor({cfg.num_classes}));
  return ps;
}

inline long param_count(const ModelConfig& cfg) {
  auto side = std::max<long>(cfg.patch.patch_size, 1);
  return estimate_flops(cfg, side, side).param_count;
}

/// Tape handles for every parameter in store order.
struct TapeParams {
  std::vector<Value> values;
  std::map<std::string, size_t> index;

  Value at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("TapeParams: no parameter named " + name);
    return values[it->second];
  }
};

inline TapeParams register_params(Tape& tape, const ParamStore& ps, bool requires_grad = true) {
  TapeParams tp;
  for (auto& [name, t] : ps.items) {
    tp.index[name] = tp.values.size();
    tp.values.push_back(tape.leaf(t, requires_grad));
  }
  return tp;
}

inline Tape::ScanParamValues scan_param_values(const TapeParams& tp, const std::string& pre) {
  return Tape::ScanParamValues{tp.at(pre + "scan.w_delta"), tp.at(pre + "scan.b_delta"),
                               tp.at(pre + "scan.wb"),      tp.at(pre + "scan.bb"),
                               tp.at(pre + "scan.wc"),      tp.at(pre + "scan.bc"),
                               tp.at(pre + "scan.a"),       tp.at(pre + "scan.d")};
}

/// 8-Direction Scan Block: serialize the grid along each slot's direction,
/// run the shared selective scan, restore canonical order, then merge by
/// summation in fixed slot order Dn1..Dn8. Slot evaluation order never
/// changes the result; eval_order exists to assert exactly that.
inline Value eight_d_scan(Tape& tape, Value tokens, const GridShape& grid,
                          const StrategySpec& spec, const Tape::ScanParamValues& pv,
                          long state_dim, const std::array<int, 8>* eval_order = nullptr) {
  if (grid.cells() < 1) throw std::invalid_argument("eight_d_scan: empty grid");
  std::array<Value, 8> slot_out;
  for (int q = 0; q < 8; ++q) {
    const int slot = eval_order ? (*eval_order)[static_cast<size_t>(q)] : q;
    const auto& entry = PathCache::instance().get(spec.slots[static_cast<size_t>(slot)], grid);
    Value serialized = tape.gather_rows(tokens, entry.path.order);
    Value scanned = tape.selective_scan(serialized, pv, state_dim);
    slot_out[static_cast<size_t>(slot)] = tape.gather_rows(scanned, entry.inverse.order);
  }
  Value merged = slot_out[0];
  for (int s = 1; s < 8; ++s) merged = tape.add(merged, slot_out[static_cast<size_t>(s)]);
  return merged;
}

/// VMS block: pre-norm residual with a DW-conv + multi-direction scan
/// branch gated by a linear + activation branch.
inline Value vms_block(Tape& tape, Value tokens, const GridShape& grid,
                       const StrategySpec& spec, const TapeParams& tp,
                       const std::string& pre, long state_dim) {
  Value n = tape.layer_norm(tokens, tp.at(pre + "norm.g"), tp.at(pre + "norm.b"));
  Value b1 = tape.linear(n, tp.at(pre + "in.w"), tp.at(pre + "in.b"));
  b1 = tape.dwconv3x3(b1, tp.at(pre + "conv.k"), grid.rows, grid.cols);
  b1 = tape.silu(b1);
  b1 = eight_d_scan(tape, b1, grid, spec, scan_param_values(tp, pre), state_dim);
  Value b2 = tape.silu(tape.linear(n, tp.at(pre + "gate.w"), tp.at(pre + "gate.b")));
  Value fused = tape.linear(tape.multiply(b1, b2), tp.at(pre + "out.w"), tp.at(pre + "out.b"));
  return tape.add(tokens, fused);
}

/// 2x2 concatenation + projection to the next stage width (ceil semantics).
inline Value downsample(Tape& tape, Value tokens, const GridShape& grid,
                        const TapeParams& tp, const std::string& pre) {
  Value cat = tape.downsample_concat2x2(tokens, grid.rows, grid.cols);
  return tape.linear(cat, tp.at(pre + "w"), tp.at(pre + "b"));
}

inline GridShape half_grid(const GridShape& g) {
  return GridShape{(g.rows + 1) / 2, (g.cols + 1) / 2};
}

/// Full encoder-decoder forward: per-pixel class logits [H*W, num_classes].
inline Value model_forward(Tape& tape, Value image, long height, long width,
                           const ModelConfig& cfg, const TapeParams& tp) {
  cfg.validate();
  const int last = detail::last_active_stage(cfg);
  const GridShape g1 = grid_dims(height, width, cfg.patch);

  Value tokens = tape.linear(
      tape.patch_gather(image, height, width, cfg.patch.patch_size, cfg.patch.stride),
      tp.at("embed.w"), tp.at("embed.b"));

  std::vector<std::pair<Value, GridShape>> pyramid;
  GridShape g = g1;
  for (int i = 0; i <= last; ++i) {
    if (i > 0) {
      tokens = downsample(tape, tokens, g, tp, "down" + std::to_string(i) + ".");
      g = half_grid(g);
    }
    for (long j = 0; j < cfg.stage_depths[static_cast<size_t>(i)]; ++j) {
      std::string pre = "stage" + std::to_string(i + 1) + ".block" + std::to_string(j) + ".";
      tokens = vms_block(tape, tokens, g, cfg.strategy, tp, pre, cfg.state_dim);
    }
    pyramid.emplace_back(tokens, g);
  }
  if (pyramid.empty()) pyramid.emplace_back(tokens, g);

  std::vector<Value> fused;
  for (auto& [feat, fg] : pyramid)
    fused.push_back(fg == g1 ? feat
                             : tape.upsample_bilinear(feat, fg.rows, fg.cols, g1.rows, g1.cols));
  Value cat = fused.size() == 1 ? fused[0] : tape.concat_cols(fused);
  Value tok_logits = tape.linear(cat, tp.at("head.w"), tp.at("head.b"));
  return tape.upsample_bilinear(tok_logits, g1.rows, g1.cols, height, width);
}

}  // namespace vmscan

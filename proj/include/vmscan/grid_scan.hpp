#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace vmscan {

struct GridShape {
  long rows = 0;
  long cols = 0;

  long cells() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

inline void validate_shape(const GridShape& g) {
  if (g.rows < 1 || g.cols < 1)
    throw std::invalid_argument("GridShape: rows and cols must be >= 1");
}

/// The 12 grid serialization orders. D1-D4 are Z-scans, D5-D8 diagonal
/// scans, D9-D12 serpentine scans; each even direction reverses the
/// preceding odd one.
enum class ScanDirection : int {
  D1 = 1, D2, D3, D4, D5, D6, D7, D8, D9, D10, D11, D12,
};

inline constexpr int kNumScanDirections = 12;

inline std::array<ScanDirection, 12> all_scan_directions() {
  std::array<ScanDirection, 12> out{};
  for (int i = 0; i < 12; ++i) out[static_cast<size_t>(i)] = static_cast<ScanDirection>(i + 1);
  return out;
}

inline std::string to_string(ScanDirection d) {
  return "D" + std::to_string(static_cast<int>(d));
}

inline ScanDirection parse_scan_direction(const std::string& s) {
  if (s.size() < 2 || (s[0] != 'D' && s[0] != 'd'))
    throw std::invalid_argument("scan direction must look like D<1..12>: " + s);
  int k = std::stoi(s.substr(1));
  if (k < 1 || k > 12) throw std::invalid_argument("scan direction out of range: " + s);
  return static_cast<ScanDirection>(k);
}

inline bool is_reversed_direction(ScanDirection d) { return static_cast<int>(d) % 2 == 0; }

/// D2 for D1, D1 for D2, and so on.
inline ScanDirection reverse_partner(ScanDirection d) {
  int k = static_cast<int>(d);
  return static_cast<ScanDirection>(k % 2 == 1 ? k + 1 : k - 1);
}

/// An explicit permutation of row-major cell indices. order[k] is the cell
/// visited at scan step k.
struct ScanPath {
  std::vector<long> order;
  GridShape shape;
  ScanDirection direction = ScanDirection::D1;

  bool operator==(const ScanPath&) const = default;
};

namespace detail {

inline void emit_forward(ScanDirection d, const GridShape& g, std::vector<long>& out) {
  const long R = g.rows, C = g.cols;
  auto cell = [C](long r, long c) { return r * C + c; };
  switch (d) {
    case ScanDirection::D1:  // row-major, rows top->bottom, left->right
      for (long r = 0; r < R; ++r)
        for (long c = 0; c < C; ++c) out.push_back(cell(r, c));
      break;
    case ScanDirection::D3:  // column-major, cols left->right, top->bottom
      for (long c = 0; c < C; ++c)
        for (long r = 0; r < R; ++r) out.push_back(cell(r, c));
      break;
    case ScanDirection::D5:  // anti-diagonals r+c ascending, r ascending
      for (long s = 0; s <= R + C - 2; ++s)
        for (long r = std::max(0L, s - C + 1); r <= std::min(R - 1, s); ++r)
          out.push_back(cell(r, s - r));
      break;
    case ScanDirection::D7:  // anti-diagonals r+c ascending, r descending
      for (long s = 0; s <= R + C - 2; ++s)
        for (long r = std::min(R - 1, s); r >= std::max(0L, s - C + 1); --r)
          out.push_back(cell(r, s - r));
      break;
    case ScanDirection::D9:  // row serpentine, first row left->right
      for (long r = 0; r < R; ++r) {
        if (r % 2 == 0)
          for (long c = 0; c < C; ++c) out.push_back(cell(r, c));
        else
          for (long c = C - 1; c >= 0; --c) out.push_back(cell(r, c));
      }
      break;
    case ScanDirection::D11:  // column serpentine, first column top->bottom
      for (long c = 0; c < C; ++c) {
        if (c % 2 == 0)
          for (long r = 0; r < R; ++r) out.push_back(cell(r, c));
        else
          for (long r = R - 1; r >= 0; --r) out.push_back(cell(r, c));
      }
      break;
    default:
      throw std::logic_error("emit_forward called with a reversed direction");
  }
}

}  // namespace detail

/// Materialize the permutation for one direction on one grid. Pure and
/// deterministic; every shape >= 1x1 is valid.
inline ScanPath generate_path(ScanDirection d, const GridShape& shape) {
  validate_shape(shape);
  ScanPath p;
  p.shape = shape;
  p.direction = d;
  p.order.reserve(static_cast<size_t>(shape.cells()));
  if (is_reversed_direction(d)) {
    detail::emit_forward(reverse_partner(d), shape, p.order);
    std::reverse(p.order.begin(), p.order.end());
  } else {
    detail::emit_forward(d, shape, p.order);
  }
  return p;
}

/// result.order[path.order[k]] == k for all k.
inline ScanPath invert_path(const ScanPath& p) {
  ScanPath inv;
  inv.shape = p.shape;
  inv.direction = p.direction;
  inv.order.assign(p.order.size(), 0);
  for (long k = 0; k < static_cast<long>(p.order.size()); ++k)
    inv.order[static_cast<size_t>(p.order[static_cast<size_t>(k)])] = k;
  return inv;
}

/// Gather row-major tokens into scan order: out[k] = tokens[order[k]].
template <typename T>
std::vector<T> apply_path(const ScanPath& p, const std::vector<T>& tokens) {
  if (static_cast<long>(tokens.size()) != p.shape.cells())
    throw std::invalid_argument("apply_path: token count " + std::to_string(tokens.size()) +
                                " does not match grid " + std::to_string(p.shape.cells()));
  std::vector<T> out;
  out.reserve(tokens.size());
  for (long idx : p.order) out.push_back(tokens[static_cast<size_t>(idx)]);
  return out;
}

/// Shapes recur across layers and batches, so (direction, shape) paths and
/// their inverses are interned once. Access is read-mostly and race-free.
class PathCache {
 public:
  struct Entry {
    ScanPath path;
    ScanPath inverse;
  };

  const Entry& get(ScanDirection d, const GridShape& shape) {
    std::lock_guard<std::mutex> lock(mu_);
    auto key = std::make_tuple(static_cast<int>(d), shape.rows, shape.cols);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      auto e = std::make_unique<Entry>();
      e->path = generate_path(d, shape);
      e->inverse = invert_path(e->path);
      it = cache_.emplace(key, std::move(e)).first;
    }
    return *it->second;
  }

  static PathCache& instance() {
    static PathCache cache;
    return cache;
  }

 private:
  std::mutex mu_;
  std::map<std::tuple<int, long, long>, std::unique_ptr<Entry>> cache_;
};

/// An ordered list of 1/2/4/8 scan directions plus its expansion onto the
/// eight scan slots Dn1..Dn8 of the 8D Scan Block.
struct StrategySpec {
  std::vector<ScanDirection> directions;
  std::array<ScanDirection, 8> slots{};
  std::string label;

  bool operator==(const StrategySpec&) const = default;
};

/// Fill rule: a strategy of n directions is repeated 8/n times cyclically.
inline StrategySpec expand_strategy(const std::vector<ScanDirection>& dirs,
                                    std::string label = "") {
  const size_t n = dirs.size();
  if (n != 1 && n != 2 && n != 4 && n != 8)
    throw std::invalid_argument("strategy must list 1, 2, 4 or 8 directions, got " +
                                std::to_string(n));
  StrategySpec s;
  s.directions = dirs;
  s.label = std::move(label);
  for (size_t i = 0; i < 8; ++i) s.slots[i] = dirs[i % n];
  return s;
}

}  // namespace vmscan

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crackkw/ops.hpp"
#include "crackkw/random.hpp"

// KernelWarehouse dynamic convolution.
//
// A stage owns one bank of n kernel units. Every layer registered with the
// stage splits its kernel into mixing positions of the unit shape; each
// position is a linear combination of all n units, weighted by attention
// computed from the layer input.

namespace crackkw {

/// Kernel extents in tensor order: out x in x kh x kw.
struct KernelShape {
  std::size_t out = 1, in = 1, kh = 1, kw = 1;

  std::size_t numel() const { return out * in * kh * kw; }
  Shape as_shape() const { return {out, in, kh, kw}; }
  friend bool operator==(const KernelShape&, const KernelShape&) = default;
};

inline std::string to_string(const KernelShape& k) { return shape_str(k.as_shape()); }

/// Splits a kernel evenly along the input-channel axis into m units.
inline std::vector<KernelShape> partition_kernel(const KernelShape& kernel, std::size_t m) {
  if (m == 0 || kernel.in % m != 0) {
    throw ShapeError("partition_kernel: input-channel extent " + std::to_string(kernel.in) + " of " +
                     to_string(kernel) + " is not divisible by m=" + std::to_string(m));
  }
  KernelShape unit = kernel;
  unit.in = kernel.in / m;
  return std::vector<KernelShape>(m, unit);
}

/// Unit shape shared by every layer of a stage: 1x1 spatial, and both channel
/// extents equal to the gcd of every channel extent in the stage.
/// {128x64x3x3, 256x128x3x3} -> 64x64x1x1.
inline KernelShape stage_unit_shape(const std::vector<KernelShape>& layers) {
  if (layers.empty()) throw ShapeError("stage_unit_shape: empty layer list");
  std::size_t g = 0;
  for (const auto& l : layers) {
    if (l.numel() == 0) throw ShapeError("stage_unit_shape: zero extent in " + to_string(l));
    g = std::gcd(g, std::gcd(l.out, l.in));
  }
  return KernelShape{g, g, 1, 1};
}

/// Number of unit-sized positions tiling `layer`.
inline std::size_t mixing_positions(const KernelShape& layer, const KernelShape& unit) {
  if (layer.out % unit.out || layer.in % unit.in || layer.kh % unit.kh || layer.kw % unit.kw) {
    throw ShapeError("unit " + to_string(unit) + " does not tile layer kernel " + to_string(layer));
  }
  return (layer.out / unit.out) * (layer.in / unit.in) * (layer.kh / unit.kh) * (layer.kw / unit.kw);
}

struct NafConfig {
  int tau_epochs = 20;
  double budget_b = 2.0;
};

/// Linear anneal from 1 at epoch 0 to 0 at tau_epochs.
inline double temperature(int epoch, const NafConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("temperature: epoch must be non-negative");
  if (cfg.tau_epochs <= 0) return 0.0;
  return std::max(0.0, 1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.tau_epochs));
}

/// Binary num_mixing x n initialization mask.
///
/// b >= 1: position i is bound to unit first_unit + i, which no other position uses.
/// b < 1: the first floor(b * num_mixing) positions each get a distinct unit; the
/// remaining rows stay empty so no unit serves two positions.
inline Tensor init_masks(std::size_t num_mixing, std::size_t n, double b, std::size_t first_unit = 0) {
  if (num_mixing == 0 || n == 0) throw std::invalid_argument("init_masks: empty mask");
  if (!(b > 0.0)) throw std::invalid_argument("init_masks: budget must be positive");
  const std::size_t assigned =
      b >= 1.0 ? num_mixing : static_cast<std::size_t>(std::floor(b * static_cast<double>(num_mixing)));
  if (first_unit + assigned > n) {
    throw std::invalid_argument("init_masks: " + std::to_string(n) + " units cannot give " + std::to_string(assigned) +
                                " positions exclusive units starting at unit " + std::to_string(first_unit));
  }
  Tensor beta(Shape{num_mixing, n}, 0.0);
  for (std::size_t i = 0; i < assigned; ++i) beta[i * n + first_unit + i] = 1.0;
  return beta;
}

/// Normalized attention: row i of z divided by the sum of its absolute values,
/// then blended with the mask as (1 - tau) * normalized + tau * beta.
inline Var naf(Var z, double tau, const Tensor& beta) {
  const Shape& zs = z.shape();
  if (zs.size() != 2 || beta.shape() != zs) {
    throw ShapeError("naf: scores " + shape_str(zs) + " incompatible with mask " + shape_str(beta.shape()));
  }
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("naf: tau must lie in [0, 1]");
  const std::size_t rows = zs[0], n = zs[1];
  const Tensor& tz = z.value();
  std::vector<double> norms(rows, 0.0);
  Tensor out(zs);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::abs(tz[i * n + j]);
    norms[i] = s;
    if (s == 0.0 && tau < 1.0) {
      throw std::domain_error("naf: score row " + std::to_string(i) + " is all zero; normalization undefined");
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double normalized = tau < 1.0 ? tz[i * n + j] / s : 0.0;
      out[i * n + j] = (1.0 - tau) * normalized + tau * beta[i * n + j];
    }
  }
  return z.graph->record("naf", std::move(out), {z}, [=](Graph& g, const Tensor& go) {
    double* gz = g.grad_data(z);
    if (!gz || tau >= 1.0) return;
    const Tensor& tz = g.value(z.id);
    for (std::size_t i = 0; i < rows; ++i) {
      const double s = norms[i];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * tz[i * n + j];
      for (std::size_t k = 0; k < n; ++k) {
        const double zk = tz[i * n + k];
        const double sign = zk > 0.0 ? 1.0 : (zk < 0.0 ? -1.0 : 0.0);
        gz[i * n + k] += (1.0 - tau) * (go[i * n + k] / s - sign * dot / (s * s));
      }
    }
  });
}

/// Builds a layer kernel from the unit bank (n x unit.numel()) and attention
/// (positions x n). Positions are ordered output-channel block first, then
/// input-channel block, then kernel row, then kernel column.
inline Var assemble_kernels(Var bank, Var alpha, const KernelShape& layer, const KernelShape& unit) {
  const std::size_t P = mixing_positions(layer, unit);
  const std::size_t U = unit.numel();
  if (bank.shape().size() != 2 || bank.shape()[1] != U) {
    throw ShapeError("assemble_kernels: bank " + shape_str(bank.shape()) + " does not hold units of " + to_string(unit));
  }
  const std::size_t n = bank.shape()[0];
  if (alpha.shape() != Shape{P, n}) {
    throw ShapeError("assemble_kernels: attention " + shape_str(alpha.shape()) + " but layer " + to_string(layer) +
                     " has " + std::to_string(P) + " positions over " + std::to_string(n) + " units");
  }
  const std::size_t bi = layer.in / unit.in;
  const std::size_t bh = layer.kh / unit.kh, bw = layer.kw / unit.kw;

  // Flat offset in the layer kernel of element e of position p.
  std::vector<std::size_t> offsets(P * U);
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t sw = p % bw, sh = (p / bw) % bh, ci = (p / (bw * bh)) % bi, co = p / (bw * bh * bi);
    for (std::size_t a = 0; a < unit.out; ++a) {
      for (std::size_t b = 0; b < unit.in; ++b) {
        for (std::size_t r = 0; r < unit.kh; ++r) {
          for (std::size_t t = 0; t < unit.kw; ++t) {
            const std::size_t e = ((a * unit.in + b) * unit.kh + r) * unit.kw + t;
            const std::size_t o = co * unit.out + a, c = ci * unit.in + b;
            const std::size_t y = sh * unit.kh + r, x = sw * unit.kw + t;
            offsets[p * U + e] = ((o * layer.in + c) * layer.kh + y) * layer.kw + x;
          }
        }
      }
    }
  }

  Tensor out(layer.as_shape(), 0.0);
  const Tensor& tb = bank.value();
  const Tensor& ta = alpha.value();
  std::vector<double> slice(U);
  for (std::size_t p = 0; p < P; ++p) {
    std::fill(slice.begin(), slice.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = ta[p * n + j];
      if (w == 0.0) continue;
      for (std::size_t e = 0; e < U; ++e) slice[e] += w * tb[j * U + e];
    }
    for (std::size_t e = 0; e < U; ++e) out[offsets[p * U + e]] = slice[e];
  }
  return bank.graph->record("assemble_kernels", std::move(out), {bank, alpha},
                            [=, offsets = std::move(offsets)](Graph& g, const Tensor& go) {
                              const Tensor& tb = g.value(bank.id);
                              const Tensor& ta = g.value(alpha.id);
                              double* gb = g.grad_data(bank);
                              double* ga = g.grad_data(alpha);
                              std::vector<double> gslice(U);
                              for (std::size_t p = 0; p < P; ++p) {
                                for (std::size_t e = 0; e < U; ++e) gslice[e] = go[offsets[p * U + e]];
                                for (std::size_t j = 0; j < n; ++j) {
                                  if (ga) {
                                    double acc = 0.0;
                                    for (std::size_t e = 0; e < U; ++e) acc += gslice[e] * tb[j * U + e];
                                    ga[p * n + j] += acc;
                                  }
                                  if (gb) {
                                    const double w = ta[p * n + j];
                                    if (w == 0.0) continue;
                                    for (std::size_t e = 0; e < U; ++e) gb[j * U + e] += w * gslice[e];
                                  }
                                }
                              }
                            });
}

/// Description of one stage: the layers that share a warehouse and the budget.
struct StageConfig {
  std::string stage_id = "stage";
  std::vector<KernelShape> layers;
  double budget_b = 2.0;
  /// Overrides n = ceil(b * total mixing positions) when set.
  std::optional<std::size_t> n_units;
};

struct ParamCount {
  std::size_t warehouse = 0;  ///< n * |unit|
  std::size_t scorers = 0;    ///< sum over layers of the scorer linear map
  std::size_t total = 0;
  std::vector<std::size_t> static_per_layer;  ///< parameters of the plain conv each layer replaces
  std::size_t static_total = 0;
};

inline std::size_t total_mixing_positions(const StageConfig& cfg, const KernelShape& unit) {
  std::size_t t = 0;
  for (const auto& l : cfg.layers) t += mixing_positions(l, unit);
  return t;
}

inline std::size_t warehouse_size(const StageConfig& cfg, const KernelShape& unit) {
  if (cfg.n_units) return *cfg.n_units;
  const double want = std::ceil(cfg.budget_b * static_cast<double>(total_mixing_positions(cfg, unit)));
  return std::max<std::size_t>(1, static_cast<std::size_t>(want));
}

/// Scorer per layer: input channels -> positions * n scores, plus bias.
inline std::size_t scorer_params(const KernelShape& layer, std::size_t positions, std::size_t n) {
  return positions * n * layer.in + positions * n;
}

inline ParamCount param_count(const StageConfig& cfg) {
  const KernelShape unit = stage_unit_shape(cfg.layers);
  const std::size_t n = warehouse_size(cfg, unit);
  ParamCount pc;
  pc.warehouse = n * unit.numel();
  for (const auto& l : cfg.layers) {
    pc.scorers += scorer_params(l, mixing_positions(l, unit), n);
    pc.static_per_layer.push_back(l.numel());
    pc.static_total += l.numel();
  }
  pc.total = pc.warehouse + pc.scorers;
  return pc;
}

/// A stage-scoped bank of kernel units with per-layer masks and scorers.
class Warehouse {
 public:
  struct Layer {
    KernelShape shape;
    std::size_t stride = 1, padding = 0;
    std::size_t positions = 0;
    std::size_t first_unit = 0;
    Tensor beta;
    Parameter scorer_w;  ///< (positions * n) x in
    Parameter scorer_b;  ///< positions * n
  };

  Warehouse(const StageConfig& cfg, Rng& rng, double scorer_init_std = 0.01) : stage_id_(cfg.stage_id) {
    unit_ = stage_unit_shape(cfg.layers);
    n_ = warehouse_size(cfg, unit_);
    budget_ = cfg.budget_b;
    const std::size_t total = total_mixing_positions(cfg, unit_);
    if (budget_ >= 1.0 && n_ < total) {
      throw std::invalid_argument("warehouse " + stage_id_ + ": b >= 1 needs n >= " + std::to_string(total) +
                                  " units, got " + std::to_string(n_));
    }
    // He initialization relative to the smallest fan-in among the layers.
    std::size_t fan_in = cfg.layers.front().in * cfg.layers.front().kh * cfg.layers.front().kw;
    for (const auto& l : cfg.layers) fan_in = std::min(fan_in, l.in * l.kh * l.kw);
    bank_ = Parameter(rng.normal_tensor(Shape{n_, unit_.numel()}, std::sqrt(2.0 / static_cast<double>(fan_in))));

    std::size_t next_unit = 0;
    for (const auto& l : cfg.layers) {
      Layer layer;
      layer.shape = l;
      layer.positions = mixing_positions(l, unit_);
      layer.first_unit = next_unit;
      layer.beta = init_masks(layer.positions, n_, budget_, next_unit);
      next_unit += budget_ >= 1.0
                       ? layer.positions
                       : static_cast<std::size_t>(std::floor(budget_ * static_cast<double>(layer.positions)));
      layer.scorer_w = Parameter(rng.normal_tensor(Shape{layer.positions * n_, l.in}, scorer_init_std));
      layer.scorer_b = Parameter(layer.beta.reshaped(Shape{layer.positions * n_}));
      layers_.push_back(std::move(layer));
    }
  }

  /// Rebuilds a warehouse from checkpointed parts.
  Warehouse(std::string stage_id, KernelShape unit, double budget, Parameter bank, std::vector<Layer> layers)
      : stage_id_(std::move(stage_id)), unit_(unit), n_(bank.value.shape()[0]), budget_(budget),
        bank_(std::move(bank)), layers_(std::move(layers)) {}

  void set_geometry(std::size_t layer_id, std::size_t stride, std::size_t padding) {
    layers_.at(layer_id).stride = stride;
    layers_.at(layer_id).padding = padding;
  }

  const std::string& stage_id() const { return stage_id_; }
  const KernelShape& unit_shape() const { return unit_; }
  std::size_t n() const { return n_; }
  double budget() const { return budget_; }
  Parameter& bank() { return bank_; }
  const Parameter& bank() const { return bank_; }
  std::size_t num_layers() const { return layers_.size(); }
  Layer& layer(std::size_t id) { return layers_.at(id); }
  const Layer& layer(std::size_t id) const { return layers_.at(id); }

  /// Unit j as a kernel-shaped tensor.
  Tensor unit(std::size_t j) const {
    const std::size_t U = unit_.numel();
    std::vector<double> d(bank_.value.data().begin() + static_cast<long>(j * U),
                          bank_.value.data().begin() + static_cast<long>((j + 1) * U));
    return Tensor(unit_.as_shape(), std::move(d));
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps{&bank_};
    for (auto& l : layers_) {
      ps.push_back(&l.scorer_w);
      ps.push_back(&l.scorer_b);
    }
    return ps;
  }

 private:
  std::string stage_id_;
  KernelShape unit_;
  std::size_t n_ = 0;
  double budget_ = 1.0;
  Parameter bank_;
  std::vector<Layer> layers_;
};

/// Attention scores for every sample: N x (positions * n).
inline Var kw_scores(Graph& g, Var input, Warehouse::Layer& layer) {
  const Shape& s = input.shape();
  Var pooled = reshape(pool_spatial(input, PoolMode::avg), Shape{s[0], s[1]});
  return linear(pooled, g.param(layer.scorer_w), g.param(layer.scorer_b));
}

/// Dynamic convolution: per sample, score the pooled input, normalize the
/// scores with the annealed NAF, assemble the kernel from the shared bank,
/// and convolve. No bias.
inline Var kwconv_forward(Graph& g, Var input, std::size_t layer_id, Warehouse& wh, const NafConfig& cfg, int epoch) {
  auto& layer = wh.layer(layer_id);
  const Shape& s = input.shape();
  if (s.size() != 4 || s[1] != layer.shape.in) {
    throw ShapeError("kwconv: input " + shape_str(s) + " incompatible with layer kernel " + to_string(layer.shape));
  }
  const double tau = temperature(epoch, cfg);
  Var bank = g.param(wh.bank());
  Var scores = kw_scores(g, input, layer);
  const std::size_t N = s[0], P = layer.positions, n = wh.n();
  std::vector<Var> outs;
  outs.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    Var z = reshape(slice(scores, 0, i, 1), Shape{P, n});
    Var alpha = naf(z, tau, layer.beta);
    Var kernel = assemble_kernels(bank, alpha, layer.shape, wh.unit_shape());
    outs.push_back(conv2d(N == 1 ? input : slice(input, 0, i, 1), kernel, layer.stride, layer.padding));
  }
  return N == 1 ? outs[0] : concat(outs, 0);
}

// ---------------------------------------------------------------------------
// Checkpoints: tensors in the binary format plus a JSON sidecar.

inline void save_warehouse(const Warehouse& wh, const NafConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string prefix = wh.stage_id();
  save_tensor((dir / (prefix + ".bank.ckt")).string(), wh.bank().value);
  nlohmann::json j;
  j["stage_id"] = wh.stage_id();
  j["n"] = wh.n();
  const auto& u = wh.unit_shape();
  j["unit_shape"] = {u.out, u.in, u.kh, u.kw};
  j["b"] = wh.budget();
  j["tau_epochs"] = cfg.tau_epochs;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < wh.num_layers(); ++l) {
    const auto& L = wh.layer(l);
    nlohmann::json jl;
    jl["kernel"] = {L.shape.out, L.shape.in, L.shape.kh, L.shape.kw};
    jl["stride"] = L.stride;
    jl["padding"] = L.padding;
    jl["first_unit"] = L.first_unit;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t p = 0; p < L.positions; ++p) {
      std::string bits(wh.n(), '0');
      for (std::size_t k = 0; k < wh.n(); ++k) bits[k] = L.beta[p * wh.n() + k] != 0.0 ? '1' : '0';
      rows.push_back(bits);
    }
    jl["beta"] = rows;
    const std::string stem = prefix + ".layer" + std::to_string(l);
    save_tensor((dir / (stem + ".scorer_w.ckt")).string(), L.scorer_w.value);
    save_tensor((dir / (stem + ".scorer_b.ckt")).string(), L.scorer_b.value);
    layers.push_back(jl);
  }
  j["layers"] = layers;
  std::ofstream(dir / (prefix + ".json")) << j.dump(2) << "\n";
}

inline Warehouse load_warehouse(const std::filesystem::path& dir, const std::string& stage_id,
                                NafConfig* naf_cfg = nullptr) {
  std::ifstream is(dir / (stage_id + ".json"));
  if (!is) throw std::runtime_error("missing warehouse sidecar for stage " + stage_id);
  const auto j = nlohmann::json::parse(is);
  const auto us = j.at("unit_shape");
  KernelShape unit{us[0], us[1], us[2], us[3]};
  const std::size_t n = j.at("n");
  Parameter bank(load_tensor((dir / (stage_id + ".bank.ckt")).string()));
  if (bank.value.shape() != Shape{n, unit.numel()}) throw std::runtime_error("warehouse bank shape mismatch");
  std::vector<Warehouse::Layer> layers;
  std::size_t l = 0;
  for (const auto& jl : j.at("layers")) {
    Warehouse::Layer L;
    const auto k = jl.at("kernel");
    L.shape = KernelShape{k[0], k[1], k[2], k[3]};
    L.stride = jl.at("stride");
    L.padding = jl.at("padding");
    L.first_unit = jl.at("first_unit");
    L.positions = mixing_positions(L.shape, unit);
    L.beta = Tensor(Shape{L.positions, n}, 0.0);
    std::size_t p = 0;
    for (const auto& row : jl.at("beta")) {
      const std::string bits = row;
      if (bits.size() != n) throw std::runtime_error("warehouse mask row has wrong width");
      for (std::size_t q = 0; q < n; ++q) L.beta[p * n + q] = bits[q] == '1' ? 1.0 : 0.0;
      ++p;
    }
    const std::string stem = stage_id + ".layer" + std::to_string(l++);
    L.scorer_w = Parameter(load_tensor((dir / (stem + ".scorer_w.ckt")).string()));
    L.scorer_b = Parameter(load_tensor((dir / (stem + ".scorer_b.ckt")).string()));
    layers.push_back(std::move(L));
  }
  if (naf_cfg) {
    naf_cfg->budget_b = j.at("b");
    naf_cfg->tau_epochs = j.at("tau_epochs");
  }
  return Warehouse(stage_id, unit, j.at("b"), std::move(bank), std::move(layers));
}

}  // namespace crackkw

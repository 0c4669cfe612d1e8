#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crackkw/ops.hpp"
#include "crackkw/random.hpp"

// Three parallel refinements of a feature map F (N x C x H x W):
//   channel:   F * sigmoid(MLP(avgpool F) + MLP(maxpool F))
//   spatial:   F * sigmoid(conv7x7([mean_c F; max_c F]))
//   recurrent: LSTM over the pixel sequence, hidden width C
// fused by an unweighted mean.

namespace crackkw {

struct ChannelAttentionParams {
  std::size_t r = 16;
  Parameter w1, b1;  ///< C/r x C, C/r
  Parameter w2, b2;  ///< C x C/r, C

  std::size_t channels() const { return w1.value.shape()[1]; }
  std::size_t hidden() const { return w1.value.shape()[0]; }

  static ChannelAttentionParams make(std::size_t channels, std::size_t r, Rng& rng) {
    if (r == 0 || channels % r != 0) {
      throw ShapeError("channel attention: C=" + std::to_string(channels) + " not divisible by r=" + std::to_string(r));
    }
    const std::size_t h = channels / r;
    ChannelAttentionParams p;
    p.r = r;
    p.w1 = Parameter(rng.normal_tensor(Shape{h, channels}, 1.0 / std::sqrt(static_cast<double>(channels))));
    p.b1 = Parameter(Tensor(Shape{h}, 0.0));
    p.w2 = Parameter(rng.normal_tensor(Shape{channels, h}, 1.0 / std::sqrt(static_cast<double>(h))));
    p.b2 = Parameter(Tensor(Shape{channels}, 0.0));
    return p;
  }
};

struct SpatialAttentionParams {
  Parameter kernel;  ///< 1 x 2 x 7 x 7

  static SpatialAttentionParams make(Rng& rng) {
    return SpatialAttentionParams{Parameter(rng.normal_tensor(Shape{1, 2, 7, 7}, 1.0 / std::sqrt(98.0)))};
  }
};

/// Four affine gates from [h_prev, x_t] (2C) to C.
struct RecurrentGateParams {
  Parameter wf, bf, wi, bi, wc, bc, wo, bo;

  std::size_t channels() const { return wf.value.shape()[0]; }

  static RecurrentGateParams make(std::size_t channels, Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(2 * channels));
    auto w = [&] { return Parameter(rng.normal_tensor(Shape{channels, 2 * channels}, sd)); };
    auto b = [&] { return Parameter(Tensor(Shape{channels}, 0.0)); };
    RecurrentGateParams p;
    p.wf = w(), p.bf = b(), p.wi = w(), p.bi = b(), p.wc = w(), p.bc = b(), p.wo = w(), p.bo = b();
    return p;
  }

  std::vector<std::pair<std::string, Parameter*>> named() {
    return {{"wf", &wf}, {"bf", &bf}, {"wi", &wi}, {"bi", &bi}, {"wc", &wc}, {"bc", &bc}, {"wo", &wo}, {"bo", &bo}};
  }
};

/// Gate parameters bound into one graph, so a long scan reuses the same leaves.
struct RecurrentGateVars {
  Var wf, bf, wi, bi, wc, bc, wo, bo;

  static RecurrentGateVars bind(Graph& g, RecurrentGateParams& p) {
    return {g.param(p.wf), g.param(p.bf), g.param(p.wi), g.param(p.bi),
            g.param(p.wc), g.param(p.bc), g.param(p.wo), g.param(p.bo)};
  }
};

enum class ScanOrder { row_major, column_major };

struct TripleAttentionParams {
  ChannelAttentionParams channel;
  SpatialAttentionParams spatial;
  RecurrentGateParams recurrent;
  ScanOrder scan = ScanOrder::row_major;

  static TripleAttentionParams make(std::size_t channels, std::size_t r, Rng& rng) {
    TripleAttentionParams p;
    p.channel = ChannelAttentionParams::make(channels, r, rng);
    p.spatial = SpatialAttentionParams::make(rng);
    p.recurrent = RecurrentGateParams::make(channels, rng);
    return p;
  }

  std::vector<std::pair<std::string, Parameter*>> named() {
    std::vector<std::pair<std::string, Parameter*>> out{{"channel.w1", &channel.w1},
                                                        {"channel.b1", &channel.b1},
                                                        {"channel.w2", &channel.w2},
                                                        {"channel.b2", &channel.b2},
                                                        {"spatial.kernel", &spatial.kernel}};
    for (auto& [name, p] : recurrent.named()) out.emplace_back("recurrent." + name, p);
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (auto& np : named()) ps.push_back(np.second);
    return ps;
  }
};

/// M_c, N x C x 1 x 1.
inline Var channel_attention(Graph& g, Var f, ChannelAttentionParams& p) {
  const Shape& s = f.shape();
  if (s.size() != 4) throw ShapeError("channel_attention: expected N x C x H x W, got " + shape_str(s));
  if (p.r == 0 || s[1] % p.r != 0 || p.channels() != s[1] || p.hidden() != s[1] / p.r) {
    throw ShapeError("channel_attention: C=" + std::to_string(s[1]) + " with r=" + std::to_string(p.r) +
                     " incompatible with MLP " + shape_str(p.w1.value.shape()));
  }
  Var w1 = g.param(p.w1), b1 = g.param(p.b1), w2 = g.param(p.w2), b2 = g.param(p.b2);
  auto mlp = [&](Var v) { return linear(relu(linear(v, w1, b1)), w2, b2); };
  const Shape flat{s[0], s[1]};
  Var avg = mlp(reshape(pool_spatial(f, PoolMode::avg), flat));
  Var mx = mlp(reshape(pool_spatial(f, PoolMode::max), flat));
  return reshape(sigmoid(add(avg, mx)), Shape{s[0], s[1], 1, 1});
}

/// M_s, N x 1 x H x W. Padding 3 keeps the spatial extent.
inline Var spatial_attention(Graph& g, Var f, SpatialAttentionParams& p) {
  if (f.shape().size() != 4) throw ShapeError("spatial_attention: expected N x C x H x W, got " + shape_str(f.shape()));
  if (p.kernel.value.shape() != Shape{1, 2, 7, 7}) {
    throw ShapeError("spatial_attention: kernel must be 1x2x7x7, got " + shape_str(p.kernel.value.shape()));
  }
  Var pooled = concat({pool_channel(f, PoolMode::avg), pool_channel(f, PoolMode::max)}, 1);
  return sigmoid(conv2d(pooled, g.param(p.kernel), 1, 3));
}

struct LstmState {
  Var h, c;
};

/// One LSTM step over N x C batches. The candidate state is kept separate
/// from the cell state.
inline LstmState lstm_step(Var h_prev, Var c_prev, Var x_t, const RecurrentGateVars& p) {
  const Shape& hs = h_prev.shape();
  if (hs.size() != 2 || c_prev.shape() != hs || x_t.shape() != hs || p.wf.shape() != Shape{hs[1], 2 * hs[1]}) {
    throw ShapeError("lstm_step: h " + shape_str(hs) + ", c " + shape_str(c_prev.shape()) + ", x " +
                     shape_str(x_t.shape()) + " incompatible with gate weights " + shape_str(p.wf.shape()));
  }
  Var hx = concat({h_prev, x_t}, 1);
  Var f = sigmoid(linear(hx, p.wf, p.bf));
  Var i = sigmoid(linear(hx, p.wi, p.bi));
  Var cand = tanh(linear(hx, p.wc, p.bc));
  Var c = add(mul(f, c_prev), mul(i, cand));
  Var o = sigmoid(linear(hx, p.wo, p.bo));
  return {mul(o, tanh(c)), c};
}

/// Scans the pixels of F as a sequence of channel vectors starting from zero
/// state and reassembles the hidden states into N x C x H x W.
inline Var recurrent_branch(Graph& g, Var f, RecurrentGateParams& p, ScanOrder scan = ScanOrder::row_major) {
  const Shape& s = f.shape();
  if (s.size() != 4 || p.channels() != s[1]) {
    throw ShapeError("recurrent_branch: feature " + shape_str(s) + " incompatible with gate width " +
                     std::to_string(p.channels()));
  }
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const auto gates = RecurrentGateVars::bind(g, p);
  Var zero = g.constant(Tensor(Shape{N, C}, 0.0));
  LstmState st{zero, zero};
  std::vector<Var> hidden(H * W, zero);
  for (std::size_t t = 0; t < H * W; ++t) {
    const std::size_t y = scan == ScanOrder::row_major ? t / W : t % H;
    const std::size_t x = scan == ScanOrder::row_major ? t % W : t / H;
    st = lstm_step(st.h, st.c, take_pixel(f, y, x), gates);
    hidden[y * W + x] = st.h;
  }
  return stack_pixels(hidden, H, W);
}

inline Var triple_attention(Graph& g, Var f, TripleAttentionParams& p) {
  Var b1 = scale_channels(f, channel_attention(g, f, p.channel));
  Var b2 = scale_spatial(f, spatial_attention(g, f, p.spatial));
  Var b3 = recurrent_branch(g, f, p.recurrent, p.scan);
  return scale(add(add(b1, b2), b3), 1.0 / 3.0);
}

// Checkpoint: one tensor file per block plus a JSON manifest naming them.

inline void save_triple_attention(TripleAttentionParams& p, const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["r"] = p.channel.r;
  j["scan"] = p.scan == ScanOrder::row_major ? "row_major" : "column_major";
  nlohmann::json blocks = nlohmann::json::array();
  for (auto& [name, param] : p.named()) {
    const std::string file = prefix + "." + name + ".ckt";
    save_tensor((dir / file).string(), param->value);
    blocks.push_back({{"name", name}, {"file", file}, {"shape", param->value.shape()}});
  }
  j["blocks"] = blocks;
  std::ofstream(dir / (prefix + ".json")) << j.dump(2) << "\n";
}

inline TripleAttentionParams load_triple_attention(const std::filesystem::path& dir, const std::string& prefix) {
  std::ifstream is(dir / (prefix + ".json"));
  if (!is) throw std::runtime_error("missing attention manifest " + prefix + ".json");
  const auto j = nlohmann::json::parse(is);
  TripleAttentionParams p;
  p.channel.r = j.at("r");
  p.scan = j.at("scan") == "row_major" ? ScanOrder::row_major : ScanOrder::column_major;
  auto named = p.named();
  for (const auto& block : j.at("blocks")) {
    const std::string name = block.at("name");
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& np) { return np.first == name; });
    if (it == named.end()) throw std::runtime_error("unknown attention block " + name);
    *it->second = Parameter(load_tensor((dir / block.at("file").get<std::string>()).string()));
  }
  return p;
}

}  // namespace crackkw

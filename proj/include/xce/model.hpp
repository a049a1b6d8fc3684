#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xce/autograd.hpp"
#include "xce/common.hpp"
#include "xce/dataset_io.hpp"
#include "xce/numerics.hpp"

namespace xce::model {

namespace ag = xce::autograd;

inline constexpr const char* kWeightsMagic = "XCEW1\n";

/// M antennas fold into a sqrt(M) x sqrt(M) x 2 grid (real/imag planes), so M
/// must be a perfect square. Feature tokens sit on the antenna axis: the
/// embedding alternates attention over the F feature channels with attention
/// over the M antenna positions, then projects into the d-wide transformer.
/// The last n_tuned transformer layers train; the rest stay frozen.
struct ModelConfig {
  int M = 256;
  int F = 64;
  int I = 4;  // attention heads in the embedding blocks
  int d = 768;
  int n_layers = 12;
  int n_tuned = 2;
  int ffn_mult = 4;
  bool causal = true;
  int backbone_heads = 0;  // 0: reuse I
  int d_s = 0;             // per-head width of antenna-axis attention; 0: M

  int grid() const { return static_cast<int>(std::lround(std::sqrt(double(M)))); }
  int heads() const { return backbone_heads > 0 ? backbone_heads : I; }
  int spatial_dim() const { return d_s > 0 ? d_s : M; }

  void validate() const {
    if (M < 4 || grid() * grid() != M)
      throw ConfigError("model: M=" + std::to_string(M) + " is not a perfect square >= 4");
    if (F < 1) throw ConfigError("model: F must be >= 1");
    if (I < 1) throw ConfigError("model: I must be >= 1");
    if (d < 1) throw ConfigError("model: d must be >= 1");
    if (d % heads() != 0)
      throw ConfigError("model: d=" + std::to_string(d) + " not divisible by " +
                        std::to_string(heads()) + " backbone heads");
    if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
    if (n_tuned < 0 || n_tuned > n_layers)
      throw ConfigError("model: n_tuned must lie in [0, n_layers]");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
    if (spatial_dim() < 1) throw ConfigError("model: d_s must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"M", c.M},           {"F", c.F},
          {"I", c.I},           {"d", c.d},
          {"n_layers", c.n_layers}, {"n_tuned", c.n_tuned},
          {"ffn_mult", c.ffn_mult}, {"causal", c.causal},
          {"backbone_heads", c.backbone_heads}, {"d_s", c.d_s}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.M = j.at("M").get<int>();
  c.F = j.at("F").get<int>();
  c.I = j.at("I").get<int>();
  c.d = j.at("d").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_tuned = j.at("n_tuned").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.causal = j.at("causal").get<bool>();
  c.backbone_heads = j.value("backbone_heads", 0);
  c.d_s = j.value("d_s", 0);
  c.validate();
  return c;
}

/// Canonical parameter enumeration: names and shapes in forward order. Both
/// the initializer and the XCEW1 reader derive from this one list, so a
/// weight file written by any build loads in any other.
inline std::vector<std::pair<std::string, ag::Shape>> param_layout(const ModelConfig& cfg) {
  cfg.validate();
  const int f = cfg.F, m = cfg.M, d = cfg.d, ds = cfg.spatial_dim();
  std::vector<std::pair<std::string, ag::Shape>> out;
  auto push = [&](std::string name, ag::Shape shape) {
    out.emplace_back(std::move(name), std::move(shape));
  };

  push("pre.conv.K", {3, 3, 2, f});
  push("pre.conv.b", {f});

  for (int b = 1; b <= 2; ++b) {
    const std::string blk = "embed.block" + std::to_string(b) + ".";
    for (const char* w : {"wq", "wk", "wv"})
      for (int i = 0; i < cfg.I; ++i) push(blk + "feat_attn." + w + std::to_string(i), {f, f});
    push(blk + "feat_attn.wo", {cfg.I * f, f});
    for (const char* w : {"wq", "wk", "wv"})
      for (int i = 0; i < cfg.I; ++i) push(blk + "spat_attn." + w + std::to_string(i), {m, ds});
    push(blk + "spat_attn.wo", {cfg.I * ds, m});
    push(blk + "fuse_fc", {2 * f, f});
    push(blk + "ln1.gamma", {f});
    push(blk + "ln1.beta", {f});
    push(blk + "ffn.w1", {f, cfg.ffn_mult * f});
    push(blk + "ffn.b1", {cfg.ffn_mult * f});
    push(blk + "ffn.w2", {cfg.ffn_mult * f, f});
    push(blk + "ffn.b2", {f});
    push(blk + "ln2.gamma", {f});
    push(blk + "ln2.beta", {f});
  }
  push("embed.proj_fc", {f, d});
  push("pos_embed", {m, d});

  for (int k = 1; k <= cfg.n_layers; ++k) {
    const std::string lay = "backbone.layer" + std::to_string(k) + ".";
    push(lay + "ln1.gamma", {d});
    push(lay + "ln1.beta", {d});
    push(lay + "attn.Wqkv", {d, 3 * d});
    push(lay + "attn.bqkv", {3 * d});
    push(lay + "attn.Wo", {d, d});
    push(lay + "attn.bo", {d});
    push(lay + "ln2.gamma", {d});
    push(lay + "ln2.beta", {d});
    push(lay + "mlp.w1", {d, 4 * d});
    push(lay + "mlp.b1", {4 * d});
    push(lay + "mlp.w2", {4 * d, d});
    push(lay + "mlp.b2", {d});
  }
  push("backbone.ln_f.gamma", {d});
  push("backbone.ln_f.beta", {d});

  push("post.fc", {d, f});
  push("post.conv1.K", {3, 3, f, 64});
  push("post.conv1.b", {64});
  push("post.conv2.K", {3, 3, 64, 64});
  push("post.conv2.b", {64});
  push("post.conv3.K", {3, 3, 64, 2});
  push("post.conv3.b", {2});
  return out;
}

struct ModelParams {
  ModelConfig cfg;
  std::vector<ag::Parameter> params;  // layout order; doubles as the save order
  std::map<std::string, size_t> index;

  ag::Tensor& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("model: unknown parameter '" + name + "'");
    return params[it->second].tensor;
  }
  const ag::Tensor& at(const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(name);
  }
};

namespace detail {

inline bool is_bias_name(const std::string& name) {
  auto ends_with = [&](const char* suf) {
    std::string s(suf);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".b") || ends_with(".b1") || ends_with(".b2") || ends_with(".beta") ||
         ends_with(".bqkv") || ends_with(".bo");
}

/// backbone.layerK.* -> K, else 0.
inline int backbone_layer_of(const std::string& name) {
  constexpr const char* kPrefix = "backbone.layer";
  if (name.rfind(kPrefix, 0) != 0) return 0;
  size_t pos = std::string(kPrefix).size();
  int k = 0;
  while (pos < name.size() && name[pos] >= '0' && name[pos] <= '9')
    k = k * 10 + (name[pos++] - '0');
  return k;
}

}  // namespace detail

/// Frozen set = backbone layers 1..n_layers-n_tuned, every tensor inside
/// them. Everything else (embedding, the last n_tuned layers, ln_f,
/// postprocess) trains.
inline void freeze_partition(ModelParams& p) {
  const int n_frozen = p.cfg.n_layers - p.cfg.n_tuned;
  for (auto& par : p.params) {
    int k = detail::backbone_layer_of(par.name);
    par.trainable = !(k >= 1 && k <= n_frozen);
    par.tensor.get()->requires_grad = par.trainable;
  }
}

/// Weights draw from a +-2 sigma truncated normal with std 0.02; biases,
/// LayerNorm offsets and the whole final conv start at zero, LayerNorm gains
/// at one. A zero final conv makes the untrained network reproduce its LS
/// input bit for bit, so training starts from the LS baseline. (A hotter
/// fan-in-scaled init was tried and measurably trains worse here: the
/// near-identity start acts as an implicit curriculum.)
inline ModelParams init_model(const ModelConfig& cfg, uint64_t seed = 20240915) {
  ModelParams p;
  p.cfg = cfg;
  Rng rng(seed_mix(seed, 0x9e1dc0defULL));
  auto trunc_normal = [&]() {
    double x;
    do { x = rng.normal(); } while (std::abs(x) > 2.0);
    return 0.02 * x;
  };
  for (auto& [name, shape] : param_layout(cfg)) {
    ag::Tensor t = ag::Tensor::zeros(shape, true);
    const bool zero = detail::is_bias_name(name) || name == "post.conv3.K";
    const bool ones = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    if (ones)
      std::fill(t.data().begin(), t.data().end(), 1.0);
    else if (!zero)
      for (double& v : t.data()) v = trunc_normal();
    p.index.emplace(name, p.params.size());
    p.params.push_back(ag::Parameter{name, t, true});
  }
  freeze_partition(p);
  return p;
}

struct ParamCount {
  size_t trainable = 0;
  size_t frozen = 0;
  size_t total() const { return trainable + frozen; }
};

inline ParamCount param_count(const ModelParams& p) {
  ParamCount c;
  for (const auto& par : p.params)
    (par.trainable ? c.trainable : c.frozen) += par.tensor.numel();
  return c;
}

/// Same partition arithmetic straight off the layout, so counts at full
/// scale never have to materialize the tensors.
inline ParamCount param_count_layout(const ModelConfig& cfg) {
  ParamCount c;
  const int n_frozen = cfg.n_layers - cfg.n_tuned;
  for (const auto& [name, shape] : param_layout(cfg)) {
    int k = detail::backbone_layer_of(name);
    size_t n = ag::numel_of(shape);
    if (k >= 1 && k <= n_frozen)
      c.frozen += n;
    else
      c.trainable += n;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// [B, g, g, 2] constant tensor from complex channels; antenna m lands at
/// grid row m / g, column m % g, with channels (Re, Im).
inline ag::Tensor grids_from_batch(const std::vector<CVec>& hs, const ModelConfig& cfg) {
  if (hs.empty()) throw ShapeError("grids_from_batch: empty batch");
  const int g = cfg.grid(), m = cfg.M;
  ag::Tensor t = ag::Tensor::zeros({static_cast<int>(hs.size()), g, g, 2}, false);
  for (size_t b = 0; b < hs.size(); ++b) {
    if (static_cast<int>(hs[b].size()) != m)
      throw ShapeError("grids_from_batch: sample " + std::to_string(b) + " has " +
                       std::to_string(hs[b].size()) + " antennas, config says " +
                       std::to_string(m));
    double* dst = t.data().data() + b * size_t(m) * 2;
    for (int i = 0; i < m; ++i) {
      dst[2 * i] = hs[b][i].real();
      dst[2 * i + 1] = hs[b][i].imag();
    }
  }
  return t;
}

inline CVec complex_from_grid(const ag::Tensor& grid, int b) {
  if (grid.shape().size() != 4 || grid.dim(-1) != 2)
    throw ShapeError("complex_from_grid: want [B,g,g,2], got " + ag::shape_str(grid.shape()));
  const int m = grid.dim(1) * grid.dim(2);
  const double* src = grid.data().data() + size_t(b) * m * 2;
  CVec h(m);
  for (int i = 0; i < m; ++i) h[i] = {src[2 * i], src[2 * i + 1]};
  return h;
}

namespace detail {

inline ag::MhaParams collect_mha(ModelParams& p, const std::string& prefix, int heads) {
  ag::MhaParams mp;
  for (int i = 0; i < heads; ++i) {
    mp.wq.push_back(p.at(prefix + ".wq" + std::to_string(i)));
    mp.wk.push_back(p.at(prefix + ".wk" + std::to_string(i)));
    mp.wv.push_back(p.at(prefix + ".wv" + std::to_string(i)));
  }
  mp.wo = p.at(prefix + ".wo");
  return mp;
}

/// One embedding block: antenna tokens attend over features and, through a
/// transpose, features attend over antennas; the two views concatenate, fuse
/// back to width F, and run through an FFN, with post-norm residuals.
inline ag::Tensor pfsa_block(ModelParams& p, const std::string& blk, const ag::Tensor& x) {
  using namespace ag;
  MhaParams feat = collect_mha(p, blk + "feat_attn", p.cfg.I);
  MhaParams spat = collect_mha(p, blk + "spat_attn", p.cfg.I);

  Tensor h_feat = multi_head_attention(x, x, feat, false);
  Tensor xt = transpose_last2(x);
  Tensor h_spat = transpose_last2(multi_head_attention(xt, xt, spat, false));
  Tensor fused = matmul(concat_last({h_feat, h_spat}), p.at(blk + "fuse_fc"));
  Tensor h_ln = layer_norm(add(fused, x), p.at(blk + "ln1.gamma"), p.at(blk + "ln1.beta"));
  Tensor mid = gelu(linear(h_ln, p.at(blk + "ffn.w1"), p.at(blk + "ffn.b1")));
  Tensor ffn = linear(mid, p.at(blk + "ffn.w2"), p.at(blk + "ffn.b2"));
  return layer_norm(add(ffn, h_ln), p.at(blk + "ln2.gamma"), p.at(blk + "ln2.beta"));
}

/// GPT-2 attention with the fused qkv projection: heads are contiguous
/// dh-wide slabs inside each of the q, k, v thirds.
inline ag::Tensor backbone_attention(ModelParams& p, const std::string& lay,
                                     const ag::Tensor& x) {
  using namespace ag;
  const int d = p.cfg.d, heads = p.cfg.heads(), dh = d / heads;
  Tensor qkv = linear(x, p.at(lay + "attn.Wqkv"), p.at(lay + "attn.bqkv"));
  Tensor mask = p.cfg.causal ? causal_mask(x.dim(-2)) : Tensor();
  std::vector<Tensor> outs;
  for (int h = 0; h < heads; ++h) {
    Tensor q = slice_last(qkv, h * dh, dh);
    Tensor k = slice_last(qkv, d + h * dh, dh);
    Tensor v = slice_last(qkv, 2 * d + h * dh, dh);
    Tensor logits = matmul(q, transpose_last2(k));
    if (p.cfg.causal) logits = add(logits, mask);
    outs.push_back(matmul(softmax_rows(logits, std::sqrt(double(dh))), v));
  }
  return linear(concat_last(outs), p.at(lay + "attn.Wo"), p.at(lay + "attn.bo"));
}

inline ag::Tensor backbone_layer(ModelParams& p, const std::string& lay, const ag::Tensor& x) {
  using namespace ag;
  Tensor a = backbone_attention(
      p, lay, layer_norm(x, p.at(lay + "ln1.gamma"), p.at(lay + "ln1.beta")));
  Tensor x1 = add(x, a);
  Tensor h = layer_norm(x1, p.at(lay + "ln2.gamma"), p.at(lay + "ln2.beta"));
  Tensor mid = gelu(linear(h, p.at(lay + "mlp.w1"), p.at(lay + "mlp.b1")));
  return add(x1, linear(mid, p.at(lay + "mlp.w2"), p.at(lay + "mlp.b2")));
}

}  // namespace detail

/// Grid in, grid out: the network predicts a correction that is subtracted
/// from the LS input, so a zeroed final conv is exactly the identity.
inline ag::Tensor forward_from_grid(ModelParams& p, const ag::Tensor& grid_in) {
  using namespace ag;
  const int g = p.cfg.grid(), m = p.cfg.M, f = p.cfg.F;
  if (grid_in.shape().size() != 4 || grid_in.dim(1) != g || grid_in.dim(2) != g ||
      grid_in.dim(3) != 2)
    throw ShapeError("forward: want [B," + std::to_string(g) + "," + std::to_string(g) +
                     ",2], got " + shape_str(grid_in.shape()));
  const int batch = grid_in.dim(0);

  Tensor h2 = conv2d(grid_in, p.at("pre.conv.K"), p.at("pre.conv.b"));
  Tensor tokens = reshape(h2, {batch, m, f});
  tokens = detail::pfsa_block(p, "embed.block1.", tokens);
  tokens = detail::pfsa_block(p, "embed.block2.", tokens);
  Tensor x = add(matmul(tokens, p.at("embed.proj_fc")), p.at("pos_embed"));

  for (int k = 1; k <= p.cfg.n_layers; ++k)
    x = detail::backbone_layer(p, "backbone.layer" + std::to_string(k) + ".", x);
  x = layer_norm(x, p.at("backbone.ln_f.gamma"), p.at("backbone.ln_f.beta"));

  Tensor h7 = reshape(matmul(x, p.at("post.fc")), {batch, g, g, f});
  Tensor c1 = gelu(conv2d(h7, p.at("post.conv1.K"), p.at("post.conv1.b")));
  Tensor c2 = gelu(conv2d(c1, p.at("post.conv2.K"), p.at("post.conv2.b")));
  Tensor h8 = conv2d(c2, p.at("post.conv3.K"), p.at("post.conv3.b"));
  return sub(grid_in, h8);
}

inline ag::Tensor forward_batch(ModelParams& p, const std::vector<CVec>& h_ls) {
  return forward_from_grid(p, grids_from_batch(h_ls, p.cfg));
}

inline CVec forward(ModelParams& p, const CVec& h_ls) {
  return complex_from_grid(forward_batch(p, {h_ls}), 0);
}

// ---------------------------------------------------------------------------
// XCEW1 weights
// ---------------------------------------------------------------------------

/// Magic, one-line JSON manifest {"config":..., "params":[{name, shape,
/// trainable, offset}, ...]}, then raw little-endian f64 blobs in manifest
/// order. Offsets are in bytes from the first blob byte.
inline void save_weights(const ModelParams& p, const std::string& path) {
  nlohmann::json manifest;
  manifest["config"] = config_to_json(p.cfg);
  manifest["params"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& par : p.params) {
    manifest["params"].push_back({{"name", par.name},
                                  {"shape", par.tensor.shape()},
                                  {"trainable", par.trainable},
                                  {"offset", offset}});
    offset += par.tensor.numel() * sizeof(double);
  }
  channel::detail::atomic_write(path, [&](std::ostream& os) {
    os << kWeightsMagic << manifest.dump() << "\n";
    for (const auto& par : p.params)
      os.write(reinterpret_cast<const char*>(par.tensor.data().data()),
               static_cast<std::streamsize>(par.tensor.numel() * sizeof(double)));
  });
}

/// Reads a weight file into a fresh ModelParams; throws FormatError (naming
/// the offending parameter if there is one) without handing back partial
/// state. Layout is re-derived from the embedded config, so the manifest
/// must match it name for name and shape for shape.
inline ModelParams load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open weights: " + path);

  char magic[6];
  is.read(magic, 6);
  if (!is || std::string(magic, 6) != kWeightsMagic)
    throw FormatError("weights: bad magic in " + path + " (expected XCEW1)");
  std::string header;
  if (!std::getline(is, header)) throw FormatError("weights: missing manifest line in " + path);
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded() || !j.contains("config") || !j.contains("params"))
    throw FormatError("weights: unparsable manifest in " + path);

  ModelConfig cfg;
  try {
    cfg = config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("weights: bad config in manifest: " + std::string(e.what()));
  }

  auto layout = param_layout(cfg);
  std::map<std::string, ag::Shape> expected;
  for (auto& [name, shape] : layout) expected.emplace(name, shape);

  const auto& jp = j.at("params");
  if (!jp.is_array() || jp.size() != layout.size())
    throw FormatError("weights: manifest lists " + std::to_string(jp.size()) +
                      " parameters, config implies " + std::to_string(layout.size()));

  ModelParams p;
  p.cfg = cfg;
  uint64_t running = 0;
  for (const auto& e : jp) {
    std::string name;
    ag::Shape shape;
    bool trainable;
    uint64_t offset;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<ag::Shape>();
      trainable = e.at("trainable").get<bool>();
      offset = e.at("offset").get<uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError("weights: malformed manifest entry: " + std::string(ex.what()));
    }
    auto it = expected.find(name);
    if (it == expected.end()) throw FormatError("weights: unknown parameter '" + name + "'");
    if (it->second != shape)
      throw FormatError("weights: shape mismatch for '" + name + "' (file " + ag::shape_str(shape) +
                        ", config wants " + ag::shape_str(it->second) + ")");
    if (p.index.count(name)) throw FormatError("weights: duplicate parameter '" + name + "'");
    if (offset != running)
      throw FormatError("weights: non-contiguous blob offset for '" + name + "'");

    ag::Tensor t = ag::Tensor::zeros(shape, trainable);
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw FormatError("weights: truncated blob while reading '" + name + "'");
    running += t.numel() * sizeof(double);
    p.index.emplace(name, p.params.size());
    p.params.push_back(ag::Parameter{name, t, trainable});
  }
  char extra;
  if (is.read(&extra, 1)) throw FormatError("weights: trailing bytes after last blob in " + path);
  return p;
}

inline ModelParams load_weights(const std::string& path, const ModelConfig& want) {
  ModelParams p = load_weights(path);
  if (!(p.cfg == want)) throw FormatError("weights: config in " + path + " does not match");
  return p;
}

}  // namespace xce::model

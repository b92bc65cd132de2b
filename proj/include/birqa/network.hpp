#pragma once

// The bidirectional multiscale quality network: per-level adaptive fusion
// with squeeze-excitation, bottom-up cross-scale residual attention,
// top-down spatial cross-gating and the reliability-aware head.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "birqa/diff.hpp"
#include "birqa/feature_graph.hpp"

namespace birqa {

struct NetworkConfig {
  int channels = 32;
  int head_width = 32;
  int se_reduction = 4;
  bool enable_csram = true;
  bool enable_scgb = true;
  bool enable_rah = true;
  FeatureMask features = kAllFeatures;
  std::uint64_t seed = 0;

  void validate() const {
    if (channels < 8) throw Error("NetworkConfig: channels must be >= 8");
    if (se_reduction < 1 || channels % se_reduction != 0) {
      throw Error("NetworkConfig: channels must be divisible by se_reduction");
    }
    if (head_width < 2) throw Error("NetworkConfig: head_width must be >= 2");
    if (features.none()) throw Error("NetworkConfig: feature subset is empty");
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// key=value lines; unknown keys are errors, '#' starts a comment.
inline void apply_config_line(NetworkConfig& cfg, const std::string& key, const std::string& val) {
  auto to_int = [&]() {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(val, &pos);
      if (pos != val.size()) throw std::invalid_argument(val);
      return v;
    } catch (const std::exception&) {
      throw Error("config: invalid integer for '" + key + "': '" + val + "'");
    }
  };
  if (key == "channels") cfg.channels = static_cast<int>(to_int());
  else if (key == "head_width") cfg.head_width = static_cast<int>(to_int());
  else if (key == "se_reduction") cfg.se_reduction = static_cast<int>(to_int());
  else if (key == "enable_csram") cfg.enable_csram = to_int() != 0;
  else if (key == "enable_scgb") cfg.enable_scgb = to_int() != 0;
  else if (key == "enable_rah") cfg.enable_rah = to_int() != 0;
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int());
  else if (key == "features") {
    try {
      cfg.features = parse_feature_mask(val);
    } catch (const Error& e) {
      throw Error(std::string("config: ") + e.what());
    }
  } else {
    throw Error("config: unknown key '" + key + "'");
  }
}

inline NetworkConfig parse_config(const std::string& text) {
  NetworkConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config: expected key=value, got '" + line + "'");
    apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline std::string format_config(const NetworkConfig& cfg) {
  std::ostringstream out;
  out << "channels=" << cfg.channels << "\n"
      << "head_width=" << cfg.head_width << "\n"
      << "se_reduction=" << cfg.se_reduction << "\n"
      << "enable_csram=" << cfg.enable_csram << "\n"
      << "enable_scgb=" << cfg.enable_scgb << "\n"
      << "enable_rah=" << cfg.enable_rah << "\n"
      << "features=";
  for (int j = 0; j < kNumFeatures; ++j) out << (cfg.features.test(j) ? '1' : '0');
  out << "\nseed=" << cfg.seed << "\n";
  return out.str();
}

template <class T>
struct HeadOutput {
  ad::Var<T> score;
  ad::Var<T> weights;        // softmax reliability weights (absent for the baseline head)
  ad::Var<T> contributions;  // per-level contributions
};

template <class T>
struct CsramOutput {
  ad::Var<T> updated;
  ad::Var<T> mask;
  ad::Var<T> strength;    // softplus gate
  ad::Var<T> confidence;  // sigmoid gate
  ad::Var<T> residual;    // tanh residual
};

inline constexpr double kGemInitExponent = 3.0;
inline constexpr double kGemMinExponent = 1.0;
inline constexpr double kGemMaxExponent = 10.0;
inline constexpr double kConfidenceBiasInit = -2.0;

template <class T>
class BirqaModel {
 public:
  using Var = ad::Var<T>;
  using Graph = ad::Graph<T>;
  using Param = ad::Parameter<T>;

  explicit BirqaModel(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build();
  }

  /// Same architecture and values in another precision.
  template <class U>
  BirqaModel<U> cast() const {
    BirqaModel<U> out(cfg_);
    auto dst = out.parameters();
    for (std::size_t k = 0; k < params_.size(); ++k) {
      for (std::size_t i = 0; i < params_[k].size(); ++i) {
        dst[k]->value[i] = static_cast<U>(params_[k].value[i]);
      }
    }
    return out;
  }

  const NetworkConfig& config() const { return cfg_; }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }
  std::vector<const Param*> parameters() const {
    std::vector<const Param*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  Param* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  /// Keeps every GeM exponent inside [1,10]; call after each optimizer step.
  void clamp_exponents() {
    for (int idx : gem_p_) {
      auto& v = params_[idx].value[0];
      v = std::clamp(v, static_cast<T>(kGemMinExponent), static_cast<T>(kGemMaxExponent));
    }
  }

  void print_parameters(std::ostream& os) const {
    for (const auto& p : params_) os << p.name << " " << p.shape.str() << " " << p.size() << "\n";
    os << "total " << parameter_count() << "\n";
  }

  // -------------------------------------------------------------------------
  // Blocks

  /// Per-feature channel attention, 3x3 fusion conv and squeeze-excitation.
  /// `attention` receives the concatenated sigmoid attention vector when given.
  Var adaptive_fusion(Graph& g, int level, const Var& stacked, Var* attention = nullptr) const {
    check_level_input(stacked);
    const Fusion& f = fusion_[level];
    Var pooled = ad::gap(stacked);
    std::vector<Var> alphas;
    for (int j = 0; j < kNumFeatures; ++j) {
      Var hidden = ad::relu(ad::linear(pooled, w(g, f.mlp1[j]), b(g, f.mlp1[j])));
      alphas.push_back(ad::sigmoid(ad::linear(hidden, w(g, f.mlp2[j]), b(g, f.mlp2[j]))));
    }
    Var alpha = ad::concat(alphas);
    if (attention) *attention = alpha;
    Var scaled = ad::mul(stacked, ad::reshape(alpha, ad::Shape{kFeatureInputChannels, 1, 1}));
    Var fused = ad::conv2d(scaled, w(g, f.phi), b(g, f.phi));
    Var squeeze = ad::relu(ad::linear(ad::gap(fused), w(g, f.se1), b(g, f.se1)));
    Var excite = ad::sigmoid(ad::linear(squeeze, w(g, f.se2), b(g, f.se2)));
    return ad::mul(fused, ad::reshape(excite, ad::Shape{cfg_.channels, 1, 1}));
  }

  /// Injects fine-level cues into the next coarser level (level i -> i+1).
  CsramOutput<T> csram_step(Graph& g, int i, const Var& fine, const Var& coarse) const {
    check_adjacent(fine, coarse, "csram_step");
    if (!cfg_.enable_csram) throw Error("csram_step: CSRAM is disabled in this model");
    const Csram& c = csram_[i];
    Var message = ad::add(ad::conv2d(fine, w(g, c.down), b(g, c.down), 2), ad::downsample2(fine));
    CsramOutput<T> out;
    out.mask = ad::sigmoid(ad::add(ad::channel_mean(message), ad::channel_max(message)));
    message = ad::mul(message, out.mask);
    Var z = ad::concat(std::vector<Var>{coarse, out.mask});
    out.strength = ad::softplus(ad::conv2d(z, w(g, c.psi_alpha), b(g, c.psi_alpha)));
    out.confidence = ad::sigmoid(ad::conv2d(z, w(g, c.psi_rho), b(g, c.psi_rho)));
    out.residual = ad::tanh(ad::conv2d(message, w(g, c.psi_r), b(g, c.psi_r)));
    out.updated = ad::add(coarse, ad::mul(ad::mul(out.confidence, out.strength), out.residual));
    return out;
  }

  /// Gates fine-level features by coarse context (level i+1 -> i).
  Var scgb_step(Graph& g, int i, const Var& fine, const Var& coarse, Var* gate_out = nullptr) const {
    check_adjacent(fine, coarse, "scgb_step");
    if (!cfg_.enable_scgb) throw Error("scgb_step: SCGB is disabled in this model");
    const Scgb& s = scgb_[i];
    Var hidden = ad::relu(ad::conv2d(coarse, w(g, s.fc1), b(g, s.fc1)));
    Var gate = ad::sigmoid(ad::conv2d(hidden, w(g, s.fc2), b(g, s.fc2)));
    Var up = ad::upsample_nearest(gate, fine.shape()[1], fine.shape()[2]);
    if (gate_out) *gate_out = up;
    return ad::add(fine, ad::mul(fine, up));
  }

  /// GeM-pooled per-level embeddings combined by softmax reliability weights.
  HeadOutput<T> rah_head(Graph& g, std::span<const Var> levels) const {
    if (levels.empty()) throw Error("rah_head: empty level list");
    if (!cfg_.enable_rah) throw Error("rah_head: RAH is disabled in this model");
    if (levels.size() > kNumLevels) throw Error("rah_head: too many levels");
    std::vector<Var> contrib, logits;
    for (std::size_t i = 0; i < levels.size(); ++i) {
      Var proj = ad::conv2d(levels[i], w(g, head_.proj[i]), b(g, head_.proj[i]));
      Var z = ad::gem(proj, g.param(params_[head_.gem_p[i]]));
      contrib.push_back(mlp2(g, head_.contrib, z));
      logits.push_back(mlp2(g, head_.reliab, z));
    }
    HeadOutput<T> out;
    out.contributions = ad::concat(contrib);
    out.weights = ad::softmax(ad::concat(logits));
    out.score = ad::sum(ad::mul(out.weights, out.contributions));
    return out;
  }

  /// Ablation head: concatenated GAP of every level into a two-layer MLP.
  HeadOutput<T> pooled_head(Graph& g, std::span<const Var> levels) const {
    std::vector<Var> pooled;
    for (const auto& l : levels) pooled.push_back(ad::gap(l));
    HeadOutput<T> out;
    out.score = ad::reshape(mlp2(g, baseline_, ad::concat(pooled)), ad::Shape{});
    return out;
  }

  HeadOutput<T> forward(Graph& g, const LevelInputs<T>& inputs) const {
    std::array<Var, kNumLevels> levels;
    for (int i = 0; i < kNumLevels; ++i) levels[i] = adaptive_fusion(g, i, masked(g, inputs[i]));
    for (int i = 0; i + 1 < kNumLevels; ++i) {
      levels[i + 1] = cfg_.enable_csram
                          ? csram_step(g, i, levels[i], levels[i + 1]).updated
                          : ad::add(levels[i + 1], ad::downsample2(levels[i]));
    }
    if (cfg_.enable_scgb) {
      for (int i = kNumLevels - 2; i >= 0; --i) levels[i] = scgb_step(g, i, levels[i], levels[i + 1]);
    }
    return cfg_.enable_rah ? rah_head(g, levels) : pooled_head(g, levels);
  }

  /// Inference score of a precomputed pyramid.
  T score(const FeaturePyramid& pyr) const {
    Graph g(false);
    return forward(g, level_inputs<T>(g, pyr)).score.item();
  }

 private:
  struct Layer {
    int w = -1;
    int b = -1;
  };
  struct Fusion {
    std::array<Layer, kNumFeatures> mlp1, mlp2;
    Layer phi, se1, se2;
  };
  struct Csram {
    Layer down, psi_alpha, psi_rho, psi_r;
  };
  struct Scgb {
    Layer fc1, fc2;
  };
  struct TwoLayer {
    Layer fc1, fc2;
  };
  struct Head {
    std::array<Layer, kNumLevels> proj;
    std::array<int, kNumLevels> gem_p{};
    TwoLayer contrib, reliab;
  };
  Var w(Graph& g, const Layer& l) const { return g.param(params_[l.w]); }
  Var b(Graph& g, const Layer& l) const { return g.param(params_[l.b]); }

  // Zeroes the channels of excluded feature kinds.
  Var masked(Graph& g, const Var& x) const {
    if (cfg_.features.all()) return x;
    std::vector<T> m(kFeatureInputChannels, T(0));
    for (int j = 0; j < kNumFeatures; ++j) {
      if (!cfg_.features.test(j)) continue;
      for (int c = 0; c < kFeatureChannels[j]; ++c) m[kFeatureOffset[j] + c] = T(1);
    }
    return ad::mul(x, g.constant(ad::Shape{kFeatureInputChannels, 1, 1}, std::move(m)));
  }

  Var mlp2(Graph& g, const TwoLayer& m, const Var& x) const {
    Var h = ad::relu(ad::linear(x, w(g, m.fc1), b(g, m.fc1)));
    return ad::linear(h, w(g, m.fc2), b(g, m.fc2));
  }

  static void check_level_input(const Var& x) {
    const auto& s = x.shape();
    if (s.rank() != 3 || s[0] != kFeatureInputChannels) {
      throw Error("adaptive_fusion: expected (8,H,W) level tensor, got " + s.str());
    }
  }

  static void check_adjacent(const Var& fine, const Var& coarse, const char* op) {
    const auto& f = fine.shape();
    const auto& c = coarse.shape();
    if (f.rank() != 3 || c.rank() != 3 || f[0] != c[0] || f[1] / 2 != c[1] || f[2] / 2 != c[2]) {
      throw Error(std::string(op) + ": incompatible level dims " + f.str() + " and " + c.str());
    }
  }

  int add_param(const std::string& name, ad::Shape shape) {
    params_.emplace_back(name, shape);
    return static_cast<int>(params_.size()) - 1;
  }

  // Fan-in scaled uniform init for weight and bias.
  Layer add_layer(const std::string& name, ad::Shape wshape, int fan_in, int n_out, Rng& rng) {
    Layer l{add_param(name + ".w", wshape), add_param(name + ".b", ad::Shape{n_out})};
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : params_[l.w].value) v = static_cast<T>(uniform(rng, -bound, bound));
    for (auto& v : params_[l.b].value) v = static_cast<T>(uniform(rng, -bound, bound));
    return l;
  }

  Layer add_linear(const std::string& name, int n_in, int n_out, Rng& rng) {
    return add_layer(name, ad::Shape{n_out, n_in}, n_in, n_out, rng);
  }

  Layer add_conv(const std::string& name, int n_in, int n_out, int k, Rng& rng) {
    return add_layer(name, ad::Shape{n_out, n_in, k, k}, n_in * k * k, n_out, rng);
  }

  void build() {
    Rng rng = make_rng(cfg_.seed, 0x1417);
    const int c = cfg_.channels, d = cfg_.head_width;
    for (int i = 0; i < kNumLevels; ++i) {
      const std::string pre = "fusion" + std::to_string(i);
      Fusion f;
      for (int j = 0; j < kNumFeatures; ++j) {
        const std::string m = pre + ".att" + std::to_string(j);
        f.mlp1[j] = add_linear(m + ".fc1", kFeatureInputChannels, kFeatureInputChannels, rng);
        f.mlp2[j] = add_linear(m + ".fc2", kFeatureInputChannels, kFeatureChannels[j], rng);
      }
      f.phi = add_conv(pre + ".phi", kFeatureInputChannels, c, 3, rng);
      f.se1 = add_linear(pre + ".se.fc1", c, c / cfg_.se_reduction, rng);
      f.se2 = add_linear(pre + ".se.fc2", c / cfg_.se_reduction, c, rng);
      fusion_.push_back(f);
    }
    if (cfg_.enable_csram) {
      for (int i = 0; i + 1 < kNumLevels; ++i) {
        const std::string pre = "csram" + std::to_string(i);
        Csram s;
        s.down = add_conv(pre + ".down", c, c, 3, rng);
        s.psi_alpha = add_conv(pre + ".psi_alpha", c + 1, c, 1, rng);
        s.psi_rho = add_conv(pre + ".psi_rho", c + 1, c, 1, rng);
        s.psi_r = add_conv(pre + ".psi_r", c, c, 1, rng);
        for (auto& v : params_[s.psi_rho.b].value) v = static_cast<T>(kConfidenceBiasInit);
        csram_.push_back(s);
      }
    }
    if (cfg_.enable_scgb) {
      for (int i = 0; i + 1 < kNumLevels; ++i) {
        const std::string pre = "scgb" + std::to_string(i);
        scgb_.push_back({add_conv(pre + ".fc1", c, c, 1, rng), add_conv(pre + ".fc2", c, c, 1, rng)});
      }
    }
    if (cfg_.enable_rah) {
      for (int i = 0; i < kNumLevels; ++i) {
        head_.proj[i] = add_conv("head.proj" + std::to_string(i), c, d, 1, rng);
        head_.gem_p[i] = add_param("head.gem_p" + std::to_string(i), ad::Shape{1});
        params_[head_.gem_p[i]].value[0] = static_cast<T>(kGemInitExponent);
        gem_p_.push_back(head_.gem_p[i]);
      }
      head_.contrib = {add_linear("head.contrib.fc1", d, d / 2, rng),
                       add_linear("head.contrib.fc2", d / 2, 1, rng)};
      head_.reliab = {add_linear("head.reliab.fc1", d, d / 2, rng),
                      add_linear("head.reliab.fc2", d / 2, 1, rng)};
    } else {
      const int in = kNumLevels * c;
      baseline_ = {add_linear("head.pool.fc1", in, c / 2, rng), add_linear("head.pool.fc2", c / 2, 1, rng)};
    }
  }

  NetworkConfig cfg_;
  std::vector<Param> params_;
  std::vector<Fusion> fusion_;
  std::vector<Csram> csram_;
  std::vector<Scgb> scgb_;
  Head head_;
  TwoLayer baseline_;
  std::vector<int> gem_p_;
};

}  // namespace birqa

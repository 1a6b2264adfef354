#pragma once

// Conditional transformer over PS token sequences: input MLP on banded
// log-magnitude features, per-band token embeddings, pre-norm encoder blocks
// and an output MLP. Gradients are derived by hand for this closed op set.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/errors.hpp"
#include "psup/ps_codec.hpp"
#include "psup/spectral.hpp"

namespace psup {

enum class Regime : std::uint8_t { kAr = 0, kMtm = 1, kReg = 2 };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::kAr: return "ar";
    case Regime::kMtm: return "mtm";
    case Regime::kReg: return "reg";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "ar") return Regime::kAr;
  if (s == "mtm") return Regime::kMtm;
  if (s == "reg") return Regime::kReg;
  throw ConfigError("unknown training mode '" + s + "' (expected ar, mtm or reg)");
}

struct ModelConfig {
  int n_blocks = 7;
  int channels = 512;
  int heads = 16;
  int mlp_expansion = 3;
  int out_mlp_expansion = 2;
  int in_mlp_expansion = 2;
  int n_bands = kBands;
  int n_classes = kVocab;
  int n_features = kBands;
  int frames = 262;  // context length; 6 s patches
  Regime regime = Regime::kMtm;

  static ModelConfig full(Regime r) {
    ModelConfig c;
    c.regime = r;
    return c;
  }
  static ModelConfig toy(Regime r) {
    ModelConfig c;
    c.n_blocks = 2;
    c.channels = 64;
    c.heads = 4;
    c.frames = 40;
    c.regime = r;
    return c;
  }

  [[nodiscard]] bool token_mode() const { return regime != Regime::kReg; }
  [[nodiscard]] bool causal() const { return regime == Regime::kAr; }
  [[nodiscard]] int mask_token() const { return n_classes; }
  [[nodiscard]] int head_outputs() const { return token_mode() ? n_bands * n_classes : 2 * n_bands; }

  void validate() const {
    if (n_blocks < 1 || channels < 1 || heads < 1 || frames < 1) throw ConfigError("model sizes must be positive");
    if (channels % heads != 0) throw ConfigError("channels must be divisible by heads");
    if (mlp_expansion < 1 || out_mlp_expansion < 1 || in_mlp_expansion < 1) {
      throw ConfigError("MLP expansion factors must be >= 1");
    }
    if (n_classes != kIidSteps * kIcSteps) throw ConfigError("n_classes must be 31*8");
    if (n_bands < 1 || n_features < 1) throw ConfigError("band and feature counts must be positive");
  }
};

struct Param {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
};

/// One (band, frame) slot of the token grid.
struct Query {
  int band = 0;
  Eigen::Index frame = 0;
  bool operator==(const Query&) const = default;
};

struct ModelInput {
  Eigen::MatrixXd features;  // n_features x T
  Eigen::MatrixXi tokens;    // n_bands x T, mask id allowed
  bool drop = false;         // conditioning replaced by the dropout token
};

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
inline Eigen::MatrixXd gelu(const Eigen::MatrixXd& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

struct LnCache {
  Eigen::MatrixXd xhat;
  Eigen::RowVectorXd rstd;
};

inline constexpr double kLnEps = 1e-5;

// Normalizes every column over its rows.
inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b,
                                  LnCache& c) {
  const Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::MatrixXd xc = x.rowwise() - mu;
  const Eigen::RowVectorXd var = xc.array().square().colwise().mean();
  c.rstd = (var.array() + kLnEps).rsqrt();
  c.xhat = xc.array().rowwise() * c.rstd.array();
  return (c.xhat.array().colwise() * g.array()).colwise() + b.array();
}

inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::VectorXd& g, const LnCache& c,
                                           Eigen::MatrixXd& dg, Eigen::MatrixXd& db) {
  dg += (dy.array() * c.xhat.array()).rowwise().sum().matrix();
  db += dy.rowwise().sum();
  const Eigen::MatrixXd dxhat = dy.array().colwise() * g.array();
  const Eigen::RowVectorXd m1 = dxhat.colwise().mean();
  const Eigen::RowVectorXd m2 = (dxhat.array() * c.xhat.array()).colwise().mean();
  Eigen::MatrixXd dx = dxhat.rowwise() - m1;
  dx -= (c.xhat.array().rowwise() * m2.array()).matrix();
  return dx.array().rowwise() * c.rstd.array();
}

inline Eigen::MatrixXd positional_encoding(int channels, Eigen::Index frames) {
  Eigen::MatrixXd pe(channels, frames);
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int r = 0; r < channels; ++r) {
      const double freq = std::pow(10000.0, -static_cast<double>(r / 2 * 2) / channels);
      pe(r, t) = r % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return pe;
}

}  // namespace detail

/// Intermediate values of one forward pass, kept for the backward pass.
struct Trace {
  struct Block {
    Eigen::MatrixXd x_in;
    detail::LnCache ln1, ln2;
    Eigen::MatrixXd z1, q, k, v, att;
    std::vector<Eigen::MatrixXd> probs;  // per head, T x T (query rows)
    Eigen::MatrixXd x_mid, z2, mh, ma;
  };
  ModelInput input;
  Eigen::MatrixXd in_h, in_a;
  std::vector<Block> blocks;
  detail::LnCache lnf;
  Eigen::MatrixXd y;                      // C x T
  std::vector<Eigen::Index> head_frames;  // frames with head activations
  std::map<Eigen::Index, Eigen::Index> head_col;
  Eigen::MatrixXd head_h, head_a;  // hidden x n_head_frames
};

class SeqModel {
 public:
  SeqModel() = default;
  SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    allocate();
    init(seed);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] std::vector<Param>& params() { return params_; }
  [[nodiscard]] const std::vector<Param>& params() const { return params_; }
  [[nodiscard]] std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
  }
  [[nodiscard]] const Param& param(const std::string& name) const {
    for (const Param& p : params_) {
      if (p.name == name) return p;
    }
    throw ModelError("no parameter named " + name);
  }
  Param& param(const std::string& name) { return const_cast<Param&>(std::as_const(*this).param(name)); }

  void zero_grad() {
    for (Param& p : params_) p.grad.setZero();
  }

  /// H = phi(features) (or the dropout token) + sum of per-band embeddings + positional code.
  [[nodiscard]] Eigen::MatrixXd embed(const ModelInput& in, Trace* tr = nullptr) const {
    check_input(in);
    const Eigen::Index T = in.features.cols();
    Eigen::MatrixXd h;
    if (in.drop) {
      h = P(kCondDrop).replicate(1, T);
    } else {
      Eigen::MatrixXd in_h = (P(kInW1) * in.features).colwise() + P(kInB1).col(0);
      Eigen::MatrixXd in_a = detail::gelu(in_h);
      h = (P(kInW2) * in_a).colwise() + P(kInB2).col(0);
      if (tr != nullptr) {
        tr->in_h = std::move(in_h);
        tr->in_a = std::move(in_a);
      }
    }
    const Eigen::MatrixXd& emb = P(kEmbed);
    const int stride = cfg_.n_classes + 1;
    for (Eigen::Index t = 0; t < T; ++t) {
      for (int b = 0; b < cfg_.n_bands; ++b) h.col(t) += emb.col(b * stride + in.tokens(b, t));
    }
    h += detail::positional_encoding(cfg_.channels, T);
    return h;
  }

  /// Full forward pass; the output MLP hidden layer is evaluated only at `head_frames`.
  void run(const ModelInput& in, const std::vector<Eigen::Index>& head_frames, Trace& tr) const {
    tr.input = in;
    Eigen::MatrixXd x = embed(in, &tr);
    const Eigen::Index T = x.cols();
    tr.blocks.assign(static_cast<std::size_t>(cfg_.n_blocks), {});
    for (int l = 0; l < cfg_.n_blocks; ++l) x = block_forward(l, x, tr.blocks[static_cast<std::size_t>(l)]);
    tr.y = detail::layer_norm(x, P(kLnfG), P(kLnfB), tr.lnf);
    tr.head_frames = head_frames;
    tr.head_col.clear();
    Eigen::MatrixXd ysel(cfg_.channels, static_cast<Eigen::Index>(head_frames.size()));
    for (std::size_t k = 0; k < head_frames.size(); ++k) {
      const Eigen::Index f = head_frames[k];
      if (f < 0 || f >= T) throw ShapeError("head frame outside the sequence");
      if (!tr.head_col.emplace(f, static_cast<Eigen::Index>(k)).second) throw ShapeError("duplicate head frame");
      ysel.col(static_cast<Eigen::Index>(k)) = tr.y.col(f);
    }
    tr.head_h = (P(kOutW1) * ysel).colwise() + P(kOutB1).col(0);
    tr.head_a = detail::gelu(tr.head_h);
  }

  /// Logits (n_classes x queries.size()) for band/frame slots; frames must be head frames.
  [[nodiscard]] Eigen::MatrixXd token_logits(const Trace& tr, const std::vector<Query>& queries) const {
    if (!cfg_.token_mode()) throw ModelError("token_logits on a regression model");
    const int V = cfg_.n_classes;
    Eigen::MatrixXd out(V, static_cast<Eigen::Index>(queries.size()));
    for (const auto& [band, idx] : group_by_band(queries)) {
      Eigen::MatrixXd a(tr.head_a.rows(), static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) a.col(static_cast<Eigen::Index>(k)) = tr.head_a.col(head_index(tr, queries[idx[k]]));
      const Eigen::MatrixXd l = (P(kOutW2).middleRows(band * V, V) * a).colwise() + P(kOutB2).col(0).segment(band * V, V);
      for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(idx[k])) = l.col(static_cast<Eigen::Index>(k));
    }
    return out;
  }

  /// Regression output, 2*n_bands x n_head_frames (IID rows then IC rows).
  [[nodiscard]] Eigen::MatrixXd regression_output(const Trace& tr) const {
    if (cfg_.token_mode()) throw ModelError("regression_output on a token model");
    return (P(kOutW2) * tr.head_a).colwise() + P(kOutB2).col(0);
  }

  void backward_tokens(const Trace& tr, const std::vector<Query>& queries, const Eigen::MatrixXd& dlogits) {
    const int V = cfg_.n_classes;
    Eigen::MatrixXd da = Eigen::MatrixXd::Zero(tr.head_a.rows(), tr.head_a.cols());
    for (const auto& [band, idx] : group_by_band(queries)) {
      Eigen::MatrixXd a(tr.head_a.rows(), static_cast<Eigen::Index>(idx.size()));
      Eigen::MatrixXd dl(V, static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        a.col(static_cast<Eigen::Index>(k)) = tr.head_a.col(head_index(tr, queries[idx[k]]));
        dl.col(static_cast<Eigen::Index>(k)) = dlogits.col(static_cast<Eigen::Index>(idx[k]));
      }
      G(kOutW2).middleRows(band * V, V) += dl * a.transpose();
      G(kOutB2).col(0).segment(band * V, V) += dl.rowwise().sum();
      const Eigen::MatrixXd dak = P(kOutW2).middleRows(band * V, V).transpose() * dl;
      for (std::size_t k = 0; k < idx.size(); ++k) da.col(head_index(tr, queries[idx[k]])) += dak.col(static_cast<Eigen::Index>(k));
    }
    backward_head(tr, da);
  }

  void backward_regression(const Trace& tr, const Eigen::MatrixXd& dout) {
    G(kOutW2) += dout * tr.head_a.transpose();
    G(kOutB2) += dout.rowwise().sum();
    backward_head(tr, P(kOutW2).transpose() * dout);
  }

 private:
  enum : int { kInW1, kInB1, kInW2, kInB2, kCondDrop, kEmbed, kBlocks };
  enum : int { bLn1G, bLn1B, bWq, bBq, bWk, bBk, bWv, bBv, bWo, bBo, bLn2G, bLn2B, bW1, bB1, bW2, bB2, kPerBlock };
  [[nodiscard]] int tail() const { return kBlocks + cfg_.n_blocks * kPerBlock; }

  [[nodiscard]] const Eigen::MatrixXd& P(int i) const { return params_[static_cast<std::size_t>(resolve(i))].value; }
  Eigen::MatrixXd& G(int i) { return params_[static_cast<std::size_t>(resolve(i))].grad; }
  [[nodiscard]] const Eigen::MatrixXd& BP(int l, int i) const {
    return params_[static_cast<std::size_t>(kBlocks + l * kPerBlock + i)].value;
  }
  Eigen::MatrixXd& BG(int l, int i) { return params_[static_cast<std::size_t>(kBlocks + l * kPerBlock + i)].grad; }

  // Tail parameters are addressed with negative ids so the enum stays fixed.
  static constexpr int kLnfG = -1, kLnfB = -2, kOutW1 = -3, kOutB1 = -4, kOutW2 = -5, kOutB2 = -6;
  [[nodiscard]] int resolve(int i) const { return i >= 0 ? i : tail() + (-i - 1); }

  void allocate() {
    const int C = cfg_.channels;
    const int Cin = cfg_.in_mlp_expansion * C, Cm = cfg_.mlp_expansion * C, Co = cfg_.out_mlp_expansion * C;
    auto add = [&](std::string name, Eigen::Index r, Eigen::Index c) {
      params_.push_back({std::move(name), Eigen::MatrixXd::Zero(r, c), Eigen::MatrixXd::Zero(r, c)});
    };
    add("in.w1", Cin, cfg_.n_features);
    add("in.b1", Cin, 1);
    add("in.w2", C, Cin);
    add("in.b2", C, 1);
    add("cond_drop", C, 1);
    add("embed", C, static_cast<Eigen::Index>(cfg_.n_bands) * (cfg_.n_classes + 1));
    for (int l = 0; l < cfg_.n_blocks; ++l) {
      const std::string p = "blk" + std::to_string(l) + ".";
      add(p + "ln1.g", C, 1);
      add(p + "ln1.b", C, 1);
      for (const char* n : {"q", "k", "v", "o"}) {
        add(p + "attn.w" + n, C, C);
        add(p + "attn.b" + n, C, 1);
      }
      add(p + "ln2.g", C, 1);
      add(p + "ln2.b", C, 1);
      add(p + "mlp.w1", Cm, C);
      add(p + "mlp.b1", Cm, 1);
      add(p + "mlp.w2", C, Cm);
      add(p + "mlp.b2", C, 1);
    }
    add("lnf.g", C, 1);
    add("lnf.b", C, 1);
    add("out.w1", Co, C);
    add("out.b1", Co, 1);
    add("out.w2", cfg_.head_outputs(), Co);
    add("out.b2", cfg_.head_outputs(), 1);
  }

  // Uniform fan-in scaling for affine maps; the summed band embeddings get unit variance.
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto fill = [&](Eigen::MatrixXd& m, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    };
    auto affine = [&](int w, int b) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(params_[static_cast<std::size_t>(w)].value.cols()));
      fill(params_[static_cast<std::size_t>(w)].value, bound);
      fill(params_[static_cast<std::size_t>(b)].value, bound);
    };
    affine(kInW1, kInB1);
    affine(kInW2, kInB2);
    fill(params_[kCondDrop].value, 1.0 / std::sqrt(static_cast<double>(cfg_.channels)));
    fill(params_[kEmbed].value, std::sqrt(3.0 / cfg_.n_bands));
    for (int l = 0; l < cfg_.n_blocks; ++l) {
      const int base = kBlocks + l * kPerBlock;
      params_[static_cast<std::size_t>(base + bLn1G)].value.setOnes();
      params_[static_cast<std::size_t>(base + bLn2G)].value.setOnes();
      for (int w : {bWq, bWk, bWv, bWo, bW1, bW2}) affine(base + w, base + w + 1);
    }
    params_[static_cast<std::size_t>(resolve(kLnfG))].value.setOnes();
    affine(resolve(kOutW1), resolve(kOutB1));
    affine(resolve(kOutW2), resolve(kOutB2));
  }

  void check_input(const ModelInput& in) const {
    if (in.features.rows() != cfg_.n_features) throw ShapeError("model input: wrong feature dimension");
    if (in.tokens.rows() != cfg_.n_bands) throw ShapeError("model input: wrong band count");
    if (in.tokens.cols() != in.features.cols()) throw ShapeError("model input: feature/token frame counts differ");
    if (in.features.cols() < 1) throw ShapeError("model input: empty sequence");
    if (in.tokens.size() > 0 && (in.tokens.minCoeff() < 0 || in.tokens.maxCoeff() > cfg_.mask_token())) {
      throw TokenRangeError("model input: token outside [0, 248]");
    }
  }

  Eigen::MatrixXd block_forward(int l, const Eigen::MatrixXd& x, Trace::Block& bt) const {
    const int C = cfg_.channels, H = cfg_.heads, dh = C / H;
    const Eigen::Index T = x.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    bt.x_in = x;
    bt.z1 = detail::layer_norm(x, BP(l, bLn1G), BP(l, bLn1B), bt.ln1);
    bt.q = (BP(l, bWq) * bt.z1).colwise() + BP(l, bBq).col(0);
    bt.k = (BP(l, bWk) * bt.z1).colwise() + BP(l, bBk).col(0);
    bt.v = (BP(l, bWv) * bt.z1).colwise() + BP(l, bBv).col(0);
    bt.att.resize(C, T);
    bt.probs.assign(static_cast<std::size_t>(H), {});
    for (int h = 0; h < H; ++h) {
      Eigen::MatrixXd s = bt.q.middleRows(h * dh, dh).transpose() * bt.k.middleRows(h * dh, dh) * scale;
      for (Eigen::Index i = 0; i < T; ++i) {
        const Eigen::Index visible = cfg_.causal() ? i + 1 : T;
        const double mx = s.row(i).head(visible).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < T; ++j) {
          const double e = j < visible ? std::exp(s(i, j) - mx) : 0.0;
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      bt.att.middleRows(h * dh, dh) = bt.v.middleRows(h * dh, dh) * s.transpose();
      bt.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    bt.x_mid = x + ((BP(l, bWo) * bt.att).colwise() + BP(l, bBo).col(0));
    bt.z2 = detail::layer_norm(bt.x_mid, BP(l, bLn2G), BP(l, bLn2B), bt.ln2);
    bt.mh = (BP(l, bW1) * bt.z2).colwise() + BP(l, bB1).col(0);
    bt.ma = detail::gelu(bt.mh);
    return bt.x_mid + ((BP(l, bW2) * bt.ma).colwise() + BP(l, bB2).col(0));
  }

  Eigen::MatrixXd block_backward(int l, const Eigen::MatrixXd& dout, const Trace::Block& bt) {
    const int C = cfg_.channels, H = cfg_.heads, dh = C / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // MLP branch
    BG(l, bW2) += dout * bt.ma.transpose();
    BG(l, bB2) += dout.rowwise().sum();
    const Eigen::MatrixXd dmh = (BP(l, bW2).transpose() * dout).cwiseProduct(bt.mh.unaryExpr([](double v) { return detail::gelu_grad(v); }));
    BG(l, bW1) += dmh * bt.z2.transpose();
    BG(l, bB1) += dmh.rowwise().sum();
    const Eigen::MatrixXd dz2 = BP(l, bW1).transpose() * dmh;
    Eigen::MatrixXd dx_mid = dout + detail::layer_norm_backward(dz2, BP(l, bLn2G), bt.ln2, BG(l, bLn2G), BG(l, bLn2B));
    // attention branch
    BG(l, bWo) += dx_mid * bt.att.transpose();
    BG(l, bBo) += dx_mid.rowwise().sum();
    const Eigen::MatrixXd datt = BP(l, bWo).transpose() * dx_mid;
    Eigen::MatrixXd dq(C, bt.q.cols()), dk(C, bt.k.cols()), dv(C, bt.v.cols());
    for (int h = 0; h < H; ++h) {
      const Eigen::MatrixXd& p = bt.probs[static_cast<std::size_t>(h)];
      const auto doh = datt.middleRows(h * dh, dh);
      dv.middleRows(h * dh, dh) = doh * p;
      const Eigen::MatrixXd dp = doh.transpose() * bt.v.middleRows(h * dh, dh);
      const Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
      const Eigen::MatrixXd ds = p.array() * (dp.colwise() - rs).array();
      dq.middleRows(h * dh, dh) = bt.k.middleRows(h * dh, dh) * ds.transpose() * scale;
      dk.middleRows(h * dh, dh) = bt.q.middleRows(h * dh, dh) * ds * scale;
    }
    BG(l, bWq) += dq * bt.z1.transpose();
    BG(l, bBq) += dq.rowwise().sum();
    BG(l, bWk) += dk * bt.z1.transpose();
    BG(l, bBk) += dk.rowwise().sum();
    BG(l, bWv) += dv * bt.z1.transpose();
    BG(l, bBv) += dv.rowwise().sum();
    const Eigen::MatrixXd dz1 = BP(l, bWq).transpose() * dq + BP(l, bWk).transpose() * dk + BP(l, bWv).transpose() * dv;
    return dx_mid + detail::layer_norm_backward(dz1, BP(l, bLn1G), bt.ln1, BG(l, bLn1G), BG(l, bLn1B));
  }

  void backward_head(const Trace& tr, const Eigen::MatrixXd& da) {
    const Eigen::MatrixXd dh = da.cwiseProduct(tr.head_h.unaryExpr([](double v) { return detail::gelu_grad(v); }));
    Eigen::MatrixXd ysel(cfg_.channels, static_cast<Eigen::Index>(tr.head_frames.size()));
    for (std::size_t k = 0; k < tr.head_frames.size(); ++k) ysel.col(static_cast<Eigen::Index>(k)) = tr.y.col(tr.head_frames[k]);
    G(kOutW1) += dh * ysel.transpose();
    G(kOutB1) += dh.rowwise().sum();
    const Eigen::MatrixXd dysel = P(kOutW1).transpose() * dh;
    Eigen::MatrixXd dy = Eigen::MatrixXd::Zero(cfg_.channels, tr.y.cols());
    for (std::size_t k = 0; k < tr.head_frames.size(); ++k) dy.col(tr.head_frames[k]) += dysel.col(static_cast<Eigen::Index>(k));
    Eigen::MatrixXd dx = detail::layer_norm_backward(dy, P(kLnfG), tr.lnf, G(kLnfG), G(kLnfB));
    for (int l = cfg_.n_blocks - 1; l >= 0; --l) dx = block_backward(l, dx, tr.blocks[static_cast<std::size_t>(l)]);
    backward_embed(tr, dx);
  }

  void backward_embed(const Trace& tr, const Eigen::MatrixXd& dh) {
    const ModelInput& in = tr.input;
    const int stride = cfg_.n_classes + 1;
    Eigen::MatrixXd& ge = G(kEmbed);
    for (Eigen::Index t = 0; t < dh.cols(); ++t) {
      for (int b = 0; b < cfg_.n_bands; ++b) ge.col(b * stride + in.tokens(b, t)) += dh.col(t);
    }
    if (in.drop) {
      G(kCondDrop) += dh.rowwise().sum();
      return;
    }
    G(kInW2) += dh * tr.in_a.transpose();
    G(kInB2) += dh.rowwise().sum();
    const Eigen::MatrixXd din = (P(kInW2).transpose() * dh).cwiseProduct(tr.in_h.unaryExpr([](double v) { return detail::gelu_grad(v); }));
    G(kInW1) += din * in.features.transpose();
    G(kInB1) += din.rowwise().sum();
  }

  static std::map<int, std::vector<std::size_t>> group_by_band(const std::vector<Query>& queries) {
    std::map<int, std::vector<std::size_t>> g;
    for (std::size_t i = 0; i < queries.size(); ++i) g[queries[i].band].push_back(i);
    return g;
  }

  Eigen::Index head_index(const Trace& tr, const Query& q) const {
    if (q.band < 0 || q.band >= cfg_.n_bands) throw ShapeError("query band out of range");
    const auto it = tr.head_col.find(q.frame);
    if (it == tr.head_col.end()) throw ShapeError("query frame has no head activation");
    return it->second;
  }

  ModelConfig cfg_;
  std::vector<Param> params_;
};

/// Banded log-magnitude features log(1 + B|S|), n_bands x frames.
inline Eigen::MatrixXd model_features(const ComplexSpectrogram& s, const BandMap& bands) {
  return bands.sum_bins(s.cwiseAbs()).array().log1p();
}

/// 1 + lambda * std(clip(IID, +-eps)) + std(IC), population deviations over all elements.
inline double ce_weight(const PsParams& p, double lambda = 0.15, double eps_db = 20.0) {
  auto pstd = [](const Eigen::ArrayXXd& a) {
    if (a.size() == 0) return 0.0;
    const double mu = a.mean();
    return std::sqrt((a - mu).square().mean());
  };
  return 1.0 + lambda * pstd(p.iid.array().max(-eps_db).min(eps_db)) + pstd(p.ic.array());
}

/// w * mean cross-entropy over the given logit columns; fills the gradient if asked.
inline double token_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets, double w,
                         Eigen::MatrixXd* dlogits = nullptr) {
  if (targets.empty()) throw MaskError("token loss needs at least one masked position");
  if (logits.cols() != static_cast<Eigen::Index>(targets.size())) throw ShapeError("token loss: logits/targets mismatch");
  const auto n = static_cast<double>(targets.size());
  double total = 0.0;
  if (dlogits != nullptr) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index k = 0; k < logits.cols(); ++k) {
    const int t = targets[static_cast<std::size_t>(k)];
    if (t < 0 || t >= logits.rows()) throw TokenRangeError("token loss: target outside vocabulary");
    const double mx = logits.col(k).maxCoeff();
    const Eigen::VectorXd e = (logits.col(k).array() - mx).exp();
    const double z = e.sum();
    total += std::log(z) + mx - logits(t, k);
    if (dlogits != nullptr) {
      dlogits->col(k) = e / z;
      (*dlogits)(t, k) -= 1.0;
      dlogits->col(k) *= w / n;
    }
  }
  return w * total / n;
}

/// Mean squared error over all elements.
inline double regression_loss(const Eigen::MatrixXd& out, const Eigen::MatrixXd& target, Eigen::MatrixXd* dout = nullptr) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) throw ShapeError("regression loss: shape mismatch");
  const Eigen::MatrixXd diff = out - target;
  if (dout != nullptr) *dout = 2.0 * diff / static_cast<double>(diff.size());
  return diff.squaredNorm() / static_cast<double>(diff.size());
}

/// Masked-position count for a training draw u in (0, 1]: ceil(sin(pi u / 2) * total).
inline Eigen::Index mtm_training_count(double u, Eigen::Index total) {
  const double gamma = std::cos(std::numbers::pi * (1.0 - u) / 2.0);
  return std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::ceil(gamma * static_cast<double>(total))), 1, total);
}

/// Training masks. ar: the top m bands of the last frame, m ~ U{1..n_bands};
/// mtm: ceil(sin(pi u / 2) * total) uniform positions, u ~ U(0, 1].
template <class Rng>
std::vector<Query> make_training_masks(Regime regime, int n_bands, Eigen::Index n_frames, Rng& rng) {
  if (n_bands < 1 || n_frames < 1) throw ShapeError("mask grid must be non-empty");
  std::vector<Query> out;
  if (regime == Regime::kAr) {
    std::uniform_int_distribution<int> m(1, n_bands);
    const int count = m(rng);
    for (int b = n_bands - count; b < n_bands; ++b) out.push_back({b, n_frames - 1});
    return out;
  }
  if (regime != Regime::kMtm) throw ConfigError("masks are defined for ar and mtm only");
  const Eigen::Index total = n_bands * n_frames;
  const double u = 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const Eigen::Index count = mtm_training_count(u, total);
  std::vector<Eigen::Index> pos(static_cast<std::size_t>(total));
  for (Eigen::Index i = 0; i < total; ++i) pos[static_cast<std::size_t>(i)] = i;
  for (Eigen::Index i = 0; i < count; ++i) {
    std::uniform_int_distribution<Eigen::Index> pick(i, total - 1);
    std::swap(pos[static_cast<std::size_t>(i)], pos[static_cast<std::size_t>(pick(rng))]);
  }
  std::sort(pos.begin(), pos.begin() + count);
  for (Eigen::Index i = 0; i < count; ++i) {
    const Eigen::Index p = pos[static_cast<std::size_t>(i)];
    out.push_back({static_cast<int>(p % n_bands), p / n_bands});
  }
  return out;
}

/// One training sequence with its targets.
struct Example {
  ModelInput input;
  std::vector<Query> masked;      // token mode
  std::vector<int> targets;       // token ids at `masked`
  Eigen::MatrixXd target_params;  // regression, 2*n_bands x T
  double weight = 1.0;
};

namespace detail {

inline std::vector<Eigen::Index> frames_of(const std::vector<Query>& q) {
  std::vector<Eigen::Index> f;
  for (const Query& x : q) f.push_back(x.frame);
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

inline std::vector<Eigen::Index> all_frames(Eigen::Index n) {
  std::vector<Eigen::Index> f(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = i;
  return f;
}

inline double example_loss(SeqModel& model, const Example& ex, double scale, bool grad) {
  Trace tr;
  if (model.config().token_mode()) {
    model.run(ex.input, frames_of(ex.masked), tr);
    const Eigen::MatrixXd logits = model.token_logits(tr, ex.masked);
    Eigen::MatrixXd dl;
    const double loss = token_loss(logits, ex.targets, ex.weight, grad ? &dl : nullptr);
    if (grad) model.backward_tokens(tr, ex.masked, dl * scale);
    return loss;
  }
  model.run(ex.input, all_frames(ex.input.features.cols()), tr);
  Eigen::MatrixXd d;
  const double loss = regression_loss(model.regression_output(tr), ex.target_params, grad ? &d : nullptr);
  if (grad) model.backward_regression(tr, d * scale);
  return loss;
}

}  // namespace detail

/// Mean loss over the batch; with `grad`, parameter gradients are overwritten with its gradient.
inline double batch_loss(SeqModel& model, const std::vector<Example>& batch, bool grad) {
  if (batch.empty()) throw DataError("empty batch");
  if (grad) model.zero_grad();
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const Example& ex : batch) total += detail::example_loss(model, ex, scale, grad);
  return total * scale;
}

struct TrainConfig {
  int steps = 1000;
  int batch = 128;
  double lr = 1e-4;
  double warmup = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda = 0.15;
  double eps_db = 20.0;
  double cond_dropout = 0.10;
  double gain_min_db = -6.0;
  double gain_max_db = 0.0;
  double swap_prob = 0.5;
  double ar_cold_prob = 0.1;  // AR examples whose whole token stream is masked
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || batch < 1) throw ConfigError("steps and batch must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("warmup fraction must lie in [0, 1)");
    if (cond_dropout < 0.0 || cond_dropout > 1.0) throw ConfigError("cond_dropout must lie in [0, 1]");
    if (swap_prob < 0.0 || swap_prob > 1.0) throw ConfigError("swap_prob must lie in [0, 1]");
    if (ar_cold_prob < 0.0 || ar_cold_prob > 1.0) throw ConfigError("ar_cold_prob must lie in [0, 1]");
    if (gain_min_db > gain_max_db) throw ConfigError("gain range is inverted");
  }
};

/// Linear warmup from 0 to `base`, then cosine decay to 0 at `total`.
inline double lr_at(int step, int total, double base, double warmup_frac) {
  const int warm = std::max(1, static_cast<int>(std::lround(warmup_frac * total)));
  if (step < warm) return base * step / warm;
  if (step >= total) return 0.0;
  const double progress = static_cast<double>(step - warm) / std::max(1, total - warm);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

class Adam {
 public:
  Adam(const SeqModel& model, const TrainConfig& cfg) : b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
    for (const Param& p : model.params()) {
      m_.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step(SeqModel& model, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * ps[i].grad;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * ps[i].grad.cwiseAbs2();
      ps[i].value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

 private:
  double b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Eigen::MatrixXd> m_, v_;
};

/// Per-item banded magnitudes of the mono downmix and the encoded PS parameters.
struct TrainCorpus {
  struct Item {
    Eigen::MatrixXd mag;     // n_bands x frames, B|S| of the downmix
    Eigen::MatrixXd params;  // 2*n_bands x frames
  };
  std::vector<Item> items;
};

inline TrainCorpus prepare_corpus(const std::vector<AudioBuffer>& stereo, const BandMap& bands,
                                  const StftConfig& stft_cfg = {}) {
  TrainCorpus c;
  for (const AudioBuffer& a : stereo) {
    if (a.channels() != 2) throw ChannelCountError("training corpus items must be stereo");
    if (a.length() < stft_cfg.frame_size) continue;
    c.items.push_back({bands.sum_bins(stft(downmix(a).channel(0), stft_cfg).cwiseAbs()),
                       encode(stft(a.channel(0), stft_cfg), stft(a.channel(1), stft_cfg), bands).joined()});
  }
  return c;
}

/// Draws one augmented patch. Gain and channel swap are applied to the features
/// and parameters directly: gain scales the banded magnitudes, a swap negates IID.
template <class Rng>
Example draw_example(const TrainCorpus& corpus, const ModelConfig& mc, const TrainConfig& tc, Rng& rng,
                     const QuantGrids& grids = QuantGrids::defaults()) {
  const Eigen::Index F = mc.frames;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    if (corpus.items[i].mag.cols() >= F) eligible.push_back(i);
  }
  if (eligible.empty()) throw DataError("no corpus item spans " + std::to_string(F) + " frames");
  const auto& item = corpus.items[eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)]];
  Eigen::Index off = 0, len = F;
  if (mc.regime == Regime::kAr) {
    // windows as the sampler sees them: any end frame, truncated at the item start
    const Eigen::Index end = std::uniform_int_distribution<Eigen::Index>(0, item.mag.cols() - 1)(rng);
    off = std::max<Eigen::Index>(0, end - F + 1);
    len = end - off + 1;
  } else {
    off = std::uniform_int_distribution<Eigen::Index>(0, item.mag.cols() - F)(rng);
  }
  const double gain = std::pow(10.0, std::uniform_real_distribution<double>(tc.gain_min_db, tc.gain_max_db)(rng) / 20.0);
  const bool swap = std::bernoulli_distribution(tc.swap_prob)(rng);

  Example ex;
  ex.input.features = (gain * item.mag.middleCols(off, len)).array().log1p();
  PsParams p = PsParams::from_joined(item.params.middleCols(off, len));
  if (swap) p.iid = -p.iid;
  ex.weight = ce_weight(p, tc.lambda, tc.eps_db);

  if (mc.regime == Regime::kReg) {
    ex.input.tokens = Eigen::MatrixXi::Constant(mc.n_bands, len, mc.mask_token());
    ex.target_params = p.joined();
    return ex;
  }
  const PsTokens q = quantize(p, grids);
  ex.input.tokens = q.q;
  ex.input.drop = std::bernoulli_distribution(tc.cond_dropout)(rng);
  ex.masked = make_training_masks(mc.regime, mc.n_bands, len, rng);
  for (const Query& m : ex.masked) {
    ex.targets.push_back(q.q(m.band, m.frame));
    ex.input.tokens(m.band, m.frame) = mc.mask_token();
  }
  // cold start: nothing generated yet, only the features are known
  if (mc.regime == Regime::kAr && std::bernoulli_distribution(tc.ar_cold_prob)(rng)) {
    ex.input.tokens.setConstant(mc.mask_token());
  }
  return ex;
}

struct TrainLogRow {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double w_mean = 0.0;
};

/// Runs `tc.steps` Adam updates; `log` sees every step.
inline void train(SeqModel& model, const TrainCorpus& corpus, const TrainConfig& tc,
                  const std::function<void(const TrainLogRow&)>& log = {},
                  const QuantGrids& grids = QuantGrids::defaults()) {
  tc.validate();
  if (corpus.items.empty()) throw DataError("empty training corpus");
  std::mt19937_64 rng(tc.seed);
  Adam opt(model, tc);
  std::vector<Example> batch(static_cast<std::size_t>(tc.batch));
  for (int s = 0; s < tc.steps; ++s) {
    double w_sum = 0.0;
    for (Example& ex : batch) {
      ex = draw_example(corpus, model.config(), tc, rng, grids);
      w_sum += ex.weight;
    }
    const double loss = batch_loss(model, batch, true);
    bool finite = std::isfinite(loss);
    for (const Param& p : model.params()) finite = finite && p.grad.allFinite();
    if (!finite) {
      throw ModelError("non-finite loss or gradient at step " + std::to_string(s) + " (loss " + std::to_string(loss) + ")");
    }
    const double lr = lr_at(s, tc.steps, tc.lr, tc.warmup);
    opt.step(model, lr);
    if (log) log({s, lr, loss, w_sum / tc.batch});
  }
}

inline void write_train_log_header(std::ostream& os) { os << "step,lr,loss,w_mean\n"; }
inline void write_train_log_row(std::ostream& os, const TrainLogRow& r) {
  os << r.step << ',' << r.lr << ',' << r.loss << ',' << r.w_mean << '\n';
}

inline void write_psm(std::ostream& os, const SeqModel& model) {
  const ModelConfig& c = model.config();
  os.write("PSM1", 4);
  for (int v : {c.n_blocks, c.channels, c.heads, c.mlp_expansion, c.out_mlp_expansion, c.in_mlp_expansion, c.n_bands,
                c.n_classes, c.n_features, c.frames}) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(c.regime));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.params().size()));
  for (const Param& p : model.params()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_le<std::uint32_t>(os, 2);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rows()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index k = 0; k < p.value.cols(); ++k) detail::write_le<float>(os, static_cast<float>(p.value(r, k)));
  }
}

inline SeqModel read_psm(std::istream& is) {
  detail::expect_magic(is, "PSM1");
  ModelConfig c;
  for (int* f : {&c.n_blocks, &c.channels, &c.heads, &c.mlp_expansion, &c.out_mlp_expansion, &c.in_mlp_expansion,
                 &c.n_bands, &c.n_classes, &c.n_features, &c.frames}) {
    const auto v = detail::read_le<std::uint32_t>(is);
    if (v > (1u << 20)) throw FormatError("PSM1: implausible header value");
    *f = static_cast<int>(v);
  }
  const auto regime = detail::read_le<std::uint8_t>(is);
  if (regime > 2) throw FormatError("PSM1: unknown regime");
  c.regime = static_cast<Regime>(regime);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("PSM1: bad model config: ") + e.what());
  }
  SeqModel model(c, 0);
  const auto n = detail::read_le<std::uint32_t>(is);
  if (n != model.params().size()) throw FormatError("PSM1: array count does not match the config");
  for (Param& p : model.params()) {
    const auto len = detail::read_le<std::uint32_t>(is);
    if (len > 256) throw FormatError("PSM1: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("unexpected end of file");
    if (name != p.name) throw FormatError("PSM1: expected array " + p.name + ", found " + name);
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank != 2) throw FormatError("PSM1: arrays must have rank 2");
    const auto rows = detail::read_le<std::uint32_t>(is);
    const auto cols = detail::read_le<std::uint32_t>(is);
    if (rows != p.value.rows() || cols != p.value.cols()) throw FormatError("PSM1: shape mismatch for " + name);
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index k = 0; k < p.value.cols(); ++k) p.value(r, k) = detail::read_le<float>(is);
    if (!p.value.allFinite()) throw FormatError("PSM1: non-finite weights in " + name);
  }
  return model;
}

inline void save_psm(const std::string& path, const SeqModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_psm(os, model);
}

inline SeqModel load_psm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path);
  return read_psm(is);
}

}  // namespace psup

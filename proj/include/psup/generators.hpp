#pragma once

// Samplers that turn a trained sequence model plus mono features into PS
// parameters, and the end-to-end upmix driver for every generator.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/decorr_baseline.hpp"
#include "psup/errors.hpp"
#include "psup/ps_codec.hpp"
#include "psup/ps_nn.hpp"
#include "psup/seq_model.hpp"
#include "psup/spectral.hpp"

namespace psup {

enum class Confidence { kLogit, kProbability, kMargin };

struct SampleConfig {
  double ar_temperature = 0.9;
  double ar_guidance = 0.25;
  bool ar_greedy = false;
  double mtm_noise = 4.5;  // std of the confidence noise
  double mtm_guidance = 0.75;
  int mtm_steps = 20;
  Confidence confidence = Confidence::kLogit;

  void validate() const {
    if (!ar_greedy && !(ar_temperature > 0.0)) throw ConfigError("AR temperature must be > 0");
    if (!(mtm_noise >= 0.0)) throw ConfigError("MTM noise std must be >= 0");
    if (mtm_steps < 1) throw ConfigError("MTM steps must be >= 1");
  }
};

struct SamplerStats {
  std::int64_t forward_passes = 0;
};

/// U = (1 + g) U_cond - g U_uncond.
inline Eigen::MatrixXd cfg_logits(const Eigen::MatrixXd& cond, const Eigen::MatrixXd& uncond, double guidance) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols()) throw ShapeError("cfg_logits: shape mismatch");
  return (1.0 + guidance) * cond - guidance * uncond;
}

/// Tokens left masked after step t of T.
inline Eigen::Index mtm_schedule_count(int t, int total_steps, Eigen::Index n_tokens) {
  if (total_steps < 1 || t < 0 || t > total_steps) throw ConfigError("mtm schedule: step outside [0, T]");
  if (t == total_steps) return 0;
  return static_cast<Eigen::Index>(
      std::ceil(std::cos(std::numbers::pi * t / (2.0 * total_steps)) * static_cast<double>(n_tokens)));
}

namespace detail {

inline Eigen::VectorXd softmax(const Eigen::VectorXd& u) {
  const Eigen::VectorXd e = (u.array() - u.maxCoeff()).exp();
  return e / e.sum();
}

template <class Rng>
int draw_categorical(const Eigen::VectorXd& p, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  Eigen::Index last = p.size() - 1;
  while (last > 0 && p[last] == 0.0) --last;
  return static_cast<int>(last);
}

inline int argmax(const Eigen::VectorXd& v) {
  Eigen::Index i;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

inline void check_logits(const Eigen::MatrixXd& u) {
  if (!u.allFinite()) throw ModelError("model produced non-finite logits");
}

// Guided logits at `queries`; one or two forward passes.
inline Eigen::MatrixXd guided_logits(const SeqModel& model, ModelInput& in, const std::vector<Query>& queries,
                                     double guidance, SamplerStats* stats) {
  const std::vector<Eigen::Index> frames = frames_of(queries);
  Trace tr;
  in.drop = false;
  model.run(in, frames, tr);
  Eigen::MatrixXd u = model.token_logits(tr, queries);
  std::int64_t passes = 1;
  if (guidance != 0.0) {
    in.drop = true;
    model.run(in, frames, tr);
    in.drop = false;
    u = cfg_logits(u, model.token_logits(tr, queries), guidance);
    ++passes;
  }
  if (stats != nullptr) stats->forward_passes += passes;
  check_logits(u);
  return u;
}

inline void require_regime(const SeqModel& model, Regime r) {
  if (model.config().regime != r) {
    throw ModelError(std::string("expected a ") + regime_name(r) + " model, got " + regime_name(model.config().regime));
  }
}

inline void check_features(const SeqModel& model, const Eigen::MatrixXd& features) {
  if (features.rows() != model.config().n_features) throw ShapeError("sampler: wrong feature dimension");
  if (features.cols() < 1) throw ShapeError("sampler: empty feature sequence");
}

}  // namespace detail

/// Frame by frame, band by band, with a sliding causal window of the model's context length.
template <class Rng>
PsTokens ar_sample(const SeqModel& model, const Eigen::MatrixXd& features, const SampleConfig& cfg, Rng& rng,
                   SamplerStats* stats = nullptr) {
  cfg.validate();
  detail::require_regime(model, Regime::kAr);
  detail::check_features(model, features);
  const ModelConfig& mc = model.config();
  const Eigen::Index n = features.cols();
  PsTokens out{Eigen::MatrixXi::Constant(mc.n_bands, n, mc.mask_token())};
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index s = std::max<Eigen::Index>(0, j - mc.frames + 1);
    const Eigen::Index len = j - s + 1;
    ModelInput in{features.middleCols(s, len), out.q.middleCols(s, len), false};
    for (int b = 0; b < mc.n_bands; ++b) {
      const Eigen::VectorXd u = detail::guided_logits(model, in, {{b, len - 1}}, cfg.ar_guidance, stats).col(0);
      const int tok = cfg.ar_greedy ? detail::argmax(u) : detail::draw_categorical(detail::softmax(u / cfg.ar_temperature), rng);
      out.q(b, j) = tok;
      in.tokens(b, len - 1) = tok;
    }
  }
  return out;
}

/// Observer for MTM progress: patch start frame, step (0 = initial), patch tokens.
using MtmObserver = std::function<void(Eigen::Index, int, const Eigen::MatrixXi&)>;

/// Confidence-ordered iterative unmasking over half-overlapping patches.
template <class Rng>
PsTokens mtm_sample(const SeqModel& model, const Eigen::MatrixXd& features, const SampleConfig& cfg, Rng& rng,
                    SamplerStats* stats = nullptr, const MtmObserver& observe = {}) {
  cfg.validate();
  detail::require_regime(model, Regime::kMtm);
  detail::check_features(model, features);
  const ModelConfig& mc = model.config();
  const Eigen::Index n = features.cols(), F = mc.frames;
  const Eigen::Index hop = std::max<Eigen::Index>(1, F / 2);
  const Eigen::Index prefill = F - hop;
  const int mask = mc.mask_token();
  PsTokens out{Eigen::MatrixXi::Constant(mc.n_bands, n, mask)};
  std::normal_distribution<double> noise(0.0, 1.0);

  for (Eigen::Index p = 0;; p += hop) {
    const Eigen::Index start = p == 0 ? 0 : prefill;  // first generated local frame
    ModelInput in;
    in.features.resize(mc.n_features, F);
    in.tokens = Eigen::MatrixXi::Constant(mc.n_bands, F, mask);
    for (Eigen::Index t = 0; t < F; ++t) {
      in.features.col(t) = features.col(std::min(p + t, n - 1));  // pad by repeating the last frame
      if (t < start) in.tokens.col(t) = out.q.col(p + t);
    }
    std::vector<Query> masked;
    for (Eigen::Index t = start; t < F; ++t)
      for (int b = 0; b < mc.n_bands; ++b) masked.push_back({b, t});
    const auto n_tokens = static_cast<Eigen::Index>(masked.size());
    if (observe) observe(p, 0, in.tokens);

    for (int step = 1; step <= cfg.mtm_steps; ++step) {
      const Eigen::MatrixXd u = detail::guided_logits(model, in, masked, cfg.mtm_guidance, stats);
      struct Cand {
        double conf;
        std::size_t idx;
        int tok;
      };
      std::vector<Cand> cand;
      for (std::size_t k = 0; k < masked.size(); ++k) {
        const Eigen::VectorXd prob = detail::softmax(u.col(static_cast<Eigen::Index>(k)));
        const int tok = detail::draw_categorical(prob, rng);
        double score = u(tok, static_cast<Eigen::Index>(k));
        if (cfg.confidence == Confidence::kProbability) score = prob[tok];
        if (cfg.confidence == Confidence::kMargin) {
          Eigen::VectorXd rest = u.col(static_cast<Eigen::Index>(k));
          rest[tok] = -std::numeric_limits<double>::infinity();
          score = u(tok, static_cast<Eigen::Index>(k)) - rest.maxCoeff();
        }
        const double z = cfg.mtm_noise > 0.0 ? cfg.mtm_noise * noise(rng) : 0.0;
        cand.push_back({score + z, k, tok});
      }
      // highest confidence first; ties by position order
      std::stable_sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.conf > b.conf; });
      const Eigen::Index remain = mtm_schedule_count(step, cfg.mtm_steps, n_tokens);
      const auto fix = static_cast<std::size_t>(std::max<Eigen::Index>(0, static_cast<Eigen::Index>(masked.size()) - remain));
      std::vector<char> fixed(masked.size(), 0);
      for (std::size_t i = 0; i < fix; ++i) {
        const Query& q = masked[cand[i].idx];
        in.tokens(q.band, q.frame) = cand[i].tok;
        fixed[cand[i].idx] = 1;
      }
      std::vector<Query> still;
      for (std::size_t k = 0; k < masked.size(); ++k) {
        if (!fixed[k]) still.push_back(masked[k]);
      }
      masked = std::move(still);
      if (observe) observe(p, step, in.tokens);
    }
    for (Eigen::Index t = start; t < F && p + t < n; ++t) out.q.col(p + t) = in.tokens.col(t);
    if (p + F >= n) break;
  }
  return out;
}

/// Direct regression over consecutive windows of the model's context length.
inline PsParams reg_predict(const SeqModel& model, const Eigen::MatrixXd& features, SamplerStats* stats = nullptr) {
  detail::require_regime(model, Regime::kReg);
  detail::check_features(model, features);
  const ModelConfig& mc = model.config();
  const Eigen::Index n = features.cols(), F = mc.frames;
  Eigen::MatrixXd out(2 * mc.n_bands, n);
  for (Eigen::Index p = 0; p < n; p += F) {
    ModelInput in;
    in.features.resize(mc.n_features, F);
    for (Eigen::Index t = 0; t < F; ++t) in.features.col(t) = features.col(std::min(p + t, n - 1));
    in.tokens = Eigen::MatrixXi::Constant(mc.n_bands, F, mc.mask_token());
    Trace tr;
    model.run(in, detail::all_frames(F), tr);
    if (stats != nullptr) ++stats->forward_passes;
    const Eigen::MatrixXd y = model.regression_output(tr);
    if (!y.allFinite()) throw ModelError("regression model produced non-finite output");
    const Eigen::Index take = std::min(F, n - p);
    out.middleCols(p, take) = y.leftCols(take);
  }
  PsParams res = PsParams::from_joined(out);
  res.iid = res.iid.cwiseMax(-kIidClampDb).cwiseMin(kIidClampDb);
  res.ic = res.ic.cwiseMax(-1.0).cwiseMin(1.0);
  return res;
}

enum class Generator { kNn, kAr, kMtm, kReg, kDecorr };

inline Generator parse_generator(const std::string& s) {
  if (s == "nn") return Generator::kNn;
  if (s == "ar") return Generator::kAr;
  if (s == "mtm") return Generator::kMtm;
  if (s == "reg") return Generator::kReg;
  if (s == "decorr") return Generator::kDecorr;
  throw ConfigError("unknown generator '" + s + "' (expected nn, ar, mtm, reg or decorr)");
}

inline const char* generator_name(Generator g) {
  switch (g) {
    case Generator::kNn: return "nn";
    case Generator::kAr: return "ar";
    case Generator::kMtm: return "mtm";
    case Generator::kReg: return "reg";
    case Generator::kDecorr: return "decorr";
  }
  return "?";
}

/// Everything a generator may need; unused members can stay empty.
struct UpmixAssets {
  const NnIndex* index = nullptr;
  const SeqModel* model = nullptr;
  NnConfig nn;
  SampleConfig sample;
  std::optional<IcProfile> ic_profile;  // defaults from the band map when unset
  QuantGrids grids = QuantGrids::defaults();
  DecorrConfig decorr;
  StftConfig stft;
};

template <class Rng>
PsParams generate_params(const ComplexSpectrogram& mono_spec, Generator gen, const UpmixAssets& assets,
                         const BandMap& bands, Rng& rng, SamplerStats* stats = nullptr) {
  auto need_model = [&]() -> const SeqModel& {
    if (assets.model == nullptr) throw ConfigError(std::string("generator ") + generator_name(gen) + " needs a model checkpoint");
    return *assets.model;
  };
  switch (gen) {
    case Generator::kDecorr:
      return decorr_params(assets.ic_profile.value_or(IcProfile::defaults(bands)), mono_spec.cols());
    case Generator::kNn:
      if (assets.index == nullptr) throw ConfigError("generator nn needs an index");
      return nn_generate(mono_spec, *assets.index, bands, assets.nn);
    case Generator::kAr:
      return dequantize(ar_sample(need_model(), model_features(mono_spec, bands), assets.sample, rng, stats), assets.grids);
    case Generator::kMtm:
      return dequantize(mtm_sample(need_model(), model_features(mono_spec, bands), assets.sample, rng, stats), assets.grids);
    case Generator::kReg:
      return reg_predict(need_model(), model_features(mono_spec, bands), stats);
  }
  throw ConfigError("unknown generator");
}

/// stft, generator, decorrelation and decoding; output length equals input length.
template <class Rng>
AudioBuffer upmix(const AudioBuffer& mono, Generator gen, const UpmixAssets& assets, const BandMap& bands, Rng& rng,
                  SamplerStats* stats = nullptr) {
  if (mono.channels() != 1) throw ChannelCountError("upmix expects a mono buffer");
  if (mono.sample_rate != kPipelineSampleRate) throw SampleRateError("upmix expects 44.1 kHz input");
  const PsParams p = generate_params(stft(mono.channel(0), assets.stft), gen, assets, bands, rng, stats);
  return decode_audio(mono, p, bands, assets.stft, assets.decorr);
}

}  // namespace psup

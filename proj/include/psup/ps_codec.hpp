#pragma once

// Parametric stereo coding: IID/IC extraction, quantization and token fusion,
// all-pass decorrelation and the mixing-matrix decoder.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/errors.hpp"
#include "psup/spectral.hpp"

namespace psup {

inline constexpr int kBands = 34;
inline constexpr int kIidSteps = 31;
inline constexpr int kIcSteps = 8;
inline constexpr int kVocab = kIidSteps * kIcSteps;  // 248
inline constexpr double kPowerFloor = 1e-12;
inline constexpr double kIidClampDb = 60.0;

/// Unquantized PS parameters. The joined view stacks IID rows above IC rows.
struct PsParams {
  Eigen::MatrixXd iid;  // bands x frames, dB
  Eigen::MatrixXd ic;   // bands x frames, [-1, 1]

  PsParams() = default;
  PsParams(Eigen::MatrixXd iid_db, Eigen::MatrixXd coherence)
      : iid(std::move(iid_db)), ic(std::move(coherence)) {
    if (iid.rows() != ic.rows() || iid.cols() != ic.cols()) throw ShapeError("PsParams: IID/IC shapes differ");
  }

  static PsParams constant(int bands, Eigen::Index frames, double iid_db, double coherence) {
    return {Eigen::MatrixXd::Constant(bands, frames, iid_db),
            Eigen::MatrixXd::Constant(bands, frames, coherence)};
  }

  [[nodiscard]] int bands() const { return static_cast<int>(iid.rows()); }
  [[nodiscard]] Eigen::Index frames() const { return iid.cols(); }

  [[nodiscard]] Eigen::MatrixXd joined() const {
    Eigen::MatrixXd p(2 * iid.rows(), iid.cols());
    p << iid, ic;
    return p;
  }
  static PsParams from_joined(const Eigen::MatrixXd& p) {
    if (p.rows() % 2 != 0) throw ShapeError("PsParams: joined matrix needs an even row count");
    const Eigen::Index b = p.rows() / 2;
    return {p.topRows(b), p.bottomRows(b)};
  }
};

/// Fused tokens q = 8 * q_iid + q_ic, one per band and frame.
struct PsTokens {
  Eigen::MatrixXi q;  // bands x frames

  [[nodiscard]] int bands() const { return static_cast<int>(q.rows()); }
  [[nodiscard]] Eigen::Index frames() const { return q.cols(); }
};

constexpr int fuse_token(int q_iid, int q_ic) { return kIcSteps * q_iid + q_ic; }
constexpr int token_iid_index(int q) { return q / kIcSteps; }
constexpr int token_ic_index(int q) { return q % kIcSteps; }

inline std::pair<Eigen::MatrixXi, Eigen::MatrixXi> split_tokens(const PsTokens& t) {
  Eigen::MatrixXi qi = t.q.unaryExpr([](int v) { return token_iid_index(v); });
  Eigen::MatrixXi qc = t.q.unaryExpr([](int v) { return token_ic_index(v); });
  return {std::move(qi), std::move(qc)};
}

inline PsTokens fuse_tokens(const Eigen::MatrixXi& q_iid, const Eigen::MatrixXi& q_ic) {
  if (q_iid.rows() != q_ic.rows() || q_iid.cols() != q_ic.cols()) throw ShapeError("fuse_tokens: shapes differ");
  return {q_iid.binaryExpr(q_ic, [](int a, int b) { return fuse_token(a, b); })};
}

struct QuantGrids {
  std::vector<double> iid_levels;  // ascending, dB
  std::vector<double> ic_levels;   // descending

  static QuantGrids defaults() {
    QuantGrids g;
    const std::array<double, 15> pos = {2, 4, 6, 8, 10, 13, 16, 19, 22, 25, 30, 35, 40, 45, 50};
    for (auto it = pos.rbegin(); it != pos.rend(); ++it) g.iid_levels.push_back(-*it);
    g.iid_levels.push_back(0.0);
    for (double v : pos) g.iid_levels.push_back(v);
    g.ic_levels = {1.0, 0.937, 0.84118, 0.60092, 0.36764, 0.0, -0.589, -1.0};
    return g;
  }

  void validate() const {
    if (iid_levels.size() != kIidSteps || ic_levels.size() != kIcSteps) {
      throw ConfigError("quantizer grids need 31 IID and 8 IC levels");
    }
    for (std::size_t i = 1; i < iid_levels.size(); ++i) {
      if (!(iid_levels[i] > iid_levels[i - 1])) throw ConfigError("IID levels must be strictly increasing");
    }
    for (std::size_t i = 0; i < iid_levels.size(); ++i) {
      if (std::abs(iid_levels[i] + iid_levels[iid_levels.size() - 1 - i]) > 1e-9) {
        throw ConfigError("IID levels must be symmetric about 0 dB");
      }
    }
    for (std::size_t i = 1; i < ic_levels.size(); ++i) {
      if (!(ic_levels[i] < ic_levels[i - 1])) throw ConfigError("IC levels must be strictly decreasing");
    }
    if (ic_levels.front() != 1.0 || ic_levels.back() != -1.0) throw ConfigError("IC levels must span 1 to -1");
  }

  /// Larger of the two gaps adjacent to level `idx`.
  [[nodiscard]] static double local_gap(const std::vector<double>& levels, int idx) {
    double g = 0.0;
    const auto i = static_cast<std::size_t>(idx);
    if (i > 0) g = std::max(g, std::abs(levels[i] - levels[i - 1]));
    if (i + 1 < levels.size()) g = std::max(g, std::abs(levels[i + 1] - levels[i]));
    return g;
  }
};

/// Text form: a `[iid]` section with 31 lines and an `[ic]` section with 8.
inline QuantGrids grids_from_text(const std::string& text) {
  QuantGrids g;
  std::vector<double>* target = nullptr;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const std::string t = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
    if (t == "[iid]") {
      target = &g.iid_levels;
    } else if (t == "[ic]") {
      target = &g.ic_levels;
    } else {
      if (target == nullptr) throw FormatError("grid file: level before section header");
      try {
        target->push_back(std::stod(t));
      } catch (const std::exception&) {
        throw FormatError("grid file: bad level '" + t + "'");
      }
    }
  }
  g.validate();
  return g;
}

inline std::string grids_to_text(const QuantGrids& g) {
  std::ostringstream os;
  os.precision(17);
  os << "[iid]\n";
  for (double v : g.iid_levels) os << v << '\n';
  os << "[ic]\n";
  for (double v : g.ic_levels) os << v << '\n';
  return os.str();
}

inline QuantGrids load_grids(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read grid file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return grids_from_text(ss.str());
}

/// IID and IC of a stereo pair of spectrograms.
inline PsParams encode(const ComplexSpectrogram& left, const ComplexSpectrogram& right,
                       const BandMap& bands) {
  if (left.rows() != right.rows() || left.cols() != right.cols()) throw ShapeError("encode: L and R differ in shape");
  const Eigen::MatrixXd pl = band_power(left, bands);
  const Eigen::MatrixXd pr = band_power(right, bands);
  const Eigen::MatrixXd cross = cross_spectrogram(left, right, bands).real();

  PsParams p(Eigen::MatrixXd(pl.rows(), pl.cols()), Eigen::MatrixXd(pl.rows(), pl.cols()));
  for (Eigen::Index j = 0; j < pl.cols(); ++j) {
    for (Eigen::Index b = 0; b < pl.rows(); ++b) {
      const double l = pl(b, j);
      const double r = pr(b, j);
      if (l < kPowerFloor && r < kPowerFloor) {
        p.iid(b, j) = 0.0;
        p.ic(b, j) = 1.0;
        continue;
      }
      const double iid = 10.0 * std::log10((l + kPowerFloor) / (r + kPowerFloor));
      p.iid(b, j) = std::clamp(iid, -kIidClampDb, kIidClampDb);
      const double ic = cross(b, j) / std::sqrt((l + kPowerFloor) * (r + kPowerFloor));
      p.ic(b, j) = std::clamp(ic, -1.0, 1.0);
    }
  }
  return p;
}

namespace detail {

// Nearest level; equal distances resolve to the lower index.
inline int nearest_level(const std::vector<double>& levels, double v, bool ascending) {
  const auto n = static_cast<int>(levels.size());
  int lo = 0, hi = n - 1;
  // First index whose level is past v in grid order.
  while (lo < hi) {
    const int mid = (lo + hi) / 2;
    const bool past = ascending ? levels[static_cast<std::size_t>(mid)] >= v
                                : levels[static_cast<std::size_t>(mid)] <= v;
    if (past) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  int best = lo;
  if (lo > 0) {
    const double d_lo = std::abs(levels[static_cast<std::size_t>(lo) - 1] - v);
    const double d_hi = std::abs(levels[static_cast<std::size_t>(lo)] - v);
    if (d_lo <= d_hi) best = lo - 1;
  }
  return best;
}

}  // namespace detail

inline int quantize_iid(double iid_db, const QuantGrids& g) { return detail::nearest_level(g.iid_levels, iid_db, true); }
inline int quantize_ic(double ic, const QuantGrids& g) { return detail::nearest_level(g.ic_levels, ic, false); }

inline PsTokens quantize(const PsParams& p, const QuantGrids& grids = QuantGrids::defaults()) {
  grids.validate();
  PsTokens t{Eigen::MatrixXi(p.bands(), p.frames())};
  for (Eigen::Index j = 0; j < p.frames(); ++j) {
    for (int b = 0; b < p.bands(); ++b) {
      t.q(b, j) = fuse_token(quantize_iid(p.iid(b, j), grids), quantize_ic(p.ic(b, j), grids));
    }
  }
  return t;
}

inline PsParams dequantize(const PsTokens& t, const QuantGrids& grids = QuantGrids::defaults()) {
  grids.validate();
  PsParams p(Eigen::MatrixXd(t.bands(), t.frames()), Eigen::MatrixXd(t.bands(), t.frames()));
  for (Eigen::Index j = 0; j < t.frames(); ++j) {
    for (int b = 0; b < t.bands(); ++b) {
      const int q = t.q(b, j);
      if (q < 0 || q >= kVocab) {
        throw TokenRangeError("token " + std::to_string(q) + " at band " + std::to_string(b) + ", frame " +
                              std::to_string(j) + " outside [0, 247]");
      }
      p.iid(b, j) = grids.iid_levels[static_cast<std::size_t>(token_iid_index(q))];
      p.ic(b, j) = grids.ic_levels[static_cast<std::size_t>(token_ic_index(q))];
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Decorrelator

struct AllPassSection {
  int delay;
  double gain;
};

struct DecorrConfig {
  std::vector<AllPassSection> sections = {{331, 0.55}, {149, 0.55}, {61, 0.55}, {23, 0.55}};
  double transient_threshold = 2.5;  // energy ratio against the median of recent frames
  int transient_history = 4;         // frames in that median
  int transient_release = 1;         // extra frames held on the bypass path
  int frame = 1024;                  // detector frame length, samples
  int latency = 256;                 // pre-delay of the cascade; the bypass copy uses the same delay

  void validate() const {
    if (sections.size() != 4) throw ConfigError("decorrelator needs 4 all-pass sections");
    for (const auto& s : sections) {
      if (!(std::abs(s.gain) < 1.0)) throw ConfigError("unstable all-pass section: |gain| >= 1");
      if (s.delay <= 0) throw ConfigError("all-pass delay must be positive");
    }
    if (frame <= 0 || transient_history < 1 || transient_release < 0 || latency < 0) {
      throw ConfigError("invalid transient detector settings");
    }
  }
};

/// Cascade of Schroeder all-pass sections, y[n] = -g x[n] + x[n-D] + g y[n-D].
inline Eigen::VectorXd allpass_cascade(const Eigen::VectorXd& x, const std::vector<AllPassSection>& sections) {
  Eigen::VectorXd cur = x;
  Eigen::VectorXd next(x.size());
  for (const auto& s : sections) {
    const Eigen::Index d = s.delay;
    const double g = s.gain;
    for (Eigen::Index n = 0; n < x.size(); ++n) {
      const double xd = n >= d ? cur[n - d] : 0.0;
      const double yd = n >= d ? next[n - d] : 0.0;
      next[n] = -g * cur[n] + xd + g * yd;
    }
    cur.swap(next);
  }
  return cur;
}

/// Per detector frame: broadband energy exceeds threshold x median of the
/// preceding `transient_history` frames (fewer at the start; frame 0 never).
inline std::vector<bool> detect_transients(const Eigen::VectorXd& x, const DecorrConfig& cfg) {
  const Eigen::Index n_frames = (x.size() + cfg.frame - 1) / cfg.frame;
  std::vector<double> energy(static_cast<std::size_t>(n_frames));
  for (Eigen::Index k = 0; k < n_frames; ++k) {
    const Eigen::Index start = k * cfg.frame;
    const Eigen::Index len = std::min<Eigen::Index>(cfg.frame, x.size() - start);
    energy[static_cast<std::size_t>(k)] = x.segment(start, len).squaredNorm() * cfg.frame / len;
  }
  std::vector<bool> flags(static_cast<std::size_t>(n_frames), false);
  std::vector<double> window;
  for (Eigen::Index k = 1; k < n_frames; ++k) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, k - cfg.transient_history);
    window.assign(energy.begin() + lo, energy.begin() + k);
    std::sort(window.begin(), window.end());
    const std::size_t m = window.size();
    const double median = m % 2 ? window[m / 2] : 0.5 * (window[m / 2 - 1] + window[m / 2]);
    const double e = energy[static_cast<std::size_t>(k)];
    flags[static_cast<std::size_t>(k)] = e > cfg.transient_threshold * median && e > kPowerFloor;
  }
  return flags;
}

/// Per-sample weight of the bypass path: 1 on transient frames and their
/// release frames, linear one-frame ramps into and out of them.
inline Eigen::VectorXd bypass_weights(const std::vector<bool>& transient, Eigen::Index length,
                                      const DecorrConfig& cfg) {
  const auto n_frames = static_cast<Eigen::Index>(transient.size());
  std::vector<bool> held(transient.size(), false);
  for (Eigen::Index k = 0; k < n_frames; ++k) {
    if (!transient[static_cast<std::size_t>(k)]) continue;
    for (Eigen::Index r = k; r <= std::min(n_frames - 1, k + cfg.transient_release); ++r) {
      held[static_cast<std::size_t>(r)] = true;
    }
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(length);
  for (Eigen::Index k = 0; k < n_frames; ++k) {
    const Eigen::Index start = k * cfg.frame;
    const Eigen::Index len = std::min<Eigen::Index>(cfg.frame, length - start);
    const bool here = held[static_cast<std::size_t>(k)];
    const bool next = k + 1 < n_frames && held[static_cast<std::size_t>(k) + 1];
    const bool prev = k > 0 && held[static_cast<std::size_t>(k) - 1];
    for (Eigen::Index i = 0; i < len; ++i) {
      double v = 0.0;
      if (here) {
        v = 1.0;
      } else {
        const double ramp = static_cast<double>(i + 1) / (cfg.frame + 1);
        if (next) v = std::max(v, ramp);
        if (prev) v = std::max(v, 1.0 - ramp);
      }
      w[start + i] = v;
    }
  }
  return w;
}

inline Eigen::VectorXd decorrelate(const Eigen::VectorXd& x, const DecorrConfig& cfg = {}) {
  cfg.validate();
  Eigen::VectorXd delayed = Eigen::VectorXd::Zero(x.size());
  const Eigen::Index d = std::min<Eigen::Index>(cfg.latency, x.size());
  delayed.tail(x.size() - d) = x.head(x.size() - d);
  const Eigen::VectorXd wet = allpass_cascade(delayed, cfg.sections);
  const Eigen::VectorXd w = bypass_weights(detect_transients(x, cfg), x.size(), cfg);
  Eigen::VectorXd out(x.size());
  for (Eigen::Index n = 0; n < x.size(); ++n) out[n] = (1.0 - w[n]) * wet[n] + w[n] * delayed[n];
  return out;
}

inline AudioBuffer decorrelate(const AudioBuffer& mono, const DecorrConfig& cfg = {}) {
  if (mono.channels() != 1) throw ChannelCountError("decorrelate expects a mono buffer");
  return AudioBuffer::mono(decorrelate(mono.channel(0), cfg), mono.sample_rate);
}

// ---------------------------------------------------------------------------
// Decoder

struct MixingMatrices {
  Eigen::MatrixXd a, b, c, d;  // bands x frames
};

/// L = Ma S + Mb S_D, R = Mc S + Md S_D with
/// c_l = sqrt(2c^2/(1+c^2)), c_r = sqrt(2/(1+c^2)), alpha = acos(ic)/2,
/// beta = alpha (c_r - c_l)/(c_l + c_r), c = 10^(iid/20).
inline MixingMatrices mixing_matrices(const PsParams& p) {
  MixingMatrices m{Eigen::MatrixXd(p.bands(), p.frames()), Eigen::MatrixXd(p.bands(), p.frames()),
                   Eigen::MatrixXd(p.bands(), p.frames()), Eigen::MatrixXd(p.bands(), p.frames())};
  for (Eigen::Index j = 0; j < p.frames(); ++j) {
    for (int b = 0; b < p.bands(); ++b) {
      const double c2 = std::pow(10.0, std::clamp(p.iid(b, j), -kIidClampDb, kIidClampDb) / 10.0);
      const double cl = std::sqrt(2.0 * c2 / (1.0 + c2));
      const double cr = std::sqrt(2.0 / (1.0 + c2));
      const double alpha = 0.5 * std::acos(std::clamp(p.ic(b, j), -1.0, 1.0));
      const double beta = alpha * (cr - cl) / (cl + cr);
      m.a(b, j) = cl * std::cos(beta + alpha);
      m.b(b, j) = cl * std::sin(beta + alpha);
      m.c(b, j) = cr * std::cos(beta - alpha);
      m.d(b, j) = cr * std::sin(beta - alpha);
    }
  }
  return m;
}

struct StereoSpectrogram {
  ComplexSpectrogram left;
  ComplexSpectrogram right;
};

inline StereoSpectrogram decode(const ComplexSpectrogram& s, const ComplexSpectrogram& s_decorr,
                                const PsParams& p, const BandMap& bands) {
  if (s.rows() != s_decorr.rows() || s.cols() != s_decorr.cols()) throw ShapeError("decode: S and S_D differ in shape");
  if (p.frames() != s.cols()) {
    throw ShapeError("decode: " + std::to_string(p.frames()) + " parameter frames for " +
                     std::to_string(s.cols()) + " spectrogram frames");
  }
  if (p.bands() != bands.n_bands() || s.rows() != bands.n_bins()) throw ShapeError("decode: band map mismatch");
  const MixingMatrices m = mixing_matrices(p);
  const Eigen::MatrixXd ma = bands.expand(m.a), mb = bands.expand(m.b);
  const Eigen::MatrixXd mc = bands.expand(m.c), md = bands.expand(m.d);
  StereoSpectrogram out;
  out.left = ma.cast<std::complex<double>>().cwiseProduct(s) + mb.cast<std::complex<double>>().cwiseProduct(s_decorr);
  out.right = mc.cast<std::complex<double>>().cwiseProduct(s) + md.cast<std::complex<double>>().cwiseProduct(s_decorr);
  return out;
}

/// Time-domain decode: STFT of the mono signal and of its decorrelated copy,
/// spectral mixing, ISTFT of both channels. Output length = input length.
inline AudioBuffer decode_audio(const AudioBuffer& mono, const PsParams& p, const BandMap& bands,
                                const StftConfig& stft_cfg = {}, const DecorrConfig& decorr_cfg = {}) {
  if (mono.channels() != 1) throw ChannelCountError("decode_audio expects a mono buffer");
  const Eigen::VectorXd x = mono.channel(0);
  const ComplexSpectrogram s = stft(x, stft_cfg);
  const ComplexSpectrogram sd = stft(decorrelate(x, decorr_cfg), stft_cfg);
  const StereoSpectrogram lr = decode(s, sd, p, bands);
  return AudioBuffer::stereo(istft(lr.left, stft_cfg, x.size()), istft(lr.right, stft_cfg, x.size()),
                             mono.sample_rate);
}

/// PS parameters of a stereo buffer.
inline PsParams encode_audio(const AudioBuffer& stereo, const BandMap& bands, const StftConfig& stft_cfg = {}) {
  if (stereo.channels() != 2) throw ChannelCountError("encode_audio expects a stereo buffer");
  return encode(stft(stereo.channel(0), stft_cfg), stft(stereo.channel(1), stft_cfg), bands);
}

// ---------------------------------------------------------------------------
// PSP1 parameter files: "PSP1", u32 n_bands, u32 n_frames, u8 kind, then
// row-major float32 (2*bands x frames) for kind 0 or u16 (bands x frames) for kind 1.

enum class PspKind : std::uint8_t { kParams = 0, kTokens = 1 };

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));  // little-endian host assumed
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError("unexpected end of file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  char m[4];
  if (!is.read(m, 4) || std::memcmp(m, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace detail

inline void write_psp(std::ostream& os, const PsParams& p) {
  os.write("PSP1", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.bands()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.frames()));
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(PspKind::kParams));
  const Eigen::MatrixXd joined = p.joined();
  for (Eigen::Index r = 0; r < joined.rows(); ++r) {
    for (Eigen::Index c = 0; c < joined.cols(); ++c) detail::write_le<float>(os, static_cast<float>(joined(r, c)));
  }
}

inline void write_psp(std::ostream& os, const PsTokens& t) {
  os.write("PSP1", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.bands()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.frames()));
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(PspKind::kTokens));
  for (Eigen::Index r = 0; r < t.q.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.q.cols(); ++c) detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.q(r, c)));
  }
}

using PspContent = std::variant<PsParams, PsTokens>;

inline PspContent read_psp(std::istream& is) {
  detail::expect_magic(is, "PSP1");
  const auto bands = detail::read_le<std::uint32_t>(is);
  const auto frames = detail::read_le<std::uint32_t>(is);
  const auto kind = detail::read_le<std::uint8_t>(is);
  if (bands == 0 || bands > 4096) throw FormatError("PSP1: implausible band count");
  if (kind == static_cast<std::uint8_t>(PspKind::kParams)) {
    Eigen::MatrixXd joined(2 * bands, frames);
    for (Eigen::Index r = 0; r < joined.rows(); ++r) {
      for (Eigen::Index c = 0; c < joined.cols(); ++c) joined(r, c) = detail::read_le<float>(is);
    }
    return PsParams::from_joined(joined);
  }
  if (kind == static_cast<std::uint8_t>(PspKind::kTokens)) {
    PsTokens t{Eigen::MatrixXi(bands, frames)};
    for (Eigen::Index r = 0; r < t.q.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.q.cols(); ++c) {
        const auto v = detail::read_le<std::uint16_t>(is);
        if (v >= kVocab) throw TokenRangeError("PSP1: token " + std::to_string(v) + " outside [0, 247]");
        t.q(r, c) = v;
      }
    }
    return t;
  }
  throw FormatError("PSP1: unknown kind " + std::to_string(kind));
}

template <class T>
void save_psp(const std::string& path, const T& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_psp(os, content);
}

inline PspContent load_psp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path);
  return read_psp(is);
}

/// Parameters from either kind of PSP1 content (tokens are dequantized).
inline PsParams params_of(const PspContent& c, const QuantGrids& grids = QuantGrids::defaults()) {
  if (const auto* p = std::get_if<PsParams>(&c)) return *p;
  return dequantize(std::get<PsTokens>(c), grids);
}

}  // namespace psup

#pragma once

// STFT/ISTFT on a Hann window with 75% overlap, the ERB-spaced band map and
// the banded cross-spectrogram rho(X, Y) = B (X .* conj(Y)).

#include <Eigen/Dense>
#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/errors.hpp"

namespace psup {

using ComplexSpectrogram = Eigen::MatrixXcd;  // bins x frames

struct StftConfig {
  int frame_size = 4096;
  int hop = 1024;

  [[nodiscard]] int bins() const { return frame_size / 2 + 1; }
  /// Zeros prepended to the signal so that every input sample is covered by
  /// frame_size / hop frames. Frame j then ends at input sample (j + 1) * hop.
  [[nodiscard]] int lead() const { return frame_size - hop; }

  void validate() const {
    if (frame_size < 4 || frame_size % 4 != 0 || hop * 4 != frame_size) {
      throw ConfigError("StftConfig: hop must equal frame_size / 4");
    }
  }
};

/// Periodic Hann window; constant-overlap-add at hop = N/4.
inline Eigen::VectorXd hann_window(int n) {
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

/// Number of frames stft() produces for a signal of `length` samples.
inline Eigen::Index stft_frame_count(Eigen::Index length, const StftConfig& cfg) {
  return (length + cfg.hop - 1) / cfg.hop + cfg.frame_size / cfg.hop - 1;
}

namespace detail {

// FFTW's planner is not thread-safe; execution on plan-compatible buffers is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffers {
  int n;
  double* real;
  fftw_complex* spec;
  fftw_plan forward;
  fftw_plan inverse;

  explicit FftwBuffers(int size) : n(size) {
    real = fftw_alloc_real(static_cast<std::size_t>(n));
    spec = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    forward = fftw_plan_dft_r2c_1d(n, real, spec, FFTW_ESTIMATE);
    inverse = fftw_plan_dft_c2r_1d(n, spec, real, FFTW_ESTIMATE | FFTW_DESTROY_INPUT);
  }
  ~FftwBuffers() {
    {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      fftw_destroy_plan(forward);
      fftw_destroy_plan(inverse);
    }
    fftw_free(real);
    fftw_free(spec);
  }
  FftwBuffers(const FftwBuffers&) = delete;
  FftwBuffers& operator=(const FftwBuffers&) = delete;
};

}  // namespace detail

inline ComplexSpectrogram stft(const Eigen::VectorXd& x, const StftConfig& cfg = {}) {
  cfg.validate();
  if (x.size() < cfg.frame_size) {
    throw LengthError("stft: signal of " + std::to_string(x.size()) +
                      " samples is shorter than one frame (" + std::to_string(cfg.frame_size) + ")");
  }
  const int n = cfg.frame_size;
  const Eigen::Index frames = stft_frame_count(x.size(), cfg);
  const Eigen::VectorXd w = hann_window(n);
  detail::FftwBuffers fft(n);
  ComplexSpectrogram out(cfg.bins(), frames);
  for (Eigen::Index j = 0; j < frames; ++j) {
    const Eigen::Index start = j * cfg.hop - cfg.lead();
    for (int i = 0; i < n; ++i) {
      const Eigen::Index t = start + i;
      fft.real[i] = (t >= 0 && t < x.size()) ? w[i] * x[t] : 0.0;
    }
    fftw_execute(fft.forward);
    for (int k = 0; k < cfg.bins(); ++k) out(k, j) = {fft.spec[k][0], fft.spec[k][1]};
  }
  return out;
}

inline ComplexSpectrogram stft(const AudioBuffer& mono, const StftConfig& cfg = {}) {
  if (mono.channels() != 1) throw ChannelCountError("stft expects a mono buffer");
  return stft(mono.channel(0), cfg);
}

/// Weighted overlap-add inverse. `length` is the original signal length;
/// by default the longest length consistent with the frame count.
inline Eigen::VectorXd istft(const ComplexSpectrogram& spec, const StftConfig& cfg = {},
                             Eigen::Index length = -1) {
  cfg.validate();
  if (spec.rows() != cfg.bins() || spec.cols() < 1) {
    throw ShapeError("istft: expected " + std::to_string(cfg.bins()) + " bins, got " +
                     std::to_string(spec.rows()) + "x" + std::to_string(spec.cols()));
  }
  const int n = cfg.frame_size;
  const Eigen::Index frames = spec.cols();
  const Eigen::Index max_length = (frames - (n / cfg.hop - 1)) * cfg.hop;
  if (length < 0) length = max_length;
  if (length > max_length || length < 1) throw ShapeError("istft: length inconsistent with frames");

  const Eigen::VectorXd w = hann_window(n);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(length);
  Eigen::VectorXd norm = Eigen::VectorXd::Zero(length);
  detail::FftwBuffers fft(n);
  for (Eigen::Index j = 0; j < frames; ++j) {
    for (int k = 0; k < cfg.bins(); ++k) {
      fft.spec[k][0] = spec(k, j).real();
      fft.spec[k][1] = spec(k, j).imag();
    }
    // c2r ignores the imaginary parts of DC and Nyquist.
    fftw_execute(fft.inverse);
    const Eigen::Index start = j * cfg.hop - cfg.lead();
    for (int i = 0; i < n; ++i) {
      const Eigen::Index t = start + i;
      if (t < 0 || t >= length) continue;
      acc[t] += w[i] * fft.real[i] / n;
      norm[t] += w[i] * w[i];
    }
  }
  for (Eigen::Index t = 0; t < length; ++t) acc[t] = norm[t] > 1e-12 ? acc[t] / norm[t] : 0.0;
  return acc;
}

/// Partition of FFT bins into contiguous bands.
class BandMap {
 public:
  BandMap() = default;
  BandMap(int n_bins, std::vector<int> first_bins) : n_bins_(n_bins), first_(std::move(first_bins)) {
    if (first_.empty() || first_.front() != 0) throw ConfigError("band map must start at bin 0");
    for (std::size_t b = 1; b < first_.size(); ++b) {
      if (first_[b] <= first_[b - 1]) throw ConfigError("band edges must be strictly increasing");
    }
    if (first_.back() >= n_bins_) throw ConfigError("last band is empty");
    band_of_bin_.resize(static_cast<std::size_t>(n_bins_));
    for (int b = 0; b < n_bands(); ++b) {
      for (int i = first_bin(b); i <= last_bin(b); ++i) band_of_bin_[static_cast<std::size_t>(i)] = b;
    }
  }

  [[nodiscard]] int n_bands() const { return static_cast<int>(first_.size()); }
  [[nodiscard]] int n_bins() const { return n_bins_; }
  [[nodiscard]] int first_bin(int b) const { return first_[static_cast<std::size_t>(b)]; }
  [[nodiscard]] int last_bin(int b) const {
    return b + 1 < n_bands() ? first_[static_cast<std::size_t>(b) + 1] - 1 : n_bins_ - 1;
  }
  [[nodiscard]] int width(int b) const { return last_bin(b) - first_bin(b) + 1; }
  [[nodiscard]] int band_of(int bin) const { return band_of_bin_[static_cast<std::size_t>(bin)]; }
  [[nodiscard]] const std::vector<int>& first_bins() const { return first_; }

  /// Dense 0/1 summation matrix, n_bands x n_bins.
  [[nodiscard]] Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n_bands(), n_bins_);
    for (int i = 0; i < n_bins_; ++i) m(band_of(i), i) = 1.0;
    return m;
  }

  /// Sums rows of a bins x frames matrix into bands x frames.
  template <class Derived>
  [[nodiscard]] Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> sum_bins(
      const Eigen::MatrixBase<Derived>& per_bin) const {
    if (per_bin.rows() != n_bins_) throw ShapeError("band map: bin count mismatch");
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(n_bands(),
                                                                                 per_bin.cols());
    for (int b = 0; b < n_bands(); ++b) {
      out.row(b) = per_bin.middleRows(first_bin(b), width(b)).colwise().sum();
    }
    return out;
  }

  /// Broadcasts a bands x frames matrix to bins x frames (hard band edges).
  template <class Derived>
  [[nodiscard]] Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> expand(
      const Eigen::MatrixBase<Derived>& per_band) const {
    if (per_band.rows() != n_bands()) throw ShapeError("band map: band count mismatch");
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(n_bins_,
                                                                                 per_band.cols());
    for (int b = 0; b < n_bands(); ++b) {
      out.middleRows(first_bin(b), width(b)).rowwise() = per_band.row(b);
    }
    return out;
  }

 private:
  int n_bins_ = 0;
  std::vector<int> first_;
  std::vector<int> band_of_bin_;
};

/// ERB-number (Glasberg & Moore): 21.4 log10(4.37 f_kHz + 1).
inline double erb_number(double hz) { return 21.4 * std::log10(4.37 * hz / 1000.0 + 1.0); }

/// Bands uniform on the ERB-number scale between 0 Hz and Nyquist. Every band
/// receives at least one bin, and bin-rounding is evened out so that band
/// widths never decrease with frequency.
inline BandMap make_band_map(int bins = 2049, int n_bands = 34, int sample_rate = kPipelineSampleRate) {
  if (n_bands < 1 || n_bands > bins) {
    throw ConfigError("make_band_map: need 1 <= n_bands <= bins, got " + std::to_string(n_bands) +
                      " bands for " + std::to_string(bins) + " bins");
  }
  const double nyquist = sample_rate / 2.0;
  const double bin_hz = nyquist / (bins - 1);
  const double step = erb_number(nyquist) / n_bands;

  std::vector<int> first(static_cast<std::size_t>(n_bands), 0);
  int bin = 0;
  for (int b = 1; b < n_bands; ++b) {
    while (bin < bins && erb_number(bin * bin_hz) < b * step) ++bin;
    first[static_cast<std::size_t>(b)] = bin;
  }
  // merge-up: empty low bands borrow the next bin, capped so every higher band keeps one
  for (int b = 1; b < n_bands; ++b) {
    auto& f = first[static_cast<std::size_t>(b)];
    f = std::max(f, first[static_cast<std::size_t>(b) - 1] + 1);
    f = std::min(f, bins - (n_bands - b));
  }

  auto width = [&](int b) {
    const int next = b + 1 < n_bands ? first[static_cast<std::size_t>(b) + 1] : bins;
    return next - first[static_cast<std::size_t>(b)];
  };
  // Move single bins upward across any edge where the lower band is wider.
  bool changed = true;
  while (changed) {
    changed = false;
    for (int b = 0; b + 1 < n_bands; ++b) {
      if (width(b) > width(b + 1)) {
        --first[static_cast<std::size_t>(b) + 1];
        changed = true;
      }
    }
  }
  return {bins, std::move(first)};
}

/// Text form: one line per band, `band_index first_bin last_bin`.
inline std::string band_map_to_text(const BandMap& map) {
  std::ostringstream os;
  for (int b = 0; b < map.n_bands(); ++b) {
    os << b << ' ' << map.first_bin(b) << ' ' << map.last_bin(b) << '\n';
  }
  return os.str();
}

inline BandMap band_map_from_text(const std::string& text, int bins = 2049) {
  std::istringstream is(text);
  std::vector<int> first;
  std::string line;
  int expect_next = 0;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    int idx = 0, lo = 0, hi = 0;
    if (!(ls >> idx >> lo >> hi)) throw FormatError("band map: malformed line '" + line + "'");
    if (idx != static_cast<int>(first.size()) || lo != expect_next || hi < lo) {
      throw ConfigError("band map: bands must be listed in order and be contiguous");
    }
    first.push_back(lo);
    expect_next = hi + 1;
  }
  if (expect_next != bins) throw ConfigError("band map does not cover all " + std::to_string(bins) + " bins");
  return {bins, std::move(first)};
}

inline void save_band_map(const std::string& path, const BandMap& map) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write band map: " + path);
  os << band_map_to_text(map);
}

inline BandMap load_band_map(const std::string& path, int bins = 2049) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read band map: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return band_map_from_text(ss.str(), bins);
}

/// rho(X, Y)_{b,j} = sum over bins i in band b of X_ij conj(Y_ij).
inline Eigen::MatrixXcd cross_spectrogram(const ComplexSpectrogram& x, const ComplexSpectrogram& y,
                                          const BandMap& bands) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ShapeError("cross_spectrogram: X and Y differ in shape");
  if (x.rows() != bands.n_bins()) throw ShapeError("cross_spectrogram: band map has wrong bin count");
  return bands.sum_bins(x.cwiseProduct(y.conjugate()));
}

/// rho(X, X) as a real matrix.
inline Eigen::MatrixXd band_power(const ComplexSpectrogram& x, const BandMap& bands) {
  if (x.rows() != bands.n_bins()) throw ShapeError("band_power: band map has wrong bin count");
  return bands.sum_bins(x.cwiseAbs2());
}

}  // namespace psup

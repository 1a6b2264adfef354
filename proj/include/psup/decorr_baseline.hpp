#pragma once

// Classical width-only upmix: the decorrelated copy is mixed in per band to
// reach a target inter-channel coherence, with no panning.

#include <Eigen/Dense>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/errors.hpp"
#include "psup/ps_codec.hpp"
#include "psup/spectral.hpp"

namespace psup {

struct IcProfile {
  std::vector<double> target_ic;  // one per band

  void validate(int n_bands = kBands) const {
    if (static_cast<int>(target_ic.size()) != n_bands) {
      throw ConfigError("IC profile needs " + std::to_string(n_bands) + " values, got " +
                        std::to_string(target_ic.size()));
    }
    for (double v : target_ic) {
      if (!(v >= -1.0 && v <= 1.0)) throw ConfigError("IC profile values must lie in [-1, 1]");
    }
  }

  static IcProfile constant(double ic, int n_bands = kBands) {
    return {std::vector<double>(static_cast<std::size_t>(n_bands), ic)};
  }

  /// IC 1 for bands entirely below `mono_below_hz`, then linear in band index
  /// down to `top_ic` at the highest band.
  static IcProfile defaults(const BandMap& bands, int sample_rate = kPipelineSampleRate,
                            double mono_below_hz = 200.0, double top_ic = 0.4) {
    const int n = bands.n_bands();
    const double bin_hz = sample_rate / 2.0 / (bands.n_bins() - 1);
    int first_wide = 0;
    while (first_wide < n && bands.last_bin(first_wide) * bin_hz < mono_below_hz) ++first_wide;
    IcProfile p = constant(1.0, n);
    const int anchor = first_wide - 1;  // last band held at IC 1
    for (int b = std::max(first_wide, 0); b < n; ++b) {
      const double t = static_cast<double>(b - anchor) / (n - 1 - anchor);
      p.target_ic[static_cast<std::size_t>(b)] = 1.0 - (1.0 - top_ic) * t;
    }
    return p;
  }
};

inline IcProfile ic_profile_from_text(const std::string& text, int n_bands = kBands) {
  IcProfile p;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    try {
      p.target_ic.push_back(std::stod(line.substr(b)));
    } catch (const std::exception&) {
      throw FormatError("IC profile: bad value '" + line + "'");
    }
  }
  p.validate(n_bands);
  return p;
}

inline IcProfile load_ic_profile(const std::string& path, int n_bands = kBands) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read IC profile: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ic_profile_from_text(ss.str(), n_bands);
}

inline void save_ic_profile(const std::string& path, const IcProfile& p) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write IC profile: " + path);
  os.precision(17);
  for (double v : p.target_ic) os << v << '\n';
}

/// Time-invariant parameters the baseline decodes with: IID 0 dB, IC = profile.
inline PsParams decorr_params(const IcProfile& profile, Eigen::Index frames) {
  profile.validate(static_cast<int>(profile.target_ic.size()));
  const auto n = static_cast<Eigen::Index>(profile.target_ic.size());
  const Eigen::Map<const Eigen::VectorXd> ic(profile.target_ic.data(), n);
  return {Eigen::MatrixXd::Zero(n, frames), ic.replicate(1, frames)};
}

inline AudioBuffer decorr_upmix(const AudioBuffer& mono, const IcProfile& profile, const BandMap& bands,
                                const StftConfig& stft_cfg = {}, const DecorrConfig& decorr_cfg = {}) {
  if (mono.channels() != 1) throw ChannelCountError("decorr_upmix expects a mono buffer");
  profile.validate(bands.n_bands());
  const PsParams p = decorr_params(profile, stft_frame_count(mono.length(), stft_cfg));
  return decode_audio(mono, p, bands, stft_cfg, decorr_cfg);
}

}  // namespace psup

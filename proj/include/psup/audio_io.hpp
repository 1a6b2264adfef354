#pragma once

// WAV file I/O, stereo downmixing and training patch extraction.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "psup/errors.hpp"

namespace psup {

inline constexpr int kPipelineSampleRate = 44100;

/// Multichannel audio: one row per channel, values nominally in [-1, 1].
struct AudioBuffer {
  Eigen::MatrixXd samples;
  int sample_rate = kPipelineSampleRate;

  AudioBuffer() = default;
  AudioBuffer(Eigen::MatrixXd s, int rate) : samples(std::move(s)), sample_rate(rate) {}

  static AudioBuffer mono(const Eigen::VectorXd& x, int rate = kPipelineSampleRate) {
    return AudioBuffer(x.transpose(), rate);
  }
  static AudioBuffer stereo(const Eigen::VectorXd& l, const Eigen::VectorXd& r,
                            int rate = kPipelineSampleRate) {
    if (l.size() != r.size()) throw ShapeError("stereo: channel lengths differ");
    Eigen::MatrixXd s(2, l.size());
    s.row(0) = l.transpose();
    s.row(1) = r.transpose();
    return AudioBuffer(std::move(s), rate);
  }

  [[nodiscard]] int channels() const { return static_cast<int>(samples.rows()); }
  [[nodiscard]] Eigen::Index length() const { return samples.cols(); }
  [[nodiscard]] Eigen::VectorXd channel(int c) const { return samples.row(c).transpose(); }
  [[nodiscard]] double seconds() const {
    return static_cast<double>(length()) / static_cast<double>(sample_rate);
  }
};

enum class WavEncoding { kPcm16, kPcm24, kFloat32 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

/// Reads a RIFF/WAVE file holding PCM16, PCM24 or IEEE float32 samples.
/// `expected_rate` of 0 accepts any sample rate.
inline AudioBuffer load_wav(const std::string& path, int expected_rate = kPipelineSampleRate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("not a RIFF/WAVE file: " + path);
  }

  std::uint16_t format = 0;
  std::uint16_t n_channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw FormatError("truncated fmt chunk");
      format = detail::read_u16(chunk + 8);
      n_channels = detail::read_u16(chunk + 10);
      rate = detail::read_u32(chunk + 12);
      bits = detail::read_u16(chunk + 22);
      if (format == 0xFFFE) {  // WAVE_FORMAT_EXTENSIBLE: sub-format GUID starts with the tag
        if (avail < 26) throw FormatError("truncated extensible fmt chunk");
        format = detail::read_u16(chunk + 8 + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = avail;
    }
    pos = body + size + (size & 1u);
  }
  if (n_channels == 0 || data == nullptr) throw FormatError("missing fmt or data chunk");

  WavEncoding enc;
  if (format == 1 && bits == 16) {
    enc = WavEncoding::kPcm16;
  } else if (format == 1 && bits == 24) {
    enc = WavEncoding::kPcm24;
  } else if (format == 3 && bits == 32) {
    enc = WavEncoding::kFloat32;
  } else {
    throw FormatError("unsupported sample format: tag " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits");
  }
  if (n_channels > 2) {
    throw ChannelCountError("unsupported channel count: " + std::to_string(n_channels));
  }
  if (expected_rate != 0 && static_cast<int>(rate) != expected_rate) {
    throw SampleRateError("sample rate " + std::to_string(rate) + " Hz, expected " +
                          std::to_string(expected_rate) + " Hz");
  }

  const std::size_t width = bits / 8;
  const std::size_t n_frames = data_size / (width * n_channels);
  if (n_frames == 0) throw LengthError("WAV file has no samples");

  Eigen::MatrixXd s(n_channels, static_cast<Eigen::Index>(n_frames));
  const unsigned char* p = data;
  for (std::size_t i = 0; i < n_frames; ++i) {
    for (std::uint16_t c = 0; c < n_channels; ++c, p += width) {
      double v = 0.0;
      switch (enc) {
        case WavEncoding::kPcm16:
          v = static_cast<std::int16_t>(detail::read_u16(p)) / 32768.0;
          break;
        case WavEncoding::kPcm24: {
          std::int32_t raw = p[0] | (p[1] << 8) | (p[2] << 16);
          if (raw & 0x800000) raw -= 0x1000000;
          v = raw / 8388608.0;
          break;
        }
        case WavEncoding::kFloat32: {
          float f;
          std::uint32_t u = detail::read_u32(p);
          std::memcpy(&f, &u, 4);
          v = f;
          break;
        }
      }
      s(c, static_cast<Eigen::Index>(i)) = v;
    }
  }
  return {std::move(s), static_cast<int>(rate)};
}

/// Writes a WAV file. PCM encodings clip to [-1, 1); float32 does not clip.
inline void save_wav(const std::string& path, const AudioBuffer& audio,
                     WavEncoding enc = WavEncoding::kFloat32) {
  if (audio.channels() < 1 || audio.channels() > 2) {
    throw ChannelCountError("save_wav: channel count must be 1 or 2");
  }
  const std::uint16_t bits = enc == WavEncoding::kPcm16 ? 16 : enc == WavEncoding::kPcm24 ? 24 : 32;
  const std::uint16_t tag = enc == WavEncoding::kFloat32 ? 3 : 1;
  const auto n_ch = static_cast<std::uint16_t>(audio.channels());
  const auto block = static_cast<std::uint16_t>(n_ch * bits / 8);
  const auto data_size = static_cast<std::uint32_t>(block * audio.length());

  std::vector<unsigned char> out;
  out.reserve(44 + data_size);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::put_u32(out, 36 + data_size);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_u32(out, 16);
  detail::put_u16(out, tag);
  detail::put_u16(out, n_ch);
  detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(audio.sample_rate) * block);
  detail::put_u16(out, block);
  detail::put_u16(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::put_u32(out, data_size);

  for (Eigen::Index i = 0; i < audio.length(); ++i) {
    for (int c = 0; c < n_ch; ++c) {
      const double v = audio.samples(c, i);
      switch (enc) {
        case WavEncoding::kPcm16: {
          const double q = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
          detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
          break;
        }
        case WavEncoding::kPcm24: {
          const double q = std::clamp(std::round(v * 8388608.0), -8388608.0, 8388607.0);
          const auto u = static_cast<std::uint32_t>(static_cast<std::int32_t>(q));
          out.push_back(static_cast<unsigned char>(u & 0xff));
          out.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
          out.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
          break;
        }
        case WavEncoding::kFloat32: {
          const auto f = static_cast<float>(v);
          std::uint32_t u;
          std::memcpy(&u, &f, 4);
          detail::put_u32(out, u);
          break;
        }
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write WAV file: " + path);
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

/// S = (L + R) / 2.
inline AudioBuffer downmix(const AudioBuffer& stereo) {
  if (stereo.channels() != 2) {
    throw ChannelCountError("downmix expects 2 channels, got " + std::to_string(stereo.channels()));
  }
  Eigen::MatrixXd m = 0.5 * (stereo.samples.row(0) + stereo.samples.row(1));
  return {std::move(m), stereo.sample_rate};
}

inline AudioBuffer swap_channels(const AudioBuffer& stereo) {
  if (stereo.channels() != 2) throw ChannelCountError("swap_channels expects 2 channels");
  AudioBuffer out = stereo;
  out.samples.row(0) = stereo.samples.row(1);
  out.samples.row(1) = stereo.samples.row(0);
  return out;
}

struct PatchSpec {
  double chunk_seconds = 10.0;
  double patch_seconds = 6.0;
  double gain_min_db = -6.0;
  double gain_max_db = 0.0;
  double swap_prob = 0.5;

  void validate() const {
    if (patch_seconds <= 0.0 || patch_seconds > chunk_seconds) {
      throw ConfigError("patch_seconds must be in (0, chunk_seconds]");
    }
    if (swap_prob < 0.0 || swap_prob > 1.0) throw ConfigError("swap_prob must be in [0, 1]");
    if (gain_min_db > gain_max_db) throw ConfigError("gain range is inverted");
  }
};

/// Draw of a single augmentation; exposed so callers can apply the same
/// transform in another domain.
struct PatchDraw {
  Eigen::Index offset = 0;
  double gain = 1.0;
  bool swapped = false;
};

template <class Rng>
PatchDraw draw_patch(Eigen::Index chunk_length, Eigen::Index patch_length, const PatchSpec& spec,
                     Rng& rng) {
  if (chunk_length < patch_length) {
    throw LengthError("chunk of " + std::to_string(chunk_length) + " samples is shorter than the " +
                      std::to_string(patch_length) + "-sample patch");
  }
  PatchDraw d;
  std::uniform_int_distribution<Eigen::Index> pos(0, chunk_length - patch_length);
  d.offset = pos(rng);
  std::uniform_real_distribution<double> gain_db(spec.gain_min_db, spec.gain_max_db);
  d.gain = std::pow(10.0, gain_db(rng) / 20.0);
  std::bernoulli_distribution swap(spec.swap_prob);
  d.swapped = swap(rng);
  return d;
}

/// Random contiguous patch with random gain and (stereo only) random channel swap.
template <class Rng>
AudioBuffer make_patch(const AudioBuffer& chunk, const PatchSpec& spec, Rng& rng) {
  spec.validate();
  const auto patch_length =
      static_cast<Eigen::Index>(std::llround(spec.patch_seconds * chunk.sample_rate));
  const PatchDraw d = draw_patch(chunk.length(), patch_length, spec, rng);
  Eigen::MatrixXd s = d.gain * chunk.samples.middleCols(d.offset, patch_length);
  if (d.swapped && s.rows() == 2) s.row(0).swap(s.row(1));
  return {std::move(s), chunk.sample_rate};
}

}  // namespace psup

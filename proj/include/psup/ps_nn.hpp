#pragma once

// Nearest-neighbour PS generator: banded-energy keys over a short causal
// window map to the PS parameters of the window's last frame.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/errors.hpp"
#include "psup/ps_codec.hpp"
#include "psup/spectral.hpp"

namespace psup {

struct NnConfig {
  int n_context = 20;       // N, frames per key window
  double smoothing = 0.95;  // exponential smoothing factor
  std::int64_t n_pairs = 50000;

  void validate() const {
    if (n_context < 1) throw ConfigError("nn: n_context must be >= 1");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("nn: smoothing must lie in [0, 1)");
    if (n_pairs < 1) throw ConfigError("nn: n_pairs must be >= 1");
  }
};

/// Banded magnitude sums B|S|, bands x frames.
inline Eigen::MatrixXd banded_magnitude(const ComplexSpectrogram& s, const BandMap& bands) {
  return bands.sum_bins(s.cwiseAbs());
}

namespace detail {

// Fixed summation order, so stored keys and query keys agree bit for bit.
inline Eigen::VectorXd window_mean(const Eigen::MatrixXd& banded, Eigen::Index last, int n_context) {
  Eigen::VectorXd key = Eigen::VectorXd::Zero(banded.rows());
  for (Eigen::Index t = last - n_context + 1; t <= last; ++t) {
    const auto col = banded.col(std::max<Eigen::Index>(t, 0));
    for (Eigen::Index r = 0; r < key.size(); ++r) key[r] += col[r];
  }
  for (Eigen::Index r = 0; r < key.size(); ++r) key[r] /= n_context;
  return key;
}

}  // namespace detail

/// Mean over the window's frames of the banded magnitude sums.
inline Eigen::VectorXd compute_key(const Eigen::MatrixXd& mag, const BandMap& bands, int n_context) {
  if (mag.cols() != n_context) {
    throw ShapeError("nn key window has " + std::to_string(mag.cols()) + " frames, expected " +
                     std::to_string(n_context));
  }
  return detail::window_mean(bands.sum_bins(mag), n_context - 1, n_context);
}

/// Immutable key/value store with exact Euclidean search.
class NnIndex {
 public:
  NnIndex() = default;
  NnIndex(Eigen::MatrixXd keys, Eigen::MatrixXd values) : keys_(std::move(keys)), values_(std::move(values)) {
    if (keys_.cols() != values_.cols()) throw ShapeError("nn index: key/value counts differ");
    if (!keys_.allFinite() || !values_.allFinite()) throw DataError("nn index: non-finite entries");
    build_tree();
  }

  [[nodiscard]] Eigen::Index size() const { return keys_.cols(); }
  [[nodiscard]] Eigen::Index key_dim() const { return keys_.rows(); }
  [[nodiscard]] Eigen::Index value_dim() const { return values_.rows(); }
  [[nodiscard]] const Eigen::MatrixXd& keys() const { return keys_; }
  [[nodiscard]] const Eigen::MatrixXd& values() const { return values_; }

  /// Index of the nearest key; ties go to the lowest insertion index.
  [[nodiscard]] Eigen::Index nearest(const Eigen::VectorXd& q) const {
    check_query(q);
    Best best;
    search(0, q, best);
    return best.idx;
  }

  /// Linear scan, reference path.
  [[nodiscard]] Eigen::Index nearest_brute(const Eigen::VectorXd& q) const {
    check_query(q);
    Best best;
    for (Eigen::Index i = 0; i < size(); ++i) best.offer(sq_dist(i, q), i);
    return best.idx;
  }

  [[nodiscard]] Eigen::VectorXd query(const Eigen::VectorXd& q) const { return values_.col(nearest(q)); }

 private:
  struct Node {
    int dim = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1, right = -1;
    Eigen::Index begin = 0, end = 0;
  };
  struct Best {
    double d = std::numeric_limits<double>::infinity();
    Eigen::Index idx = -1;
    void offer(double dist, Eigen::Index i) {
      if (dist < d || (dist == d && i < idx)) {
        d = dist;
        idx = i;
      }
    }
  };
  static constexpr Eigen::Index kLeafSize = 16;

  void check_query(const Eigen::VectorXd& q) const {
    if (size() == 0) throw DataError("nn index is empty");
    if (q.size() != key_dim()) throw ShapeError("nn query dimension mismatch");
  }

  [[nodiscard]] double sq_dist(Eigen::Index i, const Eigen::VectorXd& q) const {
    double s = 0.0;
    for (Eigen::Index r = 0; r < key_dim(); ++r) {
      const double d = keys_(r, i) - q[r];
      s += d * d;
    }
    return s;
  }

  void build_tree() {
    nodes_.clear();
    perm_.resize(static_cast<std::size_t>(size()));
    std::iota(perm_.begin(), perm_.end(), Eigen::Index{0});
    if (size() > 0) build_node(0, size());
  }

  int build_node(Eigen::Index begin, Eigen::Index end) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    if (end - begin <= kLeafSize) return id;
    int dim = 0;
    double spread = -1.0;
    for (Eigen::Index r = 0; r < key_dim(); ++r) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (Eigen::Index k = begin; k < end; ++k) {
        const double v = keys_(r, perm_[k]);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > spread) {
        spread = hi - lo;
        dim = static_cast<int>(r);
      }
    }
    if (spread <= 0.0) return id;  // all keys identical here
    const Eigen::Index mid = begin + (end - begin) / 2;
    std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                     [&](Eigen::Index a, Eigen::Index b) { return keys_(dim, a) < keys_(dim, b); });
    nodes_[id].dim = dim;
    nodes_[id].split = keys_(dim, perm_[mid]);
    const int l = build_node(begin, mid);
    const int r = build_node(mid, end);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(int id, const Eigen::VectorXd& q, Best& best) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.dim < 0) {
      for (Eigen::Index k = n.begin; k < n.end; ++k) best.offer(sq_dist(perm_[k], q), perm_[k]);
      return;
    }
    const double diff = q[n.dim] - n.split;
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // equal bound may still hide a lower-index tie
    if (diff * diff <= best.d) search(far, q, best);
  }

  Eigen::MatrixXd keys_;    // key_dim x n
  Eigen::MatrixXd values_;  // value_dim x n
  std::vector<Node> nodes_;
  std::vector<Eigen::Index> perm_;
};

/// Draws key/value pairs uniformly over chunks, then over eligible end frames.
inline NnIndex build_index(const std::vector<AudioBuffer>& corpus, const BandMap& bands, const NnConfig& cfg,
                           std::mt19937_64& rng, const StftConfig& stft_cfg = {}) {
  cfg.validate();
  if (corpus.empty()) throw DataError("nn: empty corpus");
  struct Song {
    Eigen::MatrixXd mag;     // bands x frames
    Eigen::MatrixXd params;  // 2*bands x frames
  };
  std::vector<Song> songs;
  for (const AudioBuffer& chunk : corpus) {
    if (chunk.channels() != 2) throw ChannelCountError("nn: corpus chunks must be stereo");
    if (chunk.length() < stft_cfg.frame_size) continue;
    const ComplexSpectrogram l = stft(chunk.channel(0), stft_cfg);
    const ComplexSpectrogram r = stft(chunk.channel(1), stft_cfg);
    if (l.cols() < cfg.n_context) continue;
    songs.push_back({banded_magnitude(stft(downmix(chunk).channel(0), stft_cfg), bands), encode(l, r, bands).joined()});
  }
  if (songs.empty()) throw DataError("nn: no corpus item spans " + std::to_string(cfg.n_context) + " frames");

  Eigen::MatrixXd keys(bands.n_bands(), cfg.n_pairs);
  Eigen::MatrixXd values(2 * bands.n_bands(), cfg.n_pairs);
  std::uniform_int_distribution<std::size_t> pick_song(0, songs.size() - 1);
  for (std::int64_t k = 0; k < cfg.n_pairs; ++k) {
    const Song& s = songs[pick_song(rng)];
    std::uniform_int_distribution<Eigen::Index> pick_end(cfg.n_context - 1, s.mag.cols() - 1);
    const Eigen::Index j = pick_end(rng);
    keys.col(k) = detail::window_mean(s.mag, j, cfg.n_context);
    values.col(k) = s.params.col(j);
  }
  return {std::move(keys), std::move(values)};
}

/// Sign alignment of IID columns, then exponential smoothing of all rows.
inline PsParams postprocess(const PsParams& p, double smoothing = 0.95) {
  PsParams out = p;
  for (Eigen::Index j = 1; j < out.frames(); ++j) {
    const auto prev = out.iid.col(j - 1);
    const double keep = (out.iid.col(j) - prev).squaredNorm();
    const double flip = (-out.iid.col(j) - prev).squaredNorm();
    if (flip < keep) out.iid.col(j) = -out.iid.col(j);
  }
  for (Eigen::Index j = 1; j < out.frames(); ++j) {
    out.iid.col(j) = smoothing * out.iid.col(j - 1) + (1.0 - smoothing) * out.iid.col(j);
    out.ic.col(j) = smoothing * out.ic.col(j - 1) + (1.0 - smoothing) * out.ic.col(j);
  }
  return out;
}

/// Raw per-frame retrieval with causal key windows (left-padded by frame 0).
inline PsParams nn_retrieve(const ComplexSpectrogram& mono_spec, const NnIndex& index, const BandMap& bands,
                            const NnConfig& cfg) {
  cfg.validate();
  if (mono_spec.cols() < 1) throw LengthError("nn: empty spectrogram");
  const Eigen::MatrixXd mag = banded_magnitude(mono_spec, bands);
  const Eigen::Index frames = mag.cols();
  Eigen::MatrixXd out(index.value_dim(), frames);
  for (Eigen::Index j = 0; j < frames; ++j) out.col(j) = index.query(detail::window_mean(mag, j, cfg.n_context));
  return PsParams::from_joined(out);
}

inline PsParams nn_generate(const ComplexSpectrogram& mono_spec, const NnIndex& index, const BandMap& bands,
                            const NnConfig& cfg = {}) {
  return postprocess(nn_retrieve(mono_spec, index, bands, cfg), cfg.smoothing);
}

inline void write_pnn(std::ostream& os, const NnIndex& index) {
  os.write("PNN1", 4);
  detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(index.size()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(index.key_dim()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(index.value_dim()));
  for (const Eigen::MatrixXd* m : {&index.keys(), &index.values()}) {
    for (Eigen::Index i = 0; i < m->cols(); ++i) {
      for (Eigen::Index r = 0; r < m->rows(); ++r) detail::write_le<float>(os, static_cast<float>((*m)(r, i)));
    }
  }
}

inline NnIndex read_pnn(std::istream& is) {
  detail::expect_magic(is, "PNN1");
  const auto n = detail::read_le<std::uint64_t>(is);
  const auto kd = detail::read_le<std::uint32_t>(is);
  const auto vd = detail::read_le<std::uint32_t>(is);
  if (kd != kBands || vd != 2 * kBands) throw FormatError("PNN1: expected key_dim 34 and val_dim 68");
  if (n > (std::uint64_t{1} << 32)) throw FormatError("PNN1: implausible pair count");
  Eigen::MatrixXd keys(kd, static_cast<Eigen::Index>(n));
  Eigen::MatrixXd values(vd, static_cast<Eigen::Index>(n));
  for (Eigen::MatrixXd* m : {&keys, &values}) {
    for (Eigen::Index i = 0; i < m->cols(); ++i) {
      for (Eigen::Index r = 0; r < m->rows(); ++r) (*m)(r, i) = detail::read_le<float>(is);
    }
  }
  return {std::move(keys), std::move(values)};
}

inline void save_pnn(const std::string& path, const NnIndex& index) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  write_pnn(os, index);
}

inline NnIndex load_pnn(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path);
  return read_pnn(is);
}

}  // namespace psup

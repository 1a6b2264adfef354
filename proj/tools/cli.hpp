#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "psup/audio_io.hpp"
#include "psup/generators.hpp"
#include "psup/seq_model.hpp"
#include "psup/spectral.hpp"

namespace psup::cli {

/// Runs one command line (args excludes the program name). Returns the exit code:
/// 0 success, 1 module error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct BenchSetup {
  bool toy = false;
  int frames = 0;  // 0 keeps the profile's context length
  std::int64_t n_pairs = 50000;
  int repeats = 1;
  std::uint64_t seed = 0;
  SampleConfig sample;
};

struct BenchRow {
  std::string approach;
  double gen_seconds = 0.0;    // parameter generation only
  double total_seconds = 0.0;  // analysis, generation and decoding
  double rtf = 0.0;            // total_seconds / audio duration
  std::int64_t forward_passes = 0;
};

/// Times each generator on the same mono input with randomly initialised
/// models of one size and a random index of `n_pairs` entries.
std::vector<BenchRow> run_bench(const AudioBuffer& mono, const std::vector<Generator>& gens, const BenchSetup& setup,
                                const BandMap& bands);

void write_bench_table(std::ostream& os, const std::vector<BenchRow>& rows);

/// Sorted *.wav paths in a directory.
std::vector<std::string> list_wavs(const std::string& dir);

}  // namespace psup::cli

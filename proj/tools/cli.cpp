#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include "psup/decorr_baseline.hpp"
#include "psup/metrics.hpp"
#include "psup/ps_codec.hpp"
#include "psup/ps_nn.hpp"

namespace psup::cli {
namespace {

// Plain key=value lines apply to the selected subcommand.
class ScopedConfig : public CLI::ConfigBase {
 public:
  explicit ScopedConfig(const CLI::App* app) : app_(app) {}
  std::vector<CLI::ConfigItem> from_config(std::istream& is) const override {
    auto items = CLI::ConfigBase::from_config(is);
    std::string sub;
    for (const CLI::App* s : app_->get_subcommands()) sub = s->get_name();
    for (auto& it : items) {
      if (it.parents.empty() && !sub.empty()) it.parents = {sub};
    }
    return items;
  }

 private:
  const CLI::App* app_;
};

struct Options {
  std::vector<std::string> pos;
  std::string output, mono_out, index, model, ic_profile, grids, band_map, log, gen = "decorr", mode = "mtm";
  std::uint64_t seed = 0;
  bool toy = false, quantize = false, greedy = false, raw_sum = false;
  std::optional<int> frames, steps;
  std::optional<double> tau, gamma;
  int k = 128, batch = 128, repeat = 1;
  double lr = 1e-4, warmup = 0.05, cond_dropout = 0.10, lambda = 0.15, eps_db = 20.0, swap_prob = 0.5;
  double smoothing = 0.95;
  int context = 20;
  std::int64_t pairs = 50000;
  std::string gens = "decorr,reg,nn,mtm,ar";
};

BandMap band_map_of(const Options& o) { return o.band_map.empty() ? make_band_map() : load_band_map(o.band_map); }
QuantGrids grids_of(const Options& o) { return o.grids.empty() ? QuantGrids::defaults() : load_grids(o.grids); }

SampleConfig sample_config(const Options& o, Generator g) {
  SampleConfig s;
  s.ar_greedy = o.greedy;
  if (o.steps) s.mtm_steps = *o.steps;
  if (g == Generator::kAr) {
    if (o.tau) s.ar_temperature = *o.tau;
    if (o.gamma) s.ar_guidance = *o.gamma;
  } else {
    if (o.tau) s.mtm_noise = *o.tau;
    if (o.gamma) s.mtm_guidance = *o.gamma;
  }
  return s;
}

NnConfig nn_config(const Options& o) {
  NnConfig c;
  c.n_context = o.context;
  c.smoothing = o.smoothing;
  c.n_pairs = o.pairs;
  c.validate();
  return c;
}

AudioBuffer as_mono(const AudioBuffer& a) { return a.channels() == 2 ? downmix(a) : a; }

std::vector<AudioBuffer> load_corpus(const std::string& dir) {
  std::vector<AudioBuffer> out;
  for (const std::string& p : list_wavs(dir)) out.push_back(load_wav(p));
  if (out.empty()) throw DataError("no .wav files in " + dir);
  return out;
}

// Keeps assets alive for the duration of a command.
struct LoadedAssets {
  std::optional<NnIndex> index;
  std::optional<SeqModel> model;
  UpmixAssets assets;
};

void load_assets(const Options& o, Generator g, const BandMap& bands, LoadedAssets& la) {
  if (!o.index.empty()) la.index.emplace(load_pnn(o.index));
  if (!o.model.empty()) la.model.emplace(load_psm(o.model));
  la.assets.index = la.index ? &*la.index : nullptr;
  la.assets.model = la.model ? &*la.model : nullptr;
  la.assets.nn = nn_config(o);
  la.assets.sample = sample_config(o, g);
  la.assets.grids = grids_of(o);
  if (!o.ic_profile.empty()) la.assets.ic_profile = load_ic_profile(o.ic_profile, bands.n_bands());
}

void cmd_encode(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  const AudioBuffer in = load_wav(o.pos.at(0));
  const PsParams p = encode_audio(in, bands);
  if (o.quantize) {
    save_psp(o.output, quantize(p, grids_of(o)));
  } else {
    save_psp(o.output, p);
  }
  if (!o.mono_out.empty()) save_wav(o.mono_out, downmix(in));
  out << "encoded " << p.frames() << " frames x " << p.bands() << " bands\n";
}

void cmd_decode(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  const AudioBuffer mono = as_mono(load_wav(o.pos.at(0)));
  const PsParams p = params_of(load_psp(o.pos.at(1)), grids_of(o));
  if (p.frames() != stft_frame_count(mono.length(), {})) {
    throw ShapeError("parameter frame count does not match the mono input");
  }
  save_wav(o.output, decode_audio(mono, p, bands));
  out << "decoded " << mono.length() << " samples\n";
}

void cmd_upmix(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  const Generator g = parse_generator(o.gen);
  LoadedAssets la;
  load_assets(o, g, bands, la);
  const AudioBuffer mono = as_mono(load_wav(o.pos.at(0)));
  std::mt19937_64 rng(o.seed);
  save_wav(o.output, upmix(mono, g, la.assets, bands, rng));
  out << "upmixed with " << generator_name(g) << "\n";
}

void cmd_build_index(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  std::mt19937_64 rng(o.seed);
  const NnIndex index = build_index(load_corpus(o.pos.at(0)), bands, nn_config(o), rng);
  save_pnn(o.output, index);
  out << "index with " << index.size() << " pairs\n";
}

void cmd_train(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  const Regime r = parse_regime(o.mode);
  ModelConfig mc = o.toy ? ModelConfig::toy(r) : ModelConfig::full(r);
  if (o.frames) mc.frames = *o.frames;
  mc.validate();
  TrainConfig tc;
  if (o.steps) tc.steps = *o.steps;
  tc.batch = o.batch;
  tc.lr = o.lr;
  tc.warmup = o.warmup;
  tc.cond_dropout = o.cond_dropout;
  tc.lambda = o.lambda;
  tc.eps_db = o.eps_db;
  tc.swap_prob = o.swap_prob;
  tc.seed = o.seed;
  const TrainCorpus corpus = prepare_corpus(load_corpus(o.pos.at(0)), bands);
  SeqModel model(mc, o.seed);
  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log);
    if (!log) throw FormatError("cannot write " + o.log);
    log.precision(9);
    write_train_log_header(log);
  }
  double last = 0.0;
  train(
      model, corpus, tc,
      [&](const TrainLogRow& row) {
        last = row.loss;
        if (log.is_open()) write_train_log_row(log, row);
      },
      grids_of(o));
  save_psm(o.output, model);
  out << "trained " << regime_name(r) << " model for " << tc.steps << " steps, final loss " << last << "\n";
}

void cmd_eval(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  const Generator g = parse_generator(o.gen);
  LoadedAssets la;
  load_assets(o, g, bands, la);
  MetricConfig mcfg;
  mcfg.k = o.k;
  mcfg.lambda = o.lambda;
  mcfg.eps_db = o.eps_db;
  mcfg.raw_sum = o.raw_sum;
  mcfg.validate();
  const bool stochastic = g == Generator::kMtm || (g == Generator::kAr && !o.greedy);
  const int k = stochastic ? mcfg.k : 1;

  std::vector<EvalRow> rows;
  std::vector<PsParams> all_truth, all_gen;
  const std::vector<std::string> files = list_wavs(o.pos.at(0));
  if (files.empty()) throw DataError("no .wav files in " + o.pos.at(0));
  for (std::size_t i = 0; i < files.size(); ++i) {
    const AudioBuffer st = load_wav(files[i]);
    if (st.channels() != 2) throw ChannelCountError(files[i] + " is not stereo");
    const PsParams truth = encode_audio(st, bands);
    const ComplexSpectrogram s = stft(downmix(st).channel(0));
    std::mt19937_64 rng(o.seed + i);
    std::vector<PsParams> samples;
    for (int j = 0; j < k; ++j) samples.push_back(generate_params(s, g, la.assets, bands, rng));
    const std::string name = std::filesystem::path(files[i]).filename().string();
    rows.push_back({name, generator_name(g), e_min(truth, samples, mcfg), frechet(frame_pool({truth}), frame_pool(samples))});
    all_truth.push_back(truth);
    all_gen.insert(all_gen.end(), samples.begin(), samples.end());
  }
  const double pooled = frechet(frame_pool(all_truth), frame_pool(all_gen));
  std::ostringstream csv;
  write_eval_csv(csv, rows, {{generator_name(g), pooled}});
  if (o.output.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(o.output);
    if (!f) throw FormatError("cannot write " + o.output);
    f << csv.str();
  }
}

void cmd_bench(const Options& o, std::ostream& out) {
  const BandMap bands = band_map_of(o);
  std::vector<Generator> gens;
  std::stringstream ss(o.gens);
  for (std::string t; std::getline(ss, t, ',');) {
    if (!t.empty()) gens.push_back(parse_generator(t));
  }
  BenchSetup setup;
  setup.toy = o.toy;
  setup.frames = o.frames.value_or(0);
  setup.n_pairs = o.pairs;
  setup.repeats = o.repeat;
  setup.seed = o.seed;
  setup.sample = sample_config(o, Generator::kMtm);
  const SampleConfig ar = sample_config(o, Generator::kAr);
  setup.sample.ar_temperature = ar.ar_temperature;
  setup.sample.ar_guidance = ar.ar_guidance;
  write_bench_table(out, run_bench(as_mono(load_wav(o.pos.at(0))), gens, setup, bands));
}

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Options& o) {
  CLI::App* c = app.add_subcommand(name, help);
  c->allow_config_extras(CLI::config_extras_mode::error);
  c->fallthrough();
  c->add_option("--seed", o.seed, "random seed");
  c->add_option("--band-map", o.band_map, "band map text file");
  return c;
}

}  // namespace

std::vector<std::string> list_wavs(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (e.is_regular_file() && ext == ".wav") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<BenchRow> run_bench(const AudioBuffer& mono, const std::vector<Generator>& gens, const BenchSetup& setup,
                                const BandMap& bands) {
  using clock = std::chrono::steady_clock;
  if (mono.channels() != 1) throw ChannelCountError("bench expects mono input");
  if (setup.repeats < 1) throw ConfigError("repeat must be >= 1");
  std::optional<NnIndex> index;
  std::optional<SeqModel> ar, mtm, reg;
  auto model_cfg = [&](Regime r) {
    ModelConfig mc = setup.toy ? ModelConfig::toy(r) : ModelConfig::full(r);
    if (setup.frames > 0) mc.frames = setup.frames;
    return mc;
  };
  for (Generator g : gens) {
    if (g == Generator::kNn && !index) {
      std::mt19937_64 rng(setup.seed);
      std::normal_distribution<double> n01;
      Eigen::MatrixXd keys(bands.n_bands(), setup.n_pairs), values(2 * bands.n_bands(), setup.n_pairs);
      for (auto& v : keys.reshaped()) v = std::exp(n01(rng));
      for (auto& v : values.reshaped()) v = n01(rng);
      index.emplace(keys, values);
    }
    if (g == Generator::kAr && !ar) ar.emplace(model_cfg(Regime::kAr), setup.seed);
    if (g == Generator::kMtm && !mtm) mtm.emplace(model_cfg(Regime::kMtm), setup.seed);
    if (g == Generator::kReg && !reg) reg.emplace(model_cfg(Regime::kReg), setup.seed);
  }
  const double duration = static_cast<double>(mono.length()) / mono.sample_rate;
  std::vector<BenchRow> rows;
  for (Generator g : gens) {
    UpmixAssets assets;
    assets.sample = setup.sample;
    assets.index = index ? &*index : nullptr;
    if (g == Generator::kAr) assets.model = &*ar;
    if (g == Generator::kMtm) assets.model = &*mtm;
    if (g == Generator::kReg) assets.model = &*reg;
    BenchRow row{generator_name(g)};
    for (int r = 0; r < setup.repeats; ++r) {
      std::mt19937_64 rng(setup.seed);
      SamplerStats stats;
      const auto t0 = clock::now();
      const ComplexSpectrogram s = stft(mono.channel(0), assets.stft);
      const auto t1 = clock::now();
      const PsParams p = generate_params(s, g, assets, bands, rng, &stats);
      const auto t2 = clock::now();
      const AudioBuffer outbuf = decode_audio(mono, p, bands, assets.stft, assets.decorr);
      const auto t3 = clock::now();
      const double gen = std::chrono::duration<double>(t2 - t1).count();
      const double total = std::chrono::duration<double>(t3 - t0).count();
      if (r == 0 || gen < row.gen_seconds) row.gen_seconds = gen;
      if (r == 0 || total < row.total_seconds) row.total_seconds = total;
      row.forward_passes = stats.forward_passes;
    }
    row.rtf = row.total_seconds / duration;
    rows.push_back(row);
  }
  return rows;
}

void write_bench_table(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "approach,gen_seconds,total_seconds,rtf,forward_passes\n";
  for (const BenchRow& r : rows) {
    os << r.approach << ',' << r.gen_seconds << ',' << r.total_seconds << ',' << r.rtf << ',' << r.forward_passes
       << '\n';
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"psupmix: mono to stereo upmixing with parametric stereo"};
  app.set_config("--config", "", "key=value defaults; command-line flags win");
  app.config_formatter(std::make_shared<ScopedConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  Options o;

  CLI::App* enc = add_command(app, "encode", "stereo WAV -> PSP1 parameters (+ mono downmix)", o);
  enc->add_option("input", o.pos, "stereo WAV")->required()->expected(1);
  enc->add_option("-o,--output", o.output, "PSP1 output")->required();
  enc->add_option("--mono", o.mono_out, "also write the mono downmix");
  enc->add_flag("--quantize", o.quantize, "store tokens instead of continuous parameters");
  enc->add_option("--grids", o.grids, "quantizer grid file");

  CLI::App* dec = add_command(app, "decode", "mono WAV + PSP1 -> stereo WAV", o);
  dec->add_option("inputs", o.pos, "mono WAV and PSP1 file")->required()->expected(2);
  dec->add_option("-o,--output", o.output, "stereo WAV output")->required();
  dec->add_option("--grids", o.grids, "quantizer grid file for token content");

  auto add_gen_opts = [&](CLI::App* c) {
    c->add_option("--gen", o.gen, "nn | ar | mtm | reg | decorr")
        ->check(CLI::IsMember({"nn", "ar", "mtm", "reg", "decorr"}));
    c->add_option("--index", o.index, "PNN1 index (nn)");
    c->add_option("--model", o.model, "PSM1 checkpoint (ar, mtm, reg)");
    c->add_option("--steps", o.steps, "MTM sampling steps")->check(CLI::PositiveNumber);
    c->add_option("--tau", o.tau, "AR temperature or MTM confidence-noise std");
    c->add_option("--gamma", o.gamma, "guidance strength");
    c->add_flag("--greedy", o.greedy, "AR argmax decoding");
    c->add_option("--ic-profile", o.ic_profile, "IC profile file (decorr)");
    c->add_option("--grids", o.grids, "quantizer grid file");
    c->add_option("--smoothing", o.smoothing, "NN smoothing factor");
    c->add_option("--context", o.context, "NN key window in frames");
  };

  CLI::App* up = add_command(app, "upmix", "mono WAV -> stereo WAV", o);
  up->add_option("input", o.pos, "mono WAV")->required()->expected(1);
  up->add_option("-o,--output", o.output, "stereo WAV output")->required();
  add_gen_opts(up);

  CLI::App* bi = add_command(app, "build-index", "stereo corpus directory -> PNN1 index", o);
  bi->add_option("corpus", o.pos, "directory of stereo WAVs")->required()->expected(1);
  bi->add_option("-o,--output", o.output, "PNN1 output")->required();
  bi->add_option("--pairs", o.pairs, "number of key/value pairs")->check(CLI::PositiveNumber);
  bi->add_option("--context", o.context, "key window in frames");

  CLI::App* tr = add_command(app, "train", "stereo corpus directory -> PSM1 checkpoint", o);
  tr->add_option("corpus", o.pos, "directory of stereo WAVs")->required()->expected(1);
  tr->add_option("-o,--output", o.output, "PSM1 output")->required();
  tr->add_option("--mode", o.mode, "ar | mtm | reg")->check(CLI::IsMember({"ar", "mtm", "reg"}));
  tr->add_option("--log", o.log, "CSV training log");
  tr->add_flag("--toy", o.toy, "small model profile");
  tr->add_option("--frames", o.frames, "context length in frames")->check(CLI::PositiveNumber);
  tr->add_option("--steps", o.steps, "optimizer steps")->check(CLI::PositiveNumber);
  tr->add_option("--batch", o.batch, "batch size")->check(CLI::PositiveNumber);
  tr->add_option("--lr", o.lr, "peak learning rate");
  tr->add_option("--warmup", o.warmup, "warmup fraction");
  tr->add_option("--cond-dropout", o.cond_dropout, "conditioning dropout probability");
  tr->add_option("--lambda", o.lambda, "IID weight in the loss weight");
  tr->add_option("--eps-db", o.eps_db, "IID clip in dB");
  tr->add_option("--swap-prob", o.swap_prob, "channel swap probability");
  tr->add_option("--grids", o.grids, "quantizer grid file");

  CLI::App* ev = add_command(app, "eval", "stereo test directory -> metrics CSV", o);
  ev->add_option("testdir", o.pos, "directory of stereo WAVs")->required()->expected(1);
  ev->add_option("-o,--output", o.output, "CSV output (stdout if omitted)");
  ev->add_option("--k", o.k, "samples per excerpt")->check(CLI::PositiveNumber);
  ev->add_option("--lambda", o.lambda, "IID weight");
  ev->add_option("--eps-db", o.eps_db, "IID clip in dB");
  ev->add_flag("--raw-sum", o.raw_sum, "sum errors instead of averaging");
  add_gen_opts(ev);

  CLI::App* be = add_command(app, "bench", "real-time factor per approach", o);
  be->add_option("input", o.pos, "WAV input (stereo is downmixed)")->required()->expected(1);
  be->add_option("--gen", o.gens, "comma-separated approaches");
  be->add_flag("--toy", o.toy, "small model profile");
  be->add_option("--frames", o.frames, "context length in frames")->check(CLI::PositiveNumber);
  be->add_option("--pairs", o.pairs, "random index size")->check(CLI::PositiveNumber);
  be->add_option("--repeat", o.repeat, "timing repeats (minimum kept)")->check(CLI::PositiveNumber);
  be->add_option("--steps", o.steps, "MTM sampling steps")->check(CLI::PositiveNumber);
  be->add_option("--tau", o.tau, "confidence-noise std");
  be->add_option("--gamma", o.gamma, "guidance strength");

  std::vector<const char*> argv{"psupmix"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (*enc) cmd_encode(o, out);
    if (*dec) cmd_decode(o, out);
    if (*up) cmd_upmix(o, out);
    if (*bi) cmd_build_index(o, out);
    if (*tr) cmd_train(o, out);
    if (*ev) cmd_eval(o, out);
    if (*be) cmd_bench(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace psup::cli

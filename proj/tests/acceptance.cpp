// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments pick
// a subset of criterion numbers.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "psup/decorr_baseline.hpp"
#include "psup/generators.hpp"
#include "psup/metrics.hpp"
#include "psup/ps_codec.hpp"
#include "psup/ps_nn.hpp"
#include "psup/seq_model.hpp"
#include "test_util.hpp"

using namespace psup;
using clk = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream info;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      info << " [failed: " << what << "]";
    }
  }
};

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

const BandMap& bands() {
  static const BandMap bm = make_band_map();
  return bm;
}

PsTokens random_tokens(Eigen::Index frames, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, kVocab - 1);
  PsTokens t{Eigen::MatrixXi(kBands, frames)};
  for (Eigen::Index i = 0; i < t.q.size(); ++i) t.q(i) = tok(rng);
  return t;
}

// 1
void codec_round_trip(Outcome& o) {
  const auto t0 = clk::now();
  const QuantGrids g = QuantGrids::defaults();
  std::vector<double> iid_err, ic_err;
  double worst_iid = 0.0, worst_ic = 0.0;
  for (unsigned m = 0; m < 50; ++m) {
    const Eigen::VectorXd x = test::white_noise(10 * 4096, 1000 + m);
    const ComplexSpectrogram s = stft(x);
    const ComplexSpectrogram sd = stft(decorrelate(x));
    const PsTokens t = random_tokens(s.cols(), 2000 + m);
    const PsParams p = dequantize(t, g);
    const StereoSpectrogram lr = decode(s, sd, p, bands());
    const PsParams back = encode(lr.left, lr.right, bands());
    const auto [qi, qc] = split_tokens(t);
    std::vector<double> mi, mc;
    for (Eigen::Index i = 0; i < t.q.size(); ++i) {
      mi.push_back(std::abs(back.iid(i) - p.iid(i)) / QuantGrids::local_gap(g.iid_levels, qi(i)));
      mc.push_back(std::abs(back.ic(i) - p.ic(i)) / QuantGrids::local_gap(g.ic_levels, qc(i)));
    }
    worst_iid = std::max(worst_iid, test::median(mi));
    worst_ic = std::max(worst_ic, test::median(mc));
    iid_err.insert(iid_err.end(), mi.begin(), mi.end());
    ic_err.insert(ic_err.end(), mc.begin(), mc.end());
  }
  const double secs = seconds_since(t0);
  const double med_iid = test::median(iid_err), med_ic = test::median(ic_err);
  o.info << "median IID err " << med_iid << " gaps, IC err " << med_ic << " gaps (worst matrix " << worst_iid << ", "
         << worst_ic << "), " << secs << " s";
  o.check(med_iid <= 1.0, "IID median <= 1 gap");
  o.check(med_ic <= 1.0, "IC median <= 1 gap");
  o.check(secs < 60.0, "runtime < 60 s");
}

// 2
void analytic_encoder(Outcome& o) {
  const ComplexSpectrogram l = stft(test::white_noise(6 * 4096, 1));
  const PsParams same = encode(l, l, bands());
  const PsParams half = encode(l, 0.5 * l, bands());
  const PsParams anti = encode(l, -l, bands());
  const double e_same = std::max(same.iid.cwiseAbs().maxCoeff(), (same.ic.array() - 1.0).abs().maxCoeff());
  const double e_half = (half.iid.array() - 6.0206).abs().maxCoeff();
  const double e_anti = (anti.ic.array() + 1.0).abs().maxCoeff();
  o.info << "L=R max dev " << e_same << ", R=L/2 IID dev " << e_half << " dB, R=-L IC dev " << e_anti;
  o.check(e_same < 1e-9, "L=R gives (0 dB, 1)");
  o.check(e_half <= 1e-3, "R=L/2 gives 6.0206 dB");
  o.check(e_anti <= 1e-6, "R=-L gives IC -1");
}

// 3
void pass_through(Outcome& o) {
  const Eigen::VectorXd x = test::white_noise(5 * 44100 + 123, 9);
  const PsParams p = PsParams::constant(kBands, stft_frame_count(x.size(), {}), 0.0, 1.0);
  const AudioBuffer st = decode_audio(AudioBuffer::mono(x), p, bands());
  const double err =
      std::max((st.channel(0) - x).cwiseAbs().maxCoeff(), (st.channel(1) - x).cwiseAbs().maxCoeff());
  o.info << "max abs error " << err;
  o.check(st.length() == x.size(), "length preserved");
  o.check(err < 1e-5, "error < 1e-5");
}

// 4
Example random_example(const ModelConfig& c, Eigen::Index T, unsigned seed, bool drop) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 6.0);
  std::uniform_int_distribution<int> tok(0, c.n_classes - 1);
  Example ex;
  ex.input.features.resize(c.n_features, T);
  ex.input.tokens.resize(c.n_bands, T);
  for (auto& v : ex.input.features.reshaped()) v = u(rng);
  for (auto& v : ex.input.tokens.reshaped()) v = tok(rng);
  ex.input.drop = drop;
  if (c.token_mode()) {
    ex.masked = make_training_masks(c.regime, c.n_bands, T, rng);
    for (const Query& q : ex.masked) {
      ex.targets.push_back(ex.input.tokens(q.band, q.frame));
      ex.input.tokens(q.band, q.frame) = c.mask_token();
    }
    ex.weight = 1.3;
  } else {
    ex.input.tokens.setConstant(c.mask_token());
    std::normal_distribution<double> g;
    ex.target_params.resize(2 * c.n_bands, T);
    for (auto& v : ex.target_params.reshaped()) v = g(rng);
  }
  return ex;
}

void gradient_checks(Outcome& o) {
  const double h = 1e-4;
  int groups = 0, checks = 0;
  double worst = 0.0;
  std::string worst_at;
  for (Regime r : {Regime::kAr, Regime::kMtm, Regime::kReg}) {
    const ModelConfig c = ModelConfig::toy(r);
    SeqModel model(c, 42);
    const std::vector<Example> batch = {random_example(c, 5, 1, false), random_example(c, 5, 2, true),
                                        random_example(c, 4, 3, false)};
    batch_loss(model, batch, true);
    std::vector<Eigen::MatrixXd> grads;
    for (const Param& p : model.params()) grads.push_back(p.grad);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g;
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      Param& p = model.params()[i];
      ++groups;
      for (int trial = 0; trial < 10; ++trial) {
        Eigen::MatrixXd d(p.value.rows(), p.value.cols());
        for (auto& v : d.reshaped()) v = g(rng);
        const Eigen::MatrixXd saved = p.value;
        p.value = saved + h * d;
        const double lp = batch_loss(model, batch, false);
        p.value = saved - h * d;
        const double lm = batch_loss(model, batch, false);
        p.value = saved;
        const double fd = (lp - lm) / (2 * h);
        const double an = (grads[i].array() * d.array()).sum();
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        ++checks;
        if (rel > worst) {
          worst = rel;
          worst_at = std::string(regime_name(r)) + "/" + p.name;
        }
      }
    }
  }
  o.info << groups << " groups, " << checks << " projections, worst rel err " << worst << " (" << worst_at << ")";
  o.check(worst < 1e-3, "rel err < 1e-3");
}

// 5
Eigen::VectorXd shaped(int kind, Eigen::Index n, unsigned seed) {
  const Eigen::VectorXd w = test::white_noise(n, seed);
  Eigen::VectorXd y(n);
  double s = 0.0, prev = 0.0;
  const double r = 0.98, c = 2.0 * r * std::cos(2.0 * std::numbers::pi * 3000.0 / 44100.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    switch (kind) {
      case 0:
        y[i] = w[i];
        break;
      case 1:
        s = 0.95 * s + w[i];
        y[i] = 0.2 * s;
        break;
      case 2:
        y[i] = w[i] - 0.95 * prev;
        prev = w[i];
        break;
      default: {
        const double v = 0.05 * w[i] + c * s - r * r * prev;
        prev = s;
        s = v;
        y[i] = v;
      }
    }
  }
  return y;
}

struct PanCorpus {
  std::vector<AudioBuffer> items;
  std::vector<Eigen::MatrixXd> features;  // first kEval frames of each downmix
  std::vector<PsTokens> truth;
};
constexpr Eigen::Index kEval = 60;

PanCorpus pan_corpus() {
  const double pans[4] = {10.0, -13.0, 16.0, -8.0};
  PanCorpus pc;
  for (int k = 0; k < 4; ++k) {
    const Eigen::VectorXd x = shaped(k, 4 * 44100, 100 + k);
    const double gl = std::pow(10.0, pans[k] / 40.0);
    pc.items.push_back(AudioBuffer::stereo(gl * x, x / gl));
    pc.features.push_back(model_features(stft(downmix(pc.items.back()).channel(0)), bands()).leftCols(kEval));
    pc.truth.push_back(PsTokens{quantize(encode_audio(pc.items.back(), bands())).q.leftCols(kEval)});
  }
  return pc;
}

SeqModel trained(Regime r, const TrainCorpus& corpus, int steps, double swap) {
  SeqModel model(ModelConfig::toy(r), 1);
  TrainConfig tc;
  tc.steps = steps;
  tc.batch = 16;
  tc.lr = 3e-3;
  tc.swap_prob = swap;
  tc.seed = 3;
  train(model, corpus, tc);
  return model;
}

PsTokens sample_tokens(const SeqModel& m, const Eigen::MatrixXd& f, unsigned seed) {
  std::mt19937_64 rng(seed);
  return m.config().regime == Regime::kAr ? ar_sample(m, f, {}, rng) : mtm_sample(m, f, {}, rng);
}

void memorization(Outcome& o) {
  const auto t0 = clk::now();
  const PanCorpus pc = pan_corpus();
  const TrainCorpus corpus = prepare_corpus(pc.items, bands());

  // exact pans, no channel swap
  for (const auto& [r, steps] : {std::pair{Regime::kAr, 1000}, std::pair{Regime::kMtm, 300}}) {
    const SeqModel m = trained(r, corpus, steps, 0.0);
    o.info << regime_name(r) << " acc";
    for (std::size_t k = 0; k < pc.items.size(); ++k) {
      const PsTokens out = sample_tokens(m, pc.features[k], 5 + static_cast<unsigned>(k));
      const double acc = (out.q.array() == pc.truth[k].q.array()).cast<double>().mean();
      o.info << ' ' << acc;
      o.check(acc > 0.95, std::string(regime_name(r)) + " excerpt " + std::to_string(k) + " accuracy > 95%");
    }
    o.info << "; ";
  }

  // symmetric pans: every excerpt also appears mirrored
  auto mean_abs_iid = [](const std::vector<PsParams>& ps) {
    double s = 0.0;
    for (const PsParams& p : ps) s += p.iid.cwiseAbs().mean();
    return s / static_cast<double>(ps.size());
  };
  std::vector<PsParams> reg_out, nn_out, ar_out, mtm_out;
  {
    const SeqModel m = trained(Regime::kReg, corpus, 300, 0.5);
    for (const Eigen::MatrixXd& f : pc.features) reg_out.push_back(reg_predict(m, f));
  }
  for (Regime r : {Regime::kAr, Regime::kMtm}) {
    const SeqModel m = trained(r, corpus, r == Regime::kAr ? 1000 : 300, 0.5);
    for (std::size_t k = 0; k < pc.items.size(); ++k) {
      (r == Regime::kAr ? ar_out : mtm_out).push_back(dequantize(sample_tokens(m, pc.features[k], 9)));
    }
  }
  {
    std::vector<AudioBuffer> mirrored = pc.items;
    for (const AudioBuffer& a : pc.items) mirrored.push_back(AudioBuffer::stereo(a.channel(1), a.channel(0)));
    NnConfig nc;
    nc.n_pairs = 4000;
    std::mt19937_64 rng(4);
    const NnIndex index = build_index(mirrored, bands(), nc, rng);
    for (const AudioBuffer& a : pc.items) {
      nn_out.push_back(PsParams::from_joined(nn_generate(stft(downmix(a).channel(0)), index, bands(), nc).joined().leftCols(kEval)));
    }
  }
  const double reg = mean_abs_iid(reg_out), nn = mean_abs_iid(nn_out), ar = mean_abs_iid(ar_out),
               mtm = mean_abs_iid(mtm_out);
  const double secs = seconds_since(t0);
  o.info << "symmetric mean |IID| reg " << reg << " nn " << nn << " ar " << ar << " mtm " << mtm << " dB; " << secs
         << " s";
  o.check(reg < 2.0, "reg |IID| < 2 dB");
  o.check(nn > 6.0, "nn |IID| > 6 dB");
  o.check(ar > 6.0, "ar |IID| > 6 dB");
  o.check(mtm > 6.0, "mtm |IID| > 6 dB");
  o.check(secs < 600.0, "total < 10 min");
}

Eigen::MatrixXd random_features(Eigen::Index n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  Eigen::MatrixXd f(kBands, n);
  for (auto& v : f.reshaped()) v = u(rng);
  return f;
}

// 6
void mtm_schedule(Outcome& o) {
  const ModelConfig mc = ModelConfig::toy(Regime::kMtm);
  const SeqModel model(mc, 3);
  SampleConfig cfg;
  cfg.mtm_steps = 20;
  std::mt19937_64 rng(8);
  Eigen::MatrixXi prev;
  Eigen::Index prev_count = 0;
  int mismatches = 0, increases = 0, changed = 0, patches = 0, bad_end = 0, last_step = -1;
  const MtmObserver obs = [&](Eigen::Index p, int step, const Eigen::MatrixXi& tok) {
    const Eigen::Index first = p == 0 ? 0 : mc.frames - mc.frames / 2;
    const Eigen::Index n = kBands * (mc.frames - first);
    const Eigen::Index count = (tok.array() == mc.mask_token()).count();
    if (count != mtm_schedule_count(step, cfg.mtm_steps, n)) ++mismatches;
    if (step == 0) {
      ++patches;
    } else {
      if (count > prev_count) ++increases;
      for (Eigen::Index i = 0; i < tok.size(); ++i) {
        if (prev.data()[i] != mc.mask_token() && tok.data()[i] != prev.data()[i]) ++changed;
      }
    }
    if (step == cfg.mtm_steps && count != 0) ++bad_end;
    if (last_step >= 0 && step == 0 && last_step != cfg.mtm_steps) ++bad_end;
    last_step = step;
    prev = tok;
    prev_count = count;
  };
  const PsTokens t = mtm_sample(model, random_features(150, 4), cfg, rng, nullptr, obs);
  if (last_step != cfg.mtm_steps) ++bad_end;
  o.info << patches << " patches; count mismatches " << mismatches << ", increases " << increases
         << ", fixed-token changes " << changed << ", bad terminations " << bad_end;
  o.check(patches > 1, "several patches");
  o.check(mismatches == 0, "counts follow the cosine law");
  o.check(increases == 0, "non-increasing");
  o.check(bad_end == 0, "ends at zero");
  o.check(changed == 0, "fixed tokens unchanged");
  o.check(t.q.minCoeff() >= 0 && t.q.maxCoeff() < kVocab, "all tokens decided");
}

// 7
void cfg_guidance(Outcome& o) {
  const ModelConfig mc = ModelConfig::toy(Regime::kMtm);
  const SeqModel model(mc, 5);
  ModelInput in;
  in.features = random_features(mc.frames, 6);
  in.tokens = Eigen::MatrixXi::Constant(kBands, mc.frames, mc.mask_token());
  std::vector<Query> queries;
  for (Eigen::Index j = 0; j < mc.frames; j += 3)
    for (int b = 0; b < kBands; b += 5) queries.push_back({b, j});
  Trace tr;
  model.run(in, detail::frames_of(queries), tr);
  const Eigen::MatrixXd cond = model.token_logits(tr, queries);
  SamplerStats st;
  const Eigen::MatrixXd guided = detail::guided_logits(model, in, queries, 0.0, &st);
  const bool bitwise = guided.rows() == cond.rows() && guided.cols() == cond.cols() &&
                       std::memcmp(guided.data(), cond.data(), sizeof(double) * cond.size()) == 0;

  Eigen::MatrixXd c(3, 2), u(3, 2), want(3, 2);
  c << 1.0, -2.0, 0.5, 4.0, 0.0, 3.0;
  u << 2.0, 1.0, -0.5, 4.0, 1.0, -3.0;
  want << 0.5, -3.5, 1.0, 4.0, -0.5, 6.0;  // gamma 0.5
  const double arith = (cfg_logits(c, u, 0.5) - want).cwiseAbs().maxCoeff();
  const Eigen::MatrixXd z = cfg_logits(c, u, 0.0);
  const bool zero_bitwise = std::memcmp(z.data(), c.data(), sizeof(double) * c.size()) == 0;
  o.info << "gamma 0 model logits bitwise " << (bitwise ? "equal" : "differ") << " (" << st.forward_passes
         << " pass), fixed-tensor error " << arith;
  o.check(bitwise, "gamma 0 model path bitwise");
  o.check(st.forward_passes == 1, "gamma 0 skips unconditional pass");
  o.check(zero_bitwise, "gamma 0 arithmetic bitwise");
  o.check(arith < 1e-15, "guided arithmetic");
}

// 8
PsParams random_params(Eigen::Index frames, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PsParams p = PsParams::constant(kBands, frames, 0.0, 0.0);
  for (auto& v : p.iid.reshaped()) v = 30.0 * u(rng);
  for (auto& v : p.ic.reshaped()) v = u(rng);
  return p;
}

Eigen::MatrixXd gaussian_pool(Eigen::Index n, const Eigen::VectorXd& mu, const Eigen::VectorXd& sd, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(n, mu.size());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index d = 0; d < mu.size(); ++d) x(i, d) = mu[d] + sd[d] * g(rng);
  return x;
}

void metrics(Outcome& o) {
  const PsParams truth = random_params(40, 1);
  std::vector<PsParams> samples;
  for (unsigned k = 0; k < 16; ++k) samples.push_back(random_params(40, 50 + k));
  bool monotone = true;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= samples.size(); ++k) {
    const double e = e_min(truth, {samples.begin(), samples.begin() + static_cast<long>(k)});
    monotone = monotone && e <= prev;
    prev = e;
  }
  samples.insert(samples.begin() + 7, truth);
  const double with_truth = e_min(truth, samples);

  const Eigen::MatrixXd pool = frame_pool({random_params(300, 2), random_params(200, 3)});
  const double self = frechet(pool, pool);

  Eigen::VectorXd mu_a(68), mu_b(68), sd_a(68), sd_b(68);
  for (Eigen::Index i = 0; i < 68; ++i) {
    mu_a[i] = 0.05 * static_cast<double>(i % 5);
    mu_b[i] = -0.04 * static_cast<double>(i % 3);
    sd_a[i] = 0.5 + 0.02 * static_cast<double>(i);
    sd_b[i] = 1.5 - 0.01 * static_cast<double>(i);
  }
  const double expect = (mu_a - mu_b).squaredNorm() + (sd_a - sd_b).squaredNorm();
  const double got = frechet(gaussian_pool(10000, mu_a, sd_a, 5), gaussian_pool(10000, mu_b, sd_b, 6));
  const double rel = std::abs(got / expect - 1.0);
  o.info << "E_min with truth " << with_truth << ", monotone in K " << (monotone ? "yes" : "no") << ", D_F self "
         << self << ", Gaussian D_F " << got << " vs " << expect << " (rel " << rel << ")";
  o.check(with_truth == 0.0, "E_min = 0 with truth");
  o.check(monotone, "E_min non-increasing in K");
  o.check(self < 1e-6, "self-distance < 1e-6");
  o.check(rel <= 0.02, "closed form within 2%");
}

// 9
void nn_exact(Outcome& o) {
  std::mt19937_64 rng(1);
  std::lognormal_distribution<double> ln(0.0, 1.0);
  Eigen::MatrixXd keys(kBands, 50000), values(2 * kBands, 50000);
  for (auto& v : keys.reshaped()) v = ln(rng);
  for (auto& v : values.reshaped()) v = ln(rng);
  const NnIndex index(keys, values);
  int agree = 0;
  for (int t = 0; t < 1000; ++t) {
    Eigen::VectorXd q(kBands);
    for (auto& v : q) v = ln(rng);
    if (index.nearest(q) == index.nearest_brute(q)) ++agree;
  }
  Eigen::Index stored_ok = 0;
  for (Eigen::Index i = 0; i < index.size(); ++i) {
    if (index.query(index.keys().col(i)) == index.values().col(i)) ++stored_ok;
  }
  o.info << agree << "/1000 queries agree with brute force, " << stored_ok << "/" << index.size()
         << " stored keys exact";
  o.check(agree == 1000, "100% agreement");
  o.check(stored_ok == index.size(), "stored keys return stored values");
}

// 10
void speed_ordering(Outcome& o) {
  const AudioBuffer mono = AudioBuffer::mono(test::white_noise(5 * 44100, 21));
  cli::BenchSetup setup;
  setup.toy = true;
  setup.repeats = 3;
  setup.seed = 1;
  const std::vector<Generator> gens{Generator::kDecorr, Generator::kReg, Generator::kNn, Generator::kMtm,
                                    Generator::kAr};
  const std::vector<cli::BenchRow> rows = cli::run_bench(mono, gens, setup, bands());
  const int frames = ModelConfig::toy(Regime::kMtm).frames;
  for (const cli::BenchRow& r : rows) o.info << r.approach << ' ' << r.gen_seconds << " s, ";
  const double ratio = static_cast<double>(rows[4].forward_passes) / static_cast<double>(rows[3].forward_passes);
  const double ar_over_mtm = rows[4].gen_seconds / rows[3].gen_seconds;
  o.info << "AR/MTM time " << ar_over_mtm << ", passes " << rows[4].forward_passes << "/" << rows[3].forward_passes
         << " = " << ratio << " at " << frames << "-frame patches";
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    o.check(rows[i - 1].gen_seconds < rows[i].gen_seconds, rows[i - 1].approach + " < " + rows[i].approach);
  }
  o.check(ar_over_mtm >= 3.0, "AR >= 3x MTM");
  o.check(frames >= 40, "patches >= 40 frames");
  o.check(ratio >= 10.0, "AR/MTM pass ratio >= 10");
}

// 11
void decorr_baseline(Outcome& o) {
  const Eigen::VectorXd x = test::white_noise(6 * 44100, 3);
  const IcProfile profile = IcProfile::defaults(bands());
  const PsParams p = encode_audio(decorr_upmix(AudioBuffer::mono(x), profile, bands()), bands());
  double worst_iid = 0.0, worst_ic = 0.0;
  const Eigen::Index lo = 4, hi = p.frames() - 4;  // zero-padded edge frames
  for (int b = 0; b < kBands; ++b) {
    std::vector<double> iid, ic;
    for (Eigen::Index j = lo; j < hi; ++j) {
      iid.push_back(std::abs(p.iid(b, j)));
      ic.push_back(p.ic(b, j));
    }
    worst_iid = std::max(worst_iid, test::median(iid));
    worst_ic = std::max(worst_ic, std::abs(test::median(ic) - profile.target_ic[static_cast<std::size_t>(b)]));
  }
  o.info << "worst band median |IID| " << worst_iid << " dB, worst IC median deviation " << worst_ic;
  o.check(worst_iid < 1.0, "|IID| median < 1 dB");
  o.check(worst_ic <= 0.15, "IC within 0.15");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"codec round trip", codec_round_trip},
      {"analytic encoder cases", analytic_encoder},
      {"pass-through identity", pass_through},
      {"gradient checks", gradient_checks},
      {"memorization", memorization},
      {"MTM schedule and termination", mtm_schedule},
      {"classifier-free guidance", cfg_guidance},
      {"metrics", metrics},
      {"NN exactness", nn_exact},
      {"relative speed ordering", speed_ordering},
      {"decorrelation baseline", decorr_baseline},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    const auto t0 = clk::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.info << " [exception: " << e.what() << "]";
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.info.str() << " ("
              << seconds_since(t0) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}

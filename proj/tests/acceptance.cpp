// Acceptance suite: one self-contained check per criterion, one PASS/FAIL
// line each, nonzero exit if anything fails. Heavier than the unit tests;
// the full-scale training runs live here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "avdet/corpus.hpp"
#include "avdet/eval.hpp"
#include "avdet/model.hpp"
#include "avdet/tensor_io.hpp"
#include "avdet/train.hpp"
#include "oracles.hpp"

using namespace avd;

namespace {

namespace fs = std::filesystem;

struct Check {
  int id;
  const char* name;
  std::function<bool(std::string&)> run;
};

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "avdet_acceptance";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double wall_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// Extracts the raw serialized bytes of every frozen tensor in a checkpoint.
std::string frozen_bytes(const fs::path& ckpt) {
  std::ifstream is(ckpt, std::ios::binary);
  char magic[4];
  read_exact(is, magic, 4);
  const std::uint32_t cfg_len = read_u32(is);
  std::string cfg(cfg_len, '\0');
  read_exact(is, cfg.data(), cfg_len);
  const std::uint32_t count = read_u32(is);
  std::string out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = read_u16(is);
    std::string name(name_len, '\0');
    read_exact(is, name.data(), name_len);
    const std::uint8_t frozen = read_u8(is);
    const auto start = is.tellg();
    read_tensor(is);
    const auto end = is.tellg();
    if (frozen) {
      is.seekg(start);
      std::string blob(static_cast<std::size_t>(end - start), '\0');
      read_exact(is, blob.data(), blob.size());
      out += name;
      out += blob;
    }
  }
  return out;
}

// The criterion-5 workload, reused by the determinism criterion.
struct BigRunResult {
  double accuracy = 0.0;
  double auc = 0.0;
  double seconds = 0.0;
  fs::path checkpoint;
  fs::path loss_log;
};

BigRunResult big_run(const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  corpus::GenConfig gen;  // defaults: T=25, 0.95/0.6, noise 0.05, feature mode
  const auto train_clips = corpus::generate_corpus(2000, 11, gen);
  const auto test_clips = corpus::generate_corpus(400, 12, gen);

  model::ModelConfig mc;
  mc.t = 25;
  mc.latent = 64;
  mc.head_mode = model::HeadMode::FourClass;
  model::Model m = model::Model::init(mc, 42);

  train::TrainConfig tc;  // paper defaults: lr 1e-4, batch 32
  tc.epochs = 20;
  tc.seed = 42;
  tc.workers = 4;
  const auto res = train::train(m, train_clips, tc, dir);

  eval::EvalOptions opts;
  opts.workers = 4;
  const auto report = eval::run_eval(m, test_clips, opts);

  BigRunResult out;
  out.accuracy = report.accuracy;
  out.auc = report.auc;
  out.seconds = wall_since(t0);
  out.checkpoint = res.final_checkpoint;
  out.loss_log = res.loss_log;
  return out;
}

// ---- criteria -------------------------------------------------------------

bool c1_gradient_oracle(std::string& detail) {
  const auto report = train::gradcheck(8, 16, 2, 7);
  detail = "max rel err " + fmt(report.max_rel_err) + ", " +
           std::to_string(report.coords_checked) + " coords, " + fmt(report.seconds) + " s";
  return report.max_rel_err < 1e-4 && report.seconds < 60.0;
}

bool c2_normalization_laws(std::string& detail) {
  corpus::GenConfig gen;
  gen.t = 8;
  model::ModelConfig mc;
  mc.t = 8;
  mc.latent = 16;
  mc.enc_hidden = 16;
  mc.mlp_hidden = 32;
  mc.head_mode = model::HeadMode::FourClass;

  double worst_row = 0.0, worst_sym = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto m = model::Model::init(mc, 1000 + trial);
    const auto clip = corpus::generate_clip(mix_seed(2000, trial),
                                            static_cast<corpus::ClipLabel>(trial % 4), gen);
    NoGradGuard guard;
    const auto out = m.forward(m.prepare(clip));
    for (const Tensor* mt : {&out.aligned.att_a, &out.aligned.att_v, &out.pooled.m_av,
                             &out.pooled.m_a, &out.pooled.m_v})
      for (int i = 0; i < mc.t; ++i) {
        double s = 0.0;
        for (int j = 0; j < mc.t; ++j) s += mt->at(i, j);
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    for (const Tensor* g : {&out.pooled.gram_a, &out.pooled.gram_v})
      for (int i = 0; i < mc.t; ++i)
        for (int j = 0; j < mc.t; ++j)
          worst_sym = std::max(worst_sym, std::abs(g->at(i, j) - g->at(j, i)));
  }
  detail = "row-sum err " + fmt(worst_row) + ", symmetry err " + fmt(worst_sym);
  return worst_row < 1e-12 && worst_sym < 1e-12;
}

bool c3_loss_decomposition(std::string& detail) {
  corpus::GenConfig gen;
  gen.t = 8;
  const auto clips = corpus::generate_corpus(32, 21, gen);
  model::ModelConfig mc;
  mc.t = 8;
  mc.latent = 16;
  mc.enc_hidden = 16;
  mc.mlp_hidden = 32;
  mc.head_mode = model::HeadMode::FourClass;
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 8;
  tc.seed = 17;
  const auto dir = work_dir() / "c3";
  auto m = model::Model::init(mc, 8);
  const auto res = train::train(m, clips, tc, dir);

  std::ifstream log(res.loss_log);
  long step;
  double lr, total, lav, la, lv, worst = 0.0;
  long rows = 0;
  while (log >> step >> lr >> total >> lav >> la >> lv) {
    worst = std::max(worst, std::abs(total - (0.8 * lav + 0.1 * la + 0.1 * lv)));
    ++rows;
  }
  if (rows == 0) {
    detail = "no logged steps";
    return false;
  }

  // lambda_a = lambda_v = 0: unimodal head gradients exactly zero
  model::ModelConfig mz = mc;
  mz.lambda_a = 0.0;
  mz.lambda_v = 0.0;
  auto m0 = model::Model::init(mz, 8);
  std::vector<model::ForwardOut> outs;
  std::vector<corpus::ClipLabel> labels;
  for (int i = 0; i < 8; ++i) {
    outs.push_back(m0.forward(m0.prepare(clips[static_cast<std::size_t>(i)])));
    labels.push_back(clips[static_cast<std::size_t>(i)].label);
  }
  m0.total_loss(outs, labels).total.backward();
  bool zero_ok = true;
  for (const auto& p : m0.named_params())
    if (p.name.rfind("head_a.", 0) == 0 || p.name.rfind("head_v.", 0) == 0) {
      if (!p.tensor.has_grad()) {
        zero_ok = false;
        continue;
      }
      for (double g : p.tensor.grad()) zero_ok = zero_ok && g == 0.0;
    }
  detail = "decomposition err " + fmt(worst) + " over " + std::to_string(rows) +
           " steps, zero-lambda grads " + (zero_ok ? "exact" : "NONZERO");
  return worst < 1e-12 && zero_ok;
}

bool c4_frozen_fau(std::string& detail) {
  corpus::GenConfig gen;
  gen.t = 8;
  const auto clips = corpus::generate_corpus(64, 33, gen);
  model::ModelConfig mc;
  mc.t = 8;
  mc.latent = 16;
  mc.enc_hidden = 16;
  mc.mlp_hidden = 32;
  mc.head_mode = model::HeadMode::FourClass;
  train::TrainConfig tc;  // full 50-epoch run at the paper defaults
  tc.epochs = 50;
  tc.batch = 32;
  tc.seed = 29;
  const auto dir = work_dir() / "c4";
  auto m = model::Model::init(mc, 12);
  const auto res = train::train(m, clips, tc, dir);

  const std::string before = frozen_bytes(res.initial_checkpoint);
  const std::string after = frozen_bytes(res.final_checkpoint);
  detail = std::to_string(before.size()) + " frozen bytes, " + std::to_string(res.steps) +
           " steps";
  return !before.empty() && before == after;
}

BigRunResult g_first_big_run;

bool c5_synthetic_separability(std::string& detail) {
  g_first_big_run = big_run(work_dir() / "c5");
  detail = "acc " + fmt(g_first_big_run.accuracy) + " (>=0.95), auc " + fmt(g_first_big_run.auc) +
           " (>=0.99), " + fmt(g_first_big_run.seconds) + " s (<=600)";
  return g_first_big_run.accuracy >= 0.95 && g_first_big_run.auc >= 0.99 &&
         g_first_big_run.seconds <= 600.0;
}

bool c6_correlation_direction(std::string& detail) {
  corpus::GenConfig gen;  // defaults
  std::vector<corpus::AVClip> clips;
  for (int i = 0; i < 500; ++i) {
    clips.push_back(corpus::generate_clip(mix_seed(61, i), corpus::ClipLabel::RealAudioRealVideo, gen));
    clips.push_back(corpus::generate_clip(mix_seed(62, i), corpus::ClipLabel::RealAudioFakeVideo, gen));
  }
  const auto report = eval::analyze_correlation(clips);
  detail = "real " + fmt(report.cosine_real_mean) + " vs fake " + fmt(report.cosine_fake_mean) +
           ", separation " + fmt(report.separation_se) + " se (>=5)";
  return report.cosine_real_mean > report.cosine_fake_mean && report.separation_se >= 5.0;
}

bool c7_auc_oracle(std::string& detail) {
  Rng rng(47);
  long checked = 0;
  for (int it = 0; it < 1000; ++it) {
    const int n = 2 + static_cast<int>(rng.next_u64() % 199);
    std::vector<double> scores;
    std::vector<int> labels;
    bool has0 = false, has1 = false;
    for (int i = 0; i < n; ++i) {
      // half the instances use heavily tied scores
      scores.push_back(it % 2 == 0 ? std::floor(rng.uniform() * 6.0) / 6.0 : rng.uniform());
      labels.push_back(static_cast<int>(rng.next_u64() % 2));
      has0 = has0 || labels.back() == 0;
      has1 = has1 || labels.back() == 1;
    }
    if (!has0) labels[0] = 0;
    if (!has1) labels[static_cast<std::size_t>(n - 1)] = 1;
    if (eval::auc(scores, labels) != oracle::auc_ref(scores, labels)) {
      detail = "mismatch in instance " + std::to_string(it);
      return false;
    }
    ++checked;
  }
  detail = std::to_string(checked) + " instances, exact equality";
  return true;
}

bool c8_mel_frontend(std::string& detail) {
  audio::Waveform silence;
  silence.samples.assign(16000, 0.0f);
  const auto mel_silence = audio::log_mel(silence);
  if (mel_silence.grid.rows() != 80 || mel_silence.grid.cols() != 100) {
    detail = "silence grid is " + shape_str(mel_silence.grid.shape());
    return false;
  }
  for (double v : mel_silence.grid.data())
    if (v != audio::kLogFloor) {
      detail = "silence entry " + fmt(v) + " != -10";
      return false;
    }

  audio::Waveform tone;
  tone.samples.resize(16000);
  for (int i = 0; i < 16000; ++i)
    tone.samples[static_cast<std::size_t>(i)] =
        static_cast<float>(std::sin(2.0 * 3.14159265358979323846 * 1000.0 * i / 16000.0));
  const auto mel_tone = audio::log_mel(tone);
  int best = 0;
  double best_sum = -1e300;
  for (int m = 0; m < 80; ++m) {
    double s = 0.0;
    for (int f = 0; f < 100; ++f) s += mel_tone.grid.at(m, f);
    if (s > best_sum) {
      best_sum = s;
      best = m;
    }
  }
  double left, right;
  audio::mel_band_edges(audio::kNfft, 16000, audio::kMelBands, best, &left, &right);
  detail = "80x100, floor exact, tone band " + std::to_string(best) + " covers [" + fmt(left) +
           ", " + fmt(right) + "] Hz";
  return left < 1000.0 && 1000.0 < right;
}

bool c9_perturbation_identity(std::string& detail) {
  corpus::GenConfig gen;
  gen.t = 25;
  gen.mode = corpus::ClipMode::Raw;
  const auto clips = corpus::generate_corpus(160, 71, gen);

  for (const auto& clip : clips)
    for (int k = 0; k < eval::kPerturbKinds; ++k) {
      const auto out = eval::perturb(clip, static_cast<eval::PerturbKind>(k), 0);
      if (out.video.data() != clip.video.data() || out.fau.data() != clip.fau.data() ||
          out.waveform.samples != clip.waveform.samples) {
        detail = "level 0 changed a clip under kind " + std::to_string(k);
        return false;
      }
    }

  // short raw-mode training run, then the grid: level 0 must equal clean exactly
  model::ModelConfig mc;
  mc.t = 25;
  mc.latent = 32;
  mc.enc_hidden = 32;
  mc.mlp_hidden = 64;
  mc.mode = corpus::ClipMode::Raw;
  mc.head_mode = model::HeadMode::Binary;
  train::TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 5;
  tc.workers = 4;
  const auto dir = work_dir() / "c9";
  auto m = model::Model::init(mc, 15);
  train::train(m, clips, tc, dir);

  eval::EvalOptions opts;
  opts.perturbation_grid = true;
  opts.workers = 4;
  const auto report = eval::run_eval(m, clips, opts);
  for (int k = 0; k < eval::kPerturbKinds; ++k)
    if (report.perturbation_grid[static_cast<std::size_t>(k)][0] != report.auc) {
      detail = "grid level-0 auc differs from clean auc for kind " + std::to_string(k);
      return false;
    }
  detail = "160 clips x 6 kinds bit-identical; grid level-0 auc == clean auc (" +
           fmt(report.auc) + ")";
  return true;
}

bool c10_determinism(std::string& detail) {
  if (g_first_big_run.loss_log.empty())  // standalone invocation: run criterion 5's workload first
    g_first_big_run = big_run(work_dir() / "c5");
  const auto second = big_run(work_dir() / "c10");
  const std::string ckpt_a = slurp(g_first_big_run.checkpoint);
  const std::string ckpt_b = slurp(second.checkpoint);
  const std::string log_a = slurp(g_first_big_run.loss_log);
  const std::string log_b = slurp(second.loss_log);
  detail = std::to_string(ckpt_a.size()) + " checkpoint bytes, " + std::to_string(log_a.size()) +
           " log bytes compared";
  return !ckpt_a.empty() && ckpt_a == ckpt_b && !log_a.empty() && log_a == log_b;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Check> checks = {
      {1, "gradient-oracle", c1_gradient_oracle},
      {2, "normalization-laws", c2_normalization_laws},
      {3, "loss-decomposition", c3_loss_decomposition},
      {4, "frozen-fau-contract", c4_frozen_fau},
      {5, "synthetic-separability", c5_synthetic_separability},
      {6, "correlation-direction", c6_correlation_direction},
      {7, "auc-oracle-equivalence", c7_auc_oracle},
      {8, "mel-frontend", c8_mel_frontend},
      {9, "perturbation-identity", c9_perturbation_identity},
      {10, "determinism", c10_determinism},
  };

  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);

  bool all_ok = true;
  for (const auto& check : checks) {
    if (only != 0 && check.id != only) continue;
    std::string detail;
    bool ok = false;
    try {
      ok = check.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
      ok = false;
    }
    std::printf("[%2d] %-24s %s  (%s)\n", check.id, check.name, ok ? "PASS" : "FAIL",
                detail.c_str());
    std::fflush(stdout);
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 3;
}

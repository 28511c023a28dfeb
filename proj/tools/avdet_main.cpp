// avdet command-line front end: corpus generation, training, evaluation,
// robustness grids, gradient checking and temporal-correlation analysis.
// Exit codes: 0 success, 1 usage/config error, 2 data/format error,
// 3 failed check. Every failure prints one line starting with "error:".

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "avdet/corpus.hpp"
#include "avdet/error.hpp"
#include "avdet/eval.hpp"
#include "avdet/model.hpp"
#include "avdet/train.hpp"

namespace {

constexpr const char* kVersion = "avdet 0.1.0";

using KV = std::vector<std::pair<std::string, std::string>>;

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Flat key=value config file with '#' comments. Flags override the file; the
// file overrides built-in defaults.
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw avd::FormatError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
      line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
    line = line.substr(start);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw avd::FormatError("config file " + path + ": line " + std::to_string(lineno) +
                             " is not key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// Applies file values to options the command line left untouched.
void merge_config(CLI::App& cmd, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    CLI::Option* opt = cmd.get_option_no_throw("--" + key);
    if (!opt) throw avd::ConfigError("config file key '" + key + "' is not a known flag");
    if (opt->count() > 0) continue;  // explicit flag wins
    opt->add_result(value);
    opt->run_callback();
  }
}

void write_manifest(const std::filesystem::path& path, const std::string& command, const KV& fields,
                    double wall_seconds) {
  std::ofstream os(path);
  if (!os) throw avd::FormatError("cannot write manifest " + path.string());
  os << "command=" << command << "\n";
  os << "version=" << kVersion << "\n";
  for (const auto& [k, v] : fields) os << k << "=" << v << "\n";
  os << "wall_seconds=" << fmt_g17(wall_seconds) << "\n";
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

int default_workers() {
  if (const char* env = std::getenv("FF_WORKERS")) {
    const int w = std::atoi(env);
    if (w >= 1) return w;
  }
  return 1;
}

avd::corpus::ClipMode parse_mode(const std::string& mode) {
  if (mode == "feature") return avd::corpus::ClipMode::Feature;
  if (mode == "raw") return avd::corpus::ClipMode::Raw;
  throw avd::UsageError("unknown mode '" + mode + "' (feature|raw)");
}

avd::model::HeadMode parse_head_mode(const std::string& mode) {
  if (mode == "binary") return avd::model::HeadMode::Binary;
  if (mode == "fourclass") return avd::model::HeadMode::FourClass;
  throw avd::UsageError("unknown head mode '" + mode + "' (binary|fourclass)");
}

int run_guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const avd::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const avd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const avd::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"audio-visual forgery detection testbed"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // ---- generate ----
  auto* gen_cmd = app.add_subcommand("generate", "synthesize a labeled corpus");
  std::string gen_out, gen_mode = "feature", gen_config;
  int gen_count = 400, gen_t = 25;
  std::uint64_t gen_seed = 1;
  double gen_rho_real = 0.95, gen_rho_fake = 0.6, gen_noise = 0.05;
  gen_cmd->add_option("--out", gen_out, "corpus file to write")->required();
  gen_cmd->add_option("--count", gen_count, "number of clips");
  gen_cmd->add_option("--mode", gen_mode, "feature|raw");
  gen_cmd->add_option("--seed", gen_seed, "corpus seed");
  gen_cmd->add_option("--t", gen_t, "frames per clip");
  gen_cmd->add_option("--rho-real", gen_rho_real, "authentic-stream smoothness");
  gen_cmd->add_option("--rho-fake", gen_rho_fake, "forged-stream smoothness");
  gen_cmd->add_option("--noise", gen_noise, "coupling noise sigma");
  gen_cmd->add_option("--config", gen_config, "key=value config file");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a detector on a corpus");
  std::string tr_corpus, tr_out, tr_head = "binary", tr_config;
  int tr_epochs = 50, tr_batch = 32, tr_latent = 512, tr_enc_hidden = 64, tr_mlp_hidden = 512;
  int tr_workers = default_workers();
  double tr_lr = 1e-4, tr_lav = 0.8, tr_la = 0.1, tr_lv = 0.1, tr_wd = 1e-4;
  std::uint64_t tr_seed = 1;
  train_cmd->add_option("--corpus", tr_corpus, "training corpus")->required();
  train_cmd->add_option("--out", tr_out, "output directory")->required();
  train_cmd->add_option("--epochs", tr_epochs, "training epochs");
  train_cmd->add_option("--batch", tr_batch, "mini-batch size");
  train_cmd->add_option("--lr", tr_lr, "initial learning rate");
  train_cmd->add_option("--lambda-av", tr_lav, "multimodal loss weight");
  train_cmd->add_option("--lambda-a", tr_la, "audio loss weight");
  train_cmd->add_option("--lambda-v", tr_lv, "video loss weight");
  train_cmd->add_option("--head-mode", tr_head, "binary|fourclass");
  train_cmd->add_option("--seed", tr_seed, "training seed");
  train_cmd->add_option("--latent", tr_latent, "latent width L");
  train_cmd->add_option("--enc-hidden", tr_enc_hidden, "encoder hidden width");
  train_cmd->add_option("--mlp-hidden", tr_mlp_hidden, "head hidden width");
  train_cmd->add_option("--weight-decay", tr_wd, "decoupled weight decay");
  train_cmd->add_option("--workers", tr_workers, "feature-preparation workers");
  train_cmd->add_option("--config", tr_config, "key=value config file");

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  std::string ev_ckpt, ev_corpus, ev_report;
  int ev_workers = default_workers();
  eval_cmd->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--corpus", ev_corpus, "evaluation corpus")->required();
  eval_cmd->add_option("--report", ev_report, "report file to write")->required();
  eval_cmd->add_option("--workers", ev_workers, "evaluation workers");

  // ---- perturb-eval ----
  auto* pert_cmd = app.add_subcommand("perturb-eval", "robustness grid over perturbations");
  std::string pe_ckpt, pe_corpus, pe_report;
  int pe_workers = default_workers();
  pert_cmd->add_option("--checkpoint", pe_ckpt, "model checkpoint")->required();
  pert_cmd->add_option("--corpus", pe_corpus, "raw-mode corpus")->required();
  pert_cmd->add_option("--report", pe_report, "report file to write")->required();
  pert_cmd->add_option("--workers", pe_workers, "evaluation workers");

  // ---- gradcheck ----
  auto* grad_cmd = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients");
  int gc_t = 8, gc_l = 16, gc_batch = 2;
  std::uint64_t gc_seed = 7;
  double gc_tolerance = 1e-4;
  grad_cmd->add_option("--t", gc_t, "frames");
  grad_cmd->add_option("--l", gc_l, "latent width");
  grad_cmd->add_option("--batch", gc_batch, "clips in the check batch");
  grad_cmd->add_option("--seed", gc_seed, "seed");
  grad_cmd->add_option("--tolerance", gc_tolerance, "max relative error allowed");

  // ---- analyze-correlation ----
  auto* corr_cmd = app.add_subcommand("analyze-correlation",
                                      "temporal FAU consistency, real vs fake video");
  std::string co_corpus, co_report;
  corr_cmd->add_option("--corpus", co_corpus, "corpus to analyze")->required();
  corr_cmd->add_option("--report", co_report, "report file to write")->required();

  // ---- infer ----
  auto* infer_cmd = app.add_subcommand("infer", "score one clip");
  std::string in_ckpt, in_clip;
  int in_index = 0;
  infer_cmd->add_option("--checkpoint", in_ckpt, "model checkpoint")->required();
  infer_cmd->add_option("--clip", in_clip, "corpus file holding the clip")->required();
  infer_cmd->add_option("--index", in_index, "record index within the corpus");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  if (gen_cmd->parsed()) {
    return run_guarded([&] {
      if (!gen_config.empty()) merge_config(*gen_cmd, read_config_file(gen_config));
      Timer timer;
      avd::corpus::GenConfig cfg;
      cfg.t = gen_t;
      cfg.rho_real = gen_rho_real;
      cfg.rho_fake = gen_rho_fake;
      cfg.coupling_noise = gen_noise;
      cfg.mode = parse_mode(gen_mode);
      if (gen_count < 0) throw avd::UsageError("--count must be non-negative");
      const auto clips = avd::corpus::generate_corpus(gen_count, gen_seed, cfg);
      avd::corpus::write_corpus(clips, gen_out, cfg.mode, cfg.t);
      write_manifest(gen_out + ".run.manifest", "generate",
                     {{"out", gen_out},
                      {"count", std::to_string(gen_count)},
                      {"mode", gen_mode},
                      {"t", std::to_string(gen_t)},
                      {"rho_real", fmt_g17(gen_rho_real)},
                      {"rho_fake", fmt_g17(gen_rho_fake)},
                      {"noise", fmt_g17(gen_noise)},
                      {"seed", std::to_string(gen_seed)}},
                     timer.seconds());
      std::cout << "wrote " << clips.size() << " clips to " << gen_out << "\n";
      return 0;
    });
  }

  if (train_cmd->parsed()) {
    return run_guarded([&] {
      if (!tr_config.empty()) merge_config(*train_cmd, read_config_file(tr_config));
      Timer timer;
      const auto clips = avd::corpus::read_corpus(tr_corpus);
      if (clips.empty()) throw avd::ConfigError("training corpus is empty");

      avd::model::ModelConfig mc;
      mc.t = clips[0].t;
      mc.latent = tr_latent;
      mc.enc_hidden = tr_enc_hidden;
      mc.mlp_hidden = tr_mlp_hidden;
      mc.head_mode = parse_head_mode(tr_head);
      mc.lambda_av = tr_lav;
      mc.lambda_a = tr_la;
      mc.lambda_v = tr_lv;
      mc.mode = clips[0].mode;
      if (mc.mode == avd::corpus::ClipMode::Feature) mc.video_feature_dim = clips[0].video.cols();

      avd::train::TrainConfig tc;
      tc.lr0 = tr_lr;
      tc.batch = tr_batch;
      tc.epochs = tr_epochs;
      tc.weight_decay = tr_wd;
      tc.seed = tr_seed;
      tc.workers = tr_workers;

      avd::model::Model m = avd::model::Model::init(mc, tr_seed);
      const auto result = avd::train::train(m, clips, tc, tr_out);
      write_manifest(std::filesystem::path(tr_out) / "run.manifest", "train",
                     {{"corpus", tr_corpus},
                      {"out", tr_out},
                      {"epochs", std::to_string(tr_epochs)},
                      {"batch", std::to_string(tr_batch)},
                      {"lr", fmt_g17(tr_lr)},
                      {"lambda_av", fmt_g17(tr_lav)},
                      {"lambda_a", fmt_g17(tr_la)},
                      {"lambda_v", fmt_g17(tr_lv)},
                      {"head_mode", tr_head},
                      {"latent", std::to_string(tr_latent)},
                      {"enc_hidden", std::to_string(tr_enc_hidden)},
                      {"mlp_hidden", std::to_string(tr_mlp_hidden)},
                      {"weight_decay", fmt_g17(tr_wd)},
                      {"seed", std::to_string(tr_seed)},
                      {"steps", std::to_string(result.steps)},
                      {"best_val_accuracy", fmt_g17(result.best_val_accuracy)},
                      {"note", "optimizer: decoupled-weight-decay adaptive moments"}},
                     timer.seconds());
      std::cout << "trained " << result.steps << " steps; final checkpoint "
                << result.final_checkpoint.string() << "\n";
      return 0;
    });
  }

  if (eval_cmd->parsed()) {
    return run_guarded([&] {
      Timer timer;
      const auto m = avd::model::Model::load(ev_ckpt);
      const auto clips = avd::corpus::read_corpus(ev_corpus);
      avd::eval::EvalOptions opts;
      opts.workers = ev_workers;
      const auto report = avd::eval::run_eval(m, clips, opts);
      avd::eval::write_report(report, ev_report);
      write_manifest(ev_report + ".run.manifest", "eval",
                     {{"checkpoint", ev_ckpt}, {"corpus", ev_corpus}, {"report", ev_report}},
                     timer.seconds());
      std::cout << "n=" << report.n_samples << " accuracy=" << fmt_g17(report.accuracy)
                << " auc=" << fmt_g17(report.auc) << "\n";
      return 0;
    });
  }

  if (pert_cmd->parsed()) {
    return run_guarded([&] {
      Timer timer;
      const auto m = avd::model::Model::load(pe_ckpt);
      const auto clips = avd::corpus::read_corpus(pe_corpus);
      avd::eval::EvalOptions opts;
      opts.perturbation_grid = true;
      opts.workers = pe_workers;
      const auto report = avd::eval::run_eval(m, clips, opts);
      avd::eval::write_report(report, pe_report);
      avd::eval::write_grid_tsv(report, pe_report + ".grid.tsv");
      write_manifest(pe_report + ".run.manifest", "perturb-eval",
                     {{"checkpoint", pe_ckpt}, {"corpus", pe_corpus}, {"report", pe_report}},
                     timer.seconds());
      std::cout << "clean auc=" << fmt_g17(report.auc) << "; grid written to " << pe_report
                << ".grid.tsv\n";
      return 0;
    });
  }

  if (grad_cmd->parsed()) {
    return run_guarded([&] {
      Timer timer;
      const auto report = avd::train::gradcheck(gc_t, gc_l, gc_batch, gc_seed);
      write_manifest("avdet-gradcheck.run.manifest", "gradcheck",
                     {{"t", std::to_string(gc_t)},
                      {"l", std::to_string(gc_l)},
                      {"batch", std::to_string(gc_batch)},
                      {"seed", std::to_string(gc_seed)},
                      {"max_rel_err", fmt_g17(report.max_rel_err)},
                      {"coords", std::to_string(report.coords_checked)}},
                     timer.seconds());
      std::cout << "checked " << report.coords_checked << " coordinates in "
                << fmt_g17(report.seconds) << " s; max relative error "
                << fmt_g17(report.max_rel_err) << " (" << report.worst_param << ")\n";
      if (report.max_rel_err >= gc_tolerance) {
        std::cerr << "error: gradient check failed: " << fmt_g17(report.max_rel_err) << " >= "
                  << fmt_g17(gc_tolerance) << "\n";
        return 3;
      }
      std::cout << "gradcheck passed\n";
      return 0;
    });
  }

  if (corr_cmd->parsed()) {
    return run_guarded([&] {
      Timer timer;
      const auto clips = avd::corpus::read_corpus(co_corpus);
      const auto report = avd::eval::analyze_correlation(clips);
      avd::eval::write_correlation_report(report, co_report);
      write_manifest(co_report + ".run.manifest", "analyze-correlation",
                     {{"corpus", co_corpus}, {"report", co_report}}, timer.seconds());
      std::cout << "cosine real=" << fmt_g17(report.cosine_real_mean)
                << " fake=" << fmt_g17(report.cosine_fake_mean)
                << " separation=" << fmt_g17(report.separation_se) << " se\n";
      return 0;
    });
  }

  if (infer_cmd->parsed()) {
    return run_guarded([&] {
      Timer timer;
      const auto m = avd::model::Model::load(in_ckpt);
      const auto clips = avd::corpus::read_corpus(in_clip);
      if (in_index < 0 || static_cast<std::size_t>(in_index) >= clips.size())
        throw avd::UsageError("--index " + std::to_string(in_index) + " outside corpus of " +
                              std::to_string(clips.size()) + " clips");
      const auto probs = m.infer(clips[static_cast<std::size_t>(in_index)]);
      int pred = 0;
      for (std::size_t c = 1; c < probs.size(); ++c)
        if (probs[c] > probs[static_cast<std::size_t>(pred)]) pred = static_cast<int>(c);
      static const char* kFourNames[4] = {"rarv", "farv", "rafv", "fafv"};
      static const char* kBinNames[2] = {"real", "fake"};
      std::cout << "fake_score=" << fmt_g17(m.fake_score(probs)) << "\n";
      std::cout << "class="
                << (probs.size() == 4 ? kFourNames[pred] : kBinNames[pred]) << "\n";
      for (std::size_t c = 0; c < probs.size(); ++c)
        std::cout << "p_" << (probs.size() == 4 ? kFourNames[c] : kBinNames[c]) << "="
                  << fmt_g17(probs[c]) << "\n";
      write_manifest(in_clip + ".infer.run.manifest", "infer",
                     {{"checkpoint", in_ckpt},
                      {"clip", in_clip},
                      {"index", std::to_string(in_index)}},
                     timer.seconds());
      return 0;
    });
  }

  std::cerr << "error: no command\n";
  return 1;
}

#include "avdet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "avdet/error.hpp"
#include "avdet/rng.hpp"

namespace avd::train {

namespace {

constexpr const char* kOptimizerNote =
    "optimizer: decoupled-weight-decay adaptive moments (projection-free substitute)";

void shuffle_indices(std::vector<std::size_t>& idx, Rng rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = rng.next_u64() % i;
    std::swap(idx[i - 1], idx[j]);
  }
}

// Index-deterministic parallel map used for feature preparation.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t chunk = (n + workers - 1) / static_cast<std::size_t>(workers);
  for (int w = 0; w < workers; ++w) {
    const std::size_t lo = static_cast<std::size_t>(w) * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

double val_accuracy(const model::Model& m, const std::vector<model::PreparedClip>& prepared,
                    const std::vector<std::size_t>& val_idx) {
  if (val_idx.empty()) return 0.0;
  NoGradGuard guard;
  long correct = 0;
  for (std::size_t i : val_idx) {
    const model::ForwardOut out = m.forward(prepared[i]);
    const std::vector<double> probs = softmax_vec(out.scores.s_av.data());
    int pred = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
      if (probs[c] > probs[pred]) pred = static_cast<int>(c);
    const int want = m.config().head_mode == model::HeadMode::FourClass
                         ? static_cast<int>(prepared[i].label)
                         : model::binary_label(prepared[i].label);
    if (pred == want) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(val_idx.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (lr0 <= 0.0) throw ConfigError("train: learning rate must be positive");
  if (batch < 1) throw ConfigError("train: batch size must be at least 1");
  if (epochs < 1) throw ConfigError("train: need at least one epoch");
  if (poly_power <= 0.0) throw ConfigError("train: poly power must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: negative weight decay");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("train: bad validation fraction");
}

double poly_lr(long step, long total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) throw ConfigError("poly_lr: total step count must be positive");
  if (step < 0 || step > total_steps)
    throw UsageError("poly_lr: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps),
                            cfg.poly_power);
}

AdamW::AdamW(const std::vector<model::NamedParam>& params, double weight_decay)
    : weight_decay_(weight_decay) {
  for (const model::NamedParam& p : params) {
    if (p.frozen) continue;
    Slot s;
    s.param = p;
    s.m.assign(p.tensor.size(), 0.0);
    s.v.assign(p.tensor.size(), 0.0);
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
  for (Slot& s : slots_) {
    Tensor& t = s.param.tensor;
    if (!t.has_grad())
      throw TrainingError("optimizer: missing gradient for learnable parameter '" + s.param.name +
                          "'");
    auto& theta = t.data();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      s.m[i] = kBeta1 * s.m[i] + (1.0 - kBeta1) * g[i];
      s.v[i] = kBeta2 * s.v[i] + (1.0 - kBeta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay_ * theta[i]);
    }
    t.clear_grad();
  }
}

TrainResult train(model::Model& m, const std::vector<corpus::AVClip>& clips,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  if (clips.empty()) throw ConfigError("train: empty corpus");
  std::filesystem::create_directories(out_dir);

  const std::size_t n = clips.size();
  std::vector<model::PreparedClip> prepared(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) { prepared[i] = m.prepare(clips[i]); });

  // Seeded validation split: shuffle all indices, reserve the tail.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle_indices(idx, Rng(mix_seed(cfg.seed, 0x76616C6964ull)));
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(n) * cfg.val_fraction);
  std::vector<std::size_t> val_idx(idx.end() - static_cast<long>(n_val), idx.end());
  std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<long>(n_val));
  if (train_idx.empty()) throw ConfigError("train: corpus too small for the validation split");

  const long steps_per_epoch =
      static_cast<long>((train_idx.size() + cfg.batch - 1) / static_cast<std::size_t>(cfg.batch));
  const long total_steps = steps_per_epoch * cfg.epochs;

  TrainResult result;
  result.initial_checkpoint = out_dir / "ckpt-init.ffm";
  result.final_checkpoint = out_dir / "ckpt-final.ffm";
  result.best_checkpoint = out_dir / "ckpt-best.ffm";
  result.loss_log = out_dir / "loss.log";
  result.val_log = out_dir / "val.log";

  m.set_note(kOptimizerNote);
  m.save(result.initial_checkpoint);

  std::ofstream loss_log(result.loss_log);
  std::ofstream val_log(result.val_log);
  if (!loss_log || !val_log) throw FormatError("cannot write logs under " + out_dir.string());

  AdamW opt(m.named_params(), cfg.weight_decay);

  // Best-by-validation snapshot (parameter buffers only).
  auto params = m.named_params();
  std::vector<std::vector<double>> best_data;
  double best_acc = -1.0;
  auto snapshot = [&] {
    best_data.clear();
    for (const auto& p : params) best_data.push_back(p.tensor.data());
  };

  long step = 0;
  char line[256];
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    shuffle_indices(order, Rng(mix_seed(cfg.seed, 0x65706F6368ull + static_cast<std::uint64_t>(epoch))));
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch));
      std::vector<model::ForwardOut> outs;
      std::vector<corpus::ClipLabel> labels;
      outs.reserve(end - pos);
      for (std::size_t k = pos; k < end; ++k) {
        outs.push_back(m.forward(prepared[order[k]]));
        labels.push_back(prepared[order[k]].label);
      }
      model::LossBreakdown lb = m.total_loss(outs, labels);
      lb.total.backward();
      const double lr = poly_lr(step, total_steps, cfg);
      opt.step(lr);
      std::snprintf(line, sizeof(line), "%ld\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n", step, lr,
                    lb.total.value(), lb.value_av, lb.value_a, lb.value_v);
      loss_log << line;
      ++step;
    }
    const double acc = val_accuracy(m, prepared, val_idx);
    std::snprintf(line, sizeof(line), "%d\t%.17g\n", epoch, acc);
    val_log << line;
    if (!val_idx.empty() && acc > best_acc) {
      best_acc = acc;
      snapshot();
    }
    result.final_val_accuracy = acc;
  }
  result.steps = step;

  m.save(result.final_checkpoint);
  if (best_data.empty()) {
    // No validation split: best == final.
    m.save(result.best_checkpoint);
    result.best_val_accuracy = result.final_val_accuracy;
  } else {
    std::vector<std::vector<double>> final_data;
    for (const auto& p : params) final_data.push_back(p.tensor.data());
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = best_data[i];
    m.save(result.best_checkpoint);
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = final_data[i];
    result.best_val_accuracy = best_acc;
  }
  return result;
}

GradCheckReport gradcheck(int t, int latent, int batch, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();

  corpus::GenConfig gen;
  gen.t = t;
  model::ModelConfig cfg;
  cfg.t = t;
  cfg.latent = latent;
  cfg.enc_hidden = 16;
  cfg.mlp_hidden = 32;
  cfg.head_mode = model::HeadMode::FourClass;
  model::Model m = model::Model::init(cfg, mix_seed(seed, 0x6D6F64656Cull));

  std::vector<model::PreparedClip> prepared;
  std::vector<corpus::ClipLabel> labels;
  for (int i = 0; i < batch; ++i) {
    const auto label = static_cast<corpus::ClipLabel>(i % 4);
    prepared.push_back(m.prepare(corpus::generate_clip(mix_seed(seed, 100 + i), label, gen)));
    labels.push_back(label);
  }

  const auto loss_value = [&]() {
    std::vector<model::ForwardOut> outs;
    outs.reserve(prepared.size());
    for (const auto& p : prepared) outs.push_back(m.forward(p));
    return m.total_loss(outs, labels).total.value();
  };

  // One analytic pass.
  {
    std::vector<model::ForwardOut> outs;
    for (const auto& p : prepared) outs.push_back(m.forward(p));
    m.total_loss(outs, labels).total.backward();
  }

  GradCheckReport report;
  for (auto& p : m.named_params()) {
    if (p.frozen) continue;
    const std::vector<double> analytic = p.tensor.grad();
    const std::vector<double> numeric = finite_diff_grad(loss_value, p.tensor);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
      const double rel = std::abs(analytic[i] - numeric[i]) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
      ++report.coords_checked;
    }
    p.tensor.clear_grad();
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace avd::train

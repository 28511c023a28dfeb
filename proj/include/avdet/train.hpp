#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avdet/corpus.hpp"
#include "avdet/model.hpp"

namespace avd::train {

struct TrainConfig {
  double lr0 = 1e-4;
  int batch = 32;
  int epochs = 50;
  double poly_power = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  int workers = 1;  // feature preparation only; the optimization loop is serial

  void validate() const;
};

/// lr0 * (1 - step/total_steps)^power.
double poly_lr(long step, long total_steps, const TrainConfig& cfg);

/// Adaptive-moment optimizer with decoupled weight decay (bias-corrected,
/// beta1=0.9, beta2=0.999, eps=1e-8). Frozen parameters are never touched;
/// gradients are cleared after each step.
class AdamW {
 public:
  AdamW(const std::vector<model::NamedParam>& params, double weight_decay);
  void step(double lr);
  long step_count() const { return step_; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  struct Slot {
    model::NamedParam param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double weight_decay_;
  long step_ = 0;
};

struct TrainResult {
  std::filesystem::path initial_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::filesystem::path loss_log;
  std::filesystem::path val_log;
  long steps = 0;
  double best_val_accuracy = 0.0;
  double final_val_accuracy = 0.0;
};

/// Deterministic training loop: seeded per-epoch shuffling, poly learning
/// rate over all steps, a 10% seeded validation split, per-step loss records
/// (step, lr, L_total, L_av, L_a, L_v at 17 significant digits), and initial /
/// final / best-by-validation checkpoints under out_dir.
TrainResult train(model::Model& m, const std::vector<corpus::AVClip>& clips,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  long coords_checked = 0;
  double seconds = 0.0;
};

/// Compares every learnable parameter's analytic gradient against central
/// finite differences (h = 1e-5) on a small synthetic batch. Encoder and head
/// widths are shrunk so the sweep stays in seconds.
GradCheckReport gradcheck(int t, int latent, int batch, std::uint64_t seed);

}  // namespace avd::train

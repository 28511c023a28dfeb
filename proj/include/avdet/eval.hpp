#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "avdet/corpus.hpp"
#include "avdet/model.hpp"

namespace avd::eval {

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
std::vector<std::vector<long>> confusion(const std::vector<int>& preds,
                                         const std::vector<int>& labels, int num_classes);

/// Rank-based (Mann-Whitney) AUC; tied scores contribute half. Needs at least
/// one positive and one negative label.
double auc(const std::vector<double>& scores, const std::vector<int>& binary_labels);

/// Mean cosine similarity between consecutive FAU frame vectors, in [-1, 1].
/// Pairs touching a zero vector are skipped; a clip with no usable pair is a
/// MetricError.
double correlation_intensity(const Tensor& fau);

/// Secondary statistic: lag-1 Pearson autocorrelation averaged over channels.
double lag1_autocorrelation(const Tensor& fau);

enum class PerturbKind {
  GaussianNoise = 0,
  GaussianBlur = 1,
  Contrast = 2,
  Saturation = 3,
  BlockQuantization = 4,  // JPEG surrogate: quantized 4x4 block means
  TemporalDrop = 5,       // video-compression surrogate: drop-and-hold frames
};
inline constexpr int kPerturbKinds = 6;
inline constexpr int kPerturbLevels = 5;
const char* perturb_name(PerturbKind kind);

/// Applies one perturbation at intensity level 0..4 to a raw-mode clip's
/// video stream (audio and the stored FAU track are untouched). Level 0 is
/// the identity, bit-exact.
corpus::AVClip perturb(const corpus::AVClip& clip, PerturbKind kind, int level);

struct EvalOptions {
  bool perturbation_grid = false;  // raw-mode corpora only
  int workers = 1;
};

struct EvalReport {
  std::size_t n_samples = 0;
  double accuracy = 0.0;
  double auc = 0.0;  // binary real-vs-fake from the multimodal head
  std::vector<std::vector<long>> confusion;
  std::vector<double> per_class_recall;
  // perturbation_grid[kind][level], empty unless requested
  std::vector<std::array<double, kPerturbLevels>> perturbation_grid;
};

EvalReport run_eval(const model::Model& m, const std::vector<corpus::AVClip>& clips,
                    const EvalOptions& options = {});

void write_report(const EvalReport& report, const std::filesystem::path& path);
void write_grid_tsv(const EvalReport& report, const std::filesystem::path& path);

struct CorrelationReport {
  long n_real = 0, n_fake = 0;
  double cosine_real_mean = 0.0, cosine_real_std = 0.0;
  double cosine_fake_mean = 0.0, cosine_fake_std = 0.0;
  double lag1_real_mean = 0.0, lag1_fake_mean = 0.0;
  double separation_se = 0.0;  // (real - fake) cosine gap in standard errors
};

/// Groups a corpus by video authenticity and summarizes both temporal
/// consistency statistics.
CorrelationReport analyze_correlation(const std::vector<corpus::AVClip>& clips);
void write_correlation_report(const CorrelationReport& report, const std::filesystem::path& path);

}  // namespace avd::eval

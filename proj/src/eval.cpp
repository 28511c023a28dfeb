#include "avdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "avdet/error.hpp"
#include "avdet/rng.hpp"

namespace avd::eval {

namespace {

constexpr int kSide = corpus::kRawFrameSide;

const double kNoiseStd[4] = {0.02, 0.05, 0.1, 0.2};
const double kBlurSigma[4] = {0.5, 1.0, 1.5, 2.0};
const double kContrastScale[4] = {0.85, 0.7, 0.55, 0.4};
const double kSaturationScale[4] = {0.85, 0.7, 0.55, 0.4};
const double kQuantStep[4] = {8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0, 64.0 / 255.0};
const int kDropEvery[4] = {8, 6, 4, 2};

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / static_cast<std::size_t>(workers);
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

void check_raw(const corpus::AVClip& clip, const char* op) {
  if (clip.mode != corpus::ClipMode::Raw)
    throw UsageError(std::string(op) + ": needs a raw-mode clip (pixels)");
}

// Separable Gaussian blur with replicate padding; the kernel sums to one.
void blur_frame(const double* in, double* out, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    ksum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (double& k : kernel) k /= ksum;

  std::vector<double> tmp(static_cast<std::size_t>(kSide) * kSide);
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xi = std::clamp(x + i, 0, kSide - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * in[y * kSide + xi];
      }
      tmp[static_cast<std::size_t>(y) * kSide + x] = acc;
    }
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yi = std::clamp(y + i, 0, kSide - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(yi) * kSide + x];
      }
      out[y * kSide + x] = acc;
    }
}

struct ScoredCorpus {
  std::vector<double> scores;
  std::vector<int> preds;
  std::vector<int> task_labels;
  std::vector<int> binary_labels;
};

int argmax(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

}  // namespace

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw UsageError("accuracy: need equal, non-empty prediction and label lists");
  long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

std::vector<std::vector<long>> confusion(const std::vector<int>& preds,
                                         const std::vector<int>& labels, int num_classes) {
  if (preds.empty() || preds.size() != labels.size())
    throw UsageError("confusion: need equal, non-empty prediction and label lists");
  std::vector<std::vector<long>> c(static_cast<std::size_t>(num_classes),
                                   std::vector<long>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw LabelError("confusion: class index out of range at row " + std::to_string(i));
    c[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])]++;
  }
  return c;
}

double auc(const std::vector<double>& scores, const std::vector<int>& binary_labels) {
  if (scores.empty() || scores.size() != binary_labels.size())
    throw UsageError("auc: need equal, non-empty score and label lists");
  const std::size_t n = scores.size();
  long pos = 0;
  for (int l : binary_labels) {
    if (l != 0 && l != 1) throw LabelError("auc: labels must be 0 or 1");
    pos += l;
  }
  const long neg = static_cast<long>(n) - pos;
  if (pos == 0 || neg == 0) throw MetricError("auc: needs at least one positive and one negative");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks over tie groups, then the Mann-Whitney U statistic.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (binary_labels[order[k]] == 1) pos_rank_sum += rank;
    i = j;
  }
  const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * (static_cast<double>(pos) + 1.0);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double correlation_intensity(const Tensor& fau) {
  if (fau.rank() != 2 || fau.rows() < 2)
    throw MetricError("correlation_intensity: need a [T x D] sequence with T >= 2");
  const int t = fau.rows(), d = fau.cols();
  const auto& v = fau.data();
  double acc = 0.0;
  long pairs = 0;
  for (int i = 0; i + 1 < t; ++i) {
    const double* a = v.data() + static_cast<std::size_t>(i) * d;
    const double* b = a + d;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int k = 0; k < d; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    if (na == 0.0 || nb == 0.0) continue;  // zero-vector frame: skip the pair
    acc += dot / std::sqrt(na * nb);
    ++pairs;
  }
  if (pairs == 0) throw MetricError("correlation_intensity: no usable frame pair (all-zero clip?)");
  return acc / static_cast<double>(pairs);
}

double lag1_autocorrelation(const Tensor& fau) {
  if (fau.rank() != 2 || fau.rows() < 3)
    throw MetricError("lag1_autocorrelation: need a [T x D] sequence with T >= 3");
  const int t = fau.rows(), d = fau.cols();
  const auto& v = fau.data();
  double acc = 0.0;
  long used = 0;
  for (int k = 0; k < d; ++k) {
    double mx = 0.0, my = 0.0;
    for (int i = 0; i + 1 < t; ++i) {
      mx += v[static_cast<std::size_t>(i) * d + k];
      my += v[static_cast<std::size_t>(i + 1) * d + k];
    }
    mx /= (t - 1);
    my /= (t - 1);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (int i = 0; i + 1 < t; ++i) {
      const double dx = v[static_cast<std::size_t>(i) * d + k] - mx;
      const double dy = v[static_cast<std::size_t>(i + 1) * d + k] - my;
      sxy += dx * dy;
      sxx += dx * dx;
      syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) continue;  // constant channel
    acc += sxy / std::sqrt(sxx * syy);
    ++used;
  }
  if (used == 0) throw MetricError("lag1_autocorrelation: every channel is constant");
  return acc / static_cast<double>(used);
}

const char* perturb_name(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::GaussianNoise: return "gaussian_noise";
    case PerturbKind::GaussianBlur: return "gaussian_blur";
    case PerturbKind::Contrast: return "contrast";
    case PerturbKind::Saturation: return "saturation";
    case PerturbKind::BlockQuantization: return "block_quantization";
    case PerturbKind::TemporalDrop: return "temporal_drop";
  }
  return "?";
}

corpus::AVClip perturb(const corpus::AVClip& clip, PerturbKind kind, int level) {
  check_raw(clip, "perturb");
  if (level < 0 || level >= kPerturbLevels)
    throw UsageError("perturb: level " + std::to_string(level) + " outside 0.." +
                     std::to_string(kPerturbLevels - 1));
  if (level == 0) return clip;  // identity, bit-exact

  const int t = clip.t;
  const std::size_t frame_px = static_cast<std::size_t>(kSide) * kSide;
  corpus::AVClip out = clip;
  Tensor video = Tensor::zeros(clip.video.shape());
  video.data() = clip.video.data();
  auto& v = video.data();
  const int li = level - 1;
  Rng rng(mix_seed(clip.seed, 0x7065727475ull + static_cast<std::uint64_t>(kind) * 16 +
                                  static_cast<std::uint64_t>(level)));

  switch (kind) {
    case PerturbKind::GaussianNoise: {
      for (double& x : v) x += kNoiseStd[li] * rng.normal();
      break;
    }
    case PerturbKind::GaussianBlur: {
      std::vector<double> frame(frame_px);
      for (int f = 0; f < t; ++f) {
        double* p = v.data() + static_cast<std::size_t>(f) * frame_px;
        blur_frame(p, frame.data(), kBlurSigma[li]);
        std::copy(frame.begin(), frame.end(), p);
      }
      break;
    }
    case PerturbKind::Contrast: {
      for (int f = 0; f < t; ++f) {
        double* p = v.data() + static_cast<std::size_t>(f) * frame_px;
        double mean = 0.0;
        for (std::size_t i = 0; i < frame_px; ++i) mean += p[i];
        mean /= static_cast<double>(frame_px);
        for (std::size_t i = 0; i < frame_px; ++i) p[i] = mean + kContrastScale[li] * (p[i] - mean);
      }
      break;
    }
    case PerturbKind::Saturation: {
      // Single-channel stand-in: pull pixel values toward mid-gray.
      for (double& x : v) x = 0.5 + kSaturationScale[li] * (x - 0.5);
      break;
    }
    case PerturbKind::BlockQuantization: {
      const double q = kQuantStep[li];
      for (int f = 0; f < t; ++f) {
        double* p = v.data() + static_cast<std::size_t>(f) * frame_px;
        for (int by = 0; by < kSide; by += 4)
          for (int bx = 0; bx < kSide; bx += 4) {
            double mean = 0.0;
            for (int y = 0; y < 4; ++y)
              for (int x = 0; x < 4; ++x) mean += p[(by + y) * kSide + bx + x];
            mean /= 16.0;
            const double shift = std::round(mean / q) * q - mean;
            for (int y = 0; y < 4; ++y)
              for (int x = 0; x < 4; ++x) p[(by + y) * kSide + bx + x] += shift;
          }
      }
      break;
    }
    case PerturbKind::TemporalDrop: {
      const int every = kDropEvery[li];
      for (int f = 1; f < t; ++f)
        if (f % every == 0)
          std::copy(v.begin() + static_cast<long>(f - 1) * static_cast<long>(frame_px),
                    v.begin() + static_cast<long>(f) * static_cast<long>(frame_px),
                    v.begin() + static_cast<long>(f) * static_cast<long>(frame_px));
      break;
    }
  }
  out.video = video;
  return out;
}

EvalReport run_eval(const model::Model& m, const std::vector<corpus::AVClip>& clips,
                    const EvalOptions& options) {
  if (clips.empty()) throw MetricError("run_eval: empty corpus");
  const std::size_t n = clips.size();
  const bool fourclass = m.config().head_mode == model::HeadMode::FourClass;
  const int num_classes = m.config().num_av_classes();

  ScoredCorpus sc;
  sc.scores.resize(n);
  sc.preds.resize(n);
  sc.task_labels.resize(n);
  sc.binary_labels.resize(n);

  // Audio never changes under perturbation; prepare it once per clip.
  std::vector<Tensor> audio_in(n);
  parallel_for(n, options.workers, [&](std::size_t i) {
    audio_in[i] = m.prepare_audio(audio::log_mel(clips[i].waveform).grid);
    NoGradGuard guard;
    const model::ForwardOut out = m.forward(m.prepare_visual(clips[i], audio_in[i]));
    const std::vector<double> probs = softmax_vec(out.scores.s_av.data());
    sc.scores[i] = m.fake_score(probs);
    sc.preds[i] = argmax(probs);
    sc.task_labels[i] = fourclass ? static_cast<int>(clips[i].label)
                                  : model::binary_label(clips[i].label);
    sc.binary_labels[i] = model::binary_label(clips[i].label);
  });

  EvalReport report;
  report.n_samples = n;
  report.accuracy = accuracy(sc.preds, sc.task_labels);
  report.auc = auc(sc.scores, sc.binary_labels);
  report.confusion = confusion(sc.preds, sc.task_labels, num_classes);
  report.per_class_recall.resize(static_cast<std::size_t>(num_classes), 0.0);
  for (int c = 0; c < num_classes; ++c) {
    long row = 0;
    for (long x : report.confusion[static_cast<std::size_t>(c)]) row += x;
    report.per_class_recall[static_cast<std::size_t>(c)] =
        row == 0 ? 0.0
                 : static_cast<double>(report.confusion[static_cast<std::size_t>(c)]
                                                       [static_cast<std::size_t>(c)]) /
                       static_cast<double>(row);
  }

  if (options.perturbation_grid) {
    report.perturbation_grid.resize(kPerturbKinds);
    for (int k = 0; k < kPerturbKinds; ++k) {
      for (int level = 0; level < kPerturbLevels; ++level) {
        std::vector<double> scores(n);
        parallel_for(n, options.workers, [&](std::size_t i) {
          const corpus::AVClip p = perturb(clips[i], static_cast<PerturbKind>(k), level);
          NoGradGuard guard;
          const model::ForwardOut out = m.forward(m.prepare_visual(p, audio_in[i]));
          scores[i] = m.fake_score(softmax_vec(out.scores.s_av.data()));
        });
        report.perturbation_grid[static_cast<std::size_t>(k)][static_cast<std::size_t>(level)] =
            auc(scores, sc.binary_labels);
      }
    }
  }
  return report;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  char buf[128];
  os << "[summary]\n";
  os << "n_samples=" << report.n_samples << "\n";
  std::snprintf(buf, sizeof(buf), "accuracy=%.17g\n", report.accuracy);
  os << buf;
  std::snprintf(buf, sizeof(buf), "auc=%.17g\n", report.auc);
  os << buf;
  os << "\n[confusion]\n";
  for (const auto& row : report.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "\t" : "") << row[j];
    os << "\n";
  }
  os << "\n[per_class_recall]\n";
  static const char* kFourNames[4] = {"rarv", "farv", "rafv", "fafv"};
  static const char* kBinNames[2] = {"real", "fake"};
  for (std::size_t c = 0; c < report.per_class_recall.size(); ++c) {
    const char* name = report.per_class_recall.size() == 4 ? kFourNames[c] : kBinNames[c];
    std::snprintf(buf, sizeof(buf), "%s=%.17g\n", name, report.per_class_recall[c]);
    os << buf;
  }
  if (!report.perturbation_grid.empty()) {
    os << "\n[perturbation_grid]\n";
    for (int k = 0; k < kPerturbKinds; ++k)
      for (int level = 0; level < kPerturbLevels; ++level) {
        std::snprintf(buf, sizeof(buf), "%s\t%d\t%.17g\n",
                      perturb_name(static_cast<PerturbKind>(k)), level,
                      report.perturbation_grid[static_cast<std::size_t>(k)]
                                              [static_cast<std::size_t>(level)]);
        os << buf;
      }
  }
}

void write_grid_tsv(const EvalReport& report, const std::filesystem::path& path) {
  if (report.perturbation_grid.empty())
    throw UsageError("write_grid_tsv: report has no perturbation grid");
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "kind\tlevel\tauc\n";
  char buf[128];
  for (int k = 0; k < kPerturbKinds; ++k)
    for (int level = 0; level < kPerturbLevels; ++level) {
      std::snprintf(buf, sizeof(buf), "%s\t%d\t%.17g\n", perturb_name(static_cast<PerturbKind>(k)),
                    level,
                    report.perturbation_grid[static_cast<std::size_t>(k)]
                                            [static_cast<std::size_t>(level)]);
      os << buf;
    }
}

CorrelationReport analyze_correlation(const std::vector<corpus::AVClip>& clips) {
  if (clips.empty()) throw MetricError("analyze_correlation: empty corpus");
  std::vector<double> cos_real, cos_fake;
  double lag_real = 0.0, lag_fake = 0.0;
  for (const corpus::AVClip& c : clips) {
    const double cosv = correlation_intensity(c.fau);
    const double lag = lag1_autocorrelation(c.fau);
    if (corpus::video_is_fake(c.label)) {
      cos_fake.push_back(cosv);
      lag_fake += lag;
    } else {
      cos_real.push_back(cosv);
      lag_real += lag;
    }
  }
  if (cos_real.empty() || cos_fake.empty())
    throw MetricError("analyze_correlation: need both real-video and fake-video clips");

  auto mean_std = [](const std::vector<double>& v, double* mean, double* sd) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    *mean = m;
    *sd = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
  };

  CorrelationReport r;
  r.n_real = static_cast<long>(cos_real.size());
  r.n_fake = static_cast<long>(cos_fake.size());
  mean_std(cos_real, &r.cosine_real_mean, &r.cosine_real_std);
  mean_std(cos_fake, &r.cosine_fake_mean, &r.cosine_fake_std);
  r.lag1_real_mean = lag_real / static_cast<double>(r.n_real);
  r.lag1_fake_mean = lag_fake / static_cast<double>(r.n_fake);
  const double se = std::sqrt(r.cosine_real_std * r.cosine_real_std / static_cast<double>(r.n_real) +
                              r.cosine_fake_std * r.cosine_fake_std / static_cast<double>(r.n_fake));
  r.separation_se = se > 0.0 ? (r.cosine_real_mean - r.cosine_fake_mean) / se : 0.0;
  return r;
}

void write_correlation_report(const CorrelationReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  char buf[160];
  os << "[frame_cosine]\n";
  std::snprintf(buf, sizeof(buf), "real_mean=%.17g\nreal_std=%.17g\nreal_n=%ld\n",
                r.cosine_real_mean, r.cosine_real_std, r.n_real);
  os << buf;
  std::snprintf(buf, sizeof(buf), "fake_mean=%.17g\nfake_std=%.17g\nfake_n=%ld\n",
                r.cosine_fake_mean, r.cosine_fake_std, r.n_fake);
  os << buf;
  std::snprintf(buf, sizeof(buf), "separation_se=%.17g\n", r.separation_se);
  os << buf;
  os << "\n[lag1_autocorrelation]\n";
  std::snprintf(buf, sizeof(buf), "real_mean=%.17g\nfake_mean=%.17g\n", r.lag1_real_mean,
                r.lag1_fake_mean);
  os << buf;
}

}  // namespace avd::eval

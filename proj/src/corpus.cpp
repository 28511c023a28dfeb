#include "avdet/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "avdet/error.hpp"
#include "avdet/rng.hpp"
#include "avdet/tensor_io.hpp"

namespace avd::corpus {

namespace {

constexpr char kMagic[4] = {'F', 'F', 'C', '1'};
constexpr std::uint16_t kVersion = 1;

// RNG sub-stream tags; each clip component draws from its own stream so the
// label never shifts another component's randomness.
enum Stream : std::uint64_t {
  kStreamDriver = 1,
  kStreamFakeVideoDriver = 2,
  kStreamFakeAudioDriver = 3,
  kStreamVideoNoise = 5,
  kStreamFau = 6,
  kStreamAudio = 7,
};

// Channel semantics are global, like features from one fixed extractor: the
// mixing coefficients come from this constant seed, never from the clip seed.
// Per-clip randomness stays in the drivers, the noise and the carrier draw.
constexpr std::uint64_t kFeatureSemanticsSeed = 0x5645431D10B5EEDULL;

const std::vector<double>& video_coeffs(int dv) {
  static const std::vector<double> table = [] {
    Rng rng(mix_seed(kFeatureSemanticsSeed, 1));
    std::vector<double> t(256);
    for (double& v : t) v = rng.normal();
    return t;
  }();
  if (dv > static_cast<int>(table.size()))
    throw ConfigError("gen: video_feature_dim above the supported 256 channels");
  return table;
}

const std::vector<double>& fau_gains(int da) {
  static const std::vector<double> table = [] {
    Rng rng(mix_seed(kFeatureSemanticsSeed, 2));
    std::vector<double> t(64);
    for (double& v : t) v = rng.normal();
    return t;
  }();
  if (da > static_cast<int>(table.size()))
    throw ConfigError("gen: fau_dim above the supported 64 channels");
  return table;
}

// Small speaker pool of fundamentals, shared by many clips so the carrier
// cannot serve as a clip fingerprint. Each period divides the 10 ms analysis
// hop, so every spectrogram column sees the carrier at the same alignment and
// column-to-column changes come from the envelope alone. The carrier stacks
// equal-amplitude partials up to ~7.7 kHz with fixed per-fundamental phases:
// every mel band is then dominated by deterministic partials (not window
// leakage) and its log energy is linear in the log envelope.
constexpr int kFundamentalPool[4] = {100, 200, 400, 500};
constexpr int kFundamentalCount = 4;

std::vector<double> carrier_period(int pool_idx, int sample_rate) {
  const int f0 = kFundamentalPool[pool_idx];
  const int period = sample_rate / f0;
  const int partials = (sample_rate * 48 / 100) / f0;  // keep below ~0.48 * sr
  Rng rng(mix_seed(kFeatureSemanticsSeed, 16 + static_cast<std::uint64_t>(pool_idx)));
  std::vector<double> phase(static_cast<std::size_t>(partials));
  for (double& p : phase) p = 6.283185307179586 * rng.uniform();
  std::vector<double> v(static_cast<std::size_t>(period), 0.0);
  double peak = 0.0;
  for (int i = 0; i < period; ++i) {
    double s = 0.0;
    for (int k = 1; k <= partials; ++k)
      s += std::cos(6.283185307179586 * k * i / period + phase[static_cast<std::size_t>(k - 1)]);
    v[static_cast<std::size_t>(i)] = s;
    peak = std::max(peak, std::abs(s));
  }
  for (double& x : v) x /= peak;
  return v;
}

std::vector<double> ar1(int t, double rho, Rng rng) {
  std::vector<double> d(static_cast<std::size_t>(t));
  double x = rng.normal();
  d[0] = x;
  const double innov = std::sqrt(1.0 - rho * rho);  // keeps the process at unit variance
  for (int i = 1; i < t; ++i) {
    x = rho * x + innov * rng.normal();
    d[static_cast<std::size_t>(i)] = x;
  }
  return d;
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Per-frame features, affine in the driver: even channels carry the driver
// level, odd channels the frame-to-frame motion. Both stay smooth when the
// driver is smooth; channel 0 is the principal channel (the driver itself).
Tensor make_feature_video(const std::vector<double>& driver, const GenConfig& cfg, Rng noise) {
  const int t = cfg.t, dv = cfg.video_feature_dim;
  std::vector<double> coeffs(video_coeffs(dv).begin(), video_coeffs(dv).begin() + dv);
  coeffs[0] = 1.0;
  std::vector<double> v(static_cast<std::size_t>(t) * dv);
  for (int i = 0; i < t; ++i) {
    const double level = driver[static_cast<std::size_t>(i)];
    const double motion = i == 0 ? 0.0 : level - driver[static_cast<std::size_t>(i - 1)];
    for (int j = 0; j < dv; ++j) {
      const double base = (j % 2 == 1) ? motion : level;
      v[static_cast<std::size_t>(i) * dv + j] =
          f32(coeffs[static_cast<std::size_t>(j)] * base + cfg.coupling_noise * noise.normal());
    }
  }
  return Tensor::from({t, dv}, std::move(v));
}

// 16x16 single-channel "face": a fixed Gaussian head plus a dark mouth whose
// vertical aperture tracks the driver. Gives the perturbation harness pixels
// to act on.
Tensor make_raw_video(const std::vector<double>& driver, const GenConfig& cfg, Rng noise) {
  const int t = cfg.t, side = kRawFrameSide;
  std::vector<double> v(static_cast<std::size_t>(t) * side * side);
  for (int i = 0; i < t; ++i) {
    const double aperture = 0.5 + 0.45 * std::tanh(0.8 * driver[static_cast<std::size_t>(i)]);
    const double sy = 0.5 + 2.2 * aperture;
    double* frame = v.data() + static_cast<std::size_t>(i) * side * side;
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const double head = 0.9 * std::exp(-((x - 8.0) * (x - 8.0) + (y - 6.5) * (y - 6.5)) /
                                           (2.0 * 3.2 * 3.2));
        const double mouth = 0.7 * std::exp(-((x - 8.0) * (x - 8.0) / (2.0 * 2.4 * 2.4) +
                                              (y - 11.5) * (y - 11.5) / (2.0 * sy * sy)));
        double px = head - mouth + cfg.coupling_noise * noise.normal();
        frame[y * side + x] = f32(std::clamp(px, 0.0, 1.0));
      }
  }
  return Tensor::from({t, 1, side, side}, std::move(v));
}

Tensor make_fau(const std::vector<double>& driver, const GenConfig& cfg, Rng rng) {
  const int t = cfg.t, da = cfg.fau_dim;
  const std::vector<double> gains(fau_gains(da).begin(), fau_gains(da).begin() + da);
  std::vector<double> v(static_cast<std::size_t>(t) * da);
  for (int i = 0; i < t; ++i)
    for (int k = 0; k < da; ++k) {
      const double raw = 0.5 + 0.35 * gains[static_cast<std::size_t>(k)] * driver[static_cast<std::size_t>(i)] +
                         cfg.coupling_noise * rng.normal();
      v[static_cast<std::size_t>(i) * da + k] = f32(std::clamp(raw, 0.0, 1.0));
    }
  return Tensor::from({t, da}, std::move(v));
}

// A voiced carrier whose 10 ms amplitude envelope tracks the driver: within
// each video frame the four blocks interpolate from the previous frame's
// driver value to the current one, so the envelope follows the driver
// frame-synchronously and its motion is visible across neighboring blocks.
// The level map is exponential, which makes the log-mel energy linear in the
// driver: driver motion survives the log compression undistorted.
audio::Waveform make_audio(const std::vector<double>& driver, const GenConfig& cfg, Rng rng) {
  const int t = cfg.t;
  const int sr = cfg.sample_rate;
  const int block = sr / 100;      // 10 ms
  const int blocks_per_frame = 4;  // 40 ms video frame
  const int n = t * blocks_per_frame * block;
  const int pool_idx = static_cast<int>(rng.next_u64() % kFundamentalCount);
  const std::vector<double> carrier = carrier_period(pool_idx, sr);
  const std::size_t period = carrier.size();

  audio::Waveform w;
  w.sample_rate = sr;
  w.samples.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int b = i / block;
    const int frame = b / blocks_per_frame;
    const double prev = frame == 0 ? driver[0] : driver[static_cast<std::size_t>(frame - 1)];
    const double frac = (b % blocks_per_frame + 1) / static_cast<double>(blocks_per_frame);
    const double level = prev + frac * (driver[static_cast<std::size_t>(frame)] - prev);
    const double amp = 0.17 * std::exp(0.65 * level);
    const double s = std::clamp(amp * carrier[static_cast<std::size_t>(i) % period], -1.0, 1.0);
    w.samples[static_cast<std::size_t>(i)] = static_cast<float>(s);
  }
  return w;
}

void write_manifest(const std::vector<AVClip>& clips, const std::filesystem::path& path,
                    ClipMode mode, int t) {
  std::array<long, 4> hist{0, 0, 0, 0};
  for (const AVClip& c : clips) hist[static_cast<std::size_t>(c.label)]++;
  std::ofstream os(path.string() + ".manifest");
  if (!os) throw FormatError("cannot write " + path.string() + ".manifest");
  os << "corpus=" << path.filename().string() << "\n";
  os << "count=" << clips.size() << "\n";
  os << "mode=" << (mode == ClipMode::Feature ? "feature" : "raw") << "\n";
  os << "t=" << t << "\n";
  os << "label_rarv=" << hist[0] << "\n";
  os << "label_farv=" << hist[1] << "\n";
  os << "label_rafv=" << hist[2] << "\n";
  os << "label_fafv=" << hist[3] << "\n";
}

}  // namespace

const char* label_name(ClipLabel l) {
  switch (l) {
    case ClipLabel::RealAudioRealVideo: return "rarv";
    case ClipLabel::FakeAudioRealVideo: return "farv";
    case ClipLabel::RealAudioFakeVideo: return "rafv";
    case ClipLabel::FakeAudioFakeVideo: return "fafv";
  }
  return "?";
}

void GenConfig::validate() const {
  if (t < 2) throw ConfigError("gen: need at least 2 frames");
  if (!(0.0 < rho_fake && rho_fake < rho_real && rho_real < 1.0))
    throw ConfigError("gen: smoothness coefficients must satisfy 0 < fake < real < 1");
  if (coupling_noise < 0.0) throw ConfigError("gen: negative coupling noise");
  if (video_feature_dim < 1 || fau_dim < 1) throw ConfigError("gen: feature dims must be positive");
  if (sample_rate % 100 != 0) throw ConfigError("gen: sample rate must hold whole 10 ms blocks");
}

AVClip generate_clip(std::uint64_t seed, ClipLabel label, const GenConfig& cfg) {
  cfg.validate();
  const auto scene = ar1(cfg.t, cfg.rho_real, Rng(mix_seed(seed, kStreamDriver)));
  const auto video_driver =
      video_is_fake(label) ? ar1(cfg.t, cfg.rho_fake, Rng(mix_seed(seed, kStreamFakeVideoDriver)))
                           : scene;
  const auto audio_driver =
      audio_is_fake(label) ? ar1(cfg.t, cfg.rho_fake, Rng(mix_seed(seed, kStreamFakeAudioDriver)))
                           : scene;

  AVClip clip;
  clip.label = label;
  clip.seed = seed;
  clip.mode = cfg.mode;
  clip.t = cfg.t;
  clip.video = cfg.mode == ClipMode::Feature
                   ? make_feature_video(video_driver, cfg, Rng(mix_seed(seed, kStreamVideoNoise)))
                   : make_raw_video(video_driver, cfg, Rng(mix_seed(seed, kStreamVideoNoise)));
  clip.fau = make_fau(video_driver, cfg, Rng(mix_seed(seed, kStreamFau)));
  clip.waveform = make_audio(audio_driver, cfg, Rng(mix_seed(seed, kStreamAudio)));
  return clip;
}

std::vector<AVClip> generate_corpus(int count, std::uint64_t corpus_seed, const GenConfig& cfg) {
  std::vector<AVClip> clips;
  clips.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    clips.push_back(generate_clip(mix_seed(corpus_seed, static_cast<std::uint64_t>(i)),
                                  static_cast<ClipLabel>(i % 4), cfg));
  return clips;
}

void write_corpus(const std::vector<AVClip>& clips, const std::filesystem::path& path,
                  ClipMode mode, int t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kMagic, 4);
  write_u16(os, kVersion);
  write_u8(os, static_cast<std::uint8_t>(mode));
  write_u32(os, static_cast<std::uint32_t>(t));
  write_u64(os, clips.size());
  for (const AVClip& c : clips) {
    if (c.mode != mode || c.t != t)
      throw UsageError("write_corpus: clip mode/T does not match the corpus header");
    write_u8(os, static_cast<std::uint8_t>(c.label));
    write_u64(os, c.seed);
    write_tensor(os, c.video, DType::F32);
    write_tensor(os, c.fau, DType::F32);
    Tensor wave = Tensor::zeros({static_cast<int>(c.waveform.samples.size())});
    for (std::size_t i = 0; i < c.waveform.samples.size(); ++i)
      wave.data()[i] = static_cast<double>(c.waveform.samples[i]);
    write_tensor(os, wave, DType::F32);
  }
  if (!os) throw FormatError("write failed for " + path.string());
  os.close();
  write_manifest(clips, path, mode, t);
}

std::vector<AVClip> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad corpus magic at byte 0 in " + path.string() + ": expected 'FFC1'");
  const std::uint16_t version = read_u16(is);
  if (version != kVersion)
    throw FormatError("unsupported corpus version " + std::to_string(version));
  const std::uint8_t mode_tag = read_u8(is);
  if (mode_tag > 1) throw FormatError("unknown corpus mode tag " + std::to_string(mode_tag));
  const ClipMode mode = static_cast<ClipMode>(mode_tag);
  const int t = static_cast<int>(read_u32(is));
  const std::uint64_t count = read_u64(is);

  std::vector<AVClip> clips;
  clips.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    AVClip c;
    const std::uint8_t label_tag = read_u8(is);
    if (label_tag > 3)
      throw FormatError("unknown label tag " + std::to_string(label_tag) + " in record " +
                        std::to_string(i));
    c.label = static_cast<ClipLabel>(label_tag);
    c.seed = read_u64(is);
    c.mode = mode;
    c.t = t;
    c.video = read_tensor(is);
    c.fau = read_tensor(is);
    Tensor wave = read_tensor(is);
    if (wave.rank() != 1) throw FormatError("waveform tensor must be rank 1 in record " + std::to_string(i));
    c.waveform.samples.resize(wave.size());
    for (std::size_t j = 0; j < wave.size(); ++j)
      c.waveform.samples[j] = static_cast<float>(wave.data()[j]);
    c.waveform.sample_rate = static_cast<int>(
        std::lround(static_cast<double>(wave.size()) * kFramesPerSecond / t));
    clips.push_back(std::move(c));
  }
  return clips;
}

std::vector<AVClip> import_features(const std::filesystem::path& path) {
  std::vector<AVClip> clips = read_corpus(path);
  for (const AVClip& c : clips)
    if (c.mode != ClipMode::Feature)
      throw FormatError("import_features: " + path.string() + " is not a feature-mode corpus");
  return clips;
}

std::vector<double> frame_envelope(const AVClip& clip) {
  const int block = clip.waveform.sample_rate / 100;
  const int blocks_per_frame = 4;
  std::vector<double> env(static_cast<std::size_t>(clip.t), 0.0);
  for (int f = 0; f < clip.t; ++f) {
    double acc = 0.0;
    for (int b = 0; b < blocks_per_frame; ++b) {
      const std::size_t start = (static_cast<std::size_t>(f) * blocks_per_frame + b) * block;
      double e = 0.0;
      for (int i = 0; i < block; ++i) {
        const double s = clip.waveform.samples[start + i];
        e += s * s;
      }
      acc += std::sqrt(e / block);
    }
    env[static_cast<std::size_t>(f)] = acc / blocks_per_frame;
  }
  return env;
}

double envelope_video_correlation(const AVClip& clip) {
  if (clip.mode != ClipMode::Feature)
    throw UsageError("envelope_video_correlation: feature-mode clips only");
  const std::vector<double> env = frame_envelope(clip);
  const int t = clip.t, dv = clip.video.cols();
  double mx = 0.0, my = 0.0;
  for (int i = 0; i < t; ++i) {
    mx += clip.video.data()[static_cast<std::size_t>(i) * dv];
    my += env[static_cast<std::size_t>(i)];
  }
  mx /= t;
  my /= t;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (int i = 0; i < t; ++i) {
    const double dx = clip.video.data()[static_cast<std::size_t>(i) * dv] - mx;
    const double dy = env[static_cast<std::size_t>(i)] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw MetricError("envelope_video_correlation: degenerate series");
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace avd::corpus

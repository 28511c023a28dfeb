#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "avdet/audio.hpp"
#include "avdet/tensor.hpp"

namespace avd::corpus {

// The four audio-visual authenticity combinations.
enum class ClipLabel : std::uint8_t {
  RealAudioRealVideo = 0,
  FakeAudioRealVideo = 1,
  RealAudioFakeVideo = 2,
  FakeAudioFakeVideo = 3,
};

inline bool is_real(ClipLabel l) { return l == ClipLabel::RealAudioRealVideo; }
inline bool audio_is_fake(ClipLabel l) {
  return l == ClipLabel::FakeAudioRealVideo || l == ClipLabel::FakeAudioFakeVideo;
}
inline bool video_is_fake(ClipLabel l) {
  return l == ClipLabel::RealAudioFakeVideo || l == ClipLabel::FakeAudioFakeVideo;
}
const char* label_name(ClipLabel l);  // "rarv", "farv", "rafv", "fafv"

enum class ClipMode : std::uint8_t { Feature = 0, Raw = 1 };

inline constexpr int kRawFrameSide = 16;
inline constexpr int kFramesPerSecond = 25;

struct GenConfig {
  int t = 25;                    // frames per clip
  double rho_real = 0.95;        // AR(1) smoothness of authentic streams
  double rho_fake = 0.60;        // AR(1) smoothness of forged streams
  double coupling_noise = 0.05;  // sigma of the observation noise
  ClipMode mode = ClipMode::Feature;
  int video_feature_dim = 32;
  int fau_dim = 12;
  int sample_rate = audio::kDefaultSampleRate;

  void validate() const;
};

/// One sample: T video frames (features or raw pixels), per-frame FAU
/// activations, a waveform covering the same T/25 seconds, a label and the
/// seed that regenerates it bit-exactly. All stored values are exactly
/// representable in 32-bit floats so disk round trips are lossless.
struct AVClip {
  ClipLabel label = ClipLabel::RealAudioRealVideo;
  std::uint64_t seed = 0;
  ClipMode mode = ClipMode::Feature;
  int t = 0;
  Tensor video;  // [T x Dv] feature mode, [T x 1 x 16 x 16] raw mode
  Tensor fau;    // [T x Dau], entries in [0, 1]
  audio::Waveform waveform;
};

/// Deterministic clip synthesis. One latent AR(1) driver carries the "scene";
/// authentic streams follow it (video/FAU as affine-plus-noise functions,
/// audio as a tone whose 10 ms amplitude envelope tracks it) while forged
/// streams follow independent, less smooth drivers — breaking cross-modal
/// coupling and temporal consistency at once.
AVClip generate_clip(std::uint64_t seed, ClipLabel label, const GenConfig& cfg);

/// count clips with labels cycling RARV,FARV,RAFV,FAFV; clip seeds derived
/// from (corpus_seed, index) so generation order never matters.
std::vector<AVClip> generate_corpus(int count, std::uint64_t corpus_seed, const GenConfig& cfg);

/// "FFC1" container plus a key=value sidecar manifest (<path>.manifest)
/// listing count, mode, T and the label histogram.
void write_corpus(const std::vector<AVClip>& clips, const std::filesystem::path& path,
                  ClipMode mode, int t);
std::vector<AVClip> read_corpus(const std::filesystem::path& path);

/// read_corpus restricted to feature-mode files: the import door for
/// externally precomputed per-frame features.
std::vector<AVClip> import_features(const std::filesystem::path& path);

/// Measured per-video-frame audio envelope: RMS over each 10 ms block,
/// averaged over the blocks within a frame. T values.
std::vector<double> frame_envelope(const AVClip& clip);

/// Pearson correlation between the first video feature channel and the
/// measured audio envelope (feature mode only).
double envelope_video_correlation(const AVClip& clip);

}  // namespace avd::corpus

#pragma once

#include <filesystem>
#include <vector>

#include "avdet/tensor.hpp"

namespace avd::audio {

inline constexpr int kDefaultSampleRate = 16000;
inline constexpr int kNfft = 512;
inline constexpr int kMelBands = 80;
inline constexpr double kWindowSeconds = 0.025;
inline constexpr double kHopSeconds = 0.010;
inline constexpr double kPowerFloor = 1e-10;
inline constexpr double kLogFloor = -10.0;  // log10(kPowerFloor)

struct Waveform {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = kDefaultSampleRate;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

struct MelSpectrogram {
  Tensor grid;  // [kMelBands x F], log10 power
  int mel_filter_count = kMelBands;
  double hop_seconds = kHopSeconds;
  double window_seconds = kWindowSeconds;

  int frames() const { return grid.cols(); }
};

/// Squared-magnitude STFT. Periodic Hann window of 25 ms, 10 ms hop,
/// zero-padded to 512 points, signal reflect-padded by half a window so a
/// waveform of n samples yields exactly round(n / hop) frames (100 for 1 s at
/// 16 kHz). Output is [F x 257].
Tensor stft_power(const Waveform& w);

/// Triangular filters with centers equally spaced on the HTK mel scale
/// between 0 Hz and sr/2, each peak-normalized to 1. Output [n_mels x nfft/2+1].
Tensor mel_filterbank(int nfft, int sample_rate, int n_mels);

/// log10(max(filterbank * power^T, 1e-10)); 80 x 100 for 1 s at 16 kHz.
MelSpectrogram log_mel(const Waveform& w);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Frequency band (left and right edge in Hz) covered by one mel filter.
void mel_band_edges(int nfft, int sample_rate, int n_mels, int filter,
                    double* left_hz, double* right_hz);

/// Mono 16-bit PCM WAV with the canonical 44-byte header.
Waveform read_wav(const std::filesystem::path& path);

}  // namespace avd::audio

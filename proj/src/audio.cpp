#include "avdet/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "avdet/error.hpp"

namespace avd::audio {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// Iterative radix-2 Cooley-Tukey, in place. n must be a power of two.
void fft(std::vector<double>& re, std::vector<double>& im) {
  const int n = static_cast<int>(re.size());
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / len;
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (int i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (int k = 0; k < len / 2; ++k) {
        const int a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

// Reflect index into [0, n): ...2,1,|0,1,...,n-1|,n-2,n-3...
long reflect(long j, long n) {
  if (j < 0) j = -j;
  if (j >= n) j = 2 * n - 2 - j;
  return j;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor stft_power(const Waveform& w) {
  if (w.sample_rate <= 0) throw InputError("stft: non-positive sample rate");
  const long n = static_cast<long>(w.samples.size());
  const int win = static_cast<int>(std::lround(kWindowSeconds * w.sample_rate));
  const int hop = static_cast<int>(std::lround(kHopSeconds * w.sample_rate));
  if (n < win)
    throw InputError("stft: waveform of " + std::to_string(n) + " samples is shorter than one " +
                     std::to_string(win) + "-sample analysis window");
  if (win > kNfft) throw InputError("stft: analysis window exceeds FFT size");

  const int frames = static_cast<int>(std::lround(static_cast<double>(n) / hop));
  const int pad = win / 2;
  const int bins = kNfft / 2 + 1;

  std::vector<double> hann(win);
  for (int i = 0; i < win; ++i) hann[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / win));

  Tensor out = Tensor::zeros({frames, bins});
  auto& o = out.data();
  std::vector<double> re(kNfft), im(kNfft);
  for (int f = 0; f < frames; ++f) {
    const long start = static_cast<long>(f) * hop - pad;
    for (int i = 0; i < win; ++i) {
      const long j = reflect(start + i, n);
      re[i] = hann[i] * static_cast<double>(w.samples[static_cast<std::size_t>(j)]);
    }
    std::fill(re.begin() + win, re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    fft(re, im);
    double* row = o.data() + static_cast<std::size_t>(f) * bins;
    for (int b = 0; b < bins; ++b) row[b] = re[b] * re[b] + im[b] * im[b];
  }
  return out;
}

Tensor mel_filterbank(int nfft, int sample_rate, int n_mels) {
  if (n_mels < 1) throw ConfigError("mel_filterbank: need at least one filter");
  const int bins = nfft / 2 + 1;
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edge(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edge[i] = mel_to_hz(mel_max * i / (n_mels + 1));

  Tensor fb = Tensor::zeros({n_mels, bins});
  auto& v = fb.data();
  for (int k = 0; k < n_mels; ++k) {
    const double lo = edge[k], mid = edge[k + 1], hi = edge[k + 2];
    double* row = v.data() + static_cast<std::size_t>(k) * bins;
    for (int b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / nfft;
      const double rise = (f - lo) / (mid - lo);
      const double fall = (hi - f) / (hi - mid);
      row[b] = std::max(0.0, std::min(rise, fall));
    }
  }
  return fb;
}

void mel_band_edges(int nfft, int sample_rate, int n_mels, int filter,
                    double* left_hz, double* right_hz) {
  (void)nfft;
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  *left_hz = mel_to_hz(mel_max * filter / (n_mels + 1));
  *right_hz = mel_to_hz(mel_max * (filter + 2) / (n_mels + 1));
}

MelSpectrogram log_mel(const Waveform& w) {
  const Tensor power = stft_power(w);  // [F x bins]
  const int frames = power.rows();
  const int bins = power.cols();

  // The filterbank depends only on fixed constants; build it once.
  static const Tensor fb = mel_filterbank(kNfft, kDefaultSampleRate, kMelBands);
  if (w.sample_rate != kDefaultSampleRate)
    throw ConfigError("log_mel: only " + std::to_string(kDefaultSampleRate) +
                      " Hz input is supported, got " + std::to_string(w.sample_rate));

  Tensor grid = Tensor::zeros({kMelBands, frames});
  auto& g = grid.data();
  const auto& fbv = fb.data();
  const auto& pv = power.data();
  for (int m = 0; m < kMelBands; ++m) {
    const double* frow = fbv.data() + static_cast<std::size_t>(m) * bins;
    double* grow = g.data() + static_cast<std::size_t>(m) * frames;
    for (int f = 0; f < frames; ++f) {
      const double* prow = pv.data() + static_cast<std::size_t>(f) * bins;
      double acc = 0.0;
      for (int b = 0; b < bins; ++b) acc += frow[b] * prow[b];
      // exact floor value, independent of libm rounding of log10(1e-10)
      grow[f] = acc <= kPowerFloor ? kLogFloor : std::max(std::log10(acc), kLogFloor);
    }
  }
  return MelSpectrogram{std::move(grid), kMelBands, kHopSeconds, kWindowSeconds};
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  unsigned char h[44];
  is.read(reinterpret_cast<char*>(h), 44);
  if (is.gcount() != 44) throw FormatError("wav: header shorter than 44 bytes");

  auto u16 = [&](int off) { return static_cast<unsigned>(h[off]) | (h[off + 1] << 8); };
  auto u32 = [&](int off) {
    return static_cast<std::uint32_t>(h[off]) | (h[off + 1] << 8) | (h[off + 2] << 16) |
           (static_cast<std::uint32_t>(h[off + 3]) << 24);
  };

  if (std::memcmp(h, "RIFF", 4) != 0 || std::memcmp(h + 8, "WAVE", 4) != 0 ||
      std::memcmp(h + 12, "fmt ", 4) != 0 || std::memcmp(h + 36, "data", 4) != 0)
    throw FormatError("wav: not a canonical 44-byte-header PCM file");
  if (u32(16) != 16 || u16(20) != 1) throw FormatError("wav: only plain PCM is supported");
  if (u16(22) != 1) throw FormatError("wav: only mono is supported");
  if (u16(34) != 16) throw FormatError("wav: only 16-bit samples are supported");

  Waveform w;
  w.sample_rate = static_cast<int>(u32(24));
  if (w.sample_rate <= 0) throw FormatError("wav: bad sample rate");
  const std::uint32_t bytes = u32(40);
  if (bytes % 2 != 0) throw FormatError("wav: odd data size");
  const std::size_t count = bytes / 2;
  w.samples.resize(count);
  std::vector<char> raw(bytes);
  is.read(raw.data(), static_cast<std::streamsize>(bytes));
  if (static_cast<std::uint32_t>(is.gcount()) != bytes)
    throw FormatError("wav: data chunk truncated");
  for (std::size_t i = 0; i < count; ++i) {
    const std::int16_t s = static_cast<std::int16_t>(
        static_cast<unsigned char>(raw[2 * i]) | (static_cast<unsigned char>(raw[2 * i + 1]) << 8));
    w.samples[i] = static_cast<float>(s) / 32768.0f;
  }
  return w;
}

}  // namespace avd::audio

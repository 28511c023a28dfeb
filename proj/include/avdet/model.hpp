#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avdet/audio.hpp"
#include "avdet/corpus.hpp"
#include "avdet/tensor.hpp"

namespace avd::model {

enum class HeadMode { Binary, FourClass };

struct ModelConfig {
  int t = 25;            // frames per clip
  int latent = 512;      // shared latent width L
  int enc_hidden = 64;   // encoder MLP hidden width
  int mlp_hidden = 512;  // classification head hidden width
  int audio_pool = 4;    // spectrogram columns per video frame
  HeadMode head_mode = HeadMode::Binary;
  double lambda_av = 0.8;
  double lambda_a = 0.1;
  double lambda_v = 0.1;
  corpus::ClipMode mode = corpus::ClipMode::Feature;
  int video_feature_dim = 32;
  int fau_dim = 12;
  int sample_rate = audio::kDefaultSampleRate;

  int num_av_classes() const { return head_mode == HeadMode::FourClass ? 4 : 2; }
  int audio_in_dim() const { return audio::kMelBands * audio_pool; }
  int video_in_dim() const {
    return mode == corpus::ClipMode::Raw ? corpus::kRawFrameSide * corpus::kRawFrameSide
                                         : video_feature_dim;
  }
  int fau_in_dim() const { return mode == corpus::ClipMode::Raw ? video_in_dim() : fau_dim; }

  void validate() const;
  std::string canonical_text() const;
  static ModelConfig parse_text(const std::string& text, std::string* note_out = nullptr);
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool frozen;
};

/// Per-clip model inputs: the grouped/conditioned spectrogram and the
/// per-frame visual streams, all constant tensors.
struct PreparedClip {
  Tensor audio_in;  // [T x 80*pool]
  Tensor video_in;  // [T x Dv]
  Tensor fau_in;    // [T x Dau]
  corpus::ClipLabel label = corpus::ClipLabel::RealAudioRealVideo;
};

struct Aligned {
  Tensor att_a, att_v;  // query-shared attention [T x T]
  Tensor z_aq, z_vq;    // aligned features [T x L]
};

struct Pooled {
  Tensor gram_av, gram_a, gram_v;  // scaled frame-similarity products, pre-normalization
  Tensor m_av, m_a, m_v;           // dense attentional matrices [T x T]
};

struct Scores {
  Tensor s_av, s_a, s_v;  // logits: [C_av], [2], [2]
};

struct ForwardOut {
  Tensor z_a, z_vid, z_au, z_v;
  Aligned aligned;
  Pooled pooled;
  Scores scores;
};

struct LossBreakdown {
  Tensor total;     // scalar, in-graph
  double value_av = 0.0, value_a = 0.0, value_v = 0.0;
};

// Binary task labels derived from a clip label: 0 = real, 1 = fake.
int binary_label(corpus::ClipLabel l);
int audio_label(corpus::ClipLabel l);
int video_label(corpus::ClipLabel l);

/// The detector: per-frame audio/video encoders plus a frozen FAU projection,
/// fusion, query-shared cross-attention alignment, temporal attentional
/// pooling into dense T x T matrices, and three MLP heads.
class Model {
 public:
  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::string& note() const { return note_; }
  void set_note(std::string note) { note_ = std::move(note); }

  /// Fixed-order parameter list; frozen entries never receive gradients.
  std::vector<NamedParam> named_params() const;

  // ---- input preparation (constant tensors, no graph) ----
  Tensor prepare_audio(const Tensor& mel_grid) const;  // [80 x T*pool] -> [T x 80*pool]
  PreparedClip prepare(const corpus::AVClip& clip) const;
  PreparedClip prepare_visual(const corpus::AVClip& clip, const Tensor& audio_in) const;

  // ---- staged forward operations ----
  Tensor encode_audio(const Tensor& audio_in) const;
  Tensor encode_video(const Tensor& video_in) const;
  Tensor encode_fau(const Tensor& fau_in) const;  // frozen parameters
  Tensor fuse(const Tensor& z_vid, const Tensor& z_au) const;
  Aligned align(const Tensor& z_a, const Tensor& z_v) const;
  Pooled pool(const Tensor& z_aq, const Tensor& z_vq) const;
  Scores predict(const Tensor& m_av, const Tensor& m_a, const Tensor& m_v) const;

  ForwardOut forward(const PreparedClip& in) const;

  /// Weighted sum lambda_av*CE(s_av) + lambda_a*CE(s_a) + lambda_v*CE(s_v)
  /// over a batch of forward outputs.
  LossBreakdown total_loss(const std::vector<ForwardOut>& outs,
                           const std::vector<corpus::ClipLabel>& labels) const;

  /// softmax(s_av): the full class distribution. Binary fake-probability is
  /// entry 1 (binary mode) or 1 - entry 0 (four-class mode).
  std::vector<double> infer(const corpus::AVClip& clip) const;
  double fake_score(const std::vector<double>& probs) const;

  // ---- checkpointing ("FFM1") ----
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  Model() = default;
  Tensor encoder_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                     const Tensor& b2) const;
  Tensor head_mlp(const Tensor& m, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                  const Tensor& b2) const;

  ModelConfig cfg_;
  std::string note_;

  Tensor a_w1_, a_b1_, a_w2_, a_b2_;      // audio encoder
  Tensor v_w1_, v_b1_, v_w2_, v_b2_;      // video encoder
  Tensor au_w1_, au_b1_, au_w2_, au_b2_;  // FAU encoder (frozen)
  Tensor p_w_, p_b_;                      // fusion projection (zero-initialized)
  Tensor q_;                              // shared queries [T x L]
  Tensor ka_w_, ka_b_, va_w_, va_b_;      // audio key/value maps
  Tensor kv_w_, kv_b_, vv_w_, vv_b_;      // video key/value maps
  Tensor sigma_av_, sigma_a_, sigma_v_;   // pooling scales
  Tensor hav_w1_, hav_b1_, hav_w2_, hav_b2_;
  Tensor ha_w1_, ha_b1_, ha_w2_, ha_b2_;
  Tensor hv_w1_, hv_b1_, hv_w2_, hv_b2_;
};

}  // namespace avd::model

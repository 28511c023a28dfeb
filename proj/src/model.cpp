#include "avdet/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "avdet/error.hpp"
#include "avdet/rng.hpp"
#include "avdet/tensor_io.hpp"

namespace avd::model {

namespace {

constexpr char kMagic[4] = {'F', 'F', 'M', '1'};

// The frozen FAU projection stands in for a pretrained encoder: its weights
// come from this fixed seed, never from the model seed, so every model
// instance shares the same "pretrained" parameters.
constexpr std::uint64_t kFauEncoderSeed = 0x4641553146524F5AULL;

// Fixed audio input conditioning (constant, never per-clip). Each band's
// audio_pool consecutive log-mel columns are re-expressed as their mean plus
// amplified column-to-column deltas; the shift-scale puts the [-10, ~3.5]
// log range onto an MLP-friendly scale. Delta features carry the within-frame
// envelope motion, which the log compression otherwise leaves far below
// feature scale.
constexpr double kAudioShift = 10.0;
constexpr double kAudioLevelScale = 1.0 / 3.0;
constexpr double kAudioDeltaScale = 2.0;

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Tensor xavier(Shape shape, Rng& rng, bool requires_grad) {
  const int fan_in = shape[0], fan_out = shape.size() > 1 ? shape[1] : shape[0];
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / (fan_in + fan_out)), requires_grad);
}

}  // namespace

int binary_label(corpus::ClipLabel l) { return corpus::is_real(l) ? 0 : 1; }
int audio_label(corpus::ClipLabel l) { return corpus::audio_is_fake(l) ? 1 : 0; }
int video_label(corpus::ClipLabel l) { return corpus::video_is_fake(l) ? 1 : 0; }

void ModelConfig::validate() const {
  if (t < 2) throw ConfigError("model: need at least 2 frames");
  if (latent < 1) throw ConfigError("model: latent width must be positive");
  if (enc_hidden < 1 || mlp_hidden < 1) throw ConfigError("model: hidden widths must be positive");
  if (audio_pool < 1) throw ConfigError("model: audio_pool must be positive");
  if (lambda_av < 0.0 || lambda_a < 0.0 || lambda_v < 0.0)
    throw ConfigError("model: loss weights must be non-negative");
  if (video_feature_dim < 1 || fau_dim < 1) throw ConfigError("model: feature dims must be positive");
  // T * audio_pool must equal the mel frame count of a clip waveform:
  // frames = duration / hop = (T / fps) / 0.010.
  const double frames = (static_cast<double>(t) / corpus::kFramesPerSecond) / audio::kHopSeconds;
  if (std::lround(frames) != static_cast<long>(t) * audio_pool)
    throw ConfigError("model: T * audio_pool must equal the mel frame count (" +
                      std::to_string(std::lround(frames)) + ")");
}

std::string ModelConfig::canonical_text() const {
  std::ostringstream os;
  os << "format=avdet-model-v1\n";
  os << "t=" << t << "\n";
  os << "latent=" << latent << "\n";
  os << "enc_hidden=" << enc_hidden << "\n";
  os << "mlp_hidden=" << mlp_hidden << "\n";
  os << "audio_pool=" << audio_pool << "\n";
  os << "head_mode=" << (head_mode == HeadMode::FourClass ? "fourclass" : "binary") << "\n";
  os << "lambda_av=" << fmt_g17(lambda_av) << "\n";
  os << "lambda_a=" << fmt_g17(lambda_a) << "\n";
  os << "lambda_v=" << fmt_g17(lambda_v) << "\n";
  os << "mode=" << (mode == corpus::ClipMode::Raw ? "raw" : "feature") << "\n";
  os << "video_feature_dim=" << video_feature_dim << "\n";
  os << "fau_dim=" << fau_dim << "\n";
  os << "sample_rate=" << sample_rate << "\n";
  return os.str();
}

ModelConfig ModelConfig::parse_text(const std::string& text, std::string* note_out) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("model config: bad line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "format") {
      if (val != "avdet-model-v1") throw FormatError("model config: unknown format '" + val + "'");
    } else if (key == "t") cfg.t = std::stoi(val);
    else if (key == "latent") cfg.latent = std::stoi(val);
    else if (key == "enc_hidden") cfg.enc_hidden = std::stoi(val);
    else if (key == "mlp_hidden") cfg.mlp_hidden = std::stoi(val);
    else if (key == "audio_pool") cfg.audio_pool = std::stoi(val);
    else if (key == "head_mode") {
      if (val == "binary") cfg.head_mode = HeadMode::Binary;
      else if (val == "fourclass") cfg.head_mode = HeadMode::FourClass;
      else throw FormatError("model config: unknown head_mode '" + val + "'");
    } else if (key == "lambda_av") cfg.lambda_av = std::stod(val);
    else if (key == "lambda_a") cfg.lambda_a = std::stod(val);
    else if (key == "lambda_v") cfg.lambda_v = std::stod(val);
    else if (key == "mode") {
      if (val == "feature") cfg.mode = corpus::ClipMode::Feature;
      else if (val == "raw") cfg.mode = corpus::ClipMode::Raw;
      else throw FormatError("model config: unknown mode '" + val + "'");
    } else if (key == "video_feature_dim") cfg.video_feature_dim = std::stoi(val);
    else if (key == "fau_dim") cfg.fau_dim = std::stoi(val);
    else if (key == "sample_rate") cfg.sample_rate = std::stoi(val);
    else if (key == "note") { if (note_out) *note_out = val; }
    else throw FormatError("model config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  Rng rng(mix_seed(seed, 0x4D4F44454Cull));  // model stream

  const int l = cfg.latent, h = cfg.enc_hidden, hh = cfg.mlp_hidden;
  const int tt = cfg.t * cfg.t;

  m.a_w1_ = xavier({cfg.audio_in_dim(), h}, rng, true);
  m.a_b1_ = Tensor::zeros({h}, true);
  m.a_w2_ = xavier({h, l}, rng, true);
  m.a_b2_ = Tensor::zeros({l}, true);

  m.v_w1_ = xavier({cfg.video_in_dim(), h}, rng, true);
  m.v_b1_ = Tensor::zeros({h}, true);
  m.v_w2_ = xavier({h, l}, rng, true);
  m.v_b2_ = Tensor::zeros({l}, true);

  // Fusion projection starts at the zero map: at step 0 the fused stream
  // equals the plain video stream and the FAU contribution phases in.
  m.p_w_ = Tensor::zeros({l, l}, true);
  m.p_b_ = Tensor::zeros({l}, true);

  m.q_ = Tensor::randn({cfg.t, l}, rng, 1.0, true);

  m.ka_w_ = xavier({l, l}, rng, true);
  m.ka_b_ = Tensor::zeros({l}, true);
  m.va_w_ = xavier({l, l}, rng, true);
  m.va_b_ = Tensor::zeros({l}, true);
  m.kv_w_ = xavier({l, l}, rng, true);
  m.kv_b_ = Tensor::zeros({l}, true);
  m.vv_w_ = xavier({l, l}, rng, true);
  m.vv_b_ = Tensor::zeros({l}, true);

  const double sigma0 = 1.0 / std::sqrt(static_cast<double>(l));
  m.sigma_av_ = Tensor::scalar(sigma0, true);
  m.sigma_a_ = Tensor::scalar(sigma0, true);
  m.sigma_v_ = Tensor::scalar(sigma0, true);

  m.hav_w1_ = xavier({tt, hh}, rng, true);
  m.hav_b1_ = Tensor::zeros({hh}, true);
  m.hav_w2_ = xavier({hh, cfg.num_av_classes()}, rng, true);
  m.hav_b2_ = Tensor::zeros({cfg.num_av_classes()}, true);
  m.ha_w1_ = xavier({tt, hh}, rng, true);
  m.ha_b1_ = Tensor::zeros({hh}, true);
  m.ha_w2_ = xavier({hh, 2}, rng, true);
  m.ha_b2_ = Tensor::zeros({2}, true);
  m.hv_w1_ = xavier({tt, hh}, rng, true);
  m.hv_b1_ = Tensor::zeros({hh}, true);
  m.hv_w2_ = xavier({hh, 2}, rng, true);
  m.hv_b2_ = Tensor::zeros({2}, true);

  // Frozen FAU projection, fixed seed, never trainable.
  Rng frng(kFauEncoderSeed);
  m.au_w1_ = xavier({cfg.fau_in_dim(), h}, frng, false);
  m.au_b1_ = Tensor::zeros({h}, false);
  m.au_w2_ = xavier({h, l}, frng, false);
  m.au_b2_ = Tensor::zeros({l}, false);

  return m;
}

std::vector<NamedParam> Model::named_params() const {
  return {
      {"audio_enc.w1", a_w1_, false},   {"audio_enc.b1", a_b1_, false},
      {"audio_enc.w2", a_w2_, false},   {"audio_enc.b2", a_b2_, false},
      {"video_enc.w1", v_w1_, false},   {"video_enc.b1", v_b1_, false},
      {"video_enc.w2", v_w2_, false},   {"video_enc.b2", v_b2_, false},
      {"fau_enc.w1", au_w1_, true},     {"fau_enc.b1", au_b1_, true},
      {"fau_enc.w2", au_w2_, true},     {"fau_enc.b2", au_b2_, true},
      {"fusion.w", p_w_, false},        {"fusion.b", p_b_, false},
      {"queries.q", q_, false},
      {"align.audio_key.w", ka_w_, false},   {"align.audio_key.b", ka_b_, false},
      {"align.audio_value.w", va_w_, false}, {"align.audio_value.b", va_b_, false},
      {"align.video_key.w", kv_w_, false},   {"align.video_key.b", kv_b_, false},
      {"align.video_value.w", vv_w_, false}, {"align.video_value.b", vv_b_, false},
      {"pool.sigma_av", sigma_av_, false},
      {"pool.sigma_a", sigma_a_, false},
      {"pool.sigma_v", sigma_v_, false},
      {"head_av.w1", hav_w1_, false},   {"head_av.b1", hav_b1_, false},
      {"head_av.w2", hav_w2_, false},   {"head_av.b2", hav_b2_, false},
      {"head_a.w1", ha_w1_, false},     {"head_a.b1", ha_b1_, false},
      {"head_a.w2", ha_w2_, false},     {"head_a.b2", ha_b2_, false},
      {"head_v.w1", hv_w1_, false},     {"head_v.b1", hv_b1_, false},
      {"head_v.w2", hv_w2_, false},     {"head_v.b2", hv_b2_, false},
  };
}

Tensor Model::prepare_audio(const Tensor& mel_grid) const {
  if (mel_grid.rank() != 2 || mel_grid.rows() != audio::kMelBands)
    throw ConfigError("prepare_audio: expected a [80 x F] mel grid, got " +
                      shape_str(mel_grid.shape()));
  const int frames = mel_grid.cols();
  if (frames != cfg_.t * cfg_.audio_pool)
    throw ConfigError("prepare_audio: " + std::to_string(frames) + " mel frames for T=" +
                      std::to_string(cfg_.t) + ", pool=" + std::to_string(cfg_.audio_pool));
  const int pool = cfg_.audio_pool;
  const int din = cfg_.audio_in_dim();
  Tensor out = Tensor::zeros({cfg_.t, din});
  auto& o = out.data();
  const auto& g = mel_grid.data();
  for (int i = 0; i < cfg_.t; ++i)
    for (int m = 0; m < audio::kMelBands; ++m) {
      const double* col = g.data() + static_cast<std::size_t>(m) * frames +
                          static_cast<std::size_t>(i) * pool;
      double* slot = o.data() + static_cast<std::size_t>(i) * din + static_cast<std::size_t>(m) * pool;
      double mean = 0.0;
      for (int p = 0; p < pool; ++p) mean += col[p];
      mean /= pool;
      slot[0] = (mean + kAudioShift) * kAudioLevelScale;
      for (int p = 1; p < pool; ++p) slot[p] = (col[p] - col[p - 1]) * kAudioDeltaScale;
    }
  return out;
}

PreparedClip Model::prepare(const corpus::AVClip& clip) const {
  const audio::MelSpectrogram mel = audio::log_mel(clip.waveform);
  return prepare_visual(clip, prepare_audio(mel.grid));
}

PreparedClip Model::prepare_visual(const corpus::AVClip& clip, const Tensor& audio_in) const {
  if (clip.mode != cfg_.mode) throw ConfigError("prepare: clip mode does not match model config");
  if (clip.t != cfg_.t)
    throw ConfigError("prepare: clip has T=" + std::to_string(clip.t) + ", model expects T=" +
                      std::to_string(cfg_.t));
  PreparedClip out;
  out.audio_in = audio_in;
  out.label = clip.label;
  if (cfg_.mode == corpus::ClipMode::Feature) {
    if (clip.video.rank() != 2 || clip.video.cols() != cfg_.video_feature_dim)
      throw ConfigError("prepare: video features " + shape_str(clip.video.shape()) +
                        " do not match configured dim " + std::to_string(cfg_.video_feature_dim));
    out.video_in = clip.video;
    if (clip.fau.rank() != 2 || clip.fau.cols() != cfg_.fau_dim)
      throw ConfigError("prepare: fau features " + shape_str(clip.fau.shape()) +
                        " do not match configured dim " + std::to_string(cfg_.fau_dim));
    out.fau_in = clip.fau;
  } else {
    if (clip.video.rank() != 4)
      throw ConfigError("prepare: raw clips carry [T x 1 x 16 x 16] frames, got " +
                        shape_str(clip.video.shape()));
    // Flatten each frame; in raw mode the FAU encoder reads the frames too.
    Tensor flat = Tensor::zeros({cfg_.t, cfg_.video_in_dim()});
    flat.data() = clip.video.data();
    out.video_in = flat;
    out.fau_in = flat;
  }
  return out;
}

Tensor Model::encoder_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                          const Tensor& b2) const {
  return linear(relu(linear(x, w1, b1)), w2, b2);
}

Tensor Model::encode_audio(const Tensor& audio_in) const {
  if (audio_in.rank() != 2 || audio_in.cols() != cfg_.audio_in_dim())
    throw ConfigError("encode_audio: input " + shape_str(audio_in.shape()) +
                      " does not match [T x " + std::to_string(cfg_.audio_in_dim()) + "]");
  return encoder_mlp(audio_in, a_w1_, a_b1_, a_w2_, a_b2_);
}

Tensor Model::encode_video(const Tensor& video_in) const {
  if (video_in.rank() != 2 || video_in.cols() != cfg_.video_in_dim())
    throw ConfigError("encode_video: input " + shape_str(video_in.shape()) +
                      " does not match [T x " + std::to_string(cfg_.video_in_dim()) + "]");
  return encoder_mlp(video_in, v_w1_, v_b1_, v_w2_, v_b2_);
}

Tensor Model::encode_fau(const Tensor& fau_in) const {
  if (fau_in.rank() != 2 || fau_in.cols() != cfg_.fau_in_dim())
    throw ConfigError("encode_fau: input " + shape_str(fau_in.shape()) + " does not match [T x " +
                      std::to_string(cfg_.fau_in_dim()) + "]");
  return encoder_mlp(fau_in, au_w1_, au_b1_, au_w2_, au_b2_);
}

Tensor Model::fuse(const Tensor& z_vid, const Tensor& z_au) const {
  if (z_vid.shape() != z_au.shape())
    throw DimensionError("fuse: " + shape_str(z_vid.shape()) + " vs " + shape_str(z_au.shape()));
  return add(z_vid, linear(z_au, p_w_, p_b_));
}

Aligned Model::align(const Tensor& z_a, const Tensor& z_v) const {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.latent));
  Aligned out;
  const Tensor k_a = linear(z_a, ka_w_, ka_b_);
  const Tensor v_a = linear(z_a, va_w_, va_b_);
  const Tensor k_v = linear(z_v, kv_w_, kv_b_);
  const Tensor v_v = linear(z_v, vv_w_, vv_b_);
  out.att_a = softmax_rows(mul_scalar(matmul(q_, transpose(k_a)), inv_sqrt_d));
  out.att_v = softmax_rows(mul_scalar(matmul(q_, transpose(k_v)), inv_sqrt_d));
  out.z_aq = matmul(out.att_a, v_a);
  out.z_vq = matmul(out.att_v, v_v);
  return out;
}

Pooled Model::pool(const Tensor& z_aq, const Tensor& z_vq) const {
  Pooled out;
  out.gram_av = scale(matmul(z_aq, transpose(z_vq)), sigma_av_);
  out.gram_a = scale(matmul(z_aq, transpose(z_aq)), sigma_a_);
  out.gram_v = scale(matmul(z_vq, transpose(z_vq)), sigma_v_);
  out.m_av = softmax_rows(out.gram_av);
  out.m_a = softmax_rows(out.gram_a);
  out.m_v = softmax_rows(out.gram_v);
  return out;
}

Tensor Model::head_mlp(const Tensor& m, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                       const Tensor& b2) const {
  const Tensor row = reshape(flatten(m), {1, cfg_.t * cfg_.t});
  const Tensor logits = linear(relu(linear(row, w1, b1)), w2, b2);
  return reshape(logits, {logits.cols()});
}

Scores Model::predict(const Tensor& m_av, const Tensor& m_a, const Tensor& m_v) const {
  Scores s;
  s.s_av = head_mlp(m_av, hav_w1_, hav_b1_, hav_w2_, hav_b2_);
  s.s_a = head_mlp(m_a, ha_w1_, ha_b1_, ha_w2_, ha_b2_);
  s.s_v = head_mlp(m_v, hv_w1_, hv_b1_, hv_w2_, hv_b2_);
  return s;
}

ForwardOut Model::forward(const PreparedClip& in) const {
  ForwardOut out;
  out.z_a = encode_audio(in.audio_in);
  out.z_vid = encode_video(in.video_in);
  out.z_au = encode_fau(in.fau_in);
  out.z_v = fuse(out.z_vid, out.z_au);
  out.aligned = align(out.z_a, out.z_v);
  out.pooled = pool(out.aligned.z_aq, out.aligned.z_vq);
  out.scores = predict(out.pooled.m_av, out.pooled.m_a, out.pooled.m_v);
  return out;
}

LossBreakdown Model::total_loss(const std::vector<ForwardOut>& outs,
                                const std::vector<corpus::ClipLabel>& labels) const {
  if (outs.empty() || outs.size() != labels.size())
    throw UsageError("total_loss: batch of " + std::to_string(outs.size()) + " outputs vs " +
                     std::to_string(labels.size()) + " labels");
  std::vector<Tensor> rows_av, rows_a, rows_v;
  std::vector<int> y_av, y_a, y_v;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    rows_av.push_back(outs[i].scores.s_av);
    rows_a.push_back(outs[i].scores.s_a);
    rows_v.push_back(outs[i].scores.s_v);
    y_av.push_back(cfg_.head_mode == HeadMode::FourClass ? static_cast<int>(labels[i])
                                                         : binary_label(labels[i]));
    y_a.push_back(audio_label(labels[i]));
    y_v.push_back(video_label(labels[i]));
  }
  const Tensor ce_av = cross_entropy(concat_rows(rows_av), y_av);
  const Tensor ce_a = cross_entropy(concat_rows(rows_a), y_a);
  const Tensor ce_v = cross_entropy(concat_rows(rows_v), y_v);

  LossBreakdown lb;
  lb.value_av = ce_av.value();
  lb.value_a = ce_a.value();
  lb.value_v = ce_v.value();
  lb.total = add(add(mul_scalar(ce_av, cfg_.lambda_av), mul_scalar(ce_a, cfg_.lambda_a)),
                 mul_scalar(ce_v, cfg_.lambda_v));
  return lb;
}

std::vector<double> Model::infer(const corpus::AVClip& clip) const {
  NoGradGuard guard;
  const ForwardOut out = forward(prepare(clip));
  return softmax_vec(out.scores.s_av.data());
}

double Model::fake_score(const std::vector<double>& probs) const {
  return cfg_.head_mode == HeadMode::FourClass ? 1.0 - probs[0] : probs[1];
}

void Model::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write(kMagic, 4);
  std::string cfg_text = cfg_.canonical_text();
  if (!note_.empty()) cfg_text += "note=" + note_ + "\n";
  write_u32(os, static_cast<std::uint32_t>(cfg_text.size()));
  os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  const auto params = named_params();
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const NamedParam& p : params) {
    write_u16(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u8(os, p.frozen ? 1 : 0);
    write_tensor(os, p.tensor, DType::F64);
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic in " + path.string() + ": expected 'FFM1'");
  const std::uint32_t cfg_len = read_u32(is);
  if (cfg_len > (1u << 20)) throw FormatError("implausible config block size");
  std::string cfg_text(cfg_len, '\0');
  read_exact(is, cfg_text.data(), cfg_len);
  std::string note;
  const ModelConfig cfg = ModelConfig::parse_text(cfg_text, &note);

  Model m = Model::init(cfg, 0);  // shapes only; every tensor is overwritten below
  m.note_ = note;
  auto params = m.named_params();
  const std::uint32_t count = read_u32(is);
  if (count != params.size())
    throw FormatError("checkpoint lists " + std::to_string(count) + " tensors, expected " +
                      std::to_string(params.size()));
  for (NamedParam& p : params) {
    const std::uint16_t name_len = read_u16(is);
    std::string name(name_len, '\0');
    read_exact(is, name.data(), name_len);
    if (name != p.name)
      throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    const std::uint8_t frozen = read_u8(is);
    if ((frozen != 0) != p.frozen)
      throw FormatError("checkpoint frozen flag mismatch for '" + name + "'");
    Tensor t = read_tensor(is);
    if (t.shape() != p.tensor.shape())
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                        ", expected " + shape_str(p.tensor.shape()));
    p.tensor.data() = t.data();
  }
  return m;
}

}  // namespace avd::model

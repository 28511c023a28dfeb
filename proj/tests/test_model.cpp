#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "avdet/corpus.hpp"
#include "avdet/model.hpp"
#include "avdet/train.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace avd;
using namespace avd::model;

namespace {

ModelConfig small_cfg(int t = 8, int latent = 16) {
  ModelConfig cfg;
  cfg.t = t;
  cfg.latent = latent;
  cfg.enc_hidden = 16;
  cfg.mlp_hidden = 32;
  cfg.head_mode = HeadMode::FourClass;
  return cfg;
}

corpus::AVClip small_clip(std::uint64_t seed, corpus::ClipLabel label, int t = 8) {
  corpus::GenConfig gen;
  gen.t = t;
  return corpus::generate_clip(seed, label, gen);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("encode_audio shapes and bias propagation") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 1);

  // T=25-pooling contract on the paper-sized grid
  ModelConfig big;
  big.t = 25;
  big.latent = 32;
  big.enc_hidden = 8;
  big.mlp_hidden = 8;
  auto mbig = Model::init(big, 1);
  Tensor grid = Tensor::zeros({80, 100});
  Tensor a_in = mbig.prepare_audio(grid);
  CHECK(a_in.shape() == Shape{25, 320});
  Tensor z = mbig.encode_audio(a_in);
  CHECK(z.shape() == Shape{25, 32});

  // constant grid -> all rows equal
  for (int i = 1; i < 25; ++i)
    for (int j = 0; j < 32; ++j) CHECK(z.at(i, j) == z.at(0, j));

  // frame-count mismatch
  Tensor bad = Tensor::zeros({80, 96});
  CHECK_THROWS_AS(mbig.prepare_audio(bad), ConfigError);
}

TEST_CASE("encoder gradients match finite differences (T=4, L=8)") {
  ModelConfig cfg;
  cfg.t = 4;
  cfg.latent = 8;
  cfg.enc_hidden = 8;
  cfg.mlp_hidden = 8;
  auto m = Model::init(cfg, 2);
  auto clip = small_clip(11, corpus::ClipLabel::RealAudioRealVideo, 4);
  const PreparedClip in = m.prepare(clip);

  auto loss_fn = [&] {
    std::vector<ForwardOut> outs{m.forward(in)};
    return m.total_loss(outs, {clip.label}).total;
  };
  loss_fn().backward();

  for (auto& p : m.named_params()) {
    if (p.frozen) continue;
    if (p.name.rfind("audio_enc", 0) != 0) continue;
    const std::vector<double> analytic = p.tensor.grad();
    const std::vector<double> numeric =
        finite_diff_grad([&] { return loss_fn().value(); }, p.tensor);
    // 1e-3 floor: differences below ~1e-9 absolute are finite-difference noise
    CHECK(oracle::max_rel_err(analytic, numeric, 1e-3) < 1e-6);
  }
}

TEST_CASE("frozen FAU encoder: bit-identical output after a step, no gradient") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 3);
  auto clip = small_clip(21, corpus::ClipLabel::RealAudioFakeVideo);
  const PreparedClip in = m.prepare(clip);

  const std::vector<double> before = m.encode_fau(in.fau_in).data();

  // one training step
  std::vector<ForwardOut> outs{m.forward(in)};
  m.total_loss(outs, {clip.label}).total.backward();
  train::AdamW opt(m.named_params(), 1e-4);
  opt.step(1e-3);

  const std::vector<double> after = m.encode_fau(in.fau_in).data();
  CHECK(before == after);

  for (const auto& p : m.named_params())
    if (p.frozen) CHECK(!p.tensor.has_grad());
}

TEST_CASE("fusion starts as the identity on the video stream") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 4);
  auto clip = small_clip(31, corpus::ClipLabel::RealAudioRealVideo);
  const PreparedClip in = m.prepare(clip);
  Tensor z_vid = m.encode_video(in.video_in);
  Tensor z_au = m.encode_fau(in.fau_in);
  Tensor z_v = m.fuse(z_vid, z_au);
  CHECK(z_v.shape() == z_vid.shape());
  CHECK(z_v.data() == z_vid.data());  // zero-initialized projection

  // gradient flows into the projection weights on a random input
  sum(m.fuse(z_vid, z_au)).backward();
  bool any = false;
  auto params = m.named_params();
  for (auto& p : params)
    if (p.name == "fusion.w") {
      REQUIRE(p.tensor.has_grad());
      for (double g : p.tensor.grad()) any = any || g != 0.0;
    }
  CHECK(any);
  for (auto& p : params)
    if (p.tensor.has_grad()) p.tensor.clear_grad();
}

TEST_CASE("query-shared alignment: stochastic rows, constant-key collapse, Q sharing") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 5);
  auto clip = small_clip(41, corpus::ClipLabel::FakeAudioFakeVideo);
  const PreparedClip in = m.prepare(clip);
  Tensor z_a = m.encode_audio(in.audio_in);
  Tensor z_v = m.fuse(m.encode_video(in.video_in), m.encode_fau(in.fau_in));
  Aligned al = m.align(z_a, z_v);

  for (int i = 0; i < cfg.t; ++i) {
    double s = 0.0;
    for (int j = 0; j < cfg.t; ++j) s += al.att_a.at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  // constant keys: every query sees the same distribution -> all rows equal
  Tensor z_const = Tensor::zeros({cfg.t, cfg.latent});
  for (int i = 0; i < cfg.t; ++i)
    for (int j = 0; j < cfg.latent; ++j) z_const.data()[static_cast<std::size_t>(i) * cfg.latent + j] = 0.3 * j;
  Aligned alc = m.align(z_const, z_v);
  for (int i = 1; i < cfg.t; ++i)
    for (int j = 0; j < cfg.latent; ++j) CHECK(alc.z_aq.at(i, j) == doctest::Approx(alc.z_aq.at(0, j)).epsilon(1e-12));

  // perturbing Q moves both aligned outputs
  Tensor q;
  for (auto& p : m.named_params())
    if (p.name == "queries.q") q = p.tensor;
  auto out_a = [&] { return sum(m.align(z_a, z_v).z_aq).value(); };
  auto out_v = [&] { return sum(m.align(z_a, z_v).z_vq).value(); };
  const auto ga = finite_diff_grad(out_a, q);
  const auto gv = finite_diff_grad(out_v, q);
  double na = 0.0, nv = 0.0;
  for (double g : ga) na += std::abs(g);
  for (double g : gv) nv += std::abs(g);
  CHECK(na > 0.0);
  CHECK(nv > 0.0);
}

TEST_CASE("temporal pooling: stochastic rows, symmetric grams, sigma=0 uniformity") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 6);
  auto clip = small_clip(51, corpus::ClipLabel::RealAudioRealVideo);
  const PreparedClip in = m.prepare(clip);
  ForwardOut out = m.forward(in);

  for (const Tensor* mt : {&out.pooled.m_av, &out.pooled.m_a, &out.pooled.m_v})
    for (int i = 0; i < cfg.t; ++i) {
      double s = 0.0;
      for (int j = 0; j < cfg.t; ++j) s += mt->at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }

  for (const Tensor* g : {&out.pooled.gram_a, &out.pooled.gram_v})
    for (int i = 0; i < cfg.t; ++i)
      for (int j = 0; j < cfg.t; ++j) CHECK(std::abs(g->at(i, j) - g->at(j, i)) < 1e-12);

  // sigma_av = 0 collapses M_av to the uniform stochastic matrix
  for (auto& p : m.named_params())
    if (p.name == "pool.sigma_av") p.tensor.data()[0] = 0.0;
  ForwardOut out2 = m.forward(in);
  for (int i = 0; i < cfg.t; ++i)
    for (int j = 0; j < cfg.t; ++j)
      CHECK(std::abs(out2.pooled.m_av.at(i, j) - 1.0 / cfg.t) < 1e-12);
}

TEST_CASE("heads: four-class width, isolation, logits finite") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 7);
  auto clip = small_clip(61, corpus::ClipLabel::FakeAudioRealVideo);
  const PreparedClip in = m.prepare(clip);
  ForwardOut out = m.forward(in);
  CHECK(out.scores.s_av.shape() == Shape{4});
  CHECK(out.scores.s_a.shape() == Shape{2});
  CHECK(out.scores.s_v.shape() == Shape{2});
  for (const Tensor* s : {&out.scores.s_av, &out.scores.s_a, &out.scores.s_v})
    for (double v : s->data()) CHECK(std::isfinite(v));

  // backward through the multimodal cross entropy alone: unimodal heads untouched
  cross_entropy(reshape(out.scores.s_av, {1, 4}), {static_cast<int>(clip.label)}).backward();
  auto params = m.named_params();
  for (auto& p : params) {
    if (p.name.rfind("head_a.", 0) == 0 || p.name.rfind("head_v.", 0) == 0)
      CHECK(!p.tensor.has_grad());
    if (p.tensor.has_grad()) p.tensor.clear_grad();
  }

  ModelConfig bin = small_cfg();
  bin.head_mode = HeadMode::Binary;
  auto mb = Model::init(bin, 7);
  CHECK(mb.forward(mb.prepare(clip)).scores.s_av.shape() == Shape{2});
}

TEST_CASE("total loss: weighted sum, zero-lambda head gradients, uniform-logit value") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 8);
  std::vector<corpus::ClipLabel> labels{corpus::ClipLabel::RealAudioRealVideo,
                                        corpus::ClipLabel::FakeAudioFakeVideo};
  std::vector<PreparedClip> prepared;
  std::vector<ForwardOut> outs;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    prepared.push_back(m.prepare(small_clip(70 + i, labels[i])));
    outs.push_back(m.forward(prepared[i]));
  }
  LossBreakdown lb = m.total_loss(outs, labels);
  CHECK(std::abs(lb.total.value() -
                 (0.8 * lb.value_av + 0.1 * lb.value_a + 0.1 * lb.value_v)) < 1e-12);

  // lambda_a = lambda_v = 0: unimodal head gradients exactly zero
  ModelConfig cfg0 = small_cfg();
  cfg0.lambda_a = 0.0;
  cfg0.lambda_v = 0.0;
  auto m0 = Model::init(cfg0, 8);
  std::vector<ForwardOut> outs0;
  for (std::size_t i = 0; i < labels.size(); ++i) outs0.push_back(m0.forward(prepared[i]));
  m0.total_loss(outs0, labels).total.backward();
  auto params0 = m0.named_params();
  for (auto& p : params0) {
    if (p.name.rfind("head_a.", 0) == 0 || p.name.rfind("head_v.", 0) == 0) {
      REQUIRE(p.tensor.has_grad());
      for (double g : p.tensor.grad()) CHECK(g == 0.0);
    }
    if (p.tensor.has_grad()) p.tensor.clear_grad();
  }

  // zeroed heads => uniform logits => binary loss = ln 2 exactly by the weights
  ModelConfig binc = small_cfg();
  binc.head_mode = HeadMode::Binary;
  auto mbin = Model::init(binc, 9);
  for (auto& p : mbin.named_params())
    if (p.name.rfind("head_", 0) == 0)
      for (double& v : p.tensor.data()) v = 0.0;
  std::vector<ForwardOut> outs_b;
  for (std::size_t i = 0; i < labels.size(); ++i) outs_b.push_back(mbin.forward(prepared[i]));
  LossBreakdown lb_b = mbin.total_loss(outs_b, labels);
  CHECK(std::abs(lb_b.total.value() - std::log(2.0)) < 1e-12);
}

TEST_CASE("inference reads only the multimodal head") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 10);
  auto clip = small_clip(81, corpus::ClipLabel::RealAudioFakeVideo);
  const auto before = m.infer(clip);
  CHECK(before.size() == 4);
  double s = 0.0;
  for (double p : before) s += p;
  CHECK(std::abs(s - 1.0) < 1e-12);

  for (auto& p : m.named_params())
    if (p.name.rfind("head_a.", 0) == 0 || p.name.rfind("head_v.", 0) == 0)
      for (double& v : p.tensor.data()) v += 3.21;
  CHECK(m.infer(clip) == before);
}

TEST_CASE("softmax shift invariance of the final score") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 11);
  auto clip = small_clip(91, corpus::ClipLabel::FakeAudioFakeVideo);
  NoGradGuard guard;
  ForwardOut out = m.forward(m.prepare(clip));
  std::vector<double> logits = out.scores.s_av.data();
  const auto base = softmax_vec(logits);
  for (double& v : logits) v += 123.456;
  const auto shifted = softmax_vec(logits);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(std::abs(base[i] - shifted[i]) < 1e-12);
}

TEST_CASE("staged operations compose to forward() bit-exactly") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 12);
  auto clip = small_clip(101, corpus::ClipLabel::FakeAudioRealVideo);
  const PreparedClip in = m.prepare(clip);

  ForwardOut direct = m.forward(in);

  Tensor z_a = m.encode_audio(in.audio_in);
  Tensor z_vid = m.encode_video(in.video_in);
  Tensor z_au = m.encode_fau(in.fau_in);
  Tensor z_v = m.fuse(z_vid, z_au);
  Aligned al = m.align(z_a, z_v);
  Pooled po = m.pool(al.z_aq, al.z_vq);
  Scores sc = m.predict(po.m_av, po.m_a, po.m_v);

  CHECK(sc.s_av.data() == direct.scores.s_av.data());
  CHECK(sc.s_a.data() == direct.scores.s_a.data());
  CHECK(sc.s_v.data() == direct.scores.s_v.data());
}

TEST_CASE("paper-sized pipeline shapes: T=25, L=512") {
  ModelConfig cfg;
  cfg.t = 25;
  cfg.latent = 512;
  cfg.enc_hidden = 16;
  cfg.mlp_hidden = 64;
  auto m = Model::init(cfg, 13);
  auto clip = small_clip(111, corpus::ClipLabel::RealAudioRealVideo, 25);
  NoGradGuard guard;
  ForwardOut out = m.forward(m.prepare(clip));
  CHECK(out.aligned.z_aq.shape() == Shape{25, 512});
  CHECK(out.pooled.m_av.shape() == Shape{25, 25});
  CHECK(flatten(out.pooled.m_av).shape() == Shape{625});
}

TEST_CASE("checkpoint round trip is bit-exact and double-saves byte-identical files") {
  auto cfg = small_cfg();
  auto m = Model::init(cfg, 14);
  m.set_note("unit test");
  const auto p1 = std::filesystem::temp_directory_path() / "avdet_ckpt1.ffm";
  const auto p2 = std::filesystem::temp_directory_path() / "avdet_ckpt2.ffm";
  m.save(p1);
  Model back = Model::load(p1);
  back.save(p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(!s1.str().empty());

  const auto pa = m.named_params();
  const auto pb = back.named_params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.data() == pb[i].tensor.data());
  }
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("end-to-end gradient check at T=8, L=16") {
  const auto report = train::gradcheck(8, 16, 2, 7);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.coords_checked > 1000);
}

}  // TEST_SUITE

#include <cmath>
#include <filesystem>
#include <fstream>

#include "avdet/corpus.hpp"
#include "avdet/error.hpp"
#include "avdet/model.hpp"
#include "avdet/train.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace avd;
using namespace avd::corpus;

namespace {

bool clips_equal(const AVClip& a, const AVClip& b) {
  return a.label == b.label && a.seed == b.seed && a.mode == b.mode && a.t == b.t &&
         a.video.shape() == b.video.shape() && a.video.data() == b.video.data() &&
         a.fau.data() == b.fau.data() && a.waveform.samples == b.waveform.samples;
}

std::filesystem::path tmp_file(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("same seed, label and config regenerate the clip bit-exactly") {
  GenConfig cfg;
  AVClip a = generate_clip(1234, ClipLabel::FakeAudioRealVideo, cfg);
  AVClip b = generate_clip(1234, ClipLabel::FakeAudioRealVideo, cfg);
  CHECK(clips_equal(a, b));

  cfg.mode = ClipMode::Raw;
  AVClip c = generate_clip(99, ClipLabel::FakeAudioFakeVideo, cfg);
  AVClip d = generate_clip(99, ClipLabel::FakeAudioFakeVideo, cfg);
  CHECK(clips_equal(c, d));
  CHECK(c.video.rank() == 4);
}

TEST_CASE("coupled clips correlate, decoupled clips do not (Monte Carlo, 500 seeds)") {
  GenConfig cfg;
  double coupled = 0.0, decoupled = 0.0;
  for (int s = 0; s < 500; ++s) {
    coupled += envelope_video_correlation(
        generate_clip(mix_seed(777, s), ClipLabel::RealAudioRealVideo, cfg));
    decoupled += envelope_video_correlation(
        generate_clip(mix_seed(778, s), ClipLabel::RealAudioFakeVideo, cfg));
  }
  coupled /= 500.0;
  decoupled /= 500.0;
  CHECK(coupled > 0.8);
  CHECK(std::abs(decoupled) < 0.2);
}

TEST_CASE("raw-mode pixels stay in [0,1]") {
  GenConfig cfg;
  cfg.mode = ClipMode::Raw;
  AVClip c = generate_clip(5, ClipLabel::RealAudioRealVideo, cfg);
  for (double v : c.video.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (double v : c.fau.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("corpus round trip is bit-exact and the manifest matches a recount") {
  GenConfig cfg;
  cfg.t = 8;
  const auto clips = generate_corpus(10, 31, cfg);
  const auto path = tmp_file("avdet_corpus_rt.ffc");
  write_corpus(clips, path, cfg.mode, cfg.t);
  const auto back = read_corpus(path);
  REQUIRE(back.size() == clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) CHECK(clips_equal(clips[i], back[i]));

  // manifest histogram equals a brute-force recount
  long counts[4] = {0, 0, 0, 0};
  for (const auto& c : back) counts[static_cast<int>(c.label)]++;
  std::ifstream mf(path.string() + ".manifest");
  REQUIRE(mf.good());
  std::string line;
  long seen[4] = {-1, -1, -1, -1};
  while (std::getline(mf, line)) {
    for (int k = 0; k < 4; ++k) {
      const std::string key = std::string("label_") + label_name(static_cast<ClipLabel>(k)) + "=";
      if (line.rfind(key, 0) == 0) seen[k] = std::stol(line.substr(key.size()));
    }
  }
  for (int k = 0; k < 4; ++k) CHECK(seen[k] == counts[k]);

  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

TEST_CASE("empty corpus file is valid") {
  GenConfig cfg;
  const auto path = tmp_file("avdet_corpus_empty.ffc");
  write_corpus({}, path, cfg.mode, cfg.t);
  CHECK(read_corpus(path).empty());
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

TEST_CASE("wrong magic and truncation are rejected with offsets") {
  const auto path = tmp_file("avdet_corpus_bad.ffc");
  std::ofstream(path, std::ios::binary) << "XXXXjunkjunkjunk";
  CHECK_THROWS_AS(read_corpus(path), FormatError);

  GenConfig cfg;
  cfg.t = 8;
  const auto clips = generate_corpus(2, 7, cfg);
  write_corpus(clips, path, cfg.mode, cfg.t);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 33);
  try {
    read_corpus(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

TEST_CASE("import_features rejects raw corpora, T mismatch raises a config error") {
  GenConfig cfg;
  cfg.t = 8;
  cfg.mode = ClipMode::Raw;
  const auto path = tmp_file("avdet_corpus_raw.ffc");
  write_corpus(generate_corpus(2, 8, cfg), path, cfg.mode, cfg.t);
  CHECK_THROWS_AS(import_features(path), FormatError);

  cfg.mode = ClipMode::Feature;
  write_corpus(generate_corpus(2, 8, cfg), path, cfg.mode, cfg.t);
  const auto clips = import_features(path);
  model::ModelConfig mc;
  mc.t = 25;  // model expects 25 frames, corpus has 8
  mc.latent = 8;
  mc.enc_hidden = 8;
  mc.mlp_hidden = 8;
  auto m = model::Model::init(mc, 1);
  CHECK_THROWS_AS(m.prepare(clips[0]), ConfigError);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

TEST_CASE("class balance: 4N clips hold exactly N per label") {
  GenConfig cfg;
  cfg.t = 4;
  const auto clips = generate_corpus(48, 9, cfg);
  long counts[4] = {0, 0, 0, 0};
  for (const auto& c : clips) counts[static_cast<int>(c.label)]++;
  for (long n : counts) CHECK(n == 12);
}

TEST_CASE("consecutive seeds give uncorrelated drivers on average") {
  GenConfig cfg;
  double mean_corr = 0.0;
  const int pairs = 300;
  for (int s = 0; s < pairs; ++s) {
    AVClip a = generate_clip(mix_seed(50, s), ClipLabel::RealAudioRealVideo, cfg);
    AVClip b = generate_clip(mix_seed(50, s + 1), ClipLabel::RealAudioRealVideo, cfg);
    // channel 0 is the driver plus small noise
    std::vector<double> da(static_cast<std::size_t>(cfg.t)), db(static_cast<std::size_t>(cfg.t));
    for (int i = 0; i < cfg.t; ++i) {
      da[static_cast<std::size_t>(i)] = a.video.at(i, 0);
      db[static_cast<std::size_t>(i)] = b.video.at(i, 0);
    }
    mean_corr += oracle::pearson(da, db);
  }
  mean_corr /= pairs;
  // stream separation: no systematic correlation between neighboring seeds
  CHECK(std::abs(mean_corr) < 0.2);
}

TEST_CASE("re-imported corpus trains to the identical loss curve") {
  GenConfig cfg;
  cfg.t = 8;
  const auto clips = generate_corpus(16, 22, cfg);
  const auto path = tmp_file("avdet_corpus_reimport.ffc");
  write_corpus(clips, path, cfg.mode, cfg.t);
  const auto imported = import_features(path);

  model::ModelConfig mc;
  mc.t = 8;
  mc.latent = 16;
  mc.enc_hidden = 16;
  mc.mlp_hidden = 16;
  train::TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 8;
  tc.seed = 5;

  const auto dir_a = tmp_file("avdet_reimport_a");
  const auto dir_b = tmp_file("avdet_reimport_b");
  auto ma = model::Model::init(mc, 3);
  auto mb = model::Model::init(mc, 3);
  train::train(ma, clips, tc, dir_a);
  train::train(mb, imported, tc, dir_b);

  std::ifstream la(dir_a / "loss.log"), lb(dir_b / "loss.log");
  std::stringstream sa, sb;
  sa << la.rdbuf();
  sb << lb.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK(!sa.str().empty());

  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

}  // TEST_SUITE

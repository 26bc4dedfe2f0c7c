#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "pseg/config.hpp"

using namespace pseg;

TEST_CASE("an empty config keeps the defaults") {
  const AppConfig cfg = parse_config_text("# only comments\n\n");
  CHECK(cfg.classes == 3);
  CHECK(cfg.tau == 0.07f);
  CHECK(cfg.tokens_per_class == 2);
  CHECK(cfg.r_dense == 128);
  CHECK(cfg.r_sparse == 128);
  CHECK(cfg.learning_rate == 0.001f);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.pcl_enabled);
  CHECK(!cfg.fixed_prototypes);
}

TEST_CASE("values parse with whitespace and comments") {
  const AppConfig cfg = parse_config_text(
      "# run setup\n"
      "classes = 5\n"
      "  snr\t=\t8.5  \n"
      "pcl_enabled=false\n"
      "train_manifest=data/train.tsv\n"
      "seed=42\n");
  CHECK(cfg.classes == 5);
  CHECK(cfg.snr == 8.5f);
  CHECK(!cfg.pcl_enabled);
  CHECK(cfg.train_manifest == "data/train.tsv");
  CHECK(cfg.seed == 42);
}

TEST_CASE("parse-then-reserialize is idempotent") {
  const std::string text =
      "classes=4\nheight=10\nsnr=3.75\ntau=0.07\nlearning_rate=0.0001\npcl_enabled=true\n"
      "train_manifest=x.tsv\nseed=666\n";
  const std::string once = serialize_config(parse_config_text(text));
  const std::string twice = serialize_config(parse_config_text(once));
  CHECK(once == twice);
  const AppConfig a = parse_config_text(text);
  const AppConfig b = parse_config_text(once);
  CHECK(a.classes == b.classes);
  CHECK(a.snr == b.snr);
  CHECK(a.tau == b.tau);
  CHECK(a.learning_rate == b.learning_rate);
  CHECK(a.seed == b.seed);
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS((void)parse_config_text("foo=1\n"), doctest::Contains("foo"), Error);
  try {
    (void)parse_config_text("classes=3\nfoo=1\n");
    FAIL("expected config-error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrCode::Config);
    CHECK(std::string(e.what()).find("unknown key") != std::string::npos);
  }
}

TEST_CASE("duplicate keys are rejected") {
  CHECK_THROWS_WITH_AS((void)parse_config_text("classes=3\nclasses=4\n"), doctest::Contains("duplicate"),
                       Error);
}

TEST_CASE("malformed values are config errors") {
  CHECK_THROWS_AS((void)parse_config_text("classes=three\n"), Error);
  CHECK_THROWS_AS((void)parse_config_text("snr=fast\n"), Error);
  CHECK_THROWS_AS((void)parse_config_text("pcl_enabled=maybe\n"), Error);
  CHECK_THROWS_AS((void)parse_config_text("classes\n"), Error);
  CHECK_THROWS_AS((void)parse_config_text("seed=-3\n"), Error);
}

TEST_CASE("derived configurations carry the right fields") {
  const AppConfig cfg = parse_config_text(
      "classes=4\nheight=12\nwidth=10\nchannels=24\nsamples=16\nsnr=6\nseed=9\n"
      "tokens_per_class=3\nr_dense=64\nr_sparse=32\nlearning_rate=0.01\nbatch_size=8\n"
      "max_steps=50\ntau=0.2\nfixed_prototypes=true\ntrain_manifest=t.tsv\neval_manifest=e.tsv\n"
      "eval_interval=10\n");
  const SynthConfig synth = cfg.synth();
  CHECK(synth.classes == 4);
  CHECK(synth.height == 12);
  CHECK(synth.width == 10);
  CHECK(synth.channels == 24);
  CHECK(synth.samples == 16);
  CHECK(synth.snr == 6.0f);
  CHECK(synth.seed == 9);

  const ModelConfig model = cfg.model();
  CHECK(model.classes == 4);
  CHECK(model.channels == 24);
  CHECK(model.tokens_per_class == 3);
  CHECK(model.r_dense == 64);
  CHECK(model.r_sparse == 32);
  CHECK(model.head_dim() == 12);  // channels / 2 by default

  const TrainConfig train = cfg.train();
  CHECK(train.learning_rate == 0.01f);
  CHECK(train.batch_size == 8);
  CHECK(train.max_steps == 50);
  CHECK(train.tau == 0.2f);
  CHECK(train.fixed_prototypes);
  CHECK(train.train_manifest == "t.tsv");
  CHECK(train.eval_manifest == "e.tsv");
  CHECK(train.eval_interval == 10);
}

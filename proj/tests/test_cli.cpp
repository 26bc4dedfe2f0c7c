#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "pseg/config.hpp"
#include "pseg/data_io.hpp"
#include "pseg/encoder.hpp"
#include "pseg/model.hpp"

using namespace pseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("pseg_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const TempDir& dir, const std::string& args) {
  const std::string out_path = dir.file("__stdout.txt");
  const std::string err_path = dir.file("__stderr.txt");
  const std::string cmd =
      std::string(PSEG_CLI_PATH) + " " + args + " > " + out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WEXITSTATUS(status);
  std::ostringstream so, se;
  so << std::ifstream(out_path).rdbuf();
  se << std::ifstream(err_path).rdbuf();
  r.out = so.str();
  r.err = se.str();
  return r;
}

std::string tiny_config(const TempDir& dir, uint64_t seed, const std::string& extra = "") {
  const std::string path = dir.file("run.cfg");
  std::ofstream cfg(path);
  cfg << "classes=2\nheight=6\nwidth=6\nchannels=8\nsamples=8\nshapes_min=1\nshapes_max=2\n"
      << "snr=6\nseed=" << seed << "\ntokens_per_class=2\nr_dense=8\nr_sparse=8\ndecoder_layers=1\n"
      << "upscale=2\nlearning_rate=0.001\nbatch_size=4\nmax_steps=3\ntau=0.07\n"
      << "train_manifest=" << dir.file("data/manifest.tsv") << "\n"
      << "checkpoint_out=" << dir.file("ck.sscp") << "\n"
      << "history_out=" << dir.file("history.csv") << "\n"
      << extra;
  return path;
}

std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gen-data writes a loadable dataset and reports a summary") {
  TempDir dir("gen");
  const std::string cfg = tiny_config(dir, 5);
  const RunResult r = run_cli(dir, "gen-data " + cfg + " " + dir.file("data"));
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("samples=8") != std::string::npos);
  CHECK(r.out.find("classes=2") != std::string::npos);
  CHECK(r.out.find("bytes=") != std::string::npos);
  const Dataset ds = load_dataset(dir.file("data/manifest.tsv"));
  CHECK(ds.samples.size() == 8);
}

TEST_CASE("an unknown config key fails by name on standard error") {
  TempDir dir("badkey");
  std::ofstream(dir.file("bad.cfg")) << "foo=1\n";
  const RunResult r = run_cli(dir, "gen-data " + dir.file("bad.cfg") + " " + dir.file("data"));
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("foo") != std::string::npos);
}

TEST_CASE("train writes a checkpoint and per-step loss lines") {
  TempDir dir("train");
  const std::string cfg = tiny_config(dir, 7);
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  const RunResult r = run_cli(dir, "--deterministic-logs train " + cfg);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir.file("ck.sscp")));
  CHECK(fs::exists(dir.file("ck.sscp.cfg")));
  CHECK(fs::exists(dir.file("history.csv")));
  CHECK(r.out.find("step=1 dice=") != std::string::npos);
  CHECK(r.out.find("step=3 dice=") != std::string::npos);

  std::ostringstream hist;
  hist << std::ifstream(dir.file("history.csv")).rdbuf();
  CHECK(hist.str().find("step,dice,pcl,total,wall_ms") == 0);
}

TEST_CASE("zero training steps leave the checkpoint at initialization") {
  TempDir dir("zerosteps");
  const std::string cfg = tiny_config(dir, 11, "");
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  // rewrite with max_steps=0
  std::string text;
  {
    std::ostringstream buf;
    buf << std::ifstream(cfg).rdbuf();
    text = buf.str();
  }
  const size_t pos = text.find("max_steps=3");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, std::strlen("max_steps=3"), "max_steps=0");
  std::ofstream(cfg) << text;

  const RunResult r = run_cli(dir, "train " + cfg);
  CHECK(r.exit_code == 0);
  const ModelState loaded = load_checkpoint(dir.file("ck.sscp"));
  const ModelState fresh = ModelState::init(loaded.config(), 11);
  REQUIRE(loaded.params().size() == fresh.params().size());
  for (size_t i = 0; i < fresh.params().size(); ++i)
    CHECK(std::memcmp(loaded.params()[i].v.data(), fresh.params()[i].v.data(),
                      fresh.params()[i].v.size() * sizeof(float)) == 0);
  CHECK(loaded.step() == 0);
}

TEST_CASE("the same seed trains to byte-identical checkpoints") {
  TempDir dir("det");
  const std::string cfg = tiny_config(dir, 13);
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  REQUIRE(run_cli(dir, "train " + cfg + " --checkpoint " + dir.file("a.sscp")).exit_code == 0);
  REQUIRE(run_cli(dir, "train " + cfg + " --checkpoint " + dir.file("b.sscp")).exit_code == 0);
  CHECK(read_bytes(dir.file("a.sscp")) == read_bytes(dir.file("b.sscp")));
}

TEST_CASE("eval on a fresh checkpoint emits metrics inside the unit interval") {
  TempDir dir("eval");
  const std::string cfg = tiny_config(dir, 17);
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  REQUIRE(run_cli(dir, "train " + cfg).exit_code == 0);
  const RunResult r =
      run_cli(dir, "eval " + dir.file("ck.sscp") + " " + dir.file("data/manifest.tsv") + " " +
                      dir.file("metrics.csv"));
  CHECK(r.exit_code == 0);
  std::ifstream csv(dir.file("metrics.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "metric,class,value");
  bool saw_challenge = false;
  while (std::getline(csv, line)) {
    const size_t comma = line.rfind(',');
    const double value = std::stod(line.substr(comma + 1));
    CHECK(value >= 0.0);
    CHECK(value <= 1.0);
    if (line.rfind("challenge_iou", 0) == 0) saw_challenge = true;
  }
  CHECK(saw_challenge);
}

TEST_CASE("a missing checkpoint path fails with exit 1") {
  TempDir dir("missck");
  std::ofstream(dir.file("manifest.tsv")) << "";
  const RunResult r =
      run_cli(dir, "eval " + dir.file("nope.sscp") + " " + dir.file("manifest.tsv") + " " +
                      dir.file("m.csv"));
  CHECK(r.exit_code == 1);
}

TEST_CASE("gradcheck passes at a reduced scale and lists the trainable groups") {
  TempDir dir("grad");
  const RunResult r = run_cli(
      dir, "--deterministic-logs gradcheck --seed 1 --height 3 --width 3 --channels 4 --classes 2 "
           "--tokens 1 --r-dense 3 --r-sparse 3 --layers 1");
  CHECK(r.exit_code == 0);
  for (const char* group : {"prototypes", "dense_mlp", "sparse_mlp", "decoder", "output_tokens"})
    CHECK(r.out.find(std::string("group=") + group + " ") != std::string::npos);
  CHECK(r.out.find("group=polarity frozen zero_gradient=ok") != std::string::npos);
  CHECK(r.out.find("gradient check passed") != std::string::npos);
}

TEST_CASE("the injected-fault flag makes gradcheck exit 3") {
  TempDir dir("gradfault");
  const RunResult r = run_cli(
      dir, "gradcheck --seed 1 --height 3 --width 3 --channels 4 --classes 2 --tokens 1 "
           "--r-dense 3 --r-sparse 3 --layers 1 --inject-fault");
  CHECK(r.exit_code == 3);
  CHECK(r.err.find("gradient check failed") != std::string::npos);
}

TEST_CASE("export-sim writes one grid and one graymap per sample") {
  TempDir dir("export");
  const std::string cfg = tiny_config(dir, 19);
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  REQUIRE(run_cli(dir, "train " + cfg).exit_code == 0);
  const RunResult r = run_cli(dir, "export-sim " + dir.file("ck.sscp") + " " +
                                       dir.file("data/manifest.tsv") + " 1 " + dir.file("sim"));
  CHECK(r.exit_code == 0);
  const Dataset ds = load_dataset(dir.file("data/manifest.tsv"));
  for (const auto& sample : ds.samples) {
    CHECK(fs::exists(dir.file("sim/" + sample.id + "_sim.ssgr")));
    CHECK(fs::exists(dir.file("sim/" + sample.id + "_sim.pgm")));
  }

  // exported grid equals the in-memory normalized map bitwise
  const ModelState state = load_checkpoint(dir.file("ck.sscp"));
  const DataSample& sample = ds.samples[0];
  Tape tape;
  const NdArray sim =
      compute_similarity(tape.constant(sample.embedding), tape.constant(state.param("prototypes.bank")))
          .to_ndarray();
  const NdArray expect = export_similarity_map(sim, 1);
  const NdArray roundtrip = read_grid(dir.file("sim/" + sample.id + "_sim.ssgr"));
  REQUIRE(roundtrip.shape == expect.shape);
  CHECK(std::memcmp(roundtrip.v.data(), expect.v.data(), expect.v.size() * sizeof(float)) == 0);
}

TEST_CASE("export-sim rejects the background class") {
  TempDir dir("exportbg");
  const std::string cfg = tiny_config(dir, 23);
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  REQUIRE(run_cli(dir, "train " + cfg).exit_code == 0);
  const RunResult r = run_cli(dir, "export-sim " + dir.file("ck.sscp") + " " +
                                       dir.file("data/manifest.tsv") + " 0 " + dir.file("sim"));
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("class-error") != std::string::npos);
}

TEST_CASE("a diverging run exits with the numeric code") {
  TempDir dir("numeric");
  const std::string cfg = tiny_config(dir, 31, "");
  REQUIRE(run_cli(dir, "gen-data " + cfg + " " + dir.file("data")).exit_code == 0);
  std::string text;
  {
    std::ostringstream buf;
    buf << std::ifstream(cfg).rdbuf();
    text = buf.str();
  }
  const size_t lr = text.find("learning_rate=0.001");
  REQUIRE(lr != std::string::npos);
  text.replace(lr, std::strlen("learning_rate=0.001"), "learning_rate=1e9");
  const size_t steps = text.find("max_steps=3");
  REQUIRE(steps != std::string::npos);
  text.replace(steps, std::strlen("max_steps=3"), "max_steps=30");
  std::ofstream(cfg) << text;

  const RunResult r = run_cli(dir, "train " + cfg);
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("numeric-error") != std::string::npos);
}

TEST_CASE("deterministic-logs output carries no timestamps") {
  TempDir dir("logs");
  const std::string cfg = tiny_config(dir, 29);
  const RunResult r = run_cli(dir, "--deterministic-logs gen-data " + cfg + " " + dir.file("data"));
  CHECK(r.exit_code == 0);
  CHECK(r.out.find('[') == std::string::npos);
}

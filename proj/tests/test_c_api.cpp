// Exercises the shared library through its public header only, plus the
// command-line front end's exit codes.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "alpkd/alpkd.h"

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "alpkd_test_c_api";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string get(const alpkd_config* c, const char* key) {
  size_t needed = 0;
  REQUIRE(alpkd_config_get(c, key, nullptr, 0, &needed) == ALPKD_OK);
  std::string buf(needed, '\0');
  REQUIRE(alpkd_config_get(c, key, buf.data(), buf.size(), &needed) == ALPKD_OK);
  buf.resize(needed - 1);
  return buf;
}

const std::vector<std::pair<const char*, const char*>> kTiny = {
    {"task.vocab_size", "10"},      {"task.seq_len", "8"},
    {"task.train_size", "96"},      {"task.validation_size", "48"},
    {"task.max_markers", "3"},      {"teacher.num_layers", "4"},
    {"teacher.hidden_dim", "8"},    {"teacher.num_heads", "2"},
    {"teacher.ffn_dim", "16"},      {"teacher.learning_rate", "1e-2"},
    {"teacher.epochs", "2"},        {"teacher.accuracy_floor", "0"},
    {"distill.epochs", "2"},        {"distill.learning_rate", "1e-3"},
    {"distill.student_layers", "2"}, {"distill.strategy", "alp-full"},
    {"distill.eta", "0.5"},         {"distill.lambda", "0.2"},
    {"analysis.cosine_examples", "20"},
};

alpkd_config* tiny_config(const std::string& run_name) {
  alpkd_config* c = nullptr;
  REQUIRE(alpkd_config_new(&c) == ALPKD_OK);
  for (const auto& [k, v] : kTiny) REQUIRE(alpkd_config_set(c, k, v) == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "output.root", root().c_str()) == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "output.run_name", run_name.c_str()) == ALPKD_OK);
  return c;
}

// Trained once; later cases distill from it.
const fs::path& teacher_ckpt() {
  static const fs::path ckpt = [] {
    alpkd_config* c = tiny_config("teacher");
    alpkd_run* run = nullptr;
    const auto st = alpkd_train_teacher(c, &run);
    alpkd_config_free(c);
    REQUIRE_MESSAGE(st == ALPKD_OK, alpkd_last_error());
    const fs::path p = fs::path(alpkd_run_dir(run)) / "teacher.ckpt";
    alpkd_run_free(run);
    return p;
  }();
  return ckpt;
}

alpkd_run* distill_run(const std::string& name, const char* strategy = "alp-full") {
  alpkd_config* c = tiny_config(name);
  REQUIRE(alpkd_config_set(c, "distill.teacher_checkpoint", teacher_ckpt().c_str()) == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "distill.strategy", strategy) == ALPKD_OK);
  alpkd_run* run = nullptr;
  const auto st = alpkd_distill(c, &run);
  alpkd_config_free(c);
  REQUIRE_MESSAGE(st == ALPKD_OK, alpkd_last_error());
  return run;
}

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + ALPKD_CLI_PATH + "\" -q " + args + " >/dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

TEST_CASE("status names and exit codes") {
  CHECK(std::string(alpkd_version()).size() > 0);
  CHECK(std::string(alpkd_status_name(ALPKD_ERR_CONFIG)) == "config");
  CHECK(std::string(alpkd_status_name(ALPKD_ERR_DIVERGENCE)) == "divergence");
  CHECK(alpkd_exit_code(ALPKD_OK) == 0);
  CHECK(alpkd_exit_code(ALPKD_ERR_CONFIG) == 2);
  CHECK(alpkd_exit_code(ALPKD_ERR_INPUT) == 2);
  CHECK(alpkd_exit_code(ALPKD_ERR_DIVERGENCE) == 3);
  CHECK(alpkd_exit_code(ALPKD_ERR_IO) == 4);
  CHECK(alpkd_exit_code(ALPKD_ERR_FORMAT) == 4);
  CHECK(alpkd_exit_code(ALPKD_ERR_FLOOR) == 5);
  CHECK(alpkd_exit_code(ALPKD_ERR_INTERNAL) == 1);
  CHECK(alpkd_exit_code(ALPKD_ERR_DIMENSION) == 1);
  const std::string names = alpkd_strategy_names();
  CHECK(names.find("alp-full") != std::string::npos);
  CHECK(names.find("pkd") != std::string::npos);
}

TEST_CASE("config get and dump follow the buffer protocol") {
  alpkd_config* c = nullptr;
  REQUIRE(alpkd_config_new(&c) == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "distill.strategy", "ckd-po") == ALPKD_OK);
  CHECK(get(c, "distill.strategy") == "ckd-po");

  char small[3] = {'x', 'x', 'x'};
  size_t needed = 0;
  CHECK(alpkd_config_get(c, "distill.strategy", small, sizeof small, &needed) == ALPKD_OK);
  CHECK(needed == 7);

  needed = 0;
  REQUIRE(alpkd_config_dump(c, nullptr, 0, &needed) == ALPKD_OK);
  std::string ini(needed, '\0');
  REQUIRE(alpkd_config_dump(c, ini.data(), ini.size(), &needed) == ALPKD_OK);
  ini.resize(needed - 1);
  CHECK(ini.find("strategy = ckd-po") != std::string::npos);

  // The dump loads back to the same text.
  const auto path = root() / "dump.ini";
  std::ofstream(path) << ini;
  alpkd_config* back = nullptr;
  REQUIRE(alpkd_config_load(path.c_str(), &back) == ALPKD_OK);
  CHECK(get(back, "distill.strategy") == "ckd-po");
  alpkd_config_free(back);

  CHECK(alpkd_config_set(c, "distill.strategy", "bogus") == ALPKD_ERR_CONFIG);
  CHECK(std::string(alpkd_last_error()).find("bogus") != std::string::npos);
  CHECK(alpkd_config_set(c, "distill.nope", "1") == ALPKD_ERR_CONFIG);
  CHECK(alpkd_config_get(c, "distill.nope", nullptr, 0, &needed) == ALPKD_ERR_CONFIG);
  alpkd_config_free(c);
}

TEST_CASE("null arguments and missing files") {
  alpkd_config* c = nullptr;
  CHECK(alpkd_config_new(nullptr) == ALPKD_ERR_ARGUMENT);
  CHECK(alpkd_config_set(nullptr, "a.b", "c") == ALPKD_ERR_ARGUMENT);
  CHECK(alpkd_config_load(nullptr, &c) == ALPKD_ERR_ARGUMENT);
  CHECK(alpkd_config_load((root() / "absent.ini").c_str(), &c) == ALPKD_ERR_IO);
  CHECK(c == nullptr);
  alpkd_run* run = nullptr;
  CHECK(alpkd_distill(nullptr, &run) == ALPKD_ERR_ARGUMENT);
  alpkd_encoder* enc = nullptr;
  CHECK(alpkd_encoder_load((root() / "absent.ckpt").c_str(), &enc) == ALPKD_ERR_IO);
  CHECK(enc == nullptr);

  const auto junk = root() / "junk.ckpt";
  std::ofstream(junk, std::ios::binary) << "not a checkpoint";
  CHECK(alpkd_encoder_load(junk.c_str(), &enc) == ALPKD_ERR_FORMAT);

  // Freeing null handles is a no-op.
  alpkd_config_free(nullptr);
  alpkd_run_free(nullptr);
  alpkd_encoder_free(nullptr);
}

TEST_CASE("teacher run writes its artifacts and the checkpoint runs inference") {
  const auto dir = teacher_ckpt().parent_path();
  for (const char* f : {"effective_config.ini", "metrics.json", "timing.json", "steps.csv", "teacher.ckpt"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  CHECK(slurp(dir / "metrics.json").find("\"command\": \"train-teacher\"") != std::string::npos);

  alpkd_encoder* enc = nullptr;
  REQUIRE(alpkd_encoder_load(teacher_ckpt().c_str(), &enc) == ALPKD_OK);
  CHECK(alpkd_encoder_num_layers(enc) == 4);
  CHECK(alpkd_encoder_hidden_dim(enc) == 8);
  CHECK(alpkd_encoder_num_classes(enc) == 2);
  CHECK(alpkd_encoder_max_seq_len(enc) >= 8);

  const std::vector<int32_t> ids{1, 5, 6, 7, 0, 0, 1, 4, 4, 9, 8, 0};
  std::vector<double> logits(2 * 2), cls(4 * 2 * 8);
  REQUIRE(alpkd_encoder_forward(enc, ids.data(), 2, 6, logits.data(), cls.data()) == ALPKD_OK);
  for (double x : logits) CHECK(std::isfinite(x));
  // The same row alone gives the same logits.
  std::vector<double> one(2);
  REQUIRE(alpkd_encoder_forward(enc, ids.data(), 1, 6, one.data(), nullptr) == ALPKD_OK);
  CHECK(one[0] == doctest::Approx(logits[0]).epsilon(1e-12));
  CHECK(one[1] == doctest::Approx(logits[1]).epsilon(1e-12));

  const std::vector<int32_t> bad{1, 99};
  CHECK(alpkd_encoder_forward(enc, bad.data(), 1, 2, one.data(), nullptr) == ALPKD_ERR_INPUT);
  CHECK(alpkd_encoder_forward(enc, nullptr, 1, 2, one.data(), nullptr) == ALPKD_ERR_ARGUMENT);
  alpkd_encoder_free(enc);
}

TEST_CASE("teacher below the accuracy floor") {
  alpkd_config* c = tiny_config("floor");
  REQUIRE(alpkd_config_set(c, "teacher.learning_rate", "0") == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "teacher.epochs", "1") == ALPKD_OK);
  REQUIRE(alpkd_config_set(c, "teacher.accuracy_floor", "1") == ALPKD_OK);
  alpkd_run* run = nullptr;
  CHECK(alpkd_train_teacher(c, &run) == ALPKD_ERR_FLOOR);
  CHECK(run == nullptr);
  CHECK(std::string(alpkd_last_error()).find("below floor") != std::string::npos);
  // The run directory still holds the metrics for inspection.
  CHECK(slurp(root() / "floor" / "metrics.json").find("\"accuracy_floor_met\": false") != std::string::npos);

  // Reusing a non-empty run directory is refused.
  REQUIRE(alpkd_config_set(c, "teacher.accuracy_floor", "0") == ALPKD_OK);
  CHECK(alpkd_train_teacher(c, &run) == ALPKD_ERR_IO);
  alpkd_config_free(c);
}

TEST_CASE("distillation is reproducible to the byte") {
  alpkd_run* a = distill_run("same-a");
  alpkd_run* b = distill_run("same-b");
  const fs::path da = alpkd_run_dir(a), db = alpkd_run_dir(b);
  CHECK(alpkd_run_score(a) == alpkd_run_score(b));
  CHECK(std::string(alpkd_run_summary(a)) == alpkd_run_summary(b));
  for (const char* f : {"metrics.json", "steps.csv", "student.ckpt"}) {
    CHECK_MESSAGE(slurp(da / f) == slurp(db / f), f);
  }
  CHECK(fs::exists(da / "timing.json"));
  alpkd_run_free(a);
  alpkd_run_free(b);
}

TEST_CASE("analysis on a distilled run") {
  alpkd_run* run = distill_run("analyzed");
  const std::string dir = alpkd_run_dir(run);
  alpkd_run_free(run);

  alpkd_run* out = nullptr;
  REQUIRE_MESSAGE(alpkd_analyze(dir.c_str(), "attention", nullptr, &out) == ALPKD_OK, alpkd_last_error());
  alpkd_run_free(out);
  CHECK(slurp(fs::path(dir) / "analysis" / "attention.csv").rfind("example_id,j,k,alpha\n", 0) == 0);

  REQUIRE(alpkd_analyze(dir.c_str(), "pca", nullptr, &out) == ALPKD_OK);
  alpkd_run_free(out);
  CHECK(fs::exists(fs::path(dir) / "analysis" / "pca.csv"));

  CHECK(alpkd_analyze(dir.c_str(), "histogram", nullptr, &out) == ALPKD_ERR_CONFIG);
  CHECK(alpkd_analyze((root() / "no-such-run").c_str(), "pca", nullptr, &out) != ALPKD_OK);
  CHECK(out == nullptr);

  alpkd_run* ckd = distill_run("ckd", "ckd-no");
  const std::string ckd_dir = alpkd_run_dir(ckd);
  alpkd_run_free(ckd);
  CHECK(alpkd_analyze(ckd_dir.c_str(), "attention", nullptr, &out) == ALPKD_ERR_CONFIG);
}

TEST_CASE("command-line exit codes") {
  const std::string ckpt = teacher_ckpt().string();
  std::string tiny;
  for (const auto& [k, v] : kTiny) tiny += std::string(" --set ") + k + "=" + v;
  const std::string out = " --output-root \"" + (root() / "cli").string() + "\"";

  CHECK(cli("strategies") == 0);
  CHECK(cli("") == 2);
  CHECK(cli("distill" + tiny + out + " --teacher-checkpoint \"" + ckpt + "\" --strategy tinybert") == 2);
  CHECK(cli("distill" + tiny + out + " --teacher-checkpoint \"" + ckpt + "\" --strategy pkd --fusion concat") == 2);
  CHECK(cli("distill" + tiny + out + " --set distill.unknown=1") == 2);
  CHECK(cli("distill" + tiny + out + " --teacher-checkpoint \"" + (root() / "missing.ckpt").string() + "\"") == 4);
  CHECK(cli("distill" + tiny + out + " --run-name ok --teacher-checkpoint \"" + ckpt + "\" --strategy rkd --set distill.lambda=0") == 0);
  CHECK(cli("train-teacher" + tiny + out + " --set teacher.learning_rate=0 --set teacher.accuracy_floor=1") == 5);
  CHECK(cli("train-teacher" + tiny + out + " --set teacher.optimizer=sgd --set teacher.learning_rate=1e300") == 3);

  const auto bad_ini = root() / "bad.ini";
  std::ofstream(bad_ini) << "[trainer]\nlr = 1\n";
  CHECK(cli("train-teacher \"" + bad_ini.string() + "\"" + out) == 2);

  CHECK(cli("analyze --run-dir \"" + (root() / "ckd").string() + "\" --mode attention") == 2);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "alpkd/errors.hpp"
#include "alpkd/run_config.hpp"

using namespace alpkd;

TEST_CASE("defaults survive an INI round trip") {
  const RunConfig defaults;
  const auto text = to_ini(defaults);
  CHECK(text.rfind("[task]\n", 0) == 0);
  const auto back = parse_run_config(text);
  CHECK(to_ini(back) == text);
  CHECK(config_hash(back) == config_hash(defaults));
}

TEST_CASE("file values reach the right fields") {
  const auto c = parse_run_config(
      "; comment\n"
      "[task]\nkind = majority\nnum_classes = 3\nmax_markers = 5\n"
      "[distill]\nstrategy = alp-po\nfusion = kqv\nkqv_heads = 2\neta = 0.2\nlambda = 0.5\n"
      "pkd_picks = 2,-\ntemperature = 10\n"
      "[grid]\nstrategies = nkd,ckd-no\nlearning_rates = 1e-4, 3e-4\npkd_pick_sets = 1,-;2,-\n"
      "seeds = 5\n"
      "[output]\nrun_name = r1\n");
  CHECK(c.task.kind == GeneratorKind::Majority);
  CHECK(c.task.num_classes == 3);
  CHECK(c.distill.strategy == DistillStrategy::AlpPo);
  CHECK(c.distill.fusion == FusionChoice::Kqv);
  CHECK(c.distill.kqv_heads == 2);
  CHECK(c.distill.lambda == 0.5);
  CHECK(c.distill.pkd_picks == std::vector<std::optional<std::size_t>>{2, std::nullopt});
  CHECK(c.grid_strategies == std::vector{DistillStrategy::Nkd, DistillStrategy::CkdNo});
  CHECK(c.grid.learning_rates == std::vector<double>{1e-4, 3e-4});
  CHECK(c.grid.pkd_pick_sets.size() == 2);
  CHECK(c.grid_seeds == 5);
  CHECK(c.run_name == "r1");
  CHECK(get_config_value(c, "distill.strategy") == "alp-po");
}

TEST_CASE("unknown sections and keys are rejected with a line number") {
  CHECK_THROWS_WITH_AS(parse_run_config("[task]\nname = x\n\n[trainer]\nlr = 1\n"),
                       doctest::Contains("unknown section [trainer]"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config("[distill]\nepochs = 2\nlearnin_rate = 1e-4\n"),
                       doctest::Contains("line 3"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config("[distill]\nlearnin_rate = 1e-4\n"),
                       doctest::Contains("learning_rate"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("stray = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[task\n"), ConfigError);
}

TEST_CASE("values are validated") {
  RunConfig c;
  CHECK_THROWS_AS(set_config_value(c, "distill.epochs", "0"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.epochs", "three"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.learning_rate", "nan"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.strategy", "tinybert"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.optimizer", "lamb"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.kd_t_squared", "maybe"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "grid.learning_rates", ""), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "output.run_name", "a/b"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill", "x"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "distill.pkd_picks", "0,-"), ConfigError);
  set_config_value(c, "distill.kd_t_squared", "true");
  CHECK(c.distill.kd_t_squared);
  set_config_value(c, "teacher.optimizer", "sgd");
  CHECK(c.teacher_train.optimizer == OptimizerKind::Sgd);
}

TEST_CASE("pick lists") {
  CHECK(format_picks({1, std::nullopt, 5}) == "1,-,5");
  CHECK(parse_picks("1,-,5") == std::vector<std::optional<std::size_t>>{1, std::nullopt, 5});
}

TEST_CASE("finalize takes task dimensions and checks depth") {
  RunConfig c;
  c.task.train_size = 10;
  c.task.validation_size = 10;
  c.task.vocab_size = 12;
  const auto task = make_task(c.task);
  finalize(c, task);
  CHECK(c.teacher.vocab_size == 12);
  CHECK(c.teacher.max_seq_len == 32);
  c.distill.student_layers = 9;
  CHECK_THROWS_AS(finalize(c, task), ConfigError);
  c.distill.student_layers = 2;
  c.teacher_accuracy_floor = 1.5;
  CHECK_THROWS_AS(finalize(c, task), ConfigError);
}

TEST_CASE("the output section does not change the config hash") {
  RunConfig a, b;
  b.output_root = "/elsewhere";
  b.run_name = "named";
  CHECK(config_hash(a) == config_hash(b));
  b.distill.seed = 2;
  CHECK(config_hash(a) != config_hash(b));
}

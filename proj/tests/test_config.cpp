#include <string>

#include "doctest.h"
#include "evaq/config.hpp"
#include "evaq/error.hpp"
#include "evaq/pipeline.hpp"
#include "helpers.hpp"

using namespace evaq;

TEST_CASE("FlatConfig parses comments, blanks, later-wins") {
  const auto c = cfg::FlatConfig::parse_text(
      "# comment\n"
      "a.b = 1\n"
      "\n"
      "c = hello world \n"
      "a.b = 2\n");
  CHECK(c.get_int("a.b", 0) == 2);
  CHECK(c.get_str("c", "") == "hello world");
  CHECK(c.get_int("absent", 9) == 9);
}

TEST_CASE("FlatConfig rejects malformed lines and values") {
  CHECK_THROWS_AS(cfg::FlatConfig::parse_text("novalue\n"), Error);
  CHECK_THROWS_AS(cfg::FlatConfig::parse_text("= 3\n"), Error);
  const auto c = cfg::FlatConfig::parse_text("x = notanumber\n");
  CHECK_THROWS_AS(c.get_int("x", 0), Error);
  CHECK_THROWS_AS(c.get_double("x", 0.0), Error);
  CHECK_THROWS_AS(c.get_bool("x", false), Error);
}

TEST_CASE("FlatConfig merge and consumed tracking") {
  auto base = cfg::FlatConfig::parse_text("a = 1\nb = 2\n");
  const auto over = cfg::FlatConfig::parse_text("b = 3\nc = 4\n");
  base.merge(over);
  CHECK(base.get_int("a", 0) == 1);
  CHECK(base.get_int("b", 0) == 3);

  const auto consumed = base.consumed();
  CHECK(consumed.count("a") == 1);
  CHECK(consumed.count("b") == 1);
  CHECK(consumed.count("c") == 0); // never read
  CHECK(base.entries().count("c") == 1);
}

TEST_CASE("FlatConfig dump is sorted and hash is content-stable") {
  const auto a = cfg::FlatConfig::parse_text("z = 1\na = 2\n");
  const auto b = cfg::FlatConfig::parse_text("a = 2\nz = 1\n");
  CHECK(a.dump() == b.dump());
  CHECK(a.hash() == b.hash());
  const auto c = cfg::FlatConfig::parse_text("a = 2\nz = 9\n");
  CHECK(a.hash() != c.hash());
}

TEST_CASE("FlatConfig file round-trip") {
  TempDir td("cfg");
  const auto p = td.file("run.cfg");
  io::write_file(p, "seed = 9\nworld.n_users = 50\n");
  const auto c = cfg::FlatConfig::parse_file(p);
  CHECK(c.get_u64("seed", 0) == 9);
  CHECK(c.get_int("world.n_users", 0) == 50);
}

TEST_CASE("PipelineConfig flat round-trip preserves the hash") {
  auto flat = cfg::FlatConfig::parse_text(
      "seed = 7\n"
      "world.n_users = 123\n"
      "ssqe.hidden = 48\n"
      "train_ssqe.iterations = 11\n"
      "cv.k = 4\n");
  const auto pc = pipe::PipelineConfig::from_flat(flat);
  CHECK(pc.seed == 7);
  CHECK(pc.world.n_users == 123);
  CHECK(pc.ssqe.hidden == 48);
  CHECK(pc.ssqe_train.iterations == 11);
  CHECK(pc.k_folds == 4);

  const auto dumped = pc.to_flat();
  const auto pc2 = pipe::PipelineConfig::from_flat(dumped);
  CHECK(pc2.to_flat().dump() == dumped.dump());
  CHECK(pc2.hash() == pc.hash());
}

TEST_CASE("global seed fans out to distinct stage seeds") {
  auto flat = cfg::FlatConfig::parse_text("seed = 5\n");
  const auto pc = pipe::PipelineConfig::from_flat(flat);
  CHECK(pc.world.seed != pc.split_seed);
  CHECK(pc.world.seed != pc.ssqe_train.seed);
  CHECK(pc.ssqe_train.seed != pc.smqe_train.seed);
  CHECK(pc.rf.seed != pc.cv_seed);

  auto flat2 = cfg::FlatConfig::parse_text("seed = 6\n");
  CHECK(pipe::PipelineConfig::from_flat(flat2).world.seed != pc.world.seed);
}

TEST_CASE("PipelineConfig validate rejects bad settings") {
  auto mk = [](const std::string& text) {
    auto flat = cfg::FlatConfig::parse_text(text);
    return pipe::PipelineConfig::from_flat(flat);
  };
  CHECK_THROWS_AS(mk("session.min_len = 1\n").validate(), Error);
  CHECK_THROWS_AS(mk("session.max_len = 1\n").validate(), Error);
  CHECK_THROWS_AS(mk("features.method = 9\n").validate(), Error);
  CHECK_THROWS_AS(mk("cv.k = 1\n").validate(), Error);
  CHECK_THROWS_AS(mk("label.theta_hi = 0.5\n").validate(), Error);
  CHECK_THROWS_AS(mk("label.target_rate = 0\n").validate(), Error);
  CHECK_THROWS_AS(mk("split.train_frac = 0.99\nsplit.val_frac = 0.02\n").validate(), Error);
  CHECK_NOTHROW(mk("").validate());
}

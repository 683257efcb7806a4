#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "evaq/anomaly.hpp"
#include "evaq/corpus.hpp"
#include "evaq/error.hpp"
#include "evaq/synth.hpp"
#include "helpers.hpp"

using namespace evaq;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMetersPerDeg = 6371000.0 * kPi / 180.0;

double planar_m(double lon, double lat, double olon, double olat) {
  const double dx = (lon - olon) * kMetersPerDeg * std::cos(olat * kPi / 180.0);
  const double dy = (lat - olat) * kMetersPerDeg;
  return std::hypot(dx, dy);
}

synth::WorldConfig small_config() {
  synth::WorldConfig cfg;
  cfg.n_users = 400;
  cfg.seed = 17;
  return cfg;
}

const synth::World& shared_world() {
  static const synth::World w = synth::gen_world(small_config());
  return w;
}

bool work_hours(std::int64_t ts) {
  const int dow = anomaly::day_of_week(ts);
  const std::int64_t hour = (ts % 86400) / 3600;
  return dow >= 1 && dow <= 5 && hour >= 9 && hour < 17;
}

} // namespace

TEST_CASE("world plants exact role counts") {
  const auto& w = shared_world();
  const auto cfg = small_config();
  REQUIRE(w.truth.users.size() == 400);

  std::size_t evac = 0, disrupted = 0, both = 0;
  for (const auto& t : w.truth.users) {
    evac += static_cast<std::size_t>(t.evacuated);
    disrupted += static_cast<std::size_t>(t.disrupted);
    both += static_cast<std::size_t>(t.evacuated && t.disrupted);
  }
  // llround(400 * 0.046) and llround(0.03 * 382)
  CHECK(evac == 18);
  CHECK(disrupted == 11);
  CHECK(both == 0);
  CHECK(w.truth.evacuee_count() == 18);

  CHECK(w.truth.users.front().user == "u0000");
  CHECK(w.truth.users.back().user == "u0399");
  CHECK(w.truth.find("u0007").user == "u0007");
  CHECK_THROWS_AS(w.truth.find("nobody"), Error);

  for (const auto& t : w.truth.users) {
    REQUIRE(t.intent_mixture.size() == cfg.n_intents);
    double sum = 0.0;
    for (double v : t.intent_mixture) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(t.intent_mixture[0] == doctest::Approx(cfg.base_disaster_share).epsilon(1e-9));
    CHECK(t.home_district < cfg.n_districts);
  }
}

TEST_CASE("logs come out sorted by user then time") {
  const auto& w = shared_world();
  REQUIRE(!w.queries.empty());
  REQUIRE(!w.gps.empty());
  for (std::size_t i = 1; i < w.queries.size(); ++i) {
    const auto& a = w.queries[i - 1];
    const auto& b = w.queries[i];
    CHECK((a.user < b.user || (a.user == b.user && a.ts <= b.ts)));
  }
  for (std::size_t i = 1; i < w.gps.size(); ++i) {
    const auto& a = w.gps[i - 1];
    const auto& b = w.gps[i];
    CHECK((a.user < b.user || (a.user == b.user && a.ts <= b.ts)));
  }
}

TEST_CASE("intended sessions are exactly what sessionization recovers") {
  const auto& w = shared_world();
  const auto got = corpus::sessionize(w.queries); // stock gap and length limits
  REQUIRE(got.size() == w.sessions.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].user == w.sessions[i].user);
    CHECK(got[i].queries == w.sessions[i].queries);
    CHECK(got[i].timestamps == w.sessions[i].timestamps);
    total += got[i].queries.size();
  }
  CHECK(total == w.queries.size());
  for (const auto& s : w.sessions) {
    CHECK(s.queries.size() >= 2);
    CHECK(s.queries.size() <= 7);
  }
}

TEST_CASE("daily query volume follows the configured mean and cap") {
  const auto& w = shared_world();
  const auto cfg = small_config();
  const double days =
      static_cast<double>((cfg.windows.t_e - cfg.windows.t0) / 86400);
  const double per_user_day = static_cast<double>(w.queries.size()) /
                              (static_cast<double>(cfg.n_users) * days);
  CHECK(per_user_day > cfg.query_mean_per_day * 0.8);
  CHECK(per_user_day < cfg.query_mean_per_day * 1.2);

  std::map<std::pair<std::string, std::int64_t>, std::size_t> daily;
  for (const auto& r : w.queries) ++daily[{r.user, r.ts / 86400}];
  for (const auto& [key, n] : daily) CHECK(n <= cfg.query_max_per_day);
}

TEST_CASE("query text walks one intent cycle with one district suffix") {
  const auto& w = shared_world();
  const auto cfg = small_config();
  const auto templates = synth::intent_templates(cfg.n_intents);
  const auto districts = synth::district_names(cfg.n_districts);
  const std::set<std::string> district_set(districts.begin(), districts.end());

  std::map<std::string, std::pair<std::size_t, std::size_t>> pos; // text -> intent, slot
  for (std::size_t i = 0; i < templates.size(); ++i)
    for (std::size_t j = 0; j < templates[i].size(); ++j) pos[templates[i][j]] = {i, j};

  auto split_tail = [](const std::string& text) {
    const auto cut = text.rfind(' ');
    REQUIRE(cut != std::string::npos);
    return std::make_pair(text.substr(0, cut), text.substr(cut + 1));
  };

  std::size_t checked = 0;
  for (std::size_t si = 0; si < w.sessions.size(); si += 97) {
    const auto& s = w.sessions[si];
    const auto [tmpl0, district0] = split_tail(s.queries[0]);
    CHECK(district_set.count(district0) == 1);
    REQUIRE(pos.count(tmpl0) == 1);
    const auto [intent, slot0] = pos.at(tmpl0);
    CHECK(w.query_intent.at(s.queries[0]) == intent);
    const std::size_t cycle = templates[intent].size();
    for (std::size_t j = 1; j < s.queries.size(); ++j) {
      const auto [tmpl, district] = split_tail(s.queries[j]);
      CHECK(district == district0); // one district per session
      REQUIRE(pos.count(tmpl) == 1);
      CHECK(pos.at(tmpl).first == intent); // one intent per session
      CHECK(pos.at(tmpl).second == (slot0 + j) % cycle);
    }
    ++checked;
  }
  CHECK(checked > 50);
}

TEST_CASE("evacuees flood their pre-alert window, stayers do not") {
  const auto& w = shared_world();
  const auto cfg = small_config();
  const double share = std::min(0.9, cfg.base_disaster_share * cfg.shift_strength * 1.5);

  std::size_t evac_win = 0, evac_win_flood = 0, stay_win = 0, stay_win_flood = 0;
  std::size_t evac_learn = 0, evac_learn_flood = 0, stay_learn = 0, stay_learn_flood = 0;
  for (const auto& r : w.queries) {
    const bool flood = w.query_intent.at(r.text) == 0;
    const bool evac = w.truth.find(r.user).evacuated;
    if (r.ts >= cfg.windows.t_l && r.ts < cfg.windows.t_d) {
      (evac ? evac_win : stay_win) += 1;
      if (flood) (evac ? evac_win_flood : stay_win_flood) += 1;
    } else if (r.ts < cfg.windows.t_l) {
      (evac ? evac_learn : stay_learn) += 1;
      if (flood) (evac ? evac_learn_flood : stay_learn_flood) += 1;
    }
  }
  REQUIRE(evac_win > 200);
  REQUIRE(stay_win > 2000);
  const double evac_share = static_cast<double>(evac_win_flood) / evac_win;
  const double stay_share = static_cast<double>(stay_win_flood) / stay_win;
  CHECK(evac_share > share - 0.08);
  CHECK(evac_share < share + 0.08);
  CHECK(stay_share < cfg.base_disaster_share + 0.04);
  CHECK(evac_share / stay_share >= 2.0);

  // before the alert the cohorts are indistinguishable
  const double evac_learn_share = static_cast<double>(evac_learn_flood) / evac_learn;
  const double stay_learn_share = static_cast<double>(stay_learn_flood) / stay_learn;
  CHECK(std::abs(evac_learn_share - stay_learn_share) < 0.04);
}

TEST_CASE("disaster-day movement matches the roles") {
  const auto& w = shared_world();
  const auto cfg = small_config();

  std::size_t evac_pts = 0, stay_pts = 0;
  for (const auto& r : w.gps) {
    if (r.ts < cfg.windows.t_d || r.ts >= cfg.windows.t_e) continue;
    const auto& t = w.truth.find(r.user);
    const double d_home = planar_m(r.lon, r.lat, t.home_lon, t.home_lat);
    if (t.evacuated) {
      CHECK(d_home > cfg.displacement_m - 500.0);
      CHECK(d_home < cfg.displacement_m + 500.0);
      ++evac_pts;
    } else if (!work_hours(r.ts)) {
      // routine anchor plus bounded scatter plus (for disrupted) a small drift
      CHECK(d_home < 400.0);
      ++stay_pts;
    }
  }
  CHECK(evac_pts > 100);
  CHECK(stay_pts > 1000);

  // before the disaster everyone sticks to home or work
  for (std::size_t i = 0; i < w.gps.size(); i += 211) {
    const auto& r = w.gps[i];
    if (r.ts >= cfg.windows.t_d) continue;
    const auto& t = w.truth.find(r.user);
    const double d_home = planar_m(r.lon, r.lat, t.home_lon, t.home_lat);
    CHECK(d_home < 8000.0 + 400.0);
  }
}

TEST_CASE("generation is a pure function of the config") {
  synth::WorldConfig cfg;
  cfg.n_users = 40;
  cfg.seed = 5;
  const auto a = synth::gen_world(cfg);
  const auto b = synth::gen_world(cfg);
  REQUIRE(a.queries.size() == b.queries.size());
  REQUIRE(a.gps.size() == b.gps.size());
  for (std::size_t i = 0; i < a.queries.size(); i += 101) {
    CHECK(a.queries[i].user == b.queries[i].user);
    CHECK(a.queries[i].ts == b.queries[i].ts);
    CHECK(a.queries[i].text == b.queries[i].text);
  }
  for (std::size_t i = 0; i < a.gps.size(); i += 503) {
    CHECK(a.gps[i].lon == b.gps[i].lon);
    CHECK(a.gps[i].lat == b.gps[i].lat);
  }

  cfg.seed = 6;
  const auto c = synth::gen_world(cfg);
  bool same = a.queries.size() == c.queries.size();
  if (same)
    for (std::size_t i = 0; i < a.queries.size(); ++i)
      if (a.queries[i].ts != c.queries[i].ts || a.queries[i].text != c.queries[i].text) {
        same = false;
        break;
      }
  CHECK_FALSE(same);
}

TEST_CASE("config validation rejects each bad knob") {
  const synth::WorldConfig good;
  CHECK_NOTHROW(good.validate());

  auto expect_bad = [](auto&& mutate) {
    synth::WorldConfig cfg;
    mutate(cfg);
    CHECK_THROWS_AS(cfg.validate(), Error);
  };
  expect_bad([](auto& c) { c.n_users = 0; });
  expect_bad([](auto& c) { c.evacuation_rate = 1.0; });
  expect_bad([](auto& c) { c.evacuation_rate = 0.0; });
  expect_bad([](auto& c) { c.query_mean_per_day = 0.5; });
  expect_bad([](auto& c) { c.query_max_per_day = 3; });
  expect_bad([](auto& c) { c.gps_mean_per_day = 0.9; });
  expect_bad([](auto& c) { c.n_intents = 1; });
  expect_bad([](auto& c) { c.n_districts = 0; });
  expect_bad([](auto& c) { c.base_disaster_share = 0.6; });
  expect_bad([](auto& c) { c.shift_strength = 0.8; });
  expect_bad([](auto& c) { c.displacement_m = 0.0; });
  expect_bad([](auto& c) { c.gps_noise_m = -1.0; });
  expect_bad([](auto& c) { c.disrupted_fraction = 1.0; });
  expect_bad([](auto& c) { c.disrupted_min_m = 100.0; }); // above max
  expect_bad([](auto& c) { c.windows.t_l = c.windows.t0; });

  // volume law too small for the per-day floor is caught at generation
  synth::WorldConfig tiny;
  tiny.n_users = 1;
  tiny.gps_mean_per_day = 5.5;
  tiny.gps_max_per_day = 20;
  CHECK_THROWS_AS(synth::gen_world(tiny), Error);
}

TEST_CASE("similarity pairs separate same and cross intent") {
  const auto& w = shared_world();
  const auto pairs = synth::similarity_pairs(w, 25, 3);
  REQUIRE(pairs.size() == 50);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    CHECK(p.a != p.b);
    CHECK(p.same_category == (i < 25));
    const auto ia = w.query_intent.at(p.a);
    const auto ib = w.query_intent.at(p.b);
    if (p.same_category)
      CHECK(ia == ib);
    else
      CHECK(ia != ib);
  }
  // deterministic per seed
  const auto again = synth::similarity_pairs(w, 25, 3);
  CHECK(again.size() == pairs.size());
  CHECK(again[0].a == pairs[0].a);
  const auto other = synth::similarity_pairs(w, 25, 4);
  bool identical = true;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (other[i].a != pairs[i].a || other[i].b != pairs[i].b) {
      identical = false;
      break;
    }
  CHECK_FALSE(identical);

  synth::World degenerate;
  degenerate.query_intent.emplace("solo text", 0);
  CHECK_THROWS_AS(synth::similarity_pairs(degenerate, 5, 1), Error);
}

TEST_CASE("oracle report scores against planted truth") {
  synth::GroundTruth truth;
  const char* ids[] = {"a", "b", "c", "d"};
  const bool evac[] = {true, false, true, false};
  for (std::size_t i = 0; i < 4; ++i) {
    synth::UserTruth t;
    t.user = ids[i];
    t.evacuated = evac[i];
    truth.index.emplace(t.user, truth.users.size());
    truth.users.push_back(t);
  }
  const std::vector<std::string> users = {"a", "b", "c", "d"};
  const std::vector<double> scores = {0.9, 0.2, 0.4, 0.6};
  const auto rep = synth::oracle_report(users, scores, truth);
  CHECK(rep.n == 4);
  CHECK(rep.tp == 1);
  CHECK(rep.tn == 1);
  CHECK(rep.fn == 1);
  CHECK(rep.fp == 1);
  CHECK(rep.accuracy == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(rep.auc == doctest::Approx(0.75).epsilon(1e-15));
  const auto j = rep.to_json();
  CHECK(j.find("\"auc\"") != std::string::npos);

  const std::vector<std::string> stranger = {"zz"};
  const std::vector<double> one = {0.5};
  CHECK_THROWS_AS(synth::oracle_report(stranger, one, truth), Error);
  CHECK_THROWS_AS(synth::oracle_report(users, one, truth), Error);
  const std::vector<std::string> none;
  const std::vector<double> empty;
  CHECK_THROWS_AS(synth::oracle_report(none, empty, truth), Error);
}

TEST_CASE("world serialization round trips") {
  synth::WorldConfig cfg;
  cfg.n_users = 30;
  cfg.seed = 9;
  const auto w = synth::gen_world(cfg);
  TempDir td("synthio");

  synth::write_truth_tsv(td.file("truth.tsv"), w.truth);
  const auto truth2 = synth::read_truth_tsv(td.file("truth.tsv"));
  REQUIRE(truth2.users.size() == w.truth.users.size());
  for (std::size_t i = 0; i < truth2.users.size(); ++i) {
    const auto& a = w.truth.users[i];
    const auto& b = truth2.users[i];
    CHECK(a.user == b.user);
    CHECK(a.evacuated == b.evacuated);
    CHECK(a.disrupted == b.disrupted);
    CHECK(a.home_lon == b.home_lon);
    CHECK(a.home_lat == b.home_lat);
    CHECK(a.home_district == b.home_district);
    CHECK(a.intent_mixture == b.intent_mixture);
  }
  CHECK(truth2.find("u0003").user == "u0003");

  synth::write_query_log_tsv(td.file("queries.tsv"), w.queries);
  const auto qlog = corpus::ingest_query_log_file(td.file("queries.tsv"));
  REQUIRE(qlog.records.size() == w.queries.size());
  CHECK(qlog.issues.empty());
  CHECK(qlog.records.front().text == w.queries.front().text);
  CHECK(qlog.records.back().ts == w.queries.back().ts);

  synth::write_gps_log_tsv(td.file("gps.tsv"), w.gps);
  const auto glog = anomaly::ingest_gps_log_file(td.file("gps.tsv"));
  REQUIRE(glog.records.size() == w.gps.size());
  CHECK(glog.issues.empty());
  CHECK(glog.records.front().lat == doctest::Approx(w.gps.front().lat).epsilon(1e-12));

  const auto pairs = synth::similarity_pairs(w, 10, 2);
  synth::write_similarity_pairs_tsv(td.file("pairs.tsv"), pairs);
  const auto pairs2 = synth::read_similarity_pairs_tsv(td.file("pairs.tsv"));
  REQUIRE(pairs2.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs2[i].a == pairs[i].a);
    CHECK(pairs2[i].b == pairs[i].b);
    CHECK(pairs2[i].same_category == pairs[i].same_category);
  }
}

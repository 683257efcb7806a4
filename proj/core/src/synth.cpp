#include "evaq/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <json.hpp>

#include "evaq/classify.hpp"
#include "evaq/io.hpp"
#include "evaq/rng.hpp"

namespace evaq::synth {

namespace {

constexpr double kEarthRadiusM = 6371000.0;
constexpr double kPi = 3.14159265358979323846;
// meters of latitude per degree on the sphere the scorer assumes
const double kMetersPerDeg = kEarthRadiusM * kPi / 180.0;

double trunc_normal(Rng& rng, double limit = 3.0) {
  for (;;) {
    const double z = rng.normal();
    if (std::abs(z) <= limit) return z;
  }
}

std::string user_id(std::size_t idx, std::size_t n_users) {
  std::size_t width = 1;
  for (std::size_t v = n_users > 0 ? n_users - 1 : 0; v >= 10; v /= 10) ++width;
  width = std::max<std::size_t>(width, 4);
  std::string digits = std::to_string(idx);
  return "u" + std::string(width - digits.size(), '0') + digits;
}

bool is_weekday(std::int64_t ts) {
  const int dow = anomaly::day_of_week(ts);
  return dow >= 1 && dow <= 5;
}

std::size_t sample_mixture(std::span<const double> mixture, Rng& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    acc += mixture[i];
    if (u < acc) return i;
  }
  return mixture.size() - 1;
}

} // namespace

void WorldConfig::validate() const {
  windows.validate();
  if (n_users == 0) fail("config", "n_users must be positive");
  if (!(evacuation_rate > 0.0 && evacuation_rate < 1.0))
    fail("config", "evacuation_rate must be in (0,1)");
  if (!(query_mean_per_day > 1.0) || query_max_per_day < 4)
    fail("config", "query volume law needs mean > 1 and max >= 4");
  if (!(gps_mean_per_day > 1.0) || gps_max_per_day < 4)
    fail("config", "gps volume law needs mean > 1 and max >= 4");
  if (n_intents < 2) fail("config", "need at least 2 intents (intent 0 is the disaster one)");
  if (n_districts < 1) fail("config", "need at least 1 district");
  if (!(base_disaster_share > 0.0 && base_disaster_share < 0.5))
    fail("config", "base_disaster_share must be in (0, 0.5)");
  if (!(shift_strength >= 1.0)) fail("config", "shift_strength must be >= 1");
  if (!(displacement_m > 0.0) || !(gps_noise_m > 0.0))
    fail("config", "displacement and gps noise must be positive");
  if (!(disrupted_fraction >= 0.0 && disrupted_fraction < 1.0))
    fail("config", "disrupted_fraction must be in [0,1)");
  if (!(disrupted_min_m > 0.0 && disrupted_min_m <= disrupted_max_m))
    fail("config", "disrupted displacement range is inverted");
}

std::vector<std::vector<std::string>> intent_templates(std::size_t n_intents) {
  static const std::vector<std::vector<std::string>> stock = {
      // alert queries are far more varied than routine ones: people probe many
      // facets of the same event instead of cycling a fixed habit
      {"flood warning level", "flood evacuation route", "flood shelter list",
       "flood river camera", "flood sandbag stock", "flood hazard map",
       "flood road closure", "flood rain radar", "flood water level now",
       "flood alert area", "flood timeline today", "flood power outage",
       "flood train suspension", "flood emergency kit", "flood pump station",
       "flood school closing", "flood bus detour", "flood river embankment"},
      {"weather radar today", "weather forecast week", "weather pollen count",
       "weather sunset time", "weather typhoon path"},
      {"food ramen ranking", "food curry recipe", "food bento deals", "food cafe open",
       "food sushi nearby"},
      {"game walkthrough boss", "game event schedule", "game gacha rates", "game tier list",
       "game patch notes"},
      {"train delay info", "train last departure", "train route fare", "train platform map",
       "train pass renewal"},
      {"shop sale coupon", "shop points balance", "shop delivery slot", "shop return policy",
       "shop new arrivals"},
      {"health clinic hours", "health flu symptoms", "health stretch back", "health sleep tips",
       "health checkup price"},
      {"news election results", "news exchange rate", "news baseball score",
       "news drama episode", "news lottery numbers"},
  };
  if (n_intents < 2) fail("config", "need at least 2 intents");
  std::vector<std::vector<std::string>> out;
  out.reserve(n_intents);
  for (std::size_t i = 0; i < n_intents; ++i) {
    if (i < stock.size()) {
      out.push_back(stock[i]);
      continue;
    }
    std::vector<std::string> t;
    for (std::size_t j = 0; j < 5; ++j)
      t.push_back("topic" + std::to_string(i) + " item" + std::to_string(j) + " info");
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> district_names(std::size_t n) {
  static const std::vector<std::string> a = {"kita", "minami", "naka",  "higashi",
                                             "nishi", "shin",   "moto",  "kami"};
  static const std::vector<std::string> b = {"oka",  "sawa", "hara", "machi",
                                             "kawa", "dai",  "no",   "zaka"};
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = a[i % a.size()] + b[(i / a.size()) % b.size()];
    if (i >= a.size() * b.size()) name += std::to_string(i / (a.size() * b.size()));
    out.push_back(std::move(name));
  }
  return out;
}

const UserTruth& GroundTruth::find(const std::string& user) const {
  auto it = index.find(user);
  if (it == index.end()) fail("usage", "unknown user id: " + user);
  return users[it->second];
}

std::size_t GroundTruth::evacuee_count() const {
  std::size_t n = 0;
  for (const auto& u : users) n += static_cast<std::size_t>(u.evacuated);
  return n;
}

World gen_world(const WorldConfig& cfg) {
  cfg.validate();
  const auto templates = intent_templates(cfg.n_intents);
  const auto districts = district_names(cfg.n_districts);
  const ZipfSampler query_law(
      cfg.query_max_per_day,
      ZipfSampler::exponent_for_mean(cfg.query_max_per_day, cfg.query_mean_per_day));
  // Daily GPS counts keep a heavy tail but never drop below a floor, so
  // every user clears the scoring minimums in each analysis window.
  const std::size_t gps_floor = 5;
  if (cfg.gps_mean_per_day <= static_cast<double>(gps_floor + 1) ||
      cfg.gps_max_per_day <= gps_floor + 1)
    fail("config", "gps volume law too small for the daily floor");
  const ZipfSampler gps_law(
      cfg.gps_max_per_day - gps_floor,
      ZipfSampler::exponent_for_mean(cfg.gps_max_per_day - gps_floor,
                                     cfg.gps_mean_per_day - static_cast<double>(gps_floor)));

  // exact-count role planting so the evacuee fraction is pinned, not binomial
  const std::size_t n_evac = static_cast<std::size_t>(
      std::llround(cfg.evacuation_rate * static_cast<double>(cfg.n_users)));
  std::vector<std::size_t> order(cfg.n_users);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  {
    Rng role_rng(derive_seed(cfg.seed, "roles"));
    role_rng.shuffle(order);
  }
  std::vector<int> role(cfg.n_users, 0); // 0 stayer, 1 evacuee, 2 disrupted stayer
  for (std::size_t i = 0; i < n_evac && i < order.size(); ++i) role[order[i]] = 1;
  const std::size_t n_disrupted = static_cast<std::size_t>(std::llround(
      cfg.disrupted_fraction * static_cast<double>(cfg.n_users - n_evac)));
  for (std::size_t i = n_evac; i < n_evac + n_disrupted && i < order.size(); ++i)
    role[order[i]] = 2;

  const double evacuee_share =
      std::min(0.9, cfg.base_disaster_share * cfg.shift_strength * 1.5);
  const double lon_scale = kMetersPerDeg * std::cos(cfg.center_lat * kPi / 180.0);
  const std::uint64_t user_root = derive_seed(cfg.seed, "user");

  World w;
  w.truth.users.reserve(cfg.n_users);
  w.queries.reserve(cfg.n_users * 12 *
                    static_cast<std::size_t>((cfg.windows.t_e - cfg.windows.t0) / 86400 + 1));

  for (std::size_t ui = 0; ui < cfg.n_users; ++ui) {
    Rng rng(derive_seed(user_root, ui));
    UserTruth t;
    t.user = user_id(ui, cfg.n_users);
    t.evacuated = role[ui] == 1;
    t.disrupted = role[ui] == 2;

    // home uniform in the city disc, work a few km away
    const double hr = cfg.city_radius_deg * std::sqrt(rng.uniform01());
    const double ha = rng.uniform01() * 2.0 * kPi;
    t.home_lon = cfg.center_lon + hr * std::cos(ha);
    t.home_lat = cfg.center_lat + hr * std::sin(ha);
    const double wd = rng.uniform(2000.0, 8000.0), wa = rng.uniform01() * 2.0 * kPi;
    const double work_lon = t.home_lon + wd * std::cos(wa) / lon_scale;
    const double work_lat = t.home_lat + wd * std::sin(wa) / kMetersPerDeg;
    t.home_district = rng.below(cfg.n_districts);

    // routine interest mixture; intent 0 stays at the baseline share
    t.intent_mixture.assign(cfg.n_intents, 0.0);
    t.intent_mixture[0] = cfg.base_disaster_share;
    const std::size_t primary = 1 + rng.below(cfg.n_intents - 1);
    const double rest = 1.0 - cfg.base_disaster_share;
    if (cfg.n_intents == 2) {
      t.intent_mixture[primary] = rest;
    } else {
      std::size_t secondary = 1 + rng.below(cfg.n_intents - 1);
      while (secondary == primary) secondary = 1 + rng.below(cfg.n_intents - 1);
      t.intent_mixture[primary] += rest * 0.7;
      t.intent_mixture[secondary] += rest * 0.2;
      const double crumbs = rest * 0.1 / static_cast<double>(cfg.n_intents - 1);
      for (std::size_t i = 1; i < cfg.n_intents; ++i) t.intent_mixture[i] += crumbs;
      double sum = 0.0;
      for (double v : t.intent_mixture) sum += v;
      for (double& v : t.intent_mixture) v /= sum;
    }

    // pre-alert mixture: evacuees shift weight onto the disaster intent
    std::vector<double> alert_mixture = t.intent_mixture;
    if (t.evacuated) {
      alert_mixture[0] = evacuee_share;
      const double scale = (1.0 - evacuee_share) / (1.0 - t.intent_mixture[0]);
      for (std::size_t i = 1; i < alert_mixture.size(); ++i)
        alert_mixture[i] = t.intent_mixture[i] * scale;
    }

    // disaster-day anchors
    const double evac_a = rng.uniform01() * 2.0 * kPi;
    const double dis_lon = t.home_lon + cfg.displacement_m * std::cos(evac_a) / lon_scale;
    const double dis_lat = t.home_lat + cfg.displacement_m * std::sin(evac_a) / kMetersPerDeg;
    const double drift_d = rng.uniform(cfg.disrupted_min_m, cfg.disrupted_max_m);
    const double drift_a = rng.uniform01() * 2.0 * kPi;
    // offset from the routine anchor, wherever that is at the time
    const double drift_dlon = drift_d * std::cos(drift_a) / lon_scale;
    const double drift_dlat = drift_d * std::sin(drift_a) / kMetersPerDeg;

    // People revisit the same spot at the same hour day after day: a fixed
    // per-hour micro anchor carries most of the configured scatter, the
    // per-point remainder stays well inside the analysis bandwidth. The
    // truncation limits keep every point within 3 sigma of the routine
    // anchor on each axis.
    const double sigma_within = 0.5 * cfg.gps_noise_m;
    const double sigma_anchor =
        std::sqrt(std::max(0.0, cfg.gps_noise_m * cfg.gps_noise_m - sigma_within * sigma_within));
    std::array<double, 24> micro_dlon{}, micro_dlat{};
    for (std::size_t h = 0; h < 24; ++h) {
      micro_dlon[h] = trunc_normal(rng, 1.7) * sigma_anchor / lon_scale;
      micro_dlat[h] = trunc_normal(rng, 1.7) * sigma_anchor / kMetersPerDeg;
    }

    std::vector<anomaly::GpsRecord> user_gps;
    for (std::int64_t day_start = cfg.windows.t0; day_start < cfg.windows.t_e;
         day_start += 86400) {
      const std::int64_t day_end = std::min<std::int64_t>(day_start + 86400, cfg.windows.t_e);

      // ---- queries: sessions in disjoint slots so gaps sessionize cleanly
      std::size_t n_q = query_law.sample(rng);
      if (n_q == 1) n_q = 2; // a lone query would not survive sessionizing
      std::vector<std::size_t> lens;
      std::size_t rem = n_q;
      while (rem >= 2) {
        std::size_t len = 2 + rng.below(5);
        if (len > rem) len = rem;
        if (rem - len == 1) ++len;
        lens.push_back(len);
        rem -= len;
      }
      const std::int64_t day_len = day_end - day_start;
      const std::int64_t slot = day_len / static_cast<std::int64_t>(lens.size());
      if (slot >= 1400) {
        for (std::size_t si = 0; si < lens.size(); ++si) {
          std::int64_t ts = day_start + static_cast<std::int64_t>(si) * slot +
                            static_cast<std::int64_t>(rng.below(
                                static_cast<std::size_t>(slot - 1400) + 1));
          const bool alert_phase = t.evacuated && ts >= cfg.windows.t_l;
          const std::size_t intent =
              sample_mixture(alert_phase ? alert_mixture : t.intent_mixture, rng);
          const std::size_t district =
              rng.uniform01() < 0.9 ? t.home_district : rng.below(cfg.n_districts);
          const auto& cycle = templates[intent];
          const std::size_t start_pos = rng.below(cycle.size());
          corpus::Session sess;
          sess.user = t.user;
          for (std::size_t j = 0; j < lens[si]; ++j) {
            std::string text =
                cycle[(start_pos + j) % cycle.size()] + " " + districts[district];
            w.query_intent.emplace(text, intent);
            w.queries.push_back(corpus::QueryRecord{t.user, ts, text});
            sess.queries.push_back(std::move(text));
            sess.timestamps.push_back(ts);
            ts += 5 + static_cast<std::int64_t>(rng.below(106));
          }
          w.sessions.push_back(std::move(sess));
        }
      }

      // ---- gps: pings early in active hours around the routine anchor
      const std::size_t n_g = gps_floor + gps_law.sample(rng);
      for (std::size_t pi = 0; pi < n_g; ++pi) {
        const std::size_t hour = 7 + rng.below(16);
        const std::int64_t ts = day_start + static_cast<std::int64_t>(hour) * 3600 +
                                static_cast<std::int64_t>(rng.below(900));
        if (ts > cfg.windows.t_e) continue;
        double a_lon, a_lat;
        if (is_weekday(ts) && hour >= 9 && hour < 17) {
          a_lon = work_lon;
          a_lat = work_lat;
        } else {
          a_lon = t.home_lon;
          a_lat = t.home_lat;
        }
        if (t.evacuated && ts >= cfg.windows.t_d) {
          a_lon = dis_lon;
          a_lat = dis_lat;
        } else {
          a_lon += micro_dlon[hour];
          a_lat += micro_dlat[hour];
          if (t.disrupted && ts >= cfg.windows.t_d) {
            a_lon += drift_dlon;
            a_lat += drift_dlat;
          }
        }
        const double nx = trunc_normal(rng) * sigma_within;
        const double ny = trunc_normal(rng) * sigma_within;
        user_gps.push_back(anomaly::GpsRecord{t.user, a_lon + nx / lon_scale,
                                           a_lat + ny / kMetersPerDeg, ts});
      }
    }
    std::stable_sort(user_gps.begin(), user_gps.end(),
                     [](const anomaly::GpsRecord& a, const anomaly::GpsRecord& b) {
                       return a.ts < b.ts;
                     });
    w.gps.insert(w.gps.end(), user_gps.begin(), user_gps.end());
    w.truth.index.emplace(t.user, w.truth.users.size());
    w.truth.users.push_back(std::move(t));
  }
  return w;
}

std::vector<SimilarityPair> similarity_pairs(const World& world, std::size_t n_per_class,
                                             std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::string>> by_intent;
  for (const auto& [text, intent] : world.query_intent) by_intent[intent].push_back(text);
  std::vector<std::vector<std::string>> groups;
  for (auto& [intent, texts] : by_intent) {
    std::sort(texts.begin(), texts.end());
    if (texts.size() >= 2) groups.push_back(std::move(texts));
  }
  if (groups.size() < 2)
    fail("usage", "similarity_pairs needs at least two intents with two queries each");

  Rng rng(derive_seed(seed, "sim-pairs"));
  std::vector<SimilarityPair> out;
  out.reserve(2 * n_per_class);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const auto& g = groups[rng.below(groups.size())];
    const std::size_t a = rng.below(g.size());
    std::size_t b = rng.below(g.size());
    while (b == a) b = rng.below(g.size());
    out.push_back(SimilarityPair{g[a], g[b], true});
  }
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const std::size_t ga = rng.below(groups.size());
    std::size_t gb = rng.below(groups.size());
    while (gb == ga) gb = rng.below(groups.size());
    out.push_back(SimilarityPair{groups[ga][rng.below(groups[ga].size())],
                                 groups[gb][rng.below(groups[gb].size())], false});
  }
  return out;
}

std::string OracleReport::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["tp"] = tp;
  j["tn"] = tn;
  j["fp"] = fp;
  j["fn"] = fn;
  j["accuracy"] = accuracy;
  j["auc"] = auc;
  return j.dump(2) + "\n";
}

OracleReport oracle_report(std::span<const std::string> users, std::span<const double> scores,
                           const GroundTruth& truth) {
  if (users.size() != scores.size()) fail("shape", "oracle_report: users/scores mismatch");
  if (users.empty()) fail("usage", "oracle_report: empty input");
  std::vector<int> labels;
  labels.reserve(users.size());
  for (const auto& u : users) labels.push_back(truth.find(u).evacuated ? 1 : 0);
  const cls::Confusion c = cls::confusion(scores, labels);
  OracleReport rep;
  rep.n = users.size();
  rep.tp = c.tp;
  rep.tn = c.tn;
  rep.fp = c.fp;
  rep.fn = c.fn;
  rep.accuracy = c.accuracy();
  rep.auc = cls::auc(scores, labels);
  return rep;
}

void write_query_log_tsv(const std::string& path,
                         std::span<const corpus::QueryRecord> records) {
  std::string out;
  out.reserve(records.size() * 40);
  for (const auto& r : records) {
    out += r.user;
    out += '\t';
    out += std::to_string(r.ts);
    out += '\t';
    out += r.text;
    out += '\n';
  }
  io::write_file(path, out);
}

void write_gps_log_tsv(const std::string& path, std::span<const anomaly::GpsRecord> records) {
  std::string out;
  out.reserve(records.size() * 60);
  for (const auto& r : records) {
    out += r.user;
    out += '\t';
    out += std::to_string(r.ts);
    out += '\t';
    out += io::format_double(r.lat);
    out += '\t';
    out += io::format_double(r.lon);
    out += '\n';
  }
  io::write_file(path, out);
}

void write_truth_tsv(const std::string& path, const GroundTruth& truth) {
  std::string out = "# user\tevacuated\tdisrupted\thome_lon\thome_lat\thome_district\tmixture\n";
  for (const auto& t : truth.users) {
    out += t.user;
    out += '\t';
    out += t.evacuated ? '1' : '0';
    out += '\t';
    out += t.disrupted ? '1' : '0';
    out += '\t';
    out += io::format_double(t.home_lon);
    out += '\t';
    out += io::format_double(t.home_lat);
    out += '\t';
    out += std::to_string(t.home_district);
    out += '\t';
    for (std::size_t i = 0; i < t.intent_mixture.size(); ++i) {
      if (i) out += ',';
      out += io::format_double(t.intent_mixture[i]);
    }
    out += '\n';
  }
  io::write_file(path, out);
}

GroundTruth read_truth_tsv(const std::string& path) {
  GroundTruth truth;
  const std::string content = io::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 7) fail("parse", "truth row needs 7 columns: " + path);
    UserTruth t;
    t.user = std::string(cols[0]);
    t.evacuated = io::parse_int(cols[1]) != 0;
    t.disrupted = io::parse_int(cols[2]) != 0;
    t.home_lon = io::parse_double(cols[3]);
    t.home_lat = io::parse_double(cols[4]);
    t.home_district = static_cast<std::size_t>(io::parse_int(cols[5]));
    for (const auto part : io::split(cols[6], ','))
      t.intent_mixture.push_back(io::parse_double(part));
    truth.index.emplace(t.user, truth.users.size());
    truth.users.push_back(std::move(t));
  }
  return truth;
}

void write_similarity_pairs_tsv(const std::string& path,
                                std::span<const SimilarityPair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += p.a;
    out += '\t';
    out += p.b;
    out += '\t';
    out += p.same_category ? '1' : '0';
    out += '\n';
  }
  io::write_file(path, out);
}

std::vector<SimilarityPair> read_similarity_pairs_tsv(const std::string& path) {
  std::vector<SimilarityPair> pairs;
  const std::string content = io::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 3) fail("parse", "similarity pair row needs 3 columns: " + path);
    pairs.push_back(SimilarityPair{std::string(cols[0]), std::string(cols[1]),
                                   io::parse_int(cols[2]) != 0});
  }
  return pairs;
}

} // namespace evaq::synth

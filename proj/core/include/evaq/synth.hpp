#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "evaq/anomaly.hpp"
#include "evaq/corpus.hpp"
#include "evaq/error.hpp"

namespace evaq::synth {

/// Synthetic-world knobs. Defaults give a 32-day scenario: 28 days of
/// routine, a 3-day pre-alert window and one disaster day.
struct WorldConfig {
  std::size_t n_users = 2000;
  double evacuation_rate = 0.046;

  // daily volumes, truncated power laws stated by their mean
  double query_mean_per_day = 12.0;
  std::size_t query_max_per_day = 60;
  double gps_mean_per_day = 40.0;
  std::size_t gps_max_per_day = 200;

  std::size_t n_intents = 4; // intent 0 is the disaster intent
  std::size_t n_districts = 40;
  double base_disaster_share = 0.08; // everyone's routine share of intent 0
  double shift_strength = 3.0;       // target evacuee/stayer disaster-term ratio

  double displacement_m = 5000.0; // evacuees during the disaster window
  double gps_noise_m = 50.0;      // per point, truncated at 3 sigma
  double disrupted_fraction = 0.03;
  double disrupted_min_m = 45.0, disrupted_max_m = 65.0;

  // city frame
  double center_lon = 139.0, center_lat = 35.0;
  double city_radius_deg = 0.09;

  anomaly::TimeWindows windows{1609459200,                       // 2021-01-01, a Friday
                            1609459200 + 28 * 86400,          // alert forecast
                            1609459200 + 31 * 86400,          // disaster onset
                            1609459200 + 32 * 86400};
  std::uint64_t seed = 1;

  void validate() const;
};

struct UserTruth {
  std::string user;
  bool evacuated = false;
  bool disrupted = false; // stayer with a mild disaster-day displacement
  double home_lon = 0.0, home_lat = 0.0;
  std::size_t home_district = 0;
  std::vector<double> intent_mixture; // routine shares, sums to 1
};

struct GroundTruth {
  std::vector<UserTruth> users; // user-id order
  std::unordered_map<std::string, std::size_t> index;

  const UserTruth& find(const std::string& user) const;
  std::size_t evacuee_count() const;
};

struct World {
  std::vector<corpus::QueryRecord> queries; // sorted by (user, ts)
  std::vector<anomaly::GpsRecord> gps;         // sorted by (user, ts)
  GroundTruth truth;
  std::vector<corpus::Session> sessions; // the generator's intended sessions
  std::unordered_map<std::string, std::size_t> query_intent; // distinct text -> intent
};

/// Query templates per intent. Every template of one intent shares a leading
/// intent word; sessions walk the template cycle of one intent with one
/// district suffix, so the next query is always determined by the current one.
std::vector<std::vector<std::string>> intent_templates(std::size_t n_intents);
std::vector<std::string> district_names(std::size_t n);

World gen_world(const WorldConfig& cfg);

/// Category-labeled pairs of distinct query strings for similarity probes:
/// n same-intent and n cross-intent pairs.
struct SimilarityPair {
  std::string a, b;
  bool same_category = false;
};
std::vector<SimilarityPair> similarity_pairs(const World& world, std::size_t n_per_class,
                                             std::uint64_t seed);

struct OracleReport {
  std::size_t n = 0;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0.0;
  double auc = 0.0;

  std::string to_json() const;
};

/// Scores (or 0/1 labels passed as doubles) against the true evacuation
/// flags; hard predictions use score > 0.5. Unknown user ids fail.
OracleReport oracle_report(std::span<const std::string> users, std::span<const double> scores,
                           const GroundTruth& truth);

// serialization
void write_query_log_tsv(const std::string& path, std::span<const corpus::QueryRecord> records);
void write_gps_log_tsv(const std::string& path, std::span<const anomaly::GpsRecord> records);
void write_truth_tsv(const std::string& path, const GroundTruth& truth);
GroundTruth read_truth_tsv(const std::string& path);
void write_similarity_pairs_tsv(const std::string& path, std::span<const SimilarityPair> pairs);
std::vector<SimilarityPair> read_similarity_pairs_tsv(const std::string& path);

} // namespace evaq::synth

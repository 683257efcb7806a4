#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evaq/error.hpp"

namespace evaq::anomaly {

struct GpsRecord {
  std::string user;
  double lon = 0.0; // degrees
  double lat = 0.0; // degrees
  std::int64_t ts = 0;
};

/// t_learn = [t0, t_l), t_pre = [t_l, t_d), t_dis = [t_d, t_e].
struct TimeWindows {
  std::int64_t t0 = 0;
  std::int64_t t_l = 0;
  std::int64_t t_d = 0;
  std::int64_t t_e = 0;

  void validate() const {
    if (!(t0 < t_l && t_l < t_d && t_d < t_e))
      fail("config", "time windows must satisfy t0 < t_l < t_d < t_e");
  }
  bool in_learn(std::int64_t ts) const { return ts >= t0 && ts < t_l; }
  bool in_pre(std::int64_t ts) const { return ts >= t_l && ts < t_d; }
  bool in_dis(std::int64_t ts) const { return ts >= t_d && ts <= t_e; }
};

struct KernelBandwidth {
  double sigma_x_m = 100.0;
  double sigma_y_m = 100.0;
  double sigma_t_h = 1.0;

  void validate() const {
    if (!(sigma_x_m > 0 && sigma_y_m > 0 && sigma_t_h > 0))
      fail("config", "kernel bandwidths must be positive");
  }
};

/// Day of week with 0 = Sunday, from a UTC epoch timestamp.
int day_of_week(std::int64_t ts);
/// Integer hour 0..23.
int hour_of_day(std::int64_t ts);
/// Fractional hour of day in [0, 24).
double hour_fraction(std::int64_t ts);
/// Circular hour-of-day distance min(|a-b|, 24-|a-b|).
double circular_hour_distance(double a, double b);

/// Exact per-user Gaussian KDE over (x, y, hour), conditioned on
/// (day-of-week, hour) buckets. Coordinates are local meters from an
/// equirectangular projection about the user's median position.
struct DensityModel {
  double origin_lon = 0.0;
  double origin_lat = 0.0;
  KernelBandwidth bw;

  struct Center {
    double x = 0.0;
    double y = 0.0;
    double hour = 0.0;
  };

  std::array<std::vector<Center>, 7 * 24> buckets;  // index d*24 + h
  std::array<std::vector<Center>, 24> hour_pool;    // fallback: same hour, any day
  std::vector<Center> all;                          // fallback: everything

  std::size_t center_count() const { return all.size(); }
  void project(double lon, double lat, double& x, double& y) const;
};

struct FitOptions {
  std::size_t min_obs = 50;
};

/// Builds the model from the user's t_learn records; nullopt when the
/// user has fewer than min_obs observations there.
std::optional<DensityModel> fit_density(std::span<const GpsRecord> user_records,
                                        const KernelBandwidth& bw, const TimeWindows& windows,
                                        const FitOptions& opts = {});

/// KDE density at (lon, lat, ts) conditioned on the timestamp's
/// (day-of-week, hour); empty buckets widen to same-hour-any-day, then to
/// all centers.
double eval_density(const DensityModel& model, double lon, double lat, std::int64_t ts);

struct ScoreOptions {
  std::size_t min_pre = 10;
  std::size_t min_dis = 5;
};

enum class Exclusion {
  none,
  too_few_learn,
  too_few_pre,
  too_few_dis,
  zero_spread,
};

const char* exclusion_name(Exclusion e);

struct AnomalyScore {
  double p_pre = 0.0;
  double s_pre = 0.0; // population standard deviation
  double p_dis = 0.0;
  double theta = 0.0;
};

struct UserScore {
  std::string user;
  std::optional<AnomalyScore> score;
  Exclusion exclusion = Exclusion::none;
};

/// p_pre/s_pre over t_pre densities, p_dis over t_dis densities,
/// theta = (p_pre - p_dis)/s_pre.
AnomalyScore anomaly_score(const DensityModel& model, std::span<const GpsRecord> pre_records,
                           std::span<const GpsRecord> dis_records);

/// Full chain for one user's records (any order, one user): fit on
/// t_learn, score against t_pre/t_dis, applying the data floors.
UserScore score_user(std::span<const GpsRecord> user_records, const TimeWindows& windows,
                     const KernelBandwidth& bw, const FitOptions& fit_opts = {},
                     const ScoreOptions& score_opts = {});

enum class Label { stayed = 0, evacuated = 1, excluded = 2 };

/// theta > hi -> evacuated; |theta| < lo -> stayed; otherwise excluded.
/// Inequalities are strict.
Label label_theta(double theta, double theta_hi = 4.0, double theta_lo = 1.0);

/// Empirical (1 - target_rate) quantile with linear interpolation.
double calibrate_threshold(std::vector<double> thetas, double target_rate = 0.046);

struct Histogram {
  double bin_width = 0.5;
  std::int64_t min_bin = 0; // bin k covers [k*w, (k+1)*w)
  std::vector<std::size_t> counts;
};

Histogram score_histogram(std::span<const double> thetas, double bin_width = 0.5);
std::string histogram_tsv(const Histogram& h);

struct GpsIngestResult {
  std::vector<GpsRecord> records; // sorted by (user, ts)
  std::vector<std::pair<std::size_t, std::string>> issues;
};

/// JSONL {"user":…,"ts":…,"lat":…,"lon":…} or TSV user, ts, lat, lon.
GpsIngestResult ingest_gps_log_file(const std::string& path, bool abort_on_error = false);

} // namespace evaq::anomaly

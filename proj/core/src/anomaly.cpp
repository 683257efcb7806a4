#include "evaq/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "evaq/io.hpp"

namespace evaq::anomaly {

namespace {

constexpr double kEarthRadiusM = 6371000.0;
constexpr double kDegToRad = 0.017453292519943295;
constexpr double kTwoPiPow32 = 15.749609945722419; // (2*pi)^(3/2)

} // namespace

int day_of_week(std::int64_t ts) {
  // 1970-01-01 was a Thursday; Sunday = 0.
  std::int64_t days = ts / 86400;
  if (ts < 0 && ts % 86400 != 0) --days;
  return static_cast<int>(((days + 4) % 7 + 7) % 7);
}

int hour_of_day(std::int64_t ts) {
  std::int64_t sec = ts % 86400;
  if (sec < 0) sec += 86400;
  return static_cast<int>(sec / 3600);
}

double hour_fraction(std::int64_t ts) {
  std::int64_t sec = ts % 86400;
  if (sec < 0) sec += 86400;
  return static_cast<double>(sec) / 3600.0;
}

double circular_hour_distance(double a, double b) {
  double d = std::fabs(a - b);
  d = std::fmod(d, 24.0);
  return std::min(d, 24.0 - d);
}

void DensityModel::project(double lon, double lat, double& x, double& y) const {
  x = (lon - origin_lon) * kDegToRad * kEarthRadiusM * std::cos(origin_lat * kDegToRad);
  y = (lat - origin_lat) * kDegToRad * kEarthRadiusM;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

std::optional<DensityModel> fit_density(std::span<const GpsRecord> user_records,
                                        const KernelBandwidth& bw, const TimeWindows& windows,
                                        const FitOptions& opts) {
  windows.validate();
  bw.validate();
  std::vector<const GpsRecord*> learn;
  for (const auto& r : user_records)
    if (windows.in_learn(r.ts)) learn.push_back(&r);
  if (learn.size() < opts.min_obs) return std::nullopt;

  std::vector<double> lons, lats;
  lons.reserve(learn.size());
  lats.reserve(learn.size());
  for (const auto* r : learn) {
    lons.push_back(r->lon);
    lats.push_back(r->lat);
  }

  DensityModel m;
  m.bw = bw;
  m.origin_lon = median_of(std::move(lons));
  m.origin_lat = median_of(std::move(lats));

  for (const auto* r : learn) {
    DensityModel::Center c;
    m.project(r->lon, r->lat, c.x, c.y);
    c.hour = hour_fraction(r->ts);
    const int d = day_of_week(r->ts);
    const int h = hour_of_day(r->ts);
    m.buckets[static_cast<std::size_t>(d * 24 + h)].push_back(c);
    m.hour_pool[static_cast<std::size_t>(h)].push_back(c);
    m.all.push_back(c);
  }
  return m;
}

double eval_density(const DensityModel& model, double lon, double lat, std::int64_t ts) {
  if (std::isnan(lon) || std::isnan(lat))
    fail("numeric", "eval_density: NaN coordinates");
  if (model.all.empty()) fail("usage", "eval_density: model has no centers");

  const int d = day_of_week(ts);
  const int h = hour_of_day(ts);
  const std::vector<DensityModel::Center>* centers =
      &model.buckets[static_cast<std::size_t>(d * 24 + h)];
  if (centers->empty()) centers = &model.hour_pool[static_cast<std::size_t>(h)];
  if (centers->empty()) centers = &model.all;

  double x, y;
  model.project(lon, lat, x, y);
  const double t = hour_fraction(ts);

  const double inv2sx = 0.5 / (model.bw.sigma_x_m * model.bw.sigma_x_m);
  const double inv2sy = 0.5 / (model.bw.sigma_y_m * model.bw.sigma_y_m);
  const double inv2st = 0.5 / (model.bw.sigma_t_h * model.bw.sigma_t_h);

  double sum = 0.0;
  for (const auto& c : *centers) {
    const double dx = x - c.x;
    const double dy = y - c.y;
    const double dt = circular_hour_distance(t, c.hour);
    sum += std::exp(-(dx * dx * inv2sx + dy * dy * inv2sy + dt * dt * inv2st));
  }
  const double norm = static_cast<double>(centers->size()) * kTwoPiPow32 *
                      model.bw.sigma_x_m * model.bw.sigma_y_m * model.bw.sigma_t_h;
  return sum / norm;
}

const char* exclusion_name(Exclusion e) {
  switch (e) {
    case Exclusion::none: return "none";
    case Exclusion::too_few_learn: return "too_few_learn";
    case Exclusion::too_few_pre: return "too_few_pre";
    case Exclusion::too_few_dis: return "too_few_dis";
    case Exclusion::zero_spread: return "zero_spread";
  }
  return "unknown";
}

AnomalyScore anomaly_score(const DensityModel& model, std::span<const GpsRecord> pre_records,
                           std::span<const GpsRecord> dis_records) {
  if (pre_records.empty() || dis_records.empty())
    fail("usage", "anomaly_score: empty record spans");

  std::vector<double> pre;
  pre.reserve(pre_records.size());
  for (const auto& r : pre_records) pre.push_back(eval_density(model, r.lon, r.lat, r.ts));

  double mean = 0.0;
  for (double v : pre) mean += v;
  mean /= static_cast<double>(pre.size());
  double var = 0.0;
  for (double v : pre) var += (v - mean) * (v - mean);
  var /= static_cast<double>(pre.size()); // population variance

  double dis_mean = 0.0;
  for (const auto& r : dis_records) dis_mean += eval_density(model, r.lon, r.lat, r.ts);
  dis_mean /= static_cast<double>(dis_records.size());

  AnomalyScore s;
  s.p_pre = mean;
  s.s_pre = std::sqrt(var);
  s.p_dis = dis_mean;
  s.theta = s.s_pre > 0.0 ? (s.p_pre - s.p_dis) / s.s_pre : 0.0;
  return s;
}

UserScore score_user(std::span<const GpsRecord> user_records, const TimeWindows& windows,
                     const KernelBandwidth& bw, const FitOptions& fit_opts,
                     const ScoreOptions& score_opts) {
  windows.validate();
  UserScore out;
  if (!user_records.empty()) out.user = user_records.front().user;

  auto model = fit_density(user_records, bw, windows, fit_opts);
  if (!model) {
    out.exclusion = Exclusion::too_few_learn;
    return out;
  }

  std::vector<GpsRecord> pre, dis;
  for (const auto& r : user_records) {
    if (windows.in_pre(r.ts)) pre.push_back(r);
    else if (windows.in_dis(r.ts)) dis.push_back(r);
  }
  if (pre.size() < score_opts.min_pre) {
    out.exclusion = Exclusion::too_few_pre;
    return out;
  }
  if (dis.size() < score_opts.min_dis) {
    out.exclusion = Exclusion::too_few_dis;
    return out;
  }

  AnomalyScore s = anomaly_score(*model, pre, dis);
  if (s.s_pre == 0.0) {
    out.exclusion = Exclusion::zero_spread;
    return out;
  }
  out.score = s;
  return out;
}

Label label_theta(double theta, double theta_hi, double theta_lo) {
  if (!(theta_hi > theta_lo) || !(theta_lo > 0))
    fail("config", "label thresholds must satisfy theta_hi > theta_lo > 0");
  if (theta > theta_hi) return Label::evacuated;
  if (std::fabs(theta) < theta_lo) return Label::stayed;
  return Label::excluded;
}

double calibrate_threshold(std::vector<double> thetas, double target_rate) {
  if (!(target_rate > 0.0 && target_rate < 1.0))
    fail("config", "calibrate_threshold: target rate must be in (0,1)");
  const double need = 1.0 / target_rate;
  if (static_cast<double>(thetas.size()) < need)
    fail("config", "calibrate_threshold: need at least " +
                       std::to_string(static_cast<std::size_t>(std::ceil(need))) +
                       " scores, got " + std::to_string(thetas.size()));
  std::sort(thetas.begin(), thetas.end());
  if (thetas.front() == thetas.back())
    fail("config", "calibrate_threshold: all scores are equal; no separating threshold");
  const double p = 1.0 - target_rate;
  const double pos = p * static_cast<double>(thetas.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= thetas.size()) return thetas.back();
  return thetas[lo] + frac * (thetas[lo + 1] - thetas[lo]);
}

Histogram score_histogram(std::span<const double> thetas, double bin_width) {
  if (!(bin_width > 0)) fail("config", "score_histogram: bin width must be positive");
  Histogram h;
  h.bin_width = bin_width;
  if (thetas.empty()) return h;
  std::int64_t lo = 0, hi = 0;
  bool first = true;
  auto bin_of = [&](double v) {
    return static_cast<std::int64_t>(std::floor(v / bin_width));
  };
  for (double v : thetas) {
    const std::int64_t b = bin_of(v);
    if (first) {
      lo = hi = b;
      first = false;
    } else {
      lo = std::min(lo, b);
      hi = std::max(hi, b);
    }
  }
  h.min_bin = lo;
  h.counts.assign(static_cast<std::size_t>(hi - lo + 1), 0);
  for (double v : thetas) ++h.counts[static_cast<std::size_t>(bin_of(v) - lo)];
  return h;
}

std::string histogram_tsv(const Histogram& h) {
  std::ostringstream ss;
  ss << "bin_lo\tbin_hi\tcount\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double lo = static_cast<double>(h.min_bin + static_cast<std::int64_t>(i)) * h.bin_width;
    ss << io::format_double(lo) << "\t" << io::format_double(lo + h.bin_width) << "\t"
       << h.counts[i] << "\n";
  }
  return ss.str();
}

GpsIngestResult ingest_gps_log_file(const std::string& path, bool abort_on_error) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open GPS log: " + path);

  GpsIngestResult out;
  std::string line;
  std::size_t line_no = 0;
  auto trouble = [&](const std::string& msg) {
    if (abort_on_error) fail("parse", "line " + std::to_string(line_no) + ": " + msg);
    out.issues.emplace_back(line_no, msg);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    GpsRecord r;
    bool json = false;
    for (char c : line) {
      if (c == ' ' || c == '\t') continue;
      json = c == '{';
      break;
    }
    try {
      if (json) {
        nlohmann::json j = nlohmann::json::parse(line);
        if (!j.contains("user") || !j["user"].is_string()) fail("parse", "missing 'user'");
        if (!j.contains("ts") || !j["ts"].is_number_integer()) fail("parse", "missing 'ts'");
        if (!j.contains("lat") || !j["lat"].is_number()) fail("parse", "missing 'lat'");
        if (!j.contains("lon") || !j["lon"].is_number()) fail("parse", "missing 'lon'");
        r.user = j["user"].get<std::string>();
        r.ts = j["ts"].get<std::int64_t>();
        r.lat = j["lat"].get<double>();
        r.lon = j["lon"].get<double>();
      } else {
        const auto f = io::split(line, '\t');
        if (f.size() != 4) fail("parse", "expected 4 tab-separated fields");
        r.user = std::string(f[0]);
        r.ts = io::parse_int(f[1]);
        r.lat = io::parse_double(f[2]);
        r.lon = io::parse_double(f[3]);
      }
    } catch (const Error& e) {
      trouble(e.what());
      continue;
    } catch (const nlohmann::json::exception& e) {
      trouble(std::string("bad JSON: ") + e.what());
      continue;
    }
    if (r.user.empty()) {
      trouble("empty user id");
      continue;
    }
    if (!(r.lat >= -90.0 && r.lat <= 90.0) || !(r.lon >= -180.0 && r.lon <= 180.0)) {
      trouble("coordinates out of range");
      continue;
    }
    if (r.ts < 0) {
      trouble("negative timestamp");
      continue;
    }
    out.records.push_back(std::move(r));
  }
  std::stable_sort(out.records.begin(), out.records.end(),
                   [](const GpsRecord& a, const GpsRecord& b) {
                     if (a.user != b.user) return a.user < b.user;
                     return a.ts < b.ts;
                   });
  return out;
}

} // namespace evaq::anomaly

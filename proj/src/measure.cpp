#include "cmrlm/measure.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include "cmrlm/errors.hpp"

namespace cmrlm {

DetectionOutcome detection_outcome(const LandmarkSet& pred, const LandmarkSet& truth) {
  if (pred.view != truth.view) {
    throw UsageError("detection_outcome: prediction is " + std::string(view_name(pred.view)) + ", truth is " +
                     std::string(view_name(truth.view)));
  }
  DetectionOutcome out;
  for (int k = 0; k < kSlots; ++k) {
    const std::string name(slot_names(truth.view)[k]);
    if (truth.points[k] && !pred.points[k]) out.missed.push_back(name);
    if (!truth.points[k] && pred.points[k]) out.spurious.push_back(name);
  }
  out.success = out.missed.empty() && out.spurious.empty();
  return out;
}

double detection_rate(const std::vector<DetectionOutcome>& outcomes) {
  if (outcomes.empty()) throw UsageError("detection_rate: no outcomes");
  std::size_t ok = 0;
  for (const auto& o : outcomes) ok += o.success;
  return static_cast<double>(ok) / static_cast<double>(outcomes.size());
}

double l2_mm(const Point2& a, const Point2& b, double spacing_row, double spacing_col) {
  const double dr = (a.y - b.y) * spacing_row;
  const double dc = (a.x - b.x) * spacing_col;
  return std::sqrt(dr * dr + dc * dc);
}

double a_rvi_angle(const LandmarkSet& sax) {
  if (sax.view != View::SAX) throw UsageError("a_rvi_angle: needs a SAX landmark set");
  const auto& arvi = sax.points[0];
  const auto& clv = sax.points[2];
  if (!arvi || !clv) throw UsageError("a_rvi_angle: A-RVI and C-LV must both be present");
  const double drow = (arvi->y - clv->y) * sax.frame.spacing_row;
  const double dcol = (arvi->x - clv->x) * sax.frame.spacing_col;
  if (drow == 0.0 && dcol == 0.0) throw GeometryError("a_rvi_angle: A-RVI coincides with C-LV");
  const double deg = std::atan2(-drow, dcol) * (180.0 / std::numbers::pi);
  return deg == -180.0 ? 180.0 : deg;
}

double angle_diff(double a, double b) {
  double d = std::fmod(a - b, 360.0);
  if (d <= -180.0) d += 360.0;
  if (d > 180.0) d -= 360.0;
  return d;
}

double lv_length(const LandmarkSet& lax) {
  if (!is_lax(lax.view)) throw UsageError("lv_length: needs a long-axis landmark set");
  for (int k = 0; k < kSlots; ++k) {
    if (!lax.points[k]) throw UsageError("lv_length: " + std::string(slot_names(lax.view)[k]) + " is missing");
  }
  const Point2 mid{0.5 * (lax.points[0]->x + lax.points[1]->x), 0.5 * (lax.points[0]->y + lax.points[1]->y)};
  return l2_mm(*lax.points[2], mid, lax.frame.spacing_row, lax.frame.spacing_col);
}

double longitudinal_shortening(double len_ed, double len_es) {
  if (!(len_ed > 0)) throw UsageError("longitudinal_shortening: end-diastolic length must be positive");
  return 100.0 * (len_ed - len_es) / len_ed;
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw StatisticsError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw StatisticsError("incomplete beta: parameters must be positive");
  if (!(x >= 0 && x <= 1)) throw StatisticsError("incomplete beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1) / (a + b + 2)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0)) throw StatisticsError("student t: degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

namespace {

SummaryStats summarize(const std::vector<double>& v) {
  SummaryStats s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / s.n;
  if (s.n >= 2) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

}  // namespace

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw StatisticsError("welch_t: each sample needs at least two values");
  const SummaryStats sa = summarize(a), sb = summarize(b);
  const double va = *sa.sd * *sa.sd / sa.n;
  const double vb = *sb.sd * *sb.sd / sb.n;
  const double se2 = va + vb;
  if (!(se2 > 0) || !std::isfinite(se2)) throw StatisticsError("welch_t: both samples have zero variance");
  WelchResult r;
  r.t = (sa.mean - sb.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (sa.n - 1) + vb * vb / (sb.n - 1));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

MetricsReport build_report(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& truth,
                           const std::vector<std::string>& sequences) {
  if (pred.size() != truth.size() || pred.size() != sequences.size()) {
    throw UsageError("build_report: " + std::to_string(pred.size()) + " predictions, " +
                     std::to_string(truth.size()) + " labels, " + std::to_string(sequences.size()) + " group tags");
  }
  struct Acc {
    int tested = 0, success = 0;
    std::vector<double> l2[kSlots];
    std::vector<double> diffs, pred_values, truth_values;
  };
  std::vector<std::pair<std::string, View>> order;
  std::map<std::pair<std::string, View>, Acc> acc;
  int total_success = 0;

  for (std::size_t i = 0; i < pred.size(); ++i) {
    const LandmarkSet& p = pred[i];
    const LandmarkSet& t = truth[i];
    const auto key = std::make_pair(sequences[i], t.view);
    if (!acc.count(key)) order.push_back(key);
    Acc& a = acc[key];
    ++a.tested;
    if (!detection_outcome(p, t).success) continue;
    ++a.success;
    ++total_success;
    for (int k = 0; k < kSlots; ++k) {
      if (t.points[k]) a.l2[k].push_back(l2_mm(*p.points[k], *t.points[k], t.frame.spacing_row, t.frame.spacing_col));
    }
    if (is_lax(t.view) && t.present_count() == kSlots) {
      LandmarkSet pm = p;
      pm.frame = t.frame;
      const double lp = lv_length(pm), lt = lv_length(t);
      if (lt > 0) {
        a.diffs.push_back(100.0 * std::abs(lp - lt) / lt);
        a.pred_values.push_back(lp);
        a.truth_values.push_back(lt);
      }
    } else if (t.view == View::SAX && t.points[0] && t.points[2]) {
      LandmarkSet pm = p;
      pm.frame = t.frame;
      try {
        const double at = a_rvi_angle(t);
        const double d = angle_diff(a_rvi_angle(pm), at);
        a.diffs.push_back(d);
        a.pred_values.push_back(at + d);
        a.truth_values.push_back(at);
      } catch (const GeometryError&) {
        // Coincident points have no angle; the sample stays out of the angle statistics.
      }
    }
  }

  MetricsReport r;
  r.n_tested = static_cast<int>(pred.size());
  r.n_success = total_success;
  r.detection_rate = pred.empty() ? 0.0 : static_cast<double>(total_success) / r.n_tested;
  for (const auto& key : order) {
    const Acc& a = acc[key];
    GroupReport g;
    g.sequence = key.first;
    g.view = key.second;
    g.n_tested = a.tested;
    g.n_success = a.success;
    g.detection_rate = static_cast<double>(a.success) / a.tested;
    for (int k = 0; k < kSlots; ++k) g.landmarks.push_back({std::string(slot_names(g.view)[k]), summarize(a.l2[k])});
    g.derived.measure = is_lax(g.view) ? "lv_length_diff_pct" : "a_rvi_angle_diff_deg";
    g.derived.difference = summarize(a.diffs);
    try {
      const WelchResult w = welch_t(a.pred_values, a.truth_values);
      g.derived.t = w.t;
      g.derived.p = w.p;
    } catch (const StatisticsError&) {
      // Too few samples or no spread: reported as null.
    }
    r.groups.push_back(std::move(g));
  }
  return r;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json stats_json(const SummaryStats& s) {
  return {{"n", s.n}, {"mean", s.n ? nlohmann::json(s.mean) : nlohmann::json(nullptr)}, {"sd", opt(s.sd)}};
}

std::string csv_num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string csv_opt(const std::optional<double>& v) { return v ? csv_num(*v) : ""; }

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json groups_json = nlohmann::json::array();
  for (const auto& g : groups) {
    nlohmann::json lms = nlohmann::json::array();
    for (const auto& l : g.landmarks) lms.push_back({{"name", l.name}, {"l2_mm", stats_json(l.l2_mm)}});
    groups_json.push_back({{"sequence", g.sequence},
                           {"view", view_name(g.view)},
                           {"n_tested", g.n_tested},
                           {"n_success", g.n_success},
                           {"detection_rate", g.detection_rate},
                           {"landmarks", lms},
                           {"derived",
                            {{"measure", g.derived.measure},
                             {"difference", stats_json(g.derived.difference)},
                             {"t", opt(g.derived.t)},
                             {"p", opt(g.derived.p)}}}});
  }
  return {{"angle_convention", "C-LV to A-RVI, atan2(-drow, dcol) in mm, degrees in (-180, 180], +x = image column"},
          {"l2_scope", "successful detections only"},
          {"n_tested", n_tested},
          {"n_success", n_success},
          {"detection_rate", detection_rate},
          {"groups", groups_json}};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "sequence,view,item,n_tested,n_success,detection_rate,n,mean,sd,t,p\n";
  for (const auto& g : groups) {
    const std::string head = g.sequence + "," + std::string(view_name(g.view)) + ",";
    const std::string counts =
        std::to_string(g.n_tested) + "," + std::to_string(g.n_success) + "," + csv_num(g.detection_rate) + ",";
    for (const auto& l : g.landmarks) {
      os << head << l.name << "_l2_mm," << counts << l.l2_mm.n << ","
         << (l.l2_mm.n ? csv_num(l.l2_mm.mean) : "") << "," << csv_opt(l.l2_mm.sd) << ",,\n";
    }
    const auto& d = g.derived;
    os << head << d.measure << "," << counts << d.difference.n << ","
       << (d.difference.n ? csv_num(d.difference.mean) : "") << "," << csv_opt(d.difference.sd) << ","
       << csv_opt(d.t) << "," << csv_opt(d.p) << "\n";
  }
  return os.str();
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream js(dir / "report.json");
  if (!js) throw IoError("cannot write " + (dir / "report.json").string());
  js << report.to_json().dump(2) << "\n";
  std::ofstream csv(dir / "report.csv");
  if (!csv) throw IoError("cannot write " + (dir / "report.csv").string());
  csv << report.to_csv();
}

}  // namespace cmrlm

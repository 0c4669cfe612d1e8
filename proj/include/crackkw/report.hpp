#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crackkw/metrics.hpp"
#include "crackkw/race.hpp"
#include "crackkw/train.hpp"

// Run outputs: CSV tables (comma, '.', header row, LF), JSON reports, SVG
// line charts and the per-run manifest.

#ifndef CRACKKW_VERSION
#define CRACKKW_VERSION "0.1.0"
#endif

namespace crackkw {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a; stable across platforms, used to fingerprint output files.
inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

class PredictionFormatError : public std::runtime_error {
 public:
  PredictionFormatError(std::size_t row, const std::string& what)
      : std::runtime_error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

/// Rows of `image_id,x1,y1,x2,y2,score`. An optional header row starting with
/// `image_id` is skipped; blank lines are ignored. Row numbers are 1-based
/// file lines.
inline std::vector<Detection> parse_predictions_csv(std::istream& is) {
  std::vector<Detection> out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (row == 1 && line.rfind("image_id", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 6) throw PredictionFormatError(row, "expected 6 fields, got " + std::to_string(cells.size()));
    auto num = [&](const std::string& c, const char* name) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(c, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || c.find_first_not_of(" \t", used) != std::string::npos || !std::isfinite(v)) {
        throw PredictionFormatError(row, std::string("bad ") + name + " '" + c + "'");
      }
      return v;
    };
    const double id = num(cells[0], "image_id");
    if (id < 0 || id != std::floor(id)) throw PredictionFormatError(row, "image_id must be a non-negative integer");
    Detection d;
    d.image_id = std::size_t(id);
    d.box = {num(cells[1], "x1"), num(cells[2], "y1"), num(cells[3], "x2"), num(cells[4], "y2")};
    d.score = num(cells[5], "score");
    if (!(d.box.x2 >= d.box.x1 && d.box.y2 >= d.box.y1)) throw PredictionFormatError(row, "box has x2 < x1 or y2 < y1");
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tables.

inline std::string trace_csv(const std::vector<StepRecord>& trace) {
  std::vector<double> losses;
  for (const auto& r : trace) losses.push_back(r.loss);
  const auto smooth = ema(losses);
  std::ostringstream os;
  os << "step,epoch,loss,obj,box,mask,loss_ema20\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& r = trace[i];
    os << r.step << ',' << r.epoch << ',' << fmt_num(r.loss) << ',' << fmt_num(r.obj) << ',' << fmt_num(r.box) << ','
       << fmt_num(r.mask) << ',' << fmt_num(smooth[i]) << '\n';
  }
  return os.str();
}

/// Traces of several runs stacked, with the run label in front.
inline std::string runs_trace_csv(const std::vector<std::pair<std::string, const std::vector<StepRecord>*>>& runs) {
  std::ostringstream os;
  os << "run,step,epoch,loss,obj,box,mask,loss_ema20\n";
  for (const auto& [label, trace] : runs) {
    const std::string body = trace_csv(*trace);
    std::istringstream is(body);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) os << label << ',' << line << '\n';
  }
  return os.str();
}

inline std::string epochs_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "epoch," << csv_header() << '\n';
  for (std::size_t e = 0; e < reports.size(); ++e) os << e << ',' << csv_row(reports[e]) << '\n';
  return os.str();
}

inline std::string steps_cell(double median) { return std::isfinite(median) ? fmt_num(median) : "inf"; }

inline std::string race_summary_csv(const std::vector<ConvergenceTrace>& traces) {
  std::ostringstream os;
  os << "loss,median_steps_to,reached,pairs,final_loss,final_mean_iou\n";
  for (const auto& t : traces) {
    os << loss_name(t.kind) << ',' << steps_cell(t.median_steps_to()) << ',' << t.reached() << ','
       << t.steps_to.size() << ',' << (t.loss.empty() ? "" : fmt_num(t.loss.back())) << ','
       << (t.mean_iou.empty() ? "" : fmt_num(t.mean_iou.back())) << '\n';
  }
  return os.str();
}

/// Per-step loss and mean IoU, one column pair per lane.
inline std::string race_trace_csv(const std::vector<ConvergenceTrace>& traces) {
  std::ostringstream os;
  os << "step";
  for (const auto& t : traces) os << ',' << loss_name(t.kind) << "_loss," << loss_name(t.kind) << "_iou";
  os << '\n';
  const std::size_t steps = traces.empty() ? 0 : traces.front().loss.size();
  for (std::size_t s = 0; s < steps; ++s) {
    os << s;
    for (const auto& t : traces) os << ',' << fmt_num(t.loss[s]) << ',' << fmt_num(t.mean_iou[s]);
    os << '\n';
  }
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "row,kwconv,ta,fpiou,precision,recall,map50,map50_95\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = rows[i].flags;
    const auto& r = rows[i].report;
    os << i + 1 << ',' << int(f.kwconv) << ',' << int(f.ta) << ',' << int(f.fpiou) << ',' << fmt_num(r.precision)
       << ',' << fmt_num(r.recall) << ',' << (r.has_gt ? fmt_num(r.map50) : "") << ','
       << (r.has_gt ? fmt_num(r.map50_95) : "") << '\n';
  }
  return os.str();
}

inline std::string robust_csv(RobustKind kind, const std::vector<RobustRow>& rows) {
  std::ostringstream os;
  const bool aug = kind == RobustKind::augment;
  os << (aug ? "augment" : "fraction") << ",precision,recall,iou,dice" << (aug ? ",mdr,fdr" : "") << '\n';
  for (const auto& row : rows) {
    const auto& r = row.report;
    os << row.label << ',' << fmt_num(r.precision) << ',' << fmt_num(r.recall) << ',' << fmt_num(r.pixel_iou) << ','
       << fmt_num(r.dice);
    if (aug) os << ',' << fmt_num(r.mdr) << ',' << fmt_num(r.fdr);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG line charts.

struct Series {
  std::string name;
  std::vector<double> x, y;
};

namespace detail {

inline std::string svg_num(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << v;
  return os.str();
}

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

inline std::string tick_label(double v) {
  std::ostringstream os;
  os.precision(std::abs(v) >= 100 ? 0 : 3);
  os << std::fixed << v;
  std::string s = os.str();
  if (s.find('.') != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  return s;
}

}  // namespace detail

/// Standalone SVG with axes, five ticks per axis and a legend. Non-finite
/// points are skipped.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Series>& series) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};
  const double W = 640, H = 400, L = 70, R = 160, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  using detail::svg_num;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::svg_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << svg_num(px(xv)) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
       << detail::tick_label(xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << svg_num(py(yv) + 4) << "\" text-anchor=\"end\">"
       << detail::tick_label(yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
     << detail::svg_escape(xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << detail::svg_escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = colors[k % 8];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      os << (first ? "" : " ") << svg_num(px(s.x[i])) << ',' << svg_num(py(s.y[i]));
      first = false;
    }
    os << "\"/>\n";
    const double ly = T + 10 + 18.0 * double(k);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << detail::svg_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Precision against recall from a ranked TP/FP list.
inline Series pr_series(const std::string& name, const std::vector<bool>& tp_ranked, std::size_t total_gt) {
  Series s{name, {}, {}};
  for (const auto& p : pr_curve(tp_ranked, total_gt)) {
    s.x.push_back(p[0]);
    s.y.push_back(p[1]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Run manifest.

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string version = CRACKKW_VERSION;
  std::string started, finished;
  std::string out_dir;
  std::map<std::string, std::string> config;  ///< every key in effect
  std::vector<std::string> args;
  int exit_code = 0;

  static constexpr const char* file_name = "run_manifest.json";

  nlohmann::json to_json() const {
    return {{"command", command}, {"config_path", config_path}, {"seed", seed},     {"version", version},
            {"started", started}, {"finished", finished},       {"out_dir", out_dir}, {"config", config},
            {"args", args},       {"exit_code", exit_code}};
  }

  void write() const { write_file(std::filesystem::path(out_dir) / file_name, to_json().dump(2) + "\n"); }
};

}  // namespace crackkw

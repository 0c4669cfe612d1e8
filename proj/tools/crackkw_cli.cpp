// crackkw: batch front end for the experiments.
//
// Exit codes: 0 success, 1 verification or I/O failure, 2 usage or config
// error, 3 numerical divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crackkw/config.hpp"
#include "crackkw/gradient_suite.hpp"
#include "crackkw/report.hpp"

namespace fs = std::filesystem;
using namespace crackkw;

namespace {

enum Exit { kOk = 0, kFail = 1, kUsage = 2, kDiverged = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
};

struct Context {
  std::string command;
  Globals g;
  Config cfg;
  fs::path out;      ///< empty: no run directory
  RunManifest manifest;
  std::uint64_t seed = 0;

  /// Applies --seed to `key`, reads the experiment keys, rejects leftovers
  /// and logs defaults.
  template <class ReadFn>
  void configure(const std::string& seed_key, ReadFn&& read) {
    if (g.seed && !seed_key.empty()) cfg.set(seed_key, std::to_string(*g.seed));
    read(cfg);
    cfg.reject_unused();
    if (!g.config.empty()) {
      for (const auto& l : cfg.log()) std::cerr << l << '\n';
    } else if (!cfg.log().empty()) {
      std::cerr << "config: no --config given; " << cfg.log().size() << " keys at their defaults\n";
    }
  }

  void write(const std::string& name, const std::string& content) const {
    if (!out.empty()) write_file(out / name, content);
  }
};

std::string format_double(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

// Runs `body` with the exit-code contract and leaves one manifest in the run
// directory (when there is one).
int run(const std::string& command, const Globals& g, const std::vector<std::string>& args,
        const std::string& default_out, const std::function<int(Context&)>& body) {
  Context ctx;
  ctx.command = command;
  ctx.g = g;
  ctx.manifest.command = command;
  ctx.manifest.args = args;
  ctx.manifest.started = utc_timestamp();
  ctx.manifest.config_path = g.config;
  const std::string out = g.out.empty() ? default_out : g.out;
  ctx.out = out;
  ctx.manifest.out_dir = out;
  int code = kOk;
  try {
    ctx.cfg = g.config.empty() ? Config() : Config::load(g.config);
    code = body(ctx);
  } catch (const ConfigError& e) {
    std::cerr << command << ": config error: " << e.what() << '\n';
    code = kUsage;
  } catch (const UsageError& e) {
    std::cerr << command << ": " << e.what() << '\n';
    code = kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << command << ": " << e.what() << '\n';
    code = kDiverged;
  } catch (const std::exception& e) {
    std::cerr << command << ": error: " << e.what() << '\n';
    code = kFail;
  }
  if (!ctx.out.empty()) {
    ctx.manifest.finished = utc_timestamp();
    ctx.manifest.exit_code = code;
    ctx.manifest.seed = ctx.seed;
    ctx.manifest.config = ctx.cfg.effective();
    try {
      ctx.manifest.write();
    } catch (const std::exception& e) {
      std::cerr << command << ": cannot write run manifest: " << e.what() << '\n';
      if (code == kOk) code = kFail;
    }
  }
  return code;
}

// ---------------------------------------------------------------------------
// Commands.

int cmd_gradcheck(Context& ctx, const std::string& scope, std::size_t instances) {
  ctx.configure("", [](Config&) {});
  ctx.seed = ctx.g.seed.value_or(0);
  GradientSuiteConfig gc;
  gc.instances = instances;
  const double tol = 1e-4;
  const auto rows = gradient_suite(scope, ctx.seed, gc);
  std::ostringstream table, csv;
  csv << "scope,op,instances,skipped,max_rel_error,status\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %-24s %9s %8s %14s  %s\n", "scope", "op", "instances", "skipped",
                "max_rel_error", "status");
  table << line;
  std::vector<std::string> failed;
  for (const auto& r : rows) {
    const bool ok = r.passed(tol);
    if (!ok) failed.push_back(r.op);
    std::snprintf(line, sizeof line, "%-8s %-24s %9zu %8zu %14.3e  %s\n", r.scope.c_str(), r.op.c_str(), r.instances,
                  r.skipped, r.max_rel_error, ok ? "PASS" : "FAIL");
    table << line;
    csv << r.scope << ',' << r.op << ',' << r.instances << ',' << r.skipped << ',' << format_double(r.max_rel_error, "%.6e")
        << ',' << (ok ? "PASS" : "FAIL") << '\n';
  }
  std::cout << table.str();
  ctx.write("gradcheck.csv", csv.str());
  if (!failed.empty()) {
    std::cerr << "gradcheck: max relative error >= 1e-4 in";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << '\n';
    return kFail;
  }
  std::cout << "gradcheck: " << rows.size() << " ops passed (tolerance 1e-4)\n";
  return kOk;
}

int cmd_gen_data(Context& ctx, std::optional<std::size_t> count, std::optional<std::size_t> size) {
  if (count) ctx.cfg.set("data.count", std::to_string(*count));
  if (size) ctx.cfg.set("data.size", std::to_string(*size));
  DataSpec d;
  ctx.configure("data.seed", [&](Config& c) { read_config(c, d); });
  if (!d.dir.empty()) throw UsageError("data.dir is not used by gen-data; the dataset is written to --out");
  if (d.count == 0) throw UsageError("count must be positive");
  if (d.size < 16 || d.size % 8 != 0) throw UsageError("size must be a multiple of 8, at least 16");
  ctx.seed = d.seed;
  const Dataset ds = build_dataset(d.count, d.size, d.seed, d.difficulty, d.threshold);
  save_dataset(ds, ctx.out);
  const auto hash = fnv1a64(read_file(ctx.out / "manifest.json"));
  std::cout << "gen-data: generated " << ds.generated << ", kept " << ds.samples.size() << " ("
            << ds.generated - ds.samples.size() << " duplicates dropped), split " << ds.indices("train").size() << '/'
            << ds.indices("val").size() << '/' << ds.indices("test").size() << ", manifest " << hex64(hash) << " -> "
            << ctx.out.string() << '\n';
  return kOk;
}

int cmd_dedup(Context& ctx, const std::string& in, int threshold) {
  ctx.configure("", [](Config&) {});
  std::vector<std::string> names;
  std::vector<std::uint64_t> hashes;
  if (fs::exists(fs::path(in) / "manifest.json")) {
    const Dataset ds = load_dataset(in);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      names.push_back(sample_stem(i));
      hashes.push_back(phash64(ds.samples[i].image));
    }
  } else {
    if (!fs::is_directory(in)) throw UsageError("'" + in + "' is neither a dataset nor a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      names.push_back(f.filename().string());
      hashes.push_back(phash64(read_pgm(f)));
    }
  }
  const auto kept = dedup(hashes, threshold);
  std::vector<bool> is_kept(hashes.size(), false);
  for (auto k : kept) is_kept[k] = true;
  std::ostringstream csv;
  csv << "item,phash,kept,duplicate_of\n";
  for (std::size_t i = 0; i < hashes.size(); ++i) {
    std::string dup;
    if (!is_kept[i]) {
      for (auto k : kept)
        if (k < i && hamming(hashes[i], hashes[k]) <= threshold) {
          dup = names[k];
          break;
        }
    }
    csv << names[i] << ',' << hex64(hashes[i]) << ',' << int(is_kept[i]) << ',' << dup << '\n';
  }
  ctx.write("dedup.csv", csv.str());
  std::cout << "dedup: " << hashes.size() << " items, kept " << kept.size() << ", dropped "
            << hashes.size() - kept.size() << " (threshold " << threshold << ")\n";
  return kOk;
}

int cmd_race(Context& ctx) {
  RaceConfig rc;
  ctx.configure("race.seed", [&](Config& c) { read_config(c, rc); });
  ctx.seed = rc.seed;
  const auto traces = box_regression_race(rc);
  ctx.write("race.csv", race_summary_csv(traces));
  ctx.write("trace.csv", race_trace_csv(traces));
  nlohmann::json j;
  std::vector<Series> iou_series, loss_series;
  std::optional<double> fp, ci;
  for (const auto& t : traces) {
    const double med = t.median_steps_to();
    j["lanes"].push_back({{"loss", loss_name(t.kind)},
                          {"median_steps_to", std::isfinite(med) ? nlohmann::json(med) : nlohmann::json("inf")},
                          {"reached", t.reached()},
                          {"pairs", t.steps_to.size()},
                          {"final_mean_iou", t.mean_iou.empty() ? 0.0 : t.mean_iou.back()}});
    if (t.kind == LossKind::fpiou) fp = med;
    if (t.kind == LossKind::ciou) ci = med;
    Series si{std::string(loss_name(t.kind)), {}, t.mean_iou}, sl{std::string(loss_name(t.kind)), {}, t.loss};
    for (std::size_t s = 0; s < t.mean_iou.size(); ++s) si.x.push_back(double(s)), sl.x.push_back(double(s));
    iou_series.push_back(std::move(si));
    loss_series.push_back(std::move(sl));
  }
  j["target_iou"] = rc.target_iou;
  j["steps"] = rc.steps;
  std::string summary = "race: " + std::to_string(traces.size()) + " losses, " + std::to_string(rc.n_pairs) + " pairs";
  if (fp && ci) {
    j["ciou_over_fpiou"] = *fp > 0 && std::isfinite(*fp) && std::isfinite(*ci) ? nlohmann::json(*ci / *fp) : nlohmann::json(nullptr);
    summary += ", median steps to IoU " + format_double(rc.target_iou, "%.2f") + ": fpiou " + (std::isfinite(*fp) ? format_double(*fp, "%.1f") : "inf") +
               ", ciou " + (std::isfinite(*ci) ? format_double(*ci, "%.1f") : "inf");
    if (*fp > 0 && std::isfinite(*fp) && std::isfinite(*ci)) summary += " (speedup " + format_double(*ci / *fp, "%.2f") + "x)";
  }
  ctx.write("report.json", j.dump(2) + "\n");
  ctx.write("iou.svg", svg_line_chart("Mean IoU during regression", "step", "mean IoU", iou_series));
  ctx.write("loss.svg", svg_line_chart("Mean loss during regression", "step", "loss", loss_series));
  std::cout << summary << '\n';
  return kOk;
}

struct ToySetup {
  DataSpec data;
  ToyConfig toy;
};

ToySetup configure_toy(Context& ctx, const std::function<void(Config&)>& extra = {}) {
  ToySetup s;
  ctx.configure("sgd.seed", [&](Config& c) {
    read_config(c, s.data);
    read_config(c, s.toy);
    if (extra) extra(c);
  });
  s.toy.model.image_size = s.data.size;
  ctx.seed = s.toy.sgd.seed;
  return s;
}

Dataset load_data(const DataSpec& d) {
  const auto t0 = std::chrono::steady_clock::now();
  Dataset ds = obtain_dataset(d);
  std::cerr << "data: " << ds.samples.size() << " images (train " << ds.indices("train").size() << ", val "
            << ds.indices("val").size() << ", test " << ds.indices("test").size() << ") in "
            << format_double(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), "%.1f")
            << " s\n";
  return ds;
}

int cmd_train(Context& ctx) {
  auto s = configure_toy(ctx);
  const Dataset ds = load_data(s.data);
  auto res = train_toy(ds, s.toy, [&](int epoch, const EvalReport& r) {
    std::cerr << "epoch " << epoch + 1 << '/' << s.toy.sgd.epochs << ": mAP50 " << format_double(r.map50, "%.4f")
              << ", mAP50:95 " << format_double(r.map50_95, "%.4f") << ", P " << format_double(r.precision, "%.4f")
              << ", R " << format_double(r.recall, "%.4f") << '\n';
  });
  ctx.write("trace.csv", trace_csv(res.trace));
  ctx.write("epochs.csv", epochs_csv(res.epochs));
  nlohmann::json j;
  j["final"] = res.epochs.empty() ? nlohmann::json(nullptr) : to_json(res.epochs.back());
  j["epochs"] = nlohmann::json::array();
  for (const auto& r : res.epochs) j["epochs"].push_back(to_json(r));
  j["parameters"] = res.model->parameter_count();
  j["steps"] = res.trace.size();
  ctx.write("report.json", j.dump(2) + "\n");

  Series loss{"loss", {}, {}}, smooth{"EMA(20)", {}, {}};
  std::vector<double> raw;
  for (const auto& r : res.trace) raw.push_back(r.loss);
  const auto e = ema(raw);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    loss.x.push_back(double(i)), loss.y.push_back(raw[i]);
    smooth.x.push_back(double(i)), smooth.y.push_back(e[i]);
  }
  ctx.write("loss.svg", svg_line_chart("Training loss", "step", "loss", {loss, smooth}));
  Series m50{"mAP50", {}, {}}, m5095{"mAP50:95", {}, {}};
  for (std::size_t i = 0; i < res.epochs.size(); ++i) {
    m50.x.push_back(double(i + 1)), m50.y.push_back(res.epochs[i].map50);
    m5095.x.push_back(double(i + 1)), m5095.y.push_back(res.epochs[i].map50_95);
  }
  ctx.write("map.svg", svg_line_chart("Evaluation by epoch", "epoch", "mAP", {m50, m5095}));
  if (!res.epochs.empty()) {
    const auto idx = ds.indices(s.toy.eval_split);
    Predictions pred;
    evaluate_model(*res.model, ds, idx, s.toy, s.toy.sgd.epochs - 1, &pred);
    GroundTruth gts;
    for (auto i : idx) gts.push_back(ds.samples[i].boxes);
    const auto m = match_detections(pred.detections, gts, 0.5);
    ctx.write("pr.svg", svg_line_chart("Precision-recall at IoU 0.5", "recall", "precision",
                                       {pr_series("IoU 0.5", m.tp_ranked, count_gt(gts))}));
    const auto& f = res.epochs.back();
    std::cout << "train: " << res.epochs.size() << " epochs, " << res.trace.size() << " steps, mAP50 "
              << format_double(f.map50, "%.4f") << ", mAP50:95 " << format_double(f.map50_95, "%.4f") << ", P "
              << format_double(f.precision, "%.4f") << ", R " << format_double(f.recall, "%.4f") << '\n';
  } else {
    std::cout << "train: " << res.trace.size() << " steps, no evaluation\n";
  }
  return kOk;
}

int cmd_ablate(Context& ctx) {
  auto s = configure_toy(ctx);
  const Dataset ds = load_data(s.data);
  const auto rows = ablation_run(ds, s.toy, [](const AblationRow& r) {
    std::cerr << "ablate: kwconv " << r.flags.kwconv << " ta " << r.flags.ta << " fpiou " << r.flags.fpiou
              << ": mAP50 " << format_double(r.report.map50, "%.4f") << '\n';
  });
  ctx.write("ablation.csv", ablation_csv(rows));
  nlohmann::json j = nlohmann::json::array();
  std::vector<std::pair<std::string, const std::vector<StepRecord>*>> traces;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& f = rows[i].flags;
    j.push_back({{"row", i + 1}, {"kwconv", f.kwconv}, {"ta", f.ta}, {"fpiou", f.fpiou}, {"report", to_json(rows[i].report)}});
    traces.emplace_back(std::to_string(i + 1), &rows[i].trace);
  }
  ctx.write("report.json", j.dump(2) + "\n");
  ctx.write("trace.csv", runs_trace_csv(traces));
  std::cout << "ablate: " << rows.size() << " rows, baseline mAP50 " << format_double(rows.front().report.map50, "%.4f")
            << ", all-on mAP50 " << format_double(rows.back().report.map50, "%.4f") << '\n';
  return kOk;
}

int cmd_robust(Context& ctx, std::optional<std::string> kind_flag) {
  std::string kind_name = "subsample";
  if (kind_flag) ctx.cfg.set("robust.kind", *kind_flag);
  auto s = configure_toy(ctx, [&](Config& c) { c.read("robust.kind", kind_name); });
  if (kind_name != "subsample" && kind_name != "augment") {
    throw UsageError("robust.kind must be subsample or augment, got '" + kind_name + "'");
  }
  const RobustKind kind = kind_name == "augment" ? RobustKind::augment : RobustKind::subsample;
  const Dataset ds = load_data(s.data);
  const AugmentConfig aug = s.toy.augment.value_or(AugmentConfig{});
  s.toy.augment.reset();  // the augment rows choose it themselves
  const auto rows = robustness_run(kind, ds, s.toy, aug, [](const RobustRow& r) {
    std::cerr << "robust: " << r.label << ": P " << format_double(r.report.precision, "%.4f") << ", R "
              << format_double(r.report.recall, "%.4f") << '\n';
  });
  ctx.write("robust_" + kind_name + ".csv", robust_csv(kind, rows));
  nlohmann::json j = nlohmann::json::array();
  std::vector<std::pair<std::string, const std::vector<StepRecord>*>> traces;
  for (const auto& r : rows) {
    j.push_back({{"label", r.label}, {"report", to_json(r.report)}});
    traces.emplace_back(r.label, &r.trace);
  }
  ctx.write("report.json", j.dump(2) + "\n");
  ctx.write("trace.csv", runs_trace_csv(traces));
  std::cout << "robust: " << kind_name << ", " << rows.size() << " rows\n";
  return kOk;
}

int cmd_eval(Context& ctx, const std::string& pred_path, const std::string& data_dir, double iou_thr, double conf,
             const std::optional<std::string>& split) {
  ctx.configure("", [](Config&) {});
  if (!(iou_thr > 0.0 && iou_thr <= 1.0)) throw UsageError("--iou must lie in (0, 1]");
  std::ifstream is(pred_path);
  if (!is) throw UsageError("cannot open prediction file '" + pred_path + "'");
  std::vector<Detection> dets;
  try {
    dets = parse_predictions_csv(is);
  } catch (const PredictionFormatError& e) {
    throw UsageError("malformed prediction " + std::string(e.what()));
  }
  const Dataset ds = load_dataset(data_dir);
  std::vector<std::size_t> ids;
  if (split) {
    ids = ds.indices(*split);
    if (ids.empty()) throw UsageError("split '" + *split + "' is empty or unknown");
  } else {
    for (std::size_t i = 0; i < ds.samples.size(); ++i) ids.push_back(i);
  }
  std::vector<std::size_t> local(ds.samples.size(), SIZE_MAX);
  GroundTruth gts;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    local[ids[k]] = k;
    gts.push_back(ds.samples[ids[k]].boxes);
  }
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto id = dets[i].image_id;
    if (id >= ds.samples.size() || local[id] == SIZE_MAX) {
      throw UsageError("prediction " + std::to_string(i + 1) + " names image " + std::to_string(id) +
                       ", which is not in the evaluated set");
    }
    dets[i].image_id = local[id];
  }
  EvalOptions opt;
  opt.iou_threshold = iou_thr;
  opt.conf_threshold = conf;
  const std::string json = to_json(evaluate(dets, gts, opt)).dump(2) + "\n";
  std::cout << json;
  ctx.write("report.json", json);
  return kOk;
}

// Minimal reader for the CSV files this tool writes.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static std::optional<CsvTable> load(const fs::path& p) {
    if (!fs::exists(p)) return std::nullopt;
    std::istringstream is(read_file(p));
    CsvTable t;
    std::string line;
    auto split = [](const std::string& l) {
      std::vector<std::string> out;
      std::stringstream ss(l);
      std::string c;
      while (std::getline(ss, c, ',')) out.push_back(c);
      if (!l.empty() && l.back() == ',') out.emplace_back();
      return out;
    };
    if (!std::getline(is, line)) return std::nullopt;
    t.header = split(line);
    while (std::getline(is, line))
      if (!line.empty()) t.rows.push_back(split(line));
    return t;
  }

  int col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }

  static double num(const std::string& s) {
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      return std::nan("");
    }
  }
};

int cmd_report(Context& ctx, const std::string& in) {
  ctx.configure("", [](Config&) {});
  const fs::path dir(in);
  if (!fs::is_directory(dir)) throw UsageError("'" + in + "' is not a directory");
  std::vector<std::string> made;
  auto emit = [&](const std::string& name, const std::string& content) {
    ctx.write(name, content);
    made.push_back(name);
  };
  if (const auto t = CsvTable::load(dir / "trace.csv")) {
    const int step = t->col("step");
    if (t->col("run") >= 0) {
      const int run = t->col("run"), ema_col = t->col("loss_ema20");
      std::vector<Series> series;
      for (const auto& r : t->rows) {
        if (series.empty() || series.back().name != r[std::size_t(run)]) series.push_back({r[std::size_t(run)], {}, {}});
        series.back().x.push_back(CsvTable::num(r[std::size_t(step)]));
        series.back().y.push_back(CsvTable::num(r[std::size_t(ema_col)]));
      }
      emit("loss.svg", svg_line_chart("Training loss EMA(20) per run", "step", "loss", series));
    } else if (t->col("loss_ema20") >= 0) {
      Series a{"loss", {}, {}}, b{"EMA(20)", {}, {}};
      for (const auto& r : t->rows) {
        const double x = CsvTable::num(r[std::size_t(step)]);
        a.x.push_back(x), a.y.push_back(CsvTable::num(r[std::size_t(t->col("loss"))]));
        b.x.push_back(x), b.y.push_back(CsvTable::num(r[std::size_t(t->col("loss_ema20"))]));
      }
      emit("loss.svg", svg_line_chart("Training loss", "step", "loss", {a, b}));
    } else {
      std::vector<Series> iou, loss;
      for (std::size_t c = 0; c < t->header.size(); ++c) {
        const auto& h = t->header[c];
        const bool is_iou = h.size() > 4 && h.compare(h.size() - 4, 4, "_iou") == 0;
        const bool is_loss = h.size() > 5 && h.compare(h.size() - 5, 5, "_loss") == 0;
        if (!is_iou && !is_loss) continue;
        Series s{h.substr(0, h.rfind('_')), {}, {}};
        for (const auto& r : t->rows) s.x.push_back(CsvTable::num(r[std::size_t(step)])), s.y.push_back(CsvTable::num(r[c]));
        (is_iou ? iou : loss).push_back(std::move(s));
      }
      if (!iou.empty()) emit("iou.svg", svg_line_chart("Mean IoU during regression", "step", "mean IoU", iou));
      if (!loss.empty()) emit("loss.svg", svg_line_chart("Mean loss during regression", "step", "loss", loss));
    }
  }
  if (const auto t = CsvTable::load(dir / "epochs.csv")) {
    std::vector<Series> series;
    for (const char* name : {"map50", "map50_95", "precision", "recall"}) {
      const int c = t->col(name);
      if (c < 0) continue;
      Series s{name, {}, {}};
      for (const auto& r : t->rows) {
        s.x.push_back(CsvTable::num(r[0]) + 1);
        s.y.push_back(CsvTable::num(r[std::size_t(c)]));
      }
      series.push_back(std::move(s));
    }
    emit("metrics.svg", svg_line_chart("Evaluation by epoch", "epoch", "score", series));
  }
  std::ostringstream summary;
  summary << "run directory: " << dir.string() << '\n';
  if (fs::exists(dir / RunManifest::file_name)) {
    const auto m = nlohmann::json::parse(read_file(dir / RunManifest::file_name));
    summary << "command: " << m.value("command", "") << ", seed " << m.value("seed", 0) << ", version "
            << m.value("version", "") << ", exit " << m.value("exit_code", 0) << '\n';
  }
  for (const char* table : {"ablation.csv", "robust_subsample.csv", "robust_augment.csv", "race.csv"}) {
    if (fs::exists(dir / table)) summary << '\n' << table << ":\n" << read_file(dir / table);
  }
  if (fs::exists(dir / "report.json")) {
    const auto j = nlohmann::json::parse(read_file(dir / "report.json"));
    if (j.is_object() && j.contains("final") && j["final"].is_object()) {
      const auto& f = j["final"];
      summary << "\nfinal: mAP50 " << f["map50"].dump() << ", mAP50:95 " << f["map50_95"].dump() << ", precision "
              << f["precision"].dump() << ", recall " << f["recall"].dump() << '\n';
    }
  }
  emit("summary.txt", summary.str());
  std::cout << summary.str() << "report: wrote";
  for (const auto& m : made) std::cout << ' ' << m;
  std::cout << " -> " << ctx.out.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crackkw: crack detection experiments on synthetic data"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed for the command's random streams");
  app.add_option("--out", g.out, "Run directory for outputs");
  app.add_option("--config", g.config, "Run config file (key = value lines)");
  std::vector<std::string> args(argv + 1, argv + argc);
  std::function<int()> action;

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  std::string scope = "all";
  std::size_t instances = 100;
  gc->add_option("--scope", scope, "all, kwconv, ta or losses")->check(CLI::IsMember(gradient_scopes()));
  gc->add_option("--instances", instances, "Random instances per op")->check(CLI::PositiveNumber);
  gc->callback([&] {
    action = [&] { return run("gradcheck", g, args, "", [&](Context& c) { return cmd_gradcheck(c, scope, instances); }); };
  });

  auto* gd = app.add_subcommand("gen-data", "Generate, deduplicate and split a synthetic dataset");
  std::optional<std::size_t> count, size;
  gd->add_option("--count", count, "Images to generate");
  gd->add_option("--size", size, "Image side in pixels");
  gd->callback([&] {
    action = [&] { return run("gen-data", g, args, "data", [&](Context& c) { return cmd_gen_data(c, count, size); }); };
  });

  auto* dd = app.add_subcommand("dedup", "Perceptual-hash deduplication of a dataset or a PGM directory");
  std::string dedup_in;
  int threshold = 5;
  dd->add_option("--in", dedup_in, "Dataset directory or directory of .pgm files")->required();
  dd->add_option("--threshold", threshold, "Maximum Hamming distance of a duplicate")->check(CLI::Range(0, 64));
  dd->callback([&] {
    action = [&] { return run("dedup", g, args, "runs/dedup", [&](Context& c) { return cmd_dedup(c, dedup_in, threshold); }); };
  });

  auto* rc = app.add_subcommand("race", "Anchor regression race across box losses");
  rc->callback([&] { action = [&] { return run("race", g, args, "runs/race", cmd_race); }; });

  auto* tr = app.add_subcommand("train", "Train the toy detector");
  tr->callback([&] { action = [&] { return run("train", g, args, "runs/train", cmd_train); }; });

  auto* ab = app.add_subcommand("ablate", "Train all 8 kwconv/ta/fpiou combinations");
  ab->callback([&] { action = [&] { return run("ablate", g, args, "runs/ablate", cmd_ablate); }; });

  auto* rb = app.add_subcommand("robust", "Training-set size or augmentation sweep");
  std::optional<std::string> kind;
  rb->add_option("--kind", kind, "subsample or augment")->check(CLI::IsMember({"subsample", "augment"}));
  rb->callback([&] {
    action = [&] { return run("robust", g, args, "runs/robust", [&](Context& c) { return cmd_robust(c, kind); }); };
  });

  auto* ev = app.add_subcommand("eval", "Score a prediction CSV against a dataset");
  std::string pred_path, data_dir;
  double iou_thr = 0.5, conf = 0.25;
  std::optional<std::string> split;
  ev->add_option("--pred", pred_path, "CSV of image_id,x1,y1,x2,y2,score")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--iou", iou_thr, "IoU threshold for precision and recall");
  ev->add_option("--conf", conf, "Score threshold for precision and recall");
  ev->add_option("--split", split, "Evaluate one split (train, val or test)");
  ev->callback([&] {
    action = [&] {
      return run("eval", g, args, "", [&](Context& c) { return cmd_eval(c, pred_path, data_dir, iou_thr, conf, split); });
    };
  });

  auto* rp = app.add_subcommand("report", "Charts and a summary for a finished run directory");
  std::string report_in;
  rp->add_option("--in", report_in, "Run directory")->required();
  rp->callback([&] {
    action = [&] {
      const std::string def = report_in.empty() ? "report" : (fs::path(report_in) / "report").string();
      return run("report", g, args, def, [&](Context& c) { return cmd_report(c, report_in); });
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (seed_opt->count()) g.seed = seed_value;
  return action ? action() : kUsage;
}

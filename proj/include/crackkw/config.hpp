#pragma once

#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crackkw/race.hpp"
#include "crackkw/train.hpp"

// Run configuration: flat `key = value` lines with dotted section names
// (`sgd.lr0 = 0.01`), `#` comments and blank lines. Keys are read into
// existing structs, so a missing key leaves the documented default in place
// and is logged. Keys that no reader consumed are rejected with their line.

namespace crackkw {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, std::size_t line, const std::string& what)
      : std::runtime_error(source + (line ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string shortest(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

class Config {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;
    bool used = false;
  };

  Config() = default;

  static Config parse(std::istream& is, const std::string& source = "<config>") {
    Config c;
    c.source_ = source;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(is, raw)) {
      ++line;
      const auto hash = raw.find('#');
      const std::string text = detail::trim(std::string_view(raw).substr(0, hash));
      if (text.empty()) continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos) throw ConfigError(source, line, "expected key = value, got '" + text + "'");
      const std::string key = detail::trim(std::string_view(text).substr(0, eq));
      const std::string value = detail::trim(std::string_view(text).substr(eq + 1));
      if (key.empty()) throw ConfigError(source, line, "empty key");
      for (char ch : key) {
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_')) {
          throw ConfigError(source, line, "invalid character in key '" + key + "'");
        }
      }
      if (c.entries_.count(key)) {
        throw ConfigError(source, line, "duplicate key '" + key + "' (first set on line " +
                                            std::to_string(c.entries_[key].line) + ")");
      }
      c.entries_[key] = {value, line, false};
    }
    return c;
  }

  static Config parse_string(const std::string& text, const std::string& source = "<config>") {
    std::istringstream is(text);
    return parse(is, source);
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path.string(), 0, "cannot open config file");
    return parse(is, path.string());
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  const std::string& source() const { return source_; }

  /// Sets or replaces a value from outside the file (command-line overrides).
  void set(const std::string& key, const std::string& value) { entries_[key] = {value, 0, false}; }

  template <class T>
  void read(const std::string& key, T& field) {
    auto it = entries_.find(key);
    if (it == entries_.end()) {
      const std::string shown = format(field);
      log_.push_back("config: " + key + " not set, using default " + shown);
      effective_[key] = shown;
      return;
    }
    it->second.used = true;
    try {
      field = convert<T>(it->second.value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source_, it->second.line, key + ": " + e.what());
    }
    effective_[key] = format(field);
  }

  /// Throws for the first key (in line order) that no reader consumed.
  void reject_unused() const {
    const Entry* first = nullptr;
    std::string name;
    for (const auto& [k, e] : entries_) {
      if (!e.used && (!first || e.line < first->line)) first = &e, name = k;
    }
    if (first) throw ConfigError(source_, first->line, "unknown key '" + name + "'");
  }

  /// One line per key that fell back to its default.
  const std::vector<std::string>& log() const { return log_; }
  /// Every key read, with the value in effect.
  const std::map<std::string, std::string>& effective() const { return effective_; }

 private:
  template <class T>
  static T convert(const std::string& s) {
    if constexpr (std::is_same_v<T, bool>) {
      if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
      if (s == "false" || s == "0" || s == "no" || s == "off") return false;
      throw std::invalid_argument("expected a boolean, got '" + s + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<T, LossKind>) {
      return parse_loss_kind(s);
    } else if constexpr (std::is_same_v<T, std::vector<LossKind>>) {
      std::vector<LossKind> out;
      std::stringstream ss(s);
      std::string item;
      while (std::getline(ss, item, ',')) out.push_back(parse_loss_kind(detail::trim(item)));
      if (out.empty()) throw std::invalid_argument("expected a comma-separated list of losses");
      return out;
    } else {
      static_assert(std::is_arithmetic_v<T>);
      T v{};
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw std::invalid_argument("expected a number, got '" + s + "'");
      }
      return v;
    }
  }

  template <class T>
  static std::string format(const T& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, LossKind>) {
      return std::string(loss_name(v));
    } else if constexpr (std::is_same_v<T, std::vector<LossKind>>) {
      std::string out;
      for (auto k : v) out += (out.empty() ? "" : ",") + std::string(loss_name(k));
      return out;
    } else if constexpr (std::is_floating_point_v<T>) {
      return detail::shortest(double(v));
    } else {
      return std::to_string(v);
    }
  }

  std::string source_ = "<config>";
  std::map<std::string, Entry> entries_;
  std::vector<std::string> log_;
  std::map<std::string, std::string> effective_;
};

// ---------------------------------------------------------------------------
// Readers for each experiment.

struct DataSpec {
  std::string dir;  ///< load this dataset directory instead of generating
  std::size_t count = 1000;
  std::size_t size = 64;
  std::uint64_t seed = 42;
  int threshold = 5;
  Difficulty difficulty;
};

inline void read_config(Config& c, SgdConfig& s) {
  c.read("sgd.lr0", s.lr0);
  c.read("sgd.momentum", s.momentum);
  c.read("sgd.batch", s.batch);
  c.read("sgd.epochs", s.epochs);
  c.read("sgd.seed", s.seed);
}

inline void read_config(Config& c, LossConfig& l) {
  c.read("loss.kind", l.kind);
  c.read("loss.d", l.d);
  c.read("loss.u", l.u);
  c.read("loss.lambda", l.lambda);
  c.read("loss.strict_eq24", l.strict_eq24);
}

inline void read_config(Config& c, DataSpec& d) {
  c.read("data.dir", d.dir);
  c.read("data.count", d.count);
  c.read("data.size", d.size);
  c.read("data.seed", d.seed);
  c.read("data.threshold", d.threshold);
  auto& f = d.difficulty;
  c.read("data.min_cracks", f.min_cracks);
  c.read("data.max_cracks", f.max_cracks);
  c.read("data.background_p", f.background_p);
  c.read("data.min_length", f.min_length);
  c.read("data.max_length", f.max_length);
  c.read("data.turn_sd", f.turn_sd);
  c.read("data.contrast", f.contrast);
  c.read("data.texture_amp", f.texture_amp);
  c.read("data.grain_sd", f.grain_sd);
  c.read("data.min_component", f.min_component);
}

inline void read_config(Config& c, AugmentConfig& a) {
  c.read("augment.rotation_deg", a.rotation_deg);
  c.read("augment.hflip_p", a.hflip_p);
  c.read("augment.vflip_p", a.vflip_p);
  c.read("augment.scale_lo", a.scale_lo);
  c.read("augment.scale_hi", a.scale_hi);
  c.read("augment.noise_sigma", a.noise_sigma);
}

inline void read_config(Config& c, ToyConfig& t) {
  read_config(c, t.sgd);
  read_config(c, t.box_loss);
  auto& m = t.model;
  c.read("model.kwconv", m.kwconv);
  c.read("model.ta", m.ta);
  c.read("model.stem_ch", m.stem_ch);
  c.read("model.stage_b_ch", m.stage_b_ch);
  c.read("model.stage_c_ch", m.stage_c_ch);
  c.read("model.neck_ch", m.neck_ch);
  c.read("model.ta_reduction", m.ta_reduction);
  c.read("model.kw_budget", m.kw_budget);
  c.read("model.tau_epochs", m.tau_epochs);
  c.read("model.box_base", m.box_base);
  c.read("train.obj_pos_weight", t.obj_pos_weight);
  c.read("train.mask_pos_weight", t.mask_pos_weight);
  c.read("train.obj_gain", t.obj_gain);
  c.read("train.box_gain", t.box_gain);
  c.read("train.mask_gain", t.mask_gain);
  c.read("train.scale_by_batch", t.scale_by_batch);
  c.read("train.eval_split", t.eval_split);
  c.read("train.max_eval_images", t.max_eval_images);
  c.read("train.bn_calib_batches", t.bn_calib_batches);
  bool augment = t.augment.has_value();
  c.read("train.augment", augment);
  AugmentConfig a = t.augment.value_or(AugmentConfig{});
  read_config(c, a);
  t.augment = augment ? std::optional<AugmentConfig>(a) : std::nullopt;
  c.read("eval.conf_threshold", t.eval.conf_threshold);
  c.read("eval.iou_threshold", t.eval.iou_threshold);
  c.read("infer.min_score", t.inference.min_score);
  c.read("infer.nms_iou", t.inference.nms_iou);
  c.read("infer.max_dets", t.inference.max_dets);
}

inline void read_config(Config& c, RaceConfig& r) {
  c.read("race.kinds", r.kinds);
  c.read("race.n_pairs", r.n_pairs);
  c.read("race.steps", r.steps);
  c.read("race.seed", r.seed);
  c.read("race.space", r.space);
  c.read("race.coord_scale", r.coord_scale);
  c.read("race.target_iou", r.target_iou);
  c.read("race.min_extent", r.min_extent);
  c.read("sgd.lr0", r.sgd.lr0);
  c.read("sgd.momentum", r.sgd.momentum);
  c.read("loss.d", r.loss.d);
  c.read("loss.u", r.loss.u);
  c.read("loss.lambda", r.loss.lambda);
  c.read("loss.strict_eq24", r.loss.strict_eq24);
}

inline Dataset obtain_dataset(const DataSpec& d) {
  if (!d.dir.empty()) return load_dataset(d.dir);
  return build_dataset(d.count, d.size, d.seed, d.difficulty, d.threshold);
}

}  // namespace crackkw

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ajsscc/codec.hpp"
#include "ajsscc/pipeline.hpp"
#include "ajsscc/rng.hpp"

namespace ajsscc {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Piecewise-constant learning rate: "0:1e-4,200:1e-5,260:1e-6" means the rate
// switches at those epoch indices.
struct LrSchedule {
  std::vector<std::pair<std::int64_t, double>> points;

  static LrSchedule parse(const std::string& s) {
    LrSchedule sched;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw std::invalid_argument("lr_schedule: expected epoch:rate, got '" + item + "'");
      sched.points.emplace_back(std::stoll(item.substr(0, colon)),
                                std::stod(item.substr(colon + 1)));
    }
    if (sched.points.empty() || sched.points.front().first != 0)
      throw std::invalid_argument("lr_schedule: must start at epoch 0");
    for (std::size_t i = 1; i < sched.points.size(); ++i)
      if (sched.points[i].first <= sched.points[i - 1].first)
        throw std::invalid_argument("lr_schedule: epochs must increase");
    return sched;
  }

  double rate_at(std::int64_t epoch) const {
    double r = points.front().second;
    for (const auto& [e, rate] : points)
      if (epoch >= e) r = rate;
    return r;
  }

  std::string str() const {
    std::string out;
    for (const auto& [e, rate] : points) {
      if (!out.empty()) out += ",";
      out += std::to_string(e) + ":" + fmt_double(rate);
    }
    return out;
  }
};

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

inline std::string double_list_str(const std::vector<double>& v) {
  std::string out;
  for (double d : v) {
    if (!out.empty()) out += ",";
    out += fmt_double(d);
  }
  return out;
}

// Everything a run needs; serialized alongside every artifact so a run is
// reproducible from its snapshot plus a seed.
struct ExperimentConfig {
  std::string preset = "desk";
  std::string variant = "Adaptive-JSSCC";
  std::uint64_t seed = 1;
  std::string out_dir = "runs/exp";

  // data
  std::string dataset;
  std::string val_dataset;
  double val_fraction = 0.125;
  bool grayscale = true;
  std::int64_t crop = 64;
  bool augment = true;
  bool prefetch = true;

  // model
  std::int64_t block_size = 32;
  std::int64_t scan_width = 8;
  std::int64_t enc_width1 = 16;
  std::int64_t enc_width2 = 32;
  std::int64_t c_out = 2;
  std::string cbr;  // optional "num/den"; when set, c_out is solved from it
  std::int64_t np = 11;
  std::int64_t e_width = 8;
  std::int64_t m_channels = 1;
  std::int64_t p_width = 8;
  bool per_image_power = false;
  double dither_eps = 0.0;

  // training
  std::int64_t batch_size = 8;
  std::int64_t epochs = 30;
  std::int64_t max_steps = 0;  // 0 = no cap
  std::string lr_schedule = "0:1e-3";
  std::string snr_mode = "range";  // range | fixed
  double snr_lo = 0.0;
  double snr_hi = 20.0;
  double snr_fixed = 19.0;
  std::string ratio_mode = "random";  // random | fixed
  double ratio_fixed = 0.5;
  double saliency_loss_weight = 0.0;
  std::int64_t checkpoint_every = 1;
  bool deterministic = true;

  // evaluation
  std::string snr_grid = "0,5,10,15,20";
  std::string ratio_grid = "0.01,0.04,0.1,0.3,0.4,0.5";
  std::int64_t eval_threads = 2;

  std::int64_t channels() const { return grayscale ? 1 : 3; }

  void validate() const {
    parse_variant(variant);
    if (snr_mode != "range" && snr_mode != "fixed")
      throw std::invalid_argument("config: snr_mode must be range or fixed");
    if (ratio_mode != "random" && ratio_mode != "fixed")
      throw std::invalid_argument("config: ratio_mode must be random or fixed");
    if (crop % block_size != 0)
      throw std::invalid_argument("config: crop must be divisible by block_size");
    if (crop % (1 << kCodecStages) != 0)
      throw std::invalid_argument("config: crop must be divisible by the codec downsampling");
    if (batch_size < 1 || epochs < 0 || np < 0)
      throw std::invalid_argument("config: nonpositive size field");
    LrSchedule::parse(lr_schedule);
    parse_double_list(snr_grid);
    parse_double_list(ratio_grid);
    (void)resolved_c_out();
  }

  std::int64_t resolved_c_out() const {
    if (cbr.empty()) return c_out;
    const auto slash = cbr.find('/');
    if (slash == std::string::npos)
      throw std::invalid_argument("config: cbr must be a fraction like 1/12");
    const std::int64_t num = std::stoll(cbr.substr(0, slash));
    const std::int64_t den = std::stoll(cbr.substr(slash + 1));
    return solve_c_out(channels(), crop, crop, num, den);
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.variant = parse_variant(variant);
    m.block_size = block_size;
    m.channels = channels();
    m.scan_width = scan_width;
    m.enc_width1 = enc_width1;
    m.enc_width2 = enc_width2;
    m.c_out = resolved_c_out();
    m.per_image_power = per_image_power;
    m.np = np;
    m.e_width = e_width;
    m.m_channels = m_channels;
    m.p_width = p_width;
    m.dither_eps = dither_eps;
    m.init_seed = seed;
    return m;
  }
};

namespace detail {

struct ConfigField {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: expected boolean, got '" + v + "'");
}

inline const std::vector<ConfigField>& config_fields() {
  auto str_field = [](std::string key, std::string ExperimentConfig::* ptr) {
    return ConfigField{std::move(key),
                       [ptr](const ExperimentConfig& c) { return c.*ptr; },
                       [ptr](ExperimentConfig& c, const std::string& v) { c.*ptr = v; }};
  };
  auto int_field = [](std::string key, std::int64_t ExperimentConfig::* ptr) {
    return ConfigField{std::move(key),
                       [ptr](const ExperimentConfig& c) { return std::to_string(c.*ptr); },
                       [ptr](ExperimentConfig& c, const std::string& v) { c.*ptr = std::stoll(v); }};
  };
  auto u64_field = [](std::string key, std::uint64_t ExperimentConfig::* ptr) {
    return ConfigField{std::move(key),
                       [ptr](const ExperimentConfig& c) { return std::to_string(c.*ptr); },
                       [ptr](ExperimentConfig& c, const std::string& v) { c.*ptr = std::stoull(v); }};
  };
  auto dbl_field = [](std::string key, double ExperimentConfig::* ptr) {
    return ConfigField{std::move(key),
                       [ptr](const ExperimentConfig& c) { return fmt_double(c.*ptr); },
                       [ptr](ExperimentConfig& c, const std::string& v) { c.*ptr = std::stod(v); }};
  };
  auto bool_field = [](std::string key, bool ExperimentConfig::* ptr) {
    return ConfigField{std::move(key),
                       [ptr](const ExperimentConfig& c) { return c.*ptr ? "true" : "false"; },
                       [ptr](ExperimentConfig& c, const std::string& v) { c.*ptr = parse_bool(v); }};
  };
  static const std::vector<ConfigField> fields = {
      str_field("preset", &ExperimentConfig::preset),
      str_field("variant", &ExperimentConfig::variant),
      u64_field("seed", &ExperimentConfig::seed),
      str_field("out_dir", &ExperimentConfig::out_dir),
      str_field("dataset", &ExperimentConfig::dataset),
      str_field("val_dataset", &ExperimentConfig::val_dataset),
      dbl_field("val_fraction", &ExperimentConfig::val_fraction),
      bool_field("grayscale", &ExperimentConfig::grayscale),
      int_field("crop", &ExperimentConfig::crop),
      bool_field("augment", &ExperimentConfig::augment),
      bool_field("prefetch", &ExperimentConfig::prefetch),
      int_field("block_size", &ExperimentConfig::block_size),
      int_field("scan_width", &ExperimentConfig::scan_width),
      int_field("enc_width1", &ExperimentConfig::enc_width1),
      int_field("enc_width2", &ExperimentConfig::enc_width2),
      int_field("c_out", &ExperimentConfig::c_out),
      str_field("cbr", &ExperimentConfig::cbr),
      int_field("np", &ExperimentConfig::np),
      int_field("e_width", &ExperimentConfig::e_width),
      int_field("m_channels", &ExperimentConfig::m_channels),
      int_field("p_width", &ExperimentConfig::p_width),
      bool_field("per_image_power", &ExperimentConfig::per_image_power),
      dbl_field("dither_eps", &ExperimentConfig::dither_eps),
      int_field("batch_size", &ExperimentConfig::batch_size),
      int_field("epochs", &ExperimentConfig::epochs),
      int_field("max_steps", &ExperimentConfig::max_steps),
      str_field("lr_schedule", &ExperimentConfig::lr_schedule),
      str_field("snr_mode", &ExperimentConfig::snr_mode),
      dbl_field("snr_lo", &ExperimentConfig::snr_lo),
      dbl_field("snr_hi", &ExperimentConfig::snr_hi),
      dbl_field("snr_fixed", &ExperimentConfig::snr_fixed),
      str_field("ratio_mode", &ExperimentConfig::ratio_mode),
      dbl_field("ratio_fixed", &ExperimentConfig::ratio_fixed),
      dbl_field("saliency_loss_weight", &ExperimentConfig::saliency_loss_weight),
      int_field("checkpoint_every", &ExperimentConfig::checkpoint_every),
      bool_field("deterministic", &ExperimentConfig::deterministic),
      str_field("snr_grid", &ExperimentConfig::snr_grid),
      str_field("ratio_grid", &ExperimentConfig::ratio_grid),
      int_field("eval_threads", &ExperimentConfig::eval_threads),
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void apply_config_line(ExperimentConfig& cfg, const std::string& rawline) {
  std::string line = rawline;
  const auto hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = detail::trim(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("config: expected key = value, got '" + line + "'");
  const std::string key = detail::trim(line.substr(0, eq));
  const std::string value = detail::trim(line.substr(eq + 1));
  for (const auto& f : detail::config_fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot read " + path);
  std::string line;
  while (std::getline(in, line)) apply_config_line(base, line);
  base.validate();
  return base;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

inline void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write " + path);
  out << serialize_config(cfg);
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash_str(serialize_config(cfg))));
  return buf;
}

// Architecture-only fingerprint guarding checkpoint compatibility.
inline std::string model_fingerprint(const ModelConfig& m) {
  std::string s;
  s += variant_name(m.variant);
  s += "|B" + std::to_string(m.block_size);
  s += "|C" + std::to_string(m.channels);
  s += "|sw" + std::to_string(m.scan_width);
  s += "|e" + std::to_string(m.enc_width1) + "." + std::to_string(m.enc_width2);
  s += "|co" + std::to_string(m.c_out);
  s += "|np" + std::to_string(m.np);
  s += "|ew" + std::to_string(m.e_width);
  s += "|mc" + std::to_string(m.m_channels);
  s += "|pw" + std::to_string(m.p_width);
  s += m.per_image_power ? "|ppi" : "|ppb";
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_str(s)));
  return buf;
}

// The training-settings preset mirroring the reference schedule.
inline ExperimentConfig preset_paper() {
  ExperimentConfig c;
  c.preset = "paper";
  c.crop = 128;
  c.block_size = 32;
  c.batch_size = 16;
  c.epochs = 300;
  c.lr_schedule = "0:1e-4,200:1e-5,260:1e-6";
  c.snr_mode = "range";
  c.snr_lo = 0.0;
  c.snr_hi = 20.0;
  c.ratio_mode = "random";
  c.np = 11;
  c.scan_width = 16;
  c.enc_width1 = 32;
  c.enc_width2 = 64;
  c.e_width = 16;
  c.p_width = 16;
  c.c_out = 2;
  c.augment = true;
  return c;
}

// Laptop-scale preset: smaller crops and halved widths.
inline ExperimentConfig preset_desk() {
  ExperimentConfig c;
  c.preset = "desk";
  c.crop = 64;
  c.block_size = 32;
  c.batch_size = 8;
  c.epochs = 30;
  c.lr_schedule = "0:1e-3";
  c.np = 11;
  c.scan_width = 8;
  c.enc_width1 = 16;
  c.enc_width2 = 32;
  c.e_width = 8;
  c.p_width = 8;
  c.c_out = 2;
  return c;
}

inline ExperimentConfig make_preset(const std::string& name) {
  if (name == "paper") return preset_paper();
  if (name == "desk") return preset_desk();
  throw std::invalid_argument("unknown preset: " + name + " (expected paper or desk)");
}

}  // namespace ajsscc

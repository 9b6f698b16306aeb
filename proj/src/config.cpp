#include "dsbn/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dsbn/errors.hpp"

namespace dsbn {

// ---- text format ---------------------------------------------------------------

namespace {

bool is_name_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

class LineParser {
 public:
  LineParser(std::string_view text, int line) : text_(text), line_(line) {}

  ConfigValue value() {
    skip_ws();
    if (at_end()) fail("missing value");
    ConfigValue v;
    v.line = line_;
    const char c = text_[pos_];
    if (c == '"') {
      v.value = string();
    } else if (c == '[') {
      v.value = array();
    } else if (text_.substr(pos_, 4) == "true" && !name_continues(4)) {
      pos_ += 4;
      v.value = true;
    } else if (text_.substr(pos_, 5) == "false" && !name_continues(5)) {
      pos_ += 5;
      v.value = false;
    } else {
      v.value = number();
    }
    return v;
  }

  void expect_end() {
    skip_ws();
    if (!at_end()) fail("unexpected trailing text '" + std::string(text_.substr(pos_)) + "'");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("line " + std::to_string(line_) + ": " + what);
  }

 private:
  bool at_end() const { return pos_ >= text_.size(); }
  void skip_ws() {
    while (!at_end() && (text_[pos_] == ' ' || text_[pos_] == '\t')) ++pos_;
  }
  bool name_continues(std::size_t len) const {
    return pos_ + len < text_.size() && is_name_char(text_[pos_ + len]);
  }

  std::string string() {
    ++pos_;
    std::string out;
    while (!at_end() && text_[pos_] != '"') {
      char c = text_[pos_++];
      if (c == '\\') {
        if (at_end()) break;
        c = text_[pos_++];
        if (c == 'n') c = '\n';
        else if (c == 't') c = '\t';
        else if (c != '"' && c != '\\') fail(std::string("unknown escape \\") + c);
      }
      out.push_back(c);
    }
    if (at_end()) fail("unterminated string");
    ++pos_;
    return out;
  }

  ConfigValue::Array array() {
    ++pos_;
    ConfigValue::Array out;
    skip_ws();
    while (!at_end() && text_[pos_] != ']') {
      out.push_back(value());
      skip_ws();
      if (!at_end() && text_[pos_] == ',') {
        ++pos_;
        skip_ws();
      } else if (at_end() || text_[pos_] != ']') {
        fail("expected ',' or ']' in array");
      }
    }
    if (at_end()) fail("unterminated array");
    ++pos_;
    return out;
  }

  double number() {
    std::size_t end = pos_;
    while (end < text_.size()) {
      const char c = text_[end];
      if (!((c >= '0' && c <= '9') || c == '.' || c == 'e' || c == 'E' || c == '+' || c == '-'))
        break;
      ++end;
    }
    const char* first = text_.data() + pos_;
    const char* last = text_.data() + end;
    if (first != last && *first == '+') ++first;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (first == last || ec != std::errc() || ptr != last)
      fail("cannot parse value '" + std::string(text_.substr(pos_, end - pos_ + 1)) + "'");
    if (!std::isfinite(v)) fail("value is not finite");
    pos_ = end;
    return v;
  }

  std::string_view text_;
  int line_;
  std::size_t pos_ = 0;
};

std::string_view strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_string) {
      ++i;
    } else if (line[i] == '"') {
      in_string = !in_string;
    } else if (line[i] == '#' && !in_string) {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool valid_name(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!is_name_char(c)) return false;
  return true;
}

}  // namespace

ConfigTable parse_config_text(std::string_view text) {
  ConfigTable table;
  std::string section;
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": bad section header");
      const auto name = trim(line.substr(1, line.size() - 2));
      if (!valid_name(name))
        throw ConfigError("line " + std::to_string(line_no) + ": bad section name '" +
                          std::string(name) + "'");
      section = std::string(name);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (!valid_name(key))
      throw ConfigError("line " + std::to_string(line_no) + ": bad key '" + std::string(key) + "'");
    LineParser parser(line.substr(eq + 1), line_no);
    ConfigValue v = parser.value();
    parser.expect_end();
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (!table.emplace(full, std::move(v)).second)
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key " + full);
  }
  return table;
}

// ---- typed access ----------------------------------------------------------------

namespace {

class Fields {
 public:
  explicit Fields(const ConfigTable& table) : table_(table) {}

  template <typename Fn>
  void read(const std::string& key, Fn&& assign) {
    const auto it = table_.find(key);
    if (it == table_.end()) return;
    used_.insert(key);
    try {
      assign(it->second);
    } catch (const ConfigError& e) {
      throw ConfigError(key + " (line " + std::to_string(it->second.line) + "): " + e.what());
    }
  }

  void reject_unknown() const {
    for (const auto& [key, v] : table_)
      if (!used_.contains(key))
        throw ConfigError(key + " (line " + std::to_string(v.line) + "): unknown key");
  }

 private:
  const ConfigTable& table_;
  std::set<std::string> used_;
};

double as_double(const ConfigValue& v) {
  if (const auto* d = std::get_if<double>(&v.value)) return *d;
  throw ConfigError("expected a number");
}

std::int64_t as_int(const ConfigValue& v) {
  const double d = as_double(v);
  if (d != std::floor(d) || std::abs(d) > 9007199254740992.0)
    throw ConfigError("expected an integer");
  return static_cast<std::int64_t>(d);
}

std::size_t as_count(const ConfigValue& v) {
  const auto i = as_int(v);
  if (i < 0) throw ConfigError("expected a nonnegative integer");
  return static_cast<std::size_t>(i);
}

bool as_bool(const ConfigValue& v) {
  if (const auto* b = std::get_if<bool>(&v.value)) return *b;
  throw ConfigError("expected true or false");
}

const std::string& as_string(const ConfigValue& v) {
  if (const auto* s = std::get_if<std::string>(&v.value)) return *s;
  throw ConfigError("expected a string");
}

const ConfigValue::Array& as_array(const ConfigValue& v) {
  if (const auto* a = std::get_if<ConfigValue::Array>(&v.value)) return *a;
  throw ConfigError("expected an array");
}

std::vector<double> as_doubles(const ConfigValue& v) {
  std::vector<double> out;
  for (const auto& e : as_array(v)) out.push_back(as_double(e));
  return out;
}

std::optional<double> as_lambda(const ConfigValue& v) {
  if (const auto* s = std::get_if<std::string>(&v.value)) {
    if (*s == "schedule") return std::nullopt;
    throw ConfigError("expected a number or \"schedule\"");
  }
  return as_double(v);
}

NormMode as_norm(const ConfigValue& v) {
  const auto& s = as_string(v);
  if (s == "bn") return NormMode::kBn;
  if (s == "dsbn") return NormMode::kDsbn;
  throw ConfigError("expected \"bn\" or \"dsbn\", got \"" + s + "\"");
}

}  // namespace

std::string_view to_string(MultiSourceMode m) {
  switch (m) {
    case MultiSourceMode::kSingle: return "single";
    case MultiSourceMode::kMerged: return "merged";
    case MultiSourceMode::kSeparate: return "separate";
  }
  return "?";
}

ExperimentConfig experiment_config_from_table(const ConfigTable& table) {
  ExperimentConfig c;
  Fields f(table);

  f.read("experiment.baseline", [&](const ConfigValue& v) {
    const auto& s = as_string(v);
    if (s == "mstn") c.baseline = Baseline::kMstn;
    else if (s == "cpua") c.baseline = Baseline::kCpua;
    else throw ConfigError("expected \"mstn\" or \"cpua\", got \"" + s + "\"");
  });
  f.read("experiment.norm_stage1", [&](const ConfigValue& v) { c.norm_stage1 = as_norm(v); });
  f.read("experiment.norm_stage2", [&](const ConfigValue& v) {
    if (const auto* s = std::get_if<std::string>(&v.value); s && *s == "none")
      c.norm_stage2 = std::nullopt;
    else
      c.norm_stage2 = as_norm(v);
  });
  f.read("experiment.multi_source_mode", [&](const ConfigValue& v) {
    const auto& s = as_string(v);
    if (s == "single") c.multi_source_mode = MultiSourceMode::kSingle;
    else if (s == "merged") c.multi_source_mode = MultiSourceMode::kMerged;
    else if (s == "separate") c.multi_source_mode = MultiSourceMode::kSeparate;
    else throw ConfigError("expected \"single\", \"merged\" or \"separate\", got \"" + s + "\"");
  });
  f.read("experiment.stage2_iterations",
         [&](const ConfigValue& v) { c.stage2_iterations = as_count(v); });
  f.read("experiment.seeds", [&](const ConfigValue& v) {
    c.seeds.clear();
    for (const auto& e : as_array(v)) c.seeds.push_back(as_count(e));
  });
  f.read("experiment.batch_size", [&](const ConfigValue& v) { c.batch_size = as_count(v); });
  f.read("experiment.eval_every", [&](const ConfigValue& v) { c.eval_every = as_int(v); });

  f.read("data.classes", [&](const ConfigValue& v) { c.data.classes = as_count(v); });
  f.read("data.dims", [&](const ConfigValue& v) { c.data.dims = as_count(v); });
  f.read("data.n_per_class", [&](const ConfigValue& v) { c.data.n_per_class = as_count(v); });
  f.read("data.noise", [&](const ConfigValue& v) { c.data.noise = as_double(v); });
  f.read("data.radius", [&](const ConfigValue& v) { c.data.radius = as_double(v); });
  f.read("data.target_shift", [&](const ConfigValue& v) { c.data.target_shift = as_doubles(v); });
  f.read("data.target_rotation_deg",
         [&](const ConfigValue& v) { c.data.target_rotation_deg = as_double(v); });
  f.read("data.source_shifts", [&](const ConfigValue& v) {
    c.data.source_shifts.clear();
    for (const auto& e : as_array(v)) c.data.source_shifts.push_back(as_doubles(e));
  });
  f.read("data.source_rotations_deg",
         [&](const ConfigValue& v) { c.data.source_rotations_deg = as_doubles(v); });

  f.read("schedule.gamma_adapt", [&](const ConfigValue& v) { c.gamma_adapt = as_double(v); });
  f.read("schedule.alpha_lr", [&](const ConfigValue& v) { c.alpha_lr = as_double(v); });
  f.read("schedule.beta_lr", [&](const ConfigValue& v) { c.beta_lr = as_double(v); });
  f.read("schedule.eta0_stage1", [&](const ConfigValue& v) { c.eta0_stage1 = as_double(v); });
  f.read("schedule.eta0_stage2", [&](const ConfigValue& v) { c.eta0_stage2 = as_double(v); });
  f.read("schedule.iters_stage1", [&](const ConfigValue& v) { c.iters_stage1 = as_int(v); });
  f.read("schedule.iters_stage2", [&](const ConfigValue& v) { c.iters_stage2 = as_int(v); });

  f.read("model.hidden", [&](const ConfigValue& v) {
    c.hidden.clear();
    for (const auto& e : as_array(v)) c.hidden.push_back(as_count(e));
  });
  f.read("model.discriminator_width",
         [&](const ConfigValue& v) { c.discriminator_width = as_count(v); });
  f.read("model.bn_eps", [&](const ConfigValue& v) { c.bn_eps = as_double(v); });
  f.read("model.bn_momentum", [&](const ConfigValue& v) { c.bn_momentum = as_double(v); });

  f.read("adaptation.centroid_theta",
         [&](const ConfigValue& v) { c.centroid_theta = as_double(v); });
  f.read("adaptation.lambda", [&](const ConfigValue& v) { c.adaptation_lambda = as_lambda(v); });
  f.read("adaptation.grl_scale", [&](const ConfigValue& v) { c.grl_scale = as_double(v); });

  f.read("stage2.warm_start", [&](const ConfigValue& v) { c.warm_start = as_bool(v); });
  f.read("stage2.pseudo_lambda", [&](const ConfigValue& v) { c.pseudo_lambda = as_lambda(v); });

  f.reject_unknown();
  validate(c);
  return c;
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(!c.seeds.empty(), "experiment.seeds: must not be empty");
  require(c.stage2_iterations >= 1, "experiment.stage2_iterations: must be at least 1");
  require(c.batch_size >= 2, "experiment.batch_size: must be at least 2");
  require(c.eval_every >= 0, "experiment.eval_every: must be nonnegative");
  require(c.data.classes >= 2, "data.classes: must be at least 2");
  require(c.data.dims >= 2, "data.dims: must be at least 2");
  require(c.data.n_per_class >= 1, "data.n_per_class: must be positive");
  require(c.data.n_per_class * c.data.classes >= c.batch_size,
          "data.n_per_class: each domain needs at least batch_size examples");
  require(c.data.noise > 0.0, "data.noise: must be positive");
  require(c.data.radius > 0.0, "data.radius: must be positive");
  require(c.data.target_shift.empty() || c.data.target_shift.size() == c.data.dims,
          "data.target_shift: length must equal data.dims");
  require(!c.data.source_shifts.empty(), "data.source_shifts: need at least one source");
  require(c.data.source_shifts.size() == c.data.source_rotations_deg.size(),
          "data.source_rotations_deg: need one rotation per entry of data.source_shifts");
  for (const auto& s : c.data.source_shifts)
    require(s.empty() || s.size() == c.data.dims,
            "data.source_shifts: each shift must be empty or have data.dims entries");
  require(c.eta0_stage1 > 0.0, "schedule.eta0_stage1: must be positive");
  require(c.eta0_stage2 > 0.0, "schedule.eta0_stage2: must be positive");
  require(c.iters_stage1 > 0, "schedule.iters_stage1: must be positive");
  require(c.iters_stage2 > 0, "schedule.iters_stage2: must be positive");
  require(!c.hidden.empty(), "model.hidden: need at least one hidden layer");
  for (auto h : c.hidden) require(h > 0, "model.hidden: widths must be positive");
  require(c.discriminator_width > 0, "model.discriminator_width: must be positive");
  require(c.bn_eps > 0.0, "model.bn_eps: must be positive");
  require(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0, "model.bn_momentum: must lie in (0, 1]");
  require(c.centroid_theta >= 0.0 && c.centroid_theta <= 1.0,
          "adaptation.centroid_theta: must lie in [0, 1]");
  require(!c.adaptation_lambda || *c.adaptation_lambda >= 0.0,
          "adaptation.lambda: must be nonnegative");
  require(c.grl_scale >= 0.0, "adaptation.grl_scale: must be nonnegative");
  require(!c.pseudo_lambda || (*c.pseudo_lambda >= 0.0 && *c.pseudo_lambda <= 1.0),
          "stage2.pseudo_lambda: must lie in [0, 1]");
}

ExperimentConfig parse_experiment_config(std::string_view text) {
  return experiment_config_from_table(parse_config_text(text));
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_experiment_config(buffer.str());
}

// ---- writing -------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T, typename F>
std::string list(const std::vector<T>& v, F&& item) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += item(v[i]);
  }
  return out + "]";
}

std::string quoted(std::string_view s) { return "\"" + std::string(s) + "\""; }

std::string lambda_text(const std::optional<double>& l) {
  return l ? fmt(*l) : quoted("schedule");
}

}  // namespace

std::string to_config_text(const ExperimentConfig& c) {
  const auto num = [](double v) { return fmt(v); };
  const auto count = [](auto v) { return std::to_string(v); };
  std::ostringstream o;
  o << "[experiment]\n"
    << "baseline = " << quoted(to_string(c.baseline)) << "\n"
    << "norm_stage1 = " << quoted(to_string(c.norm_stage1)) << "\n"
    << "norm_stage2 = " << quoted(c.norm_stage2 ? to_string(*c.norm_stage2) : "none") << "\n"
    << "multi_source_mode = " << quoted(to_string(c.multi_source_mode)) << "\n"
    << "stage2_iterations = " << c.stage2_iterations << "\n"
    << "seeds = " << list(c.seeds, count) << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "eval_every = " << c.eval_every << "\n\n";
  o << "[data]\n"
    << "classes = " << c.data.classes << "\n"
    << "dims = " << c.data.dims << "\n"
    << "n_per_class = " << c.data.n_per_class << "\n"
    << "noise = " << fmt(c.data.noise) << "\n"
    << "radius = " << fmt(c.data.radius) << "\n"
    << "target_shift = " << list(c.data.target_shift, num) << "\n"
    << "target_rotation_deg = " << fmt(c.data.target_rotation_deg) << "\n"
    << "source_shifts = "
    << list(c.data.source_shifts, [&](const std::vector<double>& s) { return list(s, num); })
    << "\n"
    << "source_rotations_deg = " << list(c.data.source_rotations_deg, num) << "\n\n";
  o << "[schedule]\n"
    << "gamma_adapt = " << fmt(c.gamma_adapt) << "\n"
    << "alpha_lr = " << fmt(c.alpha_lr) << "\n"
    << "beta_lr = " << fmt(c.beta_lr) << "\n"
    << "eta0_stage1 = " << fmt(c.eta0_stage1) << "\n"
    << "eta0_stage2 = " << fmt(c.eta0_stage2) << "\n"
    << "iters_stage1 = " << c.iters_stage1 << "\n"
    << "iters_stage2 = " << c.iters_stage2 << "\n\n";
  o << "[model]\n"
    << "hidden = " << list(c.hidden, count) << "\n"
    << "discriminator_width = " << c.discriminator_width << "\n"
    << "bn_eps = " << fmt(c.bn_eps) << "\n"
    << "bn_momentum = " << fmt(c.bn_momentum) << "\n\n";
  o << "[adaptation]\n"
    << "centroid_theta = " << fmt(c.centroid_theta) << "\n"
    << "lambda = " << lambda_text(c.adaptation_lambda) << "\n"
    << "grl_scale = " << fmt(c.grl_scale) << "\n\n";
  o << "[stage2]\n"
    << "warm_start = " << (c.warm_start ? "true" : "false") << "\n"
    << "pseudo_lambda = " << lambda_text(c.pseudo_lambda) << "\n";
  return o.str();
}

Stage1Config make_stage1_config(const ExperimentConfig& c, NormMode norm) {
  Stage1Config s;
  s.baseline = c.baseline;
  s.norm = norm;
  s.schedule = {c.gamma_adapt, c.eta0_stage1, c.alpha_lr, c.beta_lr, c.iters_stage1};
  s.batch_size = c.batch_size;
  s.model.hidden = c.hidden;
  s.model.bn_eps = c.bn_eps;
  s.model.bn_momentum = c.bn_momentum;
  s.discriminator_width = c.discriminator_width;
  s.centroid_theta = c.centroid_theta;
  s.fixed_lambda = c.adaptation_lambda;
  s.grl_scale = c.grl_scale;
  return s;
}

Stage2Config make_stage2_config(const ExperimentConfig& c, NormMode norm) {
  Stage2Config s;
  s.norm = norm;
  s.schedule = {c.gamma_adapt, c.eta0_stage2, c.alpha_lr, c.beta_lr, c.iters_stage2};
  s.batch_size = c.batch_size;
  s.model.hidden = c.hidden;
  s.model.bn_eps = c.bn_eps;
  s.model.bn_momentum = c.bn_momentum;
  s.warm_start = c.warm_start;
  s.fixed_pseudo_lambda = c.pseudo_lambda;
  return s;
}

MultiSourceSpec make_data_spec(const ExperimentConfig& c) {
  constexpr double kDeg = std::numbers::pi / 180.0;
  MultiSourceSpec spec;
  spec.classes = c.data.classes;
  spec.dims = c.data.dims;
  spec.n_per_class = c.data.n_per_class;
  spec.noise = c.data.noise;
  spec.radius = c.data.radius;
  for (std::size_t i = 0; i < c.data.source_shifts.size(); ++i)
    spec.sources.push_back({c.data.source_shifts[i], c.data.source_rotations_deg[i] * kDeg});
  spec.target = {c.data.target_shift, c.data.target_rotation_deg * kDeg};
  return spec;
}

}  // namespace dsbn

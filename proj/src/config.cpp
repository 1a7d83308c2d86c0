#include "fsdet/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <variant>

namespace fsdet {

namespace {

// ---- values -------------------------------------------------------------

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<bool, std::int64_t, double, std::string, Array> v;
};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

class ValueParser {
 public:
  explicit ValueParser(std::string_view text) : s_(text) {}

  Value parse() {
    Value v = value();
    skip_ws();
    if (pos_ != s_.size()) fail("unexpected trailing characters");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(what); }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  Value value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return {string()};
    if (c == '[') return {array()};
    if (s_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return {true};
    }
    if (s_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return {false};
    }
    return number();
  }

  std::string string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) {
        const char e = s_[++pos_];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        out += s_[pos_];
      }
      ++pos_;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  Array array() {
    ++pos_;
    Array out;
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    while (true) {
      out.push_back(value());
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      fail("expected ',' or ']' in array");
    }
  }

  Value number() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' ||
                                s_[pos_] == '-' || s_[pos_] == '+' || s_[pos_] == '_')) {
      ++pos_;
    }
    std::string tok;
    for (char ch : s_.substr(start, pos_ - start))
      if (ch != '_') tok += ch;
    if (tok.empty()) fail("unrecognised value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    if (!is_float) {
      std::int64_t i = 0;
      const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), i);
      if (ec == std::errc() && p == tok.data() + tok.size()) return {i};
      fail("bad integer '" + tok + "'");
    }
    char* end = nullptr;
    const double d = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) fail("bad number '" + tok + "'");
    return {d};
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

// ---- conversions --------------------------------------------------------

const char* type_name(const Value& v) {
  switch (v.v.index()) {
    case 0: return "boolean";
    case 1: return "integer";
    case 2: return "float";
    case 3: return "string";
    default: return "array";
  }
}

bool as_bool(const Value& v) {
  if (const auto* b = std::get_if<bool>(&v.v)) return *b;
  throw ConfigError(std::string("expected boolean, got ") + type_name(v));
}

std::int64_t as_int(const Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v.v)) return *i;
  throw ConfigError(std::string("expected integer, got ") + type_name(v));
}

double as_double(const Value& v) {
  if (const auto* d = std::get_if<double>(&v.v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&v.v)) return static_cast<double>(*i);
  throw ConfigError(std::string("expected number, got ") + type_name(v));
}

std::string as_string(const Value& v) {
  if (const auto* s = std::get_if<std::string>(&v.v)) return *s;
  throw ConfigError(std::string("expected string, got ") + type_name(v));
}

const Array& as_array(const Value& v) {
  if (const auto* a = std::get_if<Array>(&v.v)) return *a;
  throw ConfigError(std::string("expected array, got ") + type_name(v));
}

int as_int32(const Value& v) {
  const auto i = as_int(v);
  if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max()) {
    throw ConfigError("integer out of range");
  }
  return static_cast<int>(i);
}

std::string fmt_double(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  std::string s = os.str();
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <class T, class F>
std::string fmt_list(const std::vector<T>& xs, F f) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + f(xs[i]);
  return out + "]";
}

// ---- schema -------------------------------------------------------------

struct Field {
  std::string section;
  std::string key;
  std::function<void(const Value&, ExperimentConfig&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Acc>
Field int_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key), [acc](const Value& v, ExperimentConfig& c) { acc(c) = as_int32(v); },
          [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Acc>
Field u64_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key),
          [acc](const Value& v, ExperimentConfig& c) {
            const auto i = as_int(v);
            if (i < 0) throw ConfigError("seed must be non-negative");
            acc(c) = static_cast<std::uint64_t>(i);
          },
          [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Acc>
Field double_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key), [acc](const Value& v, ExperimentConfig& c) { acc(c) = as_double(v); },
          [acc](const ExperimentConfig& c) { return fmt_double(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Acc>
Field bool_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key), [acc](const Value& v, ExperimentConfig& c) { acc(c) = as_bool(v); },
          [acc](const ExperimentConfig& c) { return std::string(acc(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); }};
}

template <class Acc>
Field string_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key), [acc](const Value& v, ExperimentConfig& c) { acc(c) = as_string(v); },
          [acc](const ExperimentConfig& c) { return quote(acc(const_cast<ExperimentConfig&>(c))); }};
}

template <class Acc>
Field int_list_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key),
          [acc](const Value& v, ExperimentConfig& c) {
            std::vector<int> out;
            for (const auto& e : as_array(v)) out.push_back(as_int32(e));
            acc(c) = out;
          },
          [acc](const ExperimentConfig& c) {
            return fmt_list(acc(const_cast<ExperimentConfig&>(c)), [](int i) { return std::to_string(i); });
          }};
}

template <class Acc>
Field double_list_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key),
          [acc](const Value& v, ExperimentConfig& c) {
            std::vector<double> out;
            for (const auto& e : as_array(v)) out.push_back(as_double(e));
            acc(c) = out;
          },
          [acc](const ExperimentConfig& c) { return fmt_list(acc(const_cast<ExperimentConfig&>(c)), fmt_double); }};
}

template <class Acc>
Field bool_list_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key),
          [acc](const Value& v, ExperimentConfig& c) {
            std::vector<bool> out;
            for (const auto& e : as_array(v)) out.push_back(as_bool(e));
            acc(c) = out;
          },
          [acc](const ExperimentConfig& c) {
            const std::vector<bool>& xs = acc(const_cast<ExperimentConfig&>(c));
            return fmt_list(std::vector<bool>(xs), [](bool b) { return std::string(b ? "true" : "false"); });
          }};
}

template <class Acc>
Field string_list_field(std::string sec, std::string key, Acc acc) {
  return {std::move(sec), std::move(key),
          [acc](const Value& v, ExperimentConfig& c) {
            std::vector<std::string> out;
            for (const auto& e : as_array(v)) out.push_back(as_string(e));
            acc(c) = out;
          },
          [acc](const ExperimentConfig& c) { return fmt_list(acc(const_cast<ExperimentConfig&>(c)), quote); }};
}

#define FSDET_ACC(expr) [](ExperimentConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(string_field("experiment", "name", FSDET_ACC(name)));

    f.push_back(int_field("backbone", "in_channels", FSDET_ACC(model.backbone.in_channels)));
    f.push_back(int_list_field("backbone", "channels", FSDET_ACC(model.backbone.channels)));
    f.push_back(int_list_field("backbone", "strides", FSDET_ACC(model.backbone.strides)));
    f.push_back(bool_list_field("backbone", "frozen", FSDET_ACC(model.backbone.frozen)));
    f.push_back(int_field("backbone", "feature_block", FSDET_ACC(model.backbone.feature_block)));

    f.push_back(double_list_field("anchors", "scales", FSDET_ACC(model.anchors.scales)));
    f.push_back(double_list_field("anchors", "ratios", FSDET_ACC(model.anchors.aspect_ratios)));

    f.push_back(int_field("rpn", "conv_channels", FSDET_ACC(model.rpn.conv_channels)));
    f.push_back(double_field("rpn", "positive_iou", FSDET_ACC(model.rpn.positive_iou)));
    f.push_back(double_field("rpn", "negative_iou", FSDET_ACC(model.rpn.negative_iou)));
    f.push_back(int_field("rpn", "batch_anchors", FSDET_ACC(model.rpn.batch_anchors)));
    f.push_back(double_field("rpn", "positive_fraction", FSDET_ACC(model.rpn.positive_fraction)));
    f.push_back(int_field("rpn", "pre_nms_k", FSDET_ACC(model.rpn.pre_nms_k)));
    f.push_back(int_field("rpn", "post_nms_k", FSDET_ACC(model.rpn.post_nms_k)));
    f.push_back(double_field("rpn", "nms_threshold", FSDET_ACC(model.rpn.nms_threshold)));
    f.push_back(bool_field("rpn", "attention", FSDET_ACC(model.rpn.attention)));

    f.push_back(bool_field("heads", "global", FSDET_ACC(model.relation.heads.global)));
    f.push_back(bool_field("heads", "local", FSDET_ACC(model.relation.heads.local)));
    f.push_back(bool_field("heads", "patch", FSDET_ACC(model.relation.heads.patch)));
    f.push_back(int_field("heads", "global_hidden", FSDET_ACC(model.relation.global_hidden)));
    f.push_back(int_field("heads", "patch_mid", FSDET_ACC(model.relation.patch_mid)));
    f.push_back(int_field("heads", "patch_out", FSDET_ACC(model.relation.patch_out)));
    f.push_back(int_field("heads", "roi_sampling", FSDET_ACC(model.roi_sampling)));

    f.push_back(int_field("data", "query_short", FSDET_ACC(model.query.short_side)));
    f.push_back(int_field("data", "query_long", FSDET_ACC(model.query.long_cap)));
    f.push_back(int_field("data", "support_size", FSDET_ACC(model.support.size)));
    f.push_back(int_field("data", "support_context", FSDET_ACC(model.support.context)));

    f.push_back(int_field("training", "ways", FSDET_ACC(training.ways)));
    f.push_back(int_field("training", "shots", FSDET_ACC(training.shots)));
    f.push_back(double_field("training", "base_lr", FSDET_ACC(training.schedule.base_lr)));
    f.push_back(int_field("training", "decay_step", FSDET_ACC(training.schedule.decay_step)));
    f.push_back(int_field("training", "total_iterations", FSDET_ACC(training.schedule.total_iterations)));
    f.push_back(int_field("training", "batch_size", FSDET_ACC(training.schedule.batch_size)));
    f.push_back(double_field("training", "decay_factor", FSDET_ACC(training.schedule.decay_factor)));
    f.push_back(double_field("training", "momentum", FSDET_ACC(training.momentum)));
    f.push_back(double_field("training", "weight_decay", FSDET_ACC(training.weight_decay)));
    f.push_back(double_field("training", "fg_iou", FSDET_ACC(training.fg_iou)));
    f.push_back({"training", "pair_ratio",
                 [](const Value& v, ExperimentConfig& c) {
                   const auto& a = as_array(v);
                   if (a.size() != 3) throw ConfigError("pair_ratio needs three integers");
                   c.training.quota = {as_int32(a[0]), as_int32(a[1]), as_int32(a[2])};
                 },
                 [](const ExperimentConfig& c) {
                   const auto& q = c.training.quota;
                   return "[" + std::to_string(q.foreground) + ", " + std::to_string(q.background) + ", " +
                          std::to_string(q.negative) + "]";
                 }});
    f.push_back(bool_field("training", "append_gt", FSDET_ACC(training.append_gt)));
    f.push_back(int_field("training", "train_proposals", FSDET_ACC(training.train_proposals)));
    f.push_back(bool_field("training", "supervise_negative_branch", FSDET_ACC(training.supervise_negative_branch)));
    f.push_back(double_field("training", "clip_grad_norm", FSDET_ACC(training.clip_grad_norm)));
    f.push_back(bool_field("training", "permute_channels", FSDET_ACC(training.permute_channels)));

    f.push_back(string_field("eval", "protocol", FSDET_ACC(eval.protocol)));
    f.push_back(int_field("eval", "ways", FSDET_ACC(eval.ways)));
    f.push_back(int_field("eval", "shots", FSDET_ACC(eval.shots)));
    f.push_back(int_field("eval", "episodes", FSDET_ACC(eval.episodes)));
    f.push_back(int_field("eval", "queries_per_category", FSDET_ACC(eval.queries_per_category)));
    f.push_back(bool_field("eval", "cap_ways", FSDET_ACC(eval.cap_ways)));
    f.push_back(double_field("eval", "score_threshold", FSDET_ACC(eval.detect.score_threshold)));
    f.push_back(double_field("eval", "nms_threshold", FSDET_ACC(eval.detect.nms_threshold)));
    f.push_back(bool_field("eval", "soft_nms", FSDET_ACC(eval.detect.soft_nms)));
    f.push_back(double_field("eval", "soft_nms_sigma", FSDET_ACC(eval.detect.soft.sigma)));
    f.push_back(double_field("eval", "soft_nms_floor", FSDET_ACC(eval.detect.soft.score_floor)));
    f.push_back(int_field("eval", "max_detections", FSDET_ACC(eval.detect.max_detections)));
    f.push_back(int_field("eval", "proposals", FSDET_ACC(eval.detect.proposals)));

    f.push_back(string_list_field("synthetic", "train_categories", FSDET_ACC(synthetic.train_categories)));
    f.push_back(string_list_field("synthetic", "test_categories", FSDET_ACC(synthetic.test_categories)));
    f.push_back(int_field("synthetic", "train_images", FSDET_ACC(synthetic.train_images)));
    f.push_back(int_field("synthetic", "test_images", FSDET_ACC(synthetic.test_images)));
    f.push_back(int_field("synthetic", "image_size", FSDET_ACC(synthetic.image_size)));
    f.push_back(int_field("synthetic", "min_objects", FSDET_ACC(synthetic.min_objects)));
    f.push_back(int_field("synthetic", "max_objects", FSDET_ACC(synthetic.max_objects)));
    f.push_back(double_field("synthetic", "min_object_size", FSDET_ACC(synthetic.min_object_size)));
    f.push_back(double_field("synthetic", "max_object_size", FSDET_ACC(synthetic.max_object_size)));
    f.push_back(int_field("synthetic", "clutter", FSDET_ACC(synthetic.clutter)));

    f.push_back(u64_field("seeds", "init", FSDET_ACC(seeds.init)));
    f.push_back(u64_field("seeds", "train", FSDET_ACC(seeds.train)));
    f.push_back(u64_field("seeds", "data", FSDET_ACC(seeds.data)));
    f.push_back(u64_field("seeds", "eval", FSDET_ACC(seeds.eval)));

    f.push_back(string_field("paths", "data_dir", FSDET_ACC(paths.data_dir)));
    f.push_back(string_field("paths", "output_dir", FSDET_ACC(paths.output_dir)));
    f.push_back(string_field("paths", "checkpoint", FSDET_ACC(paths.checkpoint)));
    return f;
  }();
  return fields;
}

#undef FSDET_ACC

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      problems.push_back(std::string(what) + ": " + e.what());
    }
  };
  check("model", [&] { (void)model.resolved(); });
  check("training", [&] { training.validate(); });
  if (training.schedule.total_iterations < 0) problems.push_back("training.total_iterations must be >= 0");
  if (eval.protocol != "episodic" && eval.protocol != "fullway") {
    problems.push_back("eval.protocol must be \"episodic\" or \"fullway\"");
  }
  if (eval.ways < 1 || eval.shots < 1 || eval.episodes < 1 || eval.queries_per_category < 1) {
    problems.push_back("eval.ways/shots/episodes/queries_per_category must be >= 1");
  }
  if (!(eval.detect.nms_threshold > 0.0 && eval.detect.nms_threshold < 1.0)) {
    problems.push_back("eval.nms_threshold must lie in (0,1)");
  }
  if (!(eval.detect.soft.sigma > 0.0)) problems.push_back("eval.soft_nms_sigma must be > 0");
  if (eval.detect.max_detections < 1 || eval.detect.proposals < 1) {
    problems.push_back("eval.max_detections and eval.proposals must be >= 1");
  }
  if (synthetic.test_categories.size() < 2) problems.push_back("synthetic.test_categories needs at least 2 names");
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.name = "synthetic-shapes";
  c.model.backbone.channels = {16, 32, 64, 64};
  c.model.backbone.strides = {2, 2, 2, 1};
  c.model.backbone.frozen = {true, false, false, false};
  c.model.anchors.scales = {16.0, 24.0, 32.0, 40.0};
  c.model.anchors.aspect_ratios = {1.0};
  c.model.query = {96, 160};
  c.model.support = {48, 4};
  c.training.schedule.base_lr = 0.004;
  c.training.schedule.decay_step = 5400;
  c.training.schedule.total_iterations = 6000;
  c.training.schedule.batch_size = 1;
  c.training.clip_grad_norm = 10.0;
  c.training.permute_channels = true;
  c.eval.ways = 5;
  c.eval.shots = 1;
  c.eval.episodes = 600;
  return c;
}

ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  std::map<std::string, const Field*> by_name;
  for (const auto& f : schema()) by_name[f.section + "." + f.key] = &f;

  std::vector<std::string> errors;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    // Strip comments outside strings.
    bool in_str = false;
    std::string line;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] == '"' && (i == 0 || raw[i - 1] != '\\')) in_str = !in_str;
      if (raw[i] == '#' && !in_str) break;
      line += raw[i];
    }
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') {
        errors.push_back(where + "malformed section header");
        continue;
      }
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back(where + "expected key = value");
      continue;
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    const auto it = by_name.find(full);
    if (it == by_name.end()) {
      errors.push_back(where + "unknown key '" + full + "'");
      continue;
    }
    try {
      it->second->set(ValueParser(std::string_view(line).substr(eq + 1)).parse(), cfg);
    } catch (const ConfigError& e) {
      errors.push_back(where + full + ": " + e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "configuration errors:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const ExperimentConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string resolved_config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : schema()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("FSDET_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError(std::string("FSDET_SEED is not an integer: ") + s);
    cfg.seeds = {v, v, v, v};
  }
  if (const char* s = std::getenv("FSDET_OUTPUT_DIR")) cfg.paths.output_dir = s;
  if (const char* s = std::getenv("FSDET_DATA_DIR")) cfg.paths.data_dir = s;
  if (const char* s = std::getenv("FSDET_CHECKPOINT")) cfg.paths.checkpoint = s;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : schema()) keys.push_back(f.section + "." + f.key);
  return keys;
}

}  // namespace fsdet

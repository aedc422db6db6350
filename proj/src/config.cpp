#include "asap/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace asap {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for floating point is incomplete on older toolchains
    try {
      std::size_t used = 0;
      const double d = std::stod(text, &used);
      if (used != text.size()) throw ConfigError("bad value for " + key + ": '" + text + "'");
      return static_cast<T>(d);
    } catch (const std::logic_error&) {
      throw ConfigError("bad value for " + key + ": '" + text + "'");
    }
  } else {
    r = std::from_chars(first, last, v);
    if (r.ec != std::errc() || r.ptr != last) {
      throw ConfigError("bad value for " + key + ": '" + text + "'");
    }
  }
  return v;
}

template <typename T>
std::string show(T v) {
  std::ostringstream os;
  if constexpr (std::is_floating_point_v<T>) os.precision(17);
  os << v;
  return os.str();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

struct Field {
  std::string key;  // section.key
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field number(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return show(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"model.stage_channels",
                 [](const RunConfig& c) {
                   std::string s;
                   for (auto ch : c.model.backbone.stage_channels) s += (s.empty() ? "" : ",") + show(ch);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   const auto items = split_list(v);
                   if (items.size() != 4) throw ConfigError("model.stage_channels needs 4 values");
                   for (std::size_t i = 0; i < 4; ++i)
                     c.model.backbone.stage_channels[i] = parse_number<std::size_t>("model.stage_channels", items[i]);
                 }});
    f.push_back(number<std::size_t>("model.blocks_per_stage",
                                    [](RunConfig& c) -> auto& { return c.model.backbone.blocks_per_stage; }));
    f.push_back(number<std::size_t>("model.width", [](RunConfig& c) -> auto& { return c.model.width; }));
    f.push_back(number<std::size_t>("model.n_classes", [](RunConfig& c) -> auto& { return c.model.n_classes; }));
    f.push_back(number<std::size_t>("model.reduced_channels",
                                    [](RunConfig& c) -> auto& { return c.model.reduced_channels; }));
    f.push_back({"model.fusion", [](const RunConfig& c) { return to_string(c.model.fusion); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.model.fusion = fusion_mode_from(v);
                   } catch (const Error& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    f.push_back({"model.attention", [](const RunConfig& c) { return to_string(c.model.attention); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.model.attention = attention_mode_from(v);
                   } catch (const Error& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    f.push_back(number<std::uint64_t>("model.seed", [](RunConfig& c) -> auto& { return c.model.seed; }));

    f.push_back(number<std::size_t>("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    f.push_back(number<real>("train.momentum", [](RunConfig& c) -> auto& { return c.train.momentum; }));
    f.push_back(number<real>("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(number<real>("train.base_lr", [](RunConfig& c) -> auto& { return c.train.base_lr; }));
    f.push_back(number<real>("train.poly_power", [](RunConfig& c) -> auto& { return c.train.poly_power; }));
    f.push_back(number<std::uint64_t>("train.max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; }));
    f.push_back(number<std::uint64_t>("train.eval_every", [](RunConfig& c) -> auto& { return c.train.eval_every; }));
    f.push_back(number<std::uint64_t>("train.seed", [](RunConfig& c) -> auto& { return c.train.seed; }));

    f.push_back(number<real>("loss.alpha", [](RunConfig& c) -> auto& { return c.train.loss.alpha; }));
    f.push_back(number<real>("loss.beta", [](RunConfig& c) -> auto& { return c.train.loss.beta; }));
    f.push_back(number<real>("loss.ohem_threshold", [](RunConfig& c) -> auto& { return c.train.loss.ohem_threshold; }));
    f.push_back(number<std::size_t>("loss.ohem_min_kept", [](RunConfig& c) -> auto& { return c.train.loss.ohem_min_kept; }));

    f.push_back(number<double>("augment.hflip_prob", [](RunConfig& c) -> auto& { return c.train.augment.hflip_prob; }));
    f.push_back({"augment.scales",
                 [](const RunConfig& c) {
                   std::string s;
                   for (double v : c.train.augment.scales) s += (s.empty() ? "" : ",") + show(v);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   std::vector<double> scales;
                   for (const auto& item : split_list(v)) scales.push_back(parse_number<double>("augment.scales", item));
                   if (scales.empty()) throw ConfigError("augment.scales is empty");
                   c.train.augment.scales = scales;
                 }});
    f.push_back(number<double>("augment.brightness", [](RunConfig& c) -> auto& { return c.train.augment.brightness; }));
    f.push_back(number<double>("augment.contrast", [](RunConfig& c) -> auto& { return c.train.augment.contrast; }));

    f.push_back(number<std::size_t>("data.width", [](RunConfig& c) -> auto& { return c.data.width; }));
    f.push_back(number<std::size_t>("data.height", [](RunConfig& c) -> auto& { return c.data.height; }));
    f.push_back(number<double>("data.noise", [](RunConfig& c) -> auto& { return c.data.noise; }));
    f.push_back(number<std::uint64_t>("data.seed", [](RunConfig& c) -> auto& { return c.data.seed; }));
    f.push_back(number<std::size_t>("data.train_count", [](RunConfig& c) -> auto& { return c.train_count; }));
    f.push_back(number<std::size_t>("data.val_count", [](RunConfig& c) -> auto& { return c.val_count; }));
    return f;
  }();
  return table;
}

}  // namespace

void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == dotted_key) {
      f.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + dotted_key + "'");
}

void RunConfig::merge_text(const std::string& text, const std::string& source) {
  std::istringstream is(text);
  std::string section;
  std::size_t line_no = 0;
  for (std::string raw; std::getline(is, raw);) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    try {
      set(section + "." + trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IOError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  merge_text(ss.str(), path.string());
}

void RunConfig::merge_overrides(const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    set(trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) os << '\n';
      os << '[' << s << "]\n";
      section = s;
    }
    os << f.key.substr(dot + 1) << " = " << f.get(*this) << '\n';
  }
  return os.str();
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

}  // namespace asap

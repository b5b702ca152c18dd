#include "defnet/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace defnet {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void bad_value(const ConfigEntry& e, const std::string& expected) {
  throw ConfigError(e.where() + ": expected " + expected + ", got '" + e.value + "'");
}

std::uint64_t parse_u64_text(const ConfigEntry& e, const std::string& text) {
  std::uint64_t v = 0;
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end) bad_value(e, "a non-negative integer");
  return v;
}

double parse_double_text(const ConfigEntry& e, const std::string& text) {
  if (text.empty()) bad_value(e, "a number");
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || !std::isfinite(v)) bad_value(e, "a finite number");
  return v;
}

Shape parse_shape(const ConfigEntry& e) {
  Shape s;
  for (const std::string& part : split(e.value, 'x')) s.push_back(parse_u64_text(e, part));
  if (s.size() != 3) bad_value(e, "a KxMxN shape");
  return s;
}

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t d : s) out += (out.empty() ? "" : "x") + std::to_string(d);
  return out;
}

std::string key(std::string_view prefix, std::string_view name) {
  return std::string(prefix) + "." + std::string(name);
}

}  // namespace

std::string ConfigEntry::where() const {
  return origin + ":" + std::to_string(line) + ": " + key;
}

ConfigText ConfigText::parse(std::string_view text, const std::string& origin) {
  ConfigText cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? nl : nl - start);
    ++line_no;
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    ConfigEntry e{trim(std::string_view(body).substr(0, eq)),
                  trim(std::string_view(body).substr(eq + 1)), line_no, origin};
    if (e.key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    cfg.add(std::move(e));
  }
  return cfg;
}

ConfigText ConfigText::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void ConfigText::add(ConfigEntry entry) {
  if (const ConfigEntry* prev = find(entry.key)) {
    throw ConfigError(entry.where() + ": duplicate key (first set at line " +
                      std::to_string(prev->line) + ")");
  }
  entries_.push_back(std::move(entry));
}

void ConfigText::set(const std::string& k, const std::string& value) {
  for (ConfigEntry& e : entries_) {
    if (e.key == k) {
      e.value = value;
      return;
    }
  }
  entries_.push_back({k, value, 0, "<override>"});
}

const ConfigEntry* ConfigText::find(std::string_view k) const {
  for (const ConfigEntry& e : entries_)
    if (e.key == k) return &e;
  return nullptr;
}

std::size_t parse_size(const ConfigEntry& e) { return parse_u64_text(e, e.value); }
std::uint64_t parse_u64(const ConfigEntry& e) { return parse_u64_text(e, e.value); }
double parse_double(const ConfigEntry& e) { return parse_double_text(e, e.value); }

bool parse_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  bad_value(e, "true or false");
}

std::vector<double> parse_double_list(const ConfigEntry& e) {
  std::vector<double> out;
  if (trim(e.value).empty()) return out;
  for (const std::string& part : split(e.value, ',')) out.push_back(parse_double_text(e, part));
  return out;
}

std::vector<std::size_t> parse_size_list(const ConfigEntry& e) {
  std::vector<std::size_t> out;
  if (trim(e.value).empty()) return out;
  for (const std::string& part : split(e.value, ',')) out.push_back(parse_u64_text(e, part));
  return out;
}

std::string format_double(double value) {
  char buf[400];
  const double mag = std::abs(value);
  const bool fixed = value == 0.0 || (mag >= 1e-6 && mag < 1e15);
  const auto r = fixed ? std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed)
                       : std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, r.ptr);
}

std::string format_list(const std::vector<double>& values) {
  std::string out;
  for (double v : values) out += (out.empty() ? "" : ",") + format_double(v);
  return out;
}

std::string format_list(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t v : values) out += (out.empty() ? "" : ",") + std::to_string(v);
  return out;
}

std::string model_spec_to_text(const ModelSpec& spec, std::string_view prefix) {
  std::ostringstream os;
  os << key(prefix, "architecture") << " = " << to_string(spec.architecture) << "\n";
  os << key(prefix, "blocks") << " = ";
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const BlockSpec& b = spec.blocks[i];
    os << (i ? "," : "") << b.channels << ":" << b.stride << ":" << b.layers;
  }
  os << "\n";
  os << key(prefix, "placement") << " = " << placement_string(spec.mask_blocks) << "\n";
  os << key(prefix, "keep_prob") << " = " << format_double(spec.keep_prob) << "\n";
  os << key(prefix, "variant") << " = " << to_string(spec.mask_variant) << "\n";
  os << key(prefix, "widen") << " = " << spec.widen_factor << "\n";
  os << key(prefix, "num_classes") << " = " << spec.num_classes << "\n";
  os << key(prefix, "input_shape") << " = " << shape_text(spec.input_shape) << "\n";
  os << key(prefix, "seed") << " = " << spec.master_seed << "\n";
  if (spec.mask_seed) os << key(prefix, "mask_seed") << " = " << *spec.mask_seed << "\n";
  return os.str();
}

ModelSpec model_spec_from_config(const ConfigText& cfg, std::string_view prefix) {
  const std::string p = std::string(prefix) + ".";
  std::map<std::string, const ConfigEntry*> by_name;
  for (const ConfigEntry& e : cfg.entries()) {
    if (e.key.rfind(p, 0) != 0) throw ConfigError(e.where() + ": unknown key");
    by_name[e.key.substr(p.size())] = &e;
  }
  auto take = [&](const char* name) -> const ConfigEntry* {
    auto it = by_name.find(name);
    if (it == by_name.end()) return nullptr;
    const ConfigEntry* e = it->second;
    by_name.erase(it);
    return e;
  };
  Architecture arch = Architecture::kResnetSmall;
  Shape input{1, 28, 28};
  std::size_t classes = 10;
  if (auto e = take("architecture")) {
    try {
      arch = parse_architecture(e->value);
    } catch (const ConfigError& err) {
      throw ConfigError(e->where() + ": " + err.what());
    }
  }
  if (auto e = take("input_shape")) input = parse_shape(*e);
  if (auto e = take("num_classes")) classes = parse_size(*e);
  ModelSpec spec = arch == Architecture::kResnetSmall ? resnet_small_spec(input, classes)
                                                      : convnet_plain_spec(input, classes);
  if (auto e = take("blocks")) {
    spec.blocks.clear();
    for (const std::string& item : split(e->value, ',')) {
      const std::vector<std::string> f = split(item, ':');
      if (f.size() != 3) bad_value(*e, "channels:stride:layers items");
      spec.blocks.push_back(
          {parse_u64_text(*e, f[0]), parse_u64_text(*e, f[1]), parse_u64_text(*e, f[2])});
    }
  }
  auto wrap = [](const ConfigEntry& e, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& err) {
      if (std::string(err.what()).rfind(e.origin, 0) == 0) throw;
      throw ConfigError(e.where() + ": " + err.what());
    }
  };
  if (auto e = take("placement")) {
    wrap(*e, [&] { spec.mask_blocks = parse_placement(e->value, spec.blocks.size()); });
  }
  if (auto e = take("keep_prob")) spec.keep_prob = parse_double(*e);
  if (auto e = take("variant")) wrap(*e, [&] { spec.mask_variant = parse_mask_variant(e->value); });
  if (auto e = take("widen")) spec.widen_factor = parse_size(*e);
  if (auto e = take("seed")) spec.master_seed = parse_u64(*e);
  if (auto e = take("mask_seed")) spec.mask_seed = parse_u64(*e);
  if (!by_name.empty()) throw ConfigError(by_name.begin()->second->where() + ": unknown key");
  spec.validate();
  return spec;
}

std::filesystem::path DataSettings::dataset_dir() const {
  std::filesystem::path root = dir;
  if (root.empty()) {
    const char* env = std::getenv("DEFNET_DATA_DIR");
    if (env == nullptr || *env == '\0') {
      throw ConfigError("no dataset directory: set data.dir or DEFNET_DATA_DIR");
    }
    root = env;
  }
  return root / dataset;
}

const char* to_string(GrayboxMode mode) {
  return mode == GrayboxMode::kReinit ? "reinit" : "remask";
}

GrayboxMode parse_graybox_mode(std::string_view text) {
  if (text == "reinit") return GrayboxMode::kReinit;
  if (text == "remask") return GrayboxMode::kRemask;
  throw ConfigError("unknown graybox mode '" + std::string(text) + "'");
}

void ExperimentConfig::apply_seed(std::uint64_t seed) {
  model.master_seed = seed;
  train.seed = seed;
  attack.seed = seed;
  eval.probe_seed = seed;
}

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  attack.validate();
  if (data.dataset != "mnist" && data.dataset != "cifar10") {
    throw ConfigError("data.dataset must be mnist or cifar10");
  }
  for (double s : eval.sigmas)
    if (!(s >= 0.0)) throw ConfigError("eval.sigmas must be non-negative");
  for (std::size_t k : eval.shuffle_k)
    if (k == 0) throw ConfigError("eval.shuffle_k must be positive");
}

ExperimentConfig experiment_from_config(const ConfigText& cfg) {
  ExperimentConfig x;
  ConfigText model_part;
  for (const ConfigEntry& e : cfg.entries()) {
    const std::string& k = e.key;
    auto wrap = [&](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& err) {
        const std::string what = err.what();
        if (what.rfind(e.origin, 0) == 0) throw;
        throw ConfigError(e.where() + ": " + what);
      }
    };
    if (k.rfind("model.", 0) == 0) {
      model_part.add(e);
    } else if (k == "train.lr0") {
      x.train.lr0 = parse_double(e);
    } else if (k == "train.momentum") {
      x.train.momentum = parse_double(e);
    } else if (k == "train.weight_decay") {
      x.train.weight_decay = parse_double(e);
    } else if (k == "train.batch_size") {
      x.train.batch_size = parse_size(e);
    } else if (k == "train.epochs") {
      x.train.epochs = parse_size(e);
    } else if (k == "train.lr_drops") {
      x.train.lr_drop_epochs = parse_size_list(e);
    } else if (k == "train.lr_drop_factor") {
      x.train.lr_drop_factor = parse_double(e);
    } else if (k == "train.seed") {
      x.train.seed = parse_u64(e);
    } else if (k == "train.augment") {
      x.train.augment = parse_bool(e);
    } else if (k == "train.augment.pad") {
      x.train.augmentation.pad_width = parse_size(e);
    } else if (k == "train.augment.crop") {
      x.train.augmentation.crop_size = parse_size(e);
    } else if (k == "train.augment.hflip") {
      x.train.augmentation.hflip = parse_bool(e);
    } else if (k == "train.eval_batch") {
      x.train.eval_batch = parse_size(e);
    } else if (k == "attack.family") {
      wrap([&] { x.attack.family = parse_attack_family(e.value); });
    } else if (k == "attack.epsilon") {
      x.attack.epsilon = parse_double(e);
    } else if (k == "attack.alpha") {
      x.attack.alpha = parse_double(e);
    } else if (k == "attack.steps") {
      x.attack.steps = parse_size(e);
    } else if (k == "attack.mu") {
      x.attack.mu = parse_double(e);
    } else if (k == "attack.kappa") {
      x.attack.kappa = parse_double(e);
    } else if (k == "attack.c_search_steps") {
      x.attack.c_search_steps = parse_size(e);
    } else if (k == "attack.inner_steps") {
      x.attack.inner_steps = parse_size(e);
    } else if (k == "attack.cw_learning_rate") {
      x.attack.cw_learning_rate = parse_double(e);
    } else if (k == "attack.c_min") {
      x.attack.c_min = parse_double(e);
    } else if (k == "attack.c_max") {
      x.attack.c_max = parse_double(e);
    } else if (k == "attack.sigma") {
      x.attack.sigma = parse_double(e);
    } else if (k == "attack.iterations") {
      x.attack.iterations = parse_size(e);
    } else if (k == "attack.seed") {
      x.attack.seed = parse_u64(e);
    } else if (k == "attack.batch_size") {
      x.attack.batch_size = parse_size(e);
    } else if (k == "attack.boundary.orthogonal_step") {
      x.attack.boundary.orthogonal_step = parse_double(e);
    } else if (k == "attack.boundary.source_step") {
      x.attack.boundary.source_step = parse_double(e);
    } else if (k == "attack.boundary.adaptation") {
      x.attack.boundary.adaptation = parse_double(e);
    } else if (k == "attack.boundary.window") {
      x.attack.boundary.window = parse_size(e);
    } else if (k == "attack.boundary.target_low") {
      x.attack.boundary.target_low = parse_double(e);
    } else if (k == "attack.boundary.target_high") {
      x.attack.boundary.target_high = parse_double(e);
    } else if (k == "attack.boundary.init_draws") {
      x.attack.boundary.init_draws = parse_size(e);
    } else if (k == "attack.boundary.init_bisection") {
      x.attack.boundary.init_bisection = parse_size(e);
    } else if (k == "data.dir") {
      x.data.dir = e.value;
    } else if (k == "data.dataset") {
      x.data.dataset = e.value;
    } else if (k == "data.train_subset") {
      x.data.train_subset = parse_size(e);
    } else if (k == "data.test_subset") {
      x.data.test_subset = parse_size(e);
    } else if (k == "eval.whitebox") {
      x.eval.whitebox = parse_bool(e);
    } else if (k == "eval.count_unfooled") {
      x.eval.count_unfooled = parse_bool(e);
    } else if (k == "eval.sigmas") {
      x.eval.sigmas = parse_double_list(e);
    } else if (k == "eval.shuffle_k") {
      x.eval.shuffle_k = parse_size_list(e);
    } else if (k == "eval.probe_seed") {
      x.eval.probe_seed = parse_u64(e);
    } else if (k == "eval.graybox_mode") {
      wrap([&] { x.eval.graybox_mode = parse_graybox_mode(e.value); });
    } else if (k == "eval.target_seed") {
      x.eval.target_seed = parse_u64(e);
    } else {
      throw ConfigError(e.where() + ": unknown key");
    }
  }
  x.model = model_spec_from_config(model_part);
  if (!cfg.find("train.augment.crop")) x.train.augmentation.crop_size = x.model.input_shape[1];
  x.validate();
  return x;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return experiment_from_config(ConfigText::load(path));
}

std::string attack_spec_to_text(const AttackSpec& a, std::string_view prefix) {
  std::ostringstream os;
  os << key(prefix, "family") << " = " << to_string(a.family) << "\n";
  os << key(prefix, "epsilon") << " = " << format_double(a.epsilon) << "\n";
  os << key(prefix, "alpha") << " = " << format_double(a.alpha) << "\n";
  os << key(prefix, "steps") << " = " << a.steps << "\n";
  os << key(prefix, "mu") << " = " << format_double(a.mu) << "\n";
  os << key(prefix, "kappa") << " = " << format_double(a.kappa) << "\n";
  os << key(prefix, "c_search_steps") << " = " << a.c_search_steps << "\n";
  os << key(prefix, "inner_steps") << " = " << a.inner_steps << "\n";
  os << key(prefix, "cw_learning_rate") << " = " << format_double(a.cw_learning_rate) << "\n";
  os << key(prefix, "c_min") << " = " << format_double(a.c_min) << "\n";
  os << key(prefix, "c_max") << " = " << format_double(a.c_max) << "\n";
  os << key(prefix, "sigma") << " = " << format_double(a.sigma) << "\n";
  os << key(prefix, "iterations") << " = " << a.iterations << "\n";
  os << key(prefix, "seed") << " = " << a.seed << "\n";
  os << key(prefix, "batch_size") << " = " << a.batch_size << "\n";
  const BoundaryConfig& b = a.boundary;
  os << key(prefix, "boundary.orthogonal_step") << " = " << format_double(b.orthogonal_step) << "\n";
  os << key(prefix, "boundary.source_step") << " = " << format_double(b.source_step) << "\n";
  os << key(prefix, "boundary.adaptation") << " = " << format_double(b.adaptation) << "\n";
  os << key(prefix, "boundary.window") << " = " << b.window << "\n";
  os << key(prefix, "boundary.target_low") << " = " << format_double(b.target_low) << "\n";
  os << key(prefix, "boundary.target_high") << " = " << format_double(b.target_high) << "\n";
  os << key(prefix, "boundary.init_draws") << " = " << b.init_draws << "\n";
  os << key(prefix, "boundary.init_bisection") << " = " << b.init_bisection << "\n";
  return os.str();
}

std::string experiment_to_text(const ExperimentConfig& x) {
  std::ostringstream os;
  os << model_spec_to_text(x.model);
  const TrainConfig& t = x.train;
  os << "train.lr0 = " << format_double(t.lr0) << "\n";
  os << "train.momentum = " << format_double(t.momentum) << "\n";
  os << "train.weight_decay = " << format_double(t.weight_decay) << "\n";
  os << "train.batch_size = " << t.batch_size << "\n";
  os << "train.epochs = " << t.epochs << "\n";
  os << "train.lr_drops = " << format_list(t.lr_drop_epochs) << "\n";
  os << "train.lr_drop_factor = " << format_double(t.lr_drop_factor) << "\n";
  os << "train.seed = " << t.seed << "\n";
  os << "train.augment = " << (t.augment ? "true" : "false") << "\n";
  os << "train.augment.pad = " << t.augmentation.pad_width << "\n";
  os << "train.augment.crop = " << t.augmentation.crop_size << "\n";
  os << "train.augment.hflip = " << (t.augmentation.hflip ? "true" : "false") << "\n";
  os << "train.eval_batch = " << t.eval_batch << "\n";
  os << attack_spec_to_text(x.attack);
  if (!x.data.dir.empty()) os << "data.dir = " << x.data.dir.string() << "\n";
  os << "data.dataset = " << x.data.dataset << "\n";
  os << "data.train_subset = " << x.data.train_subset << "\n";
  os << "data.test_subset = " << x.data.test_subset << "\n";
  os << "eval.whitebox = " << (x.eval.whitebox ? "true" : "false") << "\n";
  os << "eval.count_unfooled = " << (x.eval.count_unfooled ? "true" : "false") << "\n";
  os << "eval.sigmas = " << format_list(x.eval.sigmas) << "\n";
  os << "eval.shuffle_k = " << format_list(x.eval.shuffle_k) << "\n";
  os << "eval.probe_seed = " << x.eval.probe_seed << "\n";
  os << "eval.graybox_mode = " << to_string(x.eval.graybox_mode) << "\n";
  os << "eval.target_seed = " << x.eval.target_seed << "\n";
  return os.str();
}

}  // namespace defnet

// SPDX-License-Identifier: Apache-2.0
#include "repr/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "repr/errors.hpp"

namespace repr {

namespace fs = std::filesystem;

const std::vector<std::pair<std::string, std::string>>& config_defaults() {
  static const std::vector<std::pair<std::string, std::string>> defaults = {
      {"layers", "3"},
      {"filters", "8"},
      {"kernel", "3"},
      {"batchnorm", "false"},
      {"dropout", "0"},
      {"optimizer", "momentum"},
      {"lr", "0.01"},
      {"momentum", "0.9"},
      {"adam_beta1", "0.9"},
      {"adam_beta2", "0.999"},
      {"adam_epsilon", "1e-8"},
      {"lr_schedule", "fixed"},
      {"lr_milestones", ""},
      {"lr_period", "50"},
      {"lr_amplitude", "0.005"},
      {"s1", "20"},
      {"s2", "10"},
      {"n", "3"},
      {"p_percent", "30"},
      {"metric", "ortho"},
      {"reinit_scale", "0.1"},
      {"reinit_next_layer", "false"},
      {"staged_prune_batches", "1"},
      {"ortho_lambda", "0"},
      {"data_format", "idx"},
      {"train_images", "data/mnist5k-train-images.idx"},
      {"train_labels", "data/mnist5k-train-labels.idx"},
      {"test_images", "data/mnist5k-test-images.idx"},
      {"test_labels", "data/mnist5k-test-labels.idx"},
      {"cifar_train", ""},
      {"cifar_test", ""},
      {"train_size", "0"},
      {"probe_size", "500"},
      {"test_size", "0"},
      {"epochs", "100"},
      {"batch_size", "64"},
      {"augment", "false"},
      {"seed", "1"},
      {"out_dir", "out"},
      {"checkpoint_every", "0"},
      {"resume", ""},
      {"checkpoint", ""},
      {"analyze_log", ""},
      {"correlation", "pearson"},
      {"correlation_pre_activation", "false"},
  };
  return defaults;
}

namespace {

const std::set<std::string> kPathKeys = {"train_images", "train_labels", "test_images", "test_labels",
                                         "cifar_train",  "cifar_test",   "resume",      "checkpoint",
                                         "analyze_log"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string rebase_paths(const std::string& value, const fs::path& base) {
  std::string out;
  for (const auto& p : split_list(value)) {
    fs::path path(p);
    if (path.is_relative()) path = base / path;
    if (!out.empty()) out += ',';
    out += path.lexically_normal().string();
  }
  return out;
}

/// Collects conversion and invariant errors.
class Reader {
public:
  explicit Reader(const std::map<std::string, std::string>& v) : v_(v) {}

  const std::string& str(const std::string& key) { return v_.at(key); }

  std::size_t count(const std::string& key) {
    const auto& s = v_.at(key);
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(key, "expected a non-negative integer");
    return out;
  }

  std::uint64_t u64(const std::string& key) {
    const auto& s = v_.at(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(key, "expected an unsigned integer");
    return out;
  }

  double real(const std::string& key) {
    const auto& s = v_.at(key);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(key, "expected a number");
    return out;
  }

  bool flag(const std::string& key) {
    const auto& s = v_.at(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail(key, "expected true or false");
    return false;
  }

  template <typename F>
  auto choice(const std::string& key, F parse) -> decltype(parse(std::string())) {
    try {
      return parse(v_.at(key));
    } catch (const ConfigError& e) {
      fail(key, e.what());
      return {};
    }
  }

  void require(bool ok, const std::string& key, const std::string& message) {
    if (!ok) fail(key, message);
  }

  void fail(const std::string& key, const std::string& message) {
    errors.push_back(key + "='" + v_.at(key) + "': " + message);
  }

  std::vector<std::string> errors;

private:
  const std::map<std::string, std::string>& v_;
};

std::vector<std::pair<double, double>> parse_milestones(Reader& r, const std::string& text) {
  std::vector<std::pair<double, double>> out;
  for (const auto& item : split_list(text)) {
    const auto colon = item.find(':');
    double e = 0.0, v = 0.0;
    bool ok = colon != std::string::npos;
    if (ok) {
      const auto a = item.substr(0, colon);
      const auto b = item.substr(colon + 1);
      const auto r1 = std::from_chars(a.data(), a.data() + a.size(), e);
      const auto r2 = std::from_chars(b.data(), b.data() + b.size(), v);
      ok = r1.ec == std::errc() && r1.ptr == a.data() + a.size() && r2.ec == std::errc() &&
           r2.ptr == b.data() + b.size();
    }
    if (!ok) {
      r.fail("lr_milestones", "expected comma-separated epoch:lr pairs");
      return {};
    }
    out.emplace_back(e, v);
  }
  return out;
}

} // namespace

RunConfig parse_config(const ConfigSources& sources) {
  std::map<std::string, std::string> values;
  for (const auto& [k, v] : config_defaults()) values[k] = v;
  std::vector<std::string> errors;

  auto apply = [&](const std::string& origin, const std::string& key, const std::string& value) {
    if (!values.count(key)) {
      errors.push_back(origin + ": unknown key '" + key + "'");
      return;
    }
    values[key] = value;
  };

  if (sources.file) {
    std::ifstream in(*sources.file);
    if (!in) throw ConfigError("cannot read config file '" + *sources.file + "'");
    const fs::path base = fs::path(*sources.file).parent_path();
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const std::string origin = *sources.file + ":" + std::to_string(lineno);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        errors.push_back(origin + ": expected key=value");
        continue;
      }
      const std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (kPathKeys.count(key) && !value.empty()) value = rebase_paths(value, base);
      apply(origin, key, value);
    }
  }
  if (sources.env_out_dir && !sources.env_out_dir->empty()) values["out_dir"] = *sources.env_out_dir;
  for (const auto& [k, v] : sources.flags) apply("flag --" + k, k, trim(v));

  RunConfig c;
  c.values = values;
  Reader r(values);
  for (auto& e : errors) r.errors.push_back(std::move(e));

  c.model.layers = r.count("layers");
  c.model.filters = r.count("filters");
  c.model.kernel = r.count("kernel");
  c.model.batch_norm = r.flag("batchnorm");
  c.model.dropout = r.real("dropout");
  r.require(c.model.layers >= 1, "layers", "must be >= 1");
  r.require(c.model.filters >= 1, "filters", "must be >= 1");
  r.require(c.model.kernel >= 1 && c.model.kernel % 2 == 1, "kernel", "must be odd and >= 1");
  r.require(c.model.dropout >= 0.0 && c.model.dropout < 1.0, "dropout", "must lie in [0, 1)");

  c.optimizer = r.choice("optimizer", parse_optimizer_rule);
  c.lr.base = r.real("lr");
  c.hyper.momentum = r.real("momentum");
  c.hyper.beta1 = r.real("adam_beta1");
  c.hyper.beta2 = r.real("adam_beta2");
  c.hyper.epsilon = r.real("adam_epsilon");
  r.require(c.lr.base > 0.0, "lr", "must be positive");
  r.require(c.hyper.momentum >= 0.0 && c.hyper.momentum < 1.0, "momentum", "must lie in [0, 1)");
  r.require(c.hyper.beta1 >= 0.0 && c.hyper.beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  r.require(c.hyper.beta2 >= 0.0 && c.hyper.beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  r.require(c.hyper.epsilon > 0.0, "adam_epsilon", "must be positive");

  c.lr.kind = r.choice("lr_schedule", parse_schedule_kind);
  c.lr.milestones = parse_milestones(r, r.str("lr_milestones"));
  c.lr.period = r.real("lr_period");
  c.lr.amplitude = r.real("lr_amplitude");
  for (const auto& [e, v] : c.lr.milestones) {
    r.require(v > 0.0 && e >= 0.0, "lr_milestones", "epochs must be >= 0 and rates positive");
  }
  r.require(c.lr.period > 0.0, "lr_period", "must be positive");
  r.require(c.lr.amplitude >= 0.0, "lr_amplitude", "must be >= 0");

  c.repr.s1 = r.count("s1");
  c.repr.s2 = r.count("s2");
  c.repr.n = r.count("n");
  c.repr.p_percent = r.real("p_percent");
  c.repr.metric = r.choice("metric", parse_metric);
  c.repr.reinit_scale = r.real("reinit_scale");
  c.repr.reinit_next_layer_kernels = r.flag("reinit_next_layer");
  c.repr.staged_prune_batches = r.count("staged_prune_batches");
  c.repr.ortho_loss_lambda = r.real("ortho_lambda");
  r.require(c.repr.s1 >= 1, "s1", "must be >= 1");
  r.require(c.repr.s2 >= 1, "s2", "must be >= 1");
  r.require(c.repr.p_percent > 0.0 && c.repr.p_percent < 100.0, "p_percent", "must lie in (0, 100)");
  r.require(c.repr.reinit_scale > 0.0, "reinit_scale", "must be positive");
  r.require(c.repr.staged_prune_batches >= 1, "staged_prune_batches", "must be >= 1");
  r.require(c.repr.ortho_loss_lambda >= 0.0, "ortho_lambda", "must be >= 0");

  c.data_format = r.str("data_format");
  r.require(c.data_format == "idx" || c.data_format == "cifar10", "data_format", "expected idx or cifar10");
  c.train_images = r.str("train_images");
  c.train_labels = r.str("train_labels");
  c.test_images = r.str("test_images");
  c.test_labels = r.str("test_labels");
  c.cifar_train = split_list(r.str("cifar_train"));
  c.cifar_test = split_list(r.str("cifar_test"));
  c.train_size = r.count("train_size");
  c.probe_size = r.count("probe_size");
  c.test_size = r.count("test_size");

  c.epochs = r.count("epochs");
  c.batch_size = r.count("batch_size");
  c.augment = r.flag("augment");
  c.seed = r.u64("seed");
  c.out_dir = r.str("out_dir");
  c.checkpoint_every = r.count("checkpoint_every");
  c.resume = r.str("resume");
  c.checkpoint = r.str("checkpoint");
  c.analyze_log = r.str("analyze_log");
  c.correlation = r.choice("correlation", parse_correlation_method);
  c.correlation_pre_activation = r.flag("correlation_pre_activation");
  r.require(c.epochs >= 1, "epochs", "must be >= 1");
  r.require(c.epochs >= c.repr.cycle_epochs(), "epochs",
            "must cover n * (s1 + s2) = " + std::to_string(c.repr.cycle_epochs()) + " epochs");
  r.require(c.batch_size >= 1, "batch_size", "must be >= 1");
  r.require(!c.out_dir.empty(), "out_dir", "must not be empty");

  if (!r.errors.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(r.errors.size()) + " problem" +
                      (r.errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : r.errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

void check_files(const RunConfig& c) {
  std::vector<std::string> missing;
  auto need = [&](const std::string& key, const std::string& path) {
    if (path.empty()) {
      missing.push_back(key + " is not set");
    } else if (!fs::exists(path)) {
      missing.push_back(key + ": '" + path + "' does not exist");
    }
  };
  if (c.data_format == "idx") {
    need("train_images", c.train_images);
    need("train_labels", c.train_labels);
    need("test_images", c.test_images);
    need("test_labels", c.test_labels);
  } else {
    if (c.cifar_train.empty()) missing.push_back("cifar_train is not set");
    if (c.cifar_test.empty()) missing.push_back("cifar_test is not set");
    for (const auto& p : c.cifar_train) need("cifar_train", p);
    for (const auto& p : c.cifar_test) need("cifar_test", p);
  }
  if (!c.resume.empty()) need("resume", c.resume);
  if (!c.checkpoint.empty()) need("checkpoint", c.checkpoint);
  if (!c.analyze_log.empty()) need("analyze_log", c.analyze_log);
  if (!missing.empty()) {
    std::string msg = "missing files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ConfigError(msg);
  }
}

std::string render_config(const RunConfig& config) {
  std::string out;
  for (const auto& [k, unused] : config_defaults()) out += k + "=" + config.values.at(k) + "\n";
  return out;
}

} // namespace repr

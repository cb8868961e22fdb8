// SPDX-License-Identifier: Apache-2.0
#include "repr/checkpoint.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "repr/errors.hpp"

namespace repr {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

class Writer {
public:
  void meta(const std::string& key, const std::string& value) { meta_.emplace_back(key, value); }
  void array(const std::string& name, const Tensor& t) { arrays_.push_back({name, t.shape(), t.values()}); }
  void array(const std::string& name, Shape shape, std::vector<double> data) {
    arrays_.push_back({name, std::move(shape), std::move(data)});
  }

  std::string bytes() const {
    std::string out = "repr-checkpoint " + std::to_string(kCheckpointVersion) + "\n";
    for (const auto& [k, v] : meta_) out += "meta " + k + " " + v + "\n";
    for (const auto& a : arrays_) {
      out += "array " + a.name + " f64 " + std::to_string(a.shape.size());
      for (std::size_t d : a.shape) out += " " + std::to_string(d);
      out += "\n";
    }
    out += "end\n";
    for (const auto& a : arrays_) {
      for (double v : a.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
      }
    }
    return out;
  }

private:
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<NamedArray> arrays_;
};

class Reader {
public:
  Reader(const std::string& bytes, const std::string& path) : path_(path) { parse(bytes); }

  const std::string& meta(const std::string& key) const {
    auto it = meta_.find(key);
    if (it == meta_.end()) throw FormatError(path_ + ": missing meta entry '" + key + "'");
    return it->second;
  }
  const std::vector<std::string>& meta_all(const std::string& key) const {
    static const std::vector<std::string> none;
    auto it = repeated_.find(key);
    return it == repeated_.end() ? none : it->second;
  }
  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(to_double(key, meta(key))); }
  double real(const std::string& key) const { return to_double(key, meta(key)); }

  bool has_array(const std::string& name) const { return arrays_.count(name) > 0; }

  const NamedArray& array(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw FormatError(path_ + ": missing array '" + name + "'");
    return it->second;
  }

  void fill(const std::string& name, Tensor& target) const {
    const NamedArray& a = array(name);
    if (a.shape != target.shape()) {
      throw FormatError(path_ + ": array '" + name + "' has shape " + shape_string(a.shape) + ", expected " +
                        shape_string(target.shape()));
    }
    target = Tensor(a.shape, a.data);
  }

private:
  double to_double(const std::string& key, const std::string& s) const {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw FormatError(path_ + ": meta entry '" + key + "' is not numeric");
    }
    return v;
  }

  void parse(const std::string& bytes) {
    std::size_t pos = 0;
    std::vector<NamedArray> order;
    auto next_line = [&](std::string& line) {
      const auto nl = bytes.find('\n', pos);
      if (nl == std::string::npos) throw FormatError(path_ + ": header not terminated by 'end'");
      line = bytes.substr(pos, nl - pos);
      pos = nl + 1;
    };
    std::string line;
    next_line(line);
    const std::string magic = "repr-checkpoint ";
    if (line.rfind(magic, 0) != 0) throw FormatError(path_ + ": not a checkpoint file");
    if (line.substr(magic.size()) != std::to_string(kCheckpointVersion)) {
      throw FormatError(path_ + ": checkpoint version " + line.substr(magic.size()) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    while (true) {
      next_line(line);
      if (line == "end") break;
      if (line.rfind("meta ", 0) == 0) {
        const auto rest = line.substr(5);
        const auto sp = rest.find(' ');
        if (sp == std::string::npos) throw FormatError(path_ + ": malformed meta line '" + line + "'");
        const auto key = rest.substr(0, sp);
        meta_[key] = rest.substr(sp + 1);
        repeated_[key].push_back(rest.substr(sp + 1));
      } else if (line.rfind("array ", 0) == 0) {
        std::istringstream is(line.substr(6));
        NamedArray a;
        std::string dtype;
        std::size_t rank = 0;
        if (!(is >> a.name >> dtype >> rank) || dtype != "f64") {
          throw FormatError(path_ + ": malformed array line '" + line + "'");
        }
        a.shape.resize(rank);
        for (auto& d : a.shape)
          if (!(is >> d)) throw FormatError(path_ + ": malformed shape for array '" + a.name + "'");
        order.push_back(std::move(a));
      } else {
        throw FormatError(path_ + ": unexpected header line '" + line + "'");
      }
    }
    for (auto& a : order) {
      const std::size_t n = shape_product(a.shape);
      const std::size_t need = n * 8;
      if (bytes.size() - pos < need) {
        throw FormatError(path_ + ": payload too short for array '" + a.name + "': needs " + std::to_string(need) +
                          " bytes at offset " + std::to_string(pos) + ", " + std::to_string(bytes.size() - pos) +
                          " remain");
      }
      a.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
          bits |= std::uint64_t{static_cast<unsigned char>(bytes[pos + i * 8 + static_cast<std::size_t>(b)])}
                  << (8 * b);
        std::memcpy(&a.data[i], &bits, sizeof bits);
      }
      pos += need;
      const std::string name = a.name;
      if (!arrays_.emplace(name, std::move(a)).second) throw FormatError(path_ + ": duplicate array '" + name + "'");
    }
    if (pos != bytes.size()) {
      throw FormatError(path_ + ": " + std::to_string(bytes.size() - pos) +
                        " trailing payload bytes after the last array '" + (order.empty() ? "" : order.back().name) +
                        "'");
    }
  }

  std::string path_;
  std::map<std::string, std::string> meta_;
  std::map<std::string, std::vector<std::string>> repeated_;
  std::map<std::string, NamedArray> arrays_;
};

std::vector<double> filter_pairs(const std::vector<FilterId>& ids) {
  std::vector<double> out;
  for (const auto& id : ids) {
    out.push_back(static_cast<double>(id.layer));
    out.push_back(static_cast<double>(id.filter));
  }
  return out;
}

std::vector<FilterId> read_pairs(const NamedArray& a) {
  std::vector<FilterId> out;
  for (std::size_t i = 0; i + 1 < a.data.size(); i += 2) {
    out.push_back({static_cast<std::size_t>(a.data[i]), static_cast<std::size_t>(a.data[i + 1])});
  }
  return out;
}

} // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const Model& m = ck.model;
  Writer w;
  w.meta("model.in_channels", std::to_string(m.spec.in_channels));
  w.meta("model.height", std::to_string(m.spec.height));
  w.meta("model.width", std::to_string(m.spec.width));
  w.meta("model.num_classes", std::to_string(m.spec.num_classes));
  w.meta("model.layers", std::to_string(m.spec.layers));
  w.meta("model.filters", std::to_string(m.spec.filters));
  w.meta("model.kernel", std::to_string(m.spec.kernel));
  w.meta("model.batch_norm", m.spec.batch_norm ? "1" : "0");
  w.meta("model.dropout", num(m.spec.dropout));
  if (m.spec.batch_norm) {
    w.meta("bn.momentum", num(m.conv_layers.front().bn->momentum));
    w.meta("bn.epsilon", num(m.conv_layers.front().bn->epsilon));
  }
  w.meta("optimizer.rule", to_string(ck.optimizer.rule));
  w.meta("optimizer.lr", num(ck.optimizer.lr));
  w.meta("optimizer.momentum", num(ck.optimizer.hyper.momentum));
  w.meta("optimizer.beta1", num(ck.optimizer.hyper.beta1));
  w.meta("optimizer.beta2", num(ck.optimizer.hyper.beta2));
  w.meta("optimizer.epsilon", num(ck.optimizer.hyper.epsilon));
  const CycleState& c = ck.cycle;
  w.meta("cycle.phase", to_string(c.phase));
  w.meta("cycle.iteration", std::to_string(c.iteration));
  w.meta("cycle.epoch_in_phase", std::to_string(c.epoch_in_phase));
  w.meta("cycle.next_epoch", std::to_string(c.next_epoch));
  std::string sizes;
  for (std::size_t i = 0; i < c.pending_chunks.size(); ++i)
    sizes += (i ? "," : "") + std::to_string(c.pending_chunks[i].size());
  w.meta("cycle.pending_sizes", sizes.empty() ? "-" : sizes);
  for (const auto& e : c.events) {
    w.meta("event", std::to_string(e.epoch) + "|" + e.kind + "|" + std::to_string(e.iteration) + "|" + e.detail);
  }

  const auto names = parameter_names(m);
  const auto params = parameters(m);
  for (std::size_t p = 0; p < params.size(); ++p) w.array(names[p], *params[p]);
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    if (!m.conv_layers[l].bn) continue;
    w.array("conv" + std::to_string(l) + ".bn.running_mean", m.conv_layers[l].bn->running_mean);
    w.array("conv" + std::to_string(l) + ".bn.running_var", m.conv_layers[l].bn->running_var);
  }
  if (ck.optimizer.slots.size() != params.size()) throw ConfigError("optimizer state does not match the model");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const ParamSlot& s = ck.optimizer.slots[p];
    if (!s.first.empty()) w.array("opt." + names[p] + ".first", s.first);
    if (!s.second.empty()) w.array("opt." + names[p] + ".second", s.second);
    if (!s.steps.empty()) w.array("opt." + names[p] + ".steps", s.steps);
  }
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    std::vector<double> bits;
    for (std::size_t j = 0; j < c.mask.filters(l); ++j) bits.push_back(c.mask.is_live(l, j) ? 1.0 : 0.0);
    w.array("mask.conv" + std::to_string(l), {bits.size()}, bits);
  }
  w.array("cycle.dropped", {c.dropped.size(), 2}, filter_pairs(c.dropped));
  std::vector<FilterId> pending;
  for (const auto& chunk : c.pending_chunks) pending.insert(pending.end(), chunk.begin(), chunk.end());
  w.array("cycle.pending", {pending.size(), 2}, filter_pairs(pending));

  const std::string bytes = w.bytes();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing checkpoint '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const Reader r(bytes, path);

  ModelSpec spec;
  spec.in_channels = r.count("model.in_channels");
  spec.height = r.count("model.height");
  spec.width = r.count("model.width");
  spec.num_classes = r.count("model.num_classes");
  spec.layers = r.count("model.layers");
  spec.filters = r.count("model.filters");
  spec.kernel = r.count("model.kernel");
  spec.batch_norm = r.count("model.batch_norm") != 0;
  spec.dropout = r.real("model.dropout");

  Checkpoint ck;
  ck.model = Model::create(spec, 0);
  Model& m = ck.model;
  const auto names = parameter_names(m);
  auto params = parameters(m);
  for (std::size_t p = 0; p < params.size(); ++p) r.fill(names[p], *params[p]);
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    auto& bn = m.conv_layers[l].bn;
    if (!bn) continue;
    bn->momentum = r.real("bn.momentum");
    bn->epsilon = r.real("bn.epsilon");
    r.fill("conv" + std::to_string(l) + ".bn.running_mean", bn->running_mean);
    r.fill("conv" + std::to_string(l) + ".bn.running_var", bn->running_var);
  }

  OptimizerHyper hyper;
  hyper.momentum = r.real("optimizer.momentum");
  hyper.beta1 = r.real("optimizer.beta1");
  hyper.beta2 = r.real("optimizer.beta2");
  hyper.epsilon = r.real("optimizer.epsilon");
  try {
    ck.optimizer = OptimizerState::create(parse_optimizer_rule(r.meta("optimizer.rule")), r.real("optimizer.lr"),
                                          hyper, m);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamSlot& s = ck.optimizer.slots[p];
    if (!s.first.empty()) r.fill("opt." + names[p] + ".first", s.first);
    if (!s.second.empty()) r.fill("opt." + names[p] + ".second", s.second);
    if (!s.steps.empty()) r.fill("opt." + names[p] + ".steps", s.steps);
  }

  CycleState& c = ck.cycle;
  try {
    c.phase = parse_phase(r.meta("cycle.phase"));
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }
  c.iteration = r.count("cycle.iteration");
  c.epoch_in_phase = r.count("cycle.epoch_in_phase");
  c.next_epoch = r.count("cycle.next_epoch");
  c.mask = PruneMask::all_live(m);
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    const NamedArray& a = r.array("mask.conv" + std::to_string(l));
    if (a.data.size() != m.conv_layers[l].filters()) {
      throw FormatError(path + ": array 'mask.conv" + std::to_string(l) + "' has the wrong length");
    }
    for (std::size_t j = 0; j < a.data.size(); ++j)
      if (a.data[j] == 0.0) c.mask.set({l, j}, false);
  }
  c.dropped = read_pairs(r.array("cycle.dropped"));
  const auto pending = read_pairs(r.array("cycle.pending"));
  const std::string& sizes = r.meta("cycle.pending_sizes");
  std::size_t used = 0;
  if (sizes != "-") {
    std::stringstream ss(sizes);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const std::size_t k = static_cast<std::size_t>(std::stoul(item));
      if (used + k > pending.size()) throw FormatError(path + ": pending chunk sizes exceed array 'cycle.pending'");
      c.pending_chunks.emplace_back(pending.begin() + static_cast<std::ptrdiff_t>(used),
                                    pending.begin() + static_cast<std::ptrdiff_t>(used + k));
      used += k;
    }
  }
  if (used != pending.size()) throw FormatError(path + ": pending chunk sizes disagree with array 'cycle.pending'");
  for (const auto& line : r.meta_all("event")) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (int i = 0; i < 3; ++i) {
      const auto bar = line.find('|', start);
      if (bar == std::string::npos) throw FormatError(path + ": malformed event '" + line + "'");
      parts.push_back(line.substr(start, bar - start));
      start = bar + 1;
    }
    parts.push_back(line.substr(start));
    c.events.push_back({static_cast<std::size_t>(std::stoul(parts[0])), parts[1],
                        static_cast<std::size_t>(std::stoul(parts[2])), parts[3]});
  }
  try {
    c.mask.validate(m);
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return ck;
}

} // namespace repr

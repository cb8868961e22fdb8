// SPDX-License-Identifier: Apache-2.0
#include "repr/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "repr/analysis.hpp"
#include "repr/checkpoint.hpp"
#include "repr/errors.hpp"

namespace repr {

namespace fs = std::filesystem;

std::unique_ptr<PreparedData> prepare_data(const RunConfig& c) {
  check_files(c);
  Dataset train_file, test_file;
  if (c.data_format == "idx") {
    train_file = load_idx(c.train_images, c.train_labels);
    test_file = load_idx(c.test_images, c.test_labels);
  } else {
    train_file = load_cifar10_binary(c.cifar_train);
    test_file = load_cifar10_binary(c.cifar_test);
  }
  const std::size_t n = train_file.size();
  if (c.probe_size >= n) {
    throw ConfigError("probe_size " + std::to_string(c.probe_size) + " leaves no training examples out of " +
                      std::to_string(n));
  }
  const std::size_t rest = n - c.probe_size;
  const std::size_t train_count = c.train_size == 0 ? rest : c.train_size;
  if (train_count > rest) {
    throw ConfigError("train_size " + std::to_string(c.train_size) + " exceeds the " + std::to_string(rest) +
                      " examples left after the probe split");
  }
  const std::size_t test_count = c.test_size == 0 ? test_file.size() : c.test_size;
  if (test_count > test_file.size() || test_count == 0) {
    throw ConfigError("test_size " + std::to_string(c.test_size) + " does not fit the " +
                      std::to_string(test_file.size()) + "-example test file");
  }

  std::vector<std::size_t> train(train_count), probe(c.probe_size), test(test_count);
  std::iota(train.begin(), train.end(), 0);
  std::iota(probe.begin(), probe.end(), rest);
  std::iota(test.begin(), test.end(), 0);
  train_file.add_split("train", train);
  train_file.add_split("probe", probe);
  test_file.add_split("test", test);

  auto out = std::make_unique<PreparedData>();
  out->dataset = concatenate(train_file, test_file);
  out->dataset.validate();
  out->run.dataset = &out->dataset;
  out->run.test = out->dataset.materialize("test");
  Subset p = out->dataset.materialize("probe");
  out->run.probe.inputs = std::move(p.images);
  out->run.probe.labels = std::move(p.labels);
  return out;
}

ModelSpec model_spec(const RunConfig& c, const Dataset& ds) {
  ModelSpec spec = c.model;
  spec.in_channels = ds.channels();
  spec.height = ds.height();
  spec.width = ds.width();
  spec.num_classes = ds.num_classes;
  return spec;
}

Model initial_model(const RunConfig& c, const Dataset& ds) { return Model::create(model_spec(c, ds), c.seed); }

OptimizerState initial_optimizer(const RunConfig& c, const Model& model) {
  return OptimizerState::create(c.optimizer, c.lr.base, c.hyper, model);
}

TrainOptions train_options(const RunConfig& c) {
  TrainOptions o;
  o.epochs = c.epochs;
  o.batch_size = c.batch_size;
  o.seed = c.seed;
  o.augment = c.augment;
  o.lr = c.lr;
  return o;
}

RunConfig standard_arm(const RunConfig& c) {
  RunConfig s = c;
  s.repr.n = 0;
  s.values["n"] = "0";
  return s;
}

RunSummary summarize(const MetricsLog& log) {
  RunSummary s;
  if (log.rows.empty()) return s;
  s.final_test_acc = log.rows.back().test_acc;
  s.final_train_acc = log.rows.back().train_acc;
  s.final_ortho_sum = log.rows.back().ortho_sum;
  for (const auto& r : log.rows) s.best_test_acc = std::max(s.best_test_acc, r.test_acc);
  s.gap_tail_mean = generalization_gap(log.rows).tail_mean;
  return s;
}

std::vector<EpochRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open metrics file '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,phase,iteration,", 0) != 0) throw FormatError("'" + path + "' is not a metrics CSV");
  std::vector<EpochRecord> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 9) throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": expected 9 fields");
    try {
      EpochRecord r;
      r.epoch = std::stoul(f[0]);
      r.phase = parse_phase(f[1]);
      r.iteration = std::stoul(f[2]);
      r.train_acc = std::stod(f[3]);
      r.test_acc = std::stod(f[4]);
      r.train_loss = std::stod(f[5]);
      r.ortho_sum = std::stod(f[6]);
      r.live_filters = std::stoul(f[7]);
      r.lr = std::stod(f[8]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": malformed value");
    }
  }
  return rows;
}

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

/// Trains one arm into `dir`: metrics.csv (written as epochs finish),
/// events.csv, final.ckpt and periodic checkpoints.
MetricsLog run_arm(const RunConfig& c, const PreparedData& data, const fs::path& dir, std::ostream& out,
                   const std::string& label) {
  fs::create_directories(dir);
  write_text(dir / "config.resolved", render_config(c));

  std::unique_ptr<ReprTrainer> trainer;
  std::vector<std::string> kept_rows;
  if (!c.resume.empty()) {
    Checkpoint ck = load_checkpoint(c.resume);
    if (!(ck.model.spec == model_spec(c, data.dataset))) {
      throw ConfigError("checkpoint '" + c.resume + "' holds a different model architecture than the configuration");
    }
    const std::size_t done = ck.cycle.next_epoch;
    std::ifstream prev(dir / "metrics.csv");
    std::string line;
    if (prev && std::getline(prev, line)) {
      while (std::getline(prev, line)) {
        if (!line.empty() && std::stoul(line.substr(0, line.find(','))) <= done) kept_rows.push_back(line);
      }
    }
    trainer = std::make_unique<ReprTrainer>(std::move(ck.model), std::move(ck.optimizer), c.repr, train_options(c),
                                            std::move(ck.cycle));
    out << label << "resuming after epoch " << done << " from " << c.resume << "\n";
  } else {
    Model model = initial_model(c, data.dataset);
    OptimizerState opt = initial_optimizer(c, model);
    trainer = std::make_unique<ReprTrainer>(std::move(model), std::move(opt), c.repr, train_options(c));
  }

  std::ofstream csv(dir / "metrics.csv");
  if (!csv) throw FormatError("cannot write '" + (dir / "metrics.csv").string() + "'");
  write_metrics_csv(csv, {}, true);
  for (const auto& l : kept_rows) csv << l << '\n';
  csv.flush();

  auto hook = [&](const EpochRecord& row, const ReprTrainer& t) {
    csv << format_metrics_row(row) << '\n';
    csv.flush();
    out << label << "epoch " << row.epoch << "/" << c.epochs << " " << to_string(row.phase) << " it "
        << row.iteration << "  train " << fixed(row.train_acc) << "%  test " << fixed(row.test_acc) << "%  loss "
        << fixed(row.train_loss, 4) << "  ortho " << fixed(row.ortho_sum, 4) << "  live " << row.live_filters
        << "\n";
    if (c.checkpoint_every > 0 && row.epoch % c.checkpoint_every == 0) {
      save_checkpoint({t.model(), t.optimizer(), t.cycle()},
                      (dir / ("checkpoint-" + std::to_string(row.epoch) + ".ckpt")).string());
    }
  };
  MetricsLog log = trainer->run(data.run, hook);
  save_checkpoint({trainer->model(), trainer->optimizer(), trainer->cycle()}, (dir / "final.ckpt").string());
  std::ofstream ev(dir / "events.csv");
  write_events_csv(ev, log.events);
  return log;
}

nlohmann::json summary_json(const RunSummary& s) {
  return {{"final_test_acc", s.final_test_acc},
          {"best_test_acc", s.best_test_acc},
          {"final_train_acc", s.final_train_acc},
          {"gap_last5", s.gap_tail_mean},
          {"final_ortho_sum", s.final_ortho_sum}};
}

struct Inspected {
  Model model;
  PruneMask mask;
};

Inspected inspect_target(const RunConfig& c, const PreparedData& data) {
  if (c.checkpoint.empty()) {
    Model m = initial_model(c, data.dataset);
    PruneMask mask = PruneMask::all_live(m);
    return {std::move(m), std::move(mask)};
  }
  Checkpoint ck = load_checkpoint(c.checkpoint);
  const ModelSpec expect = model_spec(c, data.dataset);
  if (ck.model.spec.in_channels != expect.in_channels || ck.model.spec.height != expect.height ||
      ck.model.spec.width != expect.width || ck.model.spec.num_classes != expect.num_classes) {
    throw ConfigError("checkpoint '" + c.checkpoint + "' does not match the configured data geometry");
  }
  return {std::move(ck.model), std::move(ck.cycle.mask)};
}

} // namespace

int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto data = prepare_data(c);
  const MetricsLog log = run_arm(c, *data, c.out_dir, out, "");
  const RunSummary s = summarize(log);
  write_text(fs::path(c.out_dir) / "summary.json", summary_json(s).dump(2) + "\n");
  out << "final test " << fixed(s.final_test_acc) << "%  best " << fixed(s.best_test_acc) << "%  gap(last 5) "
      << fixed(s.gap_tail_mean) << "  ortho_sum " << fixed(s.final_ortho_sum, 4) << "\n";
  return 0;
}

int cmd_compare(const RunConfig& c, std::ostream& out) {
  if (!c.resume.empty()) throw ConfigError("compare does not support resume");
  const auto data = prepare_data(c);
  const fs::path root(c.out_dir);
  const RunConfig standard = standard_arm(c);
  const MetricsLog a = run_arm(standard, *data, root / "standard", out, "[standard] ");
  const MetricsLog b = run_arm(c, *data, root / "repr", out, "[repr] ");

  std::ofstream joint(root / "compare.csv");
  joint << "arm,epoch,phase,iteration,train_acc,test_acc,train_loss,ortho_sum,live_filters,lr\n";
  for (const auto& r : a.rows) joint << "standard," << format_metrics_row(r) << '\n';
  for (const auto& r : b.rows) joint << "repr," << format_metrics_row(r) << '\n';

  const RunSummary sa = summarize(a), sb = summarize(b);
  nlohmann::json j{{"standard", summary_json(sa)}, {"repr", summary_json(sb)}, {"seed", c.seed}};
  write_text(root / "summary.json", j.dump(2) + "\n");
  out << "arm        final_test  best_test  gap_last5  ortho_sum\n";
  for (const auto& [name, s] : {std::pair{"standard", sa}, std::pair{"repr", sb}}) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %10.2f %10.2f %10.2f %10.4f\n", name, s.final_test_acc, s.best_test_acc,
                  s.gap_tail_mean, s.final_ortho_sum);
    out << buf;
  }
  return 0;
}

int cmd_oracle(const RunConfig& c, std::ostream& out) {
  const auto data = prepare_data(c);
  const Inspected t = inspect_target(c, *data);
  const auto scores = oracle_scores(t.model, t.mask, data->run.probe);
  fs::create_directories(c.out_dir);
  std::ofstream csv(fs::path(c.out_dir) / "oracle_scores.csv");
  write_scores_csv(csv, scores);
  const EvalResult base = evaluate(t.model, t.mask, data->run.probe.inputs, data->run.probe.labels);
  double mx = 0.0;
  for (const auto& s : scores) mx = std::max(mx, s.value);
  out << "probe accuracy " << fixed(base.accuracy) << "% over " << base.count << " examples; " << scores.size()
      << " filters scored, largest drop " << fixed(mx) << " points\n";
  out << "wrote " << (fs::path(c.out_dir) / "oracle_scores.csv").string() << "\n";
  return 0;
}

int cmd_analyze(const RunConfig& c, std::ostream& out) {
  const auto data = prepare_data(c);
  const Inspected t = inspect_target(c, *data);
  const fs::path dir(c.out_dir);
  fs::create_directories(dir);

  CorrelationOptions co;
  co.method = c.correlation;
  co.pre_activation = c.correlation_pre_activation;
  const CorrelationReport rep = activation_correlation(t.model, t.mask, data->run.probe, co);
  const std::string corr_name = "correlation_" + to_string(co.method) + ".csv";
  {
    std::ofstream csv(dir / corr_name);
    write_correlation_csv(csv, rep);
  }
  double above = 0.0, pairs = 0.0;
  for (std::size_t s = 0; s < rep.layer_starts.size(); ++s) {
    const std::size_t b = rep.layer_starts[s];
    const std::size_t e = s + 1 < rep.layer_starts.size() ? rep.layer_starts[s + 1] : rep.filters.size();
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t j = i + 1; j < e; ++j) {
        pairs += 1.0;
        if (std::abs(rep.matrix.at(i, j)) > 0.3) above += 1.0;
      }
  }
  out << "activation correlation (" << to_string(co.method) << "): " << fixed(pairs > 0 ? 100.0 * above / pairs : 0.0)
      << "% of within-layer pairs above 0.3 in magnitude\n";

  MetricInputs in;
  in.probe = &data->run.probe;
  in.seed = c.seed;
  const auto oracle = oracle_scores(t.model, t.mask, data->run.probe);
  std::ofstream agreement(dir / "agreement.csv");
  agreement << "metric,pearson_vs_oracle,spearman_vs_oracle,filters\n";
  for (Metric m : all_metrics()) {
    const auto scores = m == Metric::Oracle ? oracle : metric_scores(t.model, t.mask, m, in);
    {
      std::ofstream csv(dir / ("scores_" + to_string(m) + ".csv"));
      write_scores_csv(csv, scores);
    }
    const Agreement a = metric_agreement(scores, oracle);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%zu\n", to_string(m).c_str(), a.pearson, a.spearman, a.count);
    agreement << buf;
    out << "  " << to_string(m) << " vs oracle: pearson " << fixed(a.pearson, 3) << "  spearman "
        << fixed(a.spearman, 3) << "\n";
  }

  if (!c.analyze_log.empty()) {
    const auto rows = read_metrics_csv(c.analyze_log);
    const GapReport gap = generalization_gap(rows);
    std::ofstream csv(dir / "gap.csv");
    csv << "epoch,gap\n";
    for (std::size_t i = 0; i < rows.size(); ++i) csv << rows[i].epoch << ',' << gap.per_epoch[i] << '\n';
    out << "generalization gap, mean of last 5 epochs: " << fixed(gap.tail_mean) << " points\n";
  }
  return 0;
}

} // namespace repr

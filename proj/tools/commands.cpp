#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include "defnet/checkpoint.hpp"
#include "defnet/config.hpp"
#include "defnet/eval.hpp"
#include "defnet/trainer.hpp"

namespace defnet::cli {

namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const CommonArgs& a) {
  ConfigText text = a.config.empty() ? ConfigText{} : ConfigText::load(a.config);
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    text.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  ExperimentConfig cfg = experiment_from_config(text);
  if (a.seed) cfg.apply_seed(*a.seed);
  cfg.validate();
  return cfg;
}

DatasetPair load_data(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.data.dataset_dir();
  DatasetPair d = cfg.data.dataset == "cifar10" ? load_cifar10(dir) : load_mnist(dir);
  if (d.train.image_shape() != cfg.model.input_shape || d.train.num_classes != cfg.model.num_classes) {
    throw DimensionError("model.input_shape / model.num_classes do not match the " +
                         cfg.data.dataset + " data");
  }
  return d;
}

struct Subset {
  Dataset data;
  std::vector<std::size_t> ids;  // indices into the full test split
};

Subset test_subset(const CommonArgs& a, const ExperimentConfig& cfg, const Dataset& test) {
  const std::size_t n = a.subset.value_or(cfg.data.test_subset);
  Subset s;
  if (n == 0 || n >= test.size()) {
    s.data = test;
    s.ids.resize(test.size());
    for (std::size_t i = 0; i < s.ids.size(); ++i) s.ids[i] = i;
  } else {
    s.ids = stratified_indices(test, n);
    s.data = select(test, s.ids);
  }
  return s;
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(DataError::Kind::kIo, dir.string(), 0, ec.message());
}

struct Loaded {
  Model model;
  std::string tag;
};

Loaded load_model(const fs::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  return {restore_model(ckpt), spec_tag(ckpt.spec)};
}

// Owns the source models and exposes them (or their fusion) as one classifier.
struct Source {
  std::vector<std::unique_ptr<Loaded>> members;
  std::unique_ptr<Ensemble> ensemble;
  std::string tag;

  const Classifier& classifier() const {
    if (ensemble) return *ensemble;
    return members.front()->model;
  }
};

Source load_source(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ConfigError("--source is required");
  Source s;
  std::vector<const Classifier*> ptrs;
  for (const fs::path& p : paths) {
    s.members.push_back(std::make_unique<Loaded>(load_model(p)));
    ptrs.push_back(&s.members.back()->model);
  }
  if (paths.size() == 1) {
    s.tag = s.members.front()->tag;
  } else {
    s.ensemble = std::make_unique<Ensemble>(fuse_ensemble(ptrs));
    s.tag = "ensemble(" + std::to_string(paths.size()) + ")";
  }
  return s;
}

void check_shape(const Classifier& m, const Dataset& ds) {
  if (m.input_shape() != ds.image_shape() || m.num_classes() != ds.num_classes) {
    throw DimensionError("checkpoint does not match the dataset's image shape or classes");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError(DataError::Kind::kIo, path.string(), 0, "write failed");
}

}  // namespace

int run_train(const CommonArgs& a) {
  ExperimentConfig cfg = load_config(a);
  if (a.subset) cfg.data.train_subset = *a.subset;
  cfg.train.threads = a.threads;
  ensure_dir(a.out);
  DatasetPair d = load_data(cfg);
  const Dataset train_set =
      cfg.data.train_subset ? stratified_subset(d.train, cfg.data.train_subset) : d.train;
  const Dataset test_set =
      cfg.data.test_subset ? stratified_subset(d.test, cfg.data.test_subset) : d.test;

  Model model = build_model(cfg.model);
  std::cerr << "train " << spec_tag(cfg.model) << " on " << train_set.size() << " samples, "
            << model.parameter_count() << " parameters\n";
  const TrainResult r = train(model, train_set, &test_set, cfg.train, [](const CurveRecord& c) {
    std::fprintf(stderr, "epoch %zu lr %.4g loss %.4f train %.2f%% test %.2f%%\n", c.epoch, c.lr,
                 c.train_loss, c.train_accuracy, c.test_accuracy);
  });

  TrainingMetadata meta;
  meta.epochs = cfg.train.epochs;
  meta.seed = cfg.train.seed;
  meta.train_accuracy = r.curve.empty() ? -1.0 : r.curve.back().train_accuracy;
  meta.test_accuracy = r.curve.empty() ? accuracy(model, test_set) : r.final_test_accuracy;
  save_checkpoint(make_checkpoint(model, meta), a.out / "model.dfnt");

  std::string curve = "epoch,lr,train_loss,train_accuracy,test_accuracy\n";
  char buf[160];
  for (const CurveRecord& c : r.curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6f,%.4f,%.4f\n", c.epoch, c.lr, c.train_loss,
                  c.train_accuracy, c.test_accuracy);
    curve += buf;
  }
  write_text(a.out / "curve.csv", curve);
  write_text(a.out / "experiment.cfg", experiment_to_text(cfg));
  std::printf("test accuracy %.2f%%\n", meta.test_accuracy);
  return 0;
}

int run_attack(const CommonArgs& a, const ModelArgs& m) {
  const ExperimentConfig cfg = load_config(a);
  ensure_dir(a.out);
  const DatasetPair d = load_data(cfg);
  const Source src = load_source(m.sources);
  const Subset sub = test_subset(a, cfg, d.test);
  check_shape(src.classifier(), sub.data);
  const auto res = defnet::run_attack(src.classifier(), sub.data.images, sub.data.labels, cfg.attack,
                                      a.threads, sub.ids);
  write_adv_results(a.out, res, sub.data.labels, sub.ids);
  std::size_t fooled = 0;
  for (const AdvResult& r : res) fooled += r.success;
  std::printf("%s on %s: %zu/%zu fool the source\n", cfg.attack.describe().c_str(), src.tag.c_str(),
              fooled, res.size());
  return 0;
}

int run_eval_transfer(const CommonArgs& a, const ModelArgs& m) {
  const ExperimentConfig cfg = load_config(a);
  ensure_dir(a.out);
  const DatasetPair d = load_data(cfg);
  const Source src = load_source(m.sources);
  if (m.target.empty()) throw ConfigError("--target is required");
  const bool same_file = m.sources.size() == 1 && fs::equivalent(m.sources.front(), m.target);
  std::unique_ptr<Loaded> tgt;
  if (!same_file) tgt = std::make_unique<Loaded>(load_model(m.target));
  const Classifier& target = same_file ? src.classifier() : tgt->model;
  const Subset sub = test_subset(a, cfg, d.test);
  check_shape(src.classifier(), sub.data);
  check_shape(target, sub.data);

  EvalOptions opt;
  opt.whitebox = cfg.eval.whitebox || same_file;
  opt.count_unfooled = cfg.eval.count_unfooled;
  opt.threads = a.threads;
  EvalReport report;
  if (!m.adv_dir.empty()) {
    const AdvBatch adv = read_adv_results(m.adv_dir);
    if (adv.sample_ids != sub.ids) {
      throw DataError(DataError::Kind::kMalformed, m.adv_dir.string(), 0,
                      "adversarial sample ids do not match the evaluation subset");
    }
    report = score_transfer(src.classifier(), target, sub.data, adv.results, opt, sub.ids);
    report.attack = cfg.attack;
  } else {
    report = transfer_eval(src.classifier(), target, sub.data, cfg.attack, opt);
  }
  report.source = src.tag;
  report.target = same_file ? src.tag : tgt->tag;
  const std::vector<EvalReport> reports{report};
  write_report(reports, a.out);
  write_records(report, a.out / "records.csv");
  std::fputs(report_table(reports).c_str(), stdout);
  return 0;
}

int run_eval_graybox(const CommonArgs& a) {
  ExperimentConfig cfg = load_config(a);
  cfg.train.threads = a.threads;
  ensure_dir(a.out);
  const DatasetPair d = load_data(cfg);
  const Dataset train_set =
      cfg.data.train_subset ? stratified_subset(d.train, cfg.data.train_subset) : d.train;
  const Subset sub = test_subset(a, cfg, d.test);
  EvalOptions opt;
  opt.count_unfooled = cfg.eval.count_unfooled;
  opt.threads = a.threads;
  const EvalReport report =
      graybox_eval(cfg.model, cfg.eval.graybox_mode, cfg.model.master_seed, cfg.eval.target_seed,
                   train_set, sub.data, cfg.train, cfg.attack, opt);
  const std::vector<EvalReport> reports{report};
  write_report(reports, a.out);
  write_records(report, a.out / "records.csv");
  std::fputs(report_table(reports).c_str(), stdout);
  return 0;
}

int run_eval_corruption(const CommonArgs& a, const ModelArgs& m) {
  const ExperimentConfig cfg = load_config(a);
  ensure_dir(a.out);
  const DatasetPair d = load_data(cfg);
  if (m.target.empty()) throw ConfigError("--target is required");
  const Loaded target = load_model(m.target);
  std::vector<std::unique_ptr<Loaded>> others;
  std::vector<const Classifier*> cmp;
  for (const fs::path& p : m.compare) {
    others.push_back(std::make_unique<Loaded>(load_model(p)));
    cmp.push_back(&others.back()->model);
  }
  const Subset sub = test_subset(a, cfg, d.test);
  check_shape(target.model, sub.data);
  std::vector<CorruptionRow> rows =
      corruption_eval(target.model, sub.data, ProbeKind::kGaussian, cfg.eval.sigmas,
                      cfg.eval.probe_seed, cmp, a.threads);
  const std::vector<double> ks(cfg.eval.shuffle_k.begin(), cfg.eval.shuffle_k.end());
  const auto shuffled = corruption_eval(target.model, sub.data, ProbeKind::kShuffle, ks,
                                        cfg.eval.probe_seed, cmp, a.threads);
  rows.insert(rows.end(), shuffled.begin(), shuffled.end());
  write_corruption(rows, target.tag, a.out / "corruption.csv");
  for (const CorruptionRow& r : rows) {
    std::printf("%-8s %6g  %5zu/%-5zu %7.2f%%\n", to_string(r.probe), r.setting, r.correct,
                r.eligible, r.accuracy());
  }
  return 0;
}

int run_report(const CommonArgs& a, const std::vector<fs::path>& inputs) {
  if (inputs.empty()) throw ConfigError("report needs at least one input report");
  ensure_dir(a.out);
  std::vector<EvalReport> all;
  for (const fs::path& in : inputs) {
    const fs::path csv = fs::is_directory(in) ? in / "report.csv" : in;
    const auto part = read_report_csv(csv);
    all.insert(all.end(), part.begin(), part.end());
  }
  write_report(all, a.out);
  std::fputs(report_table(all).c_str(), stdout);
  return 0;
}

}  // namespace defnet::cli

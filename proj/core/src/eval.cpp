#include "defnet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "defnet/parallel.hpp"

namespace defnet {

bool is_eligible(const EvalRecord& r, const EvalOptions& opt) {
  if (!r.target_correct()) return false;
  if (opt.whitebox) return true;
  return r.source_correct() && (opt.count_unfooled || r.source_fooled());
}

bool is_defended(const EvalRecord& r, const EvalOptions& opt) {
  if (!is_eligible(r, opt)) return false;
  if (!opt.whitebox && opt.count_unfooled && !r.source_fooled()) return true;
  return r.target_adv == r.label;
}

double EvalReport::rate() const {
  if (eligible == 0) {
    throw EmptyReportError("no eligible samples for " + protocol + " " + attack.describe());
  }
  return 100.0 * static_cast<double>(defended) / static_cast<double>(eligible);
}

EvalReport aggregate(EvalReport report, const EvalOptions& opt) {
  report.total = report.records.size();
  report.eligible = report.defended = 0;
  std::size_t clean = 0;
  for (const EvalRecord& r : report.records) {
    clean += r.target_correct();
    report.eligible += is_eligible(r, opt);
    report.defended += is_defended(r, opt);
  }
  report.clean_accuracy =
      report.total ? 100.0 * static_cast<double>(clean) / static_cast<double>(report.total) : 0.0;
  return report;
}

EvalReport score_transfer(const Classifier& source, const Classifier& target,
                          const Dataset& subset, std::span<const AdvResult> adversarial,
                          const EvalOptions& opt, std::span<const std::size_t> sample_ids) {
  const std::size_t n = subset.size();
  if (n == 0) throw ConfigError("evaluation subset is empty");
  if (adversarial.size() != n) throw DimensionError("one adversarial image per sample expected");
  if (!sample_ids.empty() && sample_ids.size() != n) throw DimensionError("sample id count mismatch");
  std::vector<Tensor> imgs;
  imgs.reserve(n);
  for (const AdvResult& a : adversarial) imgs.push_back(a.image);
  const Tensor adv = stack(imgs);
  const std::vector<int> sc = predict_labels(source, subset.images);
  const std::vector<int> tc = predict_labels(target, subset.images);
  const std::vector<int> sa = predict_labels(source, adv);
  const std::vector<int> ta = predict_labels(target, adv);
  EvalReport report;
  report.protocol = opt.whitebox ? "whitebox" : "transfer";
  for (std::size_t i = 0; i < n; ++i) {
    report.records.push_back({sample_ids.empty() ? i : sample_ids[i], subset.labels[i], sc[i],
                              tc[i], sa[i], ta[i]});
  }
  report = aggregate(std::move(report), opt);
  if (report.eligible == 0) {
    throw EmptyReportError("no eligible samples: the target misclassifies every clean image or "
                           "no adversarial image fools the source");
  }
  return report;
}

EvalReport transfer_eval(const Classifier& source, const Classifier& target,
                         const Dataset& subset, const AttackSpec& attack, const EvalOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  if (subset.size() == 0) throw ConfigError("evaluation subset is empty");
  const std::vector<AdvResult> adv =
      run_attack(source, subset.images, subset.labels, attack, opt.threads);
  EvalReport report = score_transfer(source, target, subset, adv, opt);
  report.attack = attack;
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

GrayboxPair graybox_specs(const ModelSpec& family, GrayboxMode mode, std::uint64_t source_seed,
                          std::uint64_t target_seed) {
  if (source_seed == target_seed) {
    throw ConfigError("graybox source and target seeds are equal: that is a white-box setting");
  }
  GrayboxPair p{family, family};
  if (mode == GrayboxMode::kReinit) {
    const std::uint64_t shared = family.effective_mask_seed();
    p.source.master_seed = source_seed;
    p.target.master_seed = target_seed;
    p.source.mask_seed = p.target.mask_seed = shared;
  } else {
    if (family.mask_blocks.empty() || family.keep_prob >= 1.0) {
      throw ConfigError("remask needs a defective spec (placed blocks and keep_prob < 1)");
    }
    p.source.mask_seed = source_seed;
    p.target.mask_seed = target_seed;
  }
  return p;
}

std::size_t mask_bit_difference(const Model& a, const Model& b) {
  const auto ma = a.masks();
  const auto mb = b.masks();
  if (ma.size() != mb.size()) throw DimensionError("models have different mask layouts");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const auto xa = ma[i].second->bits().data<std::uint8_t>();
    const auto xb = mb[i].second->bits().data<std::uint8_t>();
    if (xa.size() != xb.size()) throw DimensionError("mask " + ma[i].first + " shape differs");
    for (std::size_t k = 0; k < xa.size(); ++k) diff += xa[k] != xb[k];
  }
  return diff;
}

std::string spec_tag(const ModelSpec& s) {
  std::ostringstream os;
  os << to_string(s.architecture) << "[" << placement_string(s.mask_blocks);
  if (!s.mask_blocks.empty()) os << ",p=" << format_double(s.keep_prob);
  os << "]#" << s.master_seed;
  if (s.mask_seed) os << "/m" << *s.mask_seed;
  return os.str();
}

EvalReport graybox_eval(const ModelSpec& family, GrayboxMode mode, std::uint64_t source_seed,
                        std::uint64_t target_seed, const Dataset& train_set,
                        const Dataset& subset, const TrainConfig& train_cfg,
                        const AttackSpec& attack, const EvalOptions& opt) {
  const GrayboxPair specs = graybox_specs(family, mode, source_seed, target_seed);
  Model source = build_model(specs.source);
  Model target = build_model(specs.target);
  if (mode == GrayboxMode::kRemask && mask_bit_difference(source, target) == 0) {
    throw ConfigError("remask produced identical masks; choose different seeds");
  }
  train(source, train_set, nullptr, train_cfg);
  train(target, train_set, nullptr, train_cfg);
  EvalOptions o = opt;
  o.whitebox = false;
  EvalReport report = transfer_eval(source, target, subset, attack, o);
  report.protocol = std::string("graybox-") + to_string(mode);
  report.source = spec_tag(specs.source);
  report.target = spec_tag(specs.target);
  return report;
}

const char* to_string(ProbeKind kind) {
  return kind == ProbeKind::kShuffle ? "shuffle" : "gaussian";
}

ProbeKind parse_probe_kind(std::string_view text) {
  if (text == "shuffle") return ProbeKind::kShuffle;
  if (text == "gaussian") return ProbeKind::kGaussian;
  throw ConfigError("unknown probe '" + std::string(text) + "' (shuffle or gaussian)");
}

double CorruptionRow::accuracy() const {
  if (eligible == 0) throw EmptyReportError("corruption probe has no eligible samples");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(eligible);
}

std::vector<std::size_t> all_correct_indices(std::span<const Classifier* const> models,
                                             const Dataset& ds, std::size_t batch) {
  std::vector<bool> ok(ds.size(), true);
  for (const Classifier* m : models) {
    const std::vector<int> pred = predict_labels(*m, ds.images, batch);
    for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = ok[i] && pred[i] == ds.labels[i];
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ok.size(); ++i)
    if (ok[i]) out.push_back(i);
  return out;
}

std::vector<CorruptionRow> corruption_eval(const Classifier& target, const Dataset& subset,
                                           ProbeKind probe, std::span<const double> settings,
                                           std::uint64_t seed,
                                           std::span<const Classifier* const> comparators,
                                           std::size_t threads) {
  if (settings.empty()) throw ConfigError("corruption_eval needs at least one setting");
  if (probe == ProbeKind::kShuffle) {
    const Shape s = subset.image_shape();
    for (double k : settings) {
      if (!(k >= 1.0) || k != std::floor(k)) throw ConfigError("shuffle k must be a positive integer");
      const auto ki = static_cast<std::size_t>(k);
      if (s[1] % ki != 0 || s[2] % ki != 0) {
        throw ConfigError("shuffle k=" + std::to_string(ki) + " does not divide the " +
                          shape_string(s) + " image");
      }
    }
  }
  std::vector<const Classifier*> all{&target};
  all.insert(all.end(), comparators.begin(), comparators.end());
  const std::vector<std::size_t> keep = all_correct_indices(all, subset);
  if (keep.empty()) throw EmptyReportError("no sample is classified correctly by every model");
  std::vector<CorruptionRow> rows;
  for (double setting : settings) {
    std::vector<Tensor> imgs(keep.size());
    parallel_for(keep.size(), threads, [&](std::size_t j) {
      const std::size_t idx = keep[j];
      const Tensor img = subset.images.slice0(idx);
      if (probe == ProbeKind::kShuffle) {
        const auto k = static_cast<std::size_t>(setting);
        imgs[j] = patch_shuffle(img, k, derive_seed(seed, {k, idx}));
      } else {
        imgs[j] = gaussian_noise(img, setting, derive_seed(seed, {idx}));
      }
    });
    const std::vector<int> pred = predict_labels(target, stack(imgs));
    CorruptionRow row{probe, setting, keep.size(), 0};
    for (std::size_t j = 0; j < keep.size(); ++j) row.correct += pred[j] == subset.labels[keep[j]];
    rows.push_back(row);
  }
  return rows;
}

namespace {

const char* kReportHeader =
    "protocol,source,target,attack,epsilon,alpha,steps,eligible,defended,rate,clean_accuracy";

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::vector<const EvalReport*> sorted(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ConfigError("report needs at least one evaluation");
  std::vector<const EvalReport*> out;
  for (const EvalReport& r : reports) out.push_back(&r);
  std::stable_sort(out.begin(), out.end(), [](const EvalReport* a, const EvalReport* b) {
    const std::string fa = to_string(a->attack.family), fb = to_string(b->attack.family);
    return std::tie(a->protocol, fa, a->attack.epsilon, a->attack.alpha, a->attack.steps) <
           std::tie(b->protocol, fb, b->attack.epsilon, b->attack.alpha, b->attack.steps);
  });
  return out;
}

std::vector<std::string> row_fields(const EvalReport& r) {
  return {r.protocol,
          r.source,
          r.target,
          to_string(r.attack.family),
          format_double(r.attack.epsilon),
          format_double(r.attack.alpha),
          std::to_string(r.attack.steps),
          std::to_string(r.eligible),
          std::to_string(r.defended),
          fixed2(r.rate()),
          fixed2(r.clean_accuracy)};
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.close();
  if (!out) throw DataError(DataError::Kind::kIo, path.string(), 0, "cannot write file");
}

}  // namespace

std::string report_csv(std::span<const EvalReport> reports) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const EvalReport* r : sorted(reports)) {
    const std::vector<std::string> f = row_fields(*r);
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + csv_field(f[i]);
    out += "\n";
  }
  return out;
}

std::string report_table(std::span<const EvalReport> reports) {
  std::vector<std::vector<std::string>> rows{{"protocol", "source", "target", "attack", "eps",
                                              "alpha", "T", "eligible", "defended", "rate%",
                                              "clean%"}};
  for (const EvalReport* r : sorted(reports)) rows.push_back(row_fields(*r));
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      const std::size_t pad = width[i] - row[i].size();
      // text columns left-aligned, numbers right-aligned
      if (i < 4) {
        line += row[i] + std::string(pad, ' ');
      } else {
        line += std::string(pad, ' ') + row[i];
      }
      if (i + 1 < row.size()) line += "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

void write_report(std::span<const EvalReport> reports, const std::filesystem::path& dir) {
  const std::string csv = report_csv(reports);
  const std::string table = report_table(reports);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError(DataError::Kind::kIo, dir.string(), 0, ec.message());
  write_file(dir / "report.csv", csv);
  write_file(dir / "report.txt", table);
}

std::vector<EvalReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::kMissingFile, path.string(), 0, "no report file");
  std::string line;
  std::getline(in, line);
  if (line != kReportHeader) {
    throw DataError(DataError::Kind::kBadMagic, path.string(), 0, "not a report.csv");
  }
  std::vector<EvalReport> out;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = parse_csv_line(line);
    if (f.size() != 11) throw DataError(DataError::Kind::kMalformed, path.string(), offset, "bad row");
    EvalReport r;
    try {
      r.protocol = f[0];
      r.source = f[1];
      r.target = f[2];
      r.attack.family = parse_attack_family(f[3]);
      r.attack.epsilon = std::stod(f[4]);
      r.attack.alpha = std::stod(f[5]);
      r.attack.steps = std::stoull(f[6]);
      r.eligible = std::stoull(f[7]);
      r.defended = std::stoull(f[8]);
      r.clean_accuracy = std::stod(f[10]);
    } catch (const std::exception&) {
      throw DataError(DataError::Kind::kMalformed, path.string(), offset, "bad field");
    }
    if (r.defended > r.eligible || r.eligible == 0) {
      throw DataError(DataError::Kind::kMalformed, path.string(), offset, "inconsistent counts");
    }
    out.push_back(std::move(r));
    offset += line.size() + 1;
  }
  return out;
}

void write_records(const EvalReport& report, const std::filesystem::path& path) {
  std::string out = "sample_id,label,source_clean,target_clean,source_adv,target_adv\n";
  for (const EvalRecord& r : report.records) {
    out += std::to_string(r.sample_id) + "," + std::to_string(r.label) + "," +
           std::to_string(r.source_clean) + "," + std::to_string(r.target_clean) + "," +
           std::to_string(r.source_adv) + "," + std::to_string(r.target_adv) + "\n";
  }
  write_file(path, out);
}

void write_corruption(std::span<const CorruptionRow> rows, const std::string& target,
                      const std::filesystem::path& path) {
  std::string out = "target,probe,setting,eligible,correct,accuracy\n";
  for (const CorruptionRow& r : rows) {
    out += csv_field(target) + "," + to_string(r.probe) + "," + format_double(r.setting) + "," +
           std::to_string(r.eligible) + "," + std::to_string(r.correct) + "," +
           fixed2(r.accuracy()) + "\n";
  }
  write_file(path, out);
}

}  // namespace defnet

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "defnet/attacks.hpp"
#include "defnet/config.hpp"
#include "defnet/data.hpp"

namespace defnet {

struct EvalRecord {
  std::size_t sample_id = 0;
  int label = 0;
  int source_clean = -1;
  int target_clean = -1;
  int source_adv = -1;
  int target_adv = -1;

  bool target_correct() const { return target_clean == label; }
  bool source_correct() const { return source_clean == label; }
  // Needs a clean-correct source: a sample it already gets wrong was never attacked.
  bool source_fooled() const { return source_correct() && source_adv != label; }
};

struct EvalOptions {
  bool whitebox = false;        // only the clean-correct filter applies
  bool count_unfooled = false;  // unfooled-source samples count as defended
  std::size_t threads = 1;
};

bool is_eligible(const EvalRecord& r, const EvalOptions& opt);
bool is_defended(const EvalRecord& r, const EvalOptions& opt);

struct EvalReport {
  std::string protocol;  // transfer, whitebox, graybox-reinit, graybox-remask
  std::string source;
  std::string target;
  AttackSpec attack;
  std::size_t total = 0;
  std::size_t eligible = 0;
  std::size_t defended = 0;
  double clean_accuracy = 0.0;   // target, percent, on the evaluated subset
  double runtime_seconds = 0.0;  // never written to report files
  std::vector<EvalRecord> records;

  // defended / eligible * 100; EmptyReportError when nothing is eligible.
  double rate() const;
};

// Fills eligible/defended/total/clean_accuracy from the records.
EvalReport aggregate(EvalReport report, const EvalOptions& opt);

// Scores precomputed adversarial images. Throws EmptyReportError when no
// sample is eligible.
EvalReport score_transfer(const Classifier& source, const Classifier& target,
                          const Dataset& subset, std::span<const AdvResult> adversarial,
                          const EvalOptions& opt, std::span<const std::size_t> sample_ids = {});

// Attacks `source` on the subset, then scores against `target`.
EvalReport transfer_eval(const Classifier& source, const Classifier& target,
                         const Dataset& subset, const AttackSpec& attack,
                         const EvalOptions& opt = {});

// Short model label for reports, e.g. "resnet_small[0,1,2,p=0.3]#7".
std::string spec_tag(const ModelSpec& spec);

struct GrayboxPair {
  ModelSpec source;
  ModelSpec target;
};
// reinit: weight seeds differ, mask bits shared. remask: masks differ, weight
// init shared. Equal seeds, or remask on a maskless spec, raise ConfigError.
GrayboxPair graybox_specs(const ModelSpec& family, GrayboxMode mode, std::uint64_t source_seed,
                          std::uint64_t target_seed);
// Number of mask bits that differ between two realized models with the same layout.
std::size_t mask_bit_difference(const Model& a, const Model& b);

EvalReport graybox_eval(const ModelSpec& family, GrayboxMode mode, std::uint64_t source_seed,
                        std::uint64_t target_seed, const Dataset& train_set,
                        const Dataset& subset, const TrainConfig& train_cfg,
                        const AttackSpec& attack, const EvalOptions& opt = {});

enum class ProbeKind { kShuffle, kGaussian };
const char* to_string(ProbeKind kind);
ProbeKind parse_probe_kind(std::string_view text);

struct CorruptionRow {
  ProbeKind probe = ProbeKind::kGaussian;
  double setting = 0.0;  // sigma, or k for shuffle
  std::size_t eligible = 0;
  std::size_t correct = 0;
  double accuracy() const;
};

// Samples that every model classifies correctly.
std::vector<std::size_t> all_correct_indices(std::span<const Classifier* const> models,
                                             const Dataset& ds, std::size_t batch = 500);

// Accuracy of `target` on manipulated copies of the eligible samples, one row
// per setting. Eligible = correct on clean for the target and every entry of
// `comparators`. Manipulations depend on (seed, sample index) and the setting
// only, so every model sees the same images.
std::vector<CorruptionRow> corruption_eval(const Classifier& target, const Dataset& subset,
                                           ProbeKind probe, std::span<const double> settings,
                                           std::uint64_t seed,
                                           std::span<const Classifier* const> comparators = {},
                                           std::size_t threads = 1);

// <dir>/report.csv and <dir>/report.txt, rows sorted by protocol then attack.
void write_report(std::span<const EvalReport> reports, const std::filesystem::path& dir);
std::string report_csv(std::span<const EvalReport> reports);
std::string report_table(std::span<const EvalReport> reports);
// Reads the summary rows of a report.csv (records are not stored there).
std::vector<EvalReport> read_report_csv(const std::filesystem::path& path);

void write_records(const EvalReport& report, const std::filesystem::path& path);
void write_corruption(std::span<const CorruptionRow> rows, const std::string& target,
                      const std::filesystem::path& path);

}  // namespace defnet

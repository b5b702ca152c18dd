#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "commands.hpp"
#include "defnet/error.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

void add_common(CLI::App* cmd, defnet::cli::CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "override a config key, e.g. --set model.keep_prob=0.3");
  cmd->add_option("--seed", a.seed, "seed for model, training, attack and probes");
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--subset", a.subset, "stratified subset size (training set for train, test set otherwise)");
  cmd->add_option("--threads", a.threads, "worker threads; 1 is bitwise reproducible")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"defnet: defective convolutional networks, attacks and robustness evaluation"};
  app.require_subcommand(1);
  defnet::cli::CommonArgs common;
  defnet::cli::ModelArgs models;
  std::vector<std::filesystem::path> inputs;

  auto* train = app.add_subcommand("train", "train one model and save a checkpoint");
  add_common(train, common);

  auto* attack = app.add_subcommand("attack", "craft adversarial examples on a source model");
  add_common(attack, common);
  attack->add_option("--source", models.sources, "source checkpoint(s); several form an ensemble")
      ->required()->check(CLI::ExistingFile);

  auto* transfer = app.add_subcommand("eval-transfer", "transfer (or white-box) success defense rate");
  add_common(transfer, common);
  transfer->add_option("--source", models.sources, "source checkpoint(s); several form an ensemble")
      ->required()->check(CLI::ExistingFile);
  transfer->add_option("--target", models.target, "target checkpoint")->required()->check(CLI::ExistingFile);
  transfer->add_option("--adv", models.adv_dir, "precomputed adversarial directory from `attack`")
      ->check(CLI::ExistingDirectory);

  auto* graybox = app.add_subcommand("eval-graybox", "train a source/target pair and evaluate transfer");
  add_common(graybox, common);

  auto* corruption = app.add_subcommand("eval-corruption", "gaussian noise and patch shuffle probes");
  add_common(corruption, common);
  corruption->add_option("--target", models.target, "target checkpoint")->required()->check(CLI::ExistingFile);
  corruption->add_option("--compare", models.compare, "models that must also be clean-correct")
      ->check(CLI::ExistingFile);

  auto* report = app.add_subcommand("report", "merge report.csv files into one report");
  add_common(report, common);
  report->add_option("inputs", inputs, "report directories or report.csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return defnet::cli::run_train(common);
    if (*attack) return defnet::cli::run_attack(common, models);
    if (*transfer) return defnet::cli::run_eval_transfer(common, models);
    if (*graybox) return defnet::cli::run_eval_graybox(common);
    if (*corruption) return defnet::cli::run_eval_corruption(common, models);
    if (*report) return defnet::cli::run_report(common, inputs);
  } catch (const defnet::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const defnet::DimensionError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const defnet::ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const defnet::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const defnet::EmptyReportError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace defnet::cli {

struct CommonArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;  // key=value, applied after the file
  std::optional<std::uint64_t> seed;
  std::filesystem::path out;
  std::optional<std::size_t> subset;
  std::size_t threads = 1;
};

struct ModelArgs {
  std::vector<std::filesystem::path> sources;  // several = ensemble
  std::filesystem::path target;
  std::vector<std::filesystem::path> compare;
  std::filesystem::path adv_dir;
};

int run_train(const CommonArgs& a);
int run_attack(const CommonArgs& a, const ModelArgs& m);
int run_eval_transfer(const CommonArgs& a, const ModelArgs& m);
int run_eval_graybox(const CommonArgs& a);
int run_eval_corruption(const CommonArgs& a, const ModelArgs& m);
int run_report(const CommonArgs& a, const std::vector<std::filesystem::path>& inputs);

}  // namespace defnet::cli

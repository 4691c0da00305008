#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hysparse::cli {

struct CheckResult {
  std::string suite;
  std::string check;
  int cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::string note;
};

const std::vector<std::string>& suite_names();

/// Runs one named suite ("all" runs every suite). Throws std::invalid_argument
/// for an unknown name.
std::vector<CheckResult> run_suite(const std::string& name, std::uint64_t seed);

std::string render_table(const std::vector<CheckResult>& results);

}  // namespace hysparse::cli

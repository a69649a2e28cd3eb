#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hiermem/gradcheck.hpp"

namespace hiermem {

/// One named check of the release suite.
struct GradCheckCase {
  std::string group;  ///< op, distribution, memory, hypernet, backbone, loss
  std::string name;
  std::function<GradCheckReport()> run;
};

/// Every differentiable op on random conformant inputs, the distribution
/// functions, memory recall, the level-weight hypernet, the backbone and the
/// five objectives on a tiny model (L=2, D_feat=8, 2-way 2-shot, fixed noise).
/// Ops are held to 1e-4 and everything built from networks to 1e-3.
std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed = 1);

struct SuiteOutcome {
  std::vector<GradCheckReport> reports;
  std::vector<std::string> groups;
  bool passed = true;
};

/// Runs `cases` in order, calling `on_report` after each one.
SuiteOutcome run_gradcheck_suite(const std::vector<GradCheckCase>& cases,
                                 const std::function<void(const std::string& group, const GradCheckReport&)>&
                                     on_report = {});

}  // namespace hiermem

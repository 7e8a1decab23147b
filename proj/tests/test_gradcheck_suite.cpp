#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "sgfnet/gradcheck_suite.hpp"

namespace sgfnet {
namespace {

struct FaultGuard {
  explicit FaultGuard(std::string op) { backward_fault().op = std::move(op); }
  ~FaultGuard() { backward_fault().op.clear(); }
};

TEST(GradcheckSuite, AllCasesPass) {
  const auto start = std::chrono::steady_clock::now();
  const auto reports = run_gradcheck_suite(0, 4);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::set<std::string> names;
  for (const auto& r : reports) {
    names.insert(r.name);
    EXPECT_TRUE(r.passed()) << r.name << " error " << r.max_error << " tol " << r.tolerance;
  }
  EXPECT_EQ(names.size(), reports.size());
  for (const char* required : {"attention", "conv2d_depthwise", "dct_pool", "softmax", "sgf_block", "global_cross_attention"})
    EXPECT_TRUE(names.contains(required)) << required;
  EXPECT_LT(seconds, 120.0);
}

TEST(GradcheckSuite, InjectedFaultIsReported) {
  FaultGuard guard("conv2d_depthwise");
  const auto reports = run_gradcheck_suite(3, 4);
  for (const auto& r : reports) {
    if (r.name == "conv2d_depthwise" || r.name == "sgf_block") {
      EXPECT_FALSE(r.passed()) << r.name;
    }
    if (r.name == "add" || r.name == "attention" || r.name == "softmax") {
      EXPECT_TRUE(r.passed()) << r.name;
    }
  }
}

}  // namespace
}  // namespace sgfnet

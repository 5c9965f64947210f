#include <gtest/gtest.h>

#include "stag/checks.hpp"

namespace stag {
namespace {

TEST(GradientSuite, AllComponentsPass) {
  const auto results = run_gradient_suite();
  ASSERT_EQ(results.size(), gradient_components().size());
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed) << r.name << " max rel error " << r.max_rel_error << " " << r.error;
    EXPECT_EQ(r.instances, 20u) << r.name;
  }
}

TEST(GradientSuite, CorruptedComponentIsTheOnlyFailure) {
  for (const char* bad : {"cbp", "rnn_lstm", "composed"}) {
    GradSuiteOptions opts;
    opts.instances = 3;
    opts.corrupt = bad;
    for (const auto& r : run_gradient_suite(opts)) EXPECT_EQ(r.passed, r.name != bad) << r.name;
  }
}

TEST(GradientSuite, UnknownComponent) {
  GradSuiteOptions opts;
  opts.corrupt = "softmax";
  EXPECT_THROW(run_gradient_suite(opts), InvalidConfig);
}

}  // namespace
}  // namespace stag

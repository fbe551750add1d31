#include <gtest/gtest.h>

#include "test_support.hpp"

namespace dive {
namespace {

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, TwentySeedsWithinTolerance) {
  const auto& c = testing::gradient_cases().at(GetParam());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const GradCheckReport r = c.run(seed);
    EXPECT_LE(r.max_rel_error, c.tolerance) << c.name << " seed " << seed << " worst " << r.worst
                                                   << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
    EXPECT_GT(r.entries_checked, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(AllOperations, GradientSuite,
                         ::testing::Range<std::size_t>(0, testing::gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return testing::gradient_cases().at(info.param).name;
                         });

}  // namespace
}  // namespace dive

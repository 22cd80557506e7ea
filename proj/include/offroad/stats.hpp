#pragma once

#include <span>
#include <vector>

namespace offroad {

// Ranks starting at 1; ties share their average rank.
std::vector<double> ranks(std::span<const double> v);

double spearman(std::span<const double> a, std::span<const double> b);

// Two-sided exact sign-test p-value for `wins` successes out of `n` non-tied pairs.
double sign_test_p(int wins, int n);

}  // namespace offroad

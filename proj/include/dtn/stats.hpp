#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dtn::stats {

// Regularized lower incomplete gamma P(a, x).
double gamma_p(double a, double x);

// Survival function of the chi-square distribution with df degrees of freedom.
double chi2_sf(double x, int df);

struct Chi2Result {
    double statistic = 0.0;
    double p_value = 1.0;
    int df = 0;
    bool pass = false;  // p_value > significance
};

// Goodness-of-fit of observed counts against expected probabilities.
Chi2Result chi2_goodness_of_fit(const std::vector<std::uint64_t>& observed,
                                const std::vector<double>& expected_probs,
                                double significance);

// FNV-1a over a byte buffer; used to fingerprint checkpoints and reports.
std::uint64_t fnv1a(const void* data, std::size_t len);
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace dtn::stats

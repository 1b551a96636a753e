#pragma once

#include <cstddef>
#include <span>

namespace peftlab {

// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
double regularized_incomplete_beta(double a, double b, double x);

// P(T > t) for Student's t with df degrees of freedom.
double student_t_upper_tail(double t, double df);

struct TTestResult {
  double t = 0;
  double p = 0;
  std::size_t df = 0;
  double mean_difference = 0;
  // The differences have zero variance, so t is not finite. p is 0 for a
  // positive mean, 0.5 for a zero mean and 1 for a negative mean.
  bool degenerate = false;
};

// One-tailed paired test of mean(a - b) > 0.
TTestResult paired_one_tailed_ttest(std::span<const double> a, std::span<const double> b);

struct MeanSd {
  double mean = 0;
  double sd = 0;  // sample standard deviation; 0 for a single value
};

MeanSd mean_sd(std::span<const double> values);

}  // namespace peftlab

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowsense/common.hpp"

namespace flowsense::probe {

// Per person-week latent summary: elementwise mean then sample std (n - 1) of the hourly
// latents in the week. With a single hour the std half is zero and the row is flagged.
struct Summary {
  Eigen::VectorXd values;  // 2 * latent dim
  std::size_t hours = 0;
  bool single_hour = false;
};
Summary summarize(const std::vector<Eigen::VectorXd>& latents);

struct ProbeResult {
  std::string metric;
  std::size_t n = 0;
  std::size_t folds = 0;
  double r = 0.0;
  double r2 = 0.0;
  double p = 1.0;
  bool encoded = false;  // r > 0 with p < 0.05
  std::vector<double> predictions;  // pooled out-of-fold, aligned with the used rows
};

// Least squares on centered training rows; when the normal matrix is singular a ridge term
// 1e-6 * trace / dim is added. Returns (weights, x mean, y mean).
struct LinearFit {
  Eigen::VectorXd w;
  Eigen::VectorXd x_mean;
  double y_mean = 0.0;
  bool ridge = false;
  double predict(const Eigen::VectorXd& x) const { return y_mean + w.dot(x - x_mean); }
};
LinearFit fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y);

// Two-sided p for Pearson r via the t transform with n - 2 degrees of freedom.
double pearson_p(double r, std::size_t n);
double pearson_r(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Leave-one-subject-out linear probe. Rows with an undefined target are dropped; returns
// nullopt when fewer than 80% of rows have a target or fewer than 3 subjects remain.
std::optional<ProbeResult> loso_probe(const std::string& metric, const Eigen::MatrixXd& summaries,
                                      const std::vector<std::string>& subjects,
                                      const std::vector<MaybeReal>& target);

void write_report(std::ostream& out, const std::vector<ProbeResult>& results);

}  // namespace flowsense::probe

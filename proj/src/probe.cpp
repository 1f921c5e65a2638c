#include "flowsense/probe.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include <boost/math/distributions/students_t.hpp>

#include "flowsense/csv.hpp"

namespace flowsense::probe {

Summary summarize(const std::vector<Eigen::VectorXd>& latents) {
  if (latents.empty()) throw ConfigError("summarize: no latents");
  const auto d = latents.front().size();
  Summary s;
  s.hours = latents.size();
  s.single_hour = latents.size() == 1;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& z : latents) mean += z;
  mean /= static_cast<double>(latents.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  if (!s.single_hour) {
    for (const auto& z : latents) var += (z - mean).cwiseAbs2();
    var /= static_cast<double>(latents.size() - 1);
  }
  s.values.resize(2 * d);
  s.values << mean, var.cwiseSqrt();
  return s;
}

LinearFit fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  LinearFit f;
  f.x_mean = x.colwise().mean().transpose();
  f.y_mean = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - f.x_mean.transpose();
  const Eigen::VectorXd yc = y.array() - f.y_mean;
  Eigen::MatrixXd normal = xc.transpose() * xc;
  const Eigen::VectorXd rhs = xc.transpose() * yc;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(normal);
  if (lu.rank() < normal.cols()) {
    const double lambda = 1e-6 * normal.trace() / static_cast<double>(normal.cols());
    normal.diagonal().array() += lambda > 0 ? lambda : 1e-12;
    ldlt.compute(normal);
    f.ridge = true;
  }
  f.w = ldlt.solve(rhs);
  return f;
}

double pearson_r(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ac = a.array() - a.mean();
  const Eigen::VectorXd bc = b.array() - b.mean();
  const double denom = std::sqrt(ac.squaredNorm() * bc.squaredNorm());
  return denom > 0 ? ac.dot(bc) / denom : 0.0;
}

double pearson_p(double r, std::size_t n) {
  if (n < 3) return 1.0;
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = r * std::sqrt(df / (1.0 - r * r));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

std::optional<ProbeResult> loso_probe(const std::string& metric, const Eigen::MatrixXd& summaries,
                                      const std::vector<std::string>& subjects,
                                      const std::vector<MaybeReal>& target) {
  const auto n_all = summaries.rows();
  if (static_cast<Eigen::Index>(subjects.size()) != n_all ||
      static_cast<Eigen::Index>(target.size()) != n_all) {
    throw ConfigError("loso_probe: length mismatch");
  }
  std::vector<Eigen::Index> used;
  for (Eigen::Index i = 0; i < n_all; ++i) {
    if (target[i] && std::isfinite(*target[i])) used.push_back(i);
  }
  if (used.empty() || static_cast<double>(used.size()) < 0.8 * static_cast<double>(n_all)) {
    return std::nullopt;
  }
  std::set<std::string> ids;
  for (auto i : used) ids.insert(subjects[i]);
  if (ids.size() < 3) return std::nullopt;

  ProbeResult res;
  res.metric = metric;
  res.n = used.size();
  res.folds = ids.size();
  Eigen::VectorXd y(res.n), pred(res.n);
  for (std::size_t k = 0; k < used.size(); ++k) y(k) = *target[used[k]];
  for (const auto& held : ids) {
    std::vector<std::size_t> train, test;
    for (std::size_t k = 0; k < used.size(); ++k) {
      (subjects[used[k]] == held ? test : train).push_back(k);
    }
    Eigen::MatrixXd xt(train.size(), summaries.cols());
    Eigen::VectorXd yt(train.size());
    for (std::size_t k = 0; k < train.size(); ++k) {
      xt.row(k) = summaries.row(used[train[k]]);
      yt(k) = y(train[k]);
    }
    const LinearFit fit = fit_linear(xt, yt);
    for (auto k : test) pred(k) = fit.predict(summaries.row(used[k]).transpose());
  }
  res.r = pearson_r(pred, y);
  const double sst = (y.array() - y.mean()).square().sum();
  const double sse = (y - pred).squaredNorm();
  res.r2 = sst > 0 ? 1.0 - sse / sst : 0.0;
  res.p = pearson_p(res.r, res.n);
  res.encoded = res.r > 0 && res.p < 0.05;
  res.predictions.assign(pred.data(), pred.data() + pred.size());
  return res;
}

void write_report(std::ostream& out, const std::vector<ProbeResult>& results) {
  csv::Writer w(out);
  w.row({"metric", "n", "folds", "r", "r2", "p", "encoded"});
  for (const auto& r : results) {
    w.row({r.metric, std::to_string(r.n), std::to_string(r.folds), csv::format_double(r.r),
           csv::format_double(r.r2), csv::format_double(r.p), r.encoded ? "1" : "0"});
  }
}

}  // namespace flowsense::probe

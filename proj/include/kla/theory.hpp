#pragma once

// Executable verification of the theory behind the kla write.
//
// The exact write (eta = 1, eps = 0) S_t = S~ + k e^T / ||k||^2 is checked to
// be the orthogonal projection of S~ onto {S : S^T k = v} three ways:
// constraint satisfaction, orthogonality of the move to the constraint
// surface's tangent space, and minimum-norm dominance against random feasible
// points. Independently:
//
//   - the relaxed write equals the minimizer of the proximal objective
//     min_S 1/2 ||S - S~||_F^2 + (mu/2) ||S^T k - v||^2 with
//     mu = eta / ((1-eta) ||k||^2 + eps), verified against plain gradient
//     descent on that objective (never touching the kla code path);
//   - the residual contracts componentwise by exactly
//     1 - eta ||k||^2 / (||k||^2 + eps), and the per-token loss is monotone;
//   - the Lagrange route lambda = -e / ||k||^2, S = S~ - k lambda^T lands on
//     the same update with a stationary Lagrangian gradient;
//   - the loss along the write direction L(tau) = 1/2 (1 - tau ||k||^2)^2
//     ||e||^2 matches a direct scan and is minimized at tau = 1 / ||k||^2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kla/errors.hpp"
#include "kla/parallel.hpp"
#include "kla/recurrence.hpp"
#include "kla/rng.hpp"
#include "kla/tensor.hpp"

namespace kla {

struct TheoryReport {
  std::string check;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::size_t samples = 0;
};

inline TheoryReport make_report(std::string name, double dev, double tol, std::size_t n) {
  TheoryReport r;
  r.check = std::move(name);
  r.max_deviation = dev;
  r.tolerance = tol;
  r.pass = dev <= tol;
  r.samples = n;
  return r;
}

struct ProximalProblem {
  StateMatrix<double> s_tilde;
  Vector k;
  Vector v;
  double mu = 0.0;  // constraint weight, >= 0

  void validate() const {
    if (!(mu >= 0.0) || !std::isfinite(mu))
      throw range_error("ProximalProblem: mu must be finite and nonnegative");
    if (k.size() != s_tilde.d_k() || v.size() != s_tilde.d_v())
      throw shape_error("ProximalProblem: k/v dims vs state");
  }
};

// Which coefficient the projection checks use. gdn_eta deliberately installs
// the wrong coefficient (beta = eta instead of eta Kaczmarz-normalized) so
// mutation tests can confirm the checks have teeth.
enum class ProjectionCoefficient { kaczmarz, gdn_eta };

struct ProjectionDeviations {
  double constraint = 0.0;   // ||S_t^T k - v||_inf
  double tangent = 0.0;      // max |<S_t - S~, H>_F| over tangent probes
  double min_norm = 0.0;     // max (||S_t - S~|| - ||S' - S~||) over feasible probes
  std::size_t probes = 0;
};

// Projects H0 onto the tangent space {H : H^T k = 0} of the constraint set:
// H = H0 - k (k^T H0) / ||k||^2.
inline Matrix tangent_project(const Matrix& h0, const Vector& k) {
  const double nk = l2_norm_sq(k);
  const Vector kt_h0 = matvec_t(h0, k);
  Matrix h = h0;
  for (std::size_t i = 0; i < h.rows(); ++i) {
    const double ki = k[i] / nk;
    double* hi = h.row(i);
    for (std::size_t j = 0; j < h.cols(); ++j) hi[j] -= ki * kt_h0[j];
  }
  return h;
}

// Exact-projection checks (eta = 1, eps = 0) on one instance, with `probes`
// random tangent directions and the same number of random feasible points.
inline ProjectionDeviations verify_projection(
    const StateMatrix<double>& s_tilde, const Vector& k, const Vector& v, Rng& rng,
    std::size_t probes = 100,
    ProjectionCoefficient coef = ProjectionCoefficient::kaczmarz) {
  const double nk = l2_norm_sq(k);
  if (nk == 0.0) throw range_error("verify_projection: zero key");
  const double beta = (coef == ProjectionCoefficient::kaczmarz) ? 1.0 / nk : 1.0;

  const Vector e = residual(s_tilde, k, v);
  Matrix s_t = s_tilde.s;
  for (std::size_t i = 0; i < s_t.rows(); ++i) {
    const double bk = beta * k[i];
    double* si = s_t.row(i);
    for (std::size_t j = 0; j < s_t.cols(); ++j) si[j] += bk * e[j];
  }

  ProjectionDeviations dev;
  dev.probes = probes;
  dev.constraint = max_abs_diff(matvec_t(s_t, k), v);

  const Matrix delta = sub(s_t, s_tilde.s);
  const double dist = frobenius_norm(delta);
  for (std::size_t p = 0; p < probes; ++p) {
    const Matrix h = tangent_project(rng.normal_matrix(s_t.rows(), s_t.cols()), k);
    // <Delta, H>_F
    double ip = 0.0;
    for (std::size_t idx = 0; idx < h.size(); ++idx) ip += delta.data()[idx] * h.data()[idx];
    dev.tangent = std::max(dev.tangent, std::abs(ip));

    // Random feasible point: S' = S_t + H' (tangent moves stay feasible when
    // S_t is feasible). Checked only in kaczmarz mode -- with a broken
    // coefficient S_t is not feasible, and the constraint check above is the
    // one that must catch it.
    const Matrix h2 = tangent_project(rng.normal_matrix(s_t.rows(), s_t.cols()), k);
    const Matrix s_prime = add(s_t, scale(h2, rng.uniform(0.1, 3.0)));
    const double dist_prime = frobenius_norm(sub(s_prime, s_tilde.s));
    dev.min_norm = std::max(dev.min_norm, dist - dist_prime);
  }
  return dev;
}

struct LineSearchScan {
  std::vector<double> direct;  // loss by explicit state evaluation
  std::vector<double> closed;  // 1/2 (1 - tau nk)^2 ||e||^2
  double tau_star_empirical = 0.0;
};

inline LineSearchScan line_search_scan(const StateMatrix<double>& s_tilde, const Vector& k,
                                       const Vector& v, const std::vector<double>& grid) {
  if (grid.empty()) throw range_error("line_search_scan: empty grid");
  const double nk = l2_norm_sq(k);
  if (nk == 0.0) throw range_error("line_search_scan: zero key");
  const Vector e = residual(s_tilde, k, v);
  const double e_sq = l2_norm_sq(e);

  LineSearchScan scan;
  scan.direct.reserve(grid.size());
  scan.closed.reserve(grid.size());
  double best = 0.0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double tau = grid[g];
    // S(tau) = S~ + tau k e^T, evaluated literally.
    Matrix s = s_tilde.s;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      const double tk = tau * k[i];
      double* si = s.row(i);
      for (std::size_t j = 0; j < s.cols(); ++j) si[j] += tk * e[j];
    }
    const Vector r = residual(StateMatrix<double>(std::move(s)), k, v);
    const double loss = 0.5 * l2_norm_sq(r);
    scan.direct.push_back(loss);
    const double f = 1.0 - tau * nk;
    scan.closed.push_back(0.5 * f * f * e_sq);
    if (g == 0 || loss < scan.direct[best]) best = g, scan.tau_star_empirical = tau;
  }
  return scan;
}

struct ProximalSolution {
  StateMatrix<double> gd;        // gradient-descent minimizer
  StateMatrix<double> analytic;  // S~ + [mu/(1+mu nk)] k e^T
  std::size_t iters_used = 0;
  double grad_norm = 0.0;
};

// Fixed-step gradient descent on the proximal objective from S~. Pass
// step_size <= 0 to use the default 0.5/(1 + mu ||k||^2). Throws range_error
// if the objective ever increases (divergent step).
inline ProximalSolution proximal_oracle(const ProximalProblem& p, double step_size = 0.0,
                                        std::size_t max_iters = 10000,
                                        double grad_tol = 1e-10) {
  p.validate();
  const double nk = l2_norm_sq(p.k);
  const double step = step_size > 0.0 ? step_size : 0.5 / (1.0 + p.mu * nk);

  const auto objective = [&](const Matrix& s) {
    double prox = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double d = s.data()[i] - p.s_tilde.s.data()[i];
      prox += d * d;
    }
    const Vector r = residual(StateMatrix<double>(s), p.k, p.v);
    return 0.5 * prox + 0.5 * p.mu * l2_norm_sq(r);
  };

  Matrix s = p.s_tilde.s;
  double obj = objective(s);
  ProximalSolution sol;
  Matrix grad(s.rows(), s.cols());
  std::size_t it = 0;
  for (; it < max_iters; ++it) {
    // grad = (S - S~) + mu k (S^T k - v)^T
    const Vector r = matvec_t(s, p.k);
    double gnorm_sq = 0.0;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      double* gi = grad.row(i);
      const double* si = s.row(i);
      const double* ti = p.s_tilde.s.row(i);
      const double mki = p.mu * p.k[i];
      for (std::size_t j = 0; j < s.cols(); ++j) {
        gi[j] = (si[j] - ti[j]) + mki * (r[j] - p.v[j]);
        gnorm_sq += gi[j] * gi[j];
      }
    }
    sol.grad_norm = std::sqrt(gnorm_sq);
    if (sol.grad_norm <= grad_tol) break;
    for (std::size_t i = 0; i < s.size(); ++i) s.data()[i] -= step * grad.data()[i];
    const double next_obj = objective(s);
    if (next_obj > obj * (1.0 + 1e-12) + 1e-300)
      throw range_error("proximal_oracle: objective increased; step size too large");
    obj = next_obj;
  }
  sol.iters_used = it;
  sol.gd = StateMatrix<double>(std::move(s));

  const double tau = p.mu / (1.0 + p.mu * nk);
  const Vector e = residual(p.s_tilde, p.k, p.v);
  Matrix analytic = p.s_tilde.s;
  for (std::size_t i = 0; i < analytic.rows(); ++i) {
    const double tk = tau * p.k[i];
    double* ai = analytic.row(i);
    for (std::size_t j = 0; j < analytic.cols(); ++j) ai[j] += tk * e[j];
  }
  sol.analytic = StateMatrix<double>(std::move(analytic));
  return sol;
}

// Componentwise contraction law and loss monotonicity for one relaxed write.
inline TheoryReport contraction_check(const StateMatrix<double>& s_tilde, const Vector& k,
                                      const Vector& v, double eta, double eps) {
  if (!(eta > 0.0 && eta <= 1.0)) throw range_error("contraction_check: eta outside (0,1]");
  if (!(eps >= 0.0)) throw range_error("contraction_check: eps must be >= 0");
  const double nk = l2_norm_sq(k);
  if (nk + eps == 0.0) throw singular_error("contraction_check: zero key with eps = 0");

  const Vector e = residual(s_tilde, k, v);
  const double beta = eta / (nk + eps);
  Matrix s_t = s_tilde.s;
  for (std::size_t i = 0; i < s_t.rows(); ++i) {
    const double bk = beta * k[i];
    double* si = s_t.row(i);
    for (std::size_t j = 0; j < s_t.cols(); ++j) si[j] += bk * e[j];
  }
  const Vector e_plus = residual(StateMatrix<double>(s_t), k, v);

  const double factor = 1.0 - eta * nk / (nk + eps);
  double dev = 0.0;
  for (std::size_t j = 0; j < e.size(); ++j) {
    const double predicted = factor * e[j];
    dev = std::max(dev, std::abs(e_plus[j] - predicted) / std::max(1.0, std::abs(e[j])));
  }
  // Fold loss monotonicity into the same report: any increase is a deviation.
  const double loss_before = 0.5 * l2_norm_sq(e);
  const double loss_after = 0.5 * l2_norm_sq(e_plus);
  if (loss_after > loss_before)
    dev = std::max(dev, (loss_after - loss_before) / std::max(1.0, loss_before));
  return make_report("contraction", dev, 1e-12, 1);
}

// Lagrange route: lambda = -e/||k||^2, S = S~ - k lambda^T must equal the
// exact-projection write, satisfy the constraint, and zero the Lagrangian
// gradient (S - S~) + k lambda^T.
inline TheoryReport verify_lagrange(const StateMatrix<double>& s_tilde, const Vector& k,
                                    const Vector& v) {
  const double nk = l2_norm_sq(k);
  if (nk == 0.0) throw range_error("verify_lagrange: zero key");
  const Vector e = residual(s_tilde, k, v);
  Vector lambda(e.size());
  for (std::size_t j = 0; j < e.size(); ++j) lambda[j] = -e[j] / nk;

  Matrix s_rec = sub(s_tilde.s, outer(k, lambda));
  // The projection write, computed the kla way.
  Matrix s_kacz = s_tilde.s;
  const double beta = 1.0 / nk;
  for (std::size_t i = 0; i < s_kacz.rows(); ++i) {
    const double bk = beta * k[i];
    double* si = s_kacz.row(i);
    for (std::size_t j = 0; j < s_kacz.cols(); ++j) si[j] += bk * e[j];
  }

  double dev = max_abs_diff(s_rec, s_kacz);
  dev = std::max(dev, max_abs_diff(matvec_t(s_rec, k), v));
  const Matrix stationarity = add(sub(s_rec, s_tilde.s), outer(k, lambda));
  dev = std::max(dev, max_abs(stationarity));
  return make_report("lagrange", dev, 1e-12, 1);
}

// ---------------------------------------------------------------------------
// Suite runners: aggregate the single-instance checks over random instances.

struct TheorySuiteConfig {
  std::size_t samples = 1000;
  std::size_t max_dk = 32;
  std::size_t max_dv = 32;
  std::size_t probes = 100;  // tangent/feasible probes per projection instance
  std::uint64_t seed = 42;
  bool inject_gdn_coefficient = false;  // mutation mode: beta = eta
};

inline std::vector<TheoryReport> run_theory_suite(const TheorySuiteConfig& cfg) {
  if (cfg.samples == 0) throw config_error("theory suite: samples must be >= 1");
  if (cfg.max_dk == 0 || cfg.max_dv == 0) throw config_error("theory suite: dims must be >= 1");
  const Rng root(cfg.seed);

  struct InstanceDevs {
    double constraint = 0, tangent = 0, min_norm = 0;
    double proximal = 0;
    double contraction = 0, loss_increase = 0;
    double lagrange = 0;
    double line_agree = 0, line_bracket = 0, parabola = 0;
  };
  std::vector<InstanceDevs> devs(cfg.samples);

  const ProjectionCoefficient coef = cfg.inject_gdn_coefficient
                                         ? ProjectionCoefficient::gdn_eta
                                         : ProjectionCoefficient::kaczmarz;

  parallel_for(cfg.samples, [&](std::size_t i) {
    Rng rng = root.derive(i);
    const std::size_t dk = 1 + static_cast<std::size_t>(
                                   rng.uniform_int(static_cast<int>(cfg.max_dk)));
    const std::size_t dv = 1 + static_cast<std::size_t>(
                                   rng.uniform_int(static_cast<int>(cfg.max_dv)));
    StateMatrix<double> s_tilde(rng.normal_matrix(dk, dv));
    Vector k = rng.normal_vector(dk);
    while (l2_norm_sq(k) == 0.0) k = rng.normal_vector(dk);
    const Vector v = rng.normal_vector(dv);
    InstanceDevs& d = devs[i];

    // Projection characterizations: constraint, tangency, minimum norm.
    const ProjectionDeviations pd = verify_projection(s_tilde, k, v, rng, cfg.probes, coef);
    d.constraint = pd.constraint;
    d.tangent = pd.tangent;
    d.min_norm = pd.min_norm;

    // Proximal equivalence at a random (eta, eps) configuration. eta stays
    // below 1 so mu is finite; mu*||k||^2 <= eta/(1-eta) keeps GD fast.
    const double nk = l2_norm_sq(k);
    const double eta_p = rng.uniform(0.05, 0.95);
    const double eps_p = std::pow(10.0, rng.uniform(-4.0, -1.0));
    ProximalProblem prob;
    prob.s_tilde = s_tilde;
    prob.k = k;
    prob.v = v;
    prob.mu = eta_p / ((1.0 - eta_p) * nk + eps_p);
    const ProximalSolution sol = proximal_oracle(prob);
    // The kla write with (eta_p, eps_p).
    const Vector e = residual(s_tilde, k, v);
    Matrix relaxed = s_tilde.s;
    const double beta_p = eta_p / (nk + eps_p);
    for (std::size_t r = 0; r < relaxed.rows(); ++r) {
      const double bk = beta_p * k[r];
      double* sr = relaxed.row(r);
      for (std::size_t j = 0; j < relaxed.cols(); ++j) sr[j] += bk * e[j];
    }
    d.proximal = frobenius_norm(sub(sol.gd.s, relaxed));

    // Contraction + loss monotonicity at another random (eta, eps).
    const double eta_c = rng.uniform(0.05, 1.0);
    const double eps_c = rng.uniform() < 0.5 ? 0.0 : std::pow(10.0, rng.uniform(-8.0, -2.0));
    const TheoryReport cr = contraction_check(s_tilde, k, v, eta_c, eps_c);
    d.contraction = cr.max_deviation;

    d.lagrange = verify_lagrange(s_tilde, k, v).max_deviation;

    // Line-search scan over tau in [0, 2/nk], 101 points.
    std::vector<double> grid(101);
    const double hi = 2.0 / nk;
    for (std::size_t g = 0; g < grid.size(); ++g)
      grid[g] = hi * static_cast<double>(g) / static_cast<double>(grid.size() - 1);
    const LineSearchScan scan = line_search_scan(s_tilde, k, v, grid);
    const double loss0 = scan.closed[0];  // 1/2 ||e||^2
    const double denom = std::max(1.0, loss0);
    for (std::size_t g = 0; g < grid.size(); ++g)
      d.line_agree = std::max(d.line_agree,
                              std::abs(scan.direct[g] - scan.closed[g]) / denom);
    const double step_len = grid[1] - grid[0];
    d.line_bracket =
        std::max(0.0, std::abs(scan.tau_star_empirical - 1.0 / nk) / step_len - 1.0);

    // Parabola fit of the direct curve in s = tau * nk (well-conditioned
    // basis): least squares on {1, s, s^2}, normal equations.
    double m[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
    double b[3] = {0, 0, 0};
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const double s = grid[g] * nk;
      const double basis[3] = {1.0, s, s * s};
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) m[r][c] += basis[r] * basis[c];
        b[r] += basis[r] * scan.direct[g];
      }
    }
    // 3x3 Gaussian elimination, partial pivoting.
    int piv[3] = {0, 1, 2};
    for (int col = 0; col < 3; ++col) {
      int best = col;
      for (int r = col + 1; r < 3; ++r)
        if (std::abs(m[piv[r]][col]) > std::abs(m[piv[best]][col])) best = r;
      std::swap(piv[col], piv[best]);
      for (int r = col + 1; r < 3; ++r) {
        const double f = m[piv[r]][col] / m[piv[col]][col];
        for (int c = col; c < 3; ++c) m[piv[r]][c] -= f * m[piv[col]][c];
        b[piv[r]] -= f * b[piv[col]];
      }
    }
    double coefs[3];
    for (int r = 2; r >= 0; --r) {
      double acc = b[piv[r]];
      for (int c = r + 1; c < 3; ++c) acc -= m[piv[r]][c] * coefs[c];
      coefs[r] = acc / m[piv[r]][r];
    }
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const double s = grid[g] * nk;
      const double fit = coefs[0] + coefs[1] * s + coefs[2] * s * s;
      d.parabola = std::max(d.parabola, std::abs(fit - scan.direct[g]) / denom);
    }
  });

  InstanceDevs worst;
  for (const InstanceDevs& d : devs) {
    worst.constraint = std::max(worst.constraint, d.constraint);
    worst.tangent = std::max(worst.tangent, d.tangent);
    worst.min_norm = std::max(worst.min_norm, d.min_norm);
    worst.proximal = std::max(worst.proximal, d.proximal);
    worst.contraction = std::max(worst.contraction, d.contraction);
    worst.lagrange = std::max(worst.lagrange, d.lagrange);
    worst.line_agree = std::max(worst.line_agree, d.line_agree);
    worst.line_bracket = std::max(worst.line_bracket, d.line_bracket);
    worst.parabola = std::max(worst.parabola, d.parabola);
  }

  std::vector<TheoryReport> reports;
  reports.push_back(make_report("projection_constraint", worst.constraint, 1e-12, cfg.samples));
  reports.push_back(make_report("projection_tangent", worst.tangent, 1e-10, cfg.samples));
  reports.push_back(make_report("projection_min_norm", worst.min_norm, 1e-10, cfg.samples));
  reports.push_back(make_report("proximal_gd_vs_closed_form", worst.proximal, 1e-6, cfg.samples));
  reports.push_back(make_report("contraction_factor", worst.contraction, 1e-12, cfg.samples));
  reports.push_back(make_report("lagrange_reconstruction", worst.lagrange, 1e-12, cfg.samples));
  reports.push_back(make_report("line_search_agreement", worst.line_agree, 1e-10, cfg.samples));
  reports.push_back(make_report("line_search_bracket", worst.line_bracket, 1e-9, cfg.samples));
  reports.push_back(make_report("line_search_parabola_fit", worst.parabola, 1e-10, cfg.samples));
  return reports;
}

}  // namespace kla

#include "pflrm/pnp.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <random>

#include "pflrm/ops.hpp"

namespace pflrm::pnp {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPi = 3.14159265358979323846;
}  // namespace

std::string Diagnostics::to_json_line() const {
  nlohmann::json j;
  j["iterations"] = iterations;
  j["objective_trace"] = objective_trace;
  j["amis_resets"] = amis_resets;
  return j.dump();
}

Vector6d chart_from_pose(const geom::Pose& pose) {
  Vector6d theta;
  theta.head<3>() = geom::axis_angle_from_rotation(pose.R);
  theta.tail<3>() = pose.t;
  return theta;
}

geom::Pose pose_from_chart(const Vector6d& theta) {
  return geom::Pose{geom::rotation_from_axis_angle(theta.head<3>()), theta.tail<3>()};
}

namespace {

// Projection with clamped depth plus its Jacobian w.r.t. the camera point.
inline Eigen::Vector2d project_clamped(const Eigen::Vector3d& xc, const geom::Intrinsics& intr,
                                       double zmin, Eigen::Matrix<double, 2, 3>* jac = nullptr) {
  const double z = std::max(xc.z(), zmin);
  const Eigen::Vector2d uv(intr.fx * xc.x() / z + intr.cx, intr.fy * xc.y() / z + intr.cy);
  if (jac) {
    const bool clamped = xc.z() < zmin;
    jac->setZero();
    (*jac)(0, 0) = intr.fx / z;
    (*jac)(1, 1) = intr.fy / z;
    if (!clamped) {
      (*jac)(0, 2) = -intr.fx * xc.x() / (z * z);
      (*jac)(1, 2) = -intr.fy * xc.y() / (z * z);
    }
  }
  return uv;
}

}  // namespace

double residual(const geom::Pose& pose, const Correspondence& corr, const geom::Intrinsics& intr,
                double depth_clamp) {
  const Eigen::Vector3d xc = pose.apply(corr.p);
  const Eigen::Vector2d uv = project_clamped(xc, intr, depth_clamp);
  return corr.beta * (uv - corr.q).squaredNorm();
}

double objective(const Vector6d& theta, std::span<const Correspondence> corrs,
                 const geom::Intrinsics& intr, double depth_clamp, Vector6d* gradient) {
  const Eigen::Matrix3d R = geom::rotation_from_axis_angle(theta.head<3>());
  const Eigen::Vector3d t = theta.tail<3>();
  const Eigen::Matrix3d Jr = geom::right_jacobian_so3(theta.head<3>());
  double f = 0.0;
  if (gradient) gradient->setZero();
  for (const auto& corr : corrs) {
    if (corr.beta <= 0.0) continue;
    const Eigen::Vector3d xc = R * corr.p + t;
    Eigen::Matrix<double, 2, 3> dpi;
    const Eigen::Vector2d r = project_clamped(xc, intr, depth_clamp, &dpi) - corr.q;
    f += 0.5 * corr.beta * r.squaredNorm();
    if (gradient) {
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = dpi * (-R * geom::skew(corr.p) * Jr);
      J.rightCols<3>() = dpi;
      *gradient += corr.beta * J.transpose() * r;
    }
  }
  return f;
}

namespace {

struct LmOutcome {
  Vector6d theta;
  double objective = kInf;
  int iterations = 0;
  bool converged = false;
  Matrix6d jtj = Matrix6d::Zero();
};

LmOutcome levenberg_marquardt(Vector6d theta, std::span<const Correspondence> corrs,
                              const geom::Intrinsics& intr, const SolveOptions& opts,
                              std::vector<double>* trace) {
  LmOutcome out;
  double lambda = opts.lambda_init;

  auto build = [&](const Vector6d& th, Matrix6d& jtj, Vector6d& jtr) {
    const Eigen::Matrix3d R = geom::rotation_from_axis_angle(th.head<3>());
    const Eigen::Vector3d t = th.tail<3>();
    const Eigen::Matrix3d Jr = geom::right_jacobian_so3(th.head<3>());
    jtj.setZero();
    jtr.setZero();
    double f = 0.0;
    for (const auto& corr : corrs) {
      if (corr.beta <= 0.0) continue;
      const Eigen::Vector3d xc = R * corr.p + t;
      Eigen::Matrix<double, 2, 3> dpi;
      const Eigen::Vector2d r = project_clamped(xc, intr, opts.depth_clamp, &dpi) - corr.q;
      Eigen::Matrix<double, 2, 6> J;
      J.leftCols<3>() = dpi * (-R * geom::skew(corr.p) * Jr);
      J.rightCols<3>() = dpi;
      jtj.noalias() += corr.beta * J.transpose() * J;
      jtr.noalias() += corr.beta * J.transpose() * r;
      f += 0.5 * corr.beta * r.squaredNorm();
    }
    return f;
  };

  Matrix6d jtj;
  Vector6d jtr;
  double f = build(theta, jtj, jtr);
  if (trace) trace->push_back(f);
  for (int it = 0; it < opts.max_iterations; ++it) {
    out.iterations = it + 1;
    if (jtr.norm() < opts.grad_tol) {
      out.converged = true;
      break;
    }
    const Matrix6d damped = jtj + lambda * Matrix6d::Identity();
    const Vector6d step = damped.ldlt().solve(-jtr);
    if (!step.allFinite()) {
      lambda *= 10.0;
      continue;
    }
    const Vector6d candidate = theta + step;
    Matrix6d jtj_c;
    Vector6d jtr_c;
    const double f_c = build(candidate, jtj_c, jtr_c);
    if (f_c < f) {
      theta = candidate;
      f = f_c;
      jtj = jtj_c;
      jtr = jtr_c;
      lambda = std::max(lambda / 10.0, 1e-12);
      if (trace) trace->push_back(f);
    } else {
      lambda *= 10.0;
      if (lambda > 1e14) break;
    }
  }
  if (jtr.norm() < opts.grad_tol) out.converged = true;
  out.theta = theta;
  out.objective = f;
  out.jtj = jtj;
  return out;
}

Vector6d alignment_start(std::span<const Correspondence> corrs, const geom::Intrinsics& intr,
                         const Eigen::Matrix3d& R) {
  double wsum = 0.0;
  Eigen::Vector3d p_bar = Eigen::Vector3d::Zero();
  Eigen::Vector2d n_bar = Eigen::Vector2d::Zero();
  for (const auto& c : corrs) {
    if (c.beta <= 0.0) continue;
    wsum += c.beta;
    p_bar += c.beta * c.p;
    n_bar += c.beta * Eigen::Vector2d((c.q.x() - intr.cx) / intr.fx, (c.q.y() - intr.cy) / intr.fy);
  }
  p_bar /= wsum;
  n_bar /= wsum;
  double s3 = 0.0, s2 = 0.0;
  for (const auto& c : corrs) {
    if (c.beta <= 0.0) continue;
    s3 += c.beta * (c.p - p_bar).squaredNorm();
    const Eigen::Vector2d n((c.q.x() - intr.cx) / intr.fx, (c.q.y() - intr.cy) / intr.fy);
    s2 += c.beta * (n - n_bar).squaredNorm();
  }
  s3 = std::sqrt(s3 / wsum);
  s2 = std::sqrt(s2 / wsum);
  const double depth = std::clamp(s2 > 1e-9 ? s3 / s2 : 3.0, 0.5, 20.0);
  Vector6d theta;
  theta.head<3>() = geom::axis_angle_from_rotation(R);
  theta.tail<3>() = depth * Eigen::Vector3d(n_bar.x(), n_bar.y(), 1.0) - R * p_bar;
  return theta;
}

}  // namespace

PnPResult solve(std::span<const Correspondence> corrs, const geom::Intrinsics& intr,
                const SolveOptions& opts, Diagnostics* diag, Matrix6d* hessian_at_solution) {
  // Degeneracy checks: effective count and collinearity.
  int effective = 0;
  double wsum = 0.0;
  Eigen::Vector3d p_bar = Eigen::Vector3d::Zero();
  for (const auto& c : corrs)
    if (c.beta > 0.0) {
      ++effective;
      wsum += c.beta;
      p_bar += c.beta * c.p;
    }
  if (effective < 4)
    throw DegenerateError("pnp::solve: need at least 4 correspondences with positive weight, got " +
                          std::to_string(effective));
  p_bar /= wsum;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& c : corrs)
    if (c.beta > 0.0) cov += (c.beta / wsum) * (c.p - p_bar) * (c.p - p_bar).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  if (eig.eigenvalues()(1) < 1e-12)
    throw DegenerateError("pnp::solve: points are collinear");

  std::mt19937_64 rng(mix_seed(opts.seed, 0x9e37));
  std::normal_distribution<double> normal(0.0, 1.0);

  LmOutcome best;
  std::vector<double> best_trace;
  int total_iterations = 0;
  for (int s = 0; s < std::max(opts.starts, 1); ++s) {
    Eigen::Matrix3d R0;
    if (s == 0) {
      R0.setIdentity();
    } else {
      Eigen::Quaterniond quat(normal(rng), normal(rng), normal(rng), normal(rng));
      quat.normalize();
      R0 = quat.toRotationMatrix();
    }
    std::vector<double> trace;
    LmOutcome run = levenberg_marquardt(alignment_start(corrs, intr, R0), corrs, intr, opts,
                                        diag ? &trace : nullptr);
    total_iterations += run.iterations;
    if (run.objective < best.objective) {
      best = run;
      best_trace = std::move(trace);
    }
    // A numerically exact fit will not be beaten; skip the remaining starts.
    if (best.converged && best.objective < 1e-14 * (1.0 + wsum)) break;
  }

  if (diag) {
    diag->iterations = total_iterations;
    diag->objective_trace = std::move(best_trace);
  }
  if (hessian_at_solution) *hessian_at_solution = best.jtj;

  PnPResult result;
  result.pose = pose_from_chart(best.theta);
  result.objective = best.objective;
  result.iterations = total_iterations;
  result.converged = best.converged;
  return result;
}

// ---------------------------------------------------------------------------
// AMIS

namespace {

struct Proposal {
  Eigen::VectorXd mean;
  Eigen::MatrixXd chol;      // lower Cholesky factor of covariance
  double log_norm = 0.0;     // log normalization of the t pdf
  Eigen::MatrixXd cov_inv;
};

double lgamma_half(double x) { return std::lgamma(x); }

Proposal make_proposal(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, double nu,
                       bool* ok) {
  Proposal p;
  p.mean = mean;
  const auto d = static_cast<double>(mean.size());
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  *ok = llt.info() == Eigen::Success;
  if (!*ok) return p;
  p.chol = llt.matrixL();
  double log_det = 0.0;
  for (Eigen::Index i = 0; i < p.chol.rows(); ++i) {
    const double diag = p.chol(i, i);
    if (!(diag > 0.0) || !std::isfinite(diag)) {
      *ok = false;
      return p;
    }
    log_det += 2.0 * std::log(diag);
  }
  p.cov_inv = llt.solve(Eigen::MatrixXd::Identity(mean.size(), mean.size()));
  p.log_norm = lgamma_half(0.5 * (nu + d)) - lgamma_half(0.5 * nu) -
               0.5 * d * std::log(nu * kPi) - 0.5 * log_det;
  return p;
}

double t_log_pdf(const Proposal& p, const Eigen::VectorXd& x, double nu) {
  const auto d = static_cast<double>(x.size());
  const Eigen::VectorXd delta = x - p.mean;
  const double m2 = delta.dot(p.cov_inv * delta);
  return p.log_norm - 0.5 * (nu + d) * std::log1p(m2 / nu);
}

Eigen::VectorXd t_sample(const Proposal& p, double nu, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::gamma_distribution<double> gamma(0.5 * nu, 2.0);
  Eigen::VectorXd z(p.mean.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  const double w = gamma(rng);
  return p.mean + p.chol * z * std::sqrt(nu / std::max(w, 1e-12));
}

double logsumexp(const std::vector<double>& v) {
  double m = -kInf;
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return -kInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

AmisResult amis_log_integral(const std::function<double(const Eigen::VectorXd&)>& energy,
                             const Eigen::VectorXd& mean0, const Eigen::MatrixXd& cov0,
                             const AmisOptions& opts) {
  const Eigen::Index d = mean0.size();
  std::mt19937_64 rng(mix_seed(opts.seed, 0xa315));
  AmisResult result;

  const Eigen::MatrixXd fallback_cov =
      opts.fallback_scale * Eigen::MatrixXd::Identity(d, d);
  bool ok = false;
  Proposal p0 = make_proposal(mean0, cov0, opts.t_dof, &ok);
  if (!ok) {
    p0 = make_proposal(mean0, fallback_cov, opts.t_dof, &ok);
    ++result.resets;
  }
  std::vector<Proposal> proposals{p0};

  std::vector<Eigen::VectorXd> samples;
  std::vector<double> energies;

  for (int round = 0; round < opts.rounds; ++round) {
    const Proposal& current = proposals.back();
    for (int s = 0; s < opts.samples_per_round; ++s) {
      Eigen::VectorXd x = t_sample(current, opts.t_dof, rng);
      ++result.total_draws;
      const double e = energy(x);
      if (!std::isfinite(e)) continue;  // zero-weight draw outside the domain
      samples.push_back(std::move(x));
      energies.push_back(e);
    }
    if (round + 1 == opts.rounds) break;

    // Deterministic-mixture reweighting of every sample so far.
    std::vector<double> log_w(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::vector<double> comp(proposals.size());
      for (std::size_t k = 0; k < proposals.size(); ++k)
        comp[k] = t_log_pdf(proposals[k], samples[i], opts.t_dof);
      const double log_mix = logsumexp(comp) - std::log(static_cast<double>(proposals.size()));
      log_w[i] = -energies[i] - log_mix;
    }
    const double lse = logsumexp(log_w);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    if (std::isfinite(lse)) {
      for (std::size_t i = 0; i < samples.size(); ++i)
        mean += std::exp(log_w[i] - lse) * samples[i];
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const Eigen::VectorXd delta = samples[i] - mean;
        cov += std::exp(log_w[i] - lse) * delta * delta.transpose();
      }
      cov += 1e-12 * Eigen::MatrixXd::Identity(d, d);
      Proposal next = make_proposal(mean, cov, opts.t_dof, &ok);
      if (!ok) {
        next = make_proposal(mean, fallback_cov, opts.t_dof, &ok);
        ++result.resets;
      }
      proposals.push_back(next);
    } else {
      proposals.push_back(make_proposal(mean0, fallback_cov, opts.t_dof, &ok));
      ++result.resets;
    }
  }

  // Final estimate under the full deterministic mixture.
  result.samples = std::move(samples);
  result.log_mix.resize(result.samples.size());
  std::vector<double> log_w(result.samples.size());
  for (std::size_t i = 0; i < result.samples.size(); ++i) {
    std::vector<double> comp(proposals.size());
    for (std::size_t k = 0; k < proposals.size(); ++k)
      comp[k] = t_log_pdf(proposals[k], result.samples[i], opts.t_dof);
    result.log_mix[i] =
        logsumexp(comp) - std::log(static_cast<double>(proposals.size()));
    log_w[i] = -energies[i] - result.log_mix[i];
  }
  result.log_integral =
      logsumexp(log_w) - std::log(static_cast<double>(std::max<std::size_t>(result.total_draws, 1)));
  return result;
}

// ---------------------------------------------------------------------------
// Differentiable MC PnP loss

namespace {

/// Batched tensor energy: E[s] = 1/2 sum_j beta_j ||P(R_s p_j + t_s) - q_j||^2.
ad::Tensor energy_graph(const ad::Tensor& points, const ad::Tensor& beta,
                        const std::vector<Eigen::Vector2d>& pixels, const geom::Intrinsics& intr,
                        const std::vector<geom::Pose>& poses, double depth_clamp) {
  const std::size_t m = points.extent(0);
  const std::size_t s = poses.size();
  std::vector<double> rt(s * 9), tvec(s * 3), qx(m), qy(m);
  for (std::size_t i = 0; i < s; ++i) {
    const Eigen::Matrix3d rtrans = poses[i].R.transpose();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rt[i * 9 + static_cast<std::size_t>(r) * 3 + c] = rtrans(r, c);
    for (int r = 0; r < 3; ++r) tvec[i * 3 + r] = poses[i].t(r);
  }
  for (std::size_t j = 0; j < m; ++j) {
    qx[j] = pixels[j].x();
    qy[j] = pixels[j].y();
  }
  ad::Tensor rts = ad::Tensor::from({s, 3, 3}, std::move(rt));
  ad::Tensor ts = ad::Tensor::from({s, 1, 3}, std::move(tvec));
  ad::Tensor qxs = ad::Tensor::from({1, m, 1}, std::move(qx));
  ad::Tensor qys = ad::Tensor::from({1, m, 1}, std::move(qy));

  ad::Tensor pb = ad::broadcast_to(ad::reshape(points, {1, m, 3}), {s, m, 3});
  ad::Tensor xc = ad::add(ad::matmul(pb, rts), ts);  // [S,M,3] camera-frame points
  ad::Tensor z = ad::clamp_min(ad::slice(xc, 2, 2, 1), depth_clamp);
  ad::Tensor u = ad::add(ad::mul(ad::div(ad::slice(xc, 2, 0, 1), z), intr.fx), intr.cx);
  ad::Tensor v = ad::add(ad::mul(ad::div(ad::slice(xc, 2, 1, 1), z), intr.fy), intr.cy);
  ad::Tensor du = ad::sub(u, qxs);
  ad::Tensor dv = ad::sub(v, qys);
  ad::Tensor sq = ad::reshape(ad::add(ad::square(du), ad::square(dv)), {s, m});
  ad::Tensor weighted = ad::mul(sq, ad::reshape(beta, {1, m}));
  return ad::mul(ad::sum(weighted, 1), 0.5);  // [S]
}

}  // namespace

McResult mc_pose_loss(const ad::Tensor& points, const ad::Tensor& beta,
                      const std::vector<Eigen::Vector2d>& pixels, const geom::Intrinsics& intr,
                      const geom::Pose& gt_pose, const McOptions& opts,
                      const McSampleSet* frozen) {
  if (points.ndim() != 2 || points.extent(1) != 3)
    throw ShapeError("mc_pose_loss: points must be [M,3]");
  const std::size_t m = points.extent(0);
  if (beta.size() != m || pixels.size() != m)
    throw ShapeError("mc_pose_loss: points/beta/pixels count mismatch");

  McResult result;

  if (frozen != nullptr) {
    result.samples = *frozen;
  } else {
    // Plain-value correspondence set for the solver and the sampler.
    std::vector<Correspondence> corrs(m);
    for (std::size_t j = 0; j < m; ++j) {
      corrs[j].p = Eigen::Vector3d(points.data()[j * 3], points.data()[j * 3 + 1],
                                   points.data()[j * 3 + 2]);
      corrs[j].q = pixels[j];
      corrs[j].beta = beta.data()[j];
    }
    Matrix6d hessian;
    PnPResult init = solve(corrs, intr, opts.solve, &result.diagnostics, &hessian);

    Eigen::MatrixXd cov0 =
        (hessian + 1e-9 * Matrix6d::Identity()).ldlt().solve(Matrix6d::Identity());
    const auto energy = [&](const Eigen::VectorXd& theta) -> double {
      if (theta.head<3>().norm() > opts.rotation_domain) return kInf;
      Vector6d th = theta;
      return objective(th, corrs, intr, opts.solve.depth_clamp, nullptr);
    };
    AmisResult amis = amis_log_integral(energy, chart_from_pose(init.pose), cov0, opts.amis);
    result.diagnostics.amis_resets = amis.resets;
    result.samples.total_draws = amis.total_draws;
    result.samples.thetas.reserve(amis.samples.size());
    for (const auto& x : amis.samples) result.samples.thetas.push_back(Vector6d(x));
    result.samples.log_mix = std::move(amis.log_mix);
  }

  if (result.samples.thetas.empty())
    throw Error("mc_pose_loss: no finite-energy pose samples");

  // First term: reprojection energy at the ground-truth pose.
  ad::Tensor e_gt = energy_graph(points, beta, pixels, intr, {gt_pose}, opts.solve.depth_clamp);
  result.first_term = e_gt.item();

  // Log-integral term over the frozen sample poses.
  std::vector<geom::Pose> sample_poses;
  sample_poses.reserve(result.samples.thetas.size());
  for (const auto& th : result.samples.thetas) sample_poses.push_back(pose_from_chart(th));
  ad::Tensor e_s = energy_graph(points, beta, pixels, intr, sample_poses, opts.solve.depth_clamp);

  ad::Tensor neg_terms =
      ad::sub(ad::neg(e_s), ad::Tensor::from({result.samples.thetas.size()},
                                             std::vector<double>(result.samples.log_mix)));
  // Max-shift log-sum-exp; the shift is a constant taken from current values.
  double shift = -kInf;
  for (std::size_t i = 0; i < neg_terms.size(); ++i)
    shift = std::max(shift, neg_terms.data()[i]);
  ad::Tensor lse =
      ad::add(ad::log(ad::sum(ad::exp(ad::add(neg_terms, -shift)))), shift);
  const double log_n = std::log(static_cast<double>(std::max<std::size_t>(
      result.samples.total_draws > 0 ? result.samples.total_draws : result.samples.thetas.size(),
      1)));
  ad::Tensor log_integral = ad::add(lse, -log_n);
  result.log_integral = log_integral.item();

  result.loss = ad::add(ad::reshape(e_gt, {1}), log_integral);
  return result;
}

}  // namespace pflrm::pnp

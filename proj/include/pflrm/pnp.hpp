#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pflrm/camera.hpp"
#include "pflrm/tensor.hpp"

namespace pflrm::pnp {

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

struct Correspondence {
  Eigen::Vector3d p;   // predicted object point
  Eigen::Vector2d q;   // patch-center pixel
  double beta = 1.0;   // alpha * confidence, >= 0
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

struct SolveOptions {
  int starts = 8;             // 1 centroid-alignment start + (starts-1) random rotations
  int max_iterations = 100;   // LM iterations per start
  double grad_tol = 1e-8;
  double lambda_init = 1e-3;  // x10 / /10 damping schedule
  double depth_clamp = 0.05;  // behind-camera fallback depth
  std::uint64_t seed = 0;
};

struct PnPResult {
  geom::Pose pose;
  double objective = 0.0;  // 1/2 sum of residuals at the solution
  int iterations = 0;
  bool converged = false;
};

struct Diagnostics {
  int iterations = 0;
  std::vector<double> objective_trace;
  int amis_resets = 0;
  std::string to_json_line() const;
};

// 6-DOF chart: [axis-angle; translation].
Vector6d chart_from_pose(const geom::Pose& pose);
geom::Pose pose_from_chart(const Vector6d& theta);

/// xi = beta * ||P_clamped(R p + t) - q||^2 (px^2); the projection clamps
/// depth to `depth_clamp` so bad intermediate poses stay finite.
double residual(const geom::Pose& pose, const Correspondence& corr, const geom::Intrinsics& intr,
                double depth_clamp = 0.05);

/// 1/2 sum_j xi over the chart, and its analytic gradient.
double objective(const Vector6d& theta, std::span<const Correspondence> corrs,
                 const geom::Intrinsics& intr, double depth_clamp,
                 Vector6d* gradient = nullptr);

/// Multi-start Levenberg-Marquardt weighted PnP. Throws DegenerateError with
/// fewer than 4 correspondences of positive weight or a collinear point set.
PnPResult solve(std::span<const Correspondence> corrs, const geom::Intrinsics& intr,
                const SolveOptions& opts = {}, Diagnostics* diag = nullptr,
                Matrix6d* hessian_at_solution = nullptr);

// ---------------------------------------------------------------------------
// Adaptive multiple importance sampling

struct AmisOptions {
  int rounds = 4;
  int samples_per_round = 128;
  double t_dof = 3.0;          // multivariate t proposal
  double fallback_scale = 1e-2;  // isotropic covariance used on degenerate refits
  std::uint64_t seed = 0;
};

struct AmisResult {
  double log_integral = 0.0;
  std::vector<Eigen::VectorXd> samples;   // finite-energy draws only
  std::vector<double> log_mix;            // final mixture log-density per sample
  std::size_t total_draws = 0;            // includes infinite-energy draws
  int resets = 0;
};

/// Estimates log ∫ exp(-energy(x)) dx over R^d with AMIS: t-distribution
/// proposals refit each round, all past samples reweighted under the mixture.
/// `energy` may return +inf to restrict the domain.
AmisResult amis_log_integral(const std::function<double(const Eigen::VectorXd&)>& energy,
                             const Eigen::VectorXd& mean0, const Eigen::MatrixXd& cov0,
                             const AmisOptions& opts);

// ---------------------------------------------------------------------------
// Differentiable Monte-Carlo PnP loss

struct McOptions {
  SolveOptions solve;
  AmisOptions amis;
  double rotation_domain = 1.25 * 3.14159265358979323846;  // ||omega|| bound
};

/// Frozen pose samples with their mixture densities; reusing a set across two
/// evaluations keeps the Monte-Carlo part of the loss identical.
struct McSampleSet {
  std::vector<Vector6d> thetas;
  std::vector<double> log_mix;
  std::size_t total_draws = 0;
};

struct McResult {
  ad::Tensor loss;          // scalar, differentiable in points/beta
  double first_term = 0.0;  // 1/2 sum xi at the ground-truth pose
  double log_integral = 0.0;
  McSampleSet samples;
  Diagnostics diagnostics;
};

/// L_y = 1/2 sum_j xi(y_gt) + log ∫ exp(-1/2 sum_j xi(y)) dy, the integral
/// estimated by AMIS around the solve() pose. Gradients flow through xi at
/// the (detached) sample poses and through the first term.
McResult mc_pose_loss(const ad::Tensor& points, const ad::Tensor& beta,
                      const std::vector<Eigen::Vector2d>& pixels, const geom::Intrinsics& intr,
                      const geom::Pose& gt_pose, const McOptions& opts,
                      const McSampleSet* frozen = nullptr);

}  // namespace pflrm::pnp

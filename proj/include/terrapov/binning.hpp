#pragma once

#include "terrapov/common.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <span>
#include <vector>

namespace terrapov::binning {

enum class BinningErrc
{
	DegenerateData,
	TooFewPoints,
};

using BinningError = CodedError<BinningErrc>;

/// One-dimensional Gaussian mixture. Components are sorted by ascending mean,
/// so bin 0 is always the lowest-valued component.
struct GmmModel
{
	Eigen::VectorXd weights;
	Eigen::VectorXd means;
	Eigen::VectorXd variances;
	double log_likelihood = 0.0;
	int iterations = 0;
	/// Log-likelihood before the first M-step and after each one.
	std::vector<double> log_likelihood_trace;

	int n_components() const { return static_cast<int>(means.size()); }
};

struct GmmOptions
{
	int n_components = 3;
	std::uint64_t seed = 0;
	double tol = 1e-8;
	int max_iter = 500;
	/// Extra random-initialization runs; the quantile-initialized run is always first.
	int restarts = 0;
};

GmmModel fit_gmm(std::span<const double> values, const GmmOptions& options = {});

/// Responsibilities of each component for x; computed in log space.
Eigen::VectorXd posterior(const GmmModel& model, double x);

/// Argmax of the posterior; ties go to the lower index.
int assign_bin(const GmmModel& model, double x);

nlohmann::json to_json(const GmmModel& model);
GmmModel gmm_from_json(const nlohmann::json& j);

} // namespace terrapov::binning

#pragma once

#include "terrapov/common.hpp"
#include "terrapov/survey.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace terrapov::regress {

enum class RegressErrc
{
	MissingCluster,
	NonFinite,
	DimensionMismatch,
	ZeroVariance,
	TooFewSamples,
	InvalidConfig,
};

using RegressError = CodedError<RegressErrc>;

enum class TargetTransform
{
	Raw,
	Log,
};

std::string to_string(TargetTransform t);
TargetTransform transform_from_string(const std::string& s);
/// Log mode requires strictly positive values.
double apply_transform(TargetTransform t, double v);

struct FeatureMatrix
{
	std::vector<std::string> cluster_ids;
	Eigen::MatrixXd X;
	Eigen::VectorXd y;
};

/// Row i of `tile_features` belongs to tile_cluster_ids[i]. Each output row is
/// the mean of its cluster's tile vectors, summed in a canonical order so the
/// result does not depend on tile order. Rows follow cluster_id order.
FeatureMatrix aggregate_features(std::span<const std::string> tile_cluster_ids, const Eigen::MatrixXd& tile_features,
                                 std::span<const survey::ClusterRecord> clusters,
                                 TargetTransform transform = TargetTransform::Raw);

struct Scaler
{
	Eigen::VectorXd mean;
	Eigen::VectorXd std;
	/// Zero-variance columns; they map to exact zeros.
	std::vector<bool> constant;

	Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const;
};

struct Standardized
{
	Scaler scaler;
	Eigen::MatrixXd X;
};

/// Column-wise (x - mean) / std with the population standard deviation.
Standardized standardize(const Eigen::MatrixXd& X);

struct RidgeModel
{
	double alpha = 0.0;
	Eigen::VectorXd weights;
	double intercept = 0.0;
};

/// Closed-form ridge on centered data; the intercept is not penalized.
RidgeModel ridge_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha);
Eigen::VectorXd ridge_predict(const RidgeModel& model, const Eigen::MatrixXd& X);

/// 1 - RSS / TSS.
double r_squared(const Eigen::VectorXd& actual, const Eigen::VectorXd& predicted);

struct CvConfig
{
	int k = 5;
	std::uint64_t seed = 0;
	std::vector<double> alpha_grid = {1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4, 1e5};

	void validate() const;
	nlohmann::json to_json() const;
	static CvConfig from_json(const nlohmann::json& j);
};

/// Seeded shuffle cut into k contiguous chunks; the first n % k folds get one
/// extra sample. Indices inside each fold are ascending.
std::vector<std::vector<std::size_t>> make_folds(std::size_t n, int k, std::uint64_t seed);

/// Fits scaler and ridge on the `train` rows only and predicts the `test` rows.
Eigen::VectorXd fit_fold(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::span<const std::size_t> train,
                         std::span<const std::size_t> test, double alpha);

struct OofPrediction
{
	std::string cluster_id;
	double actual = 0.0;
	double predicted = 0.0;
	int fold = 0;
};

struct CvReport
{
	double best_alpha = 0.0;
	std::vector<double> per_fold_mse;
	double mean_mse = 0.0;
	/// NaN for a fold whose actual values are all identical.
	std::vector<double> per_fold_r2;
	double pooled_r2 = 0.0;
	/// In FeatureMatrix row order.
	std::vector<OofPrediction> predictions;
	/// Pooled R^2 for every grid alpha, in grid order.
	std::vector<std::pair<double, double>> alpha_scores;

	nlohmann::json to_json() const;
	static CvReport from_json(const nlohmann::json& j);
	/// cluster_id,actual,predicted,fold
	std::string predictions_csv() const;
};

/// Selects alpha by pooled out-of-fold R^2 (ties go to the smaller alpha).
CvReport cross_validate(const FeatureMatrix& fm, const CvConfig& config);

} // namespace terrapov::regress

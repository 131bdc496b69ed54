#include "terrapov/regress.hpp"

#include "terrapov/csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace terrapov::regress {

std::string to_string(TargetTransform t)
{
	return t == TargetTransform::Log ? "log" : "raw";
}

TargetTransform transform_from_string(const std::string& s)
{
	if (s == "raw")
		return TargetTransform::Raw;
	if (s == "log")
		return TargetTransform::Log;
	throw RegressError(RegressErrc::InvalidConfig, "unknown target transform '" + s + "' (expected raw or log)");
}

double apply_transform(TargetTransform t, double v)
{
	if (t == TargetTransform::Raw)
		return v;
	if (!(v > 0.0))
		throw RegressError(RegressErrc::NonFinite, "log target requires positive consumption, got " + format_double(v));
	return std::log(v);
}

FeatureMatrix aggregate_features(std::span<const std::string> tile_cluster_ids, const Eigen::MatrixXd& tile_features,
                                 std::span<const survey::ClusterRecord> clusters, TargetTransform transform)
{
	if (static_cast<Eigen::Index>(tile_cluster_ids.size()) != tile_features.rows())
		throw RegressError(RegressErrc::DimensionMismatch, "aggregate_features: " + std::to_string(tile_cluster_ids.size()) +
		                                                       " ids for " + std::to_string(tile_features.rows()) + " rows");
	if (!tile_features.allFinite())
		throw RegressError(RegressErrc::NonFinite, "aggregate_features: non-finite tile feature");

	std::map<std::string, std::vector<Eigen::Index>> rows_of;
	for (std::size_t i = 0; i < tile_cluster_ids.size(); ++i)
		rows_of[tile_cluster_ids[i]].push_back(static_cast<Eigen::Index>(i));

	std::vector<const survey::ClusterRecord*> order;
	for (const auto& c : clusters)
		order.push_back(&c);
	std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->cluster_id < b->cluster_id; });

	const Eigen::Index d = tile_features.cols();
	FeatureMatrix fm;
	fm.X.resize(static_cast<Eigen::Index>(order.size()), d);
	fm.y.resize(static_cast<Eigen::Index>(order.size()));
	for (std::size_t r = 0; r < order.size(); ++r) {
		const auto& c = *order[r];
		auto it = rows_of.find(c.cluster_id);
		if (it == rows_of.end())
			throw RegressError(RegressErrc::MissingCluster, "cluster " + c.cluster_id + " has no tile features");
		auto rows = it->second;
		std::sort(rows.begin(), rows.end(), [&](Eigen::Index a, Eigen::Index b) {
			for (Eigen::Index j = 0; j < d; ++j) {
				if (tile_features(a, j) != tile_features(b, j))
					return tile_features(a, j) < tile_features(b, j);
			}
			return false;
		});
		Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
		for (auto row : rows)
			sum += tile_features.row(row);
		const auto ri = static_cast<Eigen::Index>(r);
		fm.X.row(ri) = sum / static_cast<double>(rows.size());
		fm.y(ri) = apply_transform(transform, c.consumption_per_capita);
		fm.cluster_ids.push_back(c.cluster_id);
	}
	return fm;
}

Eigen::MatrixXd Scaler::apply(const Eigen::MatrixXd& X) const
{
	if (X.cols() != mean.size())
		throw RegressError(RegressErrc::DimensionMismatch, "scaler fitted on " + std::to_string(mean.size()) +
		                                                       " columns, got " + std::to_string(X.cols()));
	Eigen::MatrixXd out(X.rows(), X.cols());
	for (Eigen::Index j = 0; j < X.cols(); ++j) {
		if (constant[static_cast<std::size_t>(j)])
			out.col(j).setZero();
		else
			out.col(j) = (X.col(j).array() - mean(j)) / std(j);
	}
	return out;
}

Standardized standardize(const Eigen::MatrixXd& X)
{
	if (X.rows() < 2)
		throw RegressError(RegressErrc::TooFewSamples, "standardize needs at least 2 rows");
	Standardized s;
	const auto n = static_cast<double>(X.rows());
	s.scaler.mean = X.colwise().mean().transpose();
	s.scaler.std.resize(X.cols());
	s.scaler.constant.resize(static_cast<std::size_t>(X.cols()));
	for (Eigen::Index j = 0; j < X.cols(); ++j) {
		const double m = s.scaler.mean(j);
		const double var = (X.col(j).array() - m).square().sum() / n;
		const double sd = std::sqrt(var);
		// Relative guard: rounding in the mean leaves residual spread on constant columns.
		const bool flat = sd <= 1e-12 * std::max(1.0, std::abs(m));
		s.scaler.constant[static_cast<std::size_t>(j)] = flat;
		s.scaler.std(j) = flat ? 1.0 : sd;
	}
	s.X = s.scaler.apply(X);
	return s;
}

RidgeModel ridge_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha)
{
	if (X.rows() != y.size())
		throw RegressError(RegressErrc::DimensionMismatch, "ridge_fit: X has " + std::to_string(X.rows()) + " rows, y has " +
		                                                       std::to_string(y.size()));
	if (X.rows() == 0)
		throw RegressError(RegressErrc::TooFewSamples, "ridge_fit: no samples");
	if (!X.allFinite() || !y.allFinite() || !std::isfinite(alpha))
		throw RegressError(RegressErrc::NonFinite, "ridge_fit: non-finite input");
	if (alpha < 0.0)
		throw RegressError(RegressErrc::InvalidConfig, "ridge_fit: alpha must be >= 0");

	const Eigen::RowVectorXd xbar = X.colwise().mean();
	const double ybar = y.mean();
	const Eigen::MatrixXd Xc = X.rowwise() - xbar;
	const Eigen::VectorXd yc = y.array() - ybar;
	const Eigen::Index n = X.rows(), d = X.cols();

	RidgeModel m;
	m.alpha = alpha;
	bool solved = false;
	if (alpha > 0.0) {
		if (d <= n) {
			Eigen::MatrixXd A = Xc.transpose() * Xc;
			A.diagonal().array() += alpha;
			Eigen::LLT<Eigen::MatrixXd> llt(A);
			if (llt.info() == Eigen::Success) {
				m.weights = llt.solve(Xc.transpose() * yc);
				solved = true;
			}
		} else {
			// Dual form: w = Xc^T (Xc Xc^T + alpha I)^-1 yc.
			Eigen::MatrixXd K = Xc * Xc.transpose();
			K.diagonal().array() += alpha;
			Eigen::LLT<Eigen::MatrixXd> llt(K);
			if (llt.info() == Eigen::Success) {
				m.weights = Xc.transpose() * llt.solve(yc);
				solved = true;
			}
		}
	}
	if (!solved)
		m.weights = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(Xc).solve(yc);
	m.intercept = ybar - xbar.dot(m.weights);
	if (!m.weights.allFinite() || !std::isfinite(m.intercept))
		throw RegressError(RegressErrc::NonFinite, "ridge_fit: solution is not finite");
	return m;
}

Eigen::VectorXd ridge_predict(const RidgeModel& model, const Eigen::MatrixXd& X)
{
	if (X.cols() != model.weights.size())
		throw RegressError(RegressErrc::DimensionMismatch, "ridge_predict: model has " +
		                                                       std::to_string(model.weights.size()) + " weights, X has " +
		                                                       std::to_string(X.cols()) + " columns");
	return (X * model.weights).array() + model.intercept;
}

double r_squared(const Eigen::VectorXd& actual, const Eigen::VectorXd& predicted)
{
	if (actual.size() == 0 || actual.size() != predicted.size())
		throw RegressError(RegressErrc::DimensionMismatch, "r_squared: lengths " + std::to_string(actual.size()) + " and " +
		                                                       std::to_string(predicted.size()));
	const double mean = actual.mean();
	const double tss = (actual.array() - mean).square().sum();
	if (tss == 0.0)
		throw RegressError(RegressErrc::ZeroVariance, "r_squared: actual values are all identical");
	const double rss = (actual - predicted).squaredNorm();
	return 1.0 - rss / tss;
}

void CvConfig::validate() const
{
	if (k < 2)
		throw RegressError(RegressErrc::InvalidConfig, "cv: k must be at least 2");
	if (alpha_grid.empty())
		throw RegressError(RegressErrc::InvalidConfig, "cv: alpha grid is empty");
	for (double a : alpha_grid)
		if (!(a >= 0.0) || !std::isfinite(a))
			throw RegressError(RegressErrc::InvalidConfig, "cv: alpha values must be finite and >= 0");
}

nlohmann::json CvConfig::to_json() const
{
	return {{"k", k}, {"seed", seed}, {"alpha_grid", alpha_grid}};
}

CvConfig CvConfig::from_json(const nlohmann::json& j)
{
	CvConfig c;
	c.k = j.value("k", c.k);
	c.seed = j.value("seed", c.seed);
	if (j.contains("alpha_grid"))
		c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
	c.validate();
	return c;
}

std::vector<std::vector<std::size_t>> make_folds(std::size_t n, int k, std::uint64_t seed)
{
	if (k < 2)
		throw RegressError(RegressErrc::InvalidConfig, "make_folds: k must be at least 2");
	if (n < static_cast<std::size_t>(k))
		throw RegressError(RegressErrc::TooFewSamples,
		                   "make_folds: " + std::to_string(n) + " samples for " + std::to_string(k) + " folds");
	std::vector<std::size_t> perm(n);
	std::iota(perm.begin(), perm.end(), std::size_t{0});
	SplitMix64 rng(hash_seed(seed, {0x666f6c64ULL}));
	shuffle(perm, rng);

	const std::size_t kk = static_cast<std::size_t>(k);
	std::vector<std::vector<std::size_t>> folds(kk);
	std::size_t pos = 0;
	for (std::size_t f = 0; f < kk; ++f) {
		const std::size_t size = n / kk + (f < n % kk ? 1 : 0);
		folds[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos), perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
		std::sort(folds[f].begin(), folds[f].end());
		pos += size;
	}
	return folds;
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, std::span<const std::size_t> idx)
{
	Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
	for (std::size_t i = 0; i < idx.size(); ++i)
		out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
	return out;
}

Eigen::VectorXd take(const Eigen::VectorXd& v, std::span<const std::size_t> idx)
{
	Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
	for (std::size_t i = 0; i < idx.size(); ++i)
		out(static_cast<Eigen::Index>(i)) = v(static_cast<Eigen::Index>(idx[i]));
	return out;
}

nlohmann::json number_or_null(double v)
{
	return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_or_nan(const nlohmann::json& j)
{
	return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

} // namespace

Eigen::VectorXd fit_fold(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::span<const std::size_t> train,
                         std::span<const std::size_t> test, double alpha)
{
	const Standardized s = standardize(take_rows(X, train));
	const RidgeModel m = ridge_fit(s.X, take(y, train), alpha);
	return ridge_predict(m, s.scaler.apply(take_rows(X, test)));
}

CvReport cross_validate(const FeatureMatrix& fm, const CvConfig& config)
{
	config.validate();
	const std::size_t n = static_cast<std::size_t>(fm.X.rows());
	if (fm.y.size() != fm.X.rows() || fm.cluster_ids.size() != n)
		throw RegressError(RegressErrc::DimensionMismatch, "cross_validate: feature matrix parts disagree in length");
	if (n < static_cast<std::size_t>(config.k) || n < 3)
		throw RegressError(RegressErrc::TooFewSamples,
		                   "cross_validate: " + std::to_string(n) + " samples for " + std::to_string(config.k) + " folds");

	const auto folds = make_folds(n, config.k, config.seed);
	std::vector<std::vector<std::size_t>> train_of(folds.size());
	for (std::size_t f = 0; f < folds.size(); ++f)
		for (std::size_t g = 0; g < folds.size(); ++g)
			if (g != f)
				train_of[f].insert(train_of[f].end(), folds[g].begin(), folds[g].end());
	for (auto& t : train_of)
		std::sort(t.begin(), t.end());

	auto oof_for = [&](double alpha) {
		Eigen::VectorXd oof(static_cast<Eigen::Index>(n));
		for (std::size_t f = 0; f < folds.size(); ++f) {
			const Eigen::VectorXd p = fit_fold(fm.X, fm.y, train_of[f], folds[f], alpha);
			for (std::size_t i = 0; i < folds[f].size(); ++i)
				oof(static_cast<Eigen::Index>(folds[f][i])) = p(static_cast<Eigen::Index>(i));
		}
		return oof;
	};

	CvReport report;
	double best_r2 = -std::numeric_limits<double>::infinity();
	Eigen::VectorXd best_oof;
	bool have_best = false;
	for (double alpha : config.alpha_grid) {
		const Eigen::VectorXd oof = oof_for(alpha);
		const double r2 = r_squared(fm.y, oof);
		report.alpha_scores.emplace_back(alpha, r2);
		if (!std::isfinite(r2))
			continue;
		if (!have_best || r2 > best_r2 || (r2 == best_r2 && alpha < report.best_alpha)) {
			best_r2 = r2;
			report.best_alpha = alpha;
			best_oof = oof;
			have_best = true;
		}
	}
	if (!have_best)
		throw RegressError(RegressErrc::NonFinite, "cross_validate: no alpha produced a finite R^2");

	report.pooled_r2 = best_r2;
	std::vector<int> fold_of(n);
	for (std::size_t f = 0; f < folds.size(); ++f) {
		const Eigen::VectorXd a = take(fm.y, folds[f]);
		const Eigen::VectorXd p = take(best_oof, folds[f]);
		report.per_fold_mse.push_back((a - p).squaredNorm() / static_cast<double>(a.size()));
		const double tss = (a.array() - a.mean()).square().sum();
		report.per_fold_r2.push_back(tss > 0.0 ? r_squared(a, p) : std::numeric_limits<double>::quiet_NaN());
		for (std::size_t i : folds[f])
			fold_of[i] = static_cast<int>(f);
	}
	report.mean_mse = std::accumulate(report.per_fold_mse.begin(), report.per_fold_mse.end(), 0.0) /
	                  static_cast<double>(report.per_fold_mse.size());
	for (std::size_t i = 0; i < n; ++i) {
		const auto ii = static_cast<Eigen::Index>(i);
		report.predictions.push_back({fm.cluster_ids[i], fm.y(ii), best_oof(ii), fold_of[i]});
	}
	return report;
}

nlohmann::json CvReport::to_json() const
{
	nlohmann::json j;
	j["best_alpha"] = best_alpha;
	j["per_fold_mse"] = per_fold_mse;
	j["mean_mse"] = mean_mse;
	auto r2 = nlohmann::json::array();
	for (double v : per_fold_r2)
		r2.push_back(number_or_null(v));
	j["per_fold_r2"] = r2;
	j["pooled_r2"] = pooled_r2;
	auto scores = nlohmann::json::array();
	for (const auto& [a, r] : alpha_scores)
		scores.push_back({{"alpha", a}, {"pooled_r2", number_or_null(r)}});
	j["alpha_scores"] = scores;
	auto preds = nlohmann::json::array();
	for (const auto& p : predictions)
		preds.push_back({{"cluster_id", p.cluster_id}, {"actual", p.actual}, {"predicted", p.predicted}, {"fold", p.fold}});
	j["predictions"] = preds;
	return j;
}

CvReport CvReport::from_json(const nlohmann::json& j)
{
	CvReport r;
	r.best_alpha = j.at("best_alpha").get<double>();
	r.per_fold_mse = j.at("per_fold_mse").get<std::vector<double>>();
	r.mean_mse = j.at("mean_mse").get<double>();
	for (const auto& v : j.at("per_fold_r2"))
		r.per_fold_r2.push_back(number_or_nan(v));
	r.pooled_r2 = j.at("pooled_r2").get<double>();
	for (const auto& s : j.value("alpha_scores", nlohmann::json::array()))
		r.alpha_scores.emplace_back(s.at("alpha").get<double>(), number_or_nan(s.at("pooled_r2")));
	for (const auto& p : j.at("predictions"))
		r.predictions.push_back({p.at("cluster_id").get<std::string>(), p.at("actual").get<double>(),
		                         p.at("predicted").get<double>(), p.at("fold").get<int>()});
	return r;
}

std::string CvReport::predictions_csv() const
{
	std::string out = "cluster_id,actual,predicted,fold\n";
	for (const auto& p : predictions)
		out += csv::escape(p.cluster_id) + "," + format_double(p.actual) + "," + format_double(p.predicted) + "," +
		       std::to_string(p.fold) + "\n";
	return out;
}

} // namespace terrapov::regress

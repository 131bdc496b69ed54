#include "terrapov/regress.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

using namespace terrapov;
using namespace terrapov::regress;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Plain gradient descent on sum (y - b - Xw)^2 + alpha |w|^2 with the
// intercept b unpenalized. Independent of the closed-form solver.
RidgeModel gd_ridge(const MatrixXd& X, const VectorXd& y, double alpha)
{
	const Eigen::Index n = X.rows(), d = X.cols();
	MatrixXd A(n, d + 1);
	A.col(0).setOnes();
	A.rightCols(d) = X;
	const double lmax = Eigen::SelfAdjointEigenSolver<MatrixXd>(A.transpose() * A).eigenvalues().maxCoeff();
	const double step = 1.0 / (2.0 * lmax + 2.0 * alpha);
	VectorXd theta = VectorXd::Zero(d + 1);
	for (int it = 0; it < 2000000; ++it) {
		VectorXd g = 2.0 * A.transpose() * (A * theta - y);
		g.tail(d) += 2.0 * alpha * theta.tail(d);
		theta -= step * g;
		if (g.norm() < 1e-11)
			break;
	}
	RidgeModel m;
	m.alpha = alpha;
	m.intercept = theta[0];
	m.weights = theta.tail(d);
	return m;
}

MatrixXd random_matrix(SplitMix64& rng, Eigen::Index n, Eigen::Index d)
{
	MatrixXd m(n, d);
	for (Eigen::Index k = 0; k < m.size(); ++k)
		m.data()[k] = rng.normal();
	return m;
}

FeatureMatrix planted(SplitMix64& rng, int n, int d, double noise, VectorXd* w_true = nullptr)
{
	FeatureMatrix fm;
	fm.X = random_matrix(rng, n, d);
	VectorXd w(d);
	for (int j = 0; j < d; ++j)
		w[j] = rng.normal() * 2.0;
	fm.y = fm.X * w + VectorXd::Constant(n, 5.0);
	for (int i = 0; i < n; ++i) {
		fm.y[i] += noise * rng.normal();
		char buf[8];
		std::snprintf(buf, sizeof(buf), "K%03d", i);
		fm.cluster_ids.push_back(buf);
	}
	if (w_true)
		*w_true = w;
	return fm;
}

RegressErrc regress_error(const std::function<void()>& f)
{
	try {
		f();
	} catch (const RegressError& e) {
		return e.code();
	}
	FAIL("expected a RegressError");
	return RegressErrc::InvalidConfig;
}

survey::ClusterRecord cluster(const std::string& id, double consumption)
{
	survey::ClusterRecord c;
	c.cluster_id = id;
	c.consumption_per_capita = consumption;
	c.n_households = 1;
	return c;
}

} // namespace

TEST_CASE("feature aggregation")
{
	const std::vector<std::string> ids = {"b", "a", "b", "c"};
	MatrixXd f(4, 2);
	f << 1, 2, 10, 20, 3, 6, 0.5, 0.25;
	const std::vector<survey::ClusterRecord> cl = {cluster("c", 9), cluster("a", 100), cluster("b", 4)};
	const auto fm = aggregate_features(ids, f, cl);
	CHECK(fm.cluster_ids == std::vector<std::string>{"a", "b", "c"});
	CHECK(fm.X.row(0) == Eigen::RowVector2d(10, 20));
	CHECK(fm.X.row(1) == Eigen::RowVector2d(2, 4));
	CHECK(fm.X.row(2) == Eigen::RowVector2d(0.5, 0.25));
	CHECK(fm.y == Eigen::Vector3d(100, 4, 9));

	const auto logged = aggregate_features(ids, f, cl, TargetTransform::Log);
	CHECK(logged.y[0] == std::log(100.0));

	// Tile order does not matter.
	SplitMix64 rng(4);
	std::vector<std::string> many_ids;
	MatrixXd many(30, 3);
	for (int i = 0; i < 30; ++i) {
		many_ids.push_back(std::string(1, static_cast<char>('a' + i % 3)));
		for (int j = 0; j < 3; ++j)
			many(i, j) = rng.normal() * 1e3;
	}
	const auto base = aggregate_features(many_ids, many, cl);
	std::vector<int> perm(30);
	for (int i = 0; i < 30; ++i)
		perm[static_cast<std::size_t>(i)] = i;
	for (int trial = 0; trial < 5; ++trial) {
		shuffle(perm, rng);
		std::vector<std::string> pid;
		MatrixXd pf(30, 3);
		for (int i = 0; i < 30; ++i) {
			pid.push_back(many_ids[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
			pf.row(i) = many.row(perm[static_cast<std::size_t>(i)]);
		}
		CHECK(aggregate_features(pid, pf, cl).X == base.X);
	}

	const std::vector<survey::ClusterRecord> extra = {cluster("a", 1), cluster("z", 1)};
	CHECK(regress_error([&] { aggregate_features(ids, f, extra); }) == RegressErrc::MissingCluster);
	const std::vector<std::string> short_ids = {"a"};
	CHECK(regress_error([&] { aggregate_features(short_ids, f, cl); }) == RegressErrc::DimensionMismatch);
	MatrixXd nan = f;
	nan(0, 0) = std::numeric_limits<double>::quiet_NaN();
	CHECK(regress_error([&] { aggregate_features(ids, nan, cl); }) == RegressErrc::NonFinite);
	const std::vector<survey::ClusterRecord> zero = {cluster("a", 0), cluster("b", 1), cluster("c", 1)};
	CHECK_THROWS_AS(aggregate_features(ids, f, zero, TargetTransform::Log), RegressError);
}

TEST_CASE("target transform names")
{
	CHECK(to_string(TargetTransform::Log) == "log");
	CHECK(transform_from_string("raw") == TargetTransform::Raw);
	CHECK_THROWS_AS(transform_from_string("sqrt"), RegressError);
	CHECK(apply_transform(TargetTransform::Raw, 0.0) == 0.0);
}

TEST_CASE("standardize")
{
	MatrixXd X(2, 2);
	X << 1, 5, 3, 5;
	const auto s = standardize(X);
	CHECK(s.X(0, 0) == -1.0);
	CHECK(s.X(1, 0) == 1.0);
	CHECK(s.X.col(1).isZero());
	CHECK(s.scaler.constant == std::vector<bool>{false, true});
	CHECK(s.scaler.std[1] == 1.0);
	CHECK(s.scaler.apply(X) == s.X);

	SplitMix64 rng(2);
	MatrixXd R = random_matrix(rng, 40, 5) * 7.0;
	R.col(3).setConstant(3.25);
	const auto r = standardize(R);
	for (int j = 0; j < 5; ++j) {
		CHECK(std::abs(r.X.col(j).mean()) < 1e-12);
		if (j != 3)
			CHECK(std::sqrt(r.X.col(j).squaredNorm() / 40.0) == doctest::Approx(1.0).epsilon(1e-12));
	}
	CHECK(r.X.col(3).isZero());
	CHECK(regress_error([] { standardize(MatrixXd::Ones(1, 3)); }) == RegressErrc::TooFewSamples);
}

TEST_CASE("ridge on the three-point fixture")
{
	MatrixXd X(3, 1);
	X << 1, 2, 3;
	const VectorXd y = Eigen::Vector3d(1, 2, 3);
	const auto m = ridge_fit(X, y, 1.0);
	CHECK(m.weights[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
	CHECK(m.intercept == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
	MatrixXd two(1, 1);
	two << 2.0;
	CHECK(std::abs(ridge_predict(m, two)[0] - 2.0) < 1e-14);

	const auto oracle = gd_ridge(X, y, 1.0);
	CHECK(std::abs(oracle.weights[0] - m.weights[0]) < 1e-6);
	CHECK(std::abs(oracle.intercept - m.intercept) < 1e-6);

	const auto ols = ridge_fit(X, y, 0.0);
	CHECK(ols.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
	CHECK(std::abs(ols.intercept) < 1e-12);
	CHECK((ridge_predict(ols, X) - y).norm() < 1e-12);

	const auto huge = ridge_fit(X, y, 1e12);
	CHECK(std::abs(huge.weights[0]) < 1e-10);
	CHECK((ridge_predict(huge, X).array() - 2.0).abs().maxCoeff() < 1e-10);

	RidgeModel zero;
	zero.weights = VectorXd::Zero(2);
	zero.intercept = 4.5;
	CHECK(ridge_predict(zero, MatrixXd::Random(5, 2)) == VectorXd::Constant(5, 4.5));
	CHECK(regress_error([&] { ridge_predict(zero, X); }) == RegressErrc::DimensionMismatch);
	CHECK_THROWS_AS(ridge_fit(X, y, -1.0), RegressError);
	MatrixXd bad = X;
	bad(1, 0) = std::numeric_limits<double>::infinity();
	CHECK(regress_error([&] { ridge_fit(bad, y, 1.0); }) == RegressErrc::NonFinite);
}

TEST_CASE("closed form matches the gradient-descent oracle")
{
	SplitMix64 rng(71);
	for (int trial = 0; trial < 8; ++trial) {
		const Eigen::Index n = 6 + static_cast<Eigen::Index>(rng.below(10));
		const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.below(4));
		const MatrixXd X = random_matrix(rng, n, d);
		VectorXd y(n);
		for (Eigen::Index i = 0; i < n; ++i)
			y[i] = rng.normal() * 3.0 + 1.0;
		const double alpha = std::pow(10.0, static_cast<double>(rng.below(4)) - 1.0);
		const auto m = ridge_fit(X, y, alpha);
		const auto o = gd_ridge(X, y, alpha);
		INFO("trial " << trial << " alpha " << alpha);
		CHECK((m.weights - o.weights).cwiseAbs().maxCoeff() < 1e-6);
		CHECK(std::abs(m.intercept - o.intercept) < 1e-6);
		CHECK((ridge_predict(m, X) - ridge_predict(o, X)).cwiseAbs().maxCoeff() < 1e-6);
	}
}

TEST_CASE("wide and rank-deficient systems")
{
	SplitMix64 rng(9);
	// More columns than rows: the dual solve must agree with the primal normal equations.
	const MatrixXd X = random_matrix(rng, 6, 15);
	const VectorXd y = random_matrix(rng, 6, 1);
	const auto m = ridge_fit(X, y, 0.5);
	const MatrixXd Xc = X.rowwise() - X.colwise().mean();
	const VectorXd yc = y.array() - y.mean();
	const VectorXd w = (Xc.transpose() * Xc + 0.5 * MatrixXd::Identity(15, 15)).ldlt().solve(Xc.transpose() * yc);
	CHECK((m.weights - w).norm() < 1e-10);

	// alpha = 0 with duplicated columns falls back to the minimum-norm solution.
	MatrixXd D(5, 2);
	D << 1, 1, 2, 2, 3, 3, 4, 4, 5, 5;
	const VectorXd yd = Eigen::VectorXd::LinSpaced(5, 2, 10);
	const auto mn = ridge_fit(D, yd, 0.0);
	CHECK(mn.weights[0] == doctest::Approx(1.0).epsilon(1e-10));
	CHECK(mn.weights[1] == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("weight norm shrinks as alpha grows")
{
	SplitMix64 rng(13);
	for (int trial = 0; trial < 10; ++trial) {
		const auto fm = planted(rng, 30, 6, 1.0);
		double prev = std::numeric_limits<double>::infinity();
		for (double a : {0.0, 1e-3, 1e-1, 1.0, 10.0, 1e2, 1e4, 1e6}) {
			const double norm = ridge_fit(fm.X, fm.y, a).weights.norm();
			CHECK(norm <= prev * (1 + 1e-12));
			prev = norm;
		}
	}
}

TEST_CASE("r squared")
{
	const VectorXd a = Eigen::Vector3d(1, 2, 3);
	CHECK(r_squared(a, a) == 1.0);
	CHECK(r_squared(a, VectorXd::Constant(3, 2.0)) == 0.0);
	CHECK(r_squared(a, Eigen::Vector3d(1, 2, 2)) == doctest::Approx(0.5).epsilon(1e-15));
	CHECK(regress_error([] { r_squared(VectorXd::Constant(3, 1.0), Eigen::Vector3d(1, 2, 3)); }) ==
	      RegressErrc::ZeroVariance);
	CHECK(regress_error([&] { r_squared(a, Eigen::Vector2d(1, 2)); }) == RegressErrc::DimensionMismatch);
	CHECK(regress_error([] { r_squared(VectorXd(), VectorXd()); }) == RegressErrc::DimensionMismatch);

	SplitMix64 rng(3);
	for (int trial = 0; trial < 50; ++trial) {
		const VectorXd act = random_matrix(rng, 12, 1);
		const VectorXd pred = act + 0.5 * random_matrix(rng, 12, 1);
		const double scale = std::exp(rng.normal() * 2.0), shift = rng.normal() * 100.0;
		const VectorXd act2 = (act.array() * scale + shift).matrix();
		const VectorXd pred2 = (pred.array() * scale + shift).matrix();
		CHECK(r_squared(act2, pred2) == doctest::Approx(r_squared(act, pred)).epsilon(1e-9));
	}
}

TEST_CASE("fold partition")
{
	const auto f = make_folds(10, 5, 1);
	REQUIRE(f.size() == 5);
	std::vector<int> seen(10, 0);
	for (const auto& fold : f) {
		CHECK(fold.size() == 2);
		CHECK(std::is_sorted(fold.begin(), fold.end()));
		for (auto i : fold)
			++seen[i];
	}
	CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));

	SplitMix64 rng(5);
	for (int trial = 0; trial < 40; ++trial) {
		const int k = 2 + static_cast<int>(rng.below(8));
		const std::size_t n = static_cast<std::size_t>(k) + rng.below(60);
		const std::uint64_t seed = rng.next();
		const auto folds = make_folds(n, k, seed);
		CHECK(folds == make_folds(n, k, seed));
		std::set<std::size_t> all;
		std::size_t lo = n, hi = 0, total = 0;
		for (const auto& fold : folds) {
			lo = std::min(lo, fold.size());
			hi = std::max(hi, fold.size());
			total += fold.size();
			all.insert(fold.begin(), fold.end());
		}
		CHECK(total == n);
		CHECK(all.size() == n);
		CHECK(hi - lo <= 1);
	}
	CHECK(make_folds(20, 4, 1) != make_folds(20, 4, 2));
	CHECK_THROWS_AS(make_folds(3, 5, 0), RegressError);
	CHECK_THROWS_AS(make_folds(10, 1, 0), RegressError);
}

TEST_CASE("held-out rows never influence the fitted fold")
{
	SplitMix64 rng(17);
	const auto fm = planted(rng, 25, 4, 0.5);
	const auto folds = make_folds(25, 5, 3);
	std::vector<std::size_t> train, test = folds[2];
	for (std::size_t f = 0; f < folds.size(); ++f)
		if (f != 2)
			train.insert(train.end(), folds[f].begin(), folds[f].end());
	std::sort(train.begin(), train.end());

	MatrixXd X2 = fm.X;
	VectorXd y2 = fm.y;
	for (auto i : test) {
		X2.row(static_cast<Eigen::Index>(i)).setConstant(1e6 * (1.0 + rng.uniform()));
		y2[static_cast<Eigen::Index>(i)] = -1e9;
	}
	const auto probe = fit_fold(fm.X, fm.y, train, train, 0.1);
	const auto probe2 = fit_fold(X2, y2, train, train, 0.1);
	CHECK(probe == probe2);
	// Scaling held-out rows uses training statistics: same input gives same output.
	const auto held = fit_fold(fm.X, fm.y, train, test, 0.1);
	const auto held_again = fit_fold(fm.X, y2, train, test, 0.1);
	CHECK(held == held_again);
}

TEST_CASE("cross-validation on planted data")
{
	SplitMix64 rng(23);
	const auto fm = planted(rng, 100, 8, 0.3);
	CvConfig cfg;
	cfg.seed = 9;
	const auto rep = cross_validate(fm, cfg);
	CHECK(rep.pooled_r2 >= 0.9);
	CHECK(rep.best_alpha <= 1e-1);
	REQUIRE(rep.per_fold_mse.size() == 5);
	REQUIRE(rep.per_fold_r2.size() == 5);
	REQUIRE(rep.predictions.size() == 100);
	REQUIRE(rep.alpha_scores.size() == cfg.alpha_grid.size());
	double mse_sum = 0;
	for (double m : rep.per_fold_mse)
		mse_sum += m;
	CHECK(rep.mean_mse == doctest::Approx(mse_sum / 5).epsilon(1e-12));

	std::vector<int> per_fold(5, 0);
	VectorXd act(100), pred(100);
	for (std::size_t i = 0; i < rep.predictions.size(); ++i) {
		const auto& p = rep.predictions[i];
		CHECK(p.cluster_id == fm.cluster_ids[i]);
		CHECK(p.actual == fm.y[static_cast<Eigen::Index>(i)]);
		++per_fold[static_cast<std::size_t>(p.fold)];
		act[static_cast<Eigen::Index>(i)] = p.actual;
		pred[static_cast<Eigen::Index>(i)] = p.predicted;
	}
	CHECK(per_fold == std::vector<int>{20, 20, 20, 20, 20});
	CHECK(r_squared(act, pred) == doctest::Approx(rep.pooled_r2).epsilon(1e-12));
	double best = -1e300;
	for (const auto& [a, r2] : rep.alpha_scores)
		best = std::max(best, r2);
	CHECK(best == rep.pooled_r2);

	const auto again = cross_validate(fm, cfg);
	CHECK(again.to_json() == rep.to_json());
}

TEST_CASE("cross-validation on noise")
{
	SplitMix64 rng(29);
	auto fm = planted(rng, 100, 8, 0.3);
	// Shuffling the targets destroys the planted relation.
	std::vector<double> y(fm.y.data(), fm.y.data() + fm.y.size());
	shuffle(y, rng);
	fm.y = Eigen::Map<VectorXd>(y.data(), 100);
	CHECK(cross_validate(fm, {}).pooled_r2 <= 0.1);

	for (Eigen::Index i = 0; i < 100; ++i)
		fm.y[i] = rng.normal();
	CHECK(cross_validate(fm, {}).pooled_r2 <= 0.1);
}

TEST_CASE("alpha ties go to the smaller value")
{
	// Every column is constant, so every alpha predicts the training mean.
	FeatureMatrix fm;
	fm.X = MatrixXd::Ones(12, 2);
	fm.y = VectorXd::LinSpaced(12, 0, 11);
	for (int i = 0; i < 12; ++i)
		fm.cluster_ids.push_back("c" + std::to_string(i + 10));
	CvConfig cfg;
	cfg.k = 3;
	cfg.alpha_grid = {5.0, 0.5, 50.0};
	const auto rep = cross_validate(fm, cfg);
	CHECK(rep.best_alpha == 0.5);
}

TEST_CASE("cv config and report serialization")
{
	CvConfig bad;
	bad.k = 1;
	CHECK(regress_error([&] { bad.validate(); }) == RegressErrc::InvalidConfig);
	bad = {};
	bad.alpha_grid.clear();
	CHECK(regress_error([&] { bad.validate(); }) == RegressErrc::InvalidConfig);
	bad = {};
	bad.alpha_grid = {1.0, -1.0};
	CHECK(regress_error([&] { bad.validate(); }) == RegressErrc::InvalidConfig);
	CvConfig c;
	c.k = 4;
	c.seed = 99;
	CHECK(CvConfig::from_json(c.to_json()).to_json() == c.to_json());

	SplitMix64 rng(1);
	auto fm = planted(rng, 4, 1, 0.1);
	fm.cluster_ids[1] = "with,comma";
	CvConfig small;
	small.k = 4;
	CHECK(regress_error([&] { cross_validate(planted(rng, 3, 1, 0.1), small); }) == RegressErrc::TooFewSamples);
	const auto rep = cross_validate(fm, small);
	// One sample per fold: every per-fold R^2 is undefined.
	for (double r : rep.per_fold_r2)
		CHECK(std::isnan(r));
	const auto j = rep.to_json();
	CHECK(j["per_fold_r2"][0].is_null());
	const auto back = CvReport::from_json(j);
	CHECK(back.to_json() == j);
	CHECK(std::isnan(back.per_fold_r2[0]));
	const auto csv = rep.predictions_csv();
	CHECK(csv.rfind("cluster_id,actual,predicted,fold\n", 0) == 0);
	CHECK(csv.find("\"with,comma\"") != std::string::npos);
}
